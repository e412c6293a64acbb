// SPDX-License-Identifier: Apache-2.0
//
// Segmentation metrics (region J, boundary F, their mean), alignment
// quality (query consistency), model evaluation over a dataset, and the
// module/strategy ablation grid.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtcm/model.hpp"
#include "mtcm/train.hpp"

namespace mtcm {

struct BinaryMask {
  int grid = 0;
  std::vector<std::uint8_t> bits;  // G*G row-major
};

/// Intersection over union; two empty masks count as a perfect match.
double region_j(const BinaryMask& pred, const BinaryMask& gt);

/// Pixel distance within which boundary pixels count as matched.
inline constexpr int kBoundaryTolerance = 1;

/// Contour F-measure: boundaries are masks minus their 4-connected
/// erosion, matched within Euclidean distance r (dilation method),
/// F = harmonic mean of precision and recall. Two empty boundaries
/// count as a perfect match.
double boundary_f(const BinaryMask& pred, const BinaryMask& gt, int r = kBoundaryTolerance);

/// Fraction of (frame, object) pairs, over frames after the first, where
/// an object present in both that frame and the first sits in the same
/// aligned slot in both. identity[t][slot] gives the object in a raw
/// slot (-1 = none); empty perms mean identity permutations.
double query_consistency(const std::vector<Permutation>& perms,
                         const std::vector<std::vector<int>>& identity);

struct SceneEval {
  std::uint64_t seed = 0;
  double j = 0.0, f = 0.0, jf = 0.0;
  double target_acc = 0.0;
  double consistency = 0.0;
};

struct EvalReport {
  std::vector<SceneEval> scenes;
  double mean_j = 0.0, mean_f = 0.0, mean_jf = 0.0;
  double mean_target_acc = 0.0, mean_consistency = 0.0;
  std::string fingerprint;  // of the model config

  bool any_nan() const;
};

/// J and F for externally supplied per-frame predictions against the
/// scene's target masks, averaged over frames.
std::pair<double, double> scene_jf(const std::vector<BinaryMask>& pred_frames,
                                   const SyntheticScene& scene);

struct ScenePrediction {
  int slot = 0;  // aligned slot with the highest time-mean target logit
  std::vector<BinaryMask> frames;
  std::vector<Permutation> perms;  // empty when the aligner is off
};

/// One inference pass: selects the target slot for the whole video and
/// thresholds its mask logits at 0.5.
ScenePrediction predict_scene(const Model& model, const SyntheticScene& scene,
                              std::uint64_t noise_seed);

/// Runs the model on every scene: the predicted instance is the slot
/// with the highest time-mean logit for the whole video, its mask is
/// thresholded at 0.5. Frames average into scenes, scenes into means.
EvalReport evaluate_model(const Model& model, const std::vector<SyntheticScene>& scenes,
                          std::uint64_t noise_seed_base);

/// One JSON object per scene plus one aggregate object.
void write_report_jsonl(const EvalReport& report, std::ostream& out);

struct AblationRow {
  bool aligner = false;
  bool mce = false;
  bool strategy = false;
  EvalReport report;
};

/// Trains and evaluates the full {aligner} x {mce} x {strategy} grid
/// from identical initialization and data seeds. Joint rows get the same
/// total epoch budget as their staged counterparts.
std::vector<AblationRow> run_ablation(const ModelConfig& base_cfg,
                                      const std::vector<SyntheticScene>& train_scenes,
                                      const std::vector<SyntheticScene>& eval_scenes,
                                      int epochs_per_stage, double lr, int batch_size,
                                      std::uint64_t seed, std::ostream* log = nullptr);

}  // namespace mtcm
