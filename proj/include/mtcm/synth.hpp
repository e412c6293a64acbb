// SPDX-License-Identifier: Apache-2.0
//
// Synthetic referring-tracking benchmark: scenes of moving disks on a
// grid, a proxy encoder that emits per-frame instance tokens with
// per-frame slot shuffles and noise, language features describing the
// target, and per-pixel features for the mask head.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtcm/rng.hpp"
#include "mtcm/tensor.hpp"

namespace mtcm {

enum class MotionPattern { left, right, up, down, still, appears };
inline constexpr int kMotionPatternCount = 6;
const char* motion_name(MotionPattern m);

struct SceneConfig {
  int grid = 32;
  int frames = 8;
  int objects = 4;  // K
  int slots = 8;    // N, K <= N
  int radius_min = 2;
  int radius_max = 3;
  int appearances = 8;  // size of the appearance vocabulary
  // Difficulty knobs. Default: one same-appearance {still, appears} pair
  // whose members only language motion + temporal context can tell apart.
  bool all_static = false;
  bool unique_appearance = false;

  bool operator==(const SceneConfig&) const = default;
};

struct SceneObject {
  int appearance = 0;
  MotionPattern motion = MotionPattern::still;
  int radius = 2;
  int entry_frame = 0;  // first visible frame; 0 unless appears
  std::vector<double> row, col;          // center per frame
  std::vector<double> vel_row, vel_col;  // outgoing velocity per frame

  bool visible(int t) const { return t >= entry_frame; }
  bool operator==(const SceneObject&) const = default;
};

struct SyntheticScene {
  SceneConfig cfg;
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  int target = 0;
  std::vector<std::uint8_t> masks;  // [T x K x G x G] binary
  std::vector<int> identity;        // [T x N] object index per slot, -1 = null

  bool mask_at(int t, int k, int r, int c) const {
    return masks[static_cast<std::size_t>(((t * cfg.objects + k) * cfg.grid + r) * cfg.grid + c)] != 0;
  }
  int identity_at(int t, int slot) const {
    return identity[static_cast<std::size_t>(t * cfg.slots + slot)];
  }
  bool visible(int k, int t) const { return objects[static_cast<std::size_t>(k)].visible(t); }

  bool operator==(const SyntheticScene&) const = default;
};

/// Deterministic scene from (cfg, seed): straight-line trajectories with
/// border reflection, pairwise-disjoint disks, per-frame slot shuffles
/// recorded in the identity map. Throws after bounded placement retries.
SyntheticScene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

struct ProxyEncoderParams {
  Tensor appearance;  // [A x D] code per appearance id
  Tensor vel_basis;   // [2 x D] linear velocity-to-offset map
  Tensor null_code;   // [1 x D] content of empty slots
  Tensor background;  // [1 x D] pixel code outside every object
  Tensor proj;        // [D x C]
  double sigma = 0.0;  // per-channel token noise std

  int code_dim() const { return proj.empty() ? 0 : proj.dim(0); }
  int channels() const { return proj.empty() ? 0 : proj.dim(1); }
  ProxyEncoderParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

/// Codes are unit-variance; proj starts near the identity, so token
/// geometry mirrors code geometry before training.
ProxyEncoderParams make_proxy_params(int appearances, int code_dim, int channels, double sigma,
                                     Rng& rng);

/// [T x N x C] instance tokens. Slot content follows scene.identity;
/// object tokens are proj(appearance + per-object jitter + velocity
/// offset), empty slots carry the null code. Jitter is re-derived from
/// scene.seed; the Gaussian noise stream comes from noise_seed. Tracked
/// when the params are tracked.
Tensor encode_tokens(const SyntheticScene& scene, const ProxyEncoderParams& p,
                     std::uint64_t noise_seed);

/// [K x code_dim] per-object jitter, re-derived from scene.seed. Keeps
/// same-appearance objects distinct realizations without carrying any
/// language-visible information.
std::vector<double> token_jitter(const SyntheticScene& scene, int code_dim);

/// [L_s x C] language rows: target appearance word, target motion word,
/// two fixed template rows. Drawn from a fixed seeded table, independent
/// of the proxy encoder.
Tensor encode_language(const SyntheticScene& scene, int channels);
inline constexpr int kLanguageRows = 4;

/// [T x G*G x C] per-pixel features: covering object's appearance code
/// (or background) plus a fixed coordinate encoding, projected like the
/// tokens. Tracked when the params are tracked.
Tensor render_pixel_features(const SyntheticScene& scene, const ProxyEncoderParams& p);

/// Length-prefixed little-endian records plus a JSON manifest.
void save_dataset(const std::string& bin_path, const std::string& manifest_path,
                  const std::vector<SyntheticScene>& scenes, const SceneConfig& cfg,
                  std::uint64_t base_seed);
std::vector<SyntheticScene> load_dataset(const std::string& bin_path);

/// Scenes for seeds base_seed + 0 .. count-1.
std::vector<SyntheticScene> generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed,
                                             int count);

}  // namespace mtcm
