// SPDX-License-Identifier: Apache-2.0

#include "mtcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "mtcm/config_json.hpp"

namespace mtcm {

namespace {

void require_same_grid(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.grid != b.grid) throw std::invalid_argument(std::string(op) + ": grid mismatch");
  const std::size_t n = static_cast<std::size_t>(a.grid) * static_cast<std::size_t>(a.grid);
  if (a.bits.size() != n || b.bits.size() != n) {
    throw std::invalid_argument(std::string(op) + ": mask size does not match the grid");
  }
}

/// Mask minus its 4-connected erosion; pixels on the grid edge keep
/// their boundary status.
std::vector<std::uint8_t> boundary_of(const BinaryMask& m) {
  const int G = m.grid;
  std::vector<std::uint8_t> out(m.bits.size(), 0);
  auto at = [&](int r, int c) -> bool {
    return r >= 0 && r < G && c >= 0 && c < G && m.bits[static_cast<std::size_t>(r * G + c)] != 0;
  };
  for (int r = 0; r < G; ++r) {
    for (int c = 0; c < G; ++c) {
      if (!at(r, c)) continue;
      const bool interior = at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1);
      if (!interior) out[static_cast<std::size_t>(r * G + c)] = 1;
    }
  }
  return out;
}

}  // namespace

double region_j(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_grid(pred, gt, "region_j");
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double boundary_f(const BinaryMask& pred, const BinaryMask& gt, int r) {
  require_same_grid(pred, gt, "boundary_f");
  if (r < 0) throw std::invalid_argument("boundary_f: tolerance must be non-negative");
  const int G = pred.grid;
  const std::vector<std::uint8_t> pb = boundary_of(pred);
  const std::vector<std::uint8_t> gb = boundary_of(gt);

  const long long np = std::count(pb.begin(), pb.end(), 1);
  const long long ng = std::count(gb.begin(), gb.end(), 1);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  std::vector<std::pair<int, int>> disk;
  for (int dr = -r; dr <= r; ++dr) {
    for (int dc = -r; dc <= r; ++dc) {
      if (dr * dr + dc * dc <= r * r) disk.emplace_back(dr, dc);
    }
  }
  auto dilate = [&](const std::vector<std::uint8_t>& b) {
    std::vector<std::uint8_t> out(b.size(), 0);
    for (int rr = 0; rr < G; ++rr) {
      for (int cc = 0; cc < G; ++cc) {
        if (!b[static_cast<std::size_t>(rr * G + cc)]) continue;
        for (auto [dr, dc] : disk) {
          const int r2 = rr + dr, c2 = cc + dc;
          if (r2 >= 0 && r2 < G && c2 >= 0 && c2 < G) out[static_cast<std::size_t>(r2 * G + c2)] = 1;
        }
      }
    }
    return out;
  };
  const std::vector<std::uint8_t> gd = dilate(gb);
  const std::vector<std::uint8_t> pd = dilate(pb);

  long long pred_matched = 0, gt_matched = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (pb[i] && gd[i]) ++pred_matched;
    if (gb[i] && pd[i]) ++gt_matched;
  }
  const double precision = static_cast<double>(pred_matched) / static_cast<double>(np);
  const double recall = static_cast<double>(gt_matched) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double query_consistency(const std::vector<Permutation>& perms,
                         const std::vector<std::vector<int>>& identity) {
  const int T = static_cast<int>(identity.size());
  if (T < 2) throw std::invalid_argument("query_consistency: need at least two frames");
  const int N = static_cast<int>(identity[0].size());

  auto slot_of = [&](int k, int t) {
    for (int j = 0; j < N; ++j) {
      const int raw = perms.empty() ? j : perms[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
      if (identity[static_cast<std::size_t>(t)][static_cast<std::size_t>(raw)] == k) return j;
    }
    return -1;
  };

  long long total = 0, matched = 0;
  for (int t = 1; t < T; ++t) {
    for (int j = 0; j < N; ++j) {
      const int k = identity[0][static_cast<std::size_t>(j)];
      if (k < 0) continue;
      const int now = slot_of(k, t);
      if (now < 0) continue;  // object absent from this frame
      ++total;
      if (now == slot_of(k, 0)) ++matched;
    }
  }
  if (total == 0) return 1.0;
  return static_cast<double>(matched) / static_cast<double>(total);
}

std::pair<double, double> scene_jf(const std::vector<BinaryMask>& pred_frames,
                                   const SyntheticScene& scene) {
  const int T = scene.cfg.frames, G = scene.cfg.grid;
  if (static_cast<int>(pred_frames.size()) != T) {
    throw std::invalid_argument("scene_jf: one prediction per frame required");
  }
  const int P = G * G;
  double jsum = 0.0, fsum = 0.0;
  for (int t = 0; t < T; ++t) {
    BinaryMask gt;
    gt.grid = G;
    gt.bits.resize(static_cast<std::size_t>(P));
    const std::size_t base = static_cast<std::size_t>((t * scene.cfg.objects + scene.target) * P);
    for (int i = 0; i < P; ++i) gt.bits[static_cast<std::size_t>(i)] = scene.masks[base + i];
    jsum += region_j(pred_frames[static_cast<std::size_t>(t)], gt);
    fsum += boundary_f(pred_frames[static_cast<std::size_t>(t)], gt);
  }
  return {jsum / T, fsum / T};
}

bool EvalReport::any_nan() const {
  auto bad = [](double v) { return !std::isfinite(v); };
  if (bad(mean_j) || bad(mean_f) || bad(mean_jf) || bad(mean_target_acc) || bad(mean_consistency)) {
    return true;
  }
  for (const SceneEval& s : scenes) {
    if (bad(s.j) || bad(s.f) || bad(s.jf) || bad(s.target_acc) || bad(s.consistency)) return true;
  }
  return false;
}

ScenePrediction predict_scene(const Model& model, const SyntheticScene& scene,
                              std::uint64_t noise_seed) {
  const int T = scene.cfg.frames, N = scene.cfg.slots, G = scene.cfg.grid;
  const int P = G * G;
  SceneForward fwd =
      forward_scene(model, scene, noise_seed, model.cfg.aligner_on, model.cfg.mce_on);

  ScenePrediction out;
  double best_mean = -1e300;
  for (int j = 0; j < N; ++j) {
    double mean = 0.0;
    for (int t = 0; t < T; ++t) mean += fwd.logits.at2(t, j);
    if (mean / T > best_mean) {
      best_mean = mean / T;
      out.slot = j;
    }
  }

  out.frames.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    BinaryMask& m = out.frames[static_cast<std::size_t>(t)];
    m.grid = G;
    m.bits.resize(static_cast<std::size_t>(P));
    for (int pix = 0; pix < P; ++pix) {
      m.bits[static_cast<std::size_t>(pix)] = fwd.mask_logits.at3(t, out.slot, pix) > 0.0 ? 1 : 0;
    }
  }
  out.perms = std::move(fwd.perms);
  return out;
}

EvalReport evaluate_model(const Model& model, const std::vector<SyntheticScene>& scenes,
                          std::uint64_t noise_seed_base) {
  EvalReport report;
  nlohmann::json cfg_json = model.cfg;
  report.fingerprint = config_fingerprint(cfg_json);

  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SyntheticScene& scene = scenes[i];
    const int T = scene.cfg.frames, N = scene.cfg.slots;
    ScenePrediction pred = predict_scene(model, scene, mix_seed(noise_seed_base, i));
    const int best_slot = pred.slot;

    SceneEval se;
    se.seed = scene.seed;
    auto [j, f] = scene_jf(pred.frames, scene);
    se.j = j;
    se.f = f;
    se.jf = (j + f) / 2.0;

    int visible_frames = 0, hits = 0;
    for (int t = 0; t < T; ++t) {
      if (!scene.visible(scene.target, t)) continue;
      ++visible_frames;
      const int raw = pred.perms.empty()
                          ? best_slot
                          : pred.perms[static_cast<std::size_t>(t)][static_cast<std::size_t>(best_slot)];
      if (scene.identity_at(t, raw) == scene.target) ++hits;
    }
    se.target_acc = visible_frames > 0 ? static_cast<double>(hits) / visible_frames : 1.0;

    std::vector<std::vector<int>> identity(static_cast<std::size_t>(T),
                                           std::vector<int>(static_cast<std::size_t>(N)));
    for (int t = 0; t < T; ++t) {
      for (int s = 0; s < N; ++s) identity[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] = scene.identity_at(t, s);
    }
    se.consistency = query_consistency(pred.perms, identity);

    report.scenes.push_back(se);
  }

  const double n = static_cast<double>(report.scenes.size());
  for (const SceneEval& s : report.scenes) {
    report.mean_j += s.j / n;
    report.mean_f += s.f / n;
    report.mean_jf += s.jf / n;
    report.mean_target_acc += s.target_acc / n;
    report.mean_consistency += s.consistency / n;
  }
  return report;
}

void write_report_jsonl(const EvalReport& report, std::ostream& out) {
  for (std::size_t i = 0; i < report.scenes.size(); ++i) {
    const SceneEval& s = report.scenes[i];
    nlohmann::json j{{"scene", i},       {"seed", s.seed},  {"j", s.j},
                     {"f", s.f},         {"jf", s.jf},      {"target_acc", s.target_acc},
                     {"consistency", s.consistency}};
    out << j.dump() << "\n";
  }
  nlohmann::json agg{{"aggregate", true},
                     {"scenes", report.scenes.size()},
                     {"mean_j", report.mean_j},
                     {"mean_f", report.mean_f},
                     {"mean_jf", report.mean_jf},
                     {"mean_target_acc", report.mean_target_acc},
                     {"mean_consistency", report.mean_consistency},
                     {"fingerprint", report.fingerprint}};
  out << agg.dump() << "\n";
}

std::vector<AblationRow> run_ablation(const ModelConfig& base_cfg,
                                      const std::vector<SyntheticScene>& train_scenes,
                                      const std::vector<SyntheticScene>& eval_scenes,
                                      int epochs_per_stage, double lr, int batch_size,
                                      std::uint64_t seed, std::ostream* log) {
  std::vector<AblationRow> rows;
  for (int a = 0; a <= 1; ++a) {
    for (int m = 0; m <= 1; ++m) {
      for (int s = 0; s <= 1; ++s) {
        AblationRow row;
        row.aligner = a != 0;
        row.mce = m != 0;
        row.strategy = s != 0;

        ModelConfig cfg = base_cfg;
        cfg.aligner_on = row.aligner;
        cfg.mce_on = row.mce;
        Model model = make_model(cfg, seed);

        const int stages = 1 + (row.aligner ? 1 : 0) + (row.mce ? 1 : 0);
        StagePlan plan = row.strategy
                             ? default_stage_plan(row.aligner, row.mce, epochs_per_stage, lr)
                             : joint_plan(row.aligner, row.mce, stages * epochs_per_stage, lr);
        plan.batch_size = batch_size;
        train_stagewise(model, train_scenes, plan, seed, log);
        row.report = evaluate_model(model, eval_scenes, mix_seed(seed, 0xe7a1));
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

}  // namespace mtcm
