// SPDX-License-Identifier: Apache-2.0

#include "mtcm/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mtcm {

namespace {

constexpr double kJitterScale = 0.2;       // per-object token jitter, code units
constexpr double kVelBasisScale = 0.08;    // velocity-offset strength at init
constexpr double kCoordScale = 0.12;       // coordinate-encoding strength
constexpr double kSpeedMin = 1.0, kSpeedMax = 2.0;
constexpr int kPlacementRetries = 1000;
constexpr double kDisjointMargin = 1.0;
constexpr std::uint64_t kJitterStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kNoiseStream = 0xc2b2ae3d27d4eb4fULL;
constexpr std::uint64_t kLanguageSeed = 0x1ab0de5eed5ULL;
constexpr std::uint64_t kCoordSeed = 0xc00d17a7e5ULL;
constexpr char kMagic[8] = {'M', 'T', 'C', 'M', 'D', 'S', '0', '1'};

double reflect_step(double pos, double& vel, double lo, double hi) {
  pos += vel;
  if (pos < lo) {
    pos = 2.0 * lo - pos;
    vel = -vel;
  } else if (pos > hi) {
    pos = 2.0 * hi - pos;
    vel = -vel;
  }
  return pos;
}

std::vector<double> language_row(std::uint64_t tag, int channels) {
  Rng rng(kLanguageSeed ^ tag);
  return rng.normal_vec(channels);
}

}  // namespace

const char* motion_name(MotionPattern m) {
  switch (m) {
    case MotionPattern::left: return "left";
    case MotionPattern::right: return "right";
    case MotionPattern::up: return "up";
    case MotionPattern::down: return "down";
    case MotionPattern::still: return "static";
    case MotionPattern::appears: return "appears";
  }
  return "?";
}

SyntheticScene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  const int G = cfg.grid, T = cfg.frames, K = cfg.objects, N = cfg.slots;
  if (G < 8) throw std::invalid_argument("generate_scene: grid must be >= 8");
  if (T < 1 || K < 1) throw std::invalid_argument("generate_scene: frames and objects must be >= 1");
  if (K > N) throw std::invalid_argument("generate_scene: more objects than slots");
  if (cfg.radius_min < 1 || cfg.radius_max < cfg.radius_min ||
      2 * cfg.radius_max + 2 >= G) {
    throw std::invalid_argument("generate_scene: bad radius range");
  }

  const bool with_pair = !cfg.all_static && !cfg.unique_appearance && K >= 2 && T >= 4;
  const int distinct_ids = with_pair ? K - 1 : K;
  if (cfg.appearances < distinct_ids) {
    throw std::invalid_argument("generate_scene: appearance vocabulary too small");
  }

  Rng rng(seed);
  SyntheticScene scene;
  scene.cfg = cfg;
  scene.seed = seed;
  scene.objects.resize(static_cast<std::size_t>(K));

  std::vector<int> ids(static_cast<std::size_t>(cfg.appearances));
  for (int i = 0; i < cfg.appearances; ++i) ids[static_cast<std::size_t>(i)] = i;
  rng.shuffle(ids);
  for (int k = 0; k < K; ++k) {
    const int slot = with_pair ? (k == 0 ? 0 : k - 1) : k;  // pair shares ids[0]
    scene.objects[static_cast<std::size_t>(k)].appearance = ids[static_cast<std::size_t>(slot)];
  }

  for (int k = 0; k < K; ++k) {
    SceneObject& o = scene.objects[static_cast<std::size_t>(k)];
    if (cfg.all_static) {
      o.motion = MotionPattern::still;
    } else if (with_pair && k == 0) {
      o.motion = MotionPattern::still;
    } else if (with_pair && k == 1) {
      o.motion = MotionPattern::appears;
    } else {
      o.motion = static_cast<MotionPattern>(rng.uniform_int(0, 4));  // no extra appears
    }
    o.radius = rng.uniform_int(cfg.radius_min, cfg.radius_max);
    o.entry_frame = 0;
    if (o.motion == MotionPattern::appears) {
      o.entry_frame = T >= 5 ? rng.uniform_int(2, T - 3) : T / 2;
    }
  }
  scene.target = rng.uniform_int(0, K - 1);

  bool placed = false;
  for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
    for (int k = 0; k < K; ++k) {
      SceneObject& o = scene.objects[static_cast<std::size_t>(k)];
      const double lo = o.radius + 1.0, hi = G - 2.0 - o.radius;
      double r = lo + rng.uniform() * (hi - lo);
      double c = lo + rng.uniform() * (hi - lo);
      const double speed = kSpeedMin + rng.uniform() * (kSpeedMax - kSpeedMin);
      double vr = 0.0, vc = 0.0;
      switch (o.motion) {
        case MotionPattern::left: vc = -speed; break;
        case MotionPattern::right: vc = speed; break;
        case MotionPattern::up: vr = -speed; break;
        case MotionPattern::down: vr = speed; break;
        default: break;
      }
      o.row.assign(static_cast<std::size_t>(T), 0.0);
      o.col.assign(static_cast<std::size_t>(T), 0.0);
      o.vel_row.assign(static_cast<std::size_t>(T), 0.0);
      o.vel_col.assign(static_cast<std::size_t>(T), 0.0);
      for (int t = 0; t < T; ++t) {
        o.row[static_cast<std::size_t>(t)] = r;
        o.col[static_cast<std::size_t>(t)] = c;
        o.vel_row[static_cast<std::size_t>(t)] = vr;
        o.vel_col[static_cast<std::size_t>(t)] = vc;
        if (t + 1 < T) {
          r = reflect_step(r, vr, lo, hi);
          c = reflect_step(c, vc, lo, hi);
        }
      }
    }
    placed = true;
    for (int t = 0; t < T && placed; ++t) {
      for (int a = 0; a < K && placed; ++a) {
        for (int b = a + 1; b < K && placed; ++b) {
          const SceneObject& oa = scene.objects[static_cast<std::size_t>(a)];
          const SceneObject& ob = scene.objects[static_cast<std::size_t>(b)];
          if (!oa.visible(t) || !ob.visible(t)) continue;
          const double dr = oa.row[static_cast<std::size_t>(t)] - ob.row[static_cast<std::size_t>(t)];
          const double dc = oa.col[static_cast<std::size_t>(t)] - ob.col[static_cast<std::size_t>(t)];
          const double need = oa.radius + ob.radius + kDisjointMargin;
          if (dr * dr + dc * dc < need * need) placed = false;
        }
      }
    }
  }
  if (!placed) {
    throw std::runtime_error("generate_scene: could not place " + std::to_string(K) +
                             " disjoint objects in " + std::to_string(kPlacementRetries) +
                             " attempts");
  }

  scene.masks.assign(static_cast<std::size_t>(T * K * G * G), 0);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < K; ++k) {
      const SceneObject& o = scene.objects[static_cast<std::size_t>(k)];
      if (!o.visible(t)) continue;
      const double cr = o.row[static_cast<std::size_t>(t)], cc = o.col[static_cast<std::size_t>(t)];
      const double r2 = static_cast<double>(o.radius) * o.radius;
      for (int pr = 0; pr < G; ++pr) {
        for (int pc = 0; pc < G; ++pc) {
          const double dr = pr - cr, dc = pc - cc;
          if (dr * dr + dc * dc <= r2) {
            scene.masks[static_cast<std::size_t>(((t * K + k) * G + pr) * G + pc)] = 1;
          }
        }
      }
    }
  }

  scene.identity.assign(static_cast<std::size_t>(T * N), -1);
  for (int t = 0; t < T; ++t) {
    std::vector<int> slots(static_cast<std::size_t>(N), -1);
    for (int k = 0; k < K; ++k) {
      if (scene.objects[static_cast<std::size_t>(k)].visible(t)) slots[static_cast<std::size_t>(k)] = k;
    }
    rng.shuffle(slots);
    for (int j = 0; j < N; ++j) scene.identity[static_cast<std::size_t>(t * N + j)] = slots[static_cast<std::size_t>(j)];
  }
  return scene;
}

ProxyEncoderParams ProxyEncoderParams::tracked(Graph& g) const {
  ProxyEncoderParams out;
  out.appearance = g.leaf(appearance);
  out.vel_basis = g.leaf(vel_basis);
  out.null_code = g.leaf(null_code);
  out.background = g.leaf(background);
  out.proj = g.leaf(proj);
  out.sigma = sigma;
  return out;
}

void ProxyEncoderParams::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".appearance", &appearance);
  out.emplace_back(prefix + ".vel_basis", &vel_basis);
  out.emplace_back(prefix + ".null_code", &null_code);
  out.emplace_back(prefix + ".background", &background);
  out.emplace_back(prefix + ".proj", &proj);
}

ProxyEncoderParams make_proxy_params(int appearances, int code_dim, int channels, double sigma,
                                     Rng& rng) {
  if (appearances < 1 || code_dim < 1 || channels < 1 || sigma < 0.0) {
    throw std::invalid_argument("proxy params: bad configuration");
  }
  ProxyEncoderParams p;
  p.appearance = Tensor({appearances, code_dim}, rng.normal_vec(appearances * code_dim));
  p.vel_basis = Tensor({2, code_dim}, rng.normal_vec(2 * code_dim, kVelBasisScale));
  p.null_code = Tensor({1, code_dim}, rng.normal_vec(code_dim));
  p.background = Tensor({1, code_dim}, rng.normal_vec(code_dim));
  // Near-identity projection: token geometry starts as code geometry.
  std::vector<double> w = rng.normal_vec(code_dim * channels, 0.05 / std::sqrt(static_cast<double>(code_dim)));
  const int m = std::min(code_dim, channels);
  for (int i = 0; i < m; ++i) w[static_cast<std::size_t>(i * channels + i)] += 1.0;
  p.proj = Tensor({code_dim, channels}, std::move(w));
  p.sigma = sigma;
  return p;
}

std::vector<double> token_jitter(const SyntheticScene& scene, int code_dim) {
  Rng rng(scene.seed ^ kJitterStream);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(scene.cfg.objects * code_dim));
  for (int k = 0; k < scene.cfg.objects; ++k) {
    std::vector<double> j = rng.normal_vec(code_dim, kJitterScale);
    out.insert(out.end(), j.begin(), j.end());
  }
  return out;
}

Tensor encode_tokens(const SyntheticScene& scene, const ProxyEncoderParams& p,
                     std::uint64_t noise_seed) {
  const int T = scene.cfg.frames, N = scene.cfg.slots;
  const int D = p.code_dim(), C = p.channels();
  for (const SceneObject& o : scene.objects) {
    if (o.appearance < 0 || o.appearance >= p.appearance.dim(0)) {
      throw std::invalid_argument("encode_tokens: appearance id outside the code table");
    }
  }

  auto jitter = std::make_shared<std::vector<double>>(token_jitter(scene, D));

  auto codes = std::make_shared<std::vector<double>>(static_cast<std::size_t>(T * N * D));
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < N; ++j) {
      double* code = codes->data() + (t * N + j) * D;
      const int k = scene.identity_at(t, j);
      if (k < 0) {
        for (int d = 0; d < D; ++d) code[d] = p.null_code.data()[d];
        continue;
      }
      const SceneObject& o = scene.objects[static_cast<std::size_t>(k)];
      const double vr = o.vel_row[static_cast<std::size_t>(t)], vc = o.vel_col[static_cast<std::size_t>(t)];
      const double* app = p.appearance.data() + o.appearance * D;
      const double* jit = jitter->data() + k * D;
      const double* br = p.vel_basis.data();
      const double* bc = p.vel_basis.data() + D;
      for (int d = 0; d < D; ++d) code[d] = app[d] + jit[d] + vr * br[d] + vc * bc[d];
    }
  }

  std::vector<double> out(static_cast<std::size_t>(T * N * C), 0.0);
  for (int r = 0; r < T * N; ++r) {
    const double* code = codes->data() + r * D;
    double* orow = out.data() + r * C;
    for (int d = 0; d < D; ++d) {
      const double cv = code[d];
      const double* w = p.proj.data() + d * C;
      for (int c = 0; c < C; ++c) orow[c] += cv * w[c];
    }
  }
  if (p.sigma > 0.0) {
    Rng noise_rng(noise_seed ^ (scene.seed * kNoiseStream));
    for (double& v : out) v += noise_rng.normal() * p.sigma;
  }

  Graph* g = nullptr;
  for (const Tensor* t : {&p.appearance, &p.vel_basis, &p.null_code, &p.proj}) {
    if (t->tracked()) {
      if (g && g != t->graph()) throw std::invalid_argument("encode_tokens: mixed graphs");
      g = t->graph();
    }
  }
  if (g == nullptr) return Tensor({T, N, C}, std::move(out));

  const int n_app = p.appearance.node(), n_vel = p.vel_basis.node();
  const int n_null = p.null_code.node(), n_proj = p.proj.node();
  auto proj_data = p.proj.shared_data();
  const int A = p.appearance.dim(0);
  std::vector<int> slot_object(scene.identity.begin(), scene.identity.end());
  std::vector<int> slot_appearance(static_cast<std::size_t>(T * N), -1);
  std::vector<double> slot_vr(static_cast<std::size_t>(T * N), 0.0);
  std::vector<double> slot_vc(static_cast<std::size_t>(T * N), 0.0);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < N; ++j) {
      const int k = scene.identity_at(t, j);
      if (k < 0) continue;
      const SceneObject& o = scene.objects[static_cast<std::size_t>(k)];
      slot_appearance[static_cast<std::size_t>(t * N + j)] = o.appearance;
      slot_vr[static_cast<std::size_t>(t * N + j)] = o.vel_row[static_cast<std::size_t>(t)];
      slot_vc[static_cast<std::size_t>(t * N + j)] = o.vel_col[static_cast<std::size_t>(t)];
    }
  }

  auto back = [=](Graph& gr, const std::vector<double>& og) {
    if (n_proj >= 0) {
      std::vector<double> gp(static_cast<std::size_t>(D * C), 0.0);
      for (int r = 0; r < T * N; ++r) {
        const double* code = codes->data() + r * D;
        const double* orow = og.data() + r * C;
        for (int d = 0; d < D; ++d) {
          const double cv = code[d];
          if (cv == 0.0) continue;
          double* grow = gp.data() + d * C;
          for (int c = 0; c < C; ++c) grow[c] += cv * orow[c];
        }
      }
      gr.accum_grad(n_proj, gp.data(), D * C);
    }
    if (n_app >= 0 || n_vel >= 0 || n_null >= 0) {
      std::vector<double> gcode(static_cast<std::size_t>(D));
      std::vector<double> gapp(static_cast<std::size_t>(A * D), 0.0);
      std::vector<double> gvel(static_cast<std::size_t>(2 * D), 0.0);
      std::vector<double> gnull(static_cast<std::size_t>(D), 0.0);
      for (int r = 0; r < T * N; ++r) {
        const double* orow = og.data() + r * C;
        for (int d = 0; d < D; ++d) {
          const double* w = proj_data->data() + d * C;
          double s = 0.0;
          for (int c = 0; c < C; ++c) s += orow[c] * w[c];
          gcode[static_cast<std::size_t>(d)] = s;
        }
        const int a = slot_appearance[static_cast<std::size_t>(r)];
        if (a < 0) {
          for (int d = 0; d < D; ++d) gnull[static_cast<std::size_t>(d)] += gcode[static_cast<std::size_t>(d)];
        } else {
          const double vr = slot_vr[static_cast<std::size_t>(r)], vc = slot_vc[static_cast<std::size_t>(r)];
          for (int d = 0; d < D; ++d) {
            gapp[static_cast<std::size_t>(a * D + d)] += gcode[static_cast<std::size_t>(d)];
            gvel[static_cast<std::size_t>(d)] += vr * gcode[static_cast<std::size_t>(d)];
            gvel[static_cast<std::size_t>(D + d)] += vc * gcode[static_cast<std::size_t>(d)];
          }
        }
      }
      if (n_app >= 0) gr.accum_grad(n_app, gapp.data(), A * D);
      if (n_vel >= 0) gr.accum_grad(n_vel, gvel.data(), 2 * D);
      if (n_null >= 0) gr.accum_grad(n_null, gnull.data(), D);
    }
  };
  return g->record({T, N, C}, std::move(out),
                   {&p.appearance, &p.vel_basis, &p.null_code, &p.proj}, std::move(back));
}

Tensor encode_language(const SyntheticScene& scene, int channels) {
  const SceneObject& target = scene.objects[static_cast<std::size_t>(scene.target)];
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(kLanguageRows * channels));
  for (const std::vector<double>& r :
       {language_row(0x10000u + static_cast<std::uint64_t>(target.appearance), channels),
        language_row(0x20000u + static_cast<std::uint64_t>(target.motion), channels),
        language_row(0x30000u, channels), language_row(0x30001u, channels)}) {
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return Tensor({kLanguageRows, channels}, std::move(rows));
}

Tensor render_pixel_features(const SyntheticScene& scene, const ProxyEncoderParams& p) {
  const int G = scene.cfg.grid, T = scene.cfg.frames, K = scene.cfg.objects;
  const int D = p.code_dim(), C = p.channels(), P = G * G;

  Rng coord_rng(kCoordSeed);
  std::vector<double> dirs = coord_rng.normal_vec(4 * D, kCoordScale);

  // Owner per pixel per frame; masks are disjoint so the first hit wins.
  auto owner = std::make_shared<std::vector<int>>(static_cast<std::size_t>(T * P), -1);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < K; ++k) {
      const std::uint8_t* m = scene.masks.data() + (t * K + k) * P;
      for (int pix = 0; pix < P; ++pix) {
        if (m[pix]) (*owner)[static_cast<std::size_t>(t * P + pix)] = k;
      }
    }
  }

  // Pixel code = owner code + sum_i f_i(pixel) * dir_i; the projection is
  // linear, so project the few distinct codes and the coordinate field
  // once each instead of projecting every pixel.
  auto coeff = std::make_shared<std::vector<double>>(static_cast<std::size_t>(P * 4));
  for (int pr = 0; pr < G; ++pr) {
    for (int pc = 0; pc < G; ++pc) {
      double* f = coeff->data() + (pr * G + pc) * 4;
      f[0] = static_cast<double>(pr) / (G - 1);
      f[1] = static_cast<double>(pc) / (G - 1);
      f[2] = std::sin(2.0 * M_PI * pc / G);
      f[3] = std::cos(2.0 * M_PI * pr / G);
    }
  }

  auto project_row = [&](const double* code, double* out_row) {
    for (int c = 0; c < C; ++c) out_row[c] = 0.0;
    for (int d = 0; d < D; ++d) {
      const double cv = code[d];
      if (cv == 0.0) continue;
      const double* w = p.proj.data() + d * C;
      for (int c = 0; c < C; ++c) out_row[c] += cv * w[c];
    }
  };

  std::vector<double> pc_codes(static_cast<std::size_t>((K + 1) * C));
  project_row(p.background.data(), pc_codes.data() + K * C);
  for (int k = 0; k < K; ++k) {
    const int a = scene.objects[static_cast<std::size_t>(k)].appearance;
    project_row(p.appearance.data() + a * D, pc_codes.data() + k * C);
  }
  std::vector<double> pdirs(static_cast<std::size_t>(4 * C));
  for (int i = 0; i < 4; ++i) project_row(dirs.data() + i * D, pdirs.data() + i * C);

  std::vector<double> field(static_cast<std::size_t>(P * C), 0.0);
  for (int pix = 0; pix < P; ++pix) {
    double* frow = field.data() + pix * C;
    const double* f = coeff->data() + pix * 4;
    for (int i = 0; i < 4; ++i) {
      const double* dv = pdirs.data() + i * C;
      for (int c = 0; c < C; ++c) frow[c] += f[i] * dv[c];
    }
  }

  std::vector<double> out(static_cast<std::size_t>(T * P * C));
  for (int t = 0; t < T; ++t) {
    for (int pix = 0; pix < P; ++pix) {
      const int k = (*owner)[static_cast<std::size_t>(t * P + pix)];
      const double* code = pc_codes.data() + (k < 0 ? K : k) * C;
      const double* frow = field.data() + pix * C;
      double* orow = out.data() + (t * P + pix) * C;
      for (int c = 0; c < C; ++c) orow[c] = code[c] + frow[c];
    }
  }

  Graph* g = nullptr;
  for (const Tensor* t : {&p.appearance, &p.background, &p.proj}) {
    if (t->tracked()) {
      if (g && g != t->graph()) throw std::invalid_argument("render_pixel_features: mixed graphs");
      g = t->graph();
    }
  }
  if (g == nullptr) return Tensor({T, P, C}, std::move(out));

  const int n_app = p.appearance.node(), n_bg = p.background.node(), n_proj = p.proj.node();
  const int A = p.appearance.dim(0);
  auto app_data = p.appearance.shared_data();
  auto bg_data = p.background.shared_data();
  auto proj_data = p.proj.shared_data();
  auto dirs_copy = std::make_shared<std::vector<double>>(std::move(dirs));
  std::vector<int> obj_appearance(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) obj_appearance[static_cast<std::size_t>(k)] = scene.objects[static_cast<std::size_t>(k)].appearance;

  auto back = [=](Graph& gr, const std::vector<double>& og) {
    // Per-owner and per-coordinate-function sums over pixels.
    std::vector<double> sums(static_cast<std::size_t>((K + 1) * C), 0.0);
    std::vector<double> fsum(static_cast<std::size_t>(4 * C), 0.0);
    for (int t = 0; t < T; ++t) {
      for (int pix = 0; pix < P; ++pix) {
        const double* orow = og.data() + (t * P + pix) * C;
        const int k = (*owner)[static_cast<std::size_t>(t * P + pix)];
        double* srow = sums.data() + (k < 0 ? K : k) * C;
        const double* f = coeff->data() + pix * 4;
        for (int c = 0; c < C; ++c) srow[c] += orow[c];
        for (int i = 0; i < 4; ++i) {
          double* frow = fsum.data() + i * C;
          const double fv = f[i];
          for (int c = 0; c < C; ++c) frow[c] += fv * orow[c];
        }
      }
    }
    if (n_proj >= 0) {
      std::vector<double> gp(static_cast<std::size_t>(D * C), 0.0);
      auto outer_acc = [&](const double* code, const double* srow) {
        for (int d = 0; d < D; ++d) {
          const double cv = code[d];
          if (cv == 0.0) continue;
          double* grow = gp.data() + d * C;
          for (int c = 0; c < C; ++c) grow[c] += cv * srow[c];
        }
      };
      for (int k = 0; k < K; ++k) {
        outer_acc(app_data->data() + obj_appearance[static_cast<std::size_t>(k)] * D, sums.data() + k * C);
      }
      outer_acc(bg_data->data(), sums.data() + K * C);
      for (int i = 0; i < 4; ++i) outer_acc(dirs_copy->data() + i * D, fsum.data() + i * C);
      gr.accum_grad(n_proj, gp.data(), D * C);
    }
    auto through_proj = [&](const double* srow, double* gcode) {
      for (int d = 0; d < D; ++d) {
        const double* w = proj_data->data() + d * C;
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += srow[c] * w[c];
        gcode[d] += s;
      }
    };
    if (n_app >= 0) {
      std::vector<double> ga(static_cast<std::size_t>(A * D), 0.0);
      for (int k = 0; k < K; ++k) {
        through_proj(sums.data() + k * C, ga.data() + obj_appearance[static_cast<std::size_t>(k)] * D);
      }
      gr.accum_grad(n_app, ga.data(), A * D);
    }
    if (n_bg >= 0) {
      std::vector<double> gb(static_cast<std::size_t>(D), 0.0);
      through_proj(sums.data() + K * C, gb.data());
      gr.accum_grad(n_bg, gb.data(), D);
    }
  };
  return g->record({T, P, C}, std::move(out), {&p.appearance, &p.background, &p.proj},
                   std::move(back));
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("dataset: truncated record");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

void put_rle(std::string& buf, const std::uint8_t* bits, int n) {
  std::vector<std::uint32_t> runs;
  std::uint8_t cur = 0;
  std::uint32_t len = 0;
  for (int i = 0; i < n; ++i) {
    if (bits[i] == cur) {
      ++len;
    } else {
      runs.push_back(len);
      cur ^= 1;
      len = 1;
    }
  }
  runs.push_back(len);
  put_u32(buf, static_cast<std::uint32_t>(runs.size()));
  for (std::uint32_t r : runs) put_u32(buf, r);
}

void get_rle(Cursor& cur, std::uint8_t* bits, int n) {
  const std::uint32_t nruns = cur.u32();
  std::uint8_t value = 0;
  int at = 0;
  for (std::uint32_t i = 0; i < nruns; ++i) {
    const std::uint32_t len = cur.u32();
    if (at + static_cast<int>(len) > n) throw std::runtime_error("dataset: RLE overrun");
    for (std::uint32_t j = 0; j < len; ++j) bits[at++] = value;
    value ^= 1;
  }
  if (at != n) throw std::runtime_error("dataset: RLE underrun");
}

std::string encode_record(const SyntheticScene& s) {
  std::string buf;
  const SceneConfig& c = s.cfg;
  for (int v : {c.grid, c.frames, c.objects, c.slots, c.radius_min, c.radius_max, c.appearances,
                c.all_static ? 1 : 0, c.unique_appearance ? 1 : 0}) {
    put_u32(buf, static_cast<std::uint32_t>(v));
  }
  put_u64(buf, s.seed);
  put_u32(buf, static_cast<std::uint32_t>(s.target));
  for (const SceneObject& o : s.objects) {
    put_u32(buf, static_cast<std::uint32_t>(o.appearance));
    put_u32(buf, static_cast<std::uint32_t>(o.motion));
    put_u32(buf, static_cast<std::uint32_t>(o.radius));
    put_u32(buf, static_cast<std::uint32_t>(o.entry_frame));
    for (const std::vector<double>* v : {&o.row, &o.col, &o.vel_row, &o.vel_col}) {
      for (double x : *v) put_f64(buf, x);
    }
  }
  for (int v : s.identity) put_u32(buf, static_cast<std::uint32_t>(v));
  const int plane = c.grid * c.grid;
  for (int t = 0; t < c.frames; ++t) {
    for (int k = 0; k < c.objects; ++k) {
      put_rle(buf, s.masks.data() + (t * c.objects + k) * plane, plane);
    }
  }
  return buf;
}

SyntheticScene decode_record(const std::string& buf) {
  Cursor cur{buf};
  SyntheticScene s;
  SceneConfig& c = s.cfg;
  c.grid = static_cast<int>(cur.u32());
  c.frames = static_cast<int>(cur.u32());
  c.objects = static_cast<int>(cur.u32());
  c.slots = static_cast<int>(cur.u32());
  c.radius_min = static_cast<int>(cur.u32());
  c.radius_max = static_cast<int>(cur.u32());
  c.appearances = static_cast<int>(cur.u32());
  c.all_static = cur.u32() != 0;
  c.unique_appearance = cur.u32() != 0;
  s.seed = cur.u64();
  s.target = static_cast<int>(cur.u32());
  s.objects.resize(static_cast<std::size_t>(c.objects));
  for (SceneObject& o : s.objects) {
    o.appearance = static_cast<int>(cur.u32());
    o.motion = static_cast<MotionPattern>(cur.u32());
    o.radius = static_cast<int>(cur.u32());
    o.entry_frame = static_cast<int>(cur.u32());
    for (std::vector<double>* v : {&o.row, &o.col, &o.vel_row, &o.vel_col}) {
      v->resize(static_cast<std::size_t>(c.frames));
      for (double& x : *v) x = cur.f64();
    }
  }
  s.identity.resize(static_cast<std::size_t>(c.frames * c.slots));
  for (int& v : s.identity) v = static_cast<int>(cur.u32());
  const int plane = c.grid * c.grid;
  s.masks.assign(static_cast<std::size_t>(c.frames * c.objects * plane), 0);
  for (int t = 0; t < c.frames; ++t) {
    for (int k = 0; k < c.objects; ++k) {
      get_rle(cur, s.masks.data() + (t * c.objects + k) * plane, plane);
    }
  }
  if (cur.pos != buf.size()) throw std::runtime_error("dataset: trailing bytes in record");
  return s;
}

}  // namespace

void save_dataset(const std::string& bin_path, const std::string& manifest_path,
                  const std::vector<SyntheticScene>& scenes, const SceneConfig& cfg,
                  std::uint64_t base_seed) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot open " + bin_path + " for writing");
  out.write(kMagic, 8);
  std::string head;
  put_u32(head, static_cast<std::uint32_t>(scenes.size()));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const SyntheticScene& s : scenes) {
    const std::string rec = encode_record(s);
    std::string len;
    put_u32(len, static_cast<std::uint32_t>(rec.size()));
    out.write(len.data(), 4);
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw std::runtime_error("dataset: write failed for " + bin_path);

  nlohmann::json manifest;
  manifest["scenes"] = scenes.size();
  manifest["base_seed"] = base_seed;
  manifest["config"] = {{"grid", cfg.grid},
                        {"frames", cfg.frames},
                        {"objects", cfg.objects},
                        {"slots", cfg.slots},
                        {"radius_min", cfg.radius_min},
                        {"radius_max", cfg.radius_max},
                        {"appearances", cfg.appearances},
                        {"all_static", cfg.all_static},
                        {"unique_appearance", cfg.unique_appearance}};
  std::ofstream mf(manifest_path);
  if (!mf) throw std::runtime_error("dataset: cannot open " + manifest_path + " for writing");
  mf << manifest.dump(2) << "\n";
}

std::vector<SyntheticScene> load_dataset(const std::string& bin_path) {
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw std::runtime_error("dataset: cannot open " + bin_path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("dataset: bad magic in " + bin_path);
  }
  char cntbuf[4];
  in.read(cntbuf, 4);
  if (!in) throw std::runtime_error("dataset: truncated header");
  std::uint32_t count = 0;
  for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(static_cast<unsigned char>(cntbuf[i])) << (8 * i);

  std::vector<SyntheticScene> scenes;
  scenes.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    char lenbuf[4];
    in.read(lenbuf, 4);
    if (!in) throw std::runtime_error("dataset: truncated record length");
    std::uint32_t len = 0;
    for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(lenbuf[b])) << (8 * b);
    std::string rec(len, '\0');
    in.read(rec.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("dataset: truncated record body");
    scenes.push_back(decode_record(rec));
  }
  return scenes;
}

std::vector<SyntheticScene> generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed,
                                             int count) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    scenes.push_back(generate_scene(cfg, base_seed + static_cast<std::uint64_t>(i)));
  }
  return scenes;
}

}  // namespace mtcm
