// SPDX-License-Identifier: Apache-2.0

#include "mtcm/model.hpp"

#include <stdexcept>

namespace mtcm {

void Model::collect(ParamRefs& out) {
  proxy.collect("proxy", out);
  mtcm.collect("mtcm", out);
  head.collect("head", out);
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.code_dim <= 0 || cfg.channels <= 0) {
    throw std::invalid_argument("make_model: dimensions must be positive");
  }
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  m.proxy = make_proxy_params(cfg.scene.appearances, cfg.code_dim, cfg.channels, cfg.sigma, rng);
  m.mtcm = make_mtcm_state(cfg.channels, cfg.heads, cfg.l1, cfg.l2, cfg.kernel_size, rng);
  m.head = make_head_params(cfg.channels, rng);
  return m;
}

SceneForward forward_scene(const Model& bound, const SyntheticScene& scene,
                           std::uint64_t noise_seed, bool use_aligner, bool use_mce) {
  SceneForward out;
  Tensor tokens = encode_tokens(scene, bound.proxy, noise_seed);
  Tensor s_e = encode_language(scene, bound.cfg.channels);
  Tensor pixels = render_pixel_features(scene, bound.proxy);

  if (use_aligner) {
    AlignerForwardResult ar = aligner_forward(tokens, s_e, bound.mtcm);
    out.perms = ar.perms;
    out.q_hat = use_mce ? mce_forward(ar.outputs, s_e, bound.mtcm) : ar.outputs;
  } else {
    out.q_hat = use_mce ? mce_forward(tokens, s_e, bound.mtcm) : tokens;
  }

  out.logits = target_scores(out.q_hat, s_e, bound.head);
  out.mask_logits = predict_mask_logits(out.q_hat, pixels, bound.head);
  return out;
}

}  // namespace mtcm
