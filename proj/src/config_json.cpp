// SPDX-License-Identifier: Apache-2.0

#include "mtcm/config_json.hpp"

#include <cstdint>
#include <cstdio>

namespace mtcm {

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"grid", c.grid},
                     {"frames", c.frames},
                     {"objects", c.objects},
                     {"slots", c.slots},
                     {"radius_min", c.radius_min},
                     {"radius_max", c.radius_max},
                     {"appearances", c.appearances},
                     {"all_static", c.all_static},
                     {"unique_appearance", c.unique_appearance}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  SceneConfig d;
  c.grid = j.value("grid", d.grid);
  c.frames = j.value("frames", d.frames);
  c.objects = j.value("objects", d.objects);
  c.slots = j.value("slots", d.slots);
  c.radius_min = j.value("radius_min", d.radius_min);
  c.radius_max = j.value("radius_max", d.radius_max);
  c.appearances = j.value("appearances", d.appearances);
  c.all_static = j.value("all_static", d.all_static);
  c.unique_appearance = j.value("unique_appearance", d.unique_appearance);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"scene", c.scene},
                     {"code_dim", c.code_dim},
                     {"channels", c.channels},
                     {"heads", c.heads},
                     {"l1", c.l1},
                     {"l2", c.l2},
                     {"kernel_size", c.kernel_size},
                     {"sigma", c.sigma},
                     {"aligner_on", c.aligner_on},
                     {"mce_on", c.mce_on}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  if (j.contains("scene")) j.at("scene").get_to(c.scene);
  c.code_dim = j.value("code_dim", d.code_dim);
  c.channels = j.value("channels", d.channels);
  c.heads = j.value("heads", d.heads);
  c.l1 = j.value("l1", d.l1);
  c.l2 = j.value("l2", d.l2);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.sigma = j.value("sigma", d.sigma);
  c.aligner_on = j.value("aligner_on", d.aligner_on);
  c.mce_on = j.value("mce_on", d.mce_on);
}

void to_json(nlohmann::json& j, const StageSpec& s) {
  j = nlohmann::json{{"name", s.name}, {"epochs", s.epochs}, {"lr", s.lr}};
}

void from_json(const nlohmann::json& j, StageSpec& s) {
  j.at("name").get_to(s.name);
  StageSpec d;
  s.epochs = j.value("epochs", d.epochs);
  s.lr = j.value("lr", d.lr);
}

void to_json(nlohmann::json& j, const StagePlan& p) {
  j = nlohmann::json{{"stages", p.stages}, {"batch_size", p.batch_size}};
}

void from_json(const nlohmann::json& j, StagePlan& p) {
  StagePlan d;
  if (j.contains("stages")) j.at("stages").get_to(p.stages);
  p.batch_size = j.value("batch_size", d.batch_size);
}

std::string config_fingerprint(const nlohmann::json& j) {
  const std::string text = j.dump();
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace mtcm
