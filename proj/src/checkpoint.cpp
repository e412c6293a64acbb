// SPDX-License-Identifier: Apache-2.0

#include "mtcm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mtcm/config_json.hpp"

namespace mtcm {

namespace {

void write_f64_le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: payload truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& manifest_path, const std::string& payload_name,
                     Model& model, const std::string& provenance) {
  ParamRefs refs;
  model.collect(refs);

  nlohmann::json params = nlohmann::json::array();
  std::size_t total = 0;
  for (auto& [name, t] : refs) {
    params.push_back({{"name", name}, {"shape", t->shape()}});
    total += static_cast<std::size_t>(t->size());
  }
  nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                          {"module", "mtcm"},
                          {"provenance", provenance},
                          {"config", model.cfg},
                          {"payload", payload_name},
                          {"payload_doubles", total},
                          {"params", params}};

  const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  const std::filesystem::path payload_path = dir / payload_name;

  std::ofstream pf(payload_path, std::ios::binary | std::ios::trunc);
  if (!pf) throw std::runtime_error("checkpoint: cannot write " + payload_path.string());
  for (auto& [name, t] : refs) {
    for (int i = 0; i < t->size(); ++i) write_f64_le(pf, t->data()[i]);
  }
  pf.close();
  if (!pf) throw std::runtime_error("checkpoint: failed writing " + payload_path.string());

  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw std::runtime_error("checkpoint: cannot write " + manifest_path);
  mf << manifest.dump(2) << "\n";
  mf.close();
  if (!mf) throw std::runtime_error("checkpoint: failed writing " + manifest_path);
}

Model load_checkpoint(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("checkpoint: cannot open " + manifest_path);
  nlohmann::json manifest = nlohmann::json::parse(mf);

  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version in " + manifest_path);
  }
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  Model model = make_model(cfg, 0);

  ParamRefs refs;
  model.collect(refs);
  const auto& params = manifest.at("params");
  if (params.size() != refs.size()) {
    throw std::runtime_error("checkpoint: parameter list does not match the model layout");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (params[i].at("name").get<std::string>() != refs[i].first) {
      throw std::runtime_error("checkpoint: parameter name mismatch at " + refs[i].first);
    }
    const Shape shape = params[i].at("shape").get<Shape>();
    if (shape != refs[i].second->shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + refs[i].first);
    }
  }

  const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  const std::filesystem::path payload_path = dir / manifest.at("payload").get<std::string>();
  std::ifstream pf(payload_path, std::ios::binary);
  if (!pf) throw std::runtime_error("checkpoint: cannot open " + payload_path.string());
  for (auto& [name, t] : refs) {
    for (int i = 0; i < t->size(); ++i) t->data()[i] = read_f64_le(pf);
  }
  pf.peek();
  if (!pf.eof()) throw std::runtime_error("checkpoint: payload longer than the manifest declares");
  return model;
}

std::string checkpoint_manifest_text(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("checkpoint: cannot open " + manifest_path);
  std::ostringstream ss;
  ss << mf.rdbuf();
  return ss.str();
}

}  // namespace mtcm
