// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: a JSON manifest (format version, provenance, model
// config, parameter names + shapes, payload file) next to a raw
// little-endian f64 payload laid out in manifest order. Round trips are
// bit-exact.

#pragma once

#include <string>

#include "mtcm/model.hpp"

namespace mtcm {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes `manifest_path` and the payload next to it; `payload_name` is
/// stored in the manifest and resolved relative to the manifest's
/// directory on load.
void save_checkpoint(const std::string& manifest_path, const std::string& payload_name,
                     Model& model, const std::string& provenance);

Model load_checkpoint(const std::string& manifest_path);

/// The manifest text without loading the payload, for inspection.
std::string checkpoint_manifest_text(const std::string& manifest_path);

}  // namespace mtcm
