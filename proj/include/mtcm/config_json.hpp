// SPDX-License-Identifier: Apache-2.0
//
// JSON (de)serialization for configuration structs, shared by the CLI,
// checkpoints and result reports.

#pragma once

#include "json.hpp"
#include "mtcm/model.hpp"
#include "mtcm/train.hpp"

namespace mtcm {

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const StageSpec& s);
void from_json(const nlohmann::json& j, StageSpec& s);

void to_json(nlohmann::json& j, const StagePlan& p);
void from_json(const nlohmann::json& j, StagePlan& p);

/// FNV-1a of the canonical JSON dump, hex string; reports carry it so a
/// result row can be traced to the exact configuration.
std::string config_fingerprint(const nlohmann::json& j);

}  // namespace mtcm
