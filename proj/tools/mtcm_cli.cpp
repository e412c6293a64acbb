// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset generation, staged training, metric
// evaluation, the module/strategy ablation grid, and artifact inspection.
// All outputs are deterministic functions of the seeds and configs, so
// repeated runs produce byte-identical files.

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtcm/checkpoint.hpp"
#include "mtcm/config_json.hpp"
#include "mtcm/eval.hpp"
#include "mtcm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// --out-dir flag, then MTCM_OUT_DIR, then a fresh runs/<timestamp>.
fs::path resolve_out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("MTCM_OUT_DIR"); env != nullptr && *env != '\0') return env;
  std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", std::localtime(&now));
  return fs::path("runs") / buf;
}

/// Defaults, overlaid with the config file, overlaid with key=value
/// overrides (dotted paths, e.g. scene.grid=16). Unknown keys rejected.
mtcm::ModelConfig resolve_config(const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  json merged = mtcm::ModelConfig{};
  const json defaults = merged;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config file " + config_path);
    merged.merge_patch(json::parse(in));
  }
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw std::runtime_error("override must look like key=value, got '" + kv + "'");
    }
    std::string ptr_text = "/" + kv.substr(0, eq);
    for (char& c : ptr_text) {
      if (c == '.') c = '/';
    }
    const json::json_pointer ptr(ptr_text);
    if (!defaults.contains(ptr)) {
      throw std::runtime_error("unknown config key '" + kv.substr(0, eq) + "'");
    }
    const std::string value = kv.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      parsed = value;  // bare strings need no quoting
    }
    merged[ptr] = parsed;
  }
  return merged.get<mtcm::ModelConfig>();
}

/// Turns leftover --key=value tokens into config overrides.
void absorb_extras(const CLI::App& sub, std::vector<std::string>& sets) {
  for (const std::string& tok : sub.remaining()) {
    if (tok.rfind("--", 0) == 0 && tok.find('=') != std::string::npos) {
      sets.push_back(tok.substr(2));
    } else {
      throw std::runtime_error("unrecognized argument '" + tok + "'");
    }
  }
}

mtcm::SceneConfig dataset_scene_config(const std::vector<mtcm::SyntheticScene>& scenes,
                                       const std::string& path) {
  if (scenes.empty()) throw std::runtime_error("dataset " + path + " holds no scenes");
  return scenes.front().cfg;
}

void write_pgm(const fs::path& path, const mtcm::BinaryMask& mask) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << mask.grid << " " << mask.grid << "\n255\n";
  for (std::uint8_t b : mask.bits) out.put(b ? static_cast<char>(255) : static_cast<char>(0));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int run_gen(const std::string& config_path, std::vector<std::string> sets, const CLI::App& sub,
            std::uint64_t seed, int count, const std::string& out_flag, const std::string& name) {
  absorb_extras(sub, sets);
  const mtcm::ModelConfig cfg = resolve_config(config_path, sets);
  const fs::path dir = resolve_out_dir(out_flag);
  fs::create_directories(dir);

  std::vector<mtcm::SyntheticScene> scenes = mtcm::generate_dataset(cfg.scene, seed, count);
  const fs::path bin = dir / (name + ".bin");
  const fs::path manifest = dir / (name + ".json");
  mtcm::save_dataset(bin.string(), manifest.string(), scenes, cfg.scene, seed);
  std::cout << "wrote " << scenes.size() << " scenes to " << bin.string() << "\n";
  return 0;
}

int run_train(const std::string& config_path, std::vector<std::string> sets, const CLI::App& sub,
              const std::string& data_path, std::uint64_t seed, int epochs, double lr, int batch,
              bool joint, const std::string& out_flag) {
  absorb_extras(sub, sets);
  mtcm::ModelConfig cfg = resolve_config(config_path, sets);
  std::vector<mtcm::SyntheticScene> scenes = mtcm::load_dataset(data_path);
  const mtcm::SceneConfig data_cfg = dataset_scene_config(scenes, data_path);
  if (!(cfg.scene == data_cfg)) {
    std::cerr << "note: scene geometry comes from the dataset; config scene fields ignored\n";
  }
  cfg.scene = data_cfg;

  mtcm::StagePlan plan = joint
                             ? mtcm::joint_plan(cfg.aligner_on, cfg.mce_on,
                                                (1 + cfg.aligner_on + cfg.mce_on) * epochs, lr)
                             : mtcm::default_stage_plan(cfg.aligner_on, cfg.mce_on, epochs, lr);
  plan.batch_size = batch;
  mtcm::validate_plan(plan, cfg);

  const fs::path dir = resolve_out_dir(out_flag);
  fs::create_directories(dir);
  std::ofstream log((dir / "train_log.jsonl").string());
  if (!log) throw std::runtime_error("cannot open training log in " + dir.string());

  mtcm::Model model = mtcm::make_model(cfg, seed);
  mtcm::train_stagewise(model, scenes, plan, seed, &log);

  std::string stage_names;
  for (const mtcm::StageSpec& s : plan.stages) {
    if (!stage_names.empty()) stage_names += "+";
    stage_names += s.name;
  }
  std::ostringstream provenance;
  provenance << "train seed=" << seed << " stages=" << stage_names << " epochs=" << epochs
             << " lr=" << lr << " batch=" << batch;
  mtcm::save_checkpoint((dir / "checkpoint.json").string(), "checkpoint.bin", model,
                        provenance.str());
  std::cout << "wrote " << (dir / "checkpoint.json").string() << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path, std::uint64_t noise_seed,
             bool dump_masks, const std::string& out_flag) {
  mtcm::Model model = mtcm::load_checkpoint(ckpt_path);
  std::vector<mtcm::SyntheticScene> scenes = mtcm::load_dataset(data_path);
  const mtcm::SceneConfig data_cfg = dataset_scene_config(scenes, data_path);
  if (!(model.cfg.scene == data_cfg)) {
    throw std::runtime_error("dataset scene geometry does not match the checkpoint config");
  }

  const fs::path dir = resolve_out_dir(out_flag);
  fs::create_directories(dir);

  mtcm::EvalReport report = mtcm::evaluate_model(model, scenes, noise_seed);
  {
    std::ofstream out((dir / "report.jsonl").string());
    if (!out) throw std::runtime_error("cannot open report in " + dir.string());
    mtcm::write_report_jsonl(report, out);
  }

  if (dump_masks) {
    const fs::path mask_dir = dir / "masks";
    fs::create_directories(mask_dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      mtcm::ScenePrediction pred =
          mtcm::predict_scene(model, scenes[i], mtcm::mix_seed(noise_seed, i));
      const int G = scenes[i].cfg.grid, P = G * G;
      for (int t = 0; t < scenes[i].cfg.frames; ++t) {
        char stem[64];
        std::snprintf(stem, sizeof stem, "scene%04zu_frame%02d", i, t);
        write_pgm(mask_dir / (std::string(stem) + ".pgm"),
                  pred.frames[static_cast<std::size_t>(t)]);
        mtcm::BinaryMask gt;
        gt.grid = G;
        gt.bits.resize(static_cast<std::size_t>(P));
        const std::size_t base =
            static_cast<std::size_t>((t * scenes[i].cfg.objects + scenes[i].target) * P);
        for (int p = 0; p < P; ++p) {
          gt.bits[static_cast<std::size_t>(p)] = scenes[i].masks[base + static_cast<std::size_t>(p)];
        }
        write_pgm(mask_dir / (std::string(stem) + "_gt.pgm"), gt);
      }
    }
  }

  json agg{{"scenes", report.scenes.size()},     {"mean_j", report.mean_j},
           {"mean_f", report.mean_f},            {"mean_jf", report.mean_jf},
           {"mean_target_acc", report.mean_target_acc},
           {"mean_consistency", report.mean_consistency}};
  std::cout << agg.dump() << "\n";
  if (report.any_nan()) {
    std::cerr << "error: report contains non-finite metrics\n";
    return 3;
  }
  return 0;
}

int run_ablate(const std::string& config_path, std::vector<std::string> sets, const CLI::App& sub,
               const std::string& train_path, const std::string& eval_path, std::uint64_t seed,
               int epochs, double lr, int batch, const std::string& out_flag) {
  absorb_extras(sub, sets);
  mtcm::ModelConfig cfg = resolve_config(config_path, sets);
  std::vector<mtcm::SyntheticScene> train_scenes = mtcm::load_dataset(train_path);
  std::vector<mtcm::SyntheticScene> eval_scenes = mtcm::load_dataset(eval_path);
  cfg.scene = dataset_scene_config(train_scenes, train_path);
  if (!(dataset_scene_config(eval_scenes, eval_path) == cfg.scene)) {
    throw std::runtime_error("train and eval datasets use different scene geometry");
  }

  const fs::path dir = resolve_out_dir(out_flag);
  fs::create_directories(dir);
  std::ofstream log((dir / "ablation_train_log.jsonl").string());
  std::vector<mtcm::AblationRow> rows =
      mtcm::run_ablation(cfg, train_scenes, eval_scenes, epochs, lr, batch, seed, &log);

  bool nan = false;
  std::ofstream out((dir / "ablation.jsonl").string());
  std::printf("%-8s %-5s %-8s %8s %8s %8s %8s %8s\n", "aligner", "mce", "strategy", "J&F", "J",
              "F", "acc", "consist");
  for (const mtcm::AblationRow& r : rows) {
    json row{{"aligner", r.aligner},
             {"mce", r.mce},
             {"strategy", r.strategy},
             {"mean_j", r.report.mean_j},
             {"mean_f", r.report.mean_f},
             {"mean_jf", r.report.mean_jf},
             {"mean_target_acc", r.report.mean_target_acc},
             {"mean_consistency", r.report.mean_consistency},
             {"fingerprint", r.report.fingerprint}};
    out << row.dump() << "\n";
    std::printf("%-8s %-5s %-8s %8.4f %8.4f %8.4f %8.4f %8.4f\n", r.aligner ? "on" : "off",
                r.mce ? "on" : "off", r.strategy ? "on" : "off", r.report.mean_jf,
                r.report.mean_j, r.report.mean_f, r.report.mean_target_acc,
                r.report.mean_consistency);
    nan = nan || r.report.any_nan();
  }
  if (!out) throw std::runtime_error("cannot write ablation table in " + dir.string());
  if (nan) {
    std::cerr << "error: ablation results contain non-finite metrics\n";
    return 3;
  }
  return 0;
}

int run_inspect(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw std::runtime_error("cannot open " + path);
  char head[8] = {};
  probe.read(head, 8);
  probe.close();

  if (std::string(head, 8) == "MTCMDS01") {
    std::vector<mtcm::SyntheticScene> scenes = mtcm::load_dataset(path);
    json cfg_json = scenes.front().cfg;
    json summary{{"kind", "dataset"},
                 {"scenes", scenes.size()},
                 {"config", cfg_json},
                 {"first_seed", scenes.front().seed},
                 {"last_seed", scenes.back().seed}};
    std::cout << summary.dump(2) << "\n";
    return 0;
  }

  const json parsed = json::parse(std::ifstream(path));
  if (parsed.contains("format_version") && parsed.contains("params")) {
    std::cout << mtcm::checkpoint_manifest_text(path) << "\n";
  } else {
    std::cout << parsed.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring-tracking benchmark: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, name = "dataset";
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
  int count = 100;

  CLI::App* gen = app.add_subcommand("gen", "Generate a scene dataset");
  gen->allow_extras();
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--set", sets, "Config override key=value (repeatable)");
  gen->add_option("--seed", seed, "Base scene seed");
  gen->add_option("--count", count, "Number of scenes");
  gen->add_option("--out-dir", out_dir, "Output directory");
  gen->add_option("--name", name, "Dataset file stem");

  std::string data_path;
  int epochs = 30, batch = 2;
  double lr = 1e-3;
  bool joint = false;

  CLI::App* train = app.add_subcommand("train", "Train with the staged plan");
  train->allow_extras();
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--set", sets, "Config override key=value (repeatable)");
  train->add_option("--data", data_path, "Training dataset (.bin)")->required();
  train->add_option("--seed", seed, "Init / shuffle / noise seed");
  train->add_option("--epochs", epochs, "Epochs per stage");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--batch", batch, "Scenes per optimizer step");
  train->add_flag("--joint", joint, "Single joint stage instead of the staged plan");
  train->add_option("--out-dir", out_dir, "Output directory");

  std::string ckpt_path;
  std::uint64_t noise_seed = 0xe7a1;
  bool dump_masks = false;

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint manifest (.json)")->required();
  eval->add_option("--data", data_path, "Evaluation dataset (.bin)")->required();
  eval->add_option("--noise-seed", noise_seed, "Per-scene token noise stream base");
  eval->add_flag("--dump-masks", dump_masks, "Write per-frame PGM masks");
  eval->add_option("--out-dir", out_dir, "Output directory");

  std::string train_path, eval_path;

  CLI::App* ablate = app.add_subcommand("ablate", "Train and evaluate the 8-row module grid");
  ablate->allow_extras();
  ablate->add_option("--config", config_path, "JSON config file");
  ablate->add_option("--set", sets, "Config override key=value (repeatable)");
  ablate->add_option("--train-data", train_path, "Training dataset (.bin)")->required();
  ablate->add_option("--eval-data", eval_path, "Evaluation dataset (.bin)")->required();
  ablate->add_option("--seed", seed, "Init / shuffle / noise seed");
  ablate->add_option("--epochs", epochs, "Epochs per stage");
  ablate->add_option("--lr", lr, "Adam learning rate");
  ablate->add_option("--batch", batch, "Scenes per optimizer step");
  ablate->add_option("--out-dir", out_dir, "Output directory");

  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "Describe a dataset or checkpoint file");
  inspect->add_option("path", inspect_path, "File to describe")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen(config_path, sets, *gen, seed, count, out_dir, name);
    if (train->parsed())
      return run_train(config_path, sets, *train, data_path, seed, epochs, lr, batch, joint,
                       out_dir);
    if (eval->parsed()) return run_eval(ckpt_path, data_path, noise_seed, dump_masks, out_dir);
    if (ablate->parsed())
      return run_ablate(config_path, sets, *ablate, train_path, eval_path, seed, epochs, lr, batch,
                        out_dir);
    if (inspect->parsed()) return run_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
