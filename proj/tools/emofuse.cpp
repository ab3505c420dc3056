#include <algorithm>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "emofuse/errors.hpp"
#include "emofuse/pipeline.hpp"

namespace {

using namespace emofuse;

const std::set<std::string> kSyntheticKeys = {
    "n_samples", "n_unlabeled", "n_test", "n_classes", "layers", "acoustic_dim", "visual_dim",
    "lexical_dim", "latent_dim", "peak_layer", "rho_xm", "sigma", "class_sep", "jitter",
    "lexical_scale"};

std::string flag_name(const std::string& key) {
  std::string flag = "--" + key;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return flag;
}

struct Invocation {
  std::optional<std::string> config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help,
                      bool synthetic_keys, Invocation& inv) {
  CLI::App* cmd = app.add_subcommand(name, help);
  cmd->add_option_function<std::string>(
      "--config", [&inv](const std::string& path) { inv.config_file = path; },
      "JSON config file; flags override its values");
  for (const ConfigKey& key : config_keys()) {
    const bool is_synthetic = kSyntheticKeys.count(key.name) > 0;
    const bool common = key.name == "store" || key.name == "seed" || key.name == "out";
    if (!common && is_synthetic != synthetic_keys) continue;
    const std::string k = key.name;
    if (key.kind == ConfigKind::flag) {
      cmd->add_flag_callback(flag_name(k), [&inv, k] { inv.overrides.emplace_back(k, "true"); }, key.help);
    } else {
      cmd->add_option_function<std::string>(
          flag_name(k), [&inv, k](const std::string& v) { inv.overrides.emplace_back(k, v); }, key.help);
    }
  }
  return cmd;
}

int run_command(const std::string& name, const RunConfig& cfg) {
  std::ostream& log = std::cout;
  if (name == "gen-data") {
    cmd_gen_data(cfg, log);
  } else if (name == "probe-layers") {
    cmd_probe_layers(cfg, log);
  } else if (name == "train-adapter") {
    cmd_train_adapter(cfg, log);
  } else if (name == "align-vision") {
    cmd_align_vision(cfg, log);
  } else if (name == "train-fusion") {
    cmd_train_fusion(cfg, log);
  } else if (name == "pipeline") {
    cmd_pipeline(cfg, log);
  } else if (name == "cv") {
    cmd_cv(cfg, log);
  } else if (name == "evaluate") {
    cmd_evaluate(cfg, log);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emofuse: three-stage multimodal emotion recognition on pre-extracted features"};
  app.require_subcommand(1, 1);
  Invocation inv;
  add_command(app, "gen-data", "generate a synthetic feature store", true, inv);
  add_command(app, "probe-layers", "linear-probe every acoustic layer under k-fold CV", false, inv);
  add_command(app, "train-adapter", "stage 1: train acoustic adapters on the labeled split", false, inv);
  add_command(app, "align-vision", "stage 2: align visual features on the unlabeled split", false, inv);
  add_command(app, "train-fusion", "stage 3: train the attention fusion classifier", false, inv);
  add_command(app, "pipeline", "all stages under k-fold CV with checkpoints and metrics", false, inv);
  add_command(app, "cv", "k-fold CV scores for one or more modality subsets", false, inv);
  add_command(app, "evaluate", "predict a split with trained checkpoints", false, inv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = load_run_config(inv.config_file, inv.overrides);
    return run_command(name, cfg);
  } catch (const ConfigError& e) {
    std::cerr << "emofuse " << name << ": configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "emofuse " << name << ": bad argument: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "emofuse " << name << ": numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "emofuse " << name << ": data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "emofuse " << name << ": format error: " << e.what() << "\n";
    return 3;
  } catch (const CorruptionError& e) {
    std::cerr << "emofuse " << name << ": corrupt file: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "emofuse " << name << ": checkpoint error: " << e.what() << "\n";
    return 3;
  } catch (const DimensionError& e) {
    std::cerr << "emofuse " << name << ": dimension error: " << e.what() << "\n";
    return 3;
  } catch (const DegenerateEmbeddingError& e) {
    std::cerr << "emofuse " << name << ": degenerate embedding: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "emofuse " << name << ": " << e.what() << "\n";
    return 1;
  }
}
