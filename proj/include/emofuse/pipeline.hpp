#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emofuse/acoustic_adapter.hpp"
#include "emofuse/feature_store.hpp"
#include "emofuse/fusion_classifier.hpp"
#include "emofuse/metrics.hpp"
#include "emofuse/probe.hpp"
#include "emofuse/synthetic.hpp"
#include "emofuse/visual_align.hpp"

namespace emofuse {

struct RunConfig {
  std::filesystem::path store = "emofuse_store.bin";
  std::filesystem::path out = "emofuse_out";
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  /// Comma-separated subsets are allowed for `cv`, e.g. "a,l,v,alv".
  std::vector<ModalitySet> modalities = {ModalitySet::all()};
  MissingPolicy missing_policy = MissingPolicy::restrict_attention;
  bool skip_align = false;
  std::size_t threads = 0;  // 0: EMOFUSE_THREADS, else hardware concurrency
  double inner_val_fraction = 0.15;

  // Stage 1.
  std::size_t bottleneck = 0;  // 0: min(128, d_a / 2)
  double mask_ratio = 0.15;
  std::size_t best_layer = 2;
  double adapter_lr = 1e-3;
  double adapter_wd = 0.02;
  std::size_t adapter_batch = 16;
  std::size_t adapter_epochs = 30;
  std::size_t adapter_patience = 10;

  // Stage 2.
  double align_lr = 1e-3;
  double align_wd = 0.0;
  std::size_t align_batch = 256;
  std::size_t align_epochs = 100;
  double tau_init = 0.07;
  std::size_t recall_batch = 64;

  // Stage 3.
  std::size_t hidden = 256;
  double fusion_lr = 1e-3;
  double fusion_wd = 0.02;
  std::size_t fusion_batch = 32;
  std::size_t fusion_epochs = 30;
  std::size_t fusion_patience = 10;

  // Layer probe.
  double probe_lr = 5e-3;
  std::size_t probe_epochs = 60;

  // Standalone stages and evaluation.
  std::optional<std::filesystem::path> adapter_checkpoint;
  std::optional<std::filesystem::path> vision_checkpoint;
  std::optional<std::filesystem::path> run_dir;
  Split split = Split::test;
  std::string ensemble = "none";  // or "mean-logits"
  std::optional<std::size_t> fold;

  SyntheticConfig synthetic;

  void validate() const;
  std::string modalities_string() const;
  std::size_t effective_threads() const;
  AdapterTrainConfig adapter_config(const StoreHeader& header, std::uint64_t seed) const;
  AlignTrainConfig align_config(std::uint64_t seed) const;
  FusionTrainConfig fusion_config(ModalitySet subset, std::uint64_t seed) const;
  LinearProbeConfig probe_config() const;
};

enum class ConfigKind { unsigned_int, real, text, flag };

struct ConfigKey {
  std::string name;  // JSON key; the flag is --name with '_' replaced by '-'
  ConfigKind kind;
  std::string help;
};

/// Every key accepted by the config file and the command line.
const std::vector<ConfigKey>& config_keys();

/// Applies one setting given as command-line text. Unknown keys and malformed values are
/// ConfigErrors naming the key.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

/// Applies every key of a JSON object document.
void apply_config_json(RunConfig& config, std::string_view json_text, std::string_view origin);

/// Defaults, then the JSON file (if any), then command-line overrides in order.
RunConfig load_run_config(const std::optional<std::filesystem::path>& config_file,
                          const std::vector<std::pair<std::string, std::string>>& overrides);

// ---------------------------------------------------------------------------

/// Training portion of an outer fold split into a fitting part and an inner validation part
/// used for early stopping. Positions index the labeled sample list.
struct FoldRoles {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> inner_val;
  std::vector<std::size_t> val;
};

FoldRoles fold_roles(const FoldPlan& plan, std::size_t fold, double inner_val_fraction,
                     std::uint64_t seed);

struct SubsetScores {
  ModalitySet modalities;
  std::vector<double> fold_scores;
};

struct CvReport {
  std::size_t folds = 0;
  std::uint64_t seed = 0;
  std::vector<SubsetScores> subsets;
};

/// Header "# emofuse cv folds=K modalities=... seed=S", then modalities/fold/wF1 rows with
/// mean, std and the "NN.NN±N.NN" summary per subset. Contains nothing run-specific.
std::string format_cv_report(const CvReport& report);

/// Audit rows: fold, role (fit, inner_val, val), sample_id.
std::string format_audit(const std::vector<FoldRoles>& roles, const std::vector<Sample>& labeled);

struct AuditCheck {
  bool ok = true;
  std::vector<std::string> problems;
};

/// Every fold's validation ids must be absent from its fit and inner_val rows, and the
/// validation ids must partition the labeled set.
AuditCheck verify_audit(std::string_view audit_tsv);

/// Recall@1 over consecutive chunks of `chunk` pairs (the tail joins the last chunk).
double chunked_recall_at_1(const Tensor2& visual, const Tensor2& acoustic, std::size_t chunk);

/// Loads and validates the store; every consumer goes through this.
FeatureStore load_store(const RunConfig& config);

// Subcommands. Each writes its artifacts under config.out and a short report to `log`.
FeatureStore cmd_gen_data(const RunConfig& config, std::ostream& log);
std::vector<LayerProbeRow> cmd_probe_layers(const RunConfig& config, std::ostream& log);
AdapterTrainResult cmd_train_adapter(const RunConfig& config, std::ostream& log);
AlignTrainResult cmd_align_vision(const RunConfig& config, std::ostream& log);
FusionTrainResult cmd_train_fusion(const RunConfig& config, std::ostream& log);
CvReport cmd_pipeline(const RunConfig& config, std::ostream& log);
CvReport cmd_cv(const RunConfig& config, std::ostream& log);

struct EvalReport {
  std::size_t rows = 0;
  std::optional<double> weighted_f1;
  std::filesystem::path predictions;
};

EvalReport cmd_evaluate(const RunConfig& config, std::ostream& log);

}  // namespace emofuse
