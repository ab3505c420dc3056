#include "emofuse/pipeline.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "emofuse/checkpoint.hpp"
#include "emofuse/errors.hpp"
#include "emofuse/rng.hpp"
#include "json.hpp"

namespace emofuse {

namespace {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config keys

std::uint64_t parse_unsigned(std::string_view key, std::string_view text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(text) + "'");
  }
  return v;
}

double parse_real(std::string_view key, std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + std::string(key) + "' expects a finite number, got '" + s + "'");
  }
  return v;
}

bool parse_flag(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "' expects true or false, got '" +
                    std::string(text) + "'");
}

std::vector<ModalitySet> parse_modality_list(std::string_view text) {
  std::vector<ModalitySet> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const ModalitySet set = ModalitySet::parse(text.substr(start, comma - start));
    if (std::find(out.begin(), out.end(), set) == out.end()) out.push_back(set);
    start = comma + 1;
  }
  return out;
}

/// Setting values arrive as text (command line) or JSON scalars; both are normalized to text.
using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;

struct KeyEntry {
  ConfigKey key;
  Setter set;
};

template <class T>
Setter set_unsigned(T RunConfig::*member) {
  return [member](RunConfig& c, std::string_view k, std::string_view v) {
    c.*member = static_cast<T>(parse_unsigned(k, v));
  };
}
Setter set_real(double RunConfig::*member) {
  return [member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_real(k, v); };
}
template <class T>
Setter set_syn_unsigned(T SyntheticConfig::*member) {
  return [member](RunConfig& c, std::string_view k, std::string_view v) {
    c.synthetic.*member = static_cast<T>(parse_unsigned(k, v));
  };
}
Setter set_syn_real(double SyntheticConfig::*member) {
  return [member](RunConfig& c, std::string_view k, std::string_view v) {
    c.synthetic.*member = parse_real(k, v);
  };
}
Setter set_path(std::filesystem::path RunConfig::*member) {
  return [member](RunConfig& c, std::string_view, std::string_view v) { c.*member = std::string(v); };
}
Setter set_optional_path(std::optional<std::filesystem::path> RunConfig::*member) {
  return [member](RunConfig& c, std::string_view, std::string_view v) {
    c.*member = std::filesystem::path(std::string(v));
  };
}

const std::vector<KeyEntry>& key_table() {
  using K = ConfigKind;
  static const std::vector<KeyEntry> table = {
      {{"store", K::text, "feature store file"}, set_path(&RunConfig::store)},
      {{"out", K::text, "output directory"}, set_path(&RunConfig::out)},
      {{"seed", K::unsigned_int, "master random seed"},
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.seed = parse_unsigned(k, v);
         c.synthetic.seed = c.seed;
       }},
      {{"folds", K::unsigned_int, "number of cross-validation folds"}, set_unsigned(&RunConfig::folds)},
      {{"modalities", K::text, "modality subset(s) from {a,l,v}, e.g. alv or a,l,v,alv"},
       [](RunConfig& c, std::string_view, std::string_view v) { c.modalities = parse_modality_list(v); }},
      {{"missing_policy", K::text, "restrict, impute-zero or strict"},
       [](RunConfig& c, std::string_view, std::string_view v) {
         c.missing_policy = missing_policy_from_name(v);
       }},
      {{"skip_align", K::flag, "fuse raw visual features instead of aligned ones"},
       [](RunConfig& c, std::string_view k, std::string_view v) { c.skip_align = parse_flag(k, v); }},
      {{"threads", K::unsigned_int, "parallel folds (0: EMOFUSE_THREADS or all cores)"},
       set_unsigned(&RunConfig::threads)},
      {{"inner_val_fraction", K::real, "share of each training portion held out for early stopping"},
       set_real(&RunConfig::inner_val_fraction)},
      {{"bottleneck", K::unsigned_int, "adapter bottleneck width (0: min(128, d_a/2))"},
       set_unsigned(&RunConfig::bottleneck)},
      {{"mask_ratio", K::real, "masked-reconstruction coordinate ratio"}, set_real(&RunConfig::mask_ratio)},
      {{"best_layer", K::unsigned_int, "layer index whose weight starts at 1"},
       set_unsigned(&RunConfig::best_layer)},
      {{"adapter_lr", K::real, "stage-1 learning rate"}, set_real(&RunConfig::adapter_lr)},
      {{"adapter_wd", K::real, "stage-1 weight decay"}, set_real(&RunConfig::adapter_wd)},
      {{"adapter_batch", K::unsigned_int, "stage-1 batch size"}, set_unsigned(&RunConfig::adapter_batch)},
      {{"adapter_epochs", K::unsigned_int, "stage-1 epochs"}, set_unsigned(&RunConfig::adapter_epochs)},
      {{"adapter_patience", K::unsigned_int, "stage-1 early-stopping patience"},
       set_unsigned(&RunConfig::adapter_patience)},
      {{"align_lr", K::real, "stage-2 learning rate"}, set_real(&RunConfig::align_lr)},
      {{"align_wd", K::real, "stage-2 weight decay"}, set_real(&RunConfig::align_wd)},
      {{"align_batch", K::unsigned_int, "stage-2 batch size"}, set_unsigned(&RunConfig::align_batch)},
      {{"align_epochs", K::unsigned_int, "stage-2 epochs"}, set_unsigned(&RunConfig::align_epochs)},
      {{"tau_init", K::real, "initial contrastive temperature"}, set_real(&RunConfig::tau_init)},
      {{"recall_batch", K::unsigned_int, "pairs per retrieval batch when scoring alignment"},
       set_unsigned(&RunConfig::recall_batch)},
      {{"hidden", K::unsigned_int, "fusion projection width"}, set_unsigned(&RunConfig::hidden)},
      {{"fusion_lr", K::real, "stage-3 learning rate"}, set_real(&RunConfig::fusion_lr)},
      {{"fusion_wd", K::real, "stage-3 weight decay"}, set_real(&RunConfig::fusion_wd)},
      {{"fusion_batch", K::unsigned_int, "stage-3 batch size"}, set_unsigned(&RunConfig::fusion_batch)},
      {{"fusion_epochs", K::unsigned_int, "stage-3 epochs"}, set_unsigned(&RunConfig::fusion_epochs)},
      {{"fusion_patience", K::unsigned_int, "stage-3 early-stopping patience"},
       set_unsigned(&RunConfig::fusion_patience)},
      {{"probe_lr", K::real, "layer-probe learning rate"}, set_real(&RunConfig::probe_lr)},
      {{"probe_epochs", K::unsigned_int, "layer-probe epochs"}, set_unsigned(&RunConfig::probe_epochs)},
      {{"adapter", K::text, "adapter checkpoint to consume"}, set_optional_path(&RunConfig::adapter_checkpoint)},
      {{"vision", K::text, "vision checkpoint to consume"}, set_optional_path(&RunConfig::vision_checkpoint)},
      {{"run", K::text, "directory of a previous pipeline or training run"},
       set_optional_path(&RunConfig::run_dir)},
      {{"split", K::text, "labeled, unlabeled or test"},
       [](RunConfig& c, std::string_view k, std::string_view v) {
         const auto s = split_from_name(v);
         if (!s) throw ConfigError("config key '" + std::string(k) + "' has unknown split '" + std::string(v) + "'");
         c.split = *s;
       }},
      {{"ensemble", K::text, "none or mean-logits"},
       [](RunConfig& c, std::string_view, std::string_view v) { c.ensemble = std::string(v); }},
      {{"fold", K::unsigned_int, "evaluate the checkpoints of this fold"},
       [](RunConfig& c, std::string_view k, std::string_view v) { c.fold = parse_unsigned(k, v); }},
      {{"n_samples", K::unsigned_int, "labeled samples to generate"}, set_syn_unsigned(&SyntheticConfig::n_samples)},
      {{"n_unlabeled", K::unsigned_int, "unlabeled samples to generate"},
       set_syn_unsigned(&SyntheticConfig::n_unlabeled)},
      {{"n_test", K::unsigned_int, "test samples to generate"}, set_syn_unsigned(&SyntheticConfig::n_test)},
      {{"n_classes", K::unsigned_int, "number of classes (must be 6)"},
       set_syn_unsigned(&SyntheticConfig::n_classes)},
      {{"layers", K::unsigned_int, "acoustic layers per sample"}, set_syn_unsigned(&SyntheticConfig::layers)},
      {{"acoustic_dim", K::unsigned_int, "acoustic feature width"},
       set_syn_unsigned(&SyntheticConfig::acoustic_dim)},
      {{"visual_dim", K::unsigned_int, "visual feature width"}, set_syn_unsigned(&SyntheticConfig::visual_dim)},
      {{"lexical_dim", K::unsigned_int, "lexical feature width"}, set_syn_unsigned(&SyntheticConfig::lexical_dim)},
      {{"latent_dim", K::unsigned_int, "shared latent width"}, set_syn_unsigned(&SyntheticConfig::latent_dim)},
      {{"peak_layer", K::unsigned_int, "layer index with the strongest signal"},
       set_syn_unsigned(&SyntheticConfig::peak_layer)},
      {{"rho_xm", K::real, "visual signal scale (cross-modal correlation)"}, set_syn_real(&SyntheticConfig::rho_xm)},
      {{"sigma", K::real, "noise scale"}, set_syn_real(&SyntheticConfig::sigma)},
      {{"class_sep", K::real, "class-center norm"}, set_syn_real(&SyntheticConfig::class_sep)},
      {{"jitter", K::real, "per-sample latent jitter scale"}, set_syn_real(&SyntheticConfig::jitter)},
      {{"lexical_scale", K::real, "lexical signal scale"}, set_syn_real(&SyntheticConfig::lexical_scale)},
  };
  return table;
}

const KeyEntry& find_key(std::string_view name) {
  for (const auto& e : key_table())
    if (e.key.name == name) return e;
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Small helpers

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::vector<const Sample*> pick(const std::vector<Sample>& samples, const std::vector<std::size_t>& positions) {
  std::vector<const Sample*> out;
  out.reserve(positions.size());
  for (std::size_t p : positions) out.push_back(&samples[p]);
  return out;
}

std::vector<const Sample*> all_of(const std::vector<Sample>& samples) {
  return pointers_to(std::span<const Sample>(samples));
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

/// Fixed-size pool over independent work items; the first failure by index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_inner(
    std::vector<std::size_t> positions, double fraction, std::uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(positions));
  std::size_t n_inner = 0;
  if (positions.size() >= 2) {
    n_inner = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(positions.size())));
    n_inner = std::clamp<std::size_t>(n_inner, 1, positions.size() - 1);
  }
  std::vector<std::size_t> inner(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(n_inner));
  std::vector<std::size_t> fit(positions.begin() + static_cast<std::ptrdiff_t>(n_inner), positions.end());
  std::sort(inner.begin(), inner.end());
  std::sort(fit.begin(), fit.end());
  return {fit, inner};
}

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

struct StageNeeds {
  bool adapter = false;
  bool align = false;
};

StageNeeds stage_needs(const RunConfig& c) {
  StageNeeds needs;
  for (const auto& m : c.modalities) {
    if (m.contains(Modality::acoustic)) needs.adapter = true;
    if (m.contains(Modality::visual) && !c.skip_align) needs.align = needs.adapter = true;
  }
  return needs;
}

void require_unlabeled(const std::vector<Sample>& unlabeled) {
  if (unlabeled.size() < 2) {
    throw ConfigError("visual alignment needs the unlabeled split, but the store has " +
                      std::to_string(unlabeled.size()) +
                      " unlabeled samples; pass --skip-align to fuse raw visual features");
  }
}

FusionDims fusion_dims(const StoreHeader& h, const RunConfig& c, bool aligned) {
  FusionDims d;
  d.acoustic_dim = h.acoustic_dim;
  d.lexical_dim = h.lexical_dim;
  d.visual_dim = aligned ? h.acoustic_dim : h.visual_dim;
  d.hidden = c.hidden;
  return d;
}

std::string fusion_file_name(const RunConfig& c, const ModalitySet& subset) {
  return c.modalities.size() == 1 ? "fusion.ckpt" : "fusion_" + subset.to_string() + ".ckpt";
}

std::string fusion_log_name(const RunConfig& c, const ModalitySet& subset) {
  return c.modalities.size() == 1 ? "fusion_log.tsv" : "fusion_" + subset.to_string() + "_log.tsv";
}

struct AlignmentSummary {
  std::size_t pairs = 0;
  double gap_before = 0.0;
  double gap_after = 0.0;
  double recall_at_1 = 0.0;
};

AlignmentSummary summarize_alignment(SampleBatch heldout, const AdapterModel& adapter,
                                     const VisionMLP& before, const VisionMLP& after,
                                     std::size_t recall_batch) {
  AlignmentSummary s;
  s.pairs = heldout.size();
  if (heldout.size() < 2) return s;
  const Tensor2 acoustic = acoustic_embeddings(heldout, adapter);
  const Tensor2 visual = visual_matrix(heldout);
  const Tensor2 fv_before = vision_forward_batch(visual, before);
  const Tensor2 fv_after = vision_forward_batch(visual, after);
  s.gap_before = alignment_gap(fv_before, acoustic);
  s.gap_after = alignment_gap(fv_after, acoustic);
  s.recall_at_1 = chunked_recall_at_1(fv_after, acoustic, recall_batch);
  return s;
}

std::string describe_alignment(const AlignmentSummary& s) {
  return "held-out pairs " + std::to_string(s.pairs) + ", gap " + fixed(s.gap_before) + " -> " +
         fixed(s.gap_after) + ", recall@1 " + fixed(s.recall_at_1);
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldOutcome {
  std::vector<double> scores;  // one per configured subset
  std::string notes;
};

FoldOutcome run_fold(const RunConfig& c, const StoreHeader& header, const std::vector<Sample>& labeled,
                     const std::vector<Sample>& unlabeled, const std::vector<Sample>& test,
                     const FoldRoles& roles, std::size_t fold,
                     const std::optional<std::filesystem::path>& artifacts) {
  const std::uint64_t fold_seed = derive_seed(c.seed, 0x100 + fold);
  const StageNeeds needs = stage_needs(c);
  const auto fit = pick(labeled, roles.fit);
  const auto inner = pick(labeled, roles.inner_val);
  const auto val = pick(labeled, roles.val);
  std::ostringstream notes;
  FoldOutcome outcome;

  std::optional<AdapterModel> adapter;
  if (needs.adapter) {
    AdapterTrainResult r = train_adapter_stage(fit, inner, c.adapter_config(header, derive_seed(fold_seed, 1)));
    notes << "fold " << fold << " adapter: best epoch " << r.best_epoch << " of " << r.log.size() << "\n";
    if (artifacts) {
      save_checkpoint(r.model, *artifacts / "adapter.ckpt");
      write_text(*artifacts / "adapter_log.tsv", format_adapter_log(r.log));
    }
    adapter.emplace(std::move(r.model));
  }

  std::optional<VisionMLP> vision;
  if (needs.align) {
    const AlignTrainConfig ac = c.align_config(derive_seed(fold_seed, 2));
    const auto pairs = all_of(unlabeled);
    AlignTrainResult r = train_alignment_stage(pairs, *adapter, ac);
    const VisionMLP before = initial_vision_mlp(header.visual_dim, header.acoustic_dim, ac);
    const auto heldout = all_of(test);
    notes << "fold " << fold << " alignment: "
          << describe_alignment(summarize_alignment(heldout, *adapter, before, r.mlp, c.recall_batch))
          << "\n";
    if (artifacts) {
      save_checkpoint(r.mlp, *artifacts / "vision.ckpt");
      write_text(*artifacts / "align_log.tsv", format_align_log(r.log));
    }
    vision.emplace(std::move(r.mlp));
  }

  const FusionUpstream upstream{adapter ? &*adapter : nullptr, vision ? &*vision : nullptr};
  for (const ModalitySet& subset : c.modalities) {
    const auto fit_ex = build_fusion_examples(fit, upstream, subset);
    const auto inner_ex = build_fusion_examples(inner, upstream, subset);
    const auto val_ex = build_fusion_examples(val, upstream, subset);
    const FusionDims dims = fusion_dims(header, c, vision.has_value());
    FusionTrainResult r = train_fusion_stage(fit_ex, inner_ex, dims,
                                             c.fusion_config(subset, derive_seed(fold_seed, 3)));
    const double score = fusion_weighted_f1(val_ex, r.model);
    outcome.scores.push_back(score);
    notes << "fold " << fold << " fusion " << subset.to_string() << ": best epoch " << r.best_epoch
          << ", val wF1 " << fixed(score) << "\n";
    if (artifacts) {
      save_checkpoint(r.model, *artifacts / fusion_file_name(c, subset));
      write_text(*artifacts / fusion_log_name(c, subset), format_fusion_log(r.log));
    }
  }
  outcome.notes = notes.str();
  return outcome;
}

CvReport run_cross_validation(const RunConfig& c, std::ostream& log, bool save_models,
                              const std::string& report_name) {
  c.validate();
  const FeatureStore store = load_store(c);
  const auto labeled = store.samples(Split::labeled);
  const auto unlabeled = store.samples(Split::unlabeled);
  const auto test = store.samples(Split::test);
  if (labeled.empty()) throw DataError("the store has no labeled samples; cross-validation needs them");
  if (labeled.size() < c.folds) {
    throw ArgumentError("cannot split " + std::to_string(labeled.size()) + " labeled samples into " +
                        std::to_string(c.folds) + " folds");
  }
  if (stage_needs(c).align) require_unlabeled(unlabeled);

  std::vector<std::string> ids;
  for (const auto& s : labeled) ids.push_back(s.id);
  const FoldPlan plan = kfold_split(ids, c.folds, c.seed);
  std::vector<FoldRoles> roles;
  for (std::size_t f = 0; f < c.folds; ++f) roles.push_back(fold_roles(plan, f, c.inner_val_fraction, c.seed));

  std::filesystem::create_directories(c.out);
  write_text(c.out / "audit.tsv", format_audit(roles, labeled));

  std::vector<FoldOutcome> outcomes(c.folds);
  parallel_for(c.folds, c.effective_threads(), [&](std::size_t f) {
    std::optional<std::filesystem::path> dir;
    if (save_models) dir = c.out / ("fold_" + std::to_string(f));
    outcomes[f] = run_fold(c, store.header, labeled, unlabeled, test, roles[f], f, dir);
  });

  CvReport report;
  report.folds = c.folds;
  report.seed = c.seed;
  for (std::size_t s = 0; s < c.modalities.size(); ++s) {
    SubsetScores row{c.modalities[s], {}};
    for (const auto& o : outcomes) row.fold_scores.push_back(o.scores[s]);
    report.subsets.push_back(std::move(row));
  }
  for (const auto& o : outcomes) log << o.notes;
  write_text(c.out / report_name, format_cv_report(report));
  for (const auto& row : report.subsets) {
    log << row.modalities.to_string() << "\t" << format_mean_std_percent(row.fold_scores) << "\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ModelSet {
  std::filesystem::path dir;
  std::optional<AdapterModel> adapter;
  std::optional<VisionMLP> vision;
  std::optional<FusionModel> fusion;
};

ModelSet load_model_set(const std::filesystem::path& dir, const RunConfig& c, const StoreHeader& h) {
  ModelSet set;
  set.dir = dir;
  std::filesystem::path fusion_path = dir / "fusion.ckpt";
  if (!std::filesystem::exists(fusion_path)) fusion_path = dir / ("fusion_" + c.modalities.front().to_string() + ".ckpt");
  if (!std::filesystem::exists(fusion_path)) {
    throw CheckpointError("no fusion checkpoint in '" + dir.string() + "'");
  }
  set.fusion.emplace(load_fusion_checkpoint(fusion_path));
  const ModalitySet& mods = set.fusion->modalities();

  const std::filesystem::path adapter_path = c.adapter_checkpoint.value_or(dir / "adapter.ckpt");
  if (mods.contains(Modality::acoustic) || std::filesystem::exists(adapter_path)) {
    AdapterDims expected;
    expected.layers = h.layers;
    expected.feature_dim = h.acoustic_dim;
    set.adapter.emplace(load_adapter_checkpoint(adapter_path, expected));
  }
  const std::filesystem::path vision_path = c.vision_checkpoint.value_or(dir / "vision.ckpt");
  if (mods.contains(Modality::visual) && std::filesystem::exists(vision_path)) {
    set.vision.emplace(load_vision_checkpoint(vision_path, h.visual_dim, h.acoustic_dim));
  }
  const FusionUpstream upstream{set.adapter ? &*set.adapter : nullptr, set.vision ? &*set.vision : nullptr};
  check_fusion_compatibility(*set.fusion, upstream, h.visual_dim, h.lexical_dim);
  return set;
}

std::vector<std::filesystem::path> fold_dirs(const std::filesystem::path& run) {
  std::vector<std::pair<std::size_t, std::filesystem::path>> found;
  if (std::filesystem::is_directory(run)) {
    for (const auto& entry : std::filesystem::directory_iterator(run)) {
      const std::string name = entry.path().filename().string();
      if (!entry.is_directory() || name.rfind("fold_", 0) != 0) continue;
      try {
        found.emplace_back(parse_unsigned("fold", name.substr(5)), entry.path());
      } catch (const ConfigError&) {
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<std::filesystem::path> out;
  for (auto& [i, p] : found) out.push_back(p);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config key '" + key + "' " + why);
  };
  if (folds < 2) fail("folds", "must be at least 2");
  if (modalities.empty()) fail("modalities", "must name at least one subset");
  if (!(inner_val_fraction > 0.0 && inner_val_fraction < 1.0)) fail("inner_val_fraction", "must be in (0, 1)");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) fail("mask_ratio", "must be in [0, 1)");
  for (auto [name, v] : {std::pair{"adapter_lr", adapter_lr}, {"align_lr", align_lr},
                         {"fusion_lr", fusion_lr}, {"probe_lr", probe_lr}, {"adapter_wd", adapter_wd},
                         {"align_wd", align_wd}, {"fusion_wd", fusion_wd}}) {
    if (!(v >= 0.0)) fail(name, "must be >= 0");
  }
  for (auto [name, v] : {std::pair{"adapter_batch", adapter_batch}, {"fusion_batch", fusion_batch},
                         {"hidden", hidden}, {"recall_batch", recall_batch}}) {
    if (v == 0) fail(name, "must be positive");
  }
  if (align_batch < 2) fail("align_batch", "must be at least 2");
  if (recall_batch < 2) fail("recall_batch", "must be at least 2");
  if (!(tau_init >= kMinTemperature && tau_init <= kMaxTemperature)) fail("tau_init", "must be in [0.01, 1]");
  if (ensemble != "none" && ensemble != "mean-logits") fail("ensemble", "must be none or mean-logits");
}

std::string RunConfig::modalities_string() const {
  std::string s;
  for (const auto& m : modalities) {
    if (!s.empty()) s += ',';
    s += m.to_string();
  }
  return s;
}

std::size_t RunConfig::effective_threads() const {
  std::size_t n = threads;
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EMOFUSE_THREADS"); env && *env) {
    const std::uint64_t cap = parse_unsigned("EMOFUSE_THREADS", env);
    if (cap > 0) n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(1, n);
}

AdapterTrainConfig RunConfig::adapter_config(const StoreHeader& header, std::uint64_t stage_seed) const {
  AdapterTrainConfig a;
  a.dims.layers = header.layers;
  a.dims.feature_dim = header.acoustic_dim;
  a.dims.bottleneck = bottleneck != 0 ? bottleneck : std::min<std::size_t>(128, header.acoustic_dim / 2);
  if (a.dims.bottleneck == 0 || a.dims.bottleneck >= a.dims.feature_dim) {
    throw ConfigError("config key 'bottleneck' must be in [1, " + std::to_string(header.acoustic_dim) +
                      ") for acoustic dim " + std::to_string(header.acoustic_dim));
  }
  if (best_layer >= header.layers) {
    throw ConfigError("config key 'best_layer' is " + std::to_string(best_layer) + " but the store has " +
                      std::to_string(header.layers) + " layers");
  }
  a.best_layer = best_layer;
  a.mask_ratio = mask_ratio;
  a.adam.lr = adapter_lr;
  a.adam.weight_decay = adapter_wd;
  a.batch_size = adapter_batch;
  a.epochs = adapter_epochs;
  a.patience = adapter_patience;
  a.seed = stage_seed;
  return a;
}

AlignTrainConfig RunConfig::align_config(std::uint64_t stage_seed) const {
  AlignTrainConfig a;
  a.adam.lr = align_lr;
  a.adam.weight_decay = align_wd;
  a.batch_size = align_batch;
  a.epochs = align_epochs;
  a.tau_init = tau_init;
  a.seed = stage_seed;
  return a;
}

FusionTrainConfig RunConfig::fusion_config(ModalitySet subset, std::uint64_t stage_seed) const {
  FusionTrainConfig f;
  f.hidden = hidden;
  f.modalities = subset;
  f.policy = missing_policy;
  f.adam.lr = fusion_lr;
  f.adam.weight_decay = fusion_wd;
  f.batch_size = fusion_batch;
  f.epochs = fusion_epochs;
  f.patience = fusion_patience;
  f.seed = stage_seed;
  return f;
}

LinearProbeConfig RunConfig::probe_config() const {
  LinearProbeConfig p;
  p.adam.lr = probe_lr;
  p.epochs = probe_epochs;
  p.seed = seed;
  return p;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : key_table()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  find_key(key).set(config, key, value);
}

void apply_config_json(RunConfig& config, std::string_view json_text, std::string_view origin) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config '" + std::string(origin) + "': " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config '" + std::string(origin) + "' must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    const KeyEntry& entry = find_key(key);
    std::string text;
    switch (entry.key.kind) {
      case ConfigKind::text:
        if (!value.is_string()) throw ConfigError("config key '" + key + "' expects a string");
        text = value.get<std::string>();
        break;
      case ConfigKind::flag:
        if (!value.is_boolean()) throw ConfigError("config key '" + key + "' expects true or false");
        text = value.get<bool>() ? "true" : "false";
        break;
      case ConfigKind::unsigned_int:
        if (!value.is_number_unsigned()) throw ConfigError("config key '" + key + "' expects a non-negative integer");
        text = std::to_string(value.get<std::uint64_t>());
        break;
      case ConfigKind::real:
        if (!value.is_number()) throw ConfigError("config key '" + key + "' expects a number");
        text = value.dump();
        break;
    }
    entry.set(config, key, text);
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& config_file,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig config;
  if (config_file) {
    std::ifstream in(*config_file, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + config_file->string() + "'");
    std::ostringstream text;
    text << in.rdbuf();
    apply_config_json(config, text.str(), config_file->string());
  }
  for (const auto& [key, value] : overrides) set_config_value(config, key, value);
  return config;
}

// ---------------------------------------------------------------------------
// CV bookkeeping

FoldRoles fold_roles(const FoldPlan& plan, std::size_t fold, double inner_val_fraction,
                     std::uint64_t seed) {
  FoldRoles roles;
  auto [fit, inner] = split_inner(plan.training_positions(fold), inner_val_fraction,
                                  derive_seed(seed, 0x696e6e00 + fold));
  roles.fit = std::move(fit);
  roles.inner_val = std::move(inner);
  roles.val = plan.folds.at(fold);
  return roles;
}

std::string format_cv_report(const CvReport& report) {
  std::ostringstream out;
  std::string mods;
  for (const auto& s : report.subsets) mods += (mods.empty() ? "" : ",") + s.modalities.to_string();
  out << "# emofuse cv folds=" << report.folds << " modalities=" << mods << " seed=" << report.seed << "\n";
  out << "modalities\tfold\twF1\n";
  for (const auto& s : report.subsets) {
    const std::string tag = s.modalities.to_string();
    for (std::size_t f = 0; f < s.fold_scores.size(); ++f)
      out << tag << "\t" << f << "\t" << fixed(s.fold_scores[f], 6) << "\n";
    const MeanStd ms = mean_std(s.fold_scores);
    out << tag << "\tmean\t" << fixed(ms.mean, 6) << "\n";
    out << tag << "\tstd\t" << fixed(ms.std, 6) << "\n";
    out << tag << "\tsummary\t" << format_mean_std_percent(s.fold_scores) << "\n";
  }
  return out.str();
}

std::string format_audit(const std::vector<FoldRoles>& roles, const std::vector<Sample>& labeled) {
  std::ostringstream out;
  out << "fold\trole\tsample_id\n";
  for (std::size_t f = 0; f < roles.size(); ++f) {
    for (std::size_t p : roles[f].fit) out << f << "\tfit\t" << labeled[p].id << "\n";
    for (std::size_t p : roles[f].inner_val) out << f << "\tinner_val\t" << labeled[p].id << "\n";
    for (std::size_t p : roles[f].val) out << f << "\tval\t" << labeled[p].id << "\n";
  }
  return out.str();
}

AuditCheck verify_audit(std::string_view audit_tsv) {
  AuditCheck check;
  auto problem = [&](std::string what) {
    check.ok = false;
    check.problems.push_back(std::move(what));
  };
  std::map<std::string, std::set<std::string>> training, validation;
  std::map<std::string, std::string> val_owner;
  std::set<std::string> everyone;
  std::istringstream in{std::string(audit_tsv)};
  std::string line;
  bool header = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (header) {
      header = false;
      if (line != "fold\trole\tsample_id") problem("unexpected audit header");
      continue;
    }
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      problem("malformed audit line " + std::to_string(line_no));
      continue;
    }
    const std::string fold = line.substr(0, t1);
    const std::string role = line.substr(t1 + 1, t2 - t1 - 1);
    const std::string id = line.substr(t2 + 1);
    everyone.insert(id);
    if (role == "fit" || role == "inner_val") {
      if (!training[fold].insert(id).second) problem("fold " + fold + " trains on '" + id + "' twice");
    } else if (role == "val") {
      validation[fold].insert(id);
      auto [it, fresh] = val_owner.emplace(id, fold);
      if (!fresh) problem("'" + id + "' validates in folds " + it->second + " and " + fold);
    } else {
      problem("unknown audit role '" + role + "'");
    }
  }
  for (const auto& [fold, ids] : validation) {
    for (const auto& id : ids) {
      if (training[fold].count(id)) problem("fold " + fold + " trains on its validation sample '" + id + "'");
    }
  }
  for (const auto& id : everyone) {
    if (!val_owner.count(id)) problem("'" + id + "' never appears in a validation fold");
  }
  if (validation.empty()) problem("audit has no validation rows");
  return check;
}

double chunked_recall_at_1(const Tensor2& visual, const Tensor2& acoustic, std::size_t chunk) {
  if (visual.rows() != acoustic.rows()) throw DimensionError("recall needs matched pairs");
  const std::size_t n = visual.rows();
  if (n < 2) throw ArgumentError("recall needs at least two pairs");
  chunk = std::max<std::size_t>(2, std::min(chunk, n));
  double hits = 0.0;
  std::size_t start = 0;
  while (start < n) {
    std::size_t len = std::min(chunk, n - start);
    if (n - start - len < 2) len = n - start;
    Tensor2 v(len, visual.cols()), a(len, acoustic.cols());
    for (std::size_t r = 0; r < len; ++r) {
      const auto vs = visual.row(start + r);
      const auto as = acoustic.row(start + r);
      std::copy(vs.begin(), vs.end(), v.row(r).begin());
      std::copy(as.begin(), as.end(), a.row(r).begin());
    }
    hits += retrieval_recall_at_1(v, a) * static_cast<double>(len);
    start += len;
  }
  return hits / static_cast<double>(n);
}

FeatureStore load_store(const RunConfig& config) {
  if (!std::filesystem::exists(config.store)) {
    throw DataError("feature store '" + config.store.string() + "' does not exist");
  }
  return read_store(config.store);
}

// ---------------------------------------------------------------------------
// Subcommands

FeatureStore cmd_gen_data(const RunConfig& config, std::ostream& log) {
  FeatureStore store = generate_synthetic(config.synthetic);
  write_store(store, config.store);
  std::array<std::size_t, kNumEmotions> histogram{};
  std::array<std::size_t, 3> splits{};
  for (const auto& row : store.manifest) {
    if (row.label) ++histogram[emotion_index(*row.label)];
    ++splits[static_cast<std::size_t>(row.split)];
  }
  const auto& h = store.header;
  log << "wrote " << config.store.string() << "\n";
  log << "samples\t" << store.size() << "\tlabeled=" << splits[0] << " unlabeled=" << splits[1]
      << " test=" << splits[2] << "\n";
  log << "dims\tlayers=" << h.layers << " acoustic=" << h.acoustic_dim << " visual=" << h.visual_dim
      << " lexical=" << h.lexical_dim << "\n";
  log << "classes";
  for (std::size_t c = 0; c < kNumEmotions; ++c) log << "\t" << kEmotionNames[c] << "=" << histogram[c];
  log << "\n";
  return store;
}

std::vector<LayerProbeRow> cmd_probe_layers(const RunConfig& config, std::ostream& log) {
  config.validate();
  const FeatureStore store = load_store(config);
  const auto labeled = store.samples(Split::labeled);
  if (labeled.empty()) throw DataError("the store has no labeled samples; the layer probe needs them");
  auto rows = probe_layers(labeled, store.header.layer_ids, config.folds, config.seed, config.probe_config());
  const std::string report = format_probe_report(rows, config.folds, config.seed);
  write_text(config.out / "probe_layers.tsv", report);
  log << report;
  return rows;
}

AdapterTrainResult cmd_train_adapter(const RunConfig& config, std::ostream& log) {
  config.validate();
  const FeatureStore store = load_store(config);
  const auto labeled = store.samples(Split::labeled);
  if (labeled.empty()) throw DataError("the store has no labeled samples; stage 1 needs them");
  auto [fit, inner] = split_inner(iota_positions(labeled.size()), config.inner_val_fraction,
                                  derive_seed(config.seed, 0x696e6e00));
  AdapterTrainResult r = train_adapter_stage(pick(labeled, fit), pick(labeled, inner),
                                             config.adapter_config(store.header, derive_seed(config.seed, 1)));
  save_checkpoint(r.model, config.out / "adapter.ckpt");
  write_text(config.out / "adapter_log.tsv", format_adapter_log(r.log));
  const double best = r.log.empty() ? 0.0 : r.log[std::max<std::size_t>(r.best_epoch, 1) - 1].val_wf1;
  log << "adapter: best epoch " << r.best_epoch << ", inner val wF1 " << fixed(best) << "\n";
  return r;
}

AlignTrainResult cmd_align_vision(const RunConfig& config, std::ostream& log) {
  config.validate();
  const FeatureStore store = load_store(config);
  const auto unlabeled = store.samples(Split::unlabeled);
  require_unlabeled(unlabeled);
  AdapterDims expected;
  expected.layers = store.header.layers;
  expected.feature_dim = store.header.acoustic_dim;
  const AdapterModel adapter =
      load_adapter_checkpoint(config.adapter_checkpoint.value_or(config.out / "adapter.ckpt"), expected);
  const AlignTrainConfig ac = config.align_config(derive_seed(config.seed, 2));
  AlignTrainResult r = train_alignment_stage(all_of(unlabeled), adapter, ac);
  save_checkpoint(r.mlp, config.out / "vision.ckpt");
  write_text(config.out / "align_log.tsv", format_align_log(r.log));
  const auto test = store.samples(Split::test);
  const VisionMLP before = initial_vision_mlp(store.header.visual_dim, store.header.acoustic_dim, ac);
  log << "alignment: tau " << fixed(r.mlp.tau()) << ", "
      << describe_alignment(summarize_alignment(all_of(test), adapter, before, r.mlp, config.recall_batch))
      << "\n";
  return r;
}

FusionTrainResult cmd_train_fusion(const RunConfig& config, std::ostream& log) {
  config.validate();
  if (config.modalities.size() != 1) throw ConfigError("train-fusion takes exactly one modality subset");
  const ModalitySet subset = config.modalities.front();
  const FeatureStore store = load_store(config);
  const auto& h = store.header;
  const auto labeled = store.samples(Split::labeled);
  if (labeled.empty()) throw DataError("the store has no labeled samples; stage 3 needs them");

  std::optional<AdapterModel> adapter;
  std::optional<VisionMLP> vision;
  if (subset.contains(Modality::acoustic)) {
    AdapterDims expected;
    expected.layers = h.layers;
    expected.feature_dim = h.acoustic_dim;
    adapter.emplace(load_adapter_checkpoint(config.adapter_checkpoint.value_or(config.out / "adapter.ckpt"), expected));
  }
  if (subset.contains(Modality::visual) && !config.skip_align) {
    vision.emplace(load_vision_checkpoint(config.vision_checkpoint.value_or(config.out / "vision.ckpt"),
                                          h.visual_dim, h.acoustic_dim));
  }
  const FusionUpstream upstream{adapter ? &*adapter : nullptr, vision ? &*vision : nullptr};
  auto [fit, inner] = split_inner(iota_positions(labeled.size()), config.inner_val_fraction,
                                  derive_seed(config.seed, 0x696e6e00));
  const auto fit_ex = build_fusion_examples(pick(labeled, fit), upstream, subset);
  const auto inner_ex = build_fusion_examples(pick(labeled, inner), upstream, subset);
  FusionTrainResult r = train_fusion_stage(fit_ex, inner_ex, fusion_dims(h, config, vision.has_value()),
                                           config.fusion_config(subset, derive_seed(config.seed, 3)));
  save_checkpoint(r.model, config.out / "fusion.ckpt");
  write_text(config.out / "fusion_log.tsv", format_fusion_log(r.log));
  log << "fusion " << subset.to_string() << ": best epoch " << r.best_epoch << ", inner val wF1 "
      << fixed(fusion_weighted_f1(inner_ex, r.model)) << "\n";
  return r;
}

CvReport cmd_pipeline(const RunConfig& config, std::ostream& log) {
  return run_cross_validation(config, log, true, "metrics.tsv");
}

CvReport cmd_cv(const RunConfig& config, std::ostream& log) {
  return run_cross_validation(config, log, false, "cv_scores.tsv");
}

EvalReport cmd_evaluate(const RunConfig& config, std::ostream& log) {
  config.validate();
  const FeatureStore store = load_store(config);
  const auto& h = store.header;
  const std::filesystem::path run = config.run_dir.value_or(config.out);

  std::vector<std::filesystem::path> dirs;
  if (config.ensemble == "mean-logits") {
    dirs = fold_dirs(run);
    if (dirs.empty()) throw CheckpointError("--ensemble mean-logits needs fold_* directories under '" + run.string() + "'");
  } else if (config.fold) {
    dirs = {run / ("fold_" + std::to_string(*config.fold))};
  } else if (std::filesystem::exists(run / "fusion.ckpt")) {
    dirs = {run};
  } else {
    dirs = {run / "fold_0"};
  }
  std::vector<ModelSet> sets;
  for (const auto& d : dirs) sets.push_back(load_model_set(d, config, h));

  const auto samples = store.samples(config.split);
  std::ostringstream out;
  out << "sample_id\tpredicted_label";
  for (std::size_t c = 0; c < kNumEmotions; ++c) out << "\tp_" << c;
  out << "\talpha_a\talpha_l\talpha_v\n";

  std::vector<std::size_t> preds, labels;
  bool all_labeled = !samples.empty();
  for (const Sample& s : samples) {
    std::vector<double> logits(kNumEmotions, 0.0);
    std::array<double, kNumModalities> alpha{};
    for (const auto& set : sets) {
      const FusionUpstream upstream{set.adapter ? &*set.adapter : nullptr, set.vision ? &*set.vision : nullptr};
      const Prediction p = predict(embed_sample(s, upstream, set.fusion->modalities()), *set.fusion);
      for (std::size_t c = 0; c < kNumEmotions; ++c) logits[c] += p.logits[c] / static_cast<double>(sets.size());
      for (std::size_t m = 0; m < kNumModalities; ++m) alpha[m] += p.alpha[m] / static_cast<double>(sets.size());
    }
    const std::vector<double> probs = softmax(logits);
    const std::size_t label = argmax_lowest(logits);
    out << s.id << "\t" << kEmotionNames[label];
    for (double p : probs) out << "\t" << fixed(p, 6);
    for (double a : alpha) out << "\t" << fixed(a, 6);
    out << "\n";
    preds.push_back(label);
    if (s.label) {
      labels.push_back(emotion_index(*s.label));
    } else {
      all_labeled = false;
    }
  }

  EvalReport report;
  report.rows = samples.size();
  report.predictions = config.out / ("predictions_" + std::string(split_name(config.split)) + ".tsv");
  write_text(report.predictions, out.str());
  log << "wrote " << report.rows << " predictions to " << report.predictions.string() << "\n";
  if (all_labeled) {
    report.weighted_f1 = weighted_f1(preds, labels);
    log << "weighted F1\t" << fixed(*report.weighted_f1) << "\n";
  }
  return report;
}

}  // namespace emofuse
