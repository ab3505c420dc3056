// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "emofuse/checkpoint.hpp"
#include "emofuse/pipeline.hpp"
#include "support.hpp"

using namespace emofuse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args, std::string& output) {
  const std::string cmd = std::string(EMOFUSE_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  char buf[4096];
  std::size_t got = 0;
  output.clear();
  while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, got);
  const int status = pclose(pipe);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// ---------------------------------------------------------------------------

AdapterModel spread_adapter(std::uint64_t seed) {
  Rng rng(seed);
  AdapterModel model = AdapterModel::initialized({2, 8, 3, kNumEmotions}, 0, 0.25, rng);
  for (const auto& name : model.params().names())
    for (auto& v : model.params().param(name).values()) v = 0.6 * rng.normal();
  return model;
}

std::vector<Sample> toy_samples(std::size_t n, std::size_t k, std::size_t da, std::size_t dv,
                                std::size_t dl, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(testing::toy_sample("s" + std::to_string(i), k, da, dv, dl, i % kNumEmotions, rng));
  return out;
}

Outcome gradient_oracle() {
  const auto start = Clock::now();
  double worst_adapter = 0.0, worst_align = 0.0, worst_fusion = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto samples = toy_samples(4, 2, 8, 6, 10, 100 + seed);
    const auto batch = pointers_to(std::span<const Sample>(samples));

    AdapterModel full = spread_adapter(500 + seed);
    const LossFn full_loss = [&](ParamSet&) {
      Rng rng(seed);
      return adapter_loss(batch, full, rng, {false}).total;
    };
    worst_adapter = std::max(worst_adapter, finite_diff_check(full_loss, full.params(), {1e-5, 256, 64, seed}).max_rel_error);

    AdapterModel pinned = spread_adapter(700 + seed);
    std::vector<std::vector<double>> targets;
    for (const Sample* s : batch) targets.push_back(extract_acoustic(s->acoustic, pinned));
    const LossFn pinned_loss = [&](ParamSet&) {
      Rng rng(seed);
      adapter_loss(batch, pinned, rng, {true});
      return testing::frozen_target_loss(batch, pinned, targets, seed);
    };
    worst_adapter = std::max(worst_adapter, finite_diff_check(pinned_loss, pinned.params(), {1e-5, 256, 64, seed}).max_rel_error);

    Rng rng(seed);
    VisionMLP mlp = VisionMLP::initialized(6, 5, 0.07, rng);
    for (const char* name : {"w1", "b1", "w2"})
      for (auto& v : mlp.params().param(name).values()) v = 0.5 * rng.normal();
    for (auto& v : mlp.params().param("b2").values()) v = 1.5 + 0.3 * rng.normal();
    mlp.params().param("log_tau")[0] = std::log(rng.uniform(0.1, 0.8));
    const Tensor2 visual = testing::random_tensor(4, 6, rng);
    const Tensor2 acoustic = testing::random_tensor(4, 5, rng);
    const LossFn align = [&](ParamSet&) { return alignment_loss(visual, acoustic, mlp).loss; };
    worst_align = std::max(worst_align, finite_diff_check(align, mlp.params(), {1e-5, 256, 64, seed}).max_rel_error);

    const FusionDims dims{8, 10, 8, 4, kNumEmotions};
    FusionModel fusion = FusionModel::initialized(dims, ModalitySet::all(), MissingPolicy::restrict_attention, rng);
    for (const auto& name : fusion.params().names())
      for (auto& v : fusion.params().param(name).values()) v = 0.5 * rng.normal();
    std::vector<FusionExample> examples;
    for (std::size_t i = 0; i < 5; ++i) {
      FusionExample ex;
      ex.id = "f" + std::to_string(i);
      ex.embeddings.acoustic = testing::random_vector(8, rng);
      ex.embeddings.lexical = testing::random_vector(10, rng);
      ex.embeddings.visual = testing::random_vector(8, rng);
      ex.label = emotion_from_index(i);
      examples.push_back(std::move(ex));
    }
    const LossFn fuse = [&](ParamSet&) { return fusion_loss(examples, fusion); };
    worst_fusion = std::max(worst_fusion, finite_diff_check(fuse, fusion.params(), {1e-5, 256, 64, seed}).max_rel_error);
  }
  const double elapsed = seconds_since(start);
  Outcome o;
  o.pass = worst_adapter < 1e-4 && worst_align < 1e-4 && worst_fusion < 1e-4 && elapsed < 30.0;
  o.detail = "max rel err adapter=" + fmt(worst_adapter * 1e6, 3) + "e-6 contrastive=" +
             fmt(worst_align * 1e6, 3) + "e-6 fusion=" + fmt(worst_fusion * 1e6, 3) + "e-6, 10 seeds each, " +
             fmt(elapsed, 1) + " s";
  return o;
}

Outcome exact_invariants() {
  Rng rng(42);
  bool identity = true, alpha = true, sum = true, uniform = true, shift = true;
  double worst_alpha = 0.0, worst_uniform = 0.0, worst_shift = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(10), db = 1 + rng.uniform_index(d - 1);
    const Tensor2 wd(d, db), bd(1, db), wu(db, d), bu(1, d);
    const auto x = testing::random_vector(d, rng, 5.0);
    identity = identity && bitwise_equal(std::span<const double>(x),
                                         std::span<const double>(adapter_forward(x, {wd, bd, wu, bu})));

    Rng frng(1000 + trial);
    FusionModel fusion = FusionModel::initialized({3, 3, 3, 6, kNumEmotions}, ModalitySet::all(),
                                                  MissingPolicy::restrict_attention, frng);
    for (auto& v : fusion.params().param("att.w").values()) v = 2.0 * rng.normal();
    const auto fused = attention_fuse(testing::random_vector(6, rng, 3.0), testing::random_vector(6, rng, 3.0),
                                      testing::random_vector(6, rng, 3.0), fusion);
    const double err = std::abs(fused.alpha[0] + fused.alpha[1] + fused.alpha[2] - 1.0);
    worst_alpha = std::max(worst_alpha, err);
    alpha = alpha && err <= 1e-12;

    const auto samples = toy_samples(4, 2, 8, 2, 2, 2000 + trial);
    AdapterModel model = spread_adapter(3000 + trial);
    Rng lrng(trial);
    const AdapterLoss l = adapter_loss(pointers_to(std::span<const Sample>(samples)), model, lrng);
    sum = sum && l.total == l.ce + l.mlm;

    const std::size_t j = 2 + rng.uniform_index(30);
    const double c = rng.uniform(-1.0, 1.0), tau = rng.uniform(0.01, 1.0);
    const double uerr = std::abs(contrastive_loss(Tensor2(j, j, c), tau).loss - std::log(static_cast<double>(j)));
    worst_uniform = std::max(worst_uniform, uerr);
    uniform = uniform && uerr <= 1e-9;

    const auto logits = testing::random_vector(6, rng, 4.0);
    auto shifted = logits;
    const double shift_by = rng.uniform(-100.0, 100.0);
    for (auto& v : shifted) v += shift_by;
    const auto p = softmax(logits), q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) worst_shift = std::max(worst_shift, std::abs(p[i] - q[i]));
    shift = shift && worst_shift <= 1e-12;
  }
  Outcome o;
  o.pass = identity && alpha && sum && uniform && shift;
  o.detail = std::string("adapter identity ") + (identity ? "bitwise" : "BROKEN") + ", |sum(alpha)-1| <= " +
             fmt(worst_alpha * 1e15, 2) + "e-15, L==L_ce+L_mlm " + (sum ? "exact" : "BROKEN") +
             ", |L_ita-ln J| <= " + fmt(worst_uniform * 1e15, 2) + "e-15, softmax shift <= " +
             fmt(worst_shift * 1e15, 2) + "e-15 (200 trials)";
  return o;
}

Outcome metric_oracle() {
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(50);
    std::vector<std::size_t> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = rng.uniform_index(kNumEmotions);
      preds[i] = rng.uniform() < 0.4 ? labels[i] : rng.uniform_index(kNumEmotions);
    }
    worst = std::max(worst, std::abs(weighted_f1(preds, labels) - testing::oracle_weighted_f1(preds, labels)));
  }
  const double hand = weighted_f1(std::vector<std::size_t>{0, 1, 1}, std::vector<std::size_t>{0, 0, 1});
  const bool hand_ok = std::round(hand * 1e4) / 1e4 == 0.6667 && std::abs(hand - 2.0 / 3.0) < 1e-15;
  Outcome o;
  o.pass = worst <= 1e-12 && hand_ok;
  o.detail = "max |diff| vs confusion-matrix oracle over 1000 sets = " + fmt(worst * 1e15, 2) +
             "e-15, hand case = " + fmt(hand);
  return o;
}

Outcome layer_probe(const fs::path& work) {
  std::size_t hits = 0, unimodal = 0;
  double slowest = 0.0;
  std::string peaks;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.synthetic.seed = seed;
    cfg.store = work / ("probe_" + std::to_string(seed) + ".bin");
    cfg.out = work / ("probe_" + std::to_string(seed));
    std::ostringstream sink;
    cmd_gen_data(cfg, sink);
    const auto start = Clock::now();
    const auto rows = cmd_probe_layers(cfg, sink);
    slowest = std::max(slowest, seconds_since(start));
    std::vector<double> curve;
    for (const auto& r : rows) curve.push_back(r.mean);
    const std::size_t best = best_layer_index(rows);
    hits += best == cfg.synthetic.peak_layer;
    unimodal += is_unimodal(curve, 1);
    peaks += (peaks.empty() ? "" : ",") + std::to_string(best);
  }
  Outcome o;
  o.pass = hits >= 9 && unimodal == 10 && slowest < 60.0;
  o.detail = "argmax at peak layer 2 in " + std::to_string(hits) + "/10 seeds (argmax " + peaks + "), unimodal " +
             std::to_string(unimodal) + "/10, slowest run " + fmt(slowest, 1) + " s";
  return o;
}

std::map<std::string, double> cv_means(const std::string& report) {
  std::map<std::string, double> means;
  std::istringstream in(report);
  std::string line;
  while (std::getline(in, line)) {
    const auto a = line.find('\t');
    if (a == std::string::npos) continue;
    const auto b = line.find('\t', a + 1);
    if (line.substr(a + 1, b - a - 1) == "mean") means[line.substr(0, a)] = std::stod(line.substr(b + 1));
  }
  return means;
}

struct PipelineRuns {
  bool ok = false;
  double slowest = 0.0;
  fs::path store, first, second;
  std::string stdout_first;
};

Outcome fusion_beats_unimodal(const fs::path& work, const PipelineRuns& runs) {
  std::string output;
  const auto start = Clock::now();
  const int code = run_cli("cv --store " + runs.store.string() + " --out " + (work / "cv").string() +
                               " --modalities a,l,v,alv",
                           output);
  const double cv_time = seconds_since(start);
  Outcome o;
  if (code != 0 || !runs.ok) {
    o.pass = false;
    o.detail = "cv exit " + std::to_string(code) + ": " + output;
    return o;
  }
  auto means = cv_means(slurp(work / "cv" / "cv_scores.tsv"));
  const double best_uni = std::max({means["a"], means["l"], means["v"]});
  const double tri = means["alv"];
  o.pass = tri >= best_uni - 0.02 && tri >= 0.90 && runs.slowest < 300.0;
  o.detail = "5-fold wF1 a=" + fmt(means["a"]) + " l=" + fmt(means["l"]) + " v=" + fmt(means["v"]) +
             " alv=" + fmt(tri) + " (needs >= " + fmt(std::max(best_uni - 0.02, 0.90)) + "), pipeline " +
             fmt(runs.slowest, 1) + " s, 4-subset cv " + fmt(cv_time, 1) + " s";
  return o;
}

Outcome alignment_efficacy(const fs::path& work) {
  double worst_gain = 1e9, worst_recall = 1e9;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.synthetic.seed = seed;
    cfg.store = work / ("align_" + std::to_string(seed) + ".bin");
    cfg.out = work / ("align_" + std::to_string(seed));
    std::ostringstream sink;
    const FeatureStore store = cmd_gen_data(cfg, sink);
    const AdapterModel adapter = cmd_train_adapter(cfg, sink).model;
    const VisionMLP trained = cmd_align_vision(cfg, sink).mlp;
    const VisionMLP untrained = initial_vision_mlp(store.header.visual_dim, store.header.acoustic_dim,
                                                   cfg.align_config(derive_seed(seed, 2)));

    const auto held_out = store.samples(Split::test);
    const auto ptrs = pointers_to(std::span<const Sample>(held_out));
    const Tensor2 fa = acoustic_embeddings(ptrs, adapter);
    const Tensor2 xv = visual_matrix(ptrs);
    const Tensor2 before = vision_forward_batch(xv, untrained);
    const Tensor2 after = vision_forward_batch(xv, trained);
    const double gain = alignment_gap(after, fa) - alignment_gap(before, fa);

    const double recall = chunked_recall_at_1(after, fa, cfg.recall_batch);
    worst_gain = std::min(worst_gain, gain);
    worst_recall = std::min(worst_recall, recall);
    per_seed += " seed" + std::to_string(seed) + "(gain " + fmt(gain, 3) + ", recall " + fmt(recall, 3) + ")";
  }
  Outcome o;
  o.pass = worst_gain > 0.2 && worst_recall >= 0.8;
  o.detail = "held-out test pairs, batches of 64:" + per_seed;
  return o;
}

Outcome determinism(const fs::path& work, const PipelineRuns& runs) {
  Outcome o;
  if (!runs.ok) {
    o.pass = false;
    o.detail = "pipeline runs failed: " + runs.stdout_first;
    return o;
  }
  const std::string m1 = slurp(runs.first / "metrics.tsv"), m2 = slurp(runs.second / "metrics.tsv");
  const bool metrics_same = !m1.empty() && m1 == m2;

  const FeatureStore store = read_store(runs.store);
  write_store(store, work / "roundtrip.bin");
  const bool store_same = slurp(runs.store) == slurp(work / "roundtrip.bin") && read_store(work / "roundtrip.bin") == store;

  const fs::path fold = runs.first / "fold_0";
  save_checkpoint(load_adapter_checkpoint(fold / "adapter.ckpt"), work / "adapter_rt.ckpt");
  save_checkpoint(load_vision_checkpoint(fold / "vision.ckpt"), work / "vision_rt.ckpt");
  save_checkpoint(load_fusion_checkpoint(fold / "fusion.ckpt"), work / "fusion_rt.ckpt");
  const bool ckpt_same = slurp(fold / "adapter.ckpt") == slurp(work / "adapter_rt.ckpt") &&
                         slurp(fold / "vision.ckpt") == slurp(work / "vision_rt.ckpt") &&
                         slurp(fold / "fusion.ckpt") == slurp(work / "fusion_rt.ckpt");
  o.pass = metrics_same && store_same && ckpt_same;
  o.detail = std::string("metrics.tsv ") + (metrics_same ? "byte-identical" : "DIFFERS") + " across two runs, store round trip " +
             (store_same ? "bitwise" : "DIFFERS") + ", checkpoint round trips " + (ckpt_same ? "bitwise" : "DIFFER");
  return o;
}

Outcome cv_protocol(const PipelineRuns& runs) {
  Outcome o;
  if (!runs.ok) {
    o.pass = false;
    o.detail = "pipeline runs failed";
    return o;
  }
  const AuditCheck audit = verify_audit(slurp(runs.first / "audit.tsv"));
  const std::regex summary(R"(\d{2,3}\.\d{2}±\d+\.\d{2})");
  std::smatch match;
  const std::string metrics = slurp(runs.first / "metrics.tsv");
  const std::regex summary_row(R"(alv\tsummary\t(\S+)\n)");
  const bool row_found = std::regex_search(metrics, match, summary_row);
  const std::string value = row_found ? match[1].str() : "";
  const bool format_ok = row_found && std::regex_match(value, summary) &&
                         runs.stdout_first.find("alv\t" + value) != std::string::npos;
  o.pass = audit.ok && format_ok;
  o.detail = std::string("audit ") + (audit.ok ? "clean" : "FAILED: " + audit.problems.front()) +
             ", summary \"" + value + "\"";
  return o;
}

PipelineRuns run_pipelines(const fs::path& work) {
  PipelineRuns runs;
  runs.store = work / "default_store.bin";
  runs.first = work / "pipeline_a";
  runs.second = work / "pipeline_b";
  std::string output;
  if (run_cli("gen-data --store " + runs.store.string(), output) != 0) {
    runs.stdout_first = output;
    return runs;
  }
  const std::string hash_before = slurp(runs.store);
  bool ok = true;
  for (const fs::path& out : {runs.first, runs.second}) {
    const auto start = Clock::now();
    ok = ok && run_cli("pipeline --store " + runs.store.string() + " --out " + out.string(), output) == 0;
    runs.slowest = std::max(runs.slowest, seconds_since(start));
    if (out == runs.first) runs.stdout_first = output;
  }
  runs.ok = ok && slurp(runs.store) == hash_before;
  return runs;
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "emofuse_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << std::endl;
  };

  report(1, "gradient oracle", gradient_oracle);
  report(2, "exact invariants", exact_invariants);
  report(3, "metric oracle", metric_oracle);
  report(4, "layer probe peak", [&] { return layer_probe(work); });
  const PipelineRuns runs = run_pipelines(work);
  report(5, "fusion vs unimodal", [&] { return fusion_beats_unimodal(work, runs); });
  report(6, "alignment efficacy", [&] { return alignment_efficacy(work); });
  report(7, "determinism", [&] { return determinism(work, runs); });
  report(8, "cv protocol", [&] { return cv_protocol(runs); });

  fs::remove_all(work);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
