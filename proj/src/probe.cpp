#include "emofuse/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "emofuse/errors.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

std::size_t LinearProbe::predict(std::span<const double> features) const {
  std::vector<double> logits(bias.values().begin(), bias.values().end());
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto w = weight.row(i);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += features[i] * w[c];
  }
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

LinearProbe train_linear_probe(const Tensor2& features, std::span<const std::size_t> labels,
                               const LinearProbeConfig& config) {
  if (features.rows() != labels.size() || labels.empty()) {
    throw ArgumentError("linear probe: " + std::to_string(features.rows()) + " rows vs " +
                        std::to_string(labels.size()) + " labels");
  }
  const std::size_t d = features.cols();
  ParamSet params;
  params.add("w", Tensor2(d, kNumEmotions));
  params.add("b", Tensor2(1, kNumEmotions));
  AdamState adam(config.adam);
  Rng order_rng(derive_seed(config.seed, 31));
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      Tensor2 x(len, d);
      for (std::size_t r = 0; r < len; ++r) {
        const auto src = features.row(order[start + r]);
        std::copy(src.begin(), src.end(), x.row(r).begin());
      }
      Tensor2 logits = matmul(x, params.param("w"));
      add_row_bias(logits, params.param("b"));
      Tensor2 d_logits(len, kNumEmotions);
      for (std::size_t r = 0; r < len; ++r) {
        const LossGrad ce = cross_entropy(logits.row(r), labels[order[start + r]]);
        for (std::size_t c = 0; c < kNumEmotions; ++c)
          d_logits(r, c) = ce.grad[c] / static_cast<double>(len);
      }
      params.grad("w") = matmul_tn(x, d_logits);
      params.grad("b") = column_sums(d_logits);
      adam_step(params, adam);
    }
  }
  return {params.param("w"), params.param("b")};
}

std::vector<double> linear_probe_cv(const Tensor2& features, std::span<const std::size_t> labels,
                                    const FoldPlan& plan, const LinearProbeConfig& config) {
  std::vector<double> scores;
  for (std::size_t f = 0; f < plan.fold_count(); ++f) {
    const auto train_pos = plan.training_positions(f);
    Tensor2 x(train_pos.size(), features.cols());
    std::vector<std::size_t> y;
    for (std::size_t r = 0; r < train_pos.size(); ++r) {
      const auto src = features.row(train_pos[r]);
      std::copy(src.begin(), src.end(), x.row(r).begin());
      y.push_back(labels[train_pos[r]]);
    }
    LinearProbeConfig fold_cfg = config;
    fold_cfg.seed = derive_seed(config.seed, f);
    const LinearProbe probe = train_linear_probe(x, y, fold_cfg);
    std::vector<std::size_t> preds, truth;
    for (std::size_t pos : plan.folds[f]) {
      preds.push_back(probe.predict(features.row(pos)));
      truth.push_back(labels[pos]);
    }
    scores.push_back(weighted_f1(preds, truth));
  }
  return scores;
}

std::vector<LayerProbeRow> probe_layers(std::span<const Sample> labeled,
                                        std::span<const std::uint32_t> layer_ids,
                                        std::size_t folds, std::uint64_t seed,
                                        const LinearProbeConfig& config) {
  if (labeled.empty()) throw DataError("layer probe needs labeled samples; the store has none");
  const std::size_t k = labeled.front().acoustic.rows();
  const std::size_t d = labeled.front().acoustic.cols();
  if (layer_ids.size() != k) throw DimensionError("layer id list does not match the acoustic stack");

  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  for (const auto& s : labeled) {
    if (!s.label) throw DataError("sample '" + s.id + "' in the labeled split has no label");
    ids.push_back(s.id);
    labels.push_back(emotion_index(*s.label));
  }
  const FoldPlan plan = kfold_split(ids, folds, seed);

  std::vector<LayerProbeRow> rows;
  for (std::size_t layer = 0; layer < k; ++layer) {
    Tensor2 x(labeled.size(), d);
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      const auto src = labeled[i].acoustic.row(layer);
      std::copy(src.begin(), src.end(), x.row(i).begin());
    }
    LinearProbeConfig cfg = config;
    cfg.seed = derive_seed(seed, 1000 + layer);
    LayerProbeRow row;
    row.index = layer;
    row.layer_id = layer_ids[layer];
    row.fold_scores = linear_probe_cv(x, labels, plan, cfg);
    const MeanStd ms = mean_std(row.fold_scores);
    row.mean = ms.mean;
    row.std = ms.std;
    rows.push_back(std::move(row));
  }
  rows[best_layer_index(rows)].best = true;
  return rows;
}

std::size_t best_layer_index(const std::vector<LayerProbeRow>& rows) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].mean > rows[best].mean) best = i;
  return best;
}

bool is_unimodal(std::span<const double> curve, std::size_t allowed_inversions) {
  if (curve.size() < 3) return true;
  const auto peak = static_cast<std::size_t>(std::max_element(curve.begin(), curve.end()) - curve.begin());
  std::size_t inversions = 0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    if (i < peak && curve[i + 1] < curve[i]) ++inversions;
    if (i >= peak && curve[i + 1] > curve[i]) ++inversions;
  }
  return inversions <= allowed_inversions;
}

std::string format_probe_report(const std::vector<LayerProbeRow>& rows, std::size_t folds,
                                std::uint64_t seed) {
  std::ostringstream out;
  out << "# emofuse probe-layers folds=" << folds << " seed=" << seed << '\n';
  out << "layer_index\tlayer_id\tmean_wF1\tstd_wF1\tbest\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu\t%u\t%.6f\t%.6f\t%s\n", r.index, r.layer_id, r.mean, r.std,
                  r.best ? "*" : "");
    out << buf;
  }
  return out.str();
}

}  // namespace emofuse
