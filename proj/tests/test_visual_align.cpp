#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "emofuse/errors.hpp"
#include "emofuse/synthetic.hpp"
#include "emofuse/visual_align.hpp"
#include "support.hpp"

using namespace emofuse;

namespace {

/// Symmetric InfoNCE written directly from log-sum-exp, without the library softmax.
double oracle_contrastive(const Tensor2& s, double tau) {
  const std::size_t j = s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < j; ++i) {
    double row_max = -1e300, col_max = -1e300;
    for (std::size_t c = 0; c < j; ++c) {
      row_max = std::max(row_max, s(i, c) / tau);
      col_max = std::max(col_max, s(c, i) / tau);
    }
    double row_sum = 0.0, col_sum = 0.0;
    for (std::size_t c = 0; c < j; ++c) {
      row_sum += std::exp(s(i, c) / tau - row_max);
      col_sum += std::exp(s(c, i) / tau - col_max);
    }
    total += (row_max + std::log(row_sum) - s(i, i) / tau) + (col_max + std::log(col_sum) - s(i, i) / tau);
  }
  return 0.5 * total / static_cast<double>(j);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

Tensor2 random_similarity(std::size_t j, Rng& rng) {
  Tensor2 s(j, j);
  for (auto& v : s.values()) v = rng.uniform(-1.0, 1.0);
  return s;
}

VisionMLP spread_mlp(std::size_t dv, std::size_t da, std::uint64_t seed) {
  Rng rng(seed);
  VisionMLP mlp = VisionMLP::initialized(dv, da, 0.07, rng);
  for (const char* name : {"w1", "b1", "w2"})
    for (auto& v : mlp.params().param(name).values()) v = 0.5 * rng.normal();
  // A positive output bias keeps every embedding row away from the all-zero ReLU corner.
  for (auto& v : mlp.params().param("b2").values()) v = 1.5 + 0.3 * rng.normal();
  mlp.params().param("log_tau")[0] = std::log(rng.uniform(0.1, 0.8));
  return mlp;
}

}  // namespace

TEST_CASE("vision forward examples") {
  const VisionMLP zero(4, 3);
  for (double v : vision_forward(std::vector<double>{1, -2, 3, 4}, zero)) CHECK(v == 0.0);

  VisionMLP id(3, 3);
  id.params().param("w1") = Tensor2::identity(3);
  id.params().param("w2") = Tensor2::identity(3);
  const std::vector<double> x = {0.5, 0.0, 2.0};
  CHECK(vision_forward(x, id) == x);

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const VisionMLP mlp = spread_mlp(6, 5, 100 + trial);
    const auto out = vision_forward(testing::random_vector(6, rng, 2.0), mlp);
    CHECK(out.size() == 5);
    for (double v : out) CHECK(v >= 0.0);
  }
  CHECK_THROWS_AS(vision_forward(std::vector<double>(5, 1.0), zero), DimensionError);
}

TEST_CASE("batched vision forward matches the row-wise path") {
  Rng rng(2);
  const VisionMLP mlp = spread_mlp(6, 5, 3);
  const Tensor2 x = testing::random_tensor(7, 6, rng);
  const Tensor2 out = vision_forward_batch(x, mlp);
  for (std::size_t r = 0; r < 7; ++r) {
    const auto row = vision_forward(x.row(r), mlp);
    for (std::size_t c = 0; c < 5; ++c) CHECK(out(r, c) == doctest::Approx(row[c]).epsilon(1e-12));
  }
}

TEST_CASE("cosine similarity examples") {
  const Tensor2 v = Tensor2::from_rows({{1.0, 0.0}});
  const Tensor2 a = Tensor2::from_rows({{1.0, 1.0}});
  CHECK(cosine_similarity_matrix(v, a)(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));

  const Tensor2 orth_v = Tensor2::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  const Tensor2 orth_a = Tensor2::from_rows({{0.0, 1.0}, {1.0, 0.0}});
  const Tensor2 s = cosine_similarity_matrix(orth_v, orth_a);
  CHECK(s(0, 0) == 0.0);
  CHECK(s(0, 1) == 1.0);

  Rng rng(3);
  Tensor2 unit = testing::random_tensor(6, 4, rng);
  for (std::size_t r = 0; r < 6; ++r) {
    double n = 0.0;
    for (double x : unit.row(r)) n += x * x;
    for (double& x : unit.row(r)) x /= std::sqrt(n);
  }
  const Tensor2 self = cosine_similarity_matrix(unit, unit);
  for (std::size_t i = 0; i < 6; ++i) CHECK(self(i, i) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("cosine similarity agrees with a direct computation and transposes under swap") {
  Rng rng(4);
  const Tensor2 v = testing::random_tensor(5, 7, rng);
  const Tensor2 a = testing::random_tensor(5, 7, rng);
  const Tensor2 s = cosine_similarity_matrix(v, a);
  const Tensor2 t = cosine_similarity_matrix(a, v);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(std::abs(s(i, j) - cosine(v.row(i), a.row(j))) < 1e-12);
      CHECK(s(i, j) == t(j, i));
      CHECK(std::abs(s(i, j)) <= 1.0);
    }
}

TEST_CASE("scaling an embedding row leaves similarities unchanged") {
  Rng rng(5);
  const Tensor2 v = testing::random_tensor(4, 6, rng);
  const Tensor2 a = testing::random_tensor(4, 6, rng);
  Tensor2 scaled = v;
  for (double& x : scaled.row(2)) x *= 17.5;
  const Tensor2 s = cosine_similarity_matrix(v, a);
  const Tensor2 s2 = cosine_similarity_matrix(scaled, a);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - s2[i]) < 1e-12);
}

TEST_CASE("zero-norm rows are degenerate") {
  const Tensor2 v = Tensor2::from_rows({{1.0, 0.0}, {0.0, 0.0}});
  const Tensor2 a = Tensor2::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  CHECK_THROWS_AS(cosine_similarity_matrix(v, a), DegenerateEmbeddingError);
  CHECK_THROWS_AS(cosine_similarity_matrix(a, v), DegenerateEmbeddingError);
}

TEST_CASE("contrastive loss examples") {
  CHECK(contrastive_loss(Tensor2(2, 2, 0.3), 0.07).loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(contrastive_loss(Tensor2(5, 5, -0.8), 0.5).loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  CHECK(contrastive_loss(Tensor2::identity(4), 0.01).loss < 1e-40);

  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t j = 2 + rng.uniform_index(7);
    const double c = rng.uniform(-1.0, 1.0);
    const double tau = rng.uniform(0.01, 1.0);
    CHECK(std::abs(contrastive_loss(Tensor2(j, j, c), tau).loss - std::log(static_cast<double>(j))) < 1e-12);
  }
}

TEST_CASE("contrastive loss rejects bad arguments") {
  CHECK_THROWS_AS(contrastive_loss(Tensor2(3, 3), 0.0), ArgumentError);
  CHECK_THROWS_AS(contrastive_loss(Tensor2(3, 3), -0.1), ArgumentError);
  CHECK_THROWS_AS(contrastive_loss(Tensor2(1, 1), 0.1), DimensionError);
  CHECK_THROWS_AS(contrastive_loss(Tensor2(2, 3), 0.1), DimensionError);
}

TEST_CASE("contrastive loss matches the log-sum-exp oracle and its gradients") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t j = 2 + rng.uniform_index(6);
    const Tensor2 s = random_similarity(j, rng);
    const double tau = rng.uniform(0.05, 1.0);
    const ContrastiveLoss l = contrastive_loss(s, tau);
    CHECK(std::abs(l.loss - oracle_contrastive(s, tau)) < 1e-12);
    CHECK(l.loss >= 0.0);

    const double h = 1e-6;
    for (std::size_t idx = 0; idx < s.size(); ++idx) {
      Tensor2 plus = s, minus = s;
      plus[idx] += h;
      minus[idx] -= h;
      const double numeric = (oracle_contrastive(plus, tau) - oracle_contrastive(minus, tau)) / (2 * h);
      CHECK(std::abs(l.grad_similarity[idx] - numeric) < 1e-6 * std::max(1.0, std::abs(numeric)));
    }
    const double numeric_tau = (oracle_contrastive(s, tau + h) - oracle_contrastive(s, tau - h)) / (2 * h);
    CHECK(std::abs(l.grad_tau - numeric_tau) < 1e-6 * std::max(1.0, std::abs(numeric_tau)));
  }
}

TEST_CASE("contrastive loss is invariant to batch order and to transposition") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t j = 3 + rng.uniform_index(6);
    const Tensor2 s = random_similarity(j, rng);
    const double tau = rng.uniform(0.05, 1.0);
    std::vector<std::size_t> perm(j);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    Tensor2 permuted(j, j), transposed(j, j);
    for (std::size_t a = 0; a < j; ++a)
      for (std::size_t b = 0; b < j; ++b) {
        permuted(a, b) = s(perm[a], perm[b]);
        transposed(a, b) = s(b, a);
      }
    const double base = contrastive_loss(s, tau).loss;
    CHECK(std::abs(contrastive_loss(permuted, tau).loss - base) < 1e-12);
    CHECK(std::abs(contrastive_loss(transposed, tau).loss - base) < 1e-12);
  }
}

TEST_CASE("alignment loss gradients match finite differences, including log_tau") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    VisionMLP mlp = spread_mlp(6, 5, 40 + seed);
    const Tensor2 visual = testing::random_tensor(4, 6, rng);
    const Tensor2 acoustic = testing::random_tensor(4, 5, rng);
    const LossFn loss = [&](ParamSet&) { return alignment_loss(visual, acoustic, mlp).loss; };
    const auto report = finite_diff_check(loss, mlp.params(), {1e-5, 256, 64, seed});
    INFO("seed " << seed << " worst " << report.worst_param << "[" << report.worst_index << "]");
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("temperature stays clamped") {
  VisionMLP mlp(3, 2, 0.07);
  CHECK(mlp.tau() == doctest::Approx(0.07).epsilon(1e-14));
  mlp.params().param("log_tau")[0] = 5.0;
  mlp.clamp_tau();
  CHECK(mlp.tau() == doctest::Approx(1.0).epsilon(1e-14));
  mlp.params().param("log_tau")[0] = -9.0;
  mlp.clamp_tau();
  CHECK(mlp.tau() == doctest::Approx(0.01).epsilon(1e-14));
  CHECK_THROWS_AS(VisionMLP(3, 2, 0.0), ArgumentError);
}

TEST_CASE("retrieval recall examples") {
  const Tensor2 id = Tensor2::identity(4);
  CHECK(retrieval_recall_at_1(id, id) == 1.0);
  CHECK(retrieval_recall_at_1(Tensor2::from_rows({{1.0, 2.0}}), Tensor2::from_rows({{-3.0, 0.5}})) == 1.0);

  // Every column ties, so the lowest index wins and only row 0 counts.
  CHECK(retrieval_recall_at_1(Tensor2(4, 4, 0.5)) == 0.25);
}

TEST_CASE("retrieval recall on independent embeddings averages 1/J") {
  Rng rng(9);
  const std::size_t j = 10;
  double total = 0.0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t)
    total += retrieval_recall_at_1(testing::random_tensor(j, 8, rng), testing::random_tensor(j, 8, rng));
  CHECK(std::abs(total / trials - 0.1) < 0.01);
}

TEST_CASE("alignment gap") {
  const Tensor2 id = Tensor2::identity(3);
  CHECK(alignment_gap(id, id) == doctest::Approx(1.0).epsilon(1e-14));
  Rng rng(10);
  const Tensor2 v = testing::random_tensor(5, 4, rng), a = testing::random_tensor(5, 4, rng);
  double matched = 0.0, mismatched = 0.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 5; ++k) (i == k ? matched : mismatched) += cosine(v.row(i), a.row(k));
  CHECK(std::abs(alignment_gap(v, a) - (matched / 5 - mismatched / 20)) < 1e-12);
}

TEST_CASE("alignment training") {
  SyntheticConfig cfg;
  cfg.seed = 4;
  cfg.n_samples = 60;
  cfg.n_test = 60;
  const FeatureStore store = generate_synthetic(cfg);
  const auto unlabeled = store.samples(Split::unlabeled);
  const auto held_out = store.samples(Split::test);
  const auto pairs = pointers_to(std::span<const Sample>(unlabeled));
  const auto test_pairs = pointers_to(std::span<const Sample>(held_out));

  Rng adapter_rng(5);
  const AdapterModel adapter = AdapterModel::initialized({6, 64, 32, kNumEmotions}, 2, 0.15, adapter_rng);
  const AdapterModel adapter_before = adapter;

  AlignTrainConfig tc;
  tc.adam.lr = 1e-3;
  tc.batch_size = 256;
  tc.seed = 6;

  SUBCASE("zero learning rate keeps the initial MLP") {
    tc.adam.lr = 0.0;
    tc.epochs = 2;
    const auto r = train_alignment_stage(pairs, adapter, tc);
    CHECK(r.mlp.params().parameters_bitwise_equal(initial_vision_mlp(48, 64, tc).params()));
    CHECK(r.log.size() == 2);
  }

  SUBCASE("training aligns held-out pairs and leaves the acoustic model untouched") {
    tc.epochs = 100;
    const auto r = train_alignment_stage(pairs, adapter, tc);
    CHECK(adapter.params().parameters_bitwise_equal(adapter_before.params()));
    for (const auto& e : r.log) {
      CHECK(e.tau >= kMinTemperature);
      CHECK(e.tau <= kMaxTemperature);
    }
    const Tensor2 fa = acoustic_embeddings(test_pairs, adapter);
    const Tensor2 fv = vision_forward_batch(visual_matrix(test_pairs), r.mlp);
    const Tensor2 fv0 = vision_forward_batch(visual_matrix(test_pairs), initial_vision_mlp(48, 64, tc));
    CHECK(retrieval_recall_at_1(fv, fa) >= 0.8);
    CHECK(alignment_gap(fv, fa) - alignment_gap(fv0, fa) > 0.2);
  }

  SUBCASE("same seed gives the same log") {
    tc.epochs = 3;
    CHECK(format_align_log(train_alignment_stage(pairs, adapter, tc).log) ==
          format_align_log(train_alignment_stage(pairs, adapter, tc).log));
  }

  SUBCASE("oversized batches and tiny sets are config errors") {
    tc.batch_size = 5000;
    CHECK_THROWS_AS(train_alignment_stage(pairs, adapter, tc), ConfigError);
    tc.batch_size = 64;
    CHECK_THROWS_AS(train_alignment_stage(std::span(pairs).first(1), adapter, tc), ConfigError);
  }
}

TEST_CASE("alignment log columns") {
  const std::string log = format_align_log({{1, 2.5, 0.07, 0.5}});
  CHECK(log.rfind("epoch\tL_ita\ttau\trecall@1\n", 0) == 0);
}
