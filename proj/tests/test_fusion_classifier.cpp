#include <cmath>

#include "doctest.h"
#include "emofuse/errors.hpp"
#include "emofuse/fusion_classifier.hpp"
#include "emofuse/synthetic.hpp"
#include "support.hpp"

using namespace emofuse;

namespace {

const FusionDims kToyDims{8, 10, 8, 4, kNumEmotions};

FusionModel spread_model(const FusionDims& dims, ModalitySet subset, MissingPolicy policy,
                         std::uint64_t seed) {
  Rng rng(seed);
  FusionModel model = FusionModel::initialized(dims, subset, policy, rng);
  for (const auto& name : model.params().names())
    for (auto& v : model.params().param(name).values()) v = 0.5 * rng.normal();
  return model;
}

std::vector<FusionExample> toy_examples(std::size_t n, const FusionDims& dims, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FusionExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    FusionExample ex;
    ex.id = "t" + std::to_string(i);
    ex.embeddings.acoustic = testing::random_vector(dims.acoustic_dim, rng);
    ex.embeddings.lexical = testing::random_vector(dims.lexical_dim, rng);
    ex.embeddings.visual = testing::random_vector(dims.visual_dim, rng);
    ex.label = emotion_from_index(i % kNumEmotions);
    out.push_back(std::move(ex));
  }
  return out;
}

double alpha_sum(const std::array<double, kNumModalities>& a) { return a[0] + a[1] + a[2]; }

}  // namespace

TEST_CASE("modality tags and subsets") {
  CHECK(ModalitySet::parse("va").to_string() == "av");
  CHECK(ModalitySet::parse("alv").size() == 3);
  CHECK(ModalitySet::parse("l").contains(Modality::lexical));
  CHECK_FALSE(ModalitySet::parse("l").contains(Modality::acoustic));
  CHECK_THROWS_AS(ModalitySet::parse(""), ArgumentError);
  CHECK_THROWS_AS(ModalitySet::parse("ax"), ArgumentError);
  CHECK_THROWS_AS(modality_from_tag('q'), ArgumentError);
  CHECK(missing_policy_from_name(missing_policy_name(MissingPolicy::impute_zero)) == MissingPolicy::impute_zero);
  CHECK_THROWS_AS(missing_policy_from_name("guess"), ArgumentError);
}

TEST_CASE("projection examples") {
  const FusionModel zero({3, 3, 3, 3, kNumEmotions}, ModalitySet::all());
  for (Modality m : kAllModalities)
    for (double v : project_modality(std::vector<double>{1, -2, 3}, zero, m)) CHECK(v == 0.0);

  FusionModel id({3, 5, 2, 3, kNumEmotions}, ModalitySet::all());
  id.params().param(FusionModel::projection_param(Modality::acoustic, "w1")) = Tensor2::identity(3);
  id.params().param(FusionModel::projection_param(Modality::acoustic, "w2")) = Tensor2::identity(3);
  const std::vector<double> x = {0.0, 4.0, 0.5};
  CHECK(project_modality(x, id, Modality::acoustic) == x);

  Rng rng(1);
  const FusionModel rnd = spread_model({3, 5, 2, 7, kNumEmotions}, ModalitySet::all(), MissingPolicy::restrict_attention, 2);
  CHECK(project_modality(testing::random_vector(3, rng), rnd, Modality::acoustic).size() == 7);
  CHECK(project_modality(testing::random_vector(5, rng), rnd, Modality::lexical).size() == 7);
  CHECK(project_modality(testing::random_vector(2, rng), rnd, Modality::visual).size() == 7);
  CHECK_THROWS_AS(project_modality(std::vector<double>(4, 1.0), rnd, Modality::visual), DimensionError);
  CHECK_THROWS_AS(project_modality(x, rnd, static_cast<Modality>(7)), ArgumentError);
}

TEST_CASE("attention fusion examples") {
  const FusionModel uniform({1, 1, 1, 2, kNumEmotions}, ModalitySet::all());
  const std::vector<double> ha = {1, 4}, hl = {2, -1}, hv = {6, 0};
  const auto u = attention_fuse(ha, hl, hv, uniform);
  for (double a : u.alpha) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(u.fused[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(u.fused[1] == doctest::Approx(1.0).epsilon(1e-14));

  // Scores (0, ln 2, ln 3) give alpha = (1/6, 2/6, 3/6). A linear scorer cannot map h = 1, 2, 3
  // onto those scores, so the inputs carry the scores themselves.
  FusionModel one({1, 1, 1, 1, kNumEmotions}, ModalitySet::all());
  one.params().param("att.w")[0] = 1.0;
  const double l2 = std::log(2.0), l3 = std::log(3.0);
  const auto scored = attention_fuse(std::vector<double>{0.0}, std::vector<double>{l2},
                                     std::vector<double>{l3}, one);
  CHECK(scored.alpha[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
  CHECK(scored.alpha[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-14));
  CHECK(scored.alpha[2] == doctest::Approx(3.0 / 6.0).epsilon(1e-14));
  CHECK(scored.fused[0] == doctest::Approx((2.0 * l2 + 3.0 * l3) / 6.0).epsilon(1e-14));

  FusionModel dominant({1, 1, 1, 2, kNumEmotions}, ModalitySet::all());
  dominant.params().param("att.w")[0] = 100.0;
  const std::vector<double> zero = {0.0, 0.0};
  const auto d = attention_fuse(std::vector<double>{5.0, 7.0}, zero, zero, dominant);
  CHECK(d.fused[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(d.fused[1] == doctest::Approx(7.0).epsilon(1e-12));

  CHECK_THROWS_AS(attention_fuse(std::vector<double>{1.0}, hl, hv, uniform), DimensionError);
}

TEST_CASE("attention weights form a distribution and ignore a shift of the bias") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    FusionModel model = spread_model({2, 2, 2, 5, kNumEmotions}, ModalitySet::all(), MissingPolicy::restrict_attention, 10 + trial);
    const auto ha = testing::random_vector(5, rng), hl = testing::random_vector(5, rng), hv = testing::random_vector(5, rng);
    const auto base = attention_fuse(ha, hl, hv, model);
    CHECK(std::abs(alpha_sum(base.alpha) - 1.0) < 1e-12);
    for (double a : base.alpha) {
      CHECK(a > 0.0);
      CHECK(a < 1.0);
    }

    model.params().param("att.b")[0] += rng.uniform(-50, 50);
    const auto shifted = attention_fuse(ha, hl, hv, model);
    for (std::size_t m = 0; m < 3; ++m) CHECK(std::abs(shifted.alpha[m] - base.alpha[m]) < 1e-12);
    for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(shifted.fused[j] - base.fused[j]) < 1e-12);

    const auto rotated = attention_fuse(hl, hv, ha, model);
    CHECK(std::abs(rotated.alpha[0] - base.alpha[1]) < 1e-12);
    CHECK(std::abs(rotated.alpha[1] - base.alpha[2]) < 1e-12);
    CHECK(std::abs(rotated.alpha[2] - base.alpha[0]) < 1e-12);
    for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(rotated.fused[j] - base.fused[j]) < 1e-12);
  }
}

TEST_CASE("prediction examples") {
  FusionModel model({1, 1, 1, 1, kNumEmotions}, ModalitySet::parse("a"));
  model.params().param(FusionModel::projection_param(Modality::acoustic, "w1"))[0] = 1.0;
  model.params().param(FusionModel::projection_param(Modality::acoustic, "w2"))[0] = 1.0;
  model.params().param("cls.w")[0] = 5.0;
  ModalityEmbeddings e;
  e.acoustic = std::vector<double>{1.0};
  const Prediction p = predict(e, model);
  CHECK(p.label == EmotionLabel::neutral);
  CHECK(p.probabilities[0] == doctest::Approx(std::exp(5.0) / (std::exp(5.0) + 5.0)).epsilon(1e-12));
  CHECK(p.probabilities[0] == doctest::Approx(0.96741).epsilon(1e-5));
  CHECK(p.alpha[0] == 1.0);
  CHECK(p.alpha[1] == 0.0);

  model.params().param("cls.w")[0] = 0.0;
  model.params().param("cls.b")[3] = 2.0;
  model.params().param("cls.b")[4] = 2.0;
  CHECK(emotion_index(predict(e, model).label) == 3);
  CHECK(argmax_lowest(std::vector<double>{1, 3, 3, 0}) == 1);
}

TEST_CASE("predictions are deterministic with alpha summing to one") {
  const FusionModel model = spread_model(kToyDims, ModalitySet::all(), MissingPolicy::restrict_attention, 4);
  for (const auto& ex : toy_examples(30, kToyDims, 5)) {
    const Prediction a = predict(ex.embeddings, model);
    const Prediction b = predict(ex.embeddings, model);
    CHECK(a.label == b.label);
    CHECK(a.probabilities == b.probabilities);
    CHECK(std::abs(alpha_sum(a.alpha) - 1.0) < 1e-12);
  }
}

TEST_CASE("fusion loss equals the mean cross entropy of the predicted logits") {
  const FusionModel reference = spread_model(kToyDims, ModalitySet::all(), MissingPolicy::restrict_attention, 6);
  FusionModel model = reference;
  const auto batch = toy_examples(9, kToyDims, 7);
  double expected = 0.0;
  for (const auto& ex : batch)
    expected += cross_entropy(predict(ex.embeddings, reference).logits, emotion_index(*ex.label)).loss;
  CHECK(std::abs(fusion_loss(batch, model) - expected / 9.0) < 1e-12);
  CHECK(model.params().grad("att.b")[0] == 0.0);
}

TEST_CASE("confident correct logits drive the loss to zero") {
  FusionModel model({1, 1, 1, 1, kNumEmotions}, ModalitySet::parse("a"));
  model.params().param("cls.b")[2] = 80.0;
  FusionExample ex;
  ex.id = "c";
  ex.embeddings.acoustic = std::vector<double>{0.3};
  ex.label = emotion_from_index(2);
  CHECK(fusion_loss(std::span(&ex, 1), model) < 1e-30);
}

TEST_CASE("untrained fusion cross entropy is near ln 6") {
  const FusionDims dims{8, 10, 8, 16, kNumEmotions};
  const auto batch = toy_examples(24, dims, 8);
  double total = 0.0;
  const int inits = 120;
  for (int i = 0; i < inits; ++i) {
    Rng rng(2000 + i);
    FusionModel model = FusionModel::initialized(dims, ModalitySet::all(), MissingPolicy::restrict_attention, rng);
    total += fusion_loss(batch, model);
  }
  CHECK(std::abs(total / inits - std::log(6.0)) < 0.15);
}

TEST_CASE("fusion loss gradients match finite differences") {
  for (auto policy : {MissingPolicy::restrict_attention, MissingPolicy::impute_zero}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      FusionModel model = spread_model(kToyDims, ModalitySet::all(), policy, 300 + seed);
      auto batch = toy_examples(5, kToyDims, 400 + seed);
      batch[1].embeddings.visual.reset();
      batch[3].embeddings.lexical.reset();
      const LossFn loss = [&](ParamSet&) { return fusion_loss(batch, model); };
      const auto report = finite_diff_check(loss, model.params(), {1e-5, 256, 64, seed});
      INFO("seed " << seed << " worst " << report.worst_param << "[" << report.worst_index << "]");
      CHECK(report.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("missing modality policies") {
  auto batch = toy_examples(3, kToyDims, 9);
  batch[2].embeddings.lexical.reset();

  FusionModel strict = spread_model(kToyDims, ModalitySet::all(), MissingPolicy::strict, 1);
  CHECK_THROWS_AS(fusion_loss(batch, strict), DataError);

  const FusionModel restrict = spread_model(kToyDims, ModalitySet::all(), MissingPolicy::restrict_attention, 1);
  const Prediction r = predict(batch[2].embeddings, restrict);
  CHECK(r.alpha[1] == 0.0);
  CHECK(std::abs(alpha_sum(r.alpha) - 1.0) < 1e-12);

  const FusionModel impute = spread_model(kToyDims, ModalitySet::all(), MissingPolicy::impute_zero, 1);
  ModalityEmbeddings zeroed = batch[2].embeddings;
  zeroed.lexical = std::vector<double>(kToyDims.lexical_dim, 0.0);
  CHECK(predict(batch[2].embeddings, impute).probabilities == predict(zeroed, impute).probabilities);
  CHECK(predict(batch[2].embeddings, impute).alpha[1] > 0.0);
}

TEST_CASE("modalities outside the subset get zero gradient") {
  FusionModel model = spread_model(kToyDims, ModalitySet::parse("a"), MissingPolicy::restrict_attention, 11);
  const auto batch = toy_examples(6, kToyDims, 12);
  fusion_loss(batch, model);
  for (Modality m : {Modality::lexical, Modality::visual})
    for (const char* field : {"w1", "b1", "w2", "b2"})
      for (double g : model.params().grad(FusionModel::projection_param(m, field)).values()) CHECK(g == 0.0);
  for (const auto& ex : batch) {
    const Prediction p = predict(ex.embeddings, model);
    CHECK(p.alpha[0] == 1.0);
  }
}

TEST_CASE("fusion training") {
  SyntheticConfig cfg;
  cfg.seed = 5;
  cfg.n_unlabeled = 0;
  const FeatureStore store = generate_synthetic(cfg);
  const auto train_samples = store.samples(Split::labeled);
  const auto val_samples = store.samples(Split::test);
  Rng adapter_rng(13);
  const AdapterModel adapter = AdapterModel::initialized({6, 64, 32, kNumEmotions}, 2, 0.15, adapter_rng);
  const AdapterModel adapter_before = adapter;
  const FusionUpstream upstream{&adapter, nullptr};
  const FusionDims dims{64, 96, 48, 256, kNumEmotions};

  auto examples = [&](const std::vector<Sample>& samples, ModalitySet subset) {
    return build_fusion_examples(pointers_to(std::span<const Sample>(samples)), upstream, subset);
  };

  FusionTrainConfig tc;
  tc.adam.lr = 1e-3;
  tc.adam.weight_decay = 0.02;
  tc.seed = 14;

  SUBCASE("all three modalities reach 0.90 validation F1 within 50 epochs") {
    tc.epochs = 50;
    const auto train = examples(train_samples, tc.modalities);
    const auto val = examples(val_samples, tc.modalities);
    const auto r = train_fusion_stage(train, val, dims, tc);
    REQUIRE(r.best_epoch >= 1);
    CHECK(r.log[r.best_epoch - 1].val_wf1 >= 0.90);
    CHECK(fusion_weighted_f1(val, r.model) == r.log[r.best_epoch - 1].val_wf1);
    CHECK(adapter.params().parameters_bitwise_equal(adapter_before.params()));
  }

  SUBCASE("an acoustic-only subset trains and never moves the other projections") {
    tc.epochs = 5;
    tc.modalities = ModalitySet::parse("a");
    const auto train = examples(train_samples, tc.modalities);
    const auto val = examples(val_samples, tc.modalities);
    const auto r = train_fusion_stage(train, val, dims, tc);
    CHECK(r.log.back().ce < r.log.front().ce);
    Rng init(derive_seed(tc.seed, 21));
    const FusionModel start = FusionModel::initialized(dims, tc.modalities, tc.policy, init);
    for (Modality m : {Modality::lexical, Modality::visual})
      for (const char* field : {"w1", "b1", "w2", "b2"}) {
        const std::string name = FusionModel::projection_param(m, field);
        CHECK(bitwise_equal(r.model.params().param(name), start.params().param(name)));
      }
  }

  SUBCASE("same seed gives the same trajectory") {
    tc.epochs = 3;
    const auto train = examples(train_samples, tc.modalities);
    const auto val = examples(val_samples, tc.modalities);
    const auto a = train_fusion_stage(train, val, dims, tc);
    const auto b = train_fusion_stage(train, val, dims, tc);
    CHECK(format_fusion_log(a.log) == format_fusion_log(b.log));
    CHECK(a.model.params().parameters_bitwise_equal(b.model.params()));
  }

  SUBCASE("empty training set is a config error") {
    CHECK_THROWS_AS(train_fusion_stage({}, {}, dims, tc), ConfigError);
  }
}

TEST_CASE("embedding construction checks upstream dimensions") {
  Rng rng(15);
  const Sample s = testing::toy_sample("u", 3, 8, 6, 10, 0, rng);
  Rng arng(16);
  const AdapterModel adapter = AdapterModel::initialized({3, 8, 4, kNumEmotions}, 0, 0.15, arng);
  const VisionMLP vision = VisionMLP::initialized(6, 8, 0.07, arng);

  const auto e = embed_sample(s, {&adapter, &vision}, ModalitySet::all());
  CHECK(e.acoustic->size() == 8);
  CHECK(e.visual->size() == 8);
  CHECK(*e.lexical == s.lexical);
  CHECK(*e.acoustic == extract_acoustic(s.acoustic, adapter));

  const auto raw = embed_sample(s, {&adapter, nullptr}, ModalitySet::parse("v"));
  CHECK(*raw.visual == s.visual);
  CHECK_FALSE(raw.acoustic.has_value());

  const VisionMLP wrong = VisionMLP::initialized(5, 8, 0.07, arng);
  CHECK_THROWS_AS(embed_sample(s, {&adapter, &wrong}, ModalitySet::all()), CheckpointError);

  const FusionModel fusion({8, 10, 8, 4, kNumEmotions}, ModalitySet::all());
  CHECK_NOTHROW(check_fusion_compatibility(fusion, {&adapter, &vision}, 6, 10));
  CHECK_THROWS_AS(check_fusion_compatibility(fusion, {&adapter, &vision}, 6, 11), CheckpointError);
  CHECK_THROWS_AS(check_fusion_compatibility(fusion, {&adapter, nullptr}, 6, 10), CheckpointError);
}
