#include "emofuse/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "emofuse/errors.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("synthetic config field '" + field + "' " + why);
  };
  if (n_classes != kNumEmotions) fail("n_classes", "must be 6 (the emotion label set is fixed)");
  if (layers < 1) fail("layers", "must be at least 1");
  if (acoustic_dim < 2) fail("acoustic_dim", "must be >= 2");
  if (visual_dim < 2) fail("visual_dim", "must be >= 2");
  if (lexical_dim < 2) fail("lexical_dim", "must be >= 2");
  if (latent_dim < 2) fail("latent_dim", "must be >= 2");
  if (latent_dim > acoustic_dim || latent_dim > visual_dim || latent_dim > lexical_dim) {
    fail("latent_dim", "must not exceed any modality dim");
  }
  if (peak_layer >= layers) fail("peak_layer", "must be < layers");
  if (!layer_snr.empty() && layer_snr.size() != layers) fail("layer_snr", "must have one entry per layer");
  if (!(sigma > 0.0)) fail("sigma", "must be > 0");
  if (!(rho_xm >= 0.0 && rho_xm <= 1.0)) fail("rho_xm", "must be in [0, 1]");
  if (!(class_sep > 0.0)) fail("class_sep", "must be > 0");
  if (!(jitter >= 0.0)) fail("jitter", "must be >= 0");
  if (!(lexical_scale >= 0.0)) fail("lexical_scale", "must be >= 0");
}

std::vector<double> SyntheticConfig::snr_profile() const {
  if (!layer_snr.empty()) return layer_snr;
  std::vector<double> snr(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    const double offset = static_cast<double>(i) - static_cast<double>(peak_layer);
    snr[i] = std::exp(-0.5 * offset * offset / (1.4 * 1.4));
  }
  return snr;
}

namespace {

/// Gram-Schmidt on Gaussian columns; returns rows×cols with orthonormal columns.
Tensor2 orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor2 q(rows, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> v(rows);
    double norm = 0.0;
    do {
      for (auto& x : v) x = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < rows; ++r) dot += v[r] * q(r, p);
        for (std::size_t r = 0; r < rows; ++r) v[r] -= dot * q(r, p);
      }
      norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
    } while (norm < 1e-8);
    for (std::size_t r = 0; r < rows; ++r) q(r, c) = v[r] / norm;
  }
  return q;
}

void project_into(std::span<float> out, const Tensor2& map, std::span<const double> latent,
                  double scale, double sigma, Rng& rng) {
  for (std::size_t r = 0; r < out.size(); ++r) {
    double v = 0.0;
    for (std::size_t c = 0; c < latent.size(); ++c) v += map(r, c) * latent[c];
    out[r] = static_cast<float>(scale * v + sigma * rng.normal());
  }
}

}  // namespace

FeatureStore generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng structure(derive_seed(cfg.seed, 101));
  Rng draws(derive_seed(cfg.seed, 102));
  const std::size_t dz = cfg.latent_dim;
  const std::size_t nc = cfg.n_classes;

  Tensor2 centers(nc, dz);
  for (std::size_t c = 0; c < nc; ++c) {
    double norm = 0.0;
    for (auto& v : centers.row(c)) {
      v = structure.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : centers.row(c)) v *= cfg.class_sep / norm;
  }

  // Orthonormal basis of the centered class-center span; jitter is projected off it.
  std::vector<std::vector<double>> class_basis;
  {
    std::vector<double> mean(dz, 0.0);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t j = 0; j < dz; ++j) mean[j] += centers(c, j) / static_cast<double>(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      std::vector<double> v(dz);
      for (std::size_t j = 0; j < dz; ++j) v[j] = centers(c, j) - mean[j];
      for (const auto& b : class_basis) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dz; ++j) dot += v[j] * b[j];
        for (std::size_t j = 0; j < dz; ++j) v[j] -= dot * b[j];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-9) continue;
      for (auto& x : v) x /= norm;
      class_basis.push_back(std::move(v));
    }
  }

  const Tensor2 map_a = orthonormal_columns(cfg.acoustic_dim, dz, structure);
  const Tensor2 map_v = orthonormal_columns(cfg.visual_dim, dz, structure);
  const Tensor2 map_l = orthonormal_columns(cfg.lexical_dim, dz, structure);
  const auto snr = cfg.snr_profile();

  FeatureStore store;
  store.header.layers = static_cast<std::uint32_t>(cfg.layers);
  store.header.acoustic_dim = static_cast<std::uint32_t>(cfg.acoustic_dim);
  store.header.visual_dim = static_cast<std::uint32_t>(cfg.visual_dim);
  store.header.lexical_dim = static_cast<std::uint32_t>(cfg.lexical_dim);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    store.header.layer_ids.push_back(cfg.first_layer_id + static_cast<std::uint32_t>(i));

  const std::size_t total = cfg.n_samples + cfg.n_unlabeled + cfg.n_test;
  store.acoustic.resize(total * cfg.layers * cfg.acoustic_dim);
  store.visual.resize(total * cfg.visual_dim);
  store.lexical.resize(total * cfg.lexical_dim);
  store.manifest.reserve(total);

  struct Part {
    Split split;
    std::size_t count;
    const char* prefix;
  };
  const Part parts[] = {{Split::labeled, cfg.n_samples, "lab"},
                        {Split::unlabeled, cfg.n_unlabeled, "unl"},
                        {Split::test, cfg.n_test, "tst"}};

  std::size_t row = 0;
  std::vector<double> latent(dz);
  for (const Part& part : parts) {
    // Balanced labels in shuffled order.
    std::vector<std::size_t> classes(part.count);
    for (std::size_t i = 0; i < part.count; ++i) classes[i] = i % nc;
    draws.shuffle(std::span<std::size_t>(classes));

    for (std::size_t i = 0; i < part.count; ++i, ++row) {
      const std::size_t c = classes[i];
      std::vector<double> jit(dz);
      for (auto& v : jit) v = draws.normal();
      for (const auto& b : class_basis) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dz; ++j) dot += jit[j] * b[j];
        for (std::size_t j = 0; j < dz; ++j) jit[j] -= dot * b[j];
      }
      for (std::size_t j = 0; j < dz; ++j) latent[j] = centers(c, j) + cfg.jitter * jit[j];

      for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::span<float> out(store.acoustic.data() + (row * cfg.layers + l) * cfg.acoustic_dim,
                             cfg.acoustic_dim);
        project_into(out, map_a, latent, snr[l], cfg.sigma, draws);
      }
      project_into({store.visual.data() + row * cfg.visual_dim, cfg.visual_dim}, map_v, latent,
                   cfg.rho_xm, cfg.sigma, draws);
      project_into({store.lexical.data() + row * cfg.lexical_dim, cfg.lexical_dim}, map_l, latent,
                   cfg.lexical_scale, cfg.sigma, draws);

      char id[32];
      std::snprintf(id, sizeof(id), "%s-%05zu", part.prefix, i);
      ManifestRow m;
      m.sample_id = id;
      m.split = part.split;
      if (part.split != Split::unlabeled) m.label = emotion_from_index(c);
      store.manifest.push_back(std::move(m));
    }
  }
  return store;
}

}  // namespace emofuse
