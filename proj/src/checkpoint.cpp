#include "emofuse/checkpoint.hpp"

#include "binary_io.hpp"
#include "emofuse/errors.hpp"

namespace emofuse {

namespace {

constexpr std::string_view kMagic = "EMCK";

void copy_params(const ParamSet& params, CheckpointData& data) {
  for (const auto& name : params.names()) data.tensors.emplace(name, params.param(name));
}

void restore_params(const CheckpointData& data, ParamSet& params) {
  for (const auto& name : params.names()) {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end()) {
      throw CheckpointError("checkpoint of kind '" + data.kind + "' is missing tensor '" + name + "'");
    }
    if (!it->second.same_shape(params.param(name))) {
      throw CheckpointError("tensor '" + name + "' has shape " + it->second.shape_string() +
                            ", model expects " + params.param(name).shape_string());
    }
    params.param(name) = it->second;
  }
  if (data.tensors.size() != params.names().size()) {
    throw CheckpointError("checkpoint of kind '" + data.kind + "' has unexpected extra tensors");
  }
}

CheckpointData read_kind(const std::filesystem::path& path, const std::string& expected_kind) {
  CheckpointData data = decode_checkpoint(detail::read_file_bytes(path));
  if (data.kind != expected_kind) {
    throw CheckpointError("expected a '" + expected_kind + "' checkpoint but '" + path.string() +
                          "' holds kind '" + data.kind + "'");
  }
  return data;
}

std::uint64_t dim(const CheckpointData& data, const std::string& name) {
  auto it = data.dims.find(name);
  if (it == data.dims.end()) throw CheckpointError("checkpoint is missing dim '" + name + "'");
  return it->second;
}

double scalar(const CheckpointData& data, const std::string& name) {
  auto it = data.scalars.find(name);
  if (it == data.scalars.end()) throw CheckpointError("checkpoint is missing scalar '" + name + "'");
  return it->second;
}

void expect_dim(const std::string& what, std::uint64_t expected, std::uint64_t found) {
  if (expected != found) {
    throw CheckpointError("incompatible checkpoint: " + what + " is " + std::to_string(found) +
                          ", consumer expects " + std::to_string(expected));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.str(data.kind);
  w.u32(static_cast<std::uint32_t>(data.dims.size()));
  for (const auto& [name, v] : data.dims) {
    w.str(name);
    w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(data.scalars.size()));
  for (const auto& [name, v] : data.scalars) {
    w.str(name);
    w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.values()) w.f64(v);
  }
  return w.data();
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size(), "magic") != kMagic) {
    throw CheckpointError("not an emofuse checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  data.kind = r.str("kind");
  const std::uint32_t n_dims = r.u32("dim count");
  for (std::uint32_t i = 0; i < n_dims; ++i) {
    std::string name = r.str("dim name");
    data.dims[name] = r.u64("dim value");
  }
  const std::uint32_t n_scalars = r.u32("scalar count");
  for (std::uint32_t i = 0; i < n_scalars; ++i) {
    std::string name = r.str("scalar name");
    data.scalars[name] = r.f64("scalar value");
  }
  const std::uint32_t n_tensors = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str("tensor name");
    const std::uint32_t rows = r.u32("tensor rows");
    const std::uint32_t cols = r.u32("tensor cols");
    r.need(8ull * rows * cols, "tensor data");
    Tensor2 t(rows, cols);
    for (auto& v : t.values()) v = r.f64("tensor data");
    data.tensors.emplace(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after checkpoint tensors", r.offset());
  return data;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const AdapterModel& model, const std::filesystem::path& path) {
  CheckpointData data;
  data.kind = "adapter";
  const AdapterDims& d = model.dims();
  data.dims = {{"layers", d.layers},
               {"feature_dim", d.feature_dim},
               {"bottleneck", d.bottleneck},
               {"num_classes", d.num_classes}};
  data.scalars = {{"mask_ratio", model.mask_ratio()}};
  copy_params(model.params(), data);
  detail::write_file_bytes(path, encode_checkpoint(data));
}

void save_checkpoint(const VisionMLP& model, const std::filesystem::path& path) {
  CheckpointData data;
  data.kind = "vision";
  data.dims = {{"visual_dim", model.visual_dim()}, {"acoustic_dim", model.acoustic_dim()}};
  copy_params(model.params(), data);
  detail::write_file_bytes(path, encode_checkpoint(data));
}

void save_checkpoint(const FusionModel& model, const std::filesystem::path& path) {
  CheckpointData data;
  data.kind = "fusion";
  const FusionDims& d = model.dims();
  std::uint64_t mask = 0;
  for (Modality m : kAllModalities)
    if (model.modalities().contains(m)) mask |= 1u << static_cast<int>(m);
  data.dims = {{"acoustic_dim", d.acoustic_dim}, {"lexical_dim", d.lexical_dim},
               {"visual_dim", d.visual_dim},     {"hidden", d.hidden},
               {"num_classes", d.num_classes},   {"modalities", mask},
               {"policy", static_cast<std::uint64_t>(model.policy())}};
  copy_params(model.params(), data);
  detail::write_file_bytes(path, encode_checkpoint(data));
}

AdapterModel load_adapter_checkpoint(const std::filesystem::path& path,
                                     const std::optional<AdapterDims>& expected) {
  const CheckpointData data = read_kind(path, "adapter");
  AdapterDims d;
  d.layers = dim(data, "layers");
  d.feature_dim = dim(data, "feature_dim");
  d.bottleneck = dim(data, "bottleneck");
  d.num_classes = dim(data, "num_classes");
  if (expected) {
    expect_dim("adapter layer count", expected->layers, d.layers);
    expect_dim("adapter feature dim", expected->feature_dim, d.feature_dim);
    if (expected->bottleneck != 0) expect_dim("adapter bottleneck", expected->bottleneck, d.bottleneck);
  }
  AdapterModel model(d, scalar(data, "mask_ratio"));
  restore_params(data, model.params());
  return model;
}

VisionMLP load_vision_checkpoint(const std::filesystem::path& path,
                                 std::optional<std::size_t> expected_visual_dim,
                                 std::optional<std::size_t> expected_acoustic_dim) {
  const CheckpointData data = read_kind(path, "vision");
  const std::size_t dv = dim(data, "visual_dim");
  const std::size_t da = dim(data, "acoustic_dim");
  if (expected_visual_dim) expect_dim("vision MLP input dim", *expected_visual_dim, dv);
  if (expected_acoustic_dim) expect_dim("vision MLP output dim", *expected_acoustic_dim, da);
  VisionMLP model(dv, da);
  restore_params(data, model.params());
  return model;
}

FusionModel load_fusion_checkpoint(const std::filesystem::path& path,
                                   const std::optional<FusionDims>& expected) {
  const CheckpointData data = read_kind(path, "fusion");
  FusionDims d;
  d.acoustic_dim = dim(data, "acoustic_dim");
  d.lexical_dim = dim(data, "lexical_dim");
  d.visual_dim = dim(data, "visual_dim");
  d.hidden = dim(data, "hidden");
  d.num_classes = dim(data, "num_classes");
  ModalitySet modalities;
  const std::uint64_t mask = dim(data, "modalities");
  for (Modality m : kAllModalities)
    if (mask & (1u << static_cast<int>(m))) modalities.insert(m);
  const std::uint64_t policy = dim(data, "policy");
  if (policy > 2) throw CheckpointError("unknown missing-modality policy code in checkpoint");
  if (expected) {
    for (Modality m : kAllModalities) {
      if (!modalities.contains(m)) continue;
      expect_dim(std::string("fusion input dim '") + modality_tag(m) + "'", expected->input_dim(m),
                 d.input_dim(m));
    }
  }
  FusionModel model(d, modalities, static_cast<MissingPolicy>(policy));
  restore_params(data, model.params());
  return model;
}

}  // namespace emofuse
