#include "emofuse/feature_store.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "emofuse/errors.hpp"

namespace emofuse {

namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace detail

namespace {

constexpr std::string_view kMagic = "EMOF";
constexpr std::string_view kManifestHeader = "sample_id\tlabel\tsplit";

std::size_t block_size(const FeatureStore& s, char which) {
  const std::size_t n = s.size();
  switch (which) {
    case 'a':
      return n * s.header.layers * s.header.acoustic_dim;
    case 'v':
      return n * s.header.visual_dim;
    default:
      return n * s.header.lexical_dim;
  }
}

std::string encode_manifest(const FeatureStore& store) {
  std::string out(kManifestHeader);
  out += '\n';
  for (const auto& row : store.manifest) {
    out += row.sample_id;
    out += '\t';
    out += row.label ? std::string(emotion_name(*row.label)) : std::string("-");
    out += '\t';
    out += split_name(row.split);
    out += '\n';
  }
  return out;
}

std::vector<ManifestRow> decode_manifest(const std::string& text, std::size_t expected_rows) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw FormatError("manifest header missing or malformed");
  }
  std::vector<ManifestRow> rows;
  rows.reserve(expected_rows);
  while (std::getline(in, line)) {
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      throw FormatError("manifest row " + std::to_string(rows.size()) + " does not have 3 columns");
    }
    ManifestRow row;
    row.sample_id = line.substr(0, t1);
    const std::string label = line.substr(t1 + 1, t2 - t1 - 1);
    const std::string split = line.substr(t2 + 1);
    if (label != "-") {
      row.label = emotion_from_name(label);
      if (!row.label) throw FormatError("unknown emotion label '" + label + "' for '" + row.sample_id + "'");
    }
    const auto sp = split_from_name(split);
    if (!sp) throw FormatError("unknown split '" + split + "' for '" + row.sample_id + "'");
    row.split = *sp;
    rows.push_back(std::move(row));
  }
  if (rows.size() != expected_rows) {
    throw FormatError("manifest has " + std::to_string(rows.size()) + " rows, header declares " +
                      std::to_string(expected_rows));
  }
  return rows;
}

}  // namespace

void FeatureStore::validate() const {
  if (header.layer_ids.size() != header.layers) {
    throw DataError("store header lists " + std::to_string(header.layer_ids.size()) +
                    " layer ids for " + std::to_string(header.layers) + " layers");
  }
  if (acoustic.size() != block_size(*this, 'a') || visual.size() != block_size(*this, 'v') ||
      lexical.size() != block_size(*this, 'l')) {
    throw DataError("feature block sizes do not match " + std::to_string(size()) +
                    " manifest rows");
  }
  std::set<std::string> seen;
  for (const auto& row : manifest) {
    if (row.sample_id.empty() || row.sample_id.find_first_of("\t\n\r") != std::string::npos) {
      throw DataError("sample id '" + row.sample_id + "' is empty or contains tab/newline");
    }
    if (!seen.insert(row.sample_id).second) throw DataError("duplicate sample id '" + row.sample_id + "'");
    if (row.split == Split::labeled && !row.label) {
      throw DataError("labeled sample '" + row.sample_id + "' has no label");
    }
  }
  for (const auto* block : {&acoustic, &visual, &lexical}) {
    for (float v : *block) {
      if (!std::isfinite(v)) throw DataError("feature store contains a non-finite value");
    }
  }
}

Sample FeatureStore::sample(std::size_t i) const {
  if (i >= size()) throw ArgumentError("sample index out of range");
  const std::size_t k = header.layers, da = header.acoustic_dim;
  const std::size_t dv = header.visual_dim, dl = header.lexical_dim;
  Sample s;
  s.id = manifest[i].sample_id;
  s.label = manifest[i].label;
  s.split = manifest[i].split;
  s.acoustic = Tensor2(k, da);
  const float* a = acoustic.data() + i * k * da;
  for (std::size_t j = 0; j < k * da; ++j) s.acoustic[j] = a[j];
  s.visual.assign(visual.begin() + static_cast<std::ptrdiff_t>(i * dv),
                  visual.begin() + static_cast<std::ptrdiff_t>((i + 1) * dv));
  s.lexical.assign(lexical.begin() + static_cast<std::ptrdiff_t>(i * dl),
                   lexical.begin() + static_cast<std::ptrdiff_t>((i + 1) * dl));
  return s;
}

std::vector<Sample> FeatureStore::samples() const {
  std::vector<Sample> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(sample(i));
  return out;
}

std::vector<Sample> FeatureStore::samples(Split split) const {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (manifest[i].split == split) out.push_back(sample(i));
  return out;
}

std::vector<std::uint8_t> encode_store(const FeatureStore& store) {
  store.validate();
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kStoreFormatVersion);
  w.u32(static_cast<std::uint32_t>(store.size()));
  w.u32(store.header.layers);
  w.u32(store.header.acoustic_dim);
  w.u32(store.header.visual_dim);
  w.u32(store.header.lexical_dim);
  for (std::uint32_t id : store.header.layer_ids) w.u32(id);
  const std::string manifest = encode_manifest(store);
  w.u32(static_cast<std::uint32_t>(manifest.size()));
  w.bytes(manifest);
  for (const auto* block : {&store.acoustic, &store.visual, &store.lexical})
    for (float v : *block) w.f32(v);
  return w.data();
}

FeatureStore decode_store(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size(), "magic") != kMagic) {
    throw FormatError("not an EMOF feature store (bad magic)");
  }
  const std::uint32_t version = r.u32("format version");
  if (version != kStoreFormatVersion) {
    throw FormatError("unsupported EMOF version " + std::to_string(version) + " (expected " +
                      std::to_string(kStoreFormatVersion) + ")");
  }
  FeatureStore store;
  const std::uint32_t n = r.u32("sample count");
  store.header.layers = r.u32("layer count");
  store.header.acoustic_dim = r.u32("acoustic dim");
  store.header.visual_dim = r.u32("visual dim");
  store.header.lexical_dim = r.u32("lexical dim");
  r.need(4ull * store.header.layers, "layer ids");
  for (std::uint32_t i = 0; i < store.header.layers; ++i) store.header.layer_ids.push_back(r.u32("layer id"));
  const std::uint32_t manifest_bytes = r.u32("manifest length");
  store.manifest = decode_manifest(r.bytes(manifest_bytes, "manifest"), n);

  auto read_block = [&r](std::vector<float>& block, std::uint64_t count, const char* what) {
    r.need(count * 4, what);
    block.resize(count);
    for (auto& v : block) v = r.f32(what);
  };
  const std::uint64_t nn = n;
  read_block(store.acoustic, nn * store.header.layers * store.header.acoustic_dim, "acoustic block");
  read_block(store.visual, nn * store.header.visual_dim, "visual block");
  read_block(store.lexical, nn * store.header.lexical_dim, "lexical block");
  if (r.remaining() != 0) {
    throw CorruptionError("unexpected trailing bytes after lexical block", r.offset());
  }
  try {
    store.validate();
  } catch (const DataError& e) {
    throw FormatError(std::string("feature store failed validation: ") + e.what());
  }
  return store;
}

void write_store(const FeatureStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_store(store);
  detail::write_file_bytes(path, bytes);
}

FeatureStore read_store(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  return decode_store(bytes);
}

}  // namespace emofuse
