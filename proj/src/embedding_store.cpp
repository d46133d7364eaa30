#include "hvl/embedding_store.hpp"

#include "hvl/hash.hpp"
#include "hvl/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

namespace hvl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kManifestKeys = {"version", "d", "n", "num_classes", "class_names", "items"};
const std::set<std::string> kItemKeys = {"id", "label", "offset"};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

void append_f32(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
}

double read_f32(const std::string& bytes, std::uint64_t pos) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k)
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + k])) << (8 * k);
  return static_cast<double>(std::bit_cast<float>(bits));
}

template <typename Derived>
void append_columns(std::string& out, const Eigen::MatrixBase<Derived>& m) {
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) append_f32(out, m(r, c));
}

void warn_unknown_keys(const json& obj, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : obj.items())
    if (!known.contains(key)) std::cerr << "warning: ignoring unknown key '" << key << "' in " << where << "\n";
}

BundleManifest parse_manifest(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("manifest.json: top level must be an object");
  warn_unknown_keys(j, kManifestKeys, "manifest.json");

  BundleManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.d = j.at("d").get<Index>();
    m.n = j.at("n").get<Index>();
    m.num_classes = j.at("num_classes").get<Index>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& item : j.at("items")) {
      warn_unknown_keys(item, kItemKeys, "manifest item");
      m.items.push_back({item.at("id").get<std::string>(), item.at("label").get<int>(),
                         item.at("offset").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  return m;
}

json manifest_json(const BundleManifest& m) {
  json items = json::array();
  for (const auto& it : m.items) items.push_back({{"id", it.id}, {"label", it.label}, {"offset", it.offset}});
  return {{"version", m.version}, {"d", m.d},           {"n", m.n}, {"num_classes", m.num_classes},
          {"class_names", m.class_names}, {"items", items}};
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace

BundleManifest make_manifest(Index d, Index n, std::vector<std::string> class_names,
                             std::span<const ImageEmbeddings> items) {
  BundleManifest m;
  m.d = d;
  m.n = n;
  m.num_classes = static_cast<Index>(class_names.size());
  m.class_names = std::move(class_names);
  std::uint64_t offset = 0;
  for (const auto& item : items) {
    m.items.push_back({item.id, item.label, offset});
    offset += m.record_bytes();
  }
  return m;
}

void validate_manifest(const BundleManifest& m) {
  if (m.version != kBundleVersion) throw FormatError("unsupported bundle version " + std::to_string(m.version));
  if (m.d < 1) throw FormatError("d must be >= 1");
  if (m.n < 1) throw FormatError("n must be >= 1");
  if (m.num_classes < 2) throw FormatError("num_classes must be >= 2");
  if (static_cast<Index>(m.class_names.size()) != m.num_classes)
    throw FormatError("class_names has " + std::to_string(m.class_names.size()) + " entries, expected " +
                      std::to_string(m.num_classes));
  for (const auto& item : m.items) {
    if (item.label < -1 || item.label >= m.num_classes)
      throw DataError("item '" + item.id + "' has label " + std::to_string(item.label) + " outside {-1} U [0," +
                      std::to_string(m.num_classes) + ")");
    if (item.offset % 4 != 0) throw FormatError("item '" + item.id + "' offset is not a multiple of 4");
  }
}

Bundle load_bundle(const fs::path& dir) {
  Bundle b;
  b.manifest = parse_manifest(read_file(dir / "manifest.json"));
  const BundleManifest& m = b.manifest;
  validate_manifest(m);

  const std::string emb = read_file(dir / "embeddings.bin");
  const std::uint64_t rec = m.record_bytes();
  const std::uint64_t expected = rec * m.items.size();
  if (emb.size() != expected)
    throw TruncationError("embeddings.bin is " + std::to_string(emb.size()) + " bytes, expected " +
                          std::to_string(expected));

  const Index mid = m.mid_patches();
  const Index high = m.high_patches();
  b.items.reserve(m.items.size());
  for (const auto& record : m.items) {
    if (record.offset + rec > emb.size())
      throw TruncationError("item '" + record.id + "' record runs past the end of embeddings.bin");
    ImageEmbeddings img;
    img.id = record.id;
    img.label = record.label;
    img.global.resize(m.d);
    img.mid.resize(m.d, mid);
    img.high.resize(m.d, high);
    std::uint64_t pos = record.offset;
    for (Index r = 0; r < m.d; ++r, pos += 4) img.global(r) = read_f32(emb, pos);
    for (Index c = 0; c < mid; ++c)
      for (Index r = 0; r < m.d; ++r, pos += 4) img.mid(r, c) = read_f32(emb, pos);
    for (Index c = 0; c < high; ++c)
      for (Index r = 0; r < m.d; ++r, pos += 4) img.high(r, c) = read_f32(emb, pos);
    if (!all_finite(img.global) || !all_finite(img.mid) || !all_finite(img.high))
      throw DataError("item '" + record.id + "' contains non-finite values");
    b.items.push_back(std::move(img));
  }

  const std::string text = read_file(dir / "text.bin");
  const std::uint64_t text_bytes = static_cast<std::uint64_t>(m.d * m.num_classes) * 4;
  if (text.size() != text_bytes)
    throw TruncationError("text.bin is " + std::to_string(text.size()) + " bytes, expected " +
                          std::to_string(text_bytes));
  b.text.t.resize(m.d, m.num_classes);
  std::uint64_t pos = 0;
  for (Index c = 0; c < m.num_classes; ++c)
    for (Index r = 0; r < m.d; ++r, pos += 4) b.text.t(r, c) = read_f32(text, pos);
  if (!all_finite(b.text.t)) throw DataError("text.bin contains non-finite values");
  return b;
}

void write_bundle(const BundleManifest& m, std::span<const ImageEmbeddings> items, const TextBank& text,
                  const fs::path& dir) {
  validate_manifest(m);
  require(m.items.size() == items.size(), "write_bundle: manifest and item list differ in length");
  require(text.dim() == m.d && text.num_classes() == m.num_classes, "write_bundle: text bank shape mismatch");

  std::string emb;
  emb.reserve(m.record_bytes() * items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& img = items[i];
    const auto& record = m.items[i];
    require(record.id == img.id && record.label == img.label, "write_bundle: item " + img.id + " disagrees with manifest");
    require(record.offset == emb.size(), "write_bundle: item " + img.id + " offset is not back-to-back");
    require(img.global.size() == m.d && img.mid.rows() == m.d && img.mid.cols() == m.mid_patches() &&
                img.high.rows() == m.d && img.high.cols() == m.high_patches(),
            "write_bundle: item " + img.id + " has the wrong shape");
    append_columns(emb, img.global);
    append_columns(emb, img.mid);
    append_columns(emb, img.high);
  }
  std::string tb;
  append_columns(tb, text.t);

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "manifest.json", manifest_json(m).dump(2) + "\n");
  write_file(dir / "embeddings.bin", emb);
  write_file(dir / "text.bin", tb);
}

std::uint64_t bundle_hash(const fs::path& dir) {
  Fnv1a64 h;
  for (const char* name : {"manifest.json", "embeddings.bin", "text.bin"}) h.update(read_file(dir / name));
  return h.digest();
}

void SyntheticSpec::validate() const {
  if (d < 1 || n < 1) throw ConfigError("synthetic spec: d and n must be >= 1");
  if (num_classes < 2) throw ConfigError("synthetic spec: num_classes must be >= 2");
  if (id_per_class < 0 || ood_count < 0) throw ConfigError("synthetic spec: counts must be >= 0");
  if (!(sigma_between > 0) || !(sigma_within > 0) || !(sigma_text > 0))
    throw ConfigError("synthetic spec: sigmas must be > 0");
  if (!(lesion_fraction > 0 && lesion_fraction <= 1)) throw ConfigError("synthetic spec: lesion_fraction must be in (0,1]");
  if (!(ood_mix_min >= 0 && ood_mix_min <= ood_mix_max && ood_mix_max <= 1))
    throw ConfigError("synthetic spec: need 0 <= ood_mix_min <= ood_mix_max <= 1");
}

namespace {

Vector<double> gaussian_vector(Rng& rng, Index d, double sigma) {
  Vector<double> v(d);
  for (Index k = 0; k < d; ++k) v(k) = sigma * rng.normal();
  return v;
}

// Picks `count` distinct indices out of [0, total) by partial Fisher-Yates.
std::vector<Index> choose(Rng& rng, Index total, Index count) {
  std::vector<Index> pool(static_cast<std::size_t>(total));
  for (Index i = 0; i < total; ++i) pool[i] = i;
  for (Index i = 0; i < count; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(total - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

ImageEmbeddings draw_image(Rng& rng, const SyntheticSpec& spec, const Vector<double>& lesion,
                           const Vector<double>& tissue) {
  const Index n = spec.n, side = 2 * n;
  const Index mid_lesions = std::max<Index>(1, std::llround(spec.lesion_fraction * double(n * n)));
  const Index child_lesions = std::max<Index>(1, std::llround(spec.lesion_fraction * 4.0));

  std::vector<bool> mid_is_lesion(n * n, false), high_is_lesion(side * side, false);
  for (Index i : choose(rng, n * n, mid_lesions)) {
    mid_is_lesion[i] = true;
    const Index r = i / n, c = i % n;
    for (Index k : choose(rng, 4, child_lesions)) {
      const Index R = 2 * r + k / 2, C = 2 * c + k % 2;
      high_is_lesion[R * side + C] = true;
    }
  }

  ImageEmbeddings img;
  img.global = lesion + gaussian_vector(rng, spec.d, spec.sigma_within);
  img.mid.resize(spec.d, n * n);
  for (Index i = 0; i < n * n; ++i)
    img.mid.col(i) = (mid_is_lesion[i] ? lesion : tissue) + gaussian_vector(rng, spec.d, spec.sigma_within);
  img.high.resize(spec.d, side * side);
  for (Index j = 0; j < side * side; ++j)
    img.high.col(j) = (high_is_lesion[j] ? lesion : tissue) + gaussian_vector(rng, spec.d, spec.sigma_within);
  return img;
}

}  // namespace

SyntheticBundle generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Index d = spec.d, C = spec.num_classes;

  SyntheticBundle out;
  Rng world(spec.world_seed);
  out.class_anchors.resize(d, C);
  for (Index c = 0; c < C; ++c) out.class_anchors.col(c) = gaussian_vector(world, d, spec.sigma_between);
  out.tissue_anchor = gaussian_vector(world, d, spec.sigma_between);
  out.bundle.text.t.resize(d, C);
  for (Index c = 0; c < C; ++c)
    out.bundle.text.t.col(c) = out.class_anchors.col(c) + gaussian_vector(world, d, spec.sigma_text);

  // Image stream is decorrelated from the world stream even when seeds coincide.
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  auto& items = out.bundle.items;
  for (Index c = 0; c < C; ++c) {
    for (Index k = 0; k < spec.id_per_class; ++k) {
      ImageEmbeddings img = draw_image(rng, spec, out.class_anchors.col(c), out.tissue_anchor);
      img.label = static_cast<int>(c);
      img.id = "id_c" + std::to_string(c) + "_" + std::to_string(k);
      items.push_back(std::move(img));
    }
  }
  for (Index k = 0; k < spec.ood_count; ++k) {
    const auto a = static_cast<Index>(rng.below(static_cast<std::uint64_t>(C)));
    auto b = static_cast<Index>(rng.below(static_cast<std::uint64_t>(C - 1)));
    if (b >= a) ++b;
    const double w = spec.ood_mix_min + (spec.ood_mix_max - spec.ood_mix_min) * rng.uniform();
    const Vector<double> anchor = (1.0 - w) * out.class_anchors.col(a) + w * out.class_anchors.col(b);
    ImageEmbeddings img = draw_image(rng, spec, anchor, out.tissue_anchor);
    img.label = -1;
    img.id = "ood_" + std::to_string(k);
    items.push_back(std::move(img));
  }

  // Round through float32 so in-memory values equal what a reload produces.
  for (auto& img : items) {
    img.global = img.global.cast<float>().cast<double>();
    img.mid = img.mid.cast<float>().cast<double>();
    img.high = img.high.cast<float>().cast<double>();
  }
  out.bundle.text.t = out.bundle.text.t.cast<float>().cast<double>();

  std::vector<std::string> names;
  for (Index c = 0; c < C; ++c) names.push_back("class_" + std::to_string(c));
  out.bundle.manifest = make_manifest(d, spec.n, std::move(names), items);
  return out;
}

}  // namespace hvl
