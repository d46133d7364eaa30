#pragma once

#include "hvl/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hvl {

inline constexpr int kBundleVersion = 1;

struct ItemRecord {
  std::string id;
  int label = -1;  // -1: unlabeled / OOD, evaluation only
  std::uint64_t offset = 0;

  bool operator==(const ItemRecord&) const = default;
};

struct BundleManifest {
  int version = kBundleVersion;
  Index d = 0;
  Index n = 0;
  Index num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<ItemRecord> items;

  Index mid_patches() const { return n * n; }
  Index high_patches() const { return 4 * n * n; }
  /// Vectors per item record: global + n^2 mid + (2n)^2 high.
  Index vectors_per_item() const { return 1 + mid_patches() + high_patches(); }
  std::uint64_t record_bytes() const {
    return static_cast<std::uint64_t>(vectors_per_item() * d) * sizeof(float);
  }

  bool operator==(const BundleManifest&) const = default;
};

/// Raw (pre-adapter) encoder outputs for one image. Patches are stored as
/// columns, row-major over the patch grid: column r*n + c is mid patch (r, c),
/// column R*2n + C is high patch (R, C).
struct ImageEmbeddings {
  std::string id;
  int label = -1;
  Vector<double> global;
  Matrix<double> mid;
  Matrix<double> high;

  bool labeled() const { return label >= 0; }
  bool operator==(const ImageEmbeddings&) const = default;
};

/// Frozen class text embeddings, one column per class.
struct TextBank {
  Matrix<double> t;

  Index dim() const { return t.rows(); }
  Index num_classes() const { return t.cols(); }
  bool operator==(const TextBank&) const = default;
};

struct Bundle {
  BundleManifest manifest;
  std::vector<ImageEmbeddings> items;
  TextBank text;
};

/// Builds a manifest whose offsets lay the items out back to back.
BundleManifest make_manifest(Index d, Index n, std::vector<std::string> class_names,
                             std::span<const ImageEmbeddings> items);

/// Throws FormatError / DataError when the manifest breaks its invariants.
void validate_manifest(const BundleManifest& manifest);

/// Reads manifest.json, embeddings.bin and text.bin from `dir`.
/// Throws FormatError, TruncationError or DataError (naming the item id).
Bundle load_bundle(const std::filesystem::path& dir);

/// Writes the three bundle files. Offsets in `manifest` must match the
/// back-to-back layout (see make_manifest).
void write_bundle(const BundleManifest& manifest, std::span<const ImageEmbeddings> items,
                  const TextBank& text, const std::filesystem::path& dir);

inline void write_bundle(const Bundle& bundle, const std::filesystem::path& dir) {
  write_bundle(bundle.manifest, bundle.items, bundle.text, dir);
}

/// FNV-1a 64 over the three bundle files, in a fixed order.
std::uint64_t bundle_hash(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Synthetic bundles
//
// A shared "world" (class anchors, a tissue anchor and noisy text anchors) is
// drawn from `world_seed`; the images are drawn from the seed passed to
// generate_synthetic. Train and test splits therefore share anchors when they
// share world_seed.
//
// ID image of class c:
//   global       = a_c + sigma_within * g
//   lesion patch = a_c + sigma_within * g
//   tissue patch = s   + sigma_within * g
// round(lesion_fraction * n^2) mid patches (at least one) are lesion patches;
// inside each of them round(lesion_fraction * 4) high children (at least one)
// are lesion patches. Every other patch is tissue.
// OOD images use the same recipe with the anchor (1-w) a_i + w a_j for two
// distinct classes i, j and w uniform in [ood_mix_min, ood_mix_max].
// Text anchors are t_c = a_c + sigma_text * g.
// Anchors are a_c = sigma_between * g, s = sigma_between * g.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  Index d = 32;
  Index n = 2;
  Index num_classes = 4;
  Index id_per_class = 50;
  Index ood_count = 0;
  double sigma_between = 1.0;
  double sigma_within = 0.25;
  double sigma_text = 0.5;
  double lesion_fraction = 0.5;
  double ood_mix_min = 0.3;
  double ood_mix_max = 0.7;
  std::uint64_t world_seed = 0;

  void validate() const;  // ConfigError
};

struct SyntheticBundle {
  Bundle bundle;
  Matrix<double> class_anchors;  // d x C
  Vector<double> tissue_anchor;
};

SyntheticBundle generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace hvl
