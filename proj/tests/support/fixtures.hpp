#pragma once

#include "reference.hpp"

#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/objective.hpp"
#include "hvl/random.hpp"

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

namespace fixtures {

using hvl::Index;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "hvl") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline hvl::Matrix<double> gaussian(hvl::Rng& rng, Index rows, Index cols, double sigma = 1.0) {
  hvl::Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
  return m;
}

inline hvl::Vector<double> gaussian_vec(hvl::Rng& rng, Index size, double sigma = 1.0) {
  return gaussian(rng, size, 1, sigma);
}

inline hvl::ImageEmbeddings random_image(hvl::Rng& rng, Index d, Index n, int label, const std::string& id = "img") {
  hvl::ImageEmbeddings img;
  img.id = id;
  img.label = label;
  img.global = gaussian_vec(rng, d);
  img.mid = gaussian(rng, d, n * n);
  img.high = gaussian(rng, d, 4 * n * n);
  return img;
}

/// Small random problem: text, parameters and labeled images.
struct World {
  Index d = 0, C = 0, n = 0;
  hvl::TextBank text;
  hvl::ModelParams<double> params;
  std::vector<hvl::ImageEmbeddings> items;
};

inline World random_world(hvl::Rng& rng, Index d, Index C, Index n, Index count, double param_sigma = 0.3) {
  World w;
  w.d = d;
  w.C = C;
  w.n = n;
  w.text.t = gaussian(rng, d, C);
  w.params.W = gaussian(rng, d, d, param_sigma);
  w.params.b0 = gaussian(rng, d, C, param_sigma);
  w.params.b2 = gaussian(rng, d, C, param_sigma);
  for (Index i = 0; i < count; ++i)
    w.items.push_back(random_image(rng, d, n, static_cast<int>(rng.below(C)), "w" + std::to_string(i)));
  return w;
}

/// Random world with d, C, n drawn from small ranges.
inline World random_small_world(hvl::Rng& rng, Index count = 1) {
  const Index d = 2 + static_cast<Index>(rng.below(9));
  const Index C = 2 + static_cast<Index>(rng.below(4));
  const Index n = 1 + static_cast<Index>(rng.below(3));
  return random_world(rng, d, C, n, count, 0.1 + rng.uniform());
}

// ---- conversions to the reference types ----

inline ref::Vec to_ref(const hvl::Vector<double>& v) { return ref::Vec(v.data(), v.data() + v.size()); }

inline ref::Cols to_cols(const hvl::Matrix<double>& m) {
  ref::Cols cols;
  for (Index c = 0; c < m.cols(); ++c) cols.emplace_back(m.col(c).data(), m.col(c).data() + m.rows());
  return cols;
}

inline ref::Square to_square(const hvl::Matrix<double>& W) {
  ref::Square rows(W.rows(), ref::Vec(W.cols()));
  for (Index r = 0; r < W.rows(); ++r)
    for (Index c = 0; c < W.cols(); ++c) rows[r][c] = W(r, c);
  return rows;
}

inline ref::Image to_ref(const hvl::ImageEmbeddings& img) {
  return {to_ref(img.global), to_cols(img.mid), to_cols(img.high), img.label};
}

inline ref::Params to_ref(const hvl::ModelParams<double>& p) { return {to_square(p.W), to_cols(p.b0), to_cols(p.b2)}; }

inline std::vector<bool> to_ref(const hvl::Mask& m) { return std::vector<bool>(m.begin(), m.end()); }

inline ref::Settings to_ref(const hvl::ModelConfig& cfg, Index n) {
  ref::Settings s;
  s.n = static_cast<int>(n);
  s.tau = cfg.alignment.tau;
  s.K = static_cast<int>(cfg.K);
  s.lambda_ood = cfg.lambda_ood;
  s.renormalize = cfg.alignment.renormalize_aggregates;
  s.fusion = !cfg.ablations.disable_cross_scale_fusion;
  s.propagation = !cfg.ablations.disable_lower_scale_propagation;
  s.ood_loss = !cfg.ablations.disable_ood_loss;
  return s;
}

inline ref::Frozen to_ref(const hvl::DiscreteChoices& ch) {
  ref::Frozen f;
  f.mask_mid = to_ref(*ch.mask_mid);
  f.mask_high = to_ref(*ch.mask_high);
  for (Index j : *ch.selection) f.selection.push_back(static_cast<int>(j));
  return f;
}

inline double max_abs_diff(const ref::Vec& a, const hvl::Vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b(static_cast<Index>(i))));
  return a.size() == static_cast<std::size_t>(b.size()) ? m : INFINITY;
}

inline double max_abs_diff(const ref::Cols& a, const hvl::Matrix<double>& b) {
  if (a.size() != static_cast<std::size_t>(b.cols())) return INFINITY;
  double m = 0;
  for (std::size_t c = 0; c < a.size(); ++c) m = std::max(m, max_abs_diff(a[c], b.col(static_cast<Index>(c))));
  return m;
}

}  // namespace fixtures
