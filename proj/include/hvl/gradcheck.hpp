#pragma once

#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/objective.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hvl {

// Central-difference verification of the objective's analytic gradients.
// Masks and the pseudo-OOD selection are frozen at the base point, matching
// the definition of the analytic gradient.

struct GradcheckSpec {
  Index d = 8;
  Index num_classes = 3;
  Index n = 2;
  Index batch = 2;
  Index K = 2;
  double tau = 0.01;
  double step = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
  bool corrupt_gradient = false;  // fault injection: perturbs one analytic entry

  void validate() const;  // ConfigError
};

struct GradcheckFixture {
  std::vector<ImageEmbeddings> items;
  TextBank text;
  ModelParams<double> params;
  ModelConfig cfg;
  Index n = 0;
};

GradcheckFixture random_fixture(const GradcheckSpec& spec);

struct GradcheckResult {
  double max_rel_error = 0;
  Index coordinates = 0;
  std::string worst_block;
  Index worst_index = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
  bool passed = false;
};

GradcheckResult run_gradcheck(const GradcheckSpec& spec);

}  // namespace hvl
