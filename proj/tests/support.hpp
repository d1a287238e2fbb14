// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit suites.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "bertese/bertese.hpp"

namespace bertese::testing {

template <typename T>
Tensor<T> random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0,
                        bool requires_grad = true) {
  return Tensor<T>::randn(rows, cols, stddev, rng, requires_grad);
}

inline ModelConfig tiny_model(int vocab_size = 12) {
  return {8, 2, 2, 16, 8, vocab_size};
}

/// Replaces every parameter with N(0, stddev) so gradients are not vanishingly small.
template <typename Model>
void scramble(Model& model, std::mt19937_64& rng, double stddev = 0.3) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& p : model.parameters()) {
    auto t = p.tensor;
    for (auto& v : t.data()) v = static_cast<typename decltype(t)::value_type>(dist(rng));
  }
}

inline SyntheticWorldSpec small_world_spec(int relations = 2, int entities = 10, std::uint64_t seed = 7) {
  SyntheticWorldSpec s;
  s.relation_count = relations;
  s.entities_per_relation = entities;
  s.objects_per_relation = 3;
  s.eval_fraction = 0.2;
  s.seed = seed;
  return s;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("bertese_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace bertese::testing
