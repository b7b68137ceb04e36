#pragma once

#include <random>
#include <vector>

#include "flymc/model.hpp"

namespace flymc::testing {

// Small hand-built datasets so model tests do not depend on the generator.
inline Dataset random_dataset(Family family, std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset data;
  data.n_points = n;
  data.n_features = d;
  data.n_classes = family == Family::Softmax ? k : 0;
  data.features.resize(n * d);
  for (auto& x : data.features) x = g(rng);
  data.targets.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (family) {
      case Family::Logistic: data.targets[i] = (rng() & 1) ? 1.0 : -1.0; break;
      case Family::Softmax: data.targets[i] = static_cast<double>(1 + rng() % k); break;
      case Family::RobustT: data.targets[i] = 2.0 * g(rng); break;
    }
  }
  if (family == Family::Softmax) {
    for (std::size_t c = 0; c < k && c < n; ++c) data.targets[c] = static_cast<double>(c + 1);
  }
  return data;
}

inline std::vector<double> random_theta(std::size_t p, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> t(p);
  for (auto& v : t) v = g(rng);
  return t;
}

}  // namespace flymc::testing
