#pragma once

#include <cstdint>

namespace flymc {

/// Counts likelihood evaluations for one chain. Not thread-safe: a meter is
/// owned by exactly one chain.
class QueryMeter {
 public:
  void record(std::uint64_t n = 1) { count_ += n; }
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
};

}  // namespace flymc
