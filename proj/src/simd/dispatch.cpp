#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "flymc/simd/kernels.hpp"

namespace flymc::simd {

#if defined(FLYMC_HAVE_AVX2)
namespace detail {
const KernelTable& avx2_table();
}
#endif

namespace {

bool cpu_has_avx2() {
#if defined(FLYMC_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* select_default() {
  if (const char* env = std::getenv("FLYMC_SIMD"); env != nullptr && std::string(env) == "scalar") {
    return &scalar_kernels();
  }
  if (const KernelTable* t = avx2_kernels()) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{select_default()};
  return table;
}

}  // namespace

const KernelTable* avx2_kernels() {
#if defined(FLYMC_HAVE_AVX2)
  static const bool available = cpu_has_avx2();
  return available ? &detail::avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active_kernels() { return *current().load(std::memory_order_relaxed); }

Isa active_isa() { return active_kernels().isa; }

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return "scalar";
    case Isa::Avx2:
      return "avx2";
  }
  return "unknown";
}

void force_isa(Isa isa) {
  const KernelTable* table = isa == Isa::Scalar ? &scalar_kernels() : avx2_kernels();
  if (table == nullptr) {
    throw std::invalid_argument("SIMD variant '" + std::string(isa_name(isa)) + "' is not available on this CPU");
  }
  current().store(table, std::memory_order_relaxed);
}

}  // namespace flymc::simd
