#include <cstdlib>
#include <string_view>

#include "threejoin/simd/kernels.hpp"

namespace threejoin::simd {

#if defined(THREEJOIN_HAVE_AVX2)
namespace avx2 {
const KernelTable& table();
}
#endif

const KernelTable* avx2_kernels() {
#if defined(THREEJOIN_HAVE_AVX2)
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2::table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& kernels() {
  static const KernelTable& selected = [] () -> const KernelTable& {
    const char* forced = std::getenv("THREEJOIN_SIMD");
    if (forced != nullptr && std::string_view(forced) == "scalar") {
      return scalar_kernels();
    }
    if (const KernelTable* t = avx2_kernels()) return *t;
    return scalar_kernels();
  }();
  return selected;
}

}  // namespace threejoin::simd
