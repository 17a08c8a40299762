#include <cstdlib>
#include <cstring>

#include "hashmesh/kernels.hpp"

namespace hashmesh::kernels {

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops& ops() {
  static const Ops& selected = []() -> const Ops& {
    const char* forced = std::getenv("HASHMESH_ISA");
    if (forced != nullptr) {
      if (std::strcmp(forced, "scalar") == 0) return scalar_ops();
      if (std::strcmp(forced, "avx2") == 0 && avx2_supported()) return avx2_ops();
    }
    return avx2_supported() ? avx2_ops() : scalar_ops();
  }();
  return selected;
}

}  // namespace hashmesh::kernels
