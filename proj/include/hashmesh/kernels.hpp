#pragma once

#include <cstddef>
#include <cstdint>

// Arithmetic inner loops used by the forward/backward/update paths.
//
// Every kernel has a scalar reference implementation and, on x86-64 with
// AVX2+FMA, a vectorized variant. ops() picks the widest supported table at
// first use; HASHMESH_ISA=scalar|avx2 overrides the choice (avx2 only if the
// CPU supports it). The two tables are equivalence-tested against each other
// and against a float64 oracle in tests/test_kernels.cpp.
//
// Rounding contract:
//   - dot_* kernels may reassociate (vector partial sums, FMA); callers get
//     "within a few ulp of the float64 sum" semantics, not bit-equality.
//   - axpy_* and adam_span are element-wise with a fixed mul/add order and
//     no FMA contraction, so scalar and AVX2 results are bit-identical.

namespace hashmesh::kernels {

struct AdamParams {
  float beta1;
  float beta2;
  float one_minus_beta1;
  float one_minus_beta2;
  float inv_bias1;  // 1 / (1 - beta1^t)
  float inv_bias2;  // 1 / (1 - beta2^t)
  float lr;
  float epsilon;
};

struct Ops {
  const char* name;

  // sum_i a[i] * b[i]
  float (*dot_dense)(const float* a, const float* b, std::size_t n);

  // sum_i val[i] * dense[idx[i]]
  float (*dot_sparse)(const std::uint32_t* idx, const float* val, std::size_t nnz,
                      const float* dense);

  // sum_i x[i] * sign[i] with sign in {-1, 0, +1}
  float (*dot_sign_i8)(const float* x, const std::int8_t* sign, std::size_t n);

  // dst[i] += alpha * src[i]
  void (*axpy_dense)(float* dst, const float* src, std::size_t n, float alpha);

  // dst[i] += alpha * src[idx[i]]
  void (*axpy_gather)(float* dst, const float* src, const std::uint32_t* idx, std::size_t n,
                      float alpha);

  // dst[idx[i]] += alpha * val[i]; idx strictly increasing (scatter, scalar on
  // every ISA: AVX2 has no scatter instruction)
  void (*axpy_scatter)(float* dst, const std::uint32_t* idx, const float* val, std::size_t n,
                       float alpha);

  // words[i/64] |= (val[i] != 0) << (i%64): nonzero-coordinate touch marks
  // for a contiguous span starting at bit 0.
  void (*touch_nonzero)(std::uint64_t* words, const float* val, std::size_t n);

  // Adam over a contiguous span:
  //   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
  //   w -= lr * (m * inv_bias1) / (sqrt(v * inv_bias2) + eps)
  void (*adam_span)(float* w, float* m, float* v, const float* g, std::size_t n,
                    const AdamParams& p);
};

const Ops& scalar_ops();
bool avx2_supported();
// Valid only when avx2_supported(); scalar_ops() otherwise.
const Ops& avx2_ops();

// Runtime-selected table (cached after first call).
const Ops& ops();

}  // namespace hashmesh::kernels
