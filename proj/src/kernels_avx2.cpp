// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma -ffp-contract=off (see src/CMakeLists.txt); everything here
// must stay behind the runtime avx2_supported() check.

#include "hashmesh/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace hashmesh::kernels {
namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

float dot_dense_avx2(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  }
  float acc = hsum256(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

float dot_sparse_avx2(const std::uint32_t* idx, const float* val, std::size_t nnz,
                      const float* dense) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= nnz; i += 8) {
    const __m256i vi = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(idx + i));
    const __m256 gathered = _mm256_i32gather_ps(dense, vi, 4);
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(val + i), gathered, acc);
  }
  float out = hsum256(acc);
  for (; i < nnz; ++i) out += val[i] * dense[idx[i]];
  return out;
}

float dot_sign_i8_avx2(const float* x, const std::int8_t* sign, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m128i bytes = _mm_loadl_epi64(reinterpret_cast<const __m128i*>(sign + i));
    const __m256 s = _mm256_cvtepi32_ps(_mm256_cvtepi8_epi32(bytes));
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), s, acc);
  }
  float out = hsum256(acc);
  for (; i < n; ++i) out += x[i] * static_cast<float>(sign[i]);
  return out;
}

void axpy_dense_avx2(float* dst, const float* src, std::size_t n, float alpha) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 p = _mm256_mul_ps(va, _mm256_loadu_ps(src + i));
    _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(dst + i), p));
  }
  for (; i < n; ++i) {
    const float p = alpha * src[i];
    dst[i] = dst[i] + p;
  }
}

void axpy_gather_avx2(float* dst, const float* src, const std::uint32_t* idx, std::size_t n,
                      float alpha) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256i vi = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(idx + i));
    const __m256 p = _mm256_mul_ps(va, _mm256_i32gather_ps(src, vi, 4));
    _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(dst + i), p));
  }
  for (; i < n; ++i) {
    const float p = alpha * src[idx[i]];
    dst[i] = dst[i] + p;
  }
}

void axpy_scatter_avx2(float* dst, const std::uint32_t* idx, const float* val, std::size_t n,
                       float alpha) {
  // No scatter instruction in AVX2; same element-wise order as scalar.
  for (std::size_t i = 0; i < n; ++i) {
    const float p = alpha * val[i];
    dst[idx[i]] = dst[idx[i]] + p;
  }
}

void touch_nonzero_avx2(std::uint64_t* words, const float* val, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(val + i);
    const int mask = _mm256_movemask_ps(_mm256_cmp_ps(v, zero, _CMP_NEQ_UQ));
    if (mask != 0) {
      words[i / 64] |= static_cast<std::uint64_t>(static_cast<unsigned>(mask)) << (i % 64);
    }
  }
  for (; i < n; ++i) {
    if (val[i] != 0.0f) words[i / 64] |= std::uint64_t{1} << (i % 64);
  }
}

void adam_span_avx2(float* w, float* m, float* v, const float* g, std::size_t n,
                    const AdamParams& p) {
  const __m256 b1 = _mm256_set1_ps(p.beta1);
  const __m256 b2 = _mm256_set1_ps(p.beta2);
  const __m256 omb1 = _mm256_set1_ps(p.one_minus_beta1);
  const __m256 omb2 = _mm256_set1_ps(p.one_minus_beta2);
  const __m256 ib1 = _mm256_set1_ps(p.inv_bias1);
  const __m256 ib2 = _mm256_set1_ps(p.inv_bias2);
  const __m256 lr = _mm256_set1_ps(p.lr);
  const __m256 eps = _mm256_set1_ps(p.epsilon);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gi = _mm256_loadu_ps(g + i);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)),
                                    _mm256_mul_ps(omb1, gi));
    const __m256 vi = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                                    _mm256_mul_ps(omb2, _mm256_mul_ps(gi, gi)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 m_hat = _mm256_mul_ps(mi, ib1);
    const __m256 v_hat = _mm256_mul_ps(vi, ib2);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(v_hat), eps);
    const __m256 step = _mm256_mul_ps(lr, _mm256_div_ps(m_hat, denom));
    _mm256_storeu_ps(w + i, _mm256_sub_ps(_mm256_loadu_ps(w + i), step));
  }
  for (; i < n; ++i) {
    const float gi = g[i];
    const float mi = p.beta1 * m[i] + p.one_minus_beta1 * gi;
    const float vi = p.beta2 * v[i] + p.one_minus_beta2 * (gi * gi);
    m[i] = mi;
    v[i] = vi;
    const float m_hat = mi * p.inv_bias1;
    const float v_hat = vi * p.inv_bias2;
    w[i] = w[i] - p.lr * (m_hat / (std::sqrt(v_hat) + p.epsilon));
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops table = {
      "avx2",          dot_dense_avx2,   dot_sparse_avx2,   dot_sign_i8_avx2,
      axpy_dense_avx2, axpy_gather_avx2, axpy_scatter_avx2, touch_nonzero_avx2,
      adam_span_avx2,
  };
  return table;
}

}  // namespace hashmesh::kernels

#else

namespace hashmesh::kernels {
const Ops& avx2_ops() { return scalar_ops(); }
}  // namespace hashmesh::kernels

#endif
