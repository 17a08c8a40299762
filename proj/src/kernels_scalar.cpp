#include <cmath>

#include "hashmesh/kernels.hpp"

namespace hashmesh::kernels {
namespace {

float dot_dense_scalar(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

float dot_sparse_scalar(const std::uint32_t* idx, const float* val, std::size_t nnz,
                        const float* dense) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < nnz; ++i) acc += val[i] * dense[idx[i]];
  return acc;
}

float dot_sign_i8_scalar(const float* x, const std::int8_t* sign, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * static_cast<float>(sign[i]);
  return acc;
}

void axpy_dense_scalar(float* dst, const float* src, std::size_t n, float alpha) {
  for (std::size_t i = 0; i < n; ++i) {
    const float p = alpha * src[i];
    dst[i] = dst[i] + p;
  }
}

void axpy_gather_scalar(float* dst, const float* src, const std::uint32_t* idx, std::size_t n,
                        float alpha) {
  for (std::size_t i = 0; i < n; ++i) {
    const float p = alpha * src[idx[i]];
    dst[i] = dst[i] + p;
  }
}

void axpy_scatter_scalar(float* dst, const std::uint32_t* idx, const float* val, std::size_t n,
                         float alpha) {
  for (std::size_t i = 0; i < n; ++i) {
    const float p = alpha * val[i];
    dst[idx[i]] = dst[idx[i]] + p;
  }
}

void touch_nonzero_scalar(std::uint64_t* words, const float* val, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (val[i] != 0.0f) words[i / 64] |= std::uint64_t{1} << (i % 64);
  }
}

void adam_span_scalar(float* w, float* m, float* v, const float* g, std::size_t n,
                      const AdamParams& p) {
  for (std::size_t i = 0; i < n; ++i) {
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

const Ops& scalar_ops() {
  static const Ops table = {
      "scalar",          dot_dense_scalar,   dot_sparse_scalar,   dot_sign_i8_scalar,
      axpy_dense_scalar, axpy_gather_scalar, axpy_scatter_scalar, touch_nonzero_scalar,
      adam_span_scalar,
  };
  return table;
}

}  // namespace hashmesh::kernels
