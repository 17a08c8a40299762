#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "hashmesh/kernels.hpp"

using namespace hashmesh::kernels;

namespace {

struct Case {
  std::vector<float> a, b, dense;
  std::vector<std::uint32_t> idx;
};

Case random_case(std::size_t n, std::size_t dense_n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  Case c;
  c.a.resize(n);
  c.b.resize(n);
  c.dense.resize(dense_n);
  for (auto& v : c.a) v = unit(rng);
  for (auto& v : c.b) v = unit(rng);
  for (auto& v : c.dense) v = unit(rng);
  std::uniform_int_distribution<std::uint32_t> coord(0, static_cast<std::uint32_t>(dense_n - 1));
  c.idx.resize(n);
  for (auto& i : c.idx) i = coord(rng);
  return c;
}

double dot_f64(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace

TEST_CASE("dispatch selects a valid table") {
  const Ops& t = ops();
  CHECK((std::strcmp(t.name, "scalar") == 0 || std::strcmp(t.name, "avx2") == 0));
  if (avx2_supported()) {
    CHECK(std::strcmp(avx2_ops().name, "avx2") == 0);
  }
}

TEST_CASE("dot kernels agree with the float64 oracle on both ISAs") {
  std::vector<const Ops*> tables{&scalar_ops()};
  if (avx2_supported()) tables.push_back(&avx2_ops());
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    // Sizes straddle the 8/16-lane boundaries, including empty and tiny.
    for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 16u, 31u, 257u, 1024u}) {
      Case c = random_case(n, std::max<std::size_t>(n * 2, 16), seed * 100 + n);
      const double dd = dot_f64(c.a.data(), c.b.data(), n);
      double mag_d = 0.0;
      for (std::size_t i = 0; i < n; ++i) mag_d += std::fabs(static_cast<double>(c.a[i]) * c.b[i]);
      std::vector<float> gathered(n);
      for (std::size_t i = 0; i < n; ++i) gathered[i] = c.dense[c.idx[i]];
      const double ds = dot_f64(c.a.data(), gathered.data(), n);
      double mag_s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mag_s += std::fabs(static_cast<double>(c.a[i]) * gathered[i]);
      }
      for (const Ops* t : tables) {
        CAPTURE(t->name);
        CAPTURE(n);
        const float got_dense = t->dot_dense(c.a.data(), c.b.data(), n);
        CHECK(std::fabs(got_dense - dd) <= 1e-5 * mag_d + 1e-6);
        const float got_sparse = t->dot_sparse(c.idx.data(), c.a.data(), n, c.dense.data());
        CHECK(std::fabs(got_sparse - ds) <= 1e-5 * mag_s + 1e-6);
      }
    }
  }
}

TEST_CASE("signed-i8 dot matches the float64 oracle") {
  std::vector<const Ops*> tables{&scalar_ops()};
  if (avx2_supported()) tables.push_back(&avx2_ops());
  std::mt19937_64 rng(7);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<int> die(0, 5);
  for (std::size_t n : {0u, 1u, 5u, 8u, 13u, 64u, 333u}) {
    std::vector<float> x(n);
    std::vector<std::int8_t> s(n);
    for (auto& v : x) v = unit(rng);
    for (auto& v : s) {
      const int u = die(rng);
      v = (u == 0) ? 1 : (u == 1) ? -1 : 0;
    }
    double want = 0.0;
    double mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      want += static_cast<double>(x[i]) * s[i];
      mag += std::fabs(static_cast<double>(x[i]) * s[i]);
    }
    for (const Ops* t : tables) {
      CAPTURE(t->name);
      const float got = t->dot_sign_i8(x.data(), s.data(), n);
      CHECK(std::fabs(got - want) <= 1e-5 * mag + 1e-6);
    }
  }
}

TEST_CASE("element-wise kernels are bit-identical across ISAs") {
  if (!avx2_supported()) return;
  const Ops& s = scalar_ops();
  const Ops& v = avx2_ops();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (std::size_t n : {1u, 7u, 8u, 9u, 40u, 129u}) {
      Case c = random_case(n, n + 32, seed * 31 + n);

      std::vector<float> d1(n, 0.25f), d2(n, 0.25f);
      s.axpy_dense(d1.data(), c.a.data(), n, 1.7f);
      v.axpy_dense(d2.data(), c.a.data(), n, 1.7f);
      CHECK(std::memcmp(d1.data(), d2.data(), n * sizeof(float)) == 0);

      d1.assign(n, -0.5f);
      d2.assign(n, -0.5f);
      s.axpy_gather(d1.data(), c.dense.data(), c.idx.data(), n, -0.3f);
      v.axpy_gather(d2.data(), c.dense.data(), c.idx.data(), n, -0.3f);
      CHECK(std::memcmp(d1.data(), d2.data(), n * sizeof(float)) == 0);

      AdamParams p{};
      p.beta1 = 0.9f;
      p.beta2 = 0.999f;
      p.one_minus_beta1 = 0.1f;
      p.one_minus_beta2 = 0.001f;
      p.inv_bias1 = 3.2f;
      p.inv_bias2 = 1.5f;
      p.lr = 1e-3f;
      p.epsilon = 1e-8f;
      std::vector<float> w1 = c.a, w2 = c.a, m1 = c.b, m2 = c.b;
      std::vector<float> v1(n, 0.01f), v2(n, 0.01f);
      s.adam_span(w1.data(), m1.data(), v1.data(), c.dense.data(), n, p);
      v.adam_span(w2.data(), m2.data(), v2.data(), c.dense.data(), n, p);
      CHECK(std::memcmp(w1.data(), w2.data(), n * sizeof(float)) == 0);
      CHECK(std::memcmp(m1.data(), m2.data(), n * sizeof(float)) == 0);
      CHECK(std::memcmp(v1.data(), v2.data(), n * sizeof(float)) == 0);
    }
  }
}

TEST_CASE("touch_nonzero marks exactly the nonzero coordinates on both ISAs") {
  std::vector<const Ops*> tables{&scalar_ops()};
  if (avx2_supported()) tables.push_back(&avx2_ops());
  std::mt19937_64 rng(41);
  for (std::size_t n : {1u, 7u, 8u, 63u, 64u, 65u, 200u}) {
    std::vector<float> val(n);
    for (auto& v : val) v = (rng() % 3 == 0) ? 0.0f : 1.0f + static_cast<float>(rng() % 5);
    if (n > 2) val[n / 2] = -0.0f;  // negative zero is still zero
    std::vector<std::uint64_t> want((n + 63) / 64, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (val[i] != 0.0f) want[i / 64] |= std::uint64_t{1} << (i % 64);
    }
    for (const Ops* t : tables) {
      CAPTURE(t->name);
      std::vector<std::uint64_t> got(want.size(), 0);
      t->touch_nonzero(got.data(), val.data(), n);
      CHECK(got == want);
      // Pre-set bits survive (the kernel only ORs).
      std::vector<std::uint64_t> preset(want.size(), 0x8000000000000001ULL);
      t->touch_nonzero(preset.data(), val.data(), n);
      for (std::size_t w = 0; w < want.size(); ++w) {
        CHECK(preset[w] == (want[w] | 0x8000000000000001ULL));
      }
    }
  }
}

TEST_CASE("axpy_scatter accumulates at strictly increasing indices") {
  const Ops& t = ops();
  std::vector<float> dst(10, 1.0f);
  const std::uint32_t idx[3] = {1, 4, 9};
  const float val[3] = {2.0f, -1.0f, 0.5f};
  t.axpy_scatter(dst.data(), idx, val, 3, 2.0f);
  CHECK(dst[1] == doctest::Approx(5.0f));
  CHECK(dst[4] == doctest::Approx(-1.0f));
  CHECK(dst[9] == doctest::Approx(2.0f));
  CHECK(dst[0] == 1.0f);
}
