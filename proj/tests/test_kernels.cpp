// Scalar reference vs SIMD variants of the convolution kernels.

#include <cmath>
#include <vector>

#include "cmrlm/errors.hpp"
#include "cmrlm/kernels.hpp"
#include "cmrlm/rng.hpp"
#include "doctest.h"

using namespace cmrlm;
using namespace cmrlm::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

// Tolerance relative to the magnitude of the summands (inputs are in [-1,1]).
void check_close(const std::vector<float>& a, const std::vector<float>& b, double scale) {
  REQUIRE(a.size() == b.size());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - b[i]));
  CHECK(worst <= 1e-6 * scale);
}

}  // namespace

TEST_CASE("dispatch reports a usable backend") {
  CHECK((active().backend == Backend::Scalar || avx2_available()));
  if (!avx2_available()) CHECK_THROWS_AS(avx2_kernels(), Error);
}

TEST_CASE("AVX2 kernels agree with the scalar reference") {
  if (!avx2_available()) {
    MESSAGE("AVX2 unavailable; equivalence suite skipped");
    return;
  }
  const ConvKernels& ref = scalar_kernels();
  const ConvKernels& simd = avx2_kernels();
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    ConvDims d;
    d.batch = 1 + static_cast<int>(rng.index(3));
    d.in_channels = 1 + static_cast<int>(rng.index(9));
    d.out_channels = 1 + static_cast<int>(rng.index(9));
    d.height = 1 + static_cast<int>(rng.index(20));
    d.width = 1 + static_cast<int>(rng.index(40));
    CAPTURE(d.batch);
    CAPTURE(d.in_channels);
    CAPTURE(d.out_channels);
    CAPTURE(d.height);
    CAPTURE(d.width);
    const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
    const auto in = random_vec(d.batch * d.in_channels * plane, rng);
    const auto w = random_vec(static_cast<std::size_t>(d.out_channels) * d.in_channels * 9, rng);
    const auto bias = random_vec(static_cast<std::size_t>(d.out_channels), rng);
    const auto gout = random_vec(d.batch * d.out_channels * plane, rng);
    const double fan = 9.0 * std::max(d.in_channels, d.out_channels);

    std::vector<float> o1(d.batch * d.out_channels * plane, -7.f), o2(o1.size(), 3.f);
    ref.forward(d, in.data(), w.data(), bias.data(), o1.data());
    simd.forward(d, in.data(), w.data(), bias.data(), o2.data());
    check_close(o1, o2, fan);

    ref.forward(d, in.data(), w.data(), nullptr, o1.data());
    simd.forward(d, in.data(), w.data(), nullptr, o2.data());
    check_close(o1, o2, fan);

    // Backward kernels accumulate: start both from the same nonzero buffer.
    auto gi1 = random_vec(in.size(), rng);
    auto gi2 = gi1;
    ref.backward_input(d, gout.data(), w.data(), gi1.data());
    simd.backward_input(d, gout.data(), w.data(), gi2.data());
    check_close(gi1, gi2, fan);

    auto gw1 = random_vec(w.size(), rng);
    auto gw2 = gw1;
    ref.backward_weight(d, in.data(), gout.data(), gw1.data());
    simd.backward_weight(d, in.data(), gout.data(), gw2.data());
    check_close(gw1, gw2, static_cast<double>(d.batch) * plane);
  }
}

TEST_CASE("select switches the active backend") {
  const Backend before = active().backend;
  select(Backend::Scalar);
  CHECK(active().backend == Backend::Scalar);
  if (avx2_available()) {
    select(Backend::Avx2);
    CHECK(active().backend == Backend::Avx2);
  } else {
    CHECK_THROWS_AS(select(Backend::Avx2), Error);
  }
  select(before);
}
