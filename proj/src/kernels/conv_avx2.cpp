// AVX2 + FMA variants of the 3x3 convolution kernels. This translation unit is
// compiled with -mavx2 -mfma and must only be entered after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#include "cmrlm/kernels.hpp"

namespace cmrlm::kernels::avx2 {

namespace {

constexpr int kCoBlock = 4;

inline int round_up(int v, int m) { return (v + m - 1) / m * m; }

// One image's channels copied into a zero-bordered buffer: row stride `stride`,
// input pixel (y, x) lives at [(y + 1) * stride + x + 1].
struct PaddedPlanes {
  int channels = 0;
  int rows = 0;
  int stride = 0;
  std::vector<float> data;

  void assign(const float* src, int c, int h, int w) {
    channels = c;
    rows = h + 2;
    stride = round_up(w, 16) + 8;
    data.assign(static_cast<std::size_t>(c) * rows * stride, 0.0f);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        std::memcpy(plane(ch) + static_cast<std::size_t>(y + 1) * stride + 1,
                    src + (static_cast<std::size_t>(ch) * h + y) * w, sizeof(float) * w);
      }
    }
  }

  const float* plane(int ch) const { return data.data() + static_cast<std::size_t>(ch) * rows * stride; }
  float* plane(int ch) { return data.data() + static_cast<std::size_t>(ch) * rows * stride; }
};

// Weights regrouped as [co_block][ci][tap][kCoBlock]; missing output channels are zero.
std::vector<float> block_weights(const float* weight, int cout, int cin, bool transpose_flip) {
  const int blocks = (cout + kCoBlock - 1) / kCoBlock;
  std::vector<float> out(static_cast<std::size_t>(blocks) * cin * 9 * kCoBlock, 0.0f);
  for (int co = 0; co < cout; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      for (int tap = 0; tap < 9; ++tap) {
        // For the input gradient the roles swap: w'[co=ci_orig][ci=co_orig][t] = w[ci][co][8 - t].
        const float v = transpose_flip ? weight[(static_cast<std::size_t>(ci) * cout + co) * 9 + (8 - tap)]
                                       : weight[(static_cast<std::size_t>(co) * cin + ci) * 9 + tap];
        const int blk = co / kCoBlock;
        out[((static_cast<std::size_t>(blk) * cin + ci) * 9 + tap) * kCoBlock + co % kCoBlock] = v;
      }
    }
  }
  return out;
}

// out[b][co] (=|+=) bias + sum over ci, taps. `in` has `cin` channels, `out` has `cout`.
void forward_blocked(int batch, int cin, int cout, int h, int w, const float* in, const std::vector<float>& wblk,
                     const float* bias, float* out, bool accumulate) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int blocks = (cout + kCoBlock - 1) / kCoBlock;
  PaddedPlanes padded;
  alignas(32) float tail[kCoBlock][16];

  for (int b = 0; b < batch; ++b) {
    padded.assign(in + static_cast<std::size_t>(b) * cin * plane, cin, h, w);
    const int stride = padded.stride;
    for (int blk = 0; blk < blocks; ++blk) {
      const int co0 = blk * kCoBlock;
      const int nco = std::min(kCoBlock, cout - co0);
      const float* wb = wblk.data() + static_cast<std::size_t>(blk) * cin * 9 * kCoBlock;
      __m256 init[kCoBlock];
      for (int j = 0; j < kCoBlock; ++j) {
        init[j] = _mm256_set1_ps((bias && j < nco) ? bias[co0 + j] : 0.0f);
      }
      for (int y = 0; y < h; ++y) {
        for (int x0 = 0; x0 < w; x0 += 16) {
          __m256 acc[kCoBlock][2];
          for (int j = 0; j < kCoBlock; ++j) acc[j][0] = acc[j][1] = init[j];
          for (int ci = 0; ci < cin; ++ci) {
            const float* base = padded.plane(ci) + static_cast<std::size_t>(y) * stride + x0;
            const float* wc = wb + static_cast<std::size_t>(ci) * 9 * kCoBlock;
            for (int dy = 0; dy < 3; ++dy) {
              const float* row = base + static_cast<std::size_t>(dy) * stride;
              for (int dx = 0; dx < 3; ++dx) {
                const __m256 v0 = _mm256_loadu_ps(row + dx);
                const __m256 v1 = _mm256_loadu_ps(row + dx + 8);
                const float* wt = wc + (dy * 3 + dx) * kCoBlock;
                for (int j = 0; j < kCoBlock; ++j) {
                  const __m256 k = _mm256_broadcast_ss(wt + j);
                  acc[j][0] = _mm256_fmadd_ps(k, v0, acc[j][0]);
                  acc[j][1] = _mm256_fmadd_ps(k, v1, acc[j][1]);
                }
              }
            }
          }
          const int valid = std::min(16, w - x0);
          for (int j = 0; j < nco; ++j) {
            float* dst = out + (static_cast<std::size_t>(b) * cout + co0 + j) * plane + static_cast<std::size_t>(y) * w + x0;
            if (valid == 16 && !accumulate) {
              _mm256_storeu_ps(dst, acc[j][0]);
              _mm256_storeu_ps(dst + 8, acc[j][1]);
            } else if (valid == 16) {
              _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), acc[j][0]));
              _mm256_storeu_ps(dst + 8, _mm256_add_ps(_mm256_loadu_ps(dst + 8), acc[j][1]));
            } else {
              _mm256_store_ps(tail[j], acc[j][0]);
              _mm256_store_ps(tail[j] + 8, acc[j][1]);
              for (int x = 0; x < valid; ++x) dst[x] = accumulate ? dst[x] + tail[j][x] : tail[j][x];
            }
          }
        }
      }
    }
  }
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

}  // namespace

void conv3x3_forward(const ConvDims& d, const float* in, const float* weight, const float* bias, float* out) {
  const auto wblk = block_weights(weight, d.out_channels, d.in_channels, false);
  forward_blocked(d.batch, d.in_channels, d.out_channels, d.height, d.width, in, wblk, bias, out, false);
}

void conv3x3_backward_input(const ConvDims& d, const float* grad_out, const float* weight, float* grad_in) {
  // Transposed, flipped kernel: the input gradient is itself a padded 3x3 convolution.
  const auto wblk = block_weights(weight, d.in_channels, d.out_channels, true);
  forward_blocked(d.batch, d.out_channels, d.in_channels, d.height, d.width, grad_out, wblk, nullptr, grad_in, true);
}

void conv3x3_backward_weight(const ConvDims& d, const float* in, const float* grad_out, float* grad_weight) {
  const int h = d.height;
  const int w = d.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int gstride = round_up(w, 8);
  PaddedPlanes padded;
  std::vector<float> gpad(static_cast<std::size_t>(d.out_channels) * h * gstride);
  std::vector<float> acc(static_cast<std::size_t>(d.out_channels) * d.in_channels * 9 * 8, 0.0f);

  for (int b = 0; b < d.batch; ++b) {
    padded.assign(in + static_cast<std::size_t>(b) * d.in_channels * plane, d.in_channels, h, w);
    std::fill(gpad.begin(), gpad.end(), 0.0f);
    for (int co = 0; co < d.out_channels; ++co) {
      for (int y = 0; y < h; ++y) {
        std::memcpy(gpad.data() + (static_cast<std::size_t>(co) * h + y) * gstride,
                    grad_out + (static_cast<std::size_t>(b) * d.out_channels + co) * plane + static_cast<std::size_t>(y) * w,
                    sizeof(float) * w);
      }
    }
    const int stride = padded.stride;
    for (int co = 0; co < d.out_channels; ++co) {
      const float* g = gpad.data() + static_cast<std::size_t>(co) * h * gstride;
      for (int ci = 0; ci < d.in_channels; ++ci) {
        __m256 a[9];
        float* slot = acc.data() + (static_cast<std::size_t>(co) * d.in_channels + ci) * 9 * 8;
        for (int t = 0; t < 9; ++t) a[t] = _mm256_loadu_ps(slot + 8 * t);
        const float* src = padded.plane(ci);
        for (int y = 0; y < h; ++y) {
          const float* grow = g + static_cast<std::size_t>(y) * gstride;
          const float* r0 = src + static_cast<std::size_t>(y) * stride;
          const float* r1 = r0 + stride;
          const float* r2 = r1 + stride;
          for (int x0 = 0; x0 < w; x0 += 8) {
            const __m256 gv = _mm256_loadu_ps(grow + x0);
            a[0] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r0 + x0), a[0]);
            a[1] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r0 + x0 + 1), a[1]);
            a[2] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r0 + x0 + 2), a[2]);
            a[3] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r1 + x0), a[3]);
            a[4] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r1 + x0 + 1), a[4]);
            a[5] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r1 + x0 + 2), a[5]);
            a[6] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r2 + x0), a[6]);
            a[7] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r2 + x0 + 1), a[7]);
            a[8] = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r2 + x0 + 2), a[8]);
          }
        }
        for (int t = 0; t < 9; ++t) _mm256_storeu_ps(slot + 8 * t, a[t]);
      }
    }
  }
  const std::size_t taps = static_cast<std::size_t>(d.out_channels) * d.in_channels * 9;
  for (std::size_t i = 0; i < taps; ++i) grad_weight[i] += hsum(_mm256_loadu_ps(acc.data() + 8 * i));
}

}  // namespace cmrlm::kernels::avx2
