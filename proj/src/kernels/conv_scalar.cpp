#include <algorithm>
#include <cstddef>

#include "cmrlm/kernels.hpp"

namespace cmrlm::kernels {

namespace {

// Valid output-column range [lo, hi) for kernel column dx so that x + dx - 1 is inside [0, width).
inline void column_range(int dx, int width, int& lo, int& hi) {
  lo = std::max(0, 1 - dx);
  hi = std::min(width, width + 1 - dx);
}

}  // namespace

template <class T>
void conv3x3_forward_ref(const ConvDims& d, const T* in, const T* weight, const T* bias, T* out) {
  const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
  for (int b = 0; b < d.batch; ++b) {
    for (int co = 0; co < d.out_channels; ++co) {
      T* o = out + (static_cast<std::size_t>(b) * d.out_channels + co) * plane;
      std::fill(o, o + plane, bias ? bias[co] : T{0});
      for (int ci = 0; ci < d.in_channels; ++ci) {
        const T* src = in + (static_cast<std::size_t>(b) * d.in_channels + ci) * plane;
        const T* w = weight + (static_cast<std::size_t>(co) * d.in_channels + ci) * 9;
        for (int dy = 0; dy < 3; ++dy) {
          const int y0 = std::max(0, 1 - dy);
          const int y1 = std::min(d.height, d.height + 1 - dy);
          for (int dx = 0; dx < 3; ++dx) {
            const T k = w[dy * 3 + dx];
            int x0, x1;
            column_range(dx, d.width, x0, x1);
            for (int y = y0; y < y1; ++y) {
              T* orow = o + static_cast<std::size_t>(y) * d.width;
              const T* irow = src + static_cast<std::size_t>(y + dy - 1) * d.width + (dx - 1);
              for (int x = x0; x < x1; ++x) orow[x] += k * irow[x];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv3x3_backward_input_ref(const ConvDims& d, const T* grad_out, const T* weight, T* grad_in) {
  const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
  for (int b = 0; b < d.batch; ++b) {
    for (int ci = 0; ci < d.in_channels; ++ci) {
      T* gi = grad_in + (static_cast<std::size_t>(b) * d.in_channels + ci) * plane;
      for (int co = 0; co < d.out_channels; ++co) {
        const T* go = grad_out + (static_cast<std::size_t>(b) * d.out_channels + co) * plane;
        const T* w = weight + (static_cast<std::size_t>(co) * d.in_channels + ci) * 9;
        for (int dy = 0; dy < 3; ++dy) {
          const int y0 = std::max(0, 1 - dy);
          const int y1 = std::min(d.height, d.height + 1 - dy);
          for (int dx = 0; dx < 3; ++dx) {
            const T k = w[dy * 3 + dx];
            int x0, x1;
            column_range(dx, d.width, x0, x1);
            for (int y = y0; y < y1; ++y) {
              const T* grow = go + static_cast<std::size_t>(y) * d.width;
              T* irow = gi + static_cast<std::size_t>(y + dy - 1) * d.width + (dx - 1);
              for (int x = x0; x < x1; ++x) irow[x] += k * grow[x];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv3x3_backward_weight_ref(const ConvDims& d, const T* in, const T* grad_out, T* grad_weight) {
  const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
  for (int co = 0; co < d.out_channels; ++co) {
    for (int ci = 0; ci < d.in_channels; ++ci) {
      T* gw = grad_weight + (static_cast<std::size_t>(co) * d.in_channels + ci) * 9;
      for (int dy = 0; dy < 3; ++dy) {
        const int y0 = std::max(0, 1 - dy);
        const int y1 = std::min(d.height, d.height + 1 - dy);
        for (int dx = 0; dx < 3; ++dx) {
          int x0, x1;
          column_range(dx, d.width, x0, x1);
          T acc{0};
          for (int b = 0; b < d.batch; ++b) {
            const T* go = grad_out + (static_cast<std::size_t>(b) * d.out_channels + co) * plane;
            const T* src = in + (static_cast<std::size_t>(b) * d.in_channels + ci) * plane;
            for (int y = y0; y < y1; ++y) {
              const T* grow = go + static_cast<std::size_t>(y) * d.width;
              const T* irow = src + static_cast<std::size_t>(y + dy - 1) * d.width + (dx - 1);
              for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            }
          }
          gw[dy * 3 + dx] += acc;
        }
      }
    }
  }
}

template void conv3x3_forward_ref<float>(const ConvDims&, const float*, const float*, const float*, float*);
template void conv3x3_forward_ref<double>(const ConvDims&, const double*, const double*, const double*, double*);
template void conv3x3_backward_input_ref<float>(const ConvDims&, const float*, const float*, float*);
template void conv3x3_backward_input_ref<double>(const ConvDims&, const double*, const double*, double*);
template void conv3x3_backward_weight_ref<float>(const ConvDims&, const float*, const float*, float*);
template void conv3x3_backward_weight_ref<double>(const ConvDims&, const double*, const double*, double*);

}  // namespace cmrlm::kernels
