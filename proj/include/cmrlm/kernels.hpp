#pragma once

// 3x3 / stride 1 / zero-pad 1 convolution kernels.
//
// The scalar reference kernels are templates and serve both precisions. The
// float path additionally has AVX2+FMA variants; `active()` picks one at
// runtime from CPUID, and `CMRLM_KERNELS=scalar` forces the reference path.

#include <string_view>

namespace cmrlm::kernels {

struct ConvDims {
  int batch = 0;
  int in_channels = 0;
  int out_channels = 0;
  int height = 0;
  int width = 0;
};

// Weight layout is [out][in][3][3]. `bias` may be null. out is overwritten.
template <class T>
void conv3x3_forward_ref(const ConvDims& d, const T* in, const T* weight, const T* bias, T* out);

// grad_in += conv_transpose(grad_out, weight)
template <class T>
void conv3x3_backward_input_ref(const ConvDims& d, const T* grad_out, const T* weight, T* grad_in);

// grad_weight += correlation of input with grad_out
template <class T>
void conv3x3_backward_weight_ref(const ConvDims& d, const T* in, const T* grad_out, T* grad_weight);

enum class Backend { Scalar, Avx2 };

struct ConvKernels {
  Backend backend;
  std::string_view name;
  void (*forward)(const ConvDims&, const float*, const float*, const float*, float*);
  void (*backward_input)(const ConvDims&, const float*, const float*, float*);
  void (*backward_weight)(const ConvDims&, const float*, const float*, float*);
};

bool avx2_compiled() noexcept;
/// True when the AVX2 variants were compiled in and the CPU supports AVX2+FMA.
bool avx2_available() noexcept;

const ConvKernels& scalar_kernels() noexcept;
/// Throws StateError if AVX2 is not available.
const ConvKernels& avx2_kernels();

/// Kernel set used by the float tensor ops.
const ConvKernels& active() noexcept;
/// Overrides the runtime choice; throws StateError if unavailable.
void select(Backend backend);

}  // namespace cmrlm::kernels
