#include <cstdlib>
#include <string_view>

#include "cmrlm/errors.hpp"
#include "cmrlm/kernels.hpp"

namespace cmrlm::kernels {

#if CMRLM_HAVE_AVX2
namespace avx2 {
void conv3x3_forward(const ConvDims& d, const float* in, const float* weight, const float* bias, float* out);
void conv3x3_backward_input(const ConvDims& d, const float* grad_out, const float* weight, float* grad_in);
void conv3x3_backward_weight(const ConvDims& d, const float* in, const float* grad_out, float* grad_weight);
}  // namespace avx2
#endif

namespace {

const ConvKernels kScalar{Backend::Scalar, "scalar", &conv3x3_forward_ref<float>, &conv3x3_backward_input_ref<float>,
                          &conv3x3_backward_weight_ref<float>};

#if CMRLM_HAVE_AVX2
const ConvKernels kAvx2{Backend::Avx2, "avx2", &avx2::conv3x3_forward, &avx2::conv3x3_backward_input,
                        &avx2::conv3x3_backward_weight};
#endif

const ConvKernels* initial_choice() {
  if (const char* env = std::getenv("CMRLM_KERNELS"); env && std::string_view(env) == "scalar") return &kScalar;
#if CMRLM_HAVE_AVX2
  if (avx2_available()) return &kAvx2;
#endif
  return &kScalar;
}

const ConvKernels*& current() {
  static const ConvKernels* chosen = initial_choice();
  return chosen;
}

}  // namespace

bool avx2_compiled() noexcept { return CMRLM_HAVE_AVX2 != 0; }

bool avx2_available() noexcept {
#if CMRLM_HAVE_AVX2 && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const ConvKernels& scalar_kernels() noexcept { return kScalar; }

const ConvKernels& avx2_kernels() {
#if CMRLM_HAVE_AVX2
  if (avx2_available()) return kAvx2;
#endif
  throw StateError("AVX2 convolution kernels are not available on this build or CPU");
}

const ConvKernels& active() noexcept { return *current(); }

void select(Backend backend) {
  current() = backend == Backend::Avx2 ? &avx2_kernels() : &kScalar;
}

}  // namespace cmrlm::kernels
