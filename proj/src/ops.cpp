#include "cmrlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <type_traits>

#include "cmrlm/kernels.hpp"

namespace cmrlm {

namespace {

template <class T>
void require_finite(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite " + what);
}

template <class T>
void require_rank4(const Tensor<T>& t, const char* op) {
  if (t.rank() != 4) throw ConfigError(std::string(op) + ": expected rank-4 tensor, got " + shape_string(t.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <class T>
Var<T> finish(Graph<T>& g, Tensor<T> out, std::initializer_list<int> inputs, typename Graph<T>::BackwardFn fn,
              const char* op) {
  require_finite(out, op, "output");
  return g.emit(std::move(out), inputs, std::move(fn));
}

template <class T>
void run_conv_forward(const kernels::ConvDims& d, const T* in, const T* w, const T* b, T* out) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().forward(d, in, w, b, out);
  } else {
    kernels::conv3x3_forward_ref<T>(d, in, w, b, out);
  }
}

template <class T>
void run_conv_backward_input(const kernels::ConvDims& d, const T* gout, const T* w, T* gin) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().backward_input(d, gout, w, gin);
  } else {
    kernels::conv3x3_backward_input_ref<T>(d, gout, w, gin);
  }
}

template <class T>
void run_conv_backward_weight(const kernels::ConvDims& d, const T* in, const T* gout, T* gw) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().backward_weight(d, in, gout, gw);
  } else {
    kernels::conv3x3_backward_weight_ref<T>(d, in, gout, gw);
  }
}

}  // namespace

template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias) {
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weight.value();
  require_rank4(x, "conv2d");
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3) {
    throw ConfigError("conv2d: weight must be [Cout,Cin,3,3], got " + shape_string(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ConfigError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                      std::to_string(w.dim(1)));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != w.dim(0))) {
    throw ConfigError("conv2d: bias must be [" + std::to_string(w.dim(0)) + "], got " +
                      shape_string(bias->value().shape()));
  }
  require_finite(x, "conv2d", "input");

  const kernels::ConvDims d{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3)};
  Tensor<T> out(Shape{d.batch, d.out_channels, d.height, d.width});
  run_conv_forward<T>(d, x.ptr(), w.ptr(), bias ? bias->value().ptr() : nullptr, out.ptr());

  const int in_id = input.id;
  const int w_id = weight.id;
  const int b_id = bias ? bias->id : -1;
  auto back = [d, in_id, w_id, b_id](Graph<T>& gr, std::span<const T> gout) {
    if (gr.requires_grad(in_id)) {
      run_conv_backward_input<T>(d, gout.data(), gr.value(w_id).ptr(), gr.grad(in_id).data());
    }
    if (gr.requires_grad(w_id)) {
      run_conv_backward_weight<T>(d, gr.value(in_id).ptr(), gout.data(), gr.grad(w_id).data());
    }
    if (b_id >= 0 && gr.requires_grad(b_id)) {
      auto gb = gr.grad(b_id);
      const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
      for (int b = 0; b < d.batch; ++b) {
        for (int co = 0; co < d.out_channels; ++co) {
          const T* src = gout.data() + (static_cast<std::size_t>(b) * d.out_channels + co) * plane;
          T acc{0};
          for (std::size_t i = 0; i < plane; ++i) acc += src[i];
          gb[static_cast<std::size_t>(co)] += acc;
        }
      }
    }
  };
  if (bias) return finish<T>(g, std::move(out), {in_id, w_id, b_id}, back, "conv2d");
  return finish<T>(g, std::move(out), {in_id, w_id}, back, "conv2d");
}

template <class T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode) {
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  require_rank4(x, "batch_norm");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t count = static_cast<std::size_t>(B) * plane;
  if (gamma.value().shape() != Shape{C} || beta.value().shape() != Shape{C}) {
    throw ConfigError("batch_norm: gamma/beta must be [" + std::to_string(C) + "]");
  }
  if (state.running_mean.shape() != Shape{C} || state.running_var.shape() != Shape{C}) {
    throw ConfigError("batch_norm: running statistics have wrong channel count");
  }

  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));

  if (mode == Mode::Train) {
    if (count < 2) throw ConfigError("batch_norm: train mode needs at least 2 values per channel");
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* src = x.ptr() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += src[i];
      }
      const double mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* src = x.ptr() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dv = src[i] - mean;
          ss += dv * dv;
        }
      }
      const double var = ss / static_cast<double>(count);
      const double istd = 1.0 / std::sqrt(var + kBatchNormEps);
      (*inv_std)[static_cast<std::size_t>(c)] = static_cast<T>(istd);
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          (*xhat)[base + i] = static_cast<T>((x[base + i] - mean) * istd);
        }
      }
      // Running variance uses the unbiased estimate.
      const double unbiased = ss / static_cast<double>(count - 1);
      const double m = kBatchNormMomentum;
      T& rm = state.running_mean[static_cast<std::size_t>(c)];
      T& rv = state.running_var[static_cast<std::size_t>(c)];
      rm = static_cast<T>((1.0 - m) * rm + m * mean);
      rv = static_cast<T>((1.0 - m) * rv + m * unbiased);
    }
    state.initialized = true;
  } else {
    if (!state.initialized) throw StateError("batch_norm: eval mode with uninitialized running statistics");
    for (int c = 0; c < C; ++c) {
      const double mean = state.running_mean[static_cast<std::size_t>(c)];
      const double istd = 1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<std::size_t>(c)]) + kBatchNormEps);
      (*inv_std)[static_cast<std::size_t>(c)] = static_cast<T>(istd);
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          (*xhat)[base + i] = static_cast<T>((x[base + i] - mean) * istd);
        }
      }
    }
  }

  Tensor<T> out(x.shape());
  const Tensor<T>& gm = gamma.value();
  const Tensor<T>& bt = beta.value();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
      const T k = gm[static_cast<std::size_t>(c)];
      const T off = bt[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = k * (*xhat)[base + i] + off;
    }
  }

  const int in_id = input.id, g_id = gamma.id, b_id = beta.id;
  const bool train = mode == Mode::Train;
  auto back = [=](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& gmv = gr.value(g_id);
    for (int c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += gout[base + i];
          sum_dy_xhat += static_cast<double>(gout[base + i]) * (*xhat)[base + i];
        }
      }
      if (gr.requires_grad(g_id)) gr.grad(g_id)[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
      if (gr.requires_grad(b_id)) gr.grad(b_id)[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
      if (!gr.requires_grad(in_id)) continue;
      auto gin = gr.grad(in_id);
      const double scale = static_cast<double>(gmv[static_cast<std::size_t>(c)]) * (*inv_std)[static_cast<std::size_t>(c)];
      const double n = static_cast<double>(count);
      for (int b = 0; b < B; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (train) {
            gin[base + i] += static_cast<T>(scale / n * (n * gout[base + i] - sum_dy - (*xhat)[base + i] * sum_dy_xhat));
          } else {
            gin[base + i] += static_cast<T>(scale * gout[base + i]);
          }
        }
      }
    }
  };
  return finish<T>(g, std::move(out), {in_id, g_id, b_id}, back, "batch_norm");
}

template <class T>
Var<T> leaky_relu(Var<T> input, T slope) {
  if (!(slope > T{0} && slope < T{1})) throw ConfigError("leaky_relu: slope must lie in (0,1)");
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= T{0} ? x[i] : slope * x[i];
  const int in_id = input.id;
  auto back = [in_id, slope](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& xv = gr.value(in_id);
    auto gin = gr.grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += xv[i] >= T{0} ? gout[i] : slope * gout[i];
  };
  return finish<T>(g, std::move(out), {in_id}, back, "leaky_relu");
}

template <class T>
Var<T> max_pool2(Var<T> input) {
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  require_rank4(x, "max_pool2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ConfigError("max_pool2: spatial extents must be even, got " + shape_string(x.shape()));
  }
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  std::size_t o = 0;
  for (int bc = 0; bc < B * C; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * H * W;
    for (int y = 0; y < Ho; ++y) {
      for (int xx = 0; xx < Wo; ++xx, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * W + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t c : cand) {
          if (x[c] > x[best]) best = c;
        }
        out[o] = x[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const int in_id = input.id;
  auto back = [in_id, argmax](Graph<T>& gr, std::span<const T> gout) {
    auto gin = gr.grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) gin[(*argmax)[i]] += gout[i];
  };
  return finish<T>(g, std::move(out), {in_id}, back, "max_pool2");
}

template <class T>
Var<T> upsample2(Var<T> input) {
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  require_rank4(x, "upsample2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Wo = 2 * W;
  Tensor<T> out(Shape{B, C, 2 * H, Wo});
  for (int bc = 0; bc < B * C; ++bc) {
    const T* src = x.ptr() + static_cast<std::size_t>(bc) * H * W;
    T* dst = out.ptr() + static_cast<std::size_t>(bc) * 4 * H * W;
    for (int y = 0; y < H; ++y) {
      T* r0 = dst + static_cast<std::size_t>(2 * y) * Wo;
      T* r1 = r0 + Wo;
      for (int xx = 0; xx < W; ++xx) {
        const T v = src[static_cast<std::size_t>(y) * W + xx];
        r0[2 * xx] = r0[2 * xx + 1] = r1[2 * xx] = r1[2 * xx + 1] = v;
      }
    }
  }
  const int in_id = input.id;
  auto back = [in_id, B, C, H, W](Graph<T>& gr, std::span<const T> gout) {
    auto gin = gr.grad(in_id);
    const int Wo2 = 2 * W;
    for (int bc = 0; bc < B * C; ++bc) {
      const T* src = gout.data() + static_cast<std::size_t>(bc) * 4 * H * W;
      T* dst = gin.data() + static_cast<std::size_t>(bc) * H * W;
      for (int y = 0; y < H; ++y) {
        const T* r0 = src + static_cast<std::size_t>(2 * y) * Wo2;
        const T* r1 = r0 + Wo2;
        for (int xx = 0; xx < W; ++xx) {
          dst[static_cast<std::size_t>(y) * W + xx] += r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
        }
      }
    }
  };
  return finish<T>(g, std::move(out), {in_id}, back, "upsample2");
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank4(av, "concat_channels");
  require_rank4(bv, "concat_channels");
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
    throw ConfigError("concat_channels: batch/spatial mismatch " + shape_string(av.shape()) + " vs " +
                      shape_string(bv.shape()));
  }
  const int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  Tensor<T> out(Shape{B, Ca + Cb, av.dim(2), av.dim(3)});
  for (int n = 0; n < B; ++n) {
    std::copy_n(av.ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
    std::copy_n(bv.ptr() + n * Cb * plane, Cb * plane, out.ptr() + (n * (Ca + Cb) + Ca) * plane);
  }
  const int a_id = a.id, b_id = b.id;
  auto back = [=](Graph<T>& gr, std::span<const T> gout) {
    for (int n = 0; n < B; ++n) {
      const T* src = gout.data() + n * (Ca + Cb) * plane;
      if (gr.requires_grad(a_id)) {
        T* dst = gr.grad(a_id).data() + n * Ca * plane;
        for (std::size_t i = 0; i < Ca * plane; ++i) dst[i] += src[i];
      }
      if (gr.requires_grad(b_id)) {
        T* dst = gr.grad(b_id).data() + n * Cb * plane;
        for (std::size_t i = 0; i < Cb * plane; ++i) dst[i] += src[Ca * plane + i];
      }
    }
  };
  return finish<T>(g, std::move(out), {a_id, b_id}, back, "concat_channels");
}

template <class T>
Var<T> slice_channels(Var<T> input, int begin, int end) {
  Graph<T>& g = *input.graph;
  const Tensor<T>& x = input.value();
  require_rank4(x, "slice_channels");
  const int B = x.dim(0), C = x.dim(1);
  if (begin < 0 || end > C || begin >= end) throw ConfigError("slice_channels: invalid channel range");
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int Co = end - begin;
  Tensor<T> out(Shape{B, Co, x.dim(2), x.dim(3)});
  for (int n = 0; n < B; ++n) {
    std::copy_n(x.ptr() + (n * C + begin) * plane, Co * plane, out.ptr() + n * Co * plane);
  }
  const int in_id = input.id;
  auto back = [=](Graph<T>& gr, std::span<const T> gout) {
    auto gin = gr.grad(in_id);
    for (int n = 0; n < B; ++n) {
      T* dst = gin.data() + (n * C + begin) * plane;
      const T* src = gout.data() + n * Co * plane;
      for (std::size_t i = 0; i < Co * plane; ++i) dst[i] += src[i];
    }
  };
  return finish<T>(g, std::move(out), {in_id}, back, "slice_channels");
}

template <class T>
Var<T> softmax_channels(Var<T> scores) {
  Graph<T>& g = *scores.graph;
  const Tensor<T>& x = scores.value();
  require_rank4(x, "softmax_channels");
  require_finite(x, "softmax_channels", "input");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out(x.shape());
  for (int n = 0; n < B; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = x[base + p];
      for (int c = 1; c < C; ++c) mx = std::max(mx, x[base + c * plane + p]);
      T total{0};
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(x[base + c * plane + p] - mx);
        out[base + c * plane + p] = e;
        total += e;
      }
      const T inv = T{1} / total;
      for (int c = 0; c < C; ++c) out[base + c * plane + p] *= inv;
    }
  }
  const int in_id = scores.id;
  const int out_id = static_cast<int>(g.size());
  auto back = [=](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& pr = gr.value(out_id);
    auto gin = gr.grad(in_id);
    for (int n = 0; n < B; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        T dotp{0};
        for (int c = 0; c < C; ++c) dotp += pr[base + c * plane + p] * gout[base + c * plane + p];
        for (int c = 0; c < C; ++c) {
          const std::size_t i = base + c * plane + p;
          gin[i] += pr[i] * (gout[i] - dotp);
        }
      }
    }
  };
  return finish<T>(g, std::move(out), {in_id}, back, "softmax_channels");
}

template <class T>
Var<T> kl_loss(const Tensor<T>& target, Var<T> probs) {
  Graph<T>& g = *probs.graph;
  const Tensor<T>& p = probs.value();
  require_rank4(p, "kl_loss");
  require_same_shape(target, p, "kl_loss");
  const double n = static_cast<double>(p.dim(0)) * p.dim(2) * p.dim(3);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double t = target[i];
    if (t > 0.0) total += t * (std::log(t) - std::log(std::max(static_cast<double>(p[i]), kLogClamp)));
  }
  Tensor<T> out(Shape{}, static_cast<T>(total / n));
  auto tgt = std::make_shared<Tensor<T>>(target);
  const int in_id = probs.id;
  auto back = [in_id, tgt, n](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& pv = gr.value(in_id);
    auto gin = gr.grad(in_id);
    const double scale = static_cast<double>(gout[0]) / n;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double t = (*tgt)[i];
      if (t > 0.0 && pv[i] > kLogClamp) gin[i] += static_cast<T>(-scale * t / pv[i]);
    }
  };
  return finish<T>(g, std::move(out), {in_id}, back, "kl_loss");
}

template <class T>
Var<T> soft_dice_loss(Var<T> probs, const Tensor<T>& target) {
  Graph<T>& g = *probs.graph;
  const Tensor<T>& p = probs.value();
  require_rank4(p, "soft_dice_loss");
  require_same_shape(target, p, "soft_dice_loss");
  const int B = p.dim(0), C = p.dim(1);
  if (C < 2) throw ConfigError("soft_dice_loss: needs a background channel plus at least one foreground channel");
  const std::size_t plane = static_cast<std::size_t>(p.dim(2)) * p.dim(3);
  const double terms = static_cast<double>(B) * (C - 1);

  // Per (b, c) numerator and denominator, kept for the backward pass.
  auto num = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C), 0.0);
  auto den = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C), 0.0);
  double total = 0.0;
  for (int n = 0; n < B; ++n) {
    for (int c = 1; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
      double spg = 0.0, spp = 0.0, sgg = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double pv = p[base + i], gv = target[base + i];
        spg += pv * gv;
        spp += pv * pv;
        sgg += gv * gv;
      }
      const std::size_t k = static_cast<std::size_t>(n * C + c);
      (*num)[k] = 2.0 * spg + kDiceEps;
      (*den)[k] = spp + sgg + kDiceEps;
      total += 1.0 - (*num)[k] / (*den)[k];
    }
  }
  Tensor<T> out(Shape{}, static_cast<T>(total / terms));
  auto tgt = std::make_shared<Tensor<T>>(target);
  const int in_id = probs.id;
  auto back = [=](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& pv = gr.value(in_id);
    auto gin = gr.grad(in_id);
    const double scale = static_cast<double>(gout[0]) / terms;
    for (int n = 0; n < B; ++n) {
      for (int c = 1; c < C; ++c) {
        const std::size_t k = static_cast<std::size_t>(n * C + c);
        const double nu = (*num)[k], de = (*den)[k];
        const std::size_t base = k * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = -(2.0 * (*tgt)[base + i] * de - nu * 2.0 * pv[base + i]) / (de * de);
          gin[base + i] += static_cast<T>(scale * d);
        }
      }
    }
  };
  return finish<T>(g, std::move(out), {in_id}, back, "soft_dice_loss");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const int a_id = a.id, b_id = b.id;
  auto back = [a_id, b_id](Graph<T>& gr, std::span<const T> gout) {
    for (int id : {a_id, b_id}) {
      if (!gr.requires_grad(id)) continue;
      auto gi = gr.grad(id);
      for (std::size_t i = 0; i < gout.size(); ++i) gi[i] += gout[i];
    }
  };
  return finish<T>(g, std::move(out), {a_id, b_id}, back, "add");
}

template <class T>
Var<T> sum(Var<T> input) {
  Graph<T>& g = *input.graph;
  double total = 0.0;
  for (T v : input.value().data()) total += v;
  const int in_id = input.id;
  auto back = [in_id](Graph<T>& gr, std::span<const T> gout) {
    for (T& v : gr.grad(in_id)) v += gout[0];
  };
  return finish<T>(g, Tensor<T>(Shape{}, static_cast<T>(total)), {in_id}, back, "sum");
}

template <class T>
Var<T> sum_squares(Var<T> input) {
  Graph<T>& g = *input.graph;
  double total = 0.0;
  for (T v : input.value().data()) total += static_cast<double>(v) * v;
  const int in_id = input.id;
  auto back = [in_id](Graph<T>& gr, std::span<const T> gout) {
    const Tensor<T>& x = gr.value(in_id);
    auto gin = gr.grad(in_id);
    for (std::size_t i = 0; i < x.size(); ++i) gin[i] += T{2} * x[i] * gout[0];
  };
  return finish<T>(g, Tensor<T>(Shape{}, static_cast<T>(total)), {in_id}, back, "sum_squares");
}

template <class T>
Var<T> dot(Var<T> input, const Tensor<T>& weights) {
  Graph<T>& g = *input.graph;
  require_same_shape(input.value(), weights, "dot");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += static_cast<double>(input.value()[i]) * weights[i];
  auto wts = std::make_shared<Tensor<T>>(weights);
  const int in_id = input.id;
  auto back = [in_id, wts](Graph<T>& gr, std::span<const T> gout) {
    auto gin = gr.grad(in_id);
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += (*wts)[i] * gout[0];
  };
  return finish<T>(g, Tensor<T>(Shape{}, static_cast<T>(total)), {in_id}, back, "dot");
}

#define CMRLM_INSTANTIATE_OPS(T)                                                              \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>);                           \
  template Var<T> batch_norm<T>(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, Mode);            \
  template Var<T> leaky_relu<T>(Var<T>, T);                                                   \
  template Var<T> max_pool2<T>(Var<T>);                                                       \
  template Var<T> upsample2<T>(Var<T>);                                                       \
  template Var<T> concat_channels<T>(Var<T>, Var<T>);                                         \
  template Var<T> slice_channels<T>(Var<T>, int, int);                                        \
  template Var<T> softmax_channels<T>(Var<T>);                                                \
  template Var<T> kl_loss<T>(const Tensor<T>&, Var<T>);                                       \
  template Var<T> soft_dice_loss<T>(Var<T>, const Tensor<T>&);                                \
  template Var<T> add<T>(Var<T>, Var<T>);                                                     \
  template Var<T> sum<T>(Var<T>);                                                             \
  template Var<T> sum_squares<T>(Var<T>);                                                     \
  template Var<T> dot<T>(Var<T>, const Tensor<T>&);

CMRLM_INSTANTIATE_OPS(float)
CMRLM_INSTANTIATE_OPS(double)

#undef CMRLM_INSTANTIATE_OPS

}  // namespace cmrlm
