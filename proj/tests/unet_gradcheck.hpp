#pragma once

// Full-network gradient check: softmax -> KL + soft Dice through a tiny U-Net.

#include "cmrlm/ops.hpp"
#include "cmrlm/unet.hpp"
#include "gradcheck.hpp"

namespace cmrlm::testing {

inline ArchConfig tiny_arch() {
  ArchConfig a;
  a.num_layers = 2;
  a.blocks_per_layer = {1, 1};
  a.base_filters = 2;
  return a;
}

// Random per-pixel distributions over the output channels.
template <class T>
Tensor<T> random_target(int batch, int channels, int h, int w, Rng& rng) {
  Tensor<T> t(Shape{batch, channels, h, w});
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double total = 0;
        for (int c = 0; c < channels; ++c) total += (t.at(b, c, y, x) = static_cast<T>(rng.uniform(0.05, 1.0)));
        for (int c = 0; c < channels; ++c) t.at(b, c, y, x) = static_cast<T>(t.at(b, c, y, x) / total);
      }
    }
  }
  return t;
}

template <class T>
Var<T> composite_loss(Graph<T>& g, UNet<T>& net, const Tensor<T>& input, const Tensor<T>& target) {
  Var<T> probs = softmax_channels(net.forward(g, g.constant(input), Mode::Train));
  return add(kl_loss(target, probs), soft_dice_loss(probs, target));
}

struct NetGradReports {
  GradReport f64;
  GradReport f32;
};

// Both precisions of the composite-loss check on a batch of two 16x16 images.
inline NetGradReports unet_gradcheck(std::uint64_t seed) {
  Rng rng(seed);
  UNet<float> net32 = UNet<float>::build(tiny_arch(), seed);
  UNet<double> net64 = net32.cast<double>();
  const Tensor<double> input = random_tensor<double>(Shape{2, 1, 16, 16}, rng);
  const Tensor<double> target = random_target<double>(2, 4, 16, 16, rng);
  const Tensor<float> input32 = input.cast<float>();
  const Tensor<float> target32 = target.cast<float>();

  std::vector<Tensor<double>*> wide;
  for (auto& p : net64.parameters()) wide.push_back(&p.value);
  LossFn<double> loss64 = [&](Graph<double>& g) { return composite_loss(g, net64, input, target); };

  NetGradReports out;
  out.f64 = check_gradients<double>(wide, loss64, 1e-5);

  net32.zero_grad();
  {
    Graph<float> g;
    g.backward(composite_loss(g, net32, input32, target32));
  }
  std::vector<std::vector<float>> analytic;
  for (auto& p : net32.parameters()) analytic.emplace_back(p.value.grad().begin(), p.value.grad().end());
  out.f32 = check_against_wide(analytic, wide, loss64, 1e-5);
  return out;
}

}  // namespace cmrlm::testing
