#include "cmrlm/unet.hpp"

#include <cmath>
#include <string>

#include "cmrlm/rng.hpp"

namespace cmrlm {

ArchConfig ArchConfig::full() { return ArchConfig{}; }

ArchConfig ArchConfig::desk() {
  ArchConfig a;
  a.blocks_per_layer = {1, 1, 1, 1};
  a.base_filters = 8;
  return a;
}

void ArchConfig::validate() const {
  if (num_layers < 2) throw ConfigError("arch: num_layers must be >= 2, got " + std::to_string(num_layers));
  if (num_layers > 12) throw ConfigError("arch: num_layers " + std::to_string(num_layers) + " is unreasonably deep");
  if (static_cast<int>(blocks_per_layer.size()) != num_layers) {
    throw ConfigError("arch: blocks_per_layer has " + std::to_string(blocks_per_layer.size()) + " entries for " +
                      std::to_string(num_layers) + " layers");
  }
  for (int b : blocks_per_layer) {
    if (b < 1) throw ConfigError("arch: every level needs at least one block");
  }
  if (base_filters < 1) throw ConfigError("arch: base_filters must be positive");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("arch: channel counts must be positive");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("arch: leaky_slope must lie in (0, 1)");
}

template <class T>
UNet<T> UNet<T>::build(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  UNet net;
  net.arch_ = arch;
  Rng rng(seed);
  const double gain = 2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope);

  auto add_param = [&](std::string name, Tensor<T> value) {
    value.set_requires_grad(true);
    net.params_.push_back({std::move(name), std::move(value)});
    return static_cast<int>(net.params_.size() - 1);
  };
  auto conv_weight = [&](const std::string& name, int cout, int cin) {
    Tensor<T> w(Shape{cout, cin, 3, 3});
    const double sd = std::sqrt(gain / (9.0 * cin));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(sd * rng.normal());
    return add_param(name, std::move(w));
  };
  auto conv_bn = [&](const std::string& prefix, int cout, int cin) {
    ConvBn layer;
    layer.weight = conv_weight(prefix + ".conv.weight", cout, cin);
    layer.gamma = add_param(prefix + ".bn.gamma", Tensor<T>(Shape{cout}, T{1}));
    layer.beta = add_param(prefix + ".bn.beta", Tensor<T>(Shape{cout}, T{0}));
    net.norms_.push_back({prefix + ".bn", BatchNormState<T>(cout)});
    layer.norm = static_cast<int>(net.norms_.size() - 1);
    return layer;
  };
  auto blocks = [&](const std::string& prefix, int count, int cin, int cout) {
    std::vector<Block> out;
    for (int k = 0; k < count; ++k) {
      const std::string p = prefix + ".block" + std::to_string(k);
      Block b;
      b.first = conv_bn(p + ".0", cout, k == 0 ? cin : cout);
      b.second = conv_bn(p + ".1", cout, cout);
      out.push_back(b);
    }
    return out;
  };

  const int n = arch.num_layers;
  for (int level = 0; level < n; ++level) {
    const int cin = level == 0 ? arch.in_channels : arch.filters(level - 1);
    net.encoder_.push_back(
        blocks("enc" + std::to_string(level), arch.blocks_per_layer[level], cin, arch.filters(level)));
  }
  net.decoder_.resize(n - 1);
  for (int level = n - 2; level >= 0; --level) {
    const int cin = arch.filters(level) + arch.filters(level + 1);
    net.decoder_[level] =
        blocks("dec" + std::to_string(level), arch.blocks_per_layer[level], cin, arch.filters(level));
  }
  net.head_weight_ = conv_weight("head.weight", arch.out_channels, arch.filters(0));
  net.head_bias_ = add_param("head.bias", Tensor<T>(Shape{arch.out_channels}, T{0}));
  return net;
}

template <class T>
std::size_t UNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <class T>
void UNet<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <class T>
Var<T> UNet<T>::run_conv_bn(Graph<T>& g, Var<T> x, const ConvBn& layer, Mode mode) {
  Var<T> y = conv2d(x, g.leaf(params_[layer.weight].value));
  y = batch_norm(y, g.leaf(params_[layer.gamma].value), g.leaf(params_[layer.beta].value), norms_[layer.norm].state,
                 mode);
  return leaky_relu(y, static_cast<T>(arch_.leaky_slope));
}

template <class T>
Var<T> UNet<T>::run_block(Graph<T>& g, Var<T> x, const Block& block, Mode mode) {
  return run_conv_bn(g, run_conv_bn(g, x, block.first, mode), block.second, mode);
}

template <class T>
Var<T> UNet<T>::forward(Graph<T>& g, Var<T> input, Mode mode, ForwardTrace* trace) {
  if (params_.empty()) throw StateError("unet: model was not built");
  const Tensor<T>& x0 = input.value();
  if (x0.rank() != 4) throw ConfigError("unet: input must be [B,C,H,W], got " + shape_string(x0.shape()));
  if (x0.dim(1) != arch_.in_channels) {
    throw ConfigError("unet: input has " + std::to_string(x0.dim(1)) + " channels, model expects " +
                      std::to_string(arch_.in_channels));
  }
  const int div = arch_.required_divisor();
  if (x0.dim(2) % div != 0 || x0.dim(3) % div != 0 || x0.dim(2) == 0 || x0.dim(3) == 0) {
    throw ConfigError("unet: spatial extents " + std::to_string(x0.dim(2)) + "x" + std::to_string(x0.dim(3)) +
                      " must be positive multiples of " + std::to_string(div));
  }
  if (trace) trace->level_extents.clear();

  const int n = arch_.num_layers;
  std::vector<Var<T>> skips;
  Var<T> x = input;
  for (int level = 0; level < n; ++level) {
    if (level > 0) x = max_pool2(x);
    for (const Block& b : encoder_[level]) x = run_block(g, x, b, mode);
    if (trace) trace->level_extents.push_back({x.dim(2), x.dim(3)});
    if (level < n - 1) skips.push_back(x);
  }
  for (int level = n - 2; level >= 0; --level) {
    x = concat_channels(skips[level], upsample2(x));
    for (const Block& b : decoder_[level]) x = run_block(g, x, b, mode);
  }
  return conv2d(x, g.leaf(params_[head_weight_].value), g.leaf(params_[head_bias_].value));
}

template <class T>
Tensor<T> UNet<T>::predict(const Tensor<T>& batch) const {
  // A non-recording graph only reads its leaves and eval-mode normalisation
  // only reads the running statistics, so the const_cast never mutates.
  auto& self = const_cast<UNet&>(*this);
  Graph<T> g(false);
  return self.forward(g, g.constant(batch), Mode::Eval).value();
}

template <class T>
Tensor<T> UNet<T>::predict_probs(const Tensor<T>& batch) const {
  auto& self = const_cast<UNet&>(*this);
  Graph<T> g(false);
  return softmax_channels(self.forward(g, g.constant(batch), Mode::Eval)).value();
}

template <class T>
template <class U>
UNet<U> UNet<T>::cast() const {
  UNet<U> out;
  out.arch_ = arch_;
  for (const auto& p : params_) {
    Tensor<U> v = p.value.template cast<U>();
    v.set_requires_grad(true);
    out.params_.push_back({p.name, std::move(v)});
  }
  for (const auto& s : norms_) {
    BatchNormState<U> st;
    st.running_mean = s.state.running_mean.template cast<U>();
    st.running_var = s.state.running_var.template cast<U>();
    st.initialized = s.state.initialized;
    out.norms_.push_back({s.name, std::move(st)});
  }
  auto convert = [](const std::vector<std::vector<Block>>& levels) {
    std::vector<std::vector<typename UNet<U>::Block>> r;
    for (const auto& lv : levels) {
      auto& dst = r.emplace_back();
      for (const Block& b : lv) {
        dst.push_back({{b.first.weight, b.first.gamma, b.first.beta, b.first.norm},
                       {b.second.weight, b.second.gamma, b.second.beta, b.second.norm}});
      }
    }
    return r;
  };
  out.encoder_ = convert(encoder_);
  out.decoder_ = convert(decoder_);
  out.head_weight_ = head_weight_;
  out.head_bias_ = head_bias_;
  return out;
}

template class UNet<float>;
template class UNet<double>;
template UNet<double> UNet<float>::cast<double>() const;
template UNet<float> UNet<double>::cast<float>() const;
template UNet<float> UNet<float>::cast<float>() const;
template UNet<double> UNet<double>::cast<double>() const;

}  // namespace cmrlm
