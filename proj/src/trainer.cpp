#include "cmrlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "cmrlm/errors.hpp"
#include "cmrlm/ops.hpp"

namespace cmrlm {

using nlohmann::json;

namespace {

bool wants(const std::vector<View>& views, View v) {
  return views.empty() || std::find(views.begin(), views.end(), v) != views.end();
}

void check_view_group(const std::vector<View>& views, bool mixed) {
  if (mixed) return;
  bool lax = false, sax = false;
  for (View v : views) (is_lax(v) ? lax : sax) = true;
  if (lax && sax) {
    throw ConfigError("training mixes long- and short-axis views; train them separately or enable mixed views");
  }
}

std::vector<View> present_views(const std::vector<TrainingSample>& samples) {
  std::vector<View> out;
  for (const auto& s : samples) {
    if (std::find(out.begin(), out.end(), s.view()) == out.end()) out.push_back(s.view());
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; fn must be independent per index.
template <class Fn>
void parallel_for(int n, int threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  const int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Batch empty_batch(int n, int frame) {
  Batch b;
  b.input = Tensor<float>(Shape{n, 1, frame, frame});
  b.target = Tensor<float>(Shape{n, kSlots + 1, frame, frame});
  b.views.resize(static_cast<std::size_t>(n));
  return b;
}

Batch assemble(const std::vector<const TrainingSample*>& picks, const std::vector<std::uint64_t>& seeds,
               const TrainConfig& config) {
  Batch b = empty_batch(static_cast<int>(picks.size()), config.frame_size);
  parallel_for(static_cast<int>(picks.size()), config.threads, [&](int i) {
    const auto idx = static_cast<std::size_t>(i);
    fill_batch_slot(b, i, *picks[idx], config, config.augment ? std::optional(seeds[idx]) : std::nullopt);
  });
  return b;
}

struct StepLoss {
  double kl = 0.0;
  double dice = 0.0;
};

StepLoss batch_loss(UNet<float>& model, const Batch& batch, Mode mode, bool backward) {
  Graph<float> g(backward);
  Var<float> probs = softmax_channels(model.forward(g, g.constant(batch.input), mode));
  Var<float> kl = kl_loss(batch.target, probs);
  Var<float> dice = soft_dice_loss(probs, batch.target);
  Var<float> loss = add(kl, dice);
  if (backward) {
    model.zero_grad();
    g.backward(loss);
  }
  return {kl.value()[0], dice.value()[0]};
}

TrainResult run(UNet<float> model, const TrainConfig& config, const std::vector<TrainingSample>& train_set,
                const std::vector<TrainingSample>& val_set, const EpochCallback& on_epoch) {
  config.validate();
  std::vector<const TrainingSample*> pool;
  for (const auto& s : train_set) {
    if (wants(config.views, s.view())) pool.push_back(&s);
  }
  std::vector<TrainingSample> val;
  for (const auto& s : val_set) {
    if (wants(config.views, s.view())) val.push_back(s);
  }
  if (pool.empty()) throw ConfigError("no training samples for the requested views");
  if (val.empty()) throw ConfigError("no validation samples for the requested views");
  check_view_group(config.views.empty() ? present_views(train_set) : config.views, config.mixed_views);

  TrainResult result;
  result.checkpoint.model = model;
  result.checkpoint.provenance.config_digest = config_digest(config.to_json());
  result.checkpoint.provenance.settings = {{"frame_size", config.frame_size},
                                           {"sigma", config.sigma},
                                           {"tau", config.tau},
                                           {"config", config.to_json()}};

  Rng rng(config.seed ^ 0x5DEECE66Dull);
  AdamState adam;
  PlateauSchedule schedule(config.lr, config.plateau_patience, config.plateau_min_rel, config.plateau_factor);
  double best_val = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(pool.size());

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = schedule.lr();
    std::vector<const TrainingSample*> order = pool;
    rng.shuffle(order);
    double loss_sum = 0.0;
    int step = 0;
    for (int start = 0; start < n; start += config.batch_size, ++step) {
      const int count = std::min(config.batch_size, n - start);
      std::vector<const TrainingSample*> picks(order.begin() + start, order.begin() + start + count);
      std::vector<std::uint64_t> seeds(static_cast<std::size_t>(count));
      for (auto& s : seeds) s = rng.fork();
      const Batch batch = assemble(picks, seeds, config);
      StepLoss sl;
      try {
        sl = batch_loss(model, batch, Mode::Train, true);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           " (lr " + std::to_string(lr) + "): " + e.what());
      }
      if (!std::isfinite(sl.kl) || !std::isfinite(sl.dice)) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch << " step " << step << " (lr " << lr << ", kl " << sl.kl
           << ", dice " << sl.dice << ")";
        throw NumericError(os.str());
      }
      adam_step(model.parameters(), adam, lr, config.beta1, config.beta2, config.eps);
      loss_sum += (sl.kl + sl.dice) * count;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / n;
    try {
      rec.val_loss = evaluate_loss(model, val, config);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + " validation (lr " +
                         std::to_string(lr) + "): " + e.what());
    }
    if (!std::isfinite(rec.val_loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + " validation (lr " +
                         std::to_string(lr) + ")");
    }
    rec.lr = lr;
    result.history.epochs.push_back(rec);
    const bool is_best = rec.val_loss < best_val;
    if (is_best) {
      best_val = rec.val_loss;
      result.history.best_epoch = epoch;
      result.checkpoint.model = model;
      result.checkpoint.provenance.epoch = epoch;
      result.checkpoint.provenance.val_loss = rec.val_loss;
      result.checkpoint.provenance.has_val_loss = true;
    }
    schedule.update(rec.val_loss);
    if (on_epoch) on_epoch(rec, model, is_best);
  }
  return result;
}

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.arch = ArchConfig::desk();
  c.frame_size = 128;
  c.batch_size = 4;
  return c;
}

TrainConfig TrainConfig::finetune() const {
  TrainConfig c = *this;
  c.lr = 5e-4;
  c.epochs = 10;
  return c;
}

void TrainConfig::validate() const {
  arch.validate();
  if (arch.out_channels != kSlots + 1) {
    throw ConfigError("arch must have " + std::to_string(kSlots + 1) + " output channels for heat-map training");
  }
  if (frame_size <= 0 || frame_size % arch.required_divisor() != 0) {
    throw ConfigError("frame size must be a positive multiple of " + std::to_string(arch.required_divisor()));
  }
  if (!(sigma > 0)) throw ConfigError("sigma must be positive");
  if (!(tau > 0 && tau < 1)) throw ConfigError("tau must lie in (0, 1)");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (plateau_patience < 1) throw ConfigError("plateau patience must be at least 1");
  if (!(plateau_min_rel >= 0)) throw ConfigError("plateau min relative improvement must be non-negative");
  if (!(plateau_factor > 0 && plateau_factor <= 1)) throw ConfigError("plateau factor must lie in (0, 1]");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train fraction must lie in (0, 1)");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  augmentation.validate();
  check_view_group(views, mixed_views);
}

json TrainConfig::to_json() const {
  json v = json::array();
  for (View view : views) v.push_back(view_name(view));
  return {{"arch", arch_to_json(arch)},
          {"views", v},
          {"mixed_views", mixed_views},
          {"frame_size", frame_size},
          {"sigma", sigma},
          {"tau", tau},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"plateau_patience", plateau_patience},
          {"plateau_min_rel", plateau_min_rel},
          {"plateau_factor", plateau_factor},
          {"train_fraction", train_fraction},
          {"augment", augment},
          {"augmentation",
           {{"p_corrected", augmentation.p_corrected},
            {"p_noise", augmentation.p_noise},
            {"noise_lo", augmentation.noise_lo},
            {"noise_hi", augmentation.noise_hi},
            {"p_blur", augmentation.p_blur},
            {"blur_sigmas", augmentation.blur_sigmas}}},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("arch")) c.arch = arch_from_json(j["arch"]);
    for (const auto& v : j.value("views", json::array())) c.views.push_back(parse_view(v.get<std::string>()));
    c.mixed_views = j.value("mixed_views", c.mixed_views);
    c.frame_size = j.value("frame_size", c.frame_size);
    c.sigma = j.value("sigma", c.sigma);
    c.tau = j.value("tau", c.tau);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.plateau_min_rel = j.value("plateau_min_rel", c.plateau_min_rel);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.augment = j.value("augment", c.augment);
    if (j.contains("augmentation")) {
      const json& a = j["augmentation"];
      c.augmentation.p_corrected = a.value("p_corrected", c.augmentation.p_corrected);
      c.augmentation.p_noise = a.value("p_noise", c.augmentation.p_noise);
      c.augmentation.noise_lo = a.value("noise_lo", c.augmentation.noise_lo);
      c.augmentation.noise_hi = a.value("noise_hi", c.augmentation.noise_hi);
      c.augmentation.p_blur = a.value("p_blur", c.augmentation.p_blur);
      c.augmentation.blur_sigmas = a.value("blur_sigmas", c.augmentation.blur_sigmas);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::pair<DatasetManifest, DatasetManifest> split_patients(const DatasetManifest& manifest, double frac,
                                                           std::uint64_t seed) {
  if (!(frac > 0 && frac < 1)) throw ConfigError("split fraction must lie in (0, 1)");
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& s : manifest.samples) {
    if (s.patient_id.empty()) throw ConfigError("split: sample " + s.image + " has no patient id");
    if (seen.insert(s.patient_id).second) ids.push_back(s.patient_id);
  }
  const int n = static_cast<int>(ids.size());
  if (n < 2) throw ConfigError("split needs at least 2 patients, got " + std::to_string(n));
  Rng rng(seed);
  rng.shuffle(ids);
  const int n_train = std::clamp(static_cast<int>(std::lround(frac * n)), 1, n - 1);
  const std::set<std::string> train_ids(ids.begin(), ids.begin() + n_train);

  std::pair<DatasetManifest, DatasetManifest> out;
  out.first.root = out.second.root = manifest.root;
  for (const auto& s : manifest.samples) (train_ids.count(s.patient_id) ? out.first : out.second).samples.push_back(s);
  return out;
}

TrainingSample make_training_sample(const Image& image, const LandmarkSet& landmarks, std::string sequence,
                                    std::string patient_id, int frame_size, bool cache_corrected) {
  if (landmarks.frame.height != image.height || landmarks.frame.width != image.width) {
    throw UsageError("training sample: landmarks are not in the image frame");
  }
  landmarks.validate();
  TrainingSample s;
  s.landmarks = landmarks;
  s.sequence = std::move(sequence);
  s.patient_id = std::move(patient_id);
  s.resampled = resample_to_1mm(image);
  s.record = preprocess_resampled(s.resampled, image.frame(), frame_size).record;
  s.net_landmarks = to_network_frame(s.landmarks, s.record);
  for (const auto& p : s.net_landmarks.points) {
    if (p && !s.net_landmarks.frame.contains(*p)) {
      throw ConfigError("a landmark falls outside the " + std::to_string(frame_size) +
                        " px network frame; use a larger frame");
    }
  }
  if (cache_corrected) s.corrected = bias_correct(s.resampled.image);
  return s;
}

std::vector<TrainingSample> load_samples(const DatasetManifest& manifest, const std::vector<View>& views,
                                         int frame_size, bool cache_corrected) {
  std::vector<TrainingSample> out;
  for (const auto& m : manifest.samples) {
    if (!wants(views, m.view)) continue;
    Image img = read_image(manifest.image_path(m));
    img.spacing_row = m.spacing_row;
    img.spacing_col = m.spacing_col;
    try {
      out.push_back(make_training_sample(img, manifest.landmarks(m, img.height, img.width), m.sequence, m.patient_id,
                                         frame_size, cache_corrected));
    } catch (const ConfigError& e) {
      throw ConfigError(m.image + ": " + e.what());
    } catch (const GeometryError& e) {
      throw ConfigError(m.image + ": " + e.what());
    }
  }
  return out;
}

void fill_batch_slot(Batch& batch, int slot, const TrainingSample& s, const TrainConfig& config,
                     std::optional<std::uint64_t> augment_seed) {
  const int F = config.frame_size;
  Resampled r = s.resampled;
  if (augment_seed) {
    r.image = s.corrected.pixels.empty() ? augment(s.resampled.image, config.augmentation, *augment_seed)
                                         : augment(s.resampled.image, s.corrected, config.augmentation, *augment_seed);
  }
  const Preprocessed p = preprocess_resampled(r, s.record.source, F);
  const HeatmapStack target = encode(s.net_landmarks, F, F, config.sigma);
  const std::size_t plane = static_cast<std::size_t>(F) * F;
  std::copy(p.image.pixels.begin(), p.image.pixels.end(), batch.input.ptr() + slot * plane);
  std::copy(target.probs.ptr(), target.probs.ptr() + (kSlots + 1) * plane,
            batch.target.ptr() + static_cast<std::size_t>(slot) * (kSlots + 1) * plane);
  batch.views[static_cast<std::size_t>(slot)] = s.view();
}

Batch sample_minibatch(const std::vector<TrainingSample>& samples, const std::vector<View>& views, int batch,
                       Rng& rng, const TrainConfig& config) {
  std::vector<const TrainingSample*> pool;
  for (const auto& s : samples) {
    if (wants(views, s.view())) pool.push_back(&s);
  }
  if (pool.empty()) throw ConfigError("minibatch: no samples for the requested views");
  if (batch < 1) throw ConfigError("minibatch: batch size must be at least 1");
  std::vector<const TrainingSample*> picks;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < batch; ++i) {
    picks.push_back(pool[rng.index(pool.size())]);
    seeds.push_back(rng.fork());
  }
  return assemble(picks, seeds, config);
}

void adam_step(std::vector<NamedTensor<float>>& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.size(), 0.0);
      state.v.emplace_back(p.value.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam: parameter list changed between steps");
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<float>& t = params[k].value;
    if (!t.has_grad()) continue;
    const auto g = std::as_const(t).grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != t.size()) throw UsageError("adam: shape of " + params[k].name + " changed");
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = g[i];
      m[i] = beta1 * m[i] + (1 - beta1) * gi;
      v[i] = beta2 * v[i] + (1 - beta2) * gi * gi;
      t[i] = static_cast<float>(t[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
}

double PlateauSchedule::update(double val_loss) {
  if (val_loss < best_ * (1.0 - min_rel_)) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
  }
  return lr_;
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  char line[128];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss, e.lr);
    out += line;
  }
  return out;
}

int best_epoch(const std::vector<double>& val_losses) {
  if (val_losses.empty()) return 0;
  return static_cast<int>(std::min_element(val_losses.begin(), val_losses.end()) - val_losses.begin()) + 1;
}

double evaluate_loss(const UNet<float>& model, const std::vector<TrainingSample>& samples, const TrainConfig& config) {
  if (samples.empty()) throw ConfigError("evaluate_loss: no samples");
  auto& net = const_cast<UNet<float>&>(model);  // eval mode, non-recording graph: read only
  double total = 0.0;
  const int n = static_cast<int>(samples.size());
  for (int start = 0; start < n; start += config.batch_size) {
    const int count = std::min(config.batch_size, n - start);
    Batch b = empty_batch(count, config.frame_size);
    parallel_for(count, config.threads, [&](int i) {
      fill_batch_slot(b, i, samples[static_cast<std::size_t>(start + i)], config, std::nullopt);
    });
    const StepLoss sl = batch_loss(net, b, Mode::Eval, false);
    total += (sl.kl + sl.dice) * count;
  }
  return total / n;
}

TrainResult train(const TrainConfig& config, const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& val_set, const EpochCallback& on_epoch) {
  config.validate();
  return run(UNet<float>::build(config.arch, config.seed), config, train_set, val_set, on_epoch);
}

TrainResult fine_tune(const ModelCheckpoint& base, const TrainConfig& config,
                      const std::vector<TrainingSample>& train_set, const std::vector<TrainingSample>& val_set,
                      const EpochCallback& on_epoch) {
  if (!(base.model.arch() == config.arch)) throw ConfigError("fine-tune: config arch does not match the base model");
  TrainResult r = run(base.model, config, train_set, val_set, on_epoch);
  if (r.history.epochs.empty()) r.checkpoint = base;
  return r;
}

}  // namespace cmrlm
