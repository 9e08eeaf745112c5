#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cmrlm/checkpoint.hpp"
#include "cmrlm/heatmap.hpp"
#include "cmrlm/io.hpp"
#include "cmrlm/preprocess.hpp"
#include "cmrlm/rng.hpp"
#include "cmrlm/unet.hpp"
#include "json.hpp"

namespace cmrlm {

struct TrainConfig {
  ArchConfig arch = ArchConfig::full();
  /// Views to draw from; empty means every view present in the training set.
  std::vector<View> views;
  /// Long- and short-axis views normally get separate models; phantom runs may pool them.
  bool mixed_views = false;
  int frame_size = 400;
  double sigma = kDefaultSigma;
  double tau = kDefaultTau;
  int batch_size = 8;
  int epochs = 50;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int plateau_patience = 3;
  double plateau_min_rel = 1e-4;
  double plateau_factor = 0.5;
  double train_fraction = 0.9;
  bool augment = true;
  AugmentConfig augmentation;
  std::uint64_t seed = 0;
  int threads = 1;  // batch assembly workers; results do not depend on it

  /// Desk-scale preset: small arch, 128 px frame, batch 4.
  static TrainConfig desk();
  /// Fine-tuning preset: lr 0.0005 for 10 epochs.
  TrainConfig finetune() const;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Patient-level split; the first list trains. Deterministic in seed.
std::pair<DatasetManifest, DatasetManifest> split_patients(const DatasetManifest& manifest, double frac,
                                                           std::uint64_t seed);

/// A loaded sample with everything augmentation-independent precomputed.
struct TrainingSample {
  Resampled resampled;  // 1 mm image
  Image corrected;      // cached bias-corrected branch (empty when not needed)
  PreprocRecord record;
  LandmarkSet landmarks;      // original frame
  LandmarkSet net_landmarks;  // network frame
  std::string sequence;
  std::string patient_id;
  View view() const { return landmarks.view; }
};

/// Resamples, frames and (optionally) bias-corrects one labelled image.
TrainingSample make_training_sample(const Image& image, const LandmarkSet& landmarks, std::string sequence,
                                    std::string patient_id, int frame_size, bool cache_corrected);

/// Loads the manifest samples whose view is in `views` (all when empty).
std::vector<TrainingSample> load_samples(const DatasetManifest& manifest, const std::vector<View>& views,
                                         int frame_size, bool cache_corrected);

struct Batch {
  Tensor<float> input;   // [B, 1, F, F]
  Tensor<float> target;  // [B, 4, F, F]
  std::vector<View> views;
};

/// Network input and heat-map target for one sample, augmented when seed is set.
void fill_batch_slot(Batch& batch, int slot, const TrainingSample& s, const TrainConfig& config,
                     std::optional<std::uint64_t> augment_seed);

/// Uniform draw (with replacement) over the samples whose view is in `views`.
Batch sample_minibatch(const std::vector<TrainingSample>& samples, const std::vector<View>& views, int batch,
                       Rng& rng, const TrainConfig& config);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

/// One bias-corrected Adam update of every parameter from its gradient buffer.
void adam_step(std::vector<NamedTensor<float>>& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

/// Multiplies the rate by `factor` once the best validation loss has failed to
/// improve by `min_rel` (relative) for `patience` consecutive epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, int patience = 3, double min_rel = 1e-4, double factor = 0.5)
      : lr_(lr), patience_(patience), min_rel_(min_rel), factor_(factor) {}
  /// Feeds one epoch's validation loss; returns the rate for the next epoch.
  double update(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double min_rel_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran

  std::string to_csv() const;
};

/// 1-based index of the minimum; the earliest on ties.
int best_epoch(const std::vector<double>& val_losses);

struct TrainResult {
  ModelCheckpoint checkpoint;  // weights of the best validation epoch
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&, const UNet<float>& current, bool is_best)>;

TrainResult train(const TrainConfig& config, const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& val_set, const EpochCallback& on_epoch = {});

/// Same loop starting from `base`; every parameter stays trainable.
TrainResult fine_tune(const ModelCheckpoint& base, const TrainConfig& config,
                      const std::vector<TrainingSample>& train_set, const std::vector<TrainingSample>& val_set,
                      const EpochCallback& on_epoch = {});

/// Mean KL + soft Dice over `samples`, eval mode, no augmentation.
double evaluate_loss(const UNet<float>& model, const std::vector<TrainingSample>& samples, const TrainConfig& config);

}  // namespace cmrlm
