#include <cmath>
#include <set>

#include "cmrlm/errors.hpp"
#include "cmrlm/ops.hpp"
#include "cmrlm/phantom.hpp"
#include "cmrlm/trainer.hpp"
#include "doctest.h"
#include "unet_gradcheck.hpp"

using namespace cmrlm;

namespace {

DatasetManifest patients(const std::vector<int>& images_per_patient) {
  DatasetManifest m;
  for (std::size_t p = 0; p < images_per_patient.size(); ++p) {
    for (int i = 0; i < images_per_patient[p]; ++i) {
      ManifestSample s;
      s.image = std::to_string(p) + "_" + std::to_string(i);
      s.patient_id = "p" + std::to_string(p);
      m.samples.push_back(s);
    }
  }
  return m;
}

std::set<std::string> ids(const DatasetManifest& m) {
  std::set<std::string> out;
  for (const auto& s : m.samples) out.insert(s.patient_id);
  return out;
}

// Small synthetic sample: a bright disc with landmarks scattered inside a 24 px image.
TrainingSample tiny_sample(View view, Rng& rng, int frame = 32) {
  Image img(24, 24);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0.5, 1.0));
  LandmarkSet set;
  set.view = view;
  set.frame = img.frame();
  for (auto& p : set.points) p = Point2{rng.uniform(2, 21), rng.uniform(2, 21)};
  return make_training_sample(img, set, "cine", "p", frame, false);
}

TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk();
  c.arch = testing::tiny_arch();
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

std::vector<TrainingSample> phantom_samples(int n, View view, Contrast contrast, std::uint64_t seed) {
  std::vector<TrainingSample> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const PhantomSample s = gen_sample(PhantomParams::random(view, contrast, rng), rng.fork());
    out.push_back(make_training_sample(s.image, s.landmarks, sequence_name(contrast), "p" + std::to_string(i / 4),
                                       128, true));
  }
  return out;
}

}  // namespace

TEST_CASE("split_patients keeps patients whole") {
  const auto [train, val] = split_patients(patients(std::vector<int>(10, 3)), 0.9, 1);
  CHECK(ids(train).size() == 9);
  CHECK(ids(val).size() == 1);
  for (const auto& id : ids(val)) CHECK(ids(train).count(id) == 0);

  const auto [a, b] = split_patients(patients({12, 1, 1, 1}), 0.5, 4);
  const bool together = (ids(a).count("p0") && a.samples.size() >= 12) || (ids(b).count("p0") && b.samples.size() >= 12);
  CHECK(together);

  const auto again = split_patients(patients(std::vector<int>(10, 3)), 0.9, 1);
  CHECK(ids(again.first) == ids(train));
  CHECK_THROWS_AS(split_patients(patients({5}), 0.9, 1), ConfigError);
}

TEST_CASE("sample_minibatch honours views and draws uniformly") {
  Rng rng(2);
  std::vector<TrainingSample> pool;
  for (int i = 0; i < 30; ++i) pool.push_back(tiny_sample(kAllViews[i % 4], rng));
  TrainConfig c = tiny_config();
  c.frame_size = 32;
  c.augment = false;

  const Batch sax = sample_minibatch(pool, {View::SAX}, 16, rng, c);
  for (View v : sax.views) CHECK(v == View::SAX);

  std::array<int, 4> counts{};
  const int draws = 30000;
  for (int i = 0; i < draws / 100; ++i) {
    for (View v : sample_minibatch(pool, {View::CH2, View::CH3, View::CH4}, 100, rng, c).views) {
      ++counts[static_cast<std::size_t>(v)];
    }
  }
  // Samples are drawn uniformly, so each view appears in proportion to its pool share (8, 8, 7 of 23).
  const std::array<double, 3> share{8.0 / 23, 8.0 / 23, 7.0 / 23};
  for (int k = 0; k < 3; ++k) CHECK(std::abs(counts[k] / double(draws) - share[k]) <= 0.01);
  CHECK(counts[3] == 0);

  c.augment = true;
  const Batch four = sample_minibatch(pool, {}, 4, rng, c);
  CHECK(four.target.shape() == Shape{4, 4, 32, 32});
  double worst = 0;
  for (int b = 0; b < 4; ++b) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        double s = 0;
        for (int ch = 0; ch < 4; ++ch) s += four.target.at(b, ch, y, x);
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
  }
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(sample_minibatch(std::vector<TrainingSample>{}, {}, 4, rng, c), ConfigError);
}

TEST_CASE("adam_step") {
  std::vector<NamedTensor<float>> params(1);
  params[0].name = "w";
  params[0].value = Tensor<float>(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f});
  params[0].value.grad();  // zero gradient
  AdamState st;
  adam_step(params, st, 1e-3);
  CHECK(params[0].value[0] == 1.0f);
  CHECK(params[0].value[1] == -2.0f);

  // First step with g = 1: the bias-corrected update is lr / (1 + eps).
  auto step_of = [](float g) {
    std::vector<NamedTensor<float>> p(1);
    p[0].value = Tensor<float>(Shape{1}, std::vector<float>{0.0f});
    p[0].value.grad()[0] = g;
    AdamState s;
    adam_step(p, s, 0.001);
    return static_cast<double>(p[0].value[0]);
  };
  CHECK(step_of(1.0f) == doctest::Approx(-0.001 / (1 + 1e-8)).epsilon(1e-6));
  CHECK(step_of(-1.0f) == -step_of(1.0f));
  CHECK(step_of(0.25f) == -step_of(-0.25f));
}

TEST_CASE("a small Adam step descends along the sign of the gradient") {
  // At step 1 Adam moves every coordinate by lr * g / (|g| + eps), so the
  // first-order loss change is -lr * sum |g|.
  Rng rng(4);
  UNet<float> net = UNet<float>::build(testing::tiny_arch(), 4);
  const Tensor<float> input = testing::random_tensor<float>(Shape{2, 1, 16, 16}, rng);
  const Tensor<float> target = testing::random_target<float>(2, 4, 16, 16, rng);
  auto loss = [&](bool grads) {
    Graph<float> g(grads);
    Var<float> l = testing::composite_loss(g, net, input, target);
    if (grads) {
      net.zero_grad();
      g.backward(l);
    }
    return static_cast<double>(l.value()[0]);
  };
  const double before = loss(true);
  double l1 = 0;
  for (const auto& p : net.parameters()) {
    for (float g : p.value.grad()) l1 += std::abs(g);
  }
  const double lr = 1e-5;
  AdamState st;
  adam_step(net.parameters(), st, lr);
  const double after = loss(false);
  CHECK((after - before) == doctest::Approx(-lr * l1).epsilon(0.05));
}

TEST_CASE("plateau schedule") {
  PlateauSchedule a(1.0);
  for (double l : {1.0, 0.9, 0.8}) a.update(l);
  CHECK(a.lr() == 1.0);

  PlateauSchedule b(1.0, 3, 1e-4);
  CHECK(b.update(1.0) == 1.0);
  CHECK(b.update(0.99999) == 1.0);
  CHECK(b.update(0.99998) == 1.0);
  CHECK(b.update(0.99997) == 0.5);

  PlateauSchedule c(1.0, 3, 1e-4);
  for (double l : {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0}) c.update(l);
  CHECK(c.lr() == 0.25);
}

TEST_CASE("best epoch selection") {
  CHECK(best_epoch({0.5, 0.3, 0.4}) == 2);
  CHECK(best_epoch({}) == 0);
  CHECK(best_epoch({0.2, 0.2}) == 1);
}

TEST_CASE("training smoke run, determinism and best-epoch weights") {
  const auto all = phantom_samples(24, View::CH4, Contrast::Cine, 10);
  const std::vector<TrainingSample> train_set(all.begin(), all.begin() + 20);
  const std::vector<TrainingSample> val_set(all.begin() + 20, all.end());
  TrainConfig c = tiny_config();
  c.epochs = 3;

  std::vector<UNet<float>> snapshots;
  const TrainResult a = train(c, train_set, val_set, [&](const EpochRecord&, const UNet<float>& m, bool) {
    snapshots.push_back(m);
  });
  REQUIRE(a.history.epochs.size() == 3);
  CHECK(a.history.epochs.back().train_loss < a.history.epochs.front().train_loss);
  CHECK(a.history.epochs.front().lr == 1e-3);

  std::vector<double> vals;
  for (const auto& e : a.history.epochs) vals.push_back(e.val_loss);
  CHECK(a.history.best_epoch == best_epoch(vals));
  const auto& best = snapshots[static_cast<std::size_t>(a.history.best_epoch - 1)];
  for (std::size_t k = 0; k < best.parameters().size(); ++k) {
    CHECK(std::equal(best.parameters()[k].value.data().begin(), best.parameters()[k].value.data().end(),
                     a.checkpoint.model.parameters()[k].value.data().begin()));
  }
  CHECK(a.checkpoint.provenance.epoch == a.history.best_epoch);
  CHECK(evaluate_loss(a.checkpoint.model, val_set, c) == doctest::Approx(vals[a.history.best_epoch - 1]).epsilon(1e-12));

  c.threads = 3;  // batch assembly workers must not change results
  const TrainResult b = train(c, train_set, val_set);
  CHECK(a.history.to_csv() == b.history.to_csv());
}

TEST_CASE("fine-tuning") {
  const auto all = phantom_samples(8, View::CH2, Contrast::Inverted, 20);
  const std::vector<TrainingSample> train_set(all.begin(), all.begin() + 6);
  const std::vector<TrainingSample> val_set(all.begin() + 6, all.end());
  TrainConfig c = tiny_config();
  ModelCheckpoint base;
  base.model = UNet<float>::build(c.arch, 1);
  base.provenance.epoch = 7;

  TrainConfig none = c.finetune();
  none.epochs = 0;
  const TrainResult zero = fine_tune(base, none, train_set, val_set);
  CHECK(encode_checkpoint(zero.checkpoint) == encode_checkpoint(base));

  TrainConfig ft = c.finetune();
  ft.epochs = 1;
  const TrainResult one = fine_tune(base, ft, train_set, val_set);
  REQUIRE(one.history.epochs.size() == 1);
  CHECK(one.history.epochs[0].lr == 0.0005);
  CHECK(c.finetune().epochs == 10);

  TrainConfig other = ft;
  other.arch.base_filters = 4;
  CHECK_THROWS_AS(fine_tune(base, other, train_set, val_set), ConfigError);
}

TEST_CASE("divergence aborts with a diagnostic") {
  const auto all = phantom_samples(6, View::CH3, Contrast::Cine, 30);
  TrainConfig c = tiny_config();
  c.lr = 1e36;
  c.epochs = 2;
  try {
    train(c, {all.begin(), all.begin() + 4}, {all.begin() + 4, all.end()});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    INFO(std::string(e.what()));
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("config validation and view groups") {
  TrainConfig c = TrainConfig::desk();
  c.frame_size = 100;  // not a multiple of 8
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig::desk();
  c.views = {View::CH2, View::SAX};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.mixed_views = true;
  CHECK_NOTHROW(c.validate());
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(TrainConfig{}.lr == 1e-3);
  CHECK(TrainConfig{}.epochs == 50);
  CHECK(TrainConfig{}.eps == 1e-8);
}
