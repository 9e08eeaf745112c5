#include <cstring>
#include <filesystem>

#include "cmrlm/checkpoint.hpp"
#include "cmrlm/unet.hpp"
#include "doctest.h"
#include "unet_gradcheck.hpp"

using namespace cmrlm;
using cmrlm::testing::random_tensor;
using cmrlm::testing::tiny_arch;

namespace {

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
}

// Runs a few train-mode passes so the running statistics are populated.
void warm_up(UNet<float>& net, Rng& rng, int h = 16, int w = 16) {
  for (int i = 0; i < 3; ++i) {
    Graph<float> g(false);
    net.forward(g, g.constant(random_tensor<float>(Shape{2, net.arch().in_channels, h, w}, rng)), Mode::Train);
  }
}

std::vector<std::uint8_t> with_header(const std::vector<std::uint8_t>& bytes, const nlohmann::json& header) {
  const std::uint32_t old_len = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | bytes[11] << 24;
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 12 + old_len, bytes.end());
  return out;
}

nlohmann::json header_of(const std::vector<std::uint8_t>& bytes) {
  const std::uint32_t len = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | bytes[11] << 24;
  return nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
}

LoadError::Kind load_error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const LoadError& e) {
    return e.kind();
  }
  FAIL("decode unexpectedly succeeded");
  return LoadError::Kind::Io;
}

}  // namespace

TEST_CASE("arch validation") {
  ArchConfig a = tiny_arch();
  CHECK_NOTHROW(a.validate());
  a.num_layers = 1;
  a.blocks_per_layer = {1};
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = tiny_arch();
  a.blocks_per_layer = {1, 0};
  CHECK_THROWS_AS(UNet<float>::build(a, 1), ConfigError);
  a.blocks_per_layer = {1};
  CHECK_THROWS_AS(a.validate(), ConfigError);
  CHECK(ArchConfig::full().filters(3) == 256);
  CHECK(ArchConfig::desk().filters(3) == 64);
}

TEST_CASE("build is deterministic in the seed") {
  const auto a = UNet<float>::build(tiny_arch(), 11);
  const auto b = UNet<float>::build(tiny_arch(), 11);
  const auto c = UNet<float>::build(tiny_arch(), 12);
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].name == b.parameters()[i].name);
    CHECK(bit_equal(a.parameters()[i].value, b.parameters()[i].value));
    if (!bit_equal(a.parameters()[i].value, c.parameters()[i].value)) any_diff = true;
  }
  CHECK(any_diff);
  for (const auto& p : a.parameters()) {
    if (p.name.ends_with("gamma")) CHECK(p.value[0] == 1.0f);
    if (p.name.ends_with("beta") || p.name == "head.bias") CHECK(p.value[0] == 0.0f);
  }
}

TEST_CASE("parameter count of the tiny arch matches a hand enumeration") {
  // in=1, out=4, filters 2 at level 0 and 4 at level 1; each conv has no bias and
  // is followed by a batch norm with gamma and beta per channel.
  const std::size_t enc0 = (2 * 1 * 9 + 2 + 2) + (2 * 2 * 9 + 2 + 2);  // 62
  const std::size_t enc1 = (4 * 2 * 9 + 4 + 4) + (4 * 4 * 9 + 4 + 4);  // 232
  const std::size_t dec0 = (2 * 6 * 9 + 2 + 2) + (2 * 2 * 9 + 2 + 2);  // skip 2 + upsampled 4 = 6 in; 152
  const std::size_t head = 4 * 2 * 9 + 4;                              // 76
  const auto net = UNet<float>::build(tiny_arch(), 1);
  CHECK(net.parameter_count() == enc0 + enc1 + dec0 + head);
  CHECK(net.parameter_count() == 522);
  CHECK(net.norm_states().size() == 6);
}

TEST_CASE("400x400 input through the 4-level net keeps its extent") {
  auto net = UNet<float>::build(ArchConfig::desk(), 3);
  Graph<float> g(false);
  ForwardTrace trace;
  Rng rng(5);
  const Var<float> s = net.forward(g, g.constant(random_tensor<float>(Shape{1, 1, 400, 400}, rng)), Mode::Train, &trace);
  CHECK(s.shape() == Shape{1, 4, 400, 400});
  REQUIRE(trace.level_extents.size() == 4);
  const int expect[] = {400, 200, 100, 50};
  for (int i = 0; i < 4; ++i) {
    CHECK(trace.level_extents[i][0] == expect[i]);
    CHECK(trace.level_extents[i][1] == expect[i]);
  }
}

TEST_CASE("indivisible extents name the required divisor") {
  auto net = UNet<float>::build(ArchConfig::desk(), 3);
  Graph<float> g(false);
  try {
    net.forward(g, g.constant(Tensor<float>(Shape{1, 1, 36, 40})), Mode::Train);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("multiples of 8") != std::string::npos);
  }
  CHECK_THROWS_AS(net.forward(g, g.constant(Tensor<float>(Shape{1, 2, 32, 32})), Mode::Train), ConfigError);
}

TEST_CASE("eval mode needs running statistics") {
  const auto net = UNet<float>::build(tiny_arch(), 1);
  CHECK_THROWS_AS(net.predict(Tensor<float>(Shape{1, 1, 8, 8})), StateError);
}

TEST_CASE("eval forward is deterministic and batch independent") {
  auto net = UNet<float>::build(tiny_arch(), 7);
  Rng rng(8);
  warm_up(net, rng);
  const Tensor<float> batch = random_tensor<float>(Shape{3, 1, 16, 16}, rng);
  const Tensor<float> s1 = net.predict(batch);
  const Tensor<float> s2 = net.predict(batch);
  CHECK(bit_equal(s1, s2));
  const std::size_t in_plane = 16 * 16;
  const std::size_t out_plane = 4 * in_plane;
  double worst = 0;
  for (int b = 0; b < 3; ++b) {
    std::vector<float> one(batch.ptr() + b * in_plane, batch.ptr() + (b + 1) * in_plane);
    const Tensor<float> s = net.predict(Tensor<float>(Shape{1, 1, 16, 16}, one));
    for (std::size_t i = 0; i < out_plane; ++i) {
      worst = std::max(worst, double(std::abs(s[i] - s1[b * out_plane + i])));
    }
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("every parameter receives gradient from the combined loss") {
  Rng rng(21);
  auto net = UNet<double>::build(tiny_arch(), 21);
  const auto input = random_tensor<double>(Shape{2, 1, 16, 16}, rng);
  const auto target = cmrlm::testing::random_target<double>(2, 4, 16, 16, rng);
  Graph<double> g;
  g.backward(cmrlm::testing::composite_loss(g, net, input, target));
  for (auto& p : net.parameters()) {
    CAPTURE(p.name);
    std::size_t zeros = 0;
    for (double v : p.value.grad()) zeros += v == 0.0;
    CHECK(zeros == 0);
  }
}

TEST_CASE("full-network gradients match central differences") {
  const auto rep = cmrlm::testing::unet_gradcheck(31);
  MESSAGE("64-bit max rel " << rep.f64.max_rel_error << ", 32-bit max rel " << rep.f32.max_rel_error);
  CHECK(rep.f64.checked == 522);
  CHECK(rep.f64.max_rel_error <= 1e-6);
  CHECK(rep.f32.max_rel_error <= 1e-3);
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto net = UNet<float>::build(tiny_arch(), 4);
  Rng rng(4);
  warm_up(net, rng);
  ModelCheckpoint ck{net, {}};
  ck.provenance.config_digest = config_digest({{"seed", 4}});
  ck.provenance.epoch = 7;
  ck.provenance.val_loss = 0.125;
  ck.provenance.has_val_loss = true;
  ck.provenance.settings = {{"frame", 128}};

  const auto path = std::filesystem::temp_directory_path() / "cmrlm_test_ckpt.bin";
  save_checkpoint(ck, path);
  const ModelCheckpoint back = load_checkpoint(path);
  std::filesystem::remove(path);

  CHECK(back.model.arch() == net.arch());
  REQUIRE(back.model.parameters().size() == net.parameters().size());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    CHECK(bit_equal(back.model.parameters()[i].value, net.parameters()[i].value));
  }
  CHECK(back.provenance.config_digest == ck.provenance.config_digest);
  CHECK(back.provenance.epoch == 7);
  CHECK(back.provenance.val_loss == 0.125);
  CHECK(back.provenance.settings["frame"] == 128);
  const auto x = random_tensor<float>(Shape{1, 1, 16, 16}, rng);
  CHECK(bit_equal(back.model.predict(x), net.predict(x)));
}

TEST_CASE("checkpoint load errors are distinct") {
  auto net = UNet<float>::build(tiny_arch(), 4);
  const auto bytes = encode_checkpoint({net, {}});

  auto truncated = bytes;
  truncated.pop_back();
  CHECK(load_error_kind(truncated) == LoadError::Kind::Truncated);
  CHECK(load_error_kind(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20)) == LoadError::Kind::Truncated);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(load_error_kind(magic) == LoadError::Kind::BadMagic);

  auto version = bytes;
  version[4] = 9;
  CHECK(load_error_kind(version) == LoadError::Kind::Version);

  auto garbage = bytes;
  garbage[12] = '#';
  CHECK(load_error_kind(garbage) == LoadError::Kind::Corrupt);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(load_error_kind(trailing) == LoadError::Kind::Corrupt);

  // Header arch claims 4 output channels while the stored head has 3.
  ArchConfig three = tiny_arch();
  three.out_channels = 3;
  const auto b3 = encode_checkpoint({UNet<float>::build(three, 4), {}});
  auto header = header_of(b3);
  header["arch"]["out_channels"] = 4;
  CHECK(load_error_kind(with_header(b3, header)) == LoadError::Kind::Consistency);

  auto orphan = header_of(bytes);
  orphan["tensors"].push_back({{"name", "extra"}, {"shape", {1}}});
  CHECK(load_error_kind(with_header(bytes, orphan)) == LoadError::Kind::Consistency);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), LoadError);
}
