#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "ralf/model.hpp"

using namespace ralf;

namespace {
BevImage random_bev(int side, double res, Modality m, std::uint64_t seed) {
  BevImage img(BevConfig{side, side, res}, m);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unif(0.0f, 1.0f);
  for (auto& p : img.pixels) p = unif(rng) < 0.2f ? unif(rng) : 0.0f;
  return img;
}
}  // namespace

TEST_CASE("encoder output is 1/8 of the input resolution") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  auto f64 = model.encode_lidar(random_bev(64, 0.5, Modality::lidar, 3));
  CHECK(f64.height() == 8);
  CHECK(f64.width() == 8);
  CHECK(f64.channels() == EncoderConfig::small().feature_dim);

  RalfModel<float> full(EncoderConfig::full(), 1);
  auto f256 = full.encode_radar(random_bev(256, 0.5, Modality::radar, 4));
  CHECK(f256.height() == 32);
  CHECK(f256.width() == 32);
  CHECK(f256.channels() == 256);
}

TEST_CASE("input dims not divisible by 8 rejected") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  nn::Tensor<float> bad = nn::Tensor<float>::zeros({1, 1, 250, 250});
  CHECK_THROWS_AS(model.encode_lidar(bad), std::invalid_argument);
}

TEST_CASE("context encoder splits hidden and context channels") {
  const auto cfg = EncoderConfig::small();
  RalfModel<float> model(cfg, 1);
  auto x = bev_to_tensor<float>(random_bev(64, 0.5, Modality::lidar, 5));
  auto [hidden, context] = model.encode_context(x);
  CHECK(hidden.dim(1) == cfg.hidden_dim());
  CHECK(context.dim(1) == cfg.context_dim());
  CHECK(hidden.dim(2) == 8);
  // hidden is tanh-bounded, context is non-negative
  for (float v : hidden.data()) {
    CHECK(v <= 1.0f);
    CHECK(v >= -1.0f);
  }
  for (float v : context.data()) CHECK(v >= 0.0f);
}

TEST_CASE("all-zero input produces finite features") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  BevImage zero(BevConfig{64, 64, 0.5}, Modality::lidar);
  auto f = model.encode_lidar(zero);
  for (float v : f.values.data()) CHECK(std::isfinite(v));
  auto [h, c] = model.encode_context(bev_to_tensor<float>(zero));
  for (float v : h.data()) CHECK(std::isfinite(v));
  for (float v : c.data()) CHECK(std::isfinite(v));
}

TEST_CASE("eval-mode encoding is deterministic") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  model.set_training(false);
  auto img = random_bev(64, 0.5, Modality::radar, 6);
  auto a = model.encode_radar(img);
  auto b = model.encode_radar(img);
  CHECK(a.values.data() == b.values.data());
}

TEST_CASE("radar and lidar encoders share no parameters") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  auto pm = model.params();
  std::set<const void*> radar_ptrs, lidar_ptrs;
  for (const auto& [name, t] : pm.params) {
    if (name.rfind("fnet_radar", 0) == 0) radar_ptrs.insert(t.node().get());
    if (name.rfind("fnet_lidar", 0) == 0) lidar_ptrs.insert(t.node().get());
  }
  REQUIRE(!radar_ptrs.empty());
  REQUIRE(radar_ptrs.size() == lidar_ptrs.size());
  for (const void* p : radar_ptrs) CHECK(lidar_ptrs.count(p) == 0);
  // and the two encoders were initialized differently
  auto img = random_bev(64, 0.5, Modality::radar, 7);
  auto fr = model.encode_radar(img);
  auto fl = model.encode_lidar(img);
  bool differs = false;
  for (std::size_t i = 0; i < fr.values.size(); ++i)
    differs = differs || fr.values.data()[i] != fl.values.data()[i];
  CHECK(differs);
}

TEST_CASE("shared-encoder configuration is rejected") {
  EncoderConfig cfg = EncoderConfig::small();
  cfg.shared = true;
  CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
}

TEST_CASE("encoder gradient check against finite differences") {
  // double precision, small input, scalar readout = sum of features
  RalfModel<double> model(EncoderConfig::small(), 2);
  model.set_training(false);  // freeze batch-norm stats for repeatability

  auto img = random_bev(32, 0.5, Modality::lidar, 8);
  auto x = bev_to_tensor<double>(img);
  x.set_requires_grad(true);
  auto loss = sum_all(model.encode_lidar(x).values);
  loss.backward();
  const auto grad = x.grad();

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  const double eps = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 60 && checked < 25; ++trial) {
    const std::size_t i = pick(rng);
    if (std::abs(grad[i]) < 1e-7) continue;  // skip dead relu paths
    auto& val = x.node()->value;
    const double orig = val[i];
    val[i] = orig + eps;
    const double up = sum_all(model.encode_lidar(x).values).data()[0];
    val[i] = orig - eps;
    const double dn = sum_all(model.encode_lidar(x).values).data()[0];
    val[i] = orig;
    const double fd = (up - dn) / (2.0 * eps);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    INFO("i=" << i << " fd=" << fd << " ad=" << grad[i]);
    CHECK(std::abs(fd - grad[i]) / denom < 1e-3);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("checkpoint save/load round trip preserves outputs bitwise") {
  const auto path = std::filesystem::temp_directory_path() / "enc_ckpt.rlfw";
  RalfModel<float> model(EncoderConfig::small(), 3);
  model.set_training(false);
  model.step = 123;
  model.save(path);
  auto loaded = RalfModel<float>::load(path);
  CHECK(loaded.step == 123);
  auto img = random_bev(64, 0.5, Modality::radar, 9);
  auto a = model.describe_one(img);
  auto b = loaded.describe_one(img);
  REQUIRE(a.v.size() == b.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);
}
