#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ralf/geometry.hpp"

using namespace ralf;

TEST_CASE("angle wrapping keeps theta in (-pi, pi]") {
  CHECK(wrap_angle(kPi) == Catch::Approx(kPi));
  CHECK(wrap_angle(-kPi) == Catch::Approx(kPi));
  CHECK(wrap_angle(3.0 * kPi) == Catch::Approx(kPi));
  CHECK(wrap_angle(2.0 * kPi) == Catch::Approx(0.0).margin(1e-12));
  Pose2 p(0, 0, 5.0 * kPi / 2.0);
  CHECK(p.theta == Catch::Approx(kPi / 2.0));
}

TEST_CASE("compose with inverse gives identity") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unif(-50.0, 50.0);
  for (int i = 0; i < 200; ++i) {
    Pose2 p(unif(rng), unif(rng), unif(rng));
    Pose2 id = compose(p, inverse(p));
    CHECK(std::abs(id.x) < 1e-9);
    CHECK(std::abs(id.y) < 1e-9);
    CHECK(std::abs(id.theta) < 1e-9);
  }
}

TEST_CASE("between recovers the relative transform") {
  Pose2 a(1.0, 2.0, 0.3), b(4.0, -1.0, -0.7);
  Pose2 rel = between(a, b);
  Pose2 back = compose(a, rel);
  CHECK(back.x == Catch::Approx(b.x).margin(1e-12));
  CHECK(back.y == Catch::Approx(b.y).margin(1e-12));
  CHECK(back.theta == Catch::Approx(b.theta).margin(1e-12));
}

TEST_CASE("world_to_pixel convention") {
  BevConfig cfg{256, 256, 0.5};
  auto [u0, v0] = world_to_pixel(0.0, 0.0, cfg);
  CHECK(u0 == 128.0);
  CHECK(v0 == 128.0);
  auto [u1, v1] = world_to_pixel(1.0, 0.0, cfg);
  CHECK(u1 == 126.0);
  CHECK(v1 == 128.0);
  auto [u2, v2] = world_to_pixel(0.0, -2.0, cfg);
  CHECK(u2 == 128.0);
  CHECK(v2 == 124.0);
}

TEST_CASE("pixel round trip is exact for continuous coordinates") {
  BevConfig cfg{256, 256, 0.5};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unif(-60.0, 60.0);
  for (int i = 0; i < 500; ++i) {
    const double x = unif(rng), y = unif(rng);
    auto [u, v] = world_to_pixel(x, y, cfg);
    auto [xb, yb] = pixel_to_world(u, v, cfg);
    CHECK(xb == Catch::Approx(x).margin(1e-12));
    CHECK(yb == Catch::Approx(y).margin(1e-12));
  }
}

TEST_CASE("rasterized round trip within half a pixel") {
  BevConfig cfg{256, 256, 0.5};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> unif(-60.0, 60.0);
  for (int i = 0; i < 500; ++i) {
    const double x = unif(rng), y = unif(rng);
    auto [u, v] = world_to_pixel(x, y, cfg);
    // center of the pixel the point rasterizes into
    auto [xb, yb] = pixel_to_world(std::floor(u) + 0.5, std::floor(v) + 0.5, cfg);
    CHECK(std::abs(xb - x) <= cfg.resolution / 2.0 + 1e-12);
    CHECK(std::abs(yb - y) <= cfg.resolution / 2.0 + 1e-12);
  }
}

TEST_CASE("transform_cloud basics") {
  PointCloud2 c;
  c.points.push_back({0.0, 0.0, 0.5f});
  c.points.push_back({1.0, 0.0, 0.25f});

  SECTION("identity is a no-op") {
    auto out = transform_cloud(Pose2::identity(), c);
    CHECK(out.points[1].x == Catch::Approx(1.0));
    CHECK(out.points[1].intensity == 0.25f);
  }
  SECTION("translation") {
    auto out = transform_cloud(Pose2(1, 0, 0), c);
    CHECK(out.points[0].x == Catch::Approx(1.0));
    CHECK(out.points[0].y == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("90 degree rotation") {
    auto out = transform_cloud(Pose2(0, 0, kPi / 2), c);
    CHECK(out.points[1].x == Catch::Approx(0.0).margin(1e-12));
    CHECK(out.points[1].y == Catch::Approx(1.0));
  }
}

TEST_CASE("transform composition associativity on clouds") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(-10.0, 10.0);
  PointCloud2 c;
  for (int i = 0; i < 50; ++i) c.points.push_back({unif(rng), unif(rng), 1.0f});
  for (int t = 0; t < 50; ++t) {
    Pose2 a(unif(rng), unif(rng), unif(rng));
    Pose2 b(unif(rng), unif(rng), unif(rng));
    auto lhs = transform_cloud(compose(a, b), c);
    auto rhs = transform_cloud(a, transform_cloud(b, c));
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      CHECK(std::abs(lhs.points[i].x - rhs.points[i].x) < 1e-9);
      CHECK(std::abs(lhs.points[i].y - rhs.points[i].y) < 1e-9);
    }
  }
}

TEST_CASE("project_bev occupancy and log_count modes") {
  BevConfig cfg{256, 256, 0.5};

  SECTION("single point at origin lights only the center pixel") {
    PointCloud2 c;
    c.points.push_back({0.0, 0.0, 1.0f});
    auto img = project_bev(c, cfg);
    int lit = 0;
    for (float v : img.pixels) lit += v > 0.0f ? 1 : 0;
    CHECK(lit == 1);
    CHECK(img.at(128, 128) == 1.0f);
  }
  SECTION("empty cloud gives all-zero image") {
    auto img = project_bev(PointCloud2{}, cfg);
    for (float v : img.pixels) CHECK(v == 0.0f);
  }
  SECTION("log_count normalizes by the max count") {
    PointCloud2 c;
    for (int i = 0; i < 3; ++i) c.points.push_back({0.0, 0.0, 1.0f});
    c.points.push_back({5.0, 5.0, 1.0f});
    auto img = project_bev(c, cfg, BevMode::log_count);
    CHECK(img.at(128, 128) == Catch::Approx(1.0));
    auto [u, v] = world_to_pixel(5.0, 5.0, cfg);
    CHECK(img.at(static_cast<int>(u), static_cast<int>(v)) ==
          Catch::Approx(std::log(2.0) / std::log(4.0)));
  }
  SECTION("out-of-raster points are dropped") {
    PointCloud2 c;
    c.points.push_back({1000.0, 0.0, 1.0f});
    auto img = project_bev(c, cfg);
    for (float v : img.pixels) CHECK(v == 0.0f);
  }
  SECTION("permutation invariance") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(-60.0, 60.0);
    PointCloud2 c;
    for (int i = 0; i < 200; ++i) c.points.push_back({unif(rng), unif(rng), 1.0f});
    auto img1 = project_bev(c, cfg, BevMode::log_count);
    std::shuffle(c.points.begin(), c.points.end(), rng);
    auto img2 = project_bev(c, cfg, BevMode::log_count);
    CHECK(img1.pixels == img2.pixels);
  }
}

TEST_CASE("BevConfig validation") {
  CHECK_THROWS_AS((BevConfig{255, 256, 0.5}).check(), std::invalid_argument);
  CHECK_THROWS_AS((BevConfig{256, 256, 0.0}).check(), std::invalid_argument);
  CHECK_THROWS_AS((BevConfig{0, 256, 0.5}).check(), std::invalid_argument);
  CHECK_NOTHROW((BevConfig{64, 64, 0.25}).check());
}

TEST_CASE("resample_bev with identity is (bilinear) identity on the interior") {
  BevConfig cfg{64, 64, 0.5};
  BevImage img(cfg, Modality::radar);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> unif(0.0f, 1.0f);
  for (auto& p : img.pixels) p = unif(rng);
  auto out = resample_bev(img, Pose2::identity());
  for (int u = 1; u < 63; ++u)
    for (int v = 1; v < 63; ++v)
      CHECK(out.at(u, v) == Catch::Approx(img.at(u, v)).margin(1e-5));
}

TEST_CASE("resample_bev shifts content opposite to the sensor motion") {
  BevConfig cfg{64, 64, 0.5};
  BevImage img(cfg, Modality::radar);
  img.at(32, 32) = 1.0f;  // 0.25 m ahead-left of center is pixel (32,32) center
  // sensor moves +1 m in x: a world feature moves 2 px down in the new image
  auto out = resample_bev(img, Pose2(1.0, 0.0, 0.0));
  CHECK(out.at(34, 32) == Catch::Approx(1.0).margin(1e-6));
  CHECK(out.at(32, 32) == Catch::Approx(0.0).margin(1e-6));
}
