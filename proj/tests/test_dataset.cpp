#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ralf/dataset.hpp"

using namespace ralf;

namespace {

/// Straight east-bound trajectory, one frame per meter, a few points each.
std::vector<Frame> straight_frames(int n, double step = 1.0) {
  std::vector<Frame> frames;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> unif(-5.0, 5.0);
  for (int i = 0; i < n; ++i) {
    Frame f;
    f.id = i;
    f.pose = Pose2(i * step, 0.0, 0.0);
    for (int p = 0; p < 10; ++p)
      f.lidar_cloud.points.push_back({unif(rng), unif(rng), 1.0f});
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace

TEST_CASE("straight 100 m trajectory at 2 m spacing gives 51 submaps") {
  auto frames = straight_frames(101);  // 0..100 m
  BevConfig cfg{64, 64, 0.5};
  auto submaps = build_submaps(frames, 2.0, 64.0, cfg);
  CHECK(submaps.size() == 51);
}

TEST_CASE("submap cloud reprojects to the original map coordinates") {
  auto frames = straight_frames(30);
  // give frames distinct headings so the submap frame is non-trivial
  for (auto& f : frames) f.pose = Pose2(f.pose.x, 0.5 * f.pose.x, 0.1 * f.id);
  BevConfig cfg{64, 64, 0.5};
  auto submaps = build_submaps(frames, 5.0, 40.0, cfg);
  REQUIRE(!submaps.empty());

  // map points for the distance cross-check
  std::vector<Point2> map_points;
  for (const auto& f : frames) {
    auto world = transform_cloud(f.pose, f.lidar_cloud);
    map_points.insert(map_points.end(), world.points.begin(), world.points.end());
  }
  for (const auto& sm : submaps) {
    auto world = transform_cloud(sm.pose, sm.cloud);
    for (const auto& p : world.points) {
      // nearest original map point must coincide
      double best = 1e9;
      for (const auto& m : map_points)
        best = std::min(best, std::hypot(m.x - p.x, m.y - p.y));
      CHECK(best < 1e-6);
      CHECK(std::hypot(p.x - sm.pose.x, p.y - sm.pose.y) <= 40.0 + 1e-9);
    }
  }
}

TEST_CASE("point exactly at a submap center is kept even for tiny radius") {
  std::vector<Frame> frames(1);
  frames[0].id = 0;
  frames[0].pose = Pose2(3.0, 4.0, 0.5);
  frames[0].lidar_cloud.points.push_back({0.0, 0.0, 1.0f});  // at the sensor
  auto submaps = build_submaps(frames, 2.0, 0.1, BevConfig{64, 64, 0.5});
  REQUIRE(submaps.size() == 1);
  CHECK(submaps[0].cloud.size() == 1);
}

TEST_CASE("build_submaps input validation") {
  CHECK_THROWS_AS(build_submaps({}, 2.0, 64.0, BevConfig{64, 64, 0.5}),
                  std::invalid_argument);
  auto frames = straight_frames(3);
  CHECK_THROWS_AS(build_submaps(frames, 0.0, 64.0, BevConfig{64, 64, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("sample_positive stays within tau_p and is uniform-eligible") {
  auto frames = straight_frames(20);
  TripletConfig cfg;  // tau_p = 2
  std::mt19937_64 rng(5);
  auto pose_of = [](const Frame& f) { return f.pose; };
  const Frame& anchor = frames[10];
  for (int i = 0; i < 50; ++i) {
    const Frame& pos =
        sample_positive(anchor.pose, frames, pose_of, cfg, rng, &anchor);
    CHECK(translation_distance(anchor.pose, pos.pose) <= cfg.tau_p);
    CHECK(&pos != &anchor);
  }
}

TEST_CASE("sample_positive throws when nothing is near") {
  std::vector<Frame> frames = straight_frames(2, 100.0);  // 100 m apart
  TripletConfig cfg;
  std::mt19937_64 rng(6);
  auto pose_of = [](const Frame& f) { return f.pose; };
  CHECK_THROWS_AS(
      sample_positive(frames[0].pose, frames, pose_of, cfg, rng, &frames[0]),
      NoPositive);
}

TEST_CASE("hardest negative mining") {
  TripletConfig cfg;  // tau_n = 80
  Pose2 anchor_pose(0, 0, 0);
  std::vector<float> anchor_desc{1.0f, 0.0f};
  std::vector<Pose2> poses{Pose2(1, 0, 0),    // too close
                           Pose2(100, 0, 0),  // eligible
                           Pose2(200, 0, 0)}; // eligible

  SECTION("argmin over eligible negatives") {
    std::vector<std::vector<float>> descs{{1.0f, 0.0f},   // near but ineligible
                                          {0.4f, 0.0f},   // d = 0.6
                                          {0.7f, 0.0f}};  // d = 0.3 -> hardest
    CHECK(mine_hardest_negative(anchor_desc, anchor_pose, descs, poses, cfg) == 2);
  }
  SECTION("single eligible negative wins regardless of distance") {
    std::vector<Pose2> p2{Pose2(1, 0, 0), Pose2(100, 0, 0), Pose2(2, 0, 0)};
    std::vector<std::vector<float>> descs{{1.0f, 0.0f}, {0.0f, 9.0f}, {1.0f, 0.0f}};
    CHECK(mine_hardest_negative(anchor_desc, anchor_pose, descs, p2, cfg) == 1);
  }
  SECTION("all samples within tau_n -> NoNegative") {
    std::vector<Pose2> p3{Pose2(1, 0, 0), Pose2(2, 0, 0)};
    std::vector<std::vector<float>> descs{{1.0f, 0.0f}, {0.0f, 1.0f}};
    CHECK_THROWS_AS(mine_hardest_negative(anchor_desc, anchor_pose, descs, p3, cfg),
                    NoNegative);
  }
}

TEST_CASE("perturb_pose stays inside the configured ranges") {
  AugmentSpec spec{30.0, 5.0};
  std::mt19937_64 rng(7);
  const Pose2 gt(10.0, -4.0, 0.8);
  double max_dt = 0.0, max_dxy = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const Pose2 p = perturb_pose(gt, spec, rng);
    const Pose2 rel = between(gt, p);
    CHECK(std::abs(rel.x) <= 5.0 + 1e-9);
    CHECK(std::abs(rel.y) <= 5.0 + 1e-9);
    CHECK(std::abs(rel.theta) <= 30.0 * kPi / 180.0 + 1e-9);
    max_dt = std::max(max_dt, std::abs(rel.theta));
    max_dxy = std::max(max_dxy, std::abs(rel.x));
  }
  // the ranges are actually exercised
  CHECK(max_dt > 25.0 * kPi / 180.0);
  CHECK(max_dxy > 4.0);
}

TEST_CASE("zero augmentation is the identity") {
  AugmentSpec spec{0.0, 0.0};
  std::mt19937_64 rng(8);
  const Pose2 gt(1.0, 2.0, 0.3);
  const Pose2 p = perturb_pose(gt, spec, rng);
  CHECK(p.x == Catch::Approx(gt.x));
  CHECK(p.y == Catch::Approx(gt.y));
  CHECK(p.theta == Catch::Approx(gt.theta));
}
