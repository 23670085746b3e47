#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ralf/evaluation.hpp"

using namespace ralf;

namespace {

GlobalDescriptor unit2(double x, double y) {
  const double n = std::hypot(x, y);
  return {{static_cast<float>(x / n), static_cast<float>(y / n)}};
}

}  // namespace

TEST_CASE("recall is monotone in k and exhaustive k reaches the ceiling") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  SubmapDatabase db;
  std::vector<EvalQuery> queries;
  for (int i = 0; i < 40; ++i) {
    const Pose2 pose(i * 10.0, 0.0, 0.0);
    const auto d = unit2(unif(rng), unif(rng));
    db.add({i, pose, d});
    // query descriptor is a noisy copy; gt pose matches record i
    EvalQuery q;
    q.descriptor = unit2(d.v[0] + 0.3 * unif(rng), d.v[1] + 0.3 * unif(rng));
    q.gt_pose = pose;
    queries.push_back(q);
  }
  auto report = recall_at_k(queries, db, {1, 5, 10, 40}, 3.0);
  REQUIRE(report.recall_at_k.size() == 4);
  for (std::size_t i = 1; i < report.recall_at_k.size(); ++i)
    CHECK(report.recall_at_k[i] >= report.recall_at_k[i - 1]);
  // records are >3 m apart, so only record i is correct for query i;
  // with k = size every query finds it
  CHECK(report.recall_at_k.back() == Catch::Approx(1.0));
  for (double r : report.recall_at_k) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("exact self-retrieval gives recall@1 = 1") {
  SubmapDatabase db;
  std::vector<EvalQuery> queries;
  for (int i = 0; i < 10; ++i) {
    const auto d = unit2(std::cos(0.6 * i), std::sin(0.6 * i));
    db.add({i, Pose2(i * 20.0, 0, 0), d});
    queries.push_back({d, Pose2(i * 20.0, 0, 0)});
  }
  auto report = recall_at_k(queries, db, {1}, 3.0);
  CHECK(report.recall_at_k[0] == Catch::Approx(1.0));
}

TEST_CASE("recall is zero when every record is far from the truth") {
  SubmapDatabase db;
  db.add({0, Pose2(1000.0, 0, 0), unit2(1, 0)});
  db.add({1, Pose2(2000.0, 0, 0), unit2(0, 1)});
  std::vector<EvalQuery> queries{{unit2(1, 0), Pose2(0, 0, 0)},
                                 {unit2(0, 1), Pose2(5, 0, 0)}};
  auto report = recall_at_k(queries, db, {1, 2}, 3.0);
  CHECK(report.recall_at_k[0] == 0.0);
  CHECK(report.recall_at_k[1] == 0.0);
}

TEST_CASE("recall counts a hit anywhere in the top k") {
  // query descriptor is nearest to a wrong record, second-nearest is right
  SubmapDatabase db;
  db.add({0, Pose2(1000.0, 0, 0), unit2(1.0, 0.0)});   // wrong place, rank 1
  db.add({1, Pose2(0.0, 0, 0), unit2(0.9, 0.4)});      // right place, rank 2
  std::vector<EvalQuery> queries{{unit2(1.0, 0.05), Pose2(0, 0, 0)}};
  auto r1 = recall_at_k(queries, db, {1}, 3.0);
  auto r2 = recall_at_k(queries, db, {2}, 3.0);
  CHECK(r1.recall_at_k[0] == 0.0);
  CHECK(r2.recall_at_k[0] == Catch::Approx(1.0));
}

TEST_CASE("recall input validation") {
  SubmapDatabase db;
  std::vector<EvalQuery> queries{{unit2(1, 0), Pose2()}};
  CHECK_THROWS_AS(recall_at_k(queries, db, {1}, 3.0), EmptyDatabase);
  db.add({0, Pose2(), unit2(1, 0)});
  CHECK_THROWS_AS(recall_at_k({}, db, {1}, 3.0), std::invalid_argument);
}

TEST_CASE("pose error hand cases") {
  SECTION("perfect predictions give zero error") {
    std::vector<std::pair<Pose2, Pose2>> pairs{
        {Pose2(1, 2, 0.3), Pose2(1, 2, 0.3)},
        {Pose2(-4, 0, -1.0), Pose2(-4, 0, -1.0)}};
    auto r = pose_errors(pairs);
    CHECK(r.mean_abs_dx == Catch::Approx(0.0).margin(1e-12));
    CHECK(r.mean_abs_dy == Catch::Approx(0.0).margin(1e-12));
    CHECK(r.mean_abs_dtheta == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("1 m x offset at zero heading") {
    auto r = pose_errors({{Pose2(1, 0, 0), Pose2(0, 0, 0)}});
    CHECK(r.mean_abs_dx == Catch::Approx(1.0));
    CHECK(r.mean_abs_dy == Catch::Approx(0.0).margin(1e-12));
    CHECK(r.mean_abs_dtheta == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("heading error wraps: 179 vs -179 degrees is 2 degrees") {
    const double d179 = 179.0 * kPi / 180.0;
    auto r = pose_errors({{Pose2(0, 0, d179), Pose2(0, 0, -d179)}});
    CHECK(r.mean_abs_dtheta == Catch::Approx(2.0).margin(1e-9));
  }
  SECTION("empty input throws") {
    CHECK_THROWS_AS(pose_errors({}), std::invalid_argument);
  }
}

TEST_CASE("pose errors are invariant under a common rigid motion") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unif(-5.0, 5.0);
  std::vector<std::pair<Pose2, Pose2>> pairs;
  for (int i = 0; i < 20; ++i) {
    const Pose2 gt(unif(rng), unif(rng), 0.3 * unif(rng));
    const Pose2 pred = compose(gt, Pose2(0.1 * unif(rng), 0.1 * unif(rng),
                                         0.02 * unif(rng)));
    pairs.push_back({pred, gt});
  }
  const Pose2 motion(12.0, -7.0, 1.1);
  std::vector<std::pair<Pose2, Pose2>> moved;
  for (const auto& [pred, gt] : pairs)
    moved.push_back({compose(motion, pred), compose(motion, gt)});
  auto a = pose_errors(pairs);
  auto b = pose_errors(moved);
  CHECK(a.mean_abs_dx == Catch::Approx(b.mean_abs_dx).margin(1e-9));
  CHECK(a.mean_abs_dy == Catch::Approx(b.mean_abs_dy).margin(1e-9));
  CHECK(a.mean_abs_dtheta == Catch::Approx(b.mean_abs_dtheta).margin(1e-9));
}

TEST_CASE("per-query records align with the means") {
  std::vector<std::pair<Pose2, Pose2>> pairs{
      {Pose2(1, 0, 0), Pose2(0, 0, 0)},
      {Pose2(0, 3, 0), Pose2(0, 0, 0)}};
  auto r = pose_errors(pairs);
  REQUIRE(r.per_query.size() == 2);
  CHECK(r.mean_abs_dx == Catch::Approx((r.per_query[0].dx + r.per_query[1].dx) / 2));
  CHECK(r.mean_abs_dy == Catch::Approx((r.per_query[0].dy + r.per_query[1].dy) / 2));
}
