#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "ralf/pipeline.hpp"

using namespace ralf;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

SynthDatasetSpec small_spec() {
  SynthDatasetSpec spec;
  spec.world_seed = 5;
  spec.traj_seed = 6;
  spec.noise_seed = 7;
  spec.n_walls = 10;
  spec.n_poles = 20;
  spec.n_frames = 80;
  spec.bev = {64, 64, 0.5};
  return spec;
}

/// Shared on-disk dataset, generated once for the whole binary.
const std::filesystem::path& synth_dir() {
  static const std::filesystem::path dir = [] {
    auto d = temp_dir("ralf_pipe_data");
    write_synth_dataset(d, small_spec());
    return d;
  }();
  return dir;
}

TrainConfig micro_config() {
  TrainConfig cfg = TrainConfig::desk();
  cfg.total_steps = 2;
  cfg.batch_pairs = 2;
  cfg.flow_pairs = 1;
  cfg.log_every = 1;
  cfg.seed = 11;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("train config JSON round trip") {
  TrainConfig cfg = TrainConfig::desk();
  cfg.lr = 1e-3;
  cfg.seed = 99;
  cfg.triplet.tau_n = 42.0;
  auto back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.encoder == "small");
  CHECK(back.lr == cfg.lr);
  CHECK(back.seed == cfg.seed);
  CHECK(back.triplet.tau_n == 42.0);
  CHECK(back.bev.height == 64);
  CHECK(back.flow.iterations == cfg.flow.iterations);
}

TEST_CASE("train config JSON validation") {
  SECTION("unknown keys are rejected") {
    CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", 0.1}}),
                    std::invalid_argument);
  }
  SECTION("preset selects the desk configuration") {
    auto cfg = TrainConfig::from_json({{"preset", "desk"}});
    CHECK(cfg.encoder == "small");
    CHECK(cfg.bev.height == 64);
    auto tuned = TrainConfig::from_json({{"preset", "desk"}, {"lr", 0.01}});
    CHECK(tuned.lr == 0.01);
  }
  SECTION("bad values are rejected") {
    CHECK_THROWS_AS(TrainConfig::from_json({{"bev_mode", "polar"}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json({{"lr", -1.0}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json({{"encoder", "huge"}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json({{"preset", "server"}}),
                    std::invalid_argument);
  }
}

TEST_CASE("synthetic dataset writes and loads back") {
  const auto& dir = synth_dir();
  const auto bev = dataset_bev_config(dir, BevConfig{256, 256, 0.5});
  CHECK(bev.height == 64);
  CHECK(bev.resolution == 0.5);
  auto ds = load_dataset(dir, bev);
  CHECK(ds.frames.size() == 80);
  CHECK(!ds.map_cloud.points.empty());
  CHECK(ds.frames[0].radar.config.height == 64);
  CHECK(!ds.frames[0].lidar_cloud.points.empty());
  // frames are 1 m apart
  for (std::size_t i = 1; i < ds.frames.size(); ++i)
    CHECK(translation_distance(ds.frames[i - 1].pose, ds.frames[i].pose) ==
          Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("synthetic dataset generation is deterministic in its seeds") {
  auto d1 = temp_dir("ralf_pipe_det1");
  auto d2 = temp_dir("ralf_pipe_det2");
  auto d3 = temp_dir("ralf_pipe_det3");
  SynthDatasetSpec spec = small_spec();
  spec.n_frames = 10;
  write_synth_dataset(d1, spec);
  write_synth_dataset(d2, spec);
  CHECK(slurp(d1 / "poses.csv") == slurp(d2 / "poses.csv"));
  CHECK(slurp(d1 / "radar" / "0003.pgm") == slurp(d2 / "radar" / "0003.pgm"));
  spec.traj_seed += 1;
  write_synth_dataset(d3, spec);
  CHECK(slurp(d1 / "poses.csv") != slurp(d3 / "poses.csv"));
}

TEST_CASE("load_dataset error handling") {
  auto empty = temp_dir("ralf_pipe_empty");
  CHECK_THROWS_AS(load_dataset(empty, BevConfig{64, 64, 0.5}), DataError);
  // wrong raster geometry vs the stored PGMs
  CHECK_THROWS_AS(load_dataset(synth_dir(), BevConfig{128, 128, 0.5}), DataError);
}

TEST_CASE("training requires mineable data") {
  TrainConfig cfg = micro_config();
  SceneDataset tiny;
  tiny.dir = "unused";
  for (int i = 0; i < 4; ++i) {
    Frame f;
    f.id = i;
    f.pose = Pose2(i * 1.0, 0, 0);  // everything within tau_n
    f.radar = BevImage(cfg.bev, Modality::radar);
    f.lidar_cloud.points.push_back({1.0, 0.0, 1.0f});
    tiny.frames.push_back(std::move(f));
  }
  tiny.map_cloud.points.push_back({1.0, 0.0, 1.0f});
  CHECK_THROWS_AS(train({tiny}, cfg, temp_dir("ralf_pipe_nomine")), DataError);
  CHECK_THROWS_AS(train({}, cfg, temp_dir("ralf_pipe_nodata")), DataError);
}

TEST_CASE("a single training step produces finite losses and updates weights") {
  auto ds = load_dataset(synth_dir(), BevConfig{64, 64, 0.5});
  TrainConfig cfg = micro_config();
  cfg.total_steps = 1;
  auto out = temp_dir("ralf_pipe_train1");
  auto result = train({ds}, cfg, out);
  CHECK(std::isfinite(result.first_loss));
  CHECK(result.first_loss > 0.0);
  CHECK(std::filesystem::exists(result.checkpoint));
  CHECK(std::filesystem::exists(out / "train_log.csv"));

  // weights moved away from the at-init model
  RalfModel<float> fresh(cfg.encoder_config(), cfg.seed);
  fresh.set_training(false);
  auto trained = RalfModel<float>::load(result.checkpoint);
  trained.set_training(false);
  auto d_fresh = fresh.describe_one(ds.frames[0].radar);
  auto d_trained = trained.describe_one(ds.frames[0].radar);
  bool differs = false;
  for (std::size_t i = 0; i < d_fresh.v.size(); ++i)
    differs = differs || d_fresh.v[i] != d_trained.v[i];
  CHECK(differs);

  // the embedded config round-trips through the checkpoint
  auto embedded = checkpoint_train_config(result.checkpoint);
  REQUIRE(embedded.has_value());
  CHECK(embedded->encoder == "small");
  CHECK(embedded->total_steps == 1);
  CHECK(embedded->seed == cfg.seed);
}

TEST_CASE("training is deterministic given the seed") {
  auto ds = load_dataset(synth_dir(), BevConfig{64, 64, 0.5});
  TrainConfig cfg = micro_config();
  cfg.total_steps = 1;
  auto r1 = train({ds}, cfg, temp_dir("ralf_pipe_seed_a"));
  auto r2 = train({ds}, cfg, temp_dir("ralf_pipe_seed_b"));
  CHECK(r1.first_loss == r2.first_loss);
  cfg.seed += 1;
  auto r3 = train({ds}, cfg, temp_dir("ralf_pipe_seed_c"));
  CHECK(r1.first_loss != r3.first_loss);
}

TEST_CASE("map building, loading and localization round trip") {
  auto ds = load_dataset(synth_dir(), BevConfig{64, 64, 0.5});
  TrainConfig cfg = micro_config();
  auto train_out = temp_dir("ralf_pipe_loc_train");
  auto result = train({ds}, cfg, train_out);
  auto model = RalfModel<float>::load(result.checkpoint);
  model.set_training(false);

  auto map_dir = temp_dir("ralf_pipe_map");
  const std::size_t n = build_map(ds, model, cfg, map_dir);
  CHECK(n >= 2);
  auto map = load_map(map_dir);
  CHECK(map.db.size() == n);
  CHECK(map.submap_bevs.size() == n);
  CHECK(map.bev.height == 64);
  CHECK(!map.map_cloud.points.empty());

  SceneDataset queries;
  queries.dir = ds.dir;
  queries.frames.assign(ds.frames.begin(), ds.frames.begin() + 2);

  LocalizeOptions opt;
  opt.flow.iterations = 3;
  opt.ransac.min_inliers = 2;
  opt.seed = 1;
  auto results = localize(queries, map, model, opt);
  REQUIRE(results.size() == 2);
  for (const auto& r : results) {
    CHECK(r.submap_id >= 0);
    if (r.ok) {
      CHECK(std::isfinite(r.pose.x));
      CHECK(r.inliers >= 2);
    } else {
      CHECK(!r.error.empty());
    }
  }

  SECTION("localization is deterministic given the seed") {
    auto again = localize(queries, map, model, opt);
    REQUIRE(again.size() == results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
      CHECK(again[i].ok == results[i].ok);
      CHECK(again[i].submap_id == results[i].submap_id);
      if (results[i].ok) {
        CHECK(again[i].pose.x == results[i].pose.x);
        CHECK(again[i].pose.y == results[i].pose.y);
        CHECK(again[i].pose.theta == results[i].pose.theta);
      }
    }
  }

  SECTION("implausible candidates are rejected, not reported") {
    LocalizeOptions strict = opt;
    strict.max_deviation_trans = 1e-9;  // nothing can move -> nothing passes
    strict.max_deviation_rot = 1e-9;
    strict.min_score = 0.0;
    auto rejected = localize(queries, map, model, strict);
    for (const auto& r : rejected) CHECK(!r.ok);
  }

  SECTION("verification threshold converts bad poses into failures") {
    LocalizeOptions picky = opt;
    picky.min_score = 1.1;  // impossible to reach
    auto rejected = localize(queries, map, model, picky);
    for (const auto& r : rejected) {
      CHECK(!r.ok);
      if (r.error == "pose verification score below threshold")
        CHECK(r.score <= 1.0);
    }
  }

  SECTION("results serialize to JSON") {
    auto j = localize_results_json(results);
    REQUIRE(j.size() == 2);
    CHECK(j[0].contains("query_id"));
    CHECK(j[0].contains(results[0].ok ? "T_pred" : "error"));
  }
}

TEST_CASE("localization failure modes") {
  RalfModel<float> model(EncoderConfig::small(), 1);
  model.set_training(false);
  BevConfig bev{64, 64, 0.5};

  SECTION("empty database") {
    MapPackage map;
    map.bev = bev;
    SceneDataset queries;
    Frame f;
    f.id = 0;
    f.radar = BevImage(bev, Modality::radar);
    queries.frames.push_back(std::move(f));
    CHECK_THROWS_AS(localize(queries, map, model, LocalizeOptions{}),
                    EmptyDatabase);
  }
  SECTION("all-zero rasters are flagged, not fatal") {
    MapPackage map;
    map.bev = bev;
    BevImage zero_lidar(bev, Modality::lidar);
    map.db.add({0, Pose2(), model.describe_one(zero_lidar)});
    map.submap_bevs.push_back(zero_lidar);
    SceneDataset queries;
    Frame f;
    f.id = 0;
    f.radar = BevImage(bev, Modality::radar);
    queries.frames.push_back(std::move(f));
    auto results = localize(queries, map, model, LocalizeOptions{});
    REQUIRE(results.size() == 1);
    CHECK(!results[0].ok);
    CHECK(results[0].n_correspondences == 0);
    CHECK(!results[0].error.empty());
  }
  SECTION("no query frames") {
    MapPackage map;
    map.bev = bev;
    map.db.add({0, Pose2(), model.describe_one(BevImage(bev, Modality::lidar))});
    CHECK_THROWS_AS(localize(SceneDataset{}, map, model, LocalizeOptions{}),
                    DataError);
  }
}
