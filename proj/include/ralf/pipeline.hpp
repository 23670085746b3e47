#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ralf/dataset.hpp"
#include "ralf/evaluation.hpp"
#include "ralf/io.hpp"
#include "ralf/model.hpp"
#include "ralf/nn/optim.hpp"
#include "ralf/pose_solver.hpp"
#include "ralf/synthworld.hpp"

namespace ralf {

/// Problems with the data on disk (as opposed to configuration mistakes,
/// which raise std::invalid_argument).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string frame_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", id);
  return buf;
}

// ---------------------------------------------------------------------------
// On-disk dataset: poses.csv + lidar/NNNN.rlfc + radar/NNNN.pgm
// ---------------------------------------------------------------------------

struct SceneDataset {
  std::filesystem::path dir;
  std::vector<Frame> frames;
  PointCloud2 map_cloud;  // all LiDAR points in the map frame
};

/// Read the dataset's raster geometry from meta.json if present, otherwise
/// return the fallback.
inline BevConfig dataset_bev_config(const std::filesystem::path& dir,
                                    const BevConfig& fallback) {
  std::ifstream f(dir / "meta.json");
  if (!f) return fallback;
  nlohmann::json j = nlohmann::json::parse(f);
  if (!j.contains("bev")) return fallback;
  BevConfig cfg{j["bev"].value("height", fallback.height),
                j["bev"].value("width", fallback.width),
                j["bev"].value("resolution", fallback.resolution)};
  cfg.check();
  return cfg;
}

inline SceneDataset load_dataset(const std::filesystem::path& dir,
                                 const BevConfig& bev) {
  bev.check();
  if (!std::filesystem::exists(dir / "poses.csv"))
    throw DataError("no poses.csv in " + dir.string());
  SceneDataset ds;
  ds.dir = dir;
  const auto poses = io::read_poses_csv(dir / "poses.csv");
  if (poses.empty()) throw DataError("no frames in " + dir.string());
  for (const auto& rec : poses) {
    Frame f;
    f.id = rec.frame_id;
    f.pose = rec.pose;
    const std::string name = frame_name(rec.frame_id);
    f.radar = io::read_pgm16(dir / "radar" / (name + ".pgm"), bev.resolution,
                             Modality::radar);
    if (f.radar.config.height != bev.height ||
        f.radar.config.width != bev.width)
      throw DataError("radar raster size mismatch in " + dir.string());
    f.lidar_cloud = io::read_rlfc(dir / "lidar" / (name + ".rlfc"));
    const auto world = transform_cloud(f.pose, f.lidar_cloud);
    ds.map_cloud.points.insert(ds.map_cloud.points.end(), world.points.begin(),
                               world.points.end());
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

/// LiDAR map crop rasterized around an arbitrary pose.
inline BevImage render_local_bev(const PointCloud2& map_cloud, const Pose2& pose,
                                 const BevConfig& cfg,
                                 BevMode mode = BevMode::occupancy) {
  return project_bev(transform_cloud(inverse(pose), map_cloud), cfg, mode,
                     Modality::lidar);
}

// ---------------------------------------------------------------------------
// Synthetic dataset emission
// ---------------------------------------------------------------------------

struct SynthDatasetSpec {
  std::uint64_t world_seed = 0;
  std::uint64_t traj_seed = 0;   // vary to re-traverse the same world
  std::uint64_t noise_seed = 0;
  double extent = 200.0;
  int n_walls = 40;
  int n_poles = 60;
  int n_frames = 300;
  double step = 1.0;  // meters between frames
  synth::SensorNoise noise{0.02, 0.03, 0.1, 1.0, 0.002};
  BevConfig bev{256, 256, 0.5};
};

inline void write_synth_dataset(const std::filesystem::path& dir,
                                const SynthDatasetSpec& spec) {
  if (spec.n_frames <= 0) throw std::invalid_argument("n_frames must be positive");
  spec.bev.check();
  const synth::World world = synth::generate_world(
      {spec.world_seed, spec.extent, spec.n_walls, spec.n_poles, {}});
  const auto traj =
      synth::make_trajectory(spec.traj_seed, spec.extent, spec.n_frames, spec.step);
  std::filesystem::create_directories(dir / "lidar");
  std::filesystem::create_directories(dir / "radar");
  std::vector<io::PoseRecord> poses;
  for (int i = 0; i < spec.n_frames; ++i) {
    const Pose2& pose = traj[static_cast<std::size_t>(i)];
    const std::string name = frame_name(i);
    io::write_rlfc(dir / "lidar" / (name + ".rlfc"),
                   synth::render_lidar(world, pose, spec.noise, spec.noise_seed));
    io::write_pgm16(dir / "radar" / (name + ".pgm"),
                    synth::render_radar(world, pose, spec.noise, spec.bev,
                                        spec.noise_seed));
    poses.push_back({i, pose});
  }
  io::write_poses_csv(dir / "poses.csv", poses);
  nlohmann::json meta{{"bev",
                       {{"height", spec.bev.height},
                        {"width", spec.bev.width},
                        {"resolution", spec.bev.resolution}}},
                      {"world_seed", spec.world_seed},
                      {"traj_seed", spec.traj_seed},
                      {"noise_seed", spec.noise_seed},
                      {"extent", spec.extent},
                      {"n_frames", spec.n_frames}};
  std::ofstream mf(dir / "meta.json");
  mf << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string encoder = "full";  // "full" | "small"
  BevConfig bev{256, 256, 0.5};
  BevMode bev_mode = BevMode::occupancy;
  double lr = 5e-4;
  double warmup_frac = 0.1;
  long total_steps = 200000;
  int batch_pairs = 15;  // anchor/positive pairs per step
  int flow_pairs = 2;    // flow-supervised pairs per step
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  TripletConfig triplet;            // margin 0.5, tau_p 2, tau_n 80
  AugmentSpec augment{30.0, 5.0};   // initial-pose perturbation for flow
  AugmentSpec radar_augment{10.0, 1.0};  // image-space input augmentation
  FlowLossConfig flow{0.8, 8};
  int eval_iterations = 12;
  double submap_spacing = 2.0;
  double submap_radius = 64.0;
  std::uint64_t seed = 0;
  long log_every = 10;
  long checkpoint_every = 0;  // 0 = final checkpoint only

  void check() const {
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
      throw std::invalid_argument("warmup_frac must be in (0,1)");
    if (total_steps < 1 || batch_pairs < 2 || flow_pairs < 0)
      throw std::invalid_argument("bad step/batch counts");
    if (encoder != "full" && encoder != "small")
      throw std::invalid_argument("encoder must be 'full' or 'small'");
    if (submap_spacing <= 0.0 || submap_radius <= 0.0)
      throw std::invalid_argument("submap geometry must be positive");
    bev.check();
    triplet.check();
    augment.check();
    radar_augment.check();
    flow.check();
    if (eval_iterations < 1)
      throw std::invalid_argument("eval_iterations must be positive");
  }

  EncoderConfig encoder_config() const {
    return encoder == "full" ? EncoderConfig::full() : EncoderConfig::small();
  }

  /// Small preset sized for a single CPU core.
  static TrainConfig desk() {
    TrainConfig c;
    c.encoder = "small";
    c.bev = {64, 64, 0.5};
    c.total_steps = 600;
    c.batch_pairs = 6;
    c.flow_pairs = 1;
    c.triplet.tau_n = 30.0;
    c.radar_augment = {5.0, 0.5};
    c.flow.iterations = 4;
    c.eval_iterations = 6;
    c.submap_spacing = 3.0;
    c.submap_radius = 24.0;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"encoder", encoder},
            {"bev",
             {{"height", bev.height},
              {"width", bev.width},
              {"resolution", bev.resolution}}},
            {"bev_mode", bev_mode == BevMode::occupancy ? "occupancy" : "log_count"},
            {"lr", lr},
            {"warmup_frac", warmup_frac},
            {"total_steps", total_steps},
            {"batch_pairs", batch_pairs},
            {"flow_pairs", flow_pairs},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"triplet",
             {{"margin", triplet.margin},
              {"tau_p", triplet.tau_p},
              {"tau_n", triplet.tau_n}}},
            {"augment",
             {{"max_rot_deg", augment.max_rot_deg},
              {"max_trans", augment.max_trans}}},
            {"radar_augment",
             {{"max_rot_deg", radar_augment.max_rot_deg},
              {"max_trans", radar_augment.max_trans}}},
            {"flow", {{"gamma", flow.gamma}, {"iterations", flow.iterations}}},
            {"eval_iterations", eval_iterations},
            {"submap_spacing", submap_spacing},
            {"submap_radius", submap_radius},
            {"seed", seed},
            {"log_every", log_every},
            {"checkpoint_every", checkpoint_every}};
  }

  static TrainConfig from_json(const nlohmann::json& j);

  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base) {
    static const std::vector<std::string> known{
        "encoder", "bev", "bev_mode", "lr", "warmup_frac", "total_steps",
        "batch_pairs", "flow_pairs", "weight_decay", "clip_norm", "triplet",
        "augment", "radar_augment", "flow", "eval_iterations", "submap_spacing",
        "submap_radius", "seed", "log_every", "checkpoint_every", "preset"};
    for (const auto& [key, _] : j.items())
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw std::invalid_argument("unknown config key: " + key);
    if (j.contains("preset")) {
      const std::string p = j["preset"];
      if (p == "desk") base = desk();
      else if (p != "full") throw std::invalid_argument("unknown preset: " + p);
    }
    TrainConfig c = base;
    c.encoder = j.value("encoder", c.encoder);
    if (j.contains("bev")) {
      c.bev.height = j["bev"].value("height", c.bev.height);
      c.bev.width = j["bev"].value("width", c.bev.width);
      c.bev.resolution = j["bev"].value("resolution", c.bev.resolution);
    }
    if (j.contains("bev_mode")) {
      const std::string m = j["bev_mode"];
      if (m == "occupancy") c.bev_mode = BevMode::occupancy;
      else if (m == "log_count") c.bev_mode = BevMode::log_count;
      else throw std::invalid_argument("unknown bev_mode: " + m);
    }
    c.lr = j.value("lr", c.lr);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
    c.flow_pairs = j.value("flow_pairs", c.flow_pairs);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("triplet")) {
      c.triplet.margin = j["triplet"].value("margin", c.triplet.margin);
      c.triplet.tau_p = j["triplet"].value("tau_p", c.triplet.tau_p);
      c.triplet.tau_n = j["triplet"].value("tau_n", c.triplet.tau_n);
    }
    if (j.contains("augment")) {
      c.augment.max_rot_deg = j["augment"].value("max_rot_deg", c.augment.max_rot_deg);
      c.augment.max_trans = j["augment"].value("max_trans", c.augment.max_trans);
    }
    if (j.contains("radar_augment")) {
      c.radar_augment.max_rot_deg =
          j["radar_augment"].value("max_rot_deg", c.radar_augment.max_rot_deg);
      c.radar_augment.max_trans =
          j["radar_augment"].value("max_trans", c.radar_augment.max_trans);
    }
    if (j.contains("flow")) {
      c.flow.gamma = j["flow"].value("gamma", c.flow.gamma);
      c.flow.iterations = j["flow"].value("iterations", c.flow.iterations);
    }
    c.eval_iterations = j.value("eval_iterations", c.eval_iterations);
    c.submap_spacing = j.value("submap_spacing", c.submap_spacing);
    c.submap_radius = j.value("submap_radius", c.submap_radius);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.check();
    return c;
  }
};

inline TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  return from_json(j, TrainConfig());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::filesystem::path checkpoint;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

namespace detail {

/// Indices of frames that have at least one other frame within tau_p.
inline std::vector<int> anchor_candidates(const std::vector<Frame>& frames,
                                          const TripletConfig& cfg) {
  std::vector<int> out;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    for (std::size_t j = 0; j < frames.size(); ++j) {
      if (i == j) continue;
      if (translation_distance(frames[i].pose, frames[j].pose) <= cfg.tau_p) {
        out.push_back(static_cast<int>(i));
        break;
      }
    }
  }
  return out;
}

/// Greedy far-apart anchor selection so every anchor has an in-batch
/// negative beyond tau_n (any other anchor qualifies once >= 2 are picked).
inline std::vector<int> sample_anchors(const std::vector<Frame>& frames,
                                       const std::vector<int>& candidates,
                                       int batch_pairs, const TripletConfig& cfg,
                                       std::mt19937_64& rng) {
  std::vector<int> order = candidates;
  for (int attempt = 0; attempt < 20; ++attempt) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> picked;
    for (int idx : order) {
      bool far = true;
      for (int p : picked)
        if (translation_distance(frames[static_cast<std::size_t>(idx)].pose,
                                 frames[static_cast<std::size_t>(p)].pose) <=
            cfg.tau_n) {
          far = false;
          break;
        }
      if (far) picked.push_back(idx);
      if (static_cast<int>(picked.size()) == batch_pairs) break;
    }
    if (picked.size() >= 2) return picked;
  }
  throw DataError("dataset too small for mining: fewer than 2 places beyond tau_n");
}

}  // namespace detail

template <typename T = float>
TrainResult train(const std::vector<SceneDataset>& datasets,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.check();
  if (datasets.empty()) throw DataError("no training datasets");
  for (const auto& ds : datasets) {
    if (ds.frames.size() < 2) throw DataError("dataset has fewer than 2 frames");
    if (ds.frames[0].radar.config.height != cfg.bev.height ||
        ds.frames[0].radar.config.width != cfg.bev.width)
      throw DataError("dataset raster size does not match config");
  }

  // per-dataset anchor pools and precomputed LiDAR crops at frame poses
  std::vector<std::vector<int>> candidates;
  std::vector<std::vector<BevImage>> lidar_bevs;
  for (const auto& ds : datasets) {
    auto cand = detail::anchor_candidates(ds.frames, cfg.triplet);
    // verify two mineable places exist before spending any compute
    bool minable = false;
    for (std::size_t a = 0; a < cand.size() && !minable; ++a)
      for (std::size_t b = a + 1; b < cand.size() && !minable; ++b)
        if (translation_distance(
                ds.frames[static_cast<std::size_t>(cand[a])].pose,
                ds.frames[static_cast<std::size_t>(cand[b])].pose) >
            cfg.triplet.tau_n)
          minable = true;
    if (!minable)
      throw DataError(
          "dataset too small for mining: fewer than 2 places beyond tau_n");
    candidates.push_back(std::move(cand));
    std::vector<BevImage> bevs;
    bevs.reserve(ds.frames.size());
    for (const auto& f : ds.frames)
      bevs.push_back(render_local_bev(ds.map_cloud, f.pose, cfg.bev, cfg.bev_mode));
    lidar_bevs.push_back(std::move(bevs));
  }

  std::filesystem::create_directories(out_dir);
  RalfModel<T> model(cfg.encoder_config(), cfg.seed);
  model.set_training(true);
  auto pm = model.params();
  nn::AdamW<T> opt(pm, {cfg.lr, cfg.warmup_frac, cfg.total_steps},
                   cfg.weight_decay, cfg.clip_norm);

  std::ofstream log(out_dir / "train_log.csv");
  log << "step,lr,pr_loss,flow_loss,total_loss\n";
  log.precision(10);

  std::mt19937_64 rng(cfg.seed ^ 0x7472ULL);
  auto pose_of = [](const Frame& f) { return f.pose; };

  TrainResult result;
  for (long step = 0; step < cfg.total_steps; ++step) {
    const std::size_t d = static_cast<std::size_t>(step) % datasets.size();
    const auto& ds = datasets[d];
    const auto anchors_f =
        detail::sample_anchors(ds.frames, candidates[d], cfg.batch_pairs,
                               cfg.triplet, rng);
    const int B = static_cast<int>(anchors_f.size());

    // scene list: anchors then positives
    std::vector<int> scene_frames = anchors_f;
    for (int a : anchors_f) {
      const Frame& anchor = ds.frames[static_cast<std::size_t>(a)];
      const Frame& pos = sample_positive(anchor.pose, ds.frames, pose_of,
                                         cfg.triplet, rng, &anchor);
      scene_frames.push_back(static_cast<int>(&pos - ds.frames.data()));
    }

    std::vector<Pose2> poses;
    std::vector<BevImage> radar_aug;
    std::vector<const BevImage*> radar_ptrs, lidar_ptrs;
    for (int f : scene_frames) {
      const Frame& fr = ds.frames[static_cast<std::size_t>(f)];
      poses.push_back(fr.pose);
      const Pose2 jitter = between(
          fr.pose, perturb_pose(fr.pose, cfg.radar_augment, rng));
      radar_aug.push_back(resample_bev(fr.radar, jitter));
      lidar_ptrs.push_back(&lidar_bevs[d][static_cast<std::size_t>(f)]);
    }
    for (const auto& img : radar_aug) radar_ptrs.push_back(&img);

    auto r_desc = model.describe(model.encode_radar(bev_batch_to_tensor<T>(radar_ptrs)));
    auto l_desc = model.describe(model.encode_lidar(bev_batch_to_tensor<T>(lidar_ptrs)));
    std::vector<int> anchor_idx(static_cast<std::size_t>(B));
    std::vector<int> positive_idx(static_cast<std::size_t>(B));
    std::iota(anchor_idx.begin(), anchor_idx.end(), 0);
    std::iota(positive_idx.begin(), positive_idx.end(), B);
    auto pr = pr_loss(r_desc, l_desc, poses, anchor_idx, positive_idx, cfg.triplet);

    nn::Tensor<T> flow_term;
    for (int fp = 0; fp < cfg.flow_pairs; ++fp) {
      const Frame& fr = ds.frames[static_cast<std::size_t>(anchors_f[
          static_cast<std::size_t>(fp % B)])];
      const Pose2 t_init = perturb_pose(fr.pose, cfg.augment, rng);
      const BevImage lidar_init =
          render_local_bev(ds.map_cloud, t_init, cfg.bev, cfg.bev_mode);
      const FlowMap gt = gt_flow(ds.map_cloud, t_init, fr.pose, cfg.bev);
      bool any_valid = false;
      for (auto v : gt.valid) any_valid = any_valid || v;
      if (!any_valid) continue;
      auto preds = model.predict_flow(bev_to_tensor<T>(lidar_init),
                                      bev_to_tensor<T>(fr.radar), cfg.flow);
      auto term = flow_loss_t(preds, gt, cfg.flow);
      flow_term = flow_term.defined() ? add(flow_term, term) : term;
    }
    if (flow_term.defined() && cfg.flow_pairs > 1)
      flow_term = scale(flow_term, static_cast<T>(1.0 / cfg.flow_pairs));

    auto total = flow_term.defined() ? total_loss_t(pr, flow_term) : pr;
    total.backward();
    opt.step();
    pm.zero_grad();
    model.step = opt.step_count();

    const double pr_v = static_cast<double>(pr.data()[0]);
    const double fl_v =
        flow_term.defined() ? static_cast<double>(flow_term.data()[0]) : 0.0;
    const double tot_v = pr_v + fl_v;
    if (step == 0) result.first_loss = tot_v;
    result.last_loss = tot_v;
    if (cfg.log_every > 0 &&
        (step % cfg.log_every == 0 || step + 1 == cfg.total_steps))
      log << step << "," << opt.current_lr() << "," << pr_v << "," << fl_v
          << "," << tot_v << "\n" << std::flush;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 != cfg.total_steps)
      model.save(out_dir / ("checkpoint_" + std::to_string(step + 1) + ".rlfw"),
                 {{"train_config", cfg.to_json()}, {"last_loss", tot_v}});
  }

  model.set_training(false);
  result.checkpoint = out_dir / "checkpoint.rlfw";
  model.save(result.checkpoint, {{"train_config", cfg.to_json()},
                                 {"first_loss", result.first_loss},
                                 {"last_loss", result.last_loss}});
  return result;
}

/// Training configuration embedded in a checkpoint, if present.
inline std::optional<TrainConfig> checkpoint_train_config(
    const std::filesystem::path& path) {
  auto [manifest_str, blobs] = io::read_archive(path);
  (void)blobs;
  nlohmann::json manifest = nlohmann::json::parse(manifest_str);
  if (!manifest.contains("metrics") ||
      !manifest["metrics"].contains("train_config"))
    return std::nullopt;
  return TrainConfig::from_json(manifest["metrics"]["train_config"]);
}

// ---------------------------------------------------------------------------
// Map building and localization
// ---------------------------------------------------------------------------

struct MapPackage {
  SubmapDatabase db;
  std::vector<BevImage> submap_bevs;  // same order as db records
  PointCloud2 map_cloud;              // map frame
  BevConfig bev;
};

template <typename T = float>
std::size_t build_map(const SceneDataset& ds, const RalfModel<T>& model,
                      const TrainConfig& cfg,
                      const std::filesystem::path& out_dir) {
  cfg.check();
  const auto submaps = build_submaps(ds.frames, cfg.submap_spacing,
                                     cfg.submap_radius, cfg.bev, cfg.bev_mode);
  if (submaps.empty()) throw DataError("no submaps produced");
  SubmapDatabase db;
  std::filesystem::create_directories(out_dir / "submaps");
  for (const auto& sm : submaps) {
    db.add({sm.id, sm.pose, model.describe_one(sm.bev)});
    io::write_pgm16(out_dir / "submaps" / (frame_name(sm.id) + ".pgm"), sm.bev);
  }
  db.save(out_dir);
  io::write_rlfc(out_dir / "map.rlfc", ds.map_cloud);
  nlohmann::json meta{{"bev",
                       {{"height", cfg.bev.height},
                        {"width", cfg.bev.width},
                        {"resolution", cfg.bev.resolution}}},
                      {"submap_spacing", cfg.submap_spacing},
                      {"submap_radius", cfg.submap_radius}};
  std::ofstream mf(out_dir / "meta.json");
  mf << meta.dump(2) << "\n";
  return db.size();
}

inline MapPackage load_map(const std::filesystem::path& dir,
                           const BevConfig& fallback_bev = BevConfig()) {
  MapPackage map;
  map.bev = dataset_bev_config(dir, fallback_bev);
  map.db = SubmapDatabase::load(dir);
  for (const auto& rec : map.db.records())
    map.submap_bevs.push_back(
        io::read_pgm16(dir / "submaps" / (frame_name(rec.submap_id) + ".pgm"),
                       map.bev.resolution, Modality::lidar));
  map.map_cloud = io::read_rlfc(dir / "map.rlfc");
  return map;
}

struct LocalizeOptions {
  FlowLossConfig flow{0.8, 12};
  RansacConfig ransac;
  bool perturbed_init = false;  // start from a perturbed GT pose instead of
                                // the retrieved submap pose (metric eval)
  int refine_rounds = 3;  // total flow/solve passes; after each pass the map
                          // view is re-rendered at the refined pose so later
                          // passes only correct a small residual
  // initial-heading hypotheses, degrees; each is refined independently and
  // the pose whose re-rendered map view best overlaps the radar scan wins
  std::vector<double> init_rotations_deg{0.0, 12.0, -12.0, 24.0, -24.0};
  int polish_iterations = 8;  // point-to-point polish steps after the flow
                              // stage; 0 disables the polish
  double min_score = 0.4;  // reject poses whose match_score falls below this
  // candidates further than this from the initial pose are discarded before
  // scoring — the initialization error is bounded, so they cannot be right
  double max_deviation_trans = 8.0;    // meters
  double max_deviation_rot = 60.0;     // degrees
  AugmentSpec perturb{30.0, 5.0};
  std::uint64_t seed = 0;
  BevMode bev_mode = BevMode::occupancy;
};

namespace detail {

/// Uniform-grid nearest-neighbour index over a 2D point cloud.
class PointGrid {
 public:
  PointGrid(const PointCloud2& cloud, double cell)
      : cloud_(cloud), cell_(cell) {
    for (std::size_t i = 0; i < cloud.points.size(); ++i)
      cells_[key(cloud.points[i].x, cloud.points[i].y)].push_back(
          static_cast<int>(i));
  }

  /// Nearest point within `radius` of (x, y); NaNs when there is none.
  std::pair<double, double> nearest_point(double x, double y,
                                          double radius) const {
    const int i = nearest(x, y, radius);
    if (i < 0)
      return {std::numeric_limits<double>::quiet_NaN(),
              std::numeric_limits<double>::quiet_NaN()};
    const auto& p = cloud_.points[static_cast<std::size_t>(i)];
    return {p.x, p.y};
  }

  /// Index of the nearest point within `radius` of (x, y), or -1.
  int nearest(double x, double y, double radius) const {
    const int cu = static_cast<int>(std::floor(x / cell_));
    const int cv = static_cast<int>(std::floor(y / cell_));
    const int reach = static_cast<int>(std::ceil(radius / cell_));
    int best = -1;
    double best_d2 = radius * radius;
    for (int du = -reach; du <= reach; ++du)
      for (int dv = -reach; dv <= reach; ++dv) {
        const auto it = cells_.find(pack(cu + du, cv + dv));
        if (it == cells_.end()) continue;
        for (int i : it->second) {
          const auto& p = cloud_.points[static_cast<std::size_t>(i)];
          const double d2 = (p.x - x) * (p.x - x) + (p.y - y) * (p.y - y);
          if (d2 <= best_d2) {
            best_d2 = d2;
            best = i;
          }
        }
      }
    return best;
  }

 private:
  static std::int64_t pack(int u, int v) {
    return (static_cast<std::int64_t>(u) << 32) ^
           static_cast<std::uint32_t>(v);
  }
  std::int64_t key(double x, double y) const {
    return pack(static_cast<int>(std::floor(x / cell_)),
                static_cast<int>(std::floor(y / cell_)));
  }
  const PointCloud2& cloud_;
  double cell_;
  std::unordered_map<std::int64_t, std::vector<int>> cells_;
};

}  // namespace detail

/// Local point-to-point polish of a pose estimate against the map cloud:
/// radar-occupied pixel centers are matched to their nearest map point and a
/// closed-form rigid fit is applied, with the capture radius shrinking each
/// iteration. Cheap, and recovers the small residual that the dense-flow
/// stage cannot sense once the rasters are nearly aligned.
inline Pose2 icp_polish(const BevImage& radar, const Pose2& pose,
                        const detail::PointGrid& grid, const BevConfig& cfg,
                        int iterations = 8, double radius = 1.5,
                        float radar_thr = 0.35f) {
  std::vector<std::pair<double, double>> local;  // sensor-frame radar points
  for (int u = 0; u < radar.config.height; ++u)
    for (int v = 0; v < radar.config.width; ++v)
      if (radar.at(u, v) > radar_thr)
        local.push_back(pixel_to_world(u + 0.5, v + 0.5, cfg));
  Pose2 cur = pose;
  for (int it = 0; it < iterations; ++it) {
    const double r = radius - (radius - 0.5) * it / std::max(1, iterations - 1);
    CorrespondenceSet c;
    for (const auto& [lx, ly] : local) {
      const auto [wx, wy] = cur.apply(lx, ly);
      const auto [mx, my] = grid.nearest_point(wx, wy, r);
      if (std::isnan(mx)) continue;
      c.pairs.push_back({wx, wy, mx, my});
    }
    if (c.pairs.size() < 5) break;
    std::vector<int> idx(c.pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Pose2 delta = detail::fit_rigid(c, idx);
    cur = compose(delta, cur);
    if (std::hypot(delta.x, delta.y) < 1e-4 && std::abs(delta.theta) < 1e-5)
      break;
  }
  return cur;
}

/// Geometric verification of a pose hypothesis: the fraction of
/// radar-occupied pixel centers whose world position (under `pose`) has a
/// map point within `radius`. Tight enough to separate a correct pose from
/// a plausible-looking misalignment.
inline double match_score(const BevImage& radar, const Pose2& pose,
                          const detail::PointGrid& grid, const BevConfig& cfg,
                          double radius = 0.5, float radar_thr = 0.35f) {
  int hit = 0, n = 0;
  for (int u = 0; u < radar.config.height; ++u)
    for (int v = 0; v < radar.config.width; ++v) {
      if (radar.at(u, v) <= radar_thr) continue;
      ++n;
      const auto [lx, ly] = pixel_to_world(u + 0.5, v + 0.5, cfg);
      const auto [wx, wy] = pose.apply(lx, ly);
      if (grid.nearest(wx, wy, radius) >= 0) ++hit;
    }
  return n > 0 ? static_cast<double>(hit) / n : 0.0;
}

struct LocalizeResult {
  int query_id = 0;
  int submap_id = -1;
  double descriptor_distance = 0.0;
  Pose2 init_pose;  // pose the flow was estimated against
  Pose2 pose;       // predicted global pose (valid iff ok)
  int inliers = 0;
  int n_correspondences = 0;
  double score = 0.0;  // geometric verification score of the chosen pose
  bool ok = false;
  std::string error;
};

template <typename T = float>
std::vector<LocalizeResult> localize(const SceneDataset& queries,
                                     const MapPackage& map,
                                     const RalfModel<T>& model,
                                     const LocalizeOptions& opt) {
  if (map.db.empty()) throw EmptyDatabase();
  if (queries.frames.empty()) throw DataError("no query frames");
  const detail::PointGrid map_grid(map.map_cloud, 1.5);
  std::vector<LocalizeResult> results;
  for (const auto& frame : queries.frames) {
    LocalizeResult res;
    res.query_id = frame.id;
    const auto desc = model.describe_one(frame.radar);
    const auto& rec = map.db.query(desc);
    res.submap_id = rec.submap_id;
    res.descriptor_distance = descriptor_distance(desc, rec.descriptor);

    Pose2 t_init;
    const BevImage* lidar_bev = nullptr;
    BevImage rendered;
    if (opt.perturbed_init) {
      std::mt19937_64 rng(synth::detail::mix64(
          opt.seed ^ static_cast<std::uint64_t>(frame.id) * 0x9e37ULL));
      t_init = perturb_pose(frame.pose, opt.perturb, rng);
      rendered = render_local_bev(map.map_cloud, t_init, map.bev, opt.bev_mode);
      lidar_bev = &rendered;
    } else {
      t_init = rec.pose;
      for (std::size_t i = 0; i < map.db.records().size(); ++i)
        if (map.db.records()[i].submap_id == rec.submap_id)
          lidar_bev = &map.submap_bevs[i];
    }
    res.init_pose = t_init;

    const int rounds = std::max(1, opt.refine_rounds);
    const std::vector<double> offsets =
        opt.init_rotations_deg.empty() ? std::vector<double>{0.0}
                                       : opt.init_rotations_deg;
    LocalizeResult best = res;
    double best_score = -1.0;
    for (std::size_t h = 0; h < offsets.size(); ++h) {
      LocalizeResult cand = res;
      Pose2 t_cur{t_init.x, t_init.y,
                  t_init.theta + offsets[h] * kPi / 180.0};
      const BevImage* view = lidar_bev;
      BevImage view_storage;
      if (offsets[h] != 0.0) {
        view_storage =
            render_local_bev(map.map_cloud, t_cur, map.bev, opt.bev_mode);
        view = &view_storage;
      }
      for (int round = 0; round < rounds; ++round) {
        try {
          const FlowMap flow =
              model.predict_flow_final(*view, frame.radar, opt.flow);
          const auto corr = flow_to_correspondences(*view, flow, map.bev);
          cand.n_correspondences = static_cast<int>(corr.size());
          if (corr.size() < 2) throw InsufficientInliers();
          RansacConfig rc = opt.ransac;
          rc.rng_seed = opt.seed ^ static_cast<std::uint64_t>(frame.id) ^
                        (static_cast<std::uint64_t>(round) << 32) ^
                        (h * 0x9e3779b97f4a7c15ULL);
          auto [t_rel, inliers] = estimate_pose(corr, rc);
          cand.inliers = inliers;
          cand.pose = compose(t_cur, inverse(t_rel));
          cand.ok = true;
        } catch (const InsufficientInliers& e) {
          // keep the result of an earlier successful round, if any
          if (!cand.ok) cand.error = e.what();
          break;
        }
        if (round + 1 < rounds) {
          t_cur = cand.pose;
          view_storage =
              render_local_bev(map.map_cloud, t_cur, map.bev, opt.bev_mode);
          view = &view_storage;
        }
      }
      if (cand.ok) {
        if (opt.polish_iterations > 0)
          cand.pose = icp_polish(frame.radar, cand.pose, map_grid, map.bev,
                                 opt.polish_iterations);
        const Pose2 dev = between(res.init_pose, cand.pose);
        if (std::hypot(dev.x, dev.y) > opt.max_deviation_trans ||
            std::abs(dev.theta) > opt.max_deviation_rot * kPi / 180.0)
          continue;
        cand.score = match_score(frame.radar, cand.pose, map_grid, map.bev);
        if (cand.score > best_score) {
          best_score = cand.score;
          best = cand;
        }
      } else if (best_score < 0.0 && best.error.empty()) {
        best.error = cand.error;
      }
    }
    if (best.ok && best.score < opt.min_score) {
      best.ok = false;
      best.error = "pose verification score below threshold";
    }
    if (!best.ok && best.error.empty())
      best.error = "no plausible pose candidate";
    res = best;
    results.push_back(std::move(res));
  }
  return results;
}

inline nlohmann::json localize_results_json(
    const std::vector<LocalizeResult>& results) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json j{{"query_id", r.query_id},
                     {"submap_id", r.submap_id},
                     {"descriptor_distance", r.descriptor_distance},
                     {"inliers", r.inliers},
                     {"n_correspondences", r.n_correspondences},
                     {"score", r.score},
                     {"ok", r.ok}};
    if (r.ok)
      j["T_pred"] = {{"x", r.pose.x}, {"y", r.pose.y}, {"theta", r.pose.theta}};
    else
      j["error"] = r.error;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace ralf
