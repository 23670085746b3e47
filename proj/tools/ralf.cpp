// Command-line front end: dataset synthesis, training, map building,
// localization, evaluation and plotting.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ralf/pipeline.hpp"
#include "ralf/viz.hpp"

namespace {

using Model = ralf::RalfModel<float>;

std::uint64_t resolve_seed(std::uint64_t cfg_seed) {
  if (const char* env = std::getenv("RALF_SEED")) return std::stoull(env);
  return cfg_seed;
}

ralf::TrainConfig resolve_config(const std::string& preset,
                                 const std::string& config_path) {
  ralf::TrainConfig base;
  if (preset == "desk") base = ralf::TrainConfig::desk();
  else if (preset != "full")
    throw std::invalid_argument("unknown preset: " + preset);
  if (config_path.empty()) return base;
  std::ifstream f(config_path);
  if (!f) throw std::invalid_argument("cannot open config: " + config_path);
  return ralf::TrainConfig::from_json(nlohmann::json::parse(f), base);
}

/// Checkpoint config if embedded; otherwise the preset/file fallback.
ralf::TrainConfig config_for_checkpoint(const std::string& ckpt,
                                        const std::string& preset,
                                        const std::string& config_path) {
  if (!config_path.empty() || preset != "full") {
    auto cfg = resolve_config(preset, config_path);
    return cfg;
  }
  if (auto cfg = ralf::checkpoint_train_config(ckpt)) return *cfg;
  return ralf::TrainConfig();
}

void cmd_synth_world(const ralf::SynthDatasetSpec& spec, const std::string& out) {
  ralf::write_synth_dataset(out, spec);
  std::cout << "wrote " << spec.n_frames << " frames to " << out << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"radar-in-lidar-map localization pipeline"};
  app.require_subcommand(1);

  // --- synth-world -----------------------------------------------------
  ralf::SynthDatasetSpec spec;
  std::string synth_out;
  int bev_size = 256;
  auto* synth = app.add_subcommand("synth-world", "generate a synthetic dataset");
  synth->add_option("--seed", spec.world_seed, "world geometry seed");
  synth->add_option("--traj-seed", spec.traj_seed, "trajectory seed");
  synth->add_option("--noise-seed", spec.noise_seed, "sensor noise seed");
  synth->add_option("--extent", spec.extent, "world side length, meters");
  synth->add_option("--frames", spec.n_frames, "number of frames");
  synth->add_option("--step", spec.step, "meters between frames");
  synth->add_option("--walls", spec.n_walls, "wall count");
  synth->add_option("--poles", spec.n_poles, "pole count");
  synth->add_option("--bev-size", bev_size, "BEV raster side, pixels");
  synth->add_option("--resolution", spec.bev.resolution, "meters per pixel");
  bool no_noise = false;
  synth->add_flag("--no-noise", no_noise, "disable all sensor noise");
  synth->add_option("--out", synth_out, "output directory")->required();

  // --- train ------------------------------------------------------------
  std::vector<std::string> train_data;
  std::string train_out, train_config, train_preset = "full";
  long opt_steps = -1;
  double opt_lr = -1.0;
  int opt_batch = -1;
  std::int64_t opt_seed = -1;
  std::string opt_encoder;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", train_data, "dataset directory (repeatable)")
      ->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--config", train_config, "JSON config file");
  train_cmd->add_option("--preset", train_preset, "full|desk");
  train_cmd->add_option("--steps", opt_steps, "override total_steps");
  train_cmd->add_option("--lr", opt_lr, "override learning rate");
  train_cmd->add_option("--batch-pairs", opt_batch, "override batch_pairs");
  train_cmd->add_option("--seed", opt_seed, "override seed");
  train_cmd->add_option("--encoder", opt_encoder, "override encoder size");

  // --- build-map ---------------------------------------------------------
  std::string bm_data, bm_ckpt, bm_out, bm_config, bm_preset = "full";
  auto* bm = app.add_subcommand("build-map", "build a submap descriptor database");
  bm->add_option("--data", bm_data, "map dataset directory")->required();
  bm->add_option("--checkpoint", bm_ckpt, "model checkpoint")->required();
  bm->add_option("--out", bm_out, "database directory")->required();
  bm->add_option("--config", bm_config, "JSON config file");
  bm->add_option("--preset", bm_preset, "full|desk");

  // --- localize ------------------------------------------------------------
  std::string lq_data, lq_db, lq_ckpt, lq_out;
  int lq_iters = -1;
  int lq_rounds = 3;
  bool lq_perturb = false;
  double lq_rot = 30.0, lq_trans = 5.0;
  std::int64_t lq_seed = -1;
  auto* lq = app.add_subcommand("localize", "localize queries against a map");
  lq->add_option("--queries", lq_data, "query dataset directory")->required();
  lq->add_option("--db", lq_db, "database directory")->required();
  lq->add_option("--checkpoint", lq_ckpt, "model checkpoint")->required();
  lq->add_option("--out", lq_out, "results JSON path")->required();
  lq->add_option("--iterations", lq_iters, "flow refinement iterations");
  lq->add_option("--rounds", lq_rounds,
                 "flow/solve passes with map re-rendering between them");
  double lq_min_score = 0.4;
  lq->add_option("--min-score", lq_min_score,
                 "reject poses whose verification score is below this");
  lq->add_flag("--perturb", lq_perturb,
               "start from a perturbed GT pose instead of the retrieved submap");
  lq->add_option("--perturb-rot", lq_rot, "max perturbation rotation, degrees");
  lq->add_option("--perturb-trans", lq_trans, "max perturbation translation, m");
  lq->add_option("--seed", lq_seed, "RNG seed");

  // --- evaluate --------------------------------------------------------------
  std::string ev_db, ev_queries, ev_ckpt, ev_out, ev_results;
  double ev_threshold = 3.0;
  std::string ev_k = "1,5,10";
  auto* ev = app.add_subcommand("evaluate", "retrieval and pose-error metrics");
  ev->add_option("--db", ev_db, "database directory")->required();
  ev->add_option("--queries", ev_queries, "query dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--threshold", ev_threshold, "recall distance threshold, m");
  ev->add_option("--k", ev_k, "comma-separated k values");
  ev->add_option("--results", ev_results, "localize results JSON for pose errors");
  ev->add_option("--out", ev_out, "report directory")->required();

  // --- plot -------------------------------------------------------------------
  std::string pl_queries, pl_db, pl_ckpt, pl_out;
  int pl_query_id = 0, pl_iters = -1;
  auto* pl = app.add_subcommand("plot", "flow and overlay images for one query");
  pl->add_option("--queries", pl_queries, "query dataset directory")->required();
  pl->add_option("--db", pl_db, "database directory")->required();
  pl->add_option("--checkpoint", pl_ckpt, "model checkpoint")->required();
  pl->add_option("--query-id", pl_query_id, "query frame id");
  pl->add_option("--iterations", pl_iters, "flow refinement iterations");
  pl->add_option("--out", pl_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    if (no_noise) spec.noise = {};
    if (bev_size <= 0 || bev_size % 2 != 0)
      throw std::invalid_argument("--bev-size must be positive and even");
    spec.bev.height = spec.bev.width = bev_size;
    spec.world_seed = resolve_seed(spec.world_seed);
    cmd_synth_world(spec, synth_out);
    return 0;
  }

  if (train_cmd->parsed()) {
    auto cfg = resolve_config(train_preset, train_config);
    if (opt_steps > 0) cfg.total_steps = opt_steps;
    if (opt_lr > 0.0) cfg.lr = opt_lr;
    if (opt_batch > 0) cfg.batch_pairs = opt_batch;
    if (opt_seed >= 0) cfg.seed = static_cast<std::uint64_t>(opt_seed);
    if (!opt_encoder.empty()) cfg.encoder = opt_encoder;
    cfg.seed = resolve_seed(cfg.seed);
    cfg.check();
    std::vector<ralf::SceneDataset> datasets;
    for (const auto& dir : train_data)
      datasets.push_back(
          ralf::load_dataset(dir, ralf::dataset_bev_config(dir, cfg.bev)));
    const auto result = ralf::train<float>(datasets, cfg, train_out);
    std::cout << "first loss " << result.first_loss << ", last loss "
              << result.last_loss << "\ncheckpoint: "
              << result.checkpoint.string() << "\n";
    return 0;
  }

  if (bm->parsed()) {
    auto cfg = config_for_checkpoint(bm_ckpt, bm_preset, bm_config);
    auto model = Model::load(bm_ckpt);
    model.set_training(false);
    auto ds = ralf::load_dataset(bm_data, ralf::dataset_bev_config(bm_data, cfg.bev));
    const auto n = ralf::build_map(ds, model, cfg, bm_out);
    std::cout << "wrote " << n << " submaps to " << bm_out << "\n";
    return 0;
  }

  if (lq->parsed()) {
    auto cfg = config_for_checkpoint(lq_ckpt, "full", "");
    auto model = Model::load(lq_ckpt);
    model.set_training(false);
    auto map = ralf::load_map(lq_db, cfg.bev);
    auto queries = ralf::load_dataset(lq_data, map.bev);
    ralf::LocalizeOptions opt;
    opt.flow.iterations = lq_iters > 0 ? lq_iters : cfg.eval_iterations;
    opt.perturbed_init = lq_perturb;
    opt.refine_rounds = lq_rounds;
    opt.min_score = lq_min_score;
    opt.perturb = {lq_rot, lq_trans};
    opt.bev_mode = cfg.bev_mode;
    opt.seed = resolve_seed(lq_seed >= 0 ? static_cast<std::uint64_t>(lq_seed)
                                         : cfg.seed);
    opt.ransac.inlier_threshold = 1.5 * map.bev.resolution;
    const auto results = ralf::localize(queries, map, model, opt);
    std::ofstream out(lq_out);
    if (!out) throw ralf::DataError("cannot open output: " + lq_out);
    out << ralf::localize_results_json(results).dump(2) << "\n";
    int ok = 0;
    for (const auto& r : results) ok += r.ok ? 1 : 0;
    std::cout << ok << "/" << results.size() << " queries localized\n";
    return 0;
  }

  if (ev->parsed()) {
    auto cfg = config_for_checkpoint(ev_ckpt, "full", "");
    auto model = Model::load(ev_ckpt);
    model.set_training(false);
    auto map = ralf::load_map(ev_db, cfg.bev);
    auto queries = ralf::load_dataset(ev_queries, map.bev);

    std::vector<int> ks;
    {
      std::stringstream ss(ev_k);
      std::string tok;
      while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
      if (ks.empty()) throw std::invalid_argument("--k must not be empty");
    }
    std::vector<ralf::EvalQuery> eval_queries;
    for (const auto& f : queries.frames)
      eval_queries.push_back({model.describe_one(f.radar), f.pose});
    const auto recall = ralf::recall_at_k(eval_queries, map.db, ks, ev_threshold);

    std::filesystem::create_directories(ev_out);
    nlohmann::json report{{"distance_threshold", recall.distance_threshold},
                          {"k_values", recall.k_values},
                          {"recall_at_k", recall.recall_at_k}};

    if (!ev_results.empty()) {
      std::ifstream rf(ev_results);
      if (!rf) throw ralf::DataError("cannot open results: " + ev_results);
      nlohmann::json res = nlohmann::json::parse(rf);
      std::vector<std::pair<ralf::Pose2, ralf::Pose2>> pairs;
      int failures = 0;
      for (const auto& r : res) {
        if (!r.value("ok", false)) { ++failures; continue; }
        const int qid = r.at("query_id");
        const ralf::Frame* frame = nullptr;
        for (const auto& f : queries.frames)
          if (f.id == qid) frame = &f;
        if (!frame) throw ralf::DataError("result query_id not in queries");
        const auto& tp = r.at("T_pred");
        pairs.push_back({ralf::Pose2(tp.at("x"), tp.at("y"), tp.at("theta")),
                         frame->pose});
      }
      if (!pairs.empty()) {
        const auto pe = ralf::pose_errors(pairs);
        report["pose_errors"] = {{"mean_abs_dx", pe.mean_abs_dx},
                                 {"mean_abs_dy", pe.mean_abs_dy},
                                 {"mean_abs_dtheta_deg", pe.mean_abs_dtheta},
                                 {"n_evaluated", pairs.size()},
                                 {"n_failed", failures}};
      }
    }

    {
      std::ofstream jf(std::filesystem::path(ev_out) / "report.json");
      jf << report.dump(2) << "\n";
      std::ofstream cf(std::filesystem::path(ev_out) / "recall.csv");
      cf << "k,recall\n";
      for (std::size_t i = 0; i < ks.size(); ++i)
        cf << recall.k_values[i] << "," << recall.recall_at_k[i] << "\n";
    }
    ralf::viz::write_recall_curve_png(
        std::filesystem::path(ev_out) / "recall.png", recall.k_values,
        recall.recall_at_k);
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (pl->parsed()) {
    auto cfg = config_for_checkpoint(pl_ckpt, "full", "");
    auto model = Model::load(pl_ckpt);
    model.set_training(false);
    auto map = ralf::load_map(pl_db, cfg.bev);
    auto queries = ralf::load_dataset(pl_queries, map.bev);
    const ralf::Frame* frame = nullptr;
    for (const auto& f : queries.frames)
      if (f.id == pl_query_id) frame = &f;
    if (!frame) throw ralf::DataError("query id not found");

    const auto desc = model.describe_one(frame->radar);
    const auto& rec = map.db.query(desc);
    const ralf::BevImage* submap = nullptr;
    for (std::size_t i = 0; i < map.db.records().size(); ++i)
      if (map.db.records()[i].submap_id == rec.submap_id)
        submap = &map.submap_bevs[i];

    ralf::FlowLossConfig fcfg = cfg.flow;
    fcfg.iterations = pl_iters > 0 ? pl_iters : cfg.eval_iterations;
    const auto flow = model.predict_flow_final(*submap, frame->radar, fcfg);

    std::filesystem::create_directories(pl_out);
    const std::filesystem::path out(pl_out);
    ralf::viz::write_flow_png(out / "flow.png", flow);
    ralf::viz::write_overlay_png(out / "overlay_before.png", frame->radar, *submap);
    // mask the flow to occupied submap pixels before warping
    ralf::FlowMap masked = flow;
    for (int u = 0; u < map.bev.height; ++u)
      for (int v = 0; v < map.bev.width; ++v)
        if (submap->at(u, v) <= 0.0f) masked.valid[masked.index(u, v)] = 0;
    const auto warped = ralf::warp_image(*submap, masked);
    ralf::viz::write_overlay_png(out / "overlay_after.png", frame->radar, warped);
    std::cout << "retrieved submap " << rec.submap_id << "; plots in " << pl_out
              << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ralf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ralf::io::IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ralf::EmptyDatabase& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ralf::NoPositive& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ralf::NoNegative& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
