// handkin command-line entry point.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "handkin/pipeline.hpp"

namespace fs = std::filesystem;
using namespace handkin;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  int threads = 1;
};

RunConfig base_config(const Globals& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  validate(c);
  return c;
}

std::string out_path(const Globals& g, const std::string& given, const std::string& fallback) {
  if (!given.empty()) return given;
  return (fs::path(g.out_dir) / fallback).string();
}

void write_json(const std::string& path, const Json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

/// Report wrapper with the provenance block every artifact carries.
Json with_meta(Json body, const RunConfig& config, const Skeleton& skeleton, const std::string& tool) {
  Json j;
  j["meta"] = artifact_meta(config, skeleton, tool);
  j["config"] = config_to_json(config);
  for (auto& [k, v] : body.items()) j[k] = v;
  return j;
}

/// The checkpoint's config with command-line overrides. A --config file must agree on the skeleton.
RunConfig checkpoint_config(const Globals& g, const LoadedModel& model) {
  RunConfig c = model.config;
  if (!g.config_path.empty()) {
    const RunConfig given = load_config(g.config_path);
    if (load_skeleton(given).hash() != model.skeleton->hash()) {
      throw ValidationError("skeleton hash of " + g.config_path + " does not match the checkpoint");
    }
    c.eval = given.eval;
    c.data.estimate_noise = given.data.estimate_noise;
    c.seed = given.seed;
  }
  if (g.seed) c.seed = *g.seed;
  return c;
}

JointPositions right_hand_positions(const Json& j) {
  JointPositions p = positions_from_json(j.at("positions"));
  if (j.value("hand", std::string("right")) == "left") p = mirror_x(p);
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained hand pose estimation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Overrides the config seed");
  app.add_option("--out-dir", g.out_dir, "Directory for outputs");
  app.add_option("--threads", g.threads, "Worker threads (HANDKIN_DETERMINISTIC=1 forces 1)")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic records and sequences");
  std::optional<std::size_t> n_poses, n_sequences, seq_len;
  bool left_hand = false;
  gen->add_option("--n-poses", n_poses, "Training records");
  gen->add_option("--n-sequences", n_sequences, "Training sequences");
  gen->add_option("--seq-len", seq_len, "Frames per sequence");
  gen->add_flag("--left-hand", left_hand, "Store every record as a left hand");

  // fit-ik
  auto* fit = app.add_subcommand("fit-ik", "Fit pose parameters to 3D joint targets");
  std::string targets_path, fits_out, skeleton_path;
  std::optional<int> restarts;
  fit->add_option("--targets", targets_path, "JSONL with a positions field per line")->required()->check(CLI::ExistingFile);
  fit->add_option("--skeleton", skeleton_path, "Skeleton JSON (default: config skeleton)")->check(CLI::ExistingFile);
  fit->add_option("--restarts", restarts, "Random starts per target");
  fit->add_option("--out", fits_out, "Output JSONL (default: <out-dir>/fits.jsonl)");

  // extract-limits
  auto* lim = app.add_subcommand("extract-limits", "Derive angle and proportion limits from fits");
  std::string fits_path, limits_out;
  std::optional<double> percentile, pad;
  lim->add_option("--fits", fits_path, "fit-ik output")->required()->check(CLI::ExistingFile);
  lim->add_option("--skeleton", skeleton_path, "Skeleton JSON the fits were made with")->check(CLI::ExistingFile);
  lim->add_option("--percentile", percentile, "Lower percentile p; limits span [p, 100 - p]");
  lim->add_option("--pad", pad, "Widening as a fraction of the percentile range");
  lim->add_option("--out", limits_out, "Skeleton JSON (default: <out-dir>/skeleton_limits.json)");

  // train
  auto* trn = app.add_subcommand("train", "Train the denoiser, IK head and temporal encoder");
  std::string data_dir, resume;
  std::optional<std::size_t> epochs;
  trn->add_option("--data", data_dir, "gen-data output directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--epochs", epochs, "Overrides train.epochs");
  trn->add_option("--resume", resume, "Continue from a last.ckpt")->check(CLI::ExistingFile);

  // sample / eval / smooth
  std::string checkpoint, records_path, sample_out, alignment;
  auto* smp = app.add_subcommand("sample", "Sample poses for the features of each record");
  smp->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  smp->add_option("--records", records_path, "Records JSONL")->required()->check(CLI::ExistingFile);
  smp->add_option("--out", sample_out, "Output JSONL (default: <out-dir>/samples.jsonl)");

  auto* evl = app.add_subcommand("eval", "MPJPE and constraint violations of sampled poses");
  bool oracle = false;
  evl->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--records", records_path, "Records JSONL")->required()->check(CLI::ExistingFile);
  evl->add_option("--alignment", alignment, "none, root_centered or root_centered_scale_normalized");
  evl->add_flag("--ground-truth", oracle, "Score the ground truth instead of samples");

  auto* smo = app.add_subcommand("smooth", "Temporal smoothing of noisy per-frame estimates");
  smo->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  smo->add_option("--sequences", records_path, "Sequence records JSONL")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const int threads = effective_threads(g.threads);
    fs::create_directories(g.out_dir);

    if (gen->parsed()) {
      RunConfig c = base_config(g);
      if (n_poses) c.data.n_train = *n_poses;
      if (n_sequences) c.data.n_train_sequences = *n_sequences;
      if (seq_len) c.data.seq_len = *seq_len;
      if (left_hand) c.data.left_hand = true;
      validate(c);
      const GenDataSummary s = gen_data(c, g.out_dir);
      write_json(out_path(g, "", "config.json"), config_to_json(c));
      std::cout << "wrote " << s.files.size() << " files to " << g.out_dir << ", mean frame displacement "
                << s.mean_frame_displacement << " anchor lengths\n";
    } else if (fit->parsed()) {
      RunConfig c = base_config(g);
      if (!skeleton_path.empty()) c.skeleton = skeleton_path;
      if (restarts) c.ik_restarts = *restarts;
      validate(c);
      const Skeleton sk = load_skeleton(c);
      std::vector<JointPositions> targets;
      std::vector<std::size_t> ids;
      for (const Json& j : read_jsonl(targets_path)) {
        try {
          targets.push_back(right_hand_positions(j));
          ids.push_back(j.value("id", targets.size() - 1));
        } catch (const nlohmann::json::exception& e) {
          throw ValidationError(targets_path + ": " + e.what());
        }
      }
      const std::vector<FitResult> fits = fit_targets(targets, sk, c, mix_seed(c.seed, fnv1a64("fit-ik")), threads);
      std::vector<Json> lines;
      std::size_t converged = 0;
      for (std::size_t i = 0; i < fits.size(); ++i) {
        Json j = fit_to_json(fits[i], ids[i]);
        j["config_hash"] = config_hash(c);
        j["skeleton_hash"] = hex64(sk.hash());
        lines.push_back(std::move(j));
        converged += fits[i].converged;
      }
      const std::string out = out_path(g, fits_out, "fits.jsonl");
      write_jsonl(out, lines);
      write_json(out_path(g, "", "config.json"), config_to_json(c));
      std::cout << "fitted " << fits.size() << " targets, " << converged << " converged -> " << out << "\n";
    } else if (lim->parsed()) {
      RunConfig c = base_config(g);
      if (!skeleton_path.empty()) c.skeleton = skeleton_path;
      if (percentile) c.limits.percentile = *percentile;
      if (pad) c.limits.pad = *pad;
      validate(c);
      const Skeleton sk = load_skeleton(c);
      const std::string expected = hex64(sk.hash());
      std::vector<FitResult> fits;
      for (const Json& j : read_jsonl(fits_path)) {
        if (j.contains("skeleton_hash") && j.at("skeleton_hash") != expected) {
          throw ValidationError(fits_path + ": fits were made with another skeleton");
        }
        fits.push_back(fit_from_json(j, sk));
      }
      const LimitStats stats = extract_limits(fits, sk, c.limits);
      const std::string out = out_path(g, limits_out, "skeleton_limits.json");
      write_json(out, skeleton_to_json(stats.skeleton));
      const std::string stats_path = (fs::path(out).parent_path() / "limit_stats.json").string();
      write_json(stats_path, with_meta(limit_stats_to_json(stats), c, sk, "extract-limits"));
      std::cout << "limits from " << fits.size() << " fits -> " << out << "\n";
    } else if (trn->parsed()) {
      RunConfig c = base_config(g);
      if (epochs) c.train.epochs = *epochs;
      validate(c);
      const Skeleton sk = load_skeleton(c);
      const TrainData data = load_train_data(data_dir, sk);
      const TrainResult r = train(c, sk, data, g.out_dir, resume.empty() ? std::nullopt : std::optional<std::string>(resume), &std::cerr);
      std::cout << "best epoch " << r.best_epoch << " val " << r.best_val << " -> " << r.best_checkpoint << "\n";
    } else if (smp->parsed() || evl->parsed()) {
      const LoadedModel model = load_model(checkpoint);
      RunConfig c = checkpoint_config(g, model);
      if (!alignment.empty()) c.eval.alignment = alignment;
      validate(c);
      const Skeleton& sk = *model.skeleton;
      const std::vector<DatasetRecord> records = load_records(records_path, sk);
      const Schedule schedule = respace(make_schedule(c.diffusion), c.diffusion.sample_steps);
      const std::uint64_t seed = mix_seed(c.seed, fnv1a64("sample"));
      std::vector<Prediction> preds;
      if (oracle) {
        for (const DatasetRecord& r : records) {
          Prediction p;
          p.params = r.params;
          p.params.root_offset.setZero();
          p.params.anchor_length = 1.0;
          p.positions = unflatten_positions(normalized_target(r));
          preds.push_back(std::move(p));
        }
      } else {
        preds = sample_predictions(*model.models, c, schedule, records, seed, threads);
      }
      if (smp->parsed()) {
        std::vector<Json> lines;
        for (std::size_t i = 0; i < preds.size(); ++i) {
          lines.push_back(Json{{"id", records[i].id},
                               {"params", pose_to_json(preds[i].params)},
                               {"positions", positions_to_json(denormalize(preds[i].positions, records[i]))},
                               {"config_hash", config_hash(c)},
                               {"skeleton_hash", hex64(sk.hash())}});
        }
        const std::string out = out_path(g, sample_out, "samples.jsonl");
        write_jsonl(out, lines);
        std::cout << "sampled " << preds.size() << " poses -> " << out << "\n";
      } else {
        const EvalReport rep = evaluate(sk, preds, records, parse_alignment(c.eval.alignment),
                                        model.mean_pose.size() ? std::optional<Eigen::VectorXd>(model.mean_pose) : std::nullopt);
        write_json(out_path(g, "", "eval.json"), with_meta(eval_report_to_json(rep), c, sk, "eval"));
        write_text_atomic(out_path(g, "", "eval_records.csv"), eval_records_csv(rep, records));
        write_text_atomic(out_path(g, "", "eval_joints.csv"), eval_joints_csv(rep));
        std::cout << "MPJPE mean " << rep.mpjpe_mean << " mm, median " << rep.mpjpe_median << " mm";
        if (rep.baseline_mean) std::cout << ", mean-pose baseline " << *rep.baseline_mean << " mm";
        std::cout << ", violations " << rep.violations << "\n";
      }
      write_json(out_path(g, "", "config.json"), config_to_json(c));
    } else if (smo->parsed()) {
      const LoadedModel model = load_model(checkpoint);
      const RunConfig c = checkpoint_config(g, model);
      const Skeleton& sk = *model.skeleton;
      const auto sequences = group_sequences(load_records(records_path, sk));
      const SmoothReport rep = smooth_sequences(*model.models, c, sequences, mix_seed(c.seed, fnv1a64("smooth")), threads);
      write_json(out_path(g, "", "smooth.json"), with_meta(smooth_report_to_json(rep), c, sk, "smooth"));
      write_text_atomic(out_path(g, "", "smooth_frames.csv"), smooth_frames_csv(rep));
      write_json(out_path(g, "", "config.json"), config_to_json(c));
      std::cout << "jitter raw " << rep.raw_jitter << " mm, smoothed " << rep.smoothed_jitter << " mm over "
                << rep.sequences.size() << " sequences\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
