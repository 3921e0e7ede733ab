// Command-line front end: generate / train / eval / stream / bench, all
// driven by one JSON config with dotted-key overrides. Every run writes a
// stamp (resolved config, its hash, seeds, format versions) next to its
// outputs so results can be traced back to their exact settings.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <chrono>
#include <iostream>

#include <CLI11.hpp>

#include "octseg/core.hpp"
#include "octseg/io.hpp"
#include "octseg/metrics.hpp"
#include "octseg/network.hpp"
#include "octseg/pipeline.hpp"
#include "octseg/postprocess.hpp"
#include "octseg/preprocess.hpp"
#include "octseg/synthgen.hpp"
#include "octseg/training.hpp"

namespace octseg {
namespace {

constexpr char kToolVersion[] = "1.0.0";

// ---------------------------------------------------------------------------
// Application config
// ---------------------------------------------------------------------------

PhantomConfig in_vivo_defaults() {
  PhantomConfig c;
  c.seed = 1234;
  c.speckle_strength = 0.30;
  c.drift_amplitude_px = 10.0;
  c.attenuation_per_px = 0.0025;
  c.layer_contrast = 0.85;
  return c;
}

PhantomConfig ex_vivo_defaults() {
  PhantomConfig c;
  c.seed = 5678;
  c.speckle_strength = 0.15;
  c.drift_amplitude_px = 4.0;
  c.attenuation_per_px = 0.0015;
  c.layer_contrast = 1.0;
  return c;
}

struct AppConfig {
  NetworkConfig network = NetworkConfig::tiny();
  TrainConfig train;
  LossWeights loss;
  PipelineConfig pipeline;
  PhantomConfig phantom_in_vivo = in_vivo_defaults();
  PhantomConfig phantom_ex_vivo = ex_vivo_defaults();
  DatasetSpec dataset;
};

void to_json(nlohmann::json& j, const AppConfig& c) {
  j = {{"network", c.network},
       {"train", c.train},
       {"loss", c.loss},
       {"pipeline", c.pipeline},
       {"phantom_in_vivo", c.phantom_in_vivo},
       {"phantom_ex_vivo", c.phantom_ex_vivo},
       {"dataset", c.dataset}};
}

void from_json(const nlohmann::json& j, AppConfig& c) {
  c = AppConfig{};
  if (j.contains("network")) j.at("network").get_to(c.network);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("pipeline")) j.at("pipeline").get_to(c.pipeline);
  if (j.contains("phantom_in_vivo")) j.at("phantom_in_vivo").get_to(c.phantom_in_vivo);
  if (j.contains("phantom_ex_vivo")) j.at("phantom_ex_vivo").get_to(c.phantom_ex_vivo);
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
}

// ---------------------------------------------------------------------------
// Config resolution: defaults <- --config file <- --set overrides
// ---------------------------------------------------------------------------

// Keys that from_json understands but to_json does not emit.
bool is_virtual_key(const std::string& dotted) {
  return dotted == "network.preset" || dotted == "dataset.subset";
}

void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects key=value, got: " + assignment);
  const std::string dotted = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  std::vector<std::string> keys;
  size_t pos = 0;
  while (pos <= dotted.size()) {
    const size_t dot = dotted.find('.', pos);
    keys.push_back(dotted.substr(pos, dot == std::string::npos ? dot : dot - pos));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }

  nlohmann::json* node = &cfg;
  for (size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object())
      throw UsageError("unknown config key: " + dotted);
    node = &(*node)[keys[i]];
  }
  if (!node->contains(keys.back()) && !is_virtual_key(dotted))
    throw UsageError("unknown config key: " + dotted);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // unquoted strings
  }
  (*node)[keys.back()] = value;
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required) {
  cmd->add_option("--config", a.config_path, "JSON config file (defaults used if omitted)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "override a config key, e.g. --set train.epochs=30")
      ->type_name("KEY=VALUE");
  auto* out = cmd->add_option("--out", a.out_dir, "output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", a.seed, "master seed override");
}

// Resolve defaults -> file -> --set assignments into the final json + struct.
std::pair<nlohmann::json, AppConfig> resolve_config(const CommonArgs& a) {
  nlohmann::json cfg = AppConfig{};
  if (!a.config_path.empty()) {
    nlohmann::json file;
    try {
      file = read_json_file(a.config_path);
    } catch (const std::exception& e) {
      throw UsageError(std::string("bad --config file: ") + e.what());
    }
    cfg.update(file, /*merge_objects=*/true);
  }
  for (const std::string& s : a.sets) apply_override(cfg, s);
  AppConfig app;
  try {
    app = cfg.get<AppConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid config value: ") + e.what());
  }
  return {std::move(cfg), std::move(app)};
}

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_stamp(const fs::path& out_dir, const std::string& command,
                 const nlohmann::json& cfg, uint64_t seed) {
  nlohmann::json stamp = {{"tool", "octseg"},
                          {"version", kToolVersion},
                          {"command", command},
                          {"seed", seed},
                          {"config_hash", hex64(fnv1a64(cfg.dump()))},
                          {"formats", {{"checkpoint", kCheckpointVersion}}},
                          {"config", cfg}};
  write_json_file(out_dir / "stamp.json", stamp);
}

fs::path manifest_path_for(const std::string& data_dir) {
  fs::path p = data_dir;
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw UsageError("no manifest at " + p.string());
  return p;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_generate(const CommonArgs& args, const std::string& subset_flag) {
  auto [cfg_json, cfg] = resolve_config(args);
  if (!subset_flag.empty()) {
    cfg_json["dataset"]["subset"] = subset_flag;
    cfg.dataset = cfg_json["dataset"].get<DatasetSpec>();
  }
  if (args.seed) {
    cfg.phantom_in_vivo.seed = *args.seed;
    cfg.phantom_ex_vivo.seed = mix_seed(*args.seed, 0x455856ULL);
    cfg_json["phantom_in_vivo"]["seed"] = cfg.phantom_in_vivo.seed;
    cfg_json["phantom_ex_vivo"]["seed"] = cfg.phantom_ex_vivo.seed;
  }
  cfg.dataset.validate();

  const fs::path out = args.out_dir;
  const Manifest manifest =
      generate_dataset(cfg.dataset, cfg.phantom_in_vivo, cfg.phantom_ex_vivo, out);
  write_stamp(out, "generate", cfg_json, cfg.phantom_in_vivo.seed);

  const auto count = [&manifest](const char* split) {
    return manifest.split_items(split).size();
  };
  std::cout << "wrote " << manifest.items.size() << " frames to " << out.string() << " ("
            << manifest.subset << "): train " << count("train") << ", val " << count("val")
            << ", test " << count("test") << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_dir,
              const std::string& preset_flag) {
  auto [cfg_json, cfg] = resolve_config(args);
  if (!preset_flag.empty()) {
    cfg_json["network"] = {{"preset", preset_flag}};
    cfg.network = cfg_json["network"].get<NetworkConfig>();
  }
  if (args.seed) {
    cfg.train.seed = *args.seed;
    cfg_json["train"]["seed"] = cfg.train.seed;
  }
  cfg.network.validate();
  cfg.train.validate();
  cfg.loss.validate();

  const fs::path manifest = manifest_path_for(data_dir);
  const DatasetBundle train_set = load_split(manifest, "train");
  const DatasetBundle val_set = load_split(manifest, "val");

  const fs::path out = args.out_dir;
  fs::create_directories(out);
  write_stamp(out, "train", cfg_json, cfg.train.seed);

  SegNetF net(cfg.network);
  net.init_params(cfg.train.seed);
  std::cerr << "training " << net.param_count() << "-param model on " << train_set.size()
            << " frames (" << train_set.size() * kStripesPerFrame << " stripes), val "
            << val_set.size() << " frames, objective " << cfg.train.objective << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result =
      train(net, train_set, val_set, cfg.train, cfg.loss, out / "history.csv",
            [&t0](const EpochStats& es) {
              const double mins =
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                  60.0;
              std::fprintf(stderr,
                           "epoch %3d  loss %.4f (ce %.4f dice %.4f topo %.4f)  "
                           "val mae %.2fpx dice %.4f  [%.1f min]\n",
                           es.epoch, es.loss_total, es.loss_ce, es.loss_dice, es.loss_topo,
                           es.val_mae_px, es.val_dice, mins);
            });

  save_checkpoint(out / "best.ckpt", net, result.norm_stats);
  result.best.checkpoint = "best.ckpt";
  for (SelectionRecord& r : result.records)
    if (r.epoch == result.best.epoch) r.checkpoint = "best.ckpt";
  write_json_file(out / "selection.json",
                  {{"records", result.records}, {"best", result.best}});

  std::cout << "best epoch " << result.best.epoch << ": val mae "
            << result.best.val_boundary_mae_px << " px, val dice "
            << result.best.val_macro_dice << "\ncheckpoint: " << (out / "best.ckpt").string()
            << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& data_dir,
             const std::string& split) {
  auto [cfg_json, cfg] = resolve_config(args);
  const fs::path manifest = manifest_path_for(data_dir);
  const DatasetBundle ds = load_split(manifest, split);

  const Checkpoint ckpt = load_checkpoint(checkpoint);
  SegNetF net = build_from_checkpoint(ckpt);

  Evaluator evaluator;
  const auto t0 = std::chrono::steady_clock::now();
  for (size_t i = 0; i < ds.size(); ++i) {
    const FrameInference inf = infer_frame(net, ds.frames[i], ckpt.norm_stats,
                                           cfg.pipeline.precision(), cfg.pipeline.smooth_window);
    evaluator.add(inf.labels, ds.masks[i], inf.probs, inf.trace, ds.traces[i]);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const EvalReport report =
      evaluator.finalize(seconds > 0.0 ? static_cast<double>(ds.size()) / seconds : 0.0);

  const nlohmann::json report_json = report;
  std::cout << report_json.dump(2) << "\n";
  if (!args.out_dir.empty()) {
    const fs::path out = args.out_dir;
    fs::create_directories(out);
    write_json_file(out / "report.json", report_json);
    std::ofstream csv(out / "frames.csv");
    csv << frame_scores_csv(evaluator.frame_scores());
    write_stamp(out, "eval", cfg_json, cfg.train.seed);
  }
  std::cerr << render_report_table(report);
  return 0;
}

int cmd_stream(const CommonArgs& args, const std::string& checkpoint, const std::string& source,
               const std::string& data_dir, const std::string& split, int frames, double hz,
               std::optional<double> cap, std::optional<double> threshold) {
  auto [cfg_json, cfg] = resolve_config(args);
  if (cap) {
    cfg.pipeline.cap_hz = *cap;
    cfg_json["pipeline"]["cap_hz"] = *cap;
  }
  if (threshold) {
    cfg.pipeline.confidence_threshold = *threshold;
    cfg_json["pipeline"]["confidence_threshold"] = *threshold;
  }
  if (args.seed) {
    cfg.phantom_in_vivo.seed = *args.seed;
    cfg_json["phantom_in_vivo"]["seed"] = cfg.phantom_in_vivo.seed;
  }
  cfg.pipeline.validate();

  const Checkpoint ckpt = load_checkpoint(checkpoint);
  NetworkEngine engine(build_from_checkpoint(ckpt), cfg.pipeline.precision());

  std::unique_ptr<FrameSource> src;
  if (source == "synth") {
    src = std::make_unique<SynthLiveSource>(cfg.phantom_in_vivo, frames, hz);
  } else if (source == "replay") {
    if (data_dir.empty()) throw UsageError("--source replay requires --data");
    src = std::make_unique<ReplaySource>(
        ReplaySource::from_manifest(manifest_path_for(data_dir), split));
  } else {
    throw UsageError("unknown --source: " + source + " (use synth or replay)");
  }

  const fs::path out = args.out_dir;
  fs::create_directories(out);
  write_stamp(out, "stream", cfg_json, cfg.phantom_in_vivo.seed);
  const PipelineReport report =
      run_stream(*src, engine, ckpt.norm_stats, cfg.pipeline, out);

  std::cout << "frames " << report.frames_in << ": accepted " << report.frames_accepted
            << ", rejected " << report.frames_rejected << ", failed " << report.frames_failed
            << ", held " << report.held_emissions << ", source-dropped "
            << report.source_dropped << "\ndelivered " << report.end_to_end_hz
            << " Hz, effective " << report.effective_update_hz << " Hz\nreport: "
            << (out / "report.json").string() << "\n";
  return 0;
}

int cmd_bench(const CommonArgs& args, const std::string& checkpoint, int frames,
              const std::string& preset_flag) {
  auto [cfg_json, cfg] = resolve_config(args);
  if (!preset_flag.empty()) {
    cfg_json["network"] = {{"preset", preset_flag}};
    cfg.network = cfg_json["network"].get<NetworkConfig>();
  }
  cfg.pipeline.validate();
  if (frames < 2) throw UsageError("--frames must be at least 2");

  NormStats stats;
  std::unique_ptr<NetworkEngine> engine;
  if (!checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    stats = ckpt.norm_stats;
    engine = std::make_unique<NetworkEngine>(build_from_checkpoint(ckpt),
                                             cfg.pipeline.precision());
  } else {
    // No weights given: time a freshly initialized model; fit the
    // normalization on a few phantoms so the numeric path is realistic.
    SegNetF net(cfg.network);
    const uint64_t seed = args.seed.value_or(cfg.train.seed);
    net.init_params(seed);
    std::vector<Frame> probe;
    for (int i = 0; i < 8; ++i) probe.push_back(generate_sample(cfg.phantom_in_vivo, i).frame);
    stats = fit_norm(probe);
    engine = std::make_unique<NetworkEngine>(std::move(net), cfg.pipeline.precision());
  }

  const int warmup = std::max(cfg.pipeline.warmup_frames, 20);
  SynthLiveSource source(cfg.phantom_in_vivo, warmup + frames, 0.0);

  fs::path out;
  if (!args.out_dir.empty()) {
    out = args.out_dir;
    fs::create_directories(out);
    write_stamp(out, "bench", cfg_json, cfg.phantom_in_vivo.seed);
  }
  const PipelineReport report = bench(source, *engine, stats, cfg.pipeline, out);

  std::cout << "stage        mean_ms    p95_ms\n";
  for (int i = 0; i < kNumStages; ++i) {
    std::printf("%-12s %8.3f  %8.3f\n", kStageNames[i], report.stages[i].mean_ms,
                report.stages[i].p95_ms);
  }
  std::printf("end-to-end   %8.3f  %8.3f ms  ->  %.1f Hz over %lld frames\n",
              report.e2e_mean_ms, report.e2e_p95_ms, report.end_to_end_hz,
              static_cast<long long>(report.timed_frames));
  std::cout << "hardware: " << report.hardware << "\nengine: " << report.engine << "\n";
  return 0;
}

}  // namespace
}  // namespace octseg

int main(int argc, char** argv) {
  using namespace octseg;

  CLI::App app{"Corneal M-mode OCT segmentation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonArgs gen_args, train_args, eval_args, stream_args, bench_args;

  auto* gen = app.add_subcommand("generate", "synthesize a phantom dataset with manifest");
  std::string gen_subset;
  gen->add_option("--subset", gen_subset, "in_vivo | ex_vivo | hybrid")
      ->check(CLI::IsMember({"in_vivo", "ex_vivo", "hybrid"}));
  add_common(gen, gen_args, /*out_required=*/true);

  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  std::string train_data, train_preset;
  tr->add_option("--data", train_data, "dataset directory (holds manifest.json)")->required();
  tr->add_option("--preset", train_preset, "network preset: tiny | full")
      ->check(CLI::IsMember({"tiny", "full"}));
  add_common(tr, train_args, /*out_required=*/true);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split = "test";
  ev->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--split", eval_split, "train | val | test");
  add_common(ev, eval_args, /*out_required=*/false);

  auto* st = app.add_subcommand("stream", "run the gated streaming pipeline");
  std::string stream_ckpt, stream_source = "synth", stream_data, stream_split = "test";
  int stream_frames = 500;
  double stream_hz = 0.0;
  std::optional<double> stream_cap, stream_threshold;
  st->add_option("--checkpoint", stream_ckpt, "trained checkpoint")->required();
  st->add_option("--source", stream_source, "synth | replay");
  st->add_option("--data", stream_data, "dataset directory (replay source)");
  st->add_option("--split", stream_split, "split for replay");
  st->add_option("--frames", stream_frames, "frame count for the synth source");
  st->add_option("--hz", stream_hz, "synth live rate; 0 = back-to-back");
  st->add_option("--cap", stream_cap, "release cap in Hz (pipeline.cap_hz)");
  st->add_option("--threshold", stream_threshold, "confidence gate threshold");
  add_common(st, stream_args, /*out_required=*/true);

  auto* be = app.add_subcommand("bench", "uncapped throughput benchmark");
  std::string bench_ckpt, bench_preset;
  int bench_frames = 200;
  be->add_option("--checkpoint", bench_ckpt, "checkpoint (fresh weights if omitted)");
  be->add_option("--frames", bench_frames, "timed frames after warm-up");
  be->add_option("--preset", bench_preset, "network preset when no checkpoint is given")
      ->check(CLI::IsMember({"tiny", "full"}));
  add_common(be, bench_args, /*out_required=*/false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message and usage pointer
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_args, gen_subset);
    if (tr->parsed()) return cmd_train(train_args, train_data, train_preset);
    if (ev->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_data, eval_split);
    if (st->parsed())
      return cmd_stream(stream_args, stream_ckpt, stream_source, stream_data, stream_split,
                        stream_frames, stream_hz, stream_cap, stream_threshold);
    if (be->parsed()) return cmd_bench(bench_args, bench_ckpt, bench_frames, bench_preset);
    std::cerr << "no command given\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
