#include <catch_amalgamated.hpp>

#include <chrono>
#include <fstream>
#include <random>
#include <thread>

#include "octseg/pipeline.hpp"
#include "test_util.hpp"

using namespace octseg;
using namespace octseg::testutil;

namespace {

NormStats identity_stats() {
  NormStats s;
  s.mean = 0.0;
  s.std_dev = 1.0;
  return s;
}

std::vector<Frame> random_frames(int count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Frame> frames;
  for (int i = 0; i < count; ++i) {
    Frame f = random_frame(kFrameHeight, kFrameWidth, rng);
    f.frame_id = i;
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace

TEST_CASE("pipeline config validates and round-trips", "[pipeline]") {
  PipelineConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.cap_hz == 80.0);
  CHECK(cfg.confidence_threshold == 0.6);

  nlohmann::json j = cfg;
  PipelineConfig back = j.get<PipelineConfig>();
  CHECK(back.cap_hz == cfg.cap_hz);
  CHECK(back.confidence_threshold == cfg.confidence_threshold);
  CHECK(back.hold_last_on_reject == cfg.hold_last_on_reject);
  CHECK(back.smooth_window == cfg.smooth_window);

  SECTION("overlapped execution is reserved") {
    cfg.overlap = true;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("bad cap") {
    cfg.cap_hz = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("bad threshold") {
    cfg.confidence_threshold = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("even smoothing window") {
    cfg.smooth_window = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("the gate accepts exactly at the threshold", "[pipeline]") {
  CHECK(gate_accept(0.6, 0.6));
  CHECK(gate_accept(0.61, 0.6));
  CHECK_FALSE(gate_accept(0.59999, 0.6));

  PipelineConfig cfg;
  CHECK(gate(0.6, cfg) == Gate::Accept);
  CHECK(gate(0.5, cfg) == Gate::Reject);
}

TEST_CASE("an oracle engine reproduces its own truth through the pipeline", "[pipeline]") {
  std::mt19937_64 rng(77);
  Frame frame = random_frame(kFrameHeight, kFrameWidth, rng);
  LabelMap truth = random_ordered_labels(kFrameHeight, kFrameWidth, rng);

  OracleEngine engine;
  engine.set_truth(truth);
  PipelineConfig cfg;
  FrameResult res = process_frame(frame, engine, identity_stats(), cfg);

  REQUIRE_FALSE(res.failed);
  CHECK(res.labels.labels == truth.labels);
  const BoundaryTrace expected =
      smooth_trace(extract_trace(truth, frame.pixel_pitch_um), cfg.smooth_window);
  CHECK(res.trace == expected);
  CHECK(res.confidence > 0.999);

  REQUIRE(res.overlay != nullptr);
  CHECK(res.overlay->height == kFrameHeight);
  CHECK(res.overlay->width == kFrameWidth);

  SECTION("overlays can be switched off") {
    cfg.overlay = false;
    FrameResult bare = process_frame(frame, engine, identity_stats(), cfg);
    CHECK(bare.overlay == nullptr);
  }
}

TEST_CASE("stage timings partition the end-to-end time", "[pipeline]") {
  std::mt19937_64 rng(78);
  Frame frame = random_frame(kFrameHeight, kFrameWidth, rng);
  ScriptedEngine engine(100, 300);
  FrameResult res = process_frame(frame, engine, identity_stats(), PipelineConfig{});

  double sum = 0.0;
  for (double s : res.stage_ms) {
    CHECK(s >= 0.0);
    sum += s;
  }
  CHECK(sum == Catch::Approx(res.e2e_ms).margin(1e-6));
}

TEST_CASE("the infer stage splits into sub-batches without changing results", "[pipeline]") {
  std::mt19937_64 rng(79);
  Frame frame = random_frame(kFrameHeight, kFrameWidth, rng);

  auto run = [&](int batch_stripes) {
    ScriptedEngine engine(120, 280);  // output independent of batching
    PipelineConfig cfg;
    cfg.batch_stripes = batch_stripes;
    return process_frame(frame, engine, identity_stats(), cfg);
  };
  FrameResult whole = run(8);
  FrameResult split = run(3);
  FrameResult single = run(1);

  CHECK(whole.probs.probs == split.probs.probs);
  CHECK(whole.probs.probs == single.probs.probs);
  CHECK(whole.labels.labels == split.labels.labels);
  CHECK(whole.trace == split.trace);
}

TEST_CASE("rejected frames re-emit the last accepted result unchanged", "[pipeline]") {
  MemorySource source(random_frames(4, 11));
  ScriptedEngine engine(100, 300, {false, true, true, false});
  PipelineConfig cfg;

  std::vector<StreamOutput> outputs;
  PipelineReport report = run_stream(source, engine, identity_stats(), cfg, {},
                                     [&](const StreamOutput& o) { outputs.push_back(o); });

  REQUIRE(outputs.size() == 4);
  CHECK(outputs[0].accepted);
  CHECK_FALSE(outputs[0].held);
  for (int i : {1, 2}) {
    CHECK_FALSE(outputs[i].accepted);
    CHECK(outputs[i].held);
    CHECK(outputs[i].trace == outputs[0].trace);          // bit-identical hold
    CHECK(outputs[i].overlay.get() == outputs[0].overlay.get());  // shared, not re-rendered
    CHECK(outputs[i].confidence < cfg.confidence_threshold);
  }
  CHECK(outputs[3].accepted);
  CHECK_FALSE(outputs[3].held);

  CHECK(report.frames_in == 4);
  CHECK(report.frames_accepted == 2);
  CHECK(report.frames_rejected == 2);
  CHECK(report.frames_failed == 0);
  CHECK(report.held_emissions == 2);
  CHECK(report.source_dropped == 0);
}

TEST_CASE("with holding off, rejections emit an all-missing trace", "[pipeline]") {
  MemorySource source(random_frames(2, 12));
  ScriptedEngine engine(100, 300, {false, true});
  PipelineConfig cfg;
  cfg.hold_last_on_reject = false;

  std::vector<StreamOutput> outputs;
  run_stream(source, engine, identity_stats(), cfg, {},
             [&](const StreamOutput& o) { outputs.push_back(o); });

  REQUIRE(outputs.size() == 2);
  CHECK_FALSE(outputs[1].accepted);
  CHECK_FALSE(outputs[1].held);
  for (int c = 0; c < outputs[1].trace.width(); ++c) {
    CHECK_FALSE(outputs[1].trace.epi_row_px[c].has_value());
    CHECK_FALSE(outputs[1].trace.dm_row_px[c].has_value());
  }
}

TEST_CASE("an engine fault marks the frame failed and the stream continues", "[pipeline]") {
  MemorySource source(random_frames(2, 13));
  FailingEngine engine({true, false});  // fault before anything was accepted
  PipelineConfig cfg;

  std::vector<StreamOutput> outputs;
  PipelineReport report = run_stream(source, engine, identity_stats(), cfg, {},
                                     [&](const StreamOutput& o) { outputs.push_back(o); });

  REQUIRE(outputs.size() == 2);
  CHECK(outputs[0].failed);
  CHECK_FALSE(outputs[0].accepted);
  CHECK_FALSE(outputs[0].held);  // nothing to hold yet
  for (int c = 0; c < outputs[0].trace.width(); ++c)
    CHECK_FALSE(outputs[0].trace.epi_row_px[c].has_value());
  CHECK(outputs[0].confidence == 0.0);

  CHECK(outputs[1].accepted);
  CHECK(report.frames_failed == 1);
  CHECK(report.frames_accepted == 1);
  CHECK(report.frames_rejected == 0);
}

TEST_CASE("the release governor caps the delivered rate", "[pipeline]") {
  MemorySource source(random_frames(20, 14));
  ScriptedEngine engine(100, 300);
  PipelineConfig cfg;
  cfg.cap_hz = 50.0;
  cfg.overlay = false;

  const auto t0 = std::chrono::steady_clock::now();
  PipelineReport report = run_stream(source, engine, identity_stats(), cfg);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // 19 release gaps of at least 20 ms each.
  CHECK(elapsed >= 0.37);
  CHECK(report.timed_frames == 20);
  CHECK(report.end_to_end_hz > 0.0);
  CHECK(report.end_to_end_hz <= 50.5);
}

TEST_CASE("streaming writes the trace log, report and first overlay", "[pipeline]") {
  TempDir dir;
  MemorySource source(random_frames(3, 15));
  ScriptedEngine engine(100, 300);
  PipelineConfig cfg;

  PipelineReport report = run_stream(source, engine, identity_stats(), cfg, dir.path);

  std::ifstream log(dir / "trace_log.csv");
  REQUIRE(log.good());
  std::string line;
  std::getline(log, line);
  CHECK(line == kTraceLogHeader);
  int rows = 0;
  while (std::getline(log, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  const nlohmann::json j = read_json_file(dir / "report.json");
  PipelineReport loaded = j.get<PipelineReport>();
  CHECK(loaded.frames_in == report.frames_in);
  CHECK(loaded.frames_accepted == report.frames_accepted);
  CHECK(loaded.confidence_mean == report.confidence_mean);
  CHECK(loaded.engine == "scripted-stub");
  CHECK(j.at("timing").contains("tile_ms"));
  CHECK(j.at("timing").contains("overlay_ms"));
  CHECK(j.at("timing").at("infer_ms").contains("p95"));

  REQUIRE(fs::exists(dir / "overlay_first.png"));
  CHECK(fs::file_size(dir / "overlay_first.png") > 0);
}

TEST_CASE("pipeline reports survive a json round trip", "[pipeline]") {
  MemorySource source(random_frames(2, 16));
  ScriptedEngine engine(100, 300, {false, true});
  PipelineReport report = run_stream(source, engine, identity_stats(), PipelineConfig{});

  nlohmann::json j = report;
  PipelineReport back = j.get<PipelineReport>();
  CHECK(back.frames_in == report.frames_in);
  CHECK(back.frames_accepted == report.frames_accepted);
  CHECK(back.frames_rejected == report.frames_rejected);
  CHECK(back.held_emissions == report.held_emissions);
  CHECK(back.confidence_mean == report.confidence_mean);
  CHECK(back.e2e_mean_ms == report.e2e_mean_ms);
  CHECK(back.end_to_end_hz == report.end_to_end_hz);
  CHECK(back.effective_update_hz == report.effective_update_hz);
  CHECK(back.timed_frames == report.timed_frames);
  CHECK(back.hardware == report.hardware);
  CHECK(back.config.cap_hz == report.config.cap_hz);
  for (int s = 0; s < kNumStages; ++s) {
    CHECK(back.stages[s].mean_ms == report.stages[s].mean_ms);
    CHECK(back.stages[s].p95_ms == report.stages[s].p95_ms);
  }
}

TEST_CASE("an empty source is rejected", "[pipeline]") {
  MemorySource source({});
  ScriptedEngine engine(100, 300);
  CHECK_THROWS_AS(run_stream(source, engine, identity_stats(), PipelineConfig{}), UsageError);
}

TEST_CASE("benchmarking discards warm-up frames from every statistic", "[pipeline]") {
  MemorySource source(random_frames(25, 17));
  ScriptedEngine engine(100, 300);
  PipelineConfig cfg;
  cfg.overlay = false;
  cfg.warmup_frames = 20;

  PipelineReport report = bench(source, engine, identity_stats(), cfg);
  CHECK(report.frames_in == 25);
  CHECK(report.timed_frames == 5);
  CHECK(report.e2e_mean_ms > 0.0);
  CHECK(report.e2e_p95_ms >= report.stages[0].p95_ms);
}

TEST_CASE("a live source skips frames a slow consumer missed", "[pipeline]") {
  SynthLiveSource source(ex_vivo_style(), 6, 100.0);
  std::vector<int64_t> ids;
  while (auto f = source.next()) {
    ids.push_back(f->frame_id);
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  REQUIRE_FALSE(ids.empty());
  for (size_t i = 1; i < ids.size(); ++i) CHECK(ids[i] > ids[i - 1]);
  CHECK(source.dropped() > 0);
  CHECK(static_cast<int64_t>(ids.size()) + source.dropped() == 6);
}

TEST_CASE("a paced live source keeps every frame", "[pipeline]") {
  SynthLiveSource source(ex_vivo_style(), 3, 0.0);  // back-to-back mode
  int count = 0;
  while (auto f = source.next()) {
    CHECK(f->frame_id == count);
    ++count;
  }
  CHECK(count == 3);
  CHECK(source.dropped() == 0);
}

TEST_CASE("a trained-network engine drives the pipeline end to end", "[pipeline]") {
  SegNetF net(NetworkConfig::tiny());
  net.init_params(3);
  NetworkEngine engine(std::move(net), Precision::Full);
  CHECK(engine.describe().find("segnet") == 0);

  std::mt19937_64 rng(19);
  Frame frame = random_frame(kFrameHeight, kFrameWidth, rng);
  FrameResult res = process_frame(frame, engine, identity_stats(), PipelineConfig{});
  REQUIRE_FALSE(res.failed);
  CHECK(res.probs.normalized(1e-4f));
  CHECK(validate_ordered(res.labels));
}
