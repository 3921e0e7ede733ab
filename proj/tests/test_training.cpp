#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <sstream>

#include "octseg/training.hpp"
#include "test_util.hpp"

using namespace octseg;
using namespace octseg::testutil;

namespace {

DatasetBundle phantom_bundle(const PhantomConfig& cfg, int count, int base_index) {
  DatasetBundle b;
  for (int i = 0; i < count; ++i) {
    Sample s = generate_sample(cfg, base_index + i);
    b.frames.push_back(std::move(s.frame));
    b.masks.push_back(std::move(s.labels));
    b.traces.push_back(std::move(s.trace));
  }
  return b;
}

TrainConfig smoke_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("train config validates and round-trips", "[training]") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.objective == "composite");
  CHECK(cfg.precision() == Precision::Full);

  nlohmann::json j = cfg;
  TrainConfig g = j.get<TrainConfig>();
  CHECK(g.epochs == cfg.epochs);
  CHECK(g.learning_rate == cfg.learning_rate);
  CHECK(g.hflip_prob == cfg.hflip_prob);
  CHECK(g.objective == cfg.objective);

  SECTION("bad objective") {
    cfg.objective = "hinge";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("bad smoothing window") {
    cfg.smooth_window = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("bad jitter") {
    cfg.jitter_contrast = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("augmentation is the identity at zero amplitudes", "[training]") {
  std::mt19937_64 data_rng(1), aug_rng(2);
  Frame f = random_frame(32, 16, data_rng);
  LabelMap m = random_ordered_labels(32, 16, data_rng);

  TrainConfig cfg;
  cfg.jitter_brightness = 0.0;
  cfg.jitter_contrast = 0.0;
  cfg.hflip_prob = 0.0;

  std::vector<float> pixels = f.pixels;
  LabelMap labels = m;
  augment_stripe(pixels, labels, 32, 16, aug_rng, cfg);
  CHECK(pixels == f.pixels);
  CHECK(labels.labels == m.labels);
}

TEST_CASE("a certain flip mirrors pixels and labels together", "[training]") {
  std::mt19937_64 data_rng(3), aug_rng(4);
  Frame f = random_frame(16, 8, data_rng);
  LabelMap m = random_ordered_labels(16, 8, data_rng);

  TrainConfig cfg;
  cfg.jitter_brightness = 0.0;
  cfg.jitter_contrast = 0.0;
  cfg.hflip_prob = 1.0;

  std::vector<float> pixels = f.pixels;
  LabelMap labels = m;
  augment_stripe(pixels, labels, 16, 8, aug_rng, cfg);

  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 8; ++c) {
      CHECK(pixels[r * 8 + c] == f.pixels[r * 8 + (7 - c)]);
      CHECK(labels.at(r, c) == m.at(r, 7 - c));
    }
  CHECK(validate_ordered(labels));  // mirroring never breaks depth ordering

  // A second certain flip restores the original.
  augment_stripe(pixels, labels, 16, 8, aug_rng, cfg);
  CHECK(pixels == f.pixels);
  CHECK(labels.labels == m.labels);
}

TEST_CASE("brightness jitter shifts unclamped pixels uniformly", "[training]") {
  std::mt19937_64 aug_rng(5);
  TrainConfig cfg;
  cfg.jitter_brightness = 0.1;
  cfg.jitter_contrast = 0.0;
  cfg.hflip_prob = 0.0;

  std::vector<float> pixels(64, 0.5f);
  LabelMap labels(8, 8);
  augment_stripe(pixels, labels, 8, 8, aug_rng, cfg);
  for (float v : pixels) {
    CHECK(v == pixels[0]);  // one global shift
    CHECK(std::abs(v - 0.5f) <= 0.1f + 1e-6f);
  }
}

TEST_CASE("adamw respects the decay exemption list", "[training]") {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;

  ParamTensor<float> weight, bias, gamma;
  weight.resize("layer.weight", {1});
  bias.resize("layer.bias", {1});
  gamma.resize("norm.gamma", {1});
  weight.value[0] = bias.value[0] = gamma.value[0] = 1.0f;

  AdamW opt({&weight, &bias, &gamma}, cfg);
  opt.step();  // all gradients zero: only decoupled decay can move values
  CHECK(weight.value[0] == Catch::Approx(1.0 - 0.1 * 0.5).margin(1e-6));
  CHECK(bias.value[0] == 1.0f);
  CHECK(gamma.value[0] == 1.0f);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adamw descends a simple quadratic", "[training]") {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;

  ParamTensor<float> p;
  p.resize("x.weight", {1});
  p.value[0] = 3.0f;
  AdamW opt({&p}, cfg);
  for (int i = 0; i < 200; ++i) {
    p.grad[0] = p.value[0];  // d/dx of x^2/2
    opt.step();
  }
  CHECK(std::abs(p.value[0]) < 0.1f);
}

TEST_CASE("model selection prefers MAE, then Dice, then earlier epochs", "[training]") {
  SelectionRecord a{3, 2.0, 0.95, "a"};
  SelectionRecord b{5, 1.5, 0.90, "b"};
  SelectionRecord c{7, 1.5, 0.93, "c"};
  CHECK(select_best({a, b, c}).checkpoint == "c");  // same MAE, higher dice
  CHECK(select_best({a, b}).checkpoint == "b");     // lower MAE wins

  SelectionRecord d{9, 1.5, 0.93, "d"};
  CHECK(select_best({d, c}).checkpoint == "c");  // full tie: earlier epoch

  CHECK_THROWS_AS(select_best({}), UsageError);

  nlohmann::json j = a;
  SelectionRecord back = j.get<SelectionRecord>();
  CHECK(back.epoch == 3);
  CHECK(back.val_boundary_mae_px == 2.0);
  CHECK(back.val_macro_dice == 0.95);
  CHECK(back.checkpoint == "a");
}

TEST_CASE("load_split resolves manifest-relative paths", "[training]") {
  TempDir dir;
  DatasetSpec spec = DatasetSpec::for_subset(Subset::ExVivo);
  spec.n_train = 3;
  spec.n_test = 1;
  spec.val_fraction = 0.34;
  generate_dataset(spec, in_vivo_style(), ex_vivo_style(), dir.path);

  DatasetBundle train_set = load_split(dir / "manifest.json", "train");
  DatasetBundle val_set = load_split(dir / "manifest.json", "val");
  DatasetBundle test_set = load_split(dir / "manifest.json", "test");
  CHECK(train_set.size() == 2);
  CHECK(val_set.size() == 1);
  CHECK(test_set.size() == 1);
  CHECK(train_set.frames[0].height_px == kFrameHeight);
  CHECK(train_set.masks[0].width_px == kFrameWidth);
  CHECK(train_set.traces[0].width() == kFrameWidth);

  CHECK_THROWS_AS(load_split(dir / "manifest.json", "holdout"), UsageError);
}

TEST_CASE("a short training run produces history, records and a best epoch", "[training]") {
  TempDir dir;
  DatasetBundle train_set = phantom_bundle(ex_vivo_style(), 4, 0);
  DatasetBundle val_set = phantom_bundle(ex_vivo_style(), 2, 100);

  SegNetF net(NetworkConfig::tiny());
  net.init_params(42);
  const fs::path csv = dir / "history.csv";

  int callbacks = 0;
  TrainResult result = train(net, train_set, val_set, smoke_config(2), LossWeights{}, csv,
                             [&](const EpochStats&) { ++callbacks; });

  CHECK(callbacks == 2);
  REQUIRE(result.history.size() == 2);
  REQUIRE(result.records.size() == 2);
  for (const EpochStats& e : result.history) {
    CHECK(std::isfinite(e.loss_total));
    CHECK(std::isfinite(e.loss_ce));
    CHECK(std::isfinite(e.loss_dice));
    CHECK(std::isfinite(e.loss_topo));
    CHECK(e.loss_ce >= 0.0);
    CHECK(e.val_dice > 0.0);
  }
  CHECK(result.best.epoch == select_best(result.records).epoch);
  CHECK(result.norm_stats.std_dev > 0.0);

  std::ifstream in(csv);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == kHistoryHeader);
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("training is bit-reproducible for a fixed seed", "[training]") {
  DatasetBundle train_set = phantom_bundle(ex_vivo_style(), 2, 0);
  DatasetBundle val_set = phantom_bundle(ex_vivo_style(), 1, 50);

  auto run = [&](SegNetF& net) {
    net.init_params(42);
    return train(net, train_set, val_set, smoke_config(1), LossWeights{});
  };
  SegNetF na(NetworkConfig::tiny()), nb(NetworkConfig::tiny());
  TrainResult ra = run(na);
  TrainResult rb = run(nb);

  REQUIRE(ra.history.size() == rb.history.size());
  CHECK(ra.history[0].loss_total == rb.history[0].loss_total);
  CHECK(ra.history[0].val_mae_px == rb.history[0].val_mae_px);
  CHECK(ra.history[0].val_dice == rb.history[0].val_dice);
  for (size_t i = 0; i < na.params().size(); ++i)
    CHECK(na.params()[i]->value == nb.params()[i]->value);
}

TEST_CASE("the bce objective trains without the composite terms", "[training]") {
  DatasetBundle train_set = phantom_bundle(ex_vivo_style(), 2, 0);
  DatasetBundle val_set = phantom_bundle(ex_vivo_style(), 1, 60);

  SegNetF net(NetworkConfig::tiny());
  net.init_params(42);
  TrainConfig cfg = smoke_config(1);
  cfg.objective = "bce";
  TrainResult result = train(net, train_set, val_set, cfg, LossWeights{});
  REQUIRE(result.history.size() == 1);
  CHECK(std::isfinite(result.history[0].loss_total));
  // The composite decomposition is not reported for the baseline objective.
  CHECK(result.history[0].loss_topo == 0.0);
}

TEST_CASE("a runaway learning rate raises a divergence error", "[training]") {
  DatasetBundle train_set = phantom_bundle(ex_vivo_style(), 2, 0);
  DatasetBundle val_set = phantom_bundle(ex_vivo_style(), 1, 70);

  SegNetF net(NetworkConfig::tiny());
  net.init_params(42);
  TrainConfig cfg = smoke_config(3);
  cfg.learning_rate = 1e9;
  CHECK_THROWS_AS(train(net, train_set, val_set, cfg, LossWeights{}), DivergenceError);
}

TEST_CASE("empty datasets are rejected up front", "[training]") {
  DatasetBundle filled = phantom_bundle(ex_vivo_style(), 1, 0);
  DatasetBundle empty;
  SegNetF net(NetworkConfig::tiny());
  net.init_params(1);
  CHECK_THROWS_AS(train(net, empty, filled, smoke_config(1), LossWeights{}), UsageError);
  CHECK_THROWS_AS(train(net, filled, empty, smoke_config(1), LossWeights{}), UsageError);
}

TEST_CASE("full-frame inference honours the output contracts", "[training]") {
  SegNetF net(NetworkConfig::tiny());
  net.init_params(9);
  Sample s = generate_sample(ex_vivo_style(), 7);
  const std::vector<Frame> fit_frames{s.frame};
  NormStats stats = fit_norm(fit_frames);

  FrameInference inf = infer_frame(net, s.frame, stats);
  CHECK(inf.probs.height_px == kFrameHeight);
  CHECK(inf.probs.width_px == kFrameWidth);
  CHECK(inf.probs.normalized(1e-4f));
  CHECK(validate_ordered(inf.labels));
  CHECK(inf.trace.width() == kFrameWidth);
  CHECK(inf.confidence >= 0.0);
  CHECK(inf.confidence <= 1.0);
}
