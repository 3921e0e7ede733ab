#include <catch_amalgamated.hpp>

#include <random>
#include <set>

#include "octseg/metrics.hpp"
#include "test_util.hpp"

using namespace octseg;
using namespace octseg::testutil;

namespace {

// Independent set-count re-derivation of dice/iou per class.
struct BruteSeg {
  double dice[kNumClasses];
  double iou[kNumClasses];
};

BruteSeg brute_seg(const LabelMap& pred, const LabelMap& truth) {
  BruteSeg out{};
  for (int k = 0; k < kNumClasses; ++k) {
    int64_t inter = 0, in_pred = 0, in_truth = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
      const bool p = pred.labels[i] == k, t = truth.labels[i] == k;
      inter += p && t;
      in_pred += p;
      in_truth += t;
    }
    const int64_t uni = in_pred + in_truth - inter;
    out.dice[k] = (in_pred + in_truth) == 0
                      ? 1.0
                      : 2.0 * static_cast<double>(inter) / static_cast<double>(in_pred + in_truth);
    out.iou[k] = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

}  // namespace

TEST_CASE("dice and iou match brute-force set counts", "[metrics]") {
  std::mt19937_64 rng(2023);
  for (int trial = 0; trial < 40; ++trial) {
    LabelMap pred = random_labels(8, 8, rng);
    LabelMap truth = random_labels(8, 8, rng);
    SegScores s = dice_iou(pred, truth);
    BruteSeg b = brute_seg(pred, truth);
    for (int k = 0; k < kNumClasses; ++k) {
      CHECK(s.dice[k] == b.dice[k]);
      CHECK(s.iou[k] == b.iou[k]);
      CHECK(s.iou[k] <= s.dice[k]);  // holds pointwise for set overlaps
    }
    double md = 0.0, mi = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
      md += s.dice[k];
      mi += s.iou[k];
    }
    CHECK(s.macro_dice == md / kNumClasses);
    CHECK(s.macro_iou == mi / kNumClasses);
  }
}

TEST_CASE("degenerate overlaps hit their closed forms", "[metrics]") {
  LabelMap a(4, 4), b(4, 4);

  SECTION("identical maps score one everywhere") {
    std::mt19937_64 rng(9);
    a = random_labels(4, 4, rng);
    SegScores s = dice_iou(a, a);
    for (int k = 0; k < kNumClasses; ++k) {
      CHECK(s.dice[k] == 1.0);
      CHECK(s.iou[k] == 1.0);
    }
  }
  SECTION("a class absent from both sides scores one") {
    // Everything class 0: classes 1 and 2 are absent-absent.
    SegScores s = dice_iou(a, b);
    CHECK(s.dice[1] == 1.0);
    CHECK(s.iou[2] == 1.0);
    CHECK(s.macro_dice == 1.0);
  }
  SECTION("disjoint prediction scores zero on the present classes") {
    for (auto& v : a.labels) v = 1;
    for (auto& v : b.labels) v = 2;
    SegScores s = dice_iou(a, b);
    CHECK(s.dice[1] == 0.0);
    CHECK(s.iou[1] == 0.0);
    CHECK(s.dice[2] == 0.0);
    CHECK(s.dice[0] == 1.0);  // absent from both
  }
  SECTION("shape mismatch is rejected") {
    CHECK_THROWS_AS(dice_iou(LabelMap(4, 5), b), DimensionError);
  }
}

TEST_CASE("boundary MAE averages over evaluated columns only", "[metrics]") {
  BoundaryTrace truth(4, 2.61);
  truth.epi_row_px = {10.0, 20.0, 30.0, std::nullopt};
  truth.dm_row_px = {50.0, 60.0, 70.0, std::nullopt};
  BoundaryTrace pred(4, 2.61);
  pred.epi_row_px = {11.0, std::nullopt, 30.5, 40.0};
  pred.dm_row_px = {48.0, std::nullopt, 70.0, 80.0};

  BoundaryMae m = boundary_mae(pred, truth);
  // Columns 0 and 2 are scored; column 1 is a prediction dropout, column 3
  // has no truth and contributes nowhere.
  REQUIRE(m.epi_mae_px.has_value());
  CHECK(*m.epi_mae_px == 0.75);    // (1.0 + 0.5) / 2
  CHECK(*m.dm_mae_px == 1.0);      // (2.0 + 0.0) / 2
  CHECK(*m.mean_mae_px == 0.875);  // pooled over 4 scored columns
  CHECK(m.coverage_epi == 2.0 / 3.0);
  CHECK(m.coverage_dm == 2.0 / 3.0);
  CHECK(m.evaluated_cols == 4);
  CHECK(*m.epi_mae_um == 0.75 * 2.61);  // bitwise: one multiplication
}

TEST_CASE("micrometre errors are the pixel errors times the pitch", "[metrics]") {
  // The published operating point: 1.26 px at 2.61 um/px.
  BoundaryTrace truth(1, 2.61), pred(1, 2.61);
  truth.epi_row_px = {100.0};
  truth.dm_row_px = {200.0};
  pred.epi_row_px = {101.26};
  pred.dm_row_px = {201.26};

  BoundaryMae m = boundary_mae(pred, truth);
  CHECK(*m.epi_mae_px == Catch::Approx(1.26).margin(1e-12));
  CHECK(*m.epi_mae_um == *m.epi_mae_px * 2.61);
  CHECK(*m.mean_mae_um == Catch::Approx(3.2886).margin(1e-9));
  CHECK(*m.mean_mae_um == *m.mean_mae_px * 2.61);
}

TEST_CASE("an interface with no scored columns has no MAE", "[metrics]") {
  BoundaryTrace truth(2, 2.61), pred(2, 2.61);
  truth.epi_row_px = {10.0, 12.0};
  truth.dm_row_px = {30.0, 32.0};
  // Prediction misses epi everywhere but finds dm.
  pred.dm_row_px = {31.0, 31.0};

  BoundaryMae m = boundary_mae(pred, truth);
  CHECK_FALSE(m.epi_mae_px.has_value());
  CHECK_FALSE(m.epi_mae_um.has_value());
  REQUIRE(m.dm_mae_px.has_value());
  CHECK(*m.dm_mae_px == 1.0);
  CHECK(m.coverage_epi == 0.0);
  CHECK(m.coverage_dm == 1.0);
  CHECK(*m.mean_mae_px == 1.0);  // pooled over the dm columns only
}

TEST_CASE("ssim behaves like a structural similarity", "[metrics]") {
  std::mt19937_64 rng(31);
  LabelMap truth = random_ordered_labels(32, 32, rng);
  SoftMap st = soft_from_labels(truth);

  SECTION("identical inputs score exactly one") {
    CHECK(ssim(st, st) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("symmetry") {
    ProbMap pm = random_probmap(32, 32, rng);
    SoftMap sp = soft_from_probs(pm);
    CHECK(ssim(sp, st) == Catch::Approx(ssim(st, sp)).margin(1e-12));
  }
  SECTION("structured noise scores well below one") {
    LabelMap checker(32, 32);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) checker.at(r, c) = static_cast<uint8_t>((r + c) % 2 ? 2 : 1);
    CHECK(ssim(soft_from_labels(checker), st) < 0.5);
  }
  SECTION("images below the window size are rejected") {
    LabelMap small(8, 8);
    CHECK_THROWS_AS(ssim(soft_from_labels(small), soft_from_labels(small)), UsageError);
  }
}

TEST_CASE("psnr converts mean squared error to decibels", "[metrics]") {
  CHECK(psnr_from_mse(0.01) == Catch::Approx(20.0).margin(1e-9));
  CHECK(psnr_from_mse(1e-3) == Catch::Approx(30.0).margin(1e-9));
  CHECK(psnr_from_mse(1.0) == Catch::Approx(0.0).margin(1e-12));
  CHECK(std::isinf(psnr_from_mse(0.0)));
  CHECK(psnr_from_mse(0.0) > 0);

  std::mt19937_64 rng(32);
  LabelMap m = random_ordered_labels(16, 16, rng);
  SoftMap s = soft_from_labels(m);
  CHECK(std::isinf(psnr(s, s)));  // zero error
}

TEST_CASE("soft maps carry band and below-membrane mass", "[metrics]") {
  LabelMap m(4, 2);
  m.at(0, 0) = 0;
  m.at(1, 0) = 1;
  m.at(2, 0) = 2;
  m.at(3, 0) = 2;
  SoftMap s = soft_from_labels(m);
  CHECK(s.at(0, 1, 0) == 1.0);  // cornea plane
  CHECK(s.at(0, 2, 0) == 0.0);
  CHECK(s.at(1, 2, 0) == 1.0);  // below-membrane plane
  CHECK(s.at(1, 0, 0) == 0.0);

  ProbMap pm(4, 2);
  pm.at(1, 1, 0) = 0.25f;
  pm.at(2, 1, 0) = 0.5f;
  SoftMap sp = soft_from_probs(pm);
  CHECK(sp.at(0, 1, 0) == Catch::Approx(0.25).margin(1e-7));
  CHECK(sp.at(1, 1, 0) == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("the evaluator takes unweighted per-frame means", "[metrics]") {
  std::mt19937_64 rng(33);
  Evaluator ev;
  std::vector<double> frame_dice, frame_ssim;
  std::vector<std::optional<double>> frame_epi;

  for (int f = 0; f < 3; ++f) {
    LabelMap truth = random_ordered_labels(32, 32, rng);
    LabelMap pred = f == 0 ? truth : random_ordered_labels(32, 32, rng);
    ProbMap probs(32, 32);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) probs.at(pred.at(r, c), r, c) = 1.0f;
    BoundaryTrace tt = extract_trace(truth, 2.61);
    BoundaryTrace pt = extract_trace(pred, 2.61);
    ev.add(pred, truth, probs, pt, tt);

    frame_dice.push_back(dice_iou(pred, truth).macro_dice);
    frame_ssim.push_back(ssim(soft_from_probs(probs), soft_from_labels(truth)));
    frame_epi.push_back(boundary_mae(pt, tt).epi_mae_px);
  }

  EvalReport r = ev.finalize(42.5);
  CHECK(r.n_frames == 3);
  CHECK(r.throughput_hz == 42.5);
  double dice_mean = 0.0;
  for (double d : frame_dice) dice_mean += d / 3.0;
  CHECK(r.macro_dice == Catch::Approx(dice_mean).epsilon(1e-15));

  double epi_sum = 0.0;
  int epi_n = 0;
  for (const auto& e : frame_epi)
    if (e) {
      epi_sum += *e;
      ++epi_n;
    }
  REQUIRE(epi_n > 0);
  CHECK(*r.epi_mae_px == Catch::Approx(epi_sum / epi_n).epsilon(1e-15));
  CHECK(*r.epi_mae_um == *r.epi_mae_px * 2.61);

  CHECK(ev.frame_scores().size() == 3);
  CHECK(ev.frame_scores()[0].macro_dice == 1.0);  // perfect first frame
}

TEST_CASE("evaluator requires at least one frame", "[metrics]") {
  Evaluator ev;
  CHECK_THROWS_AS(ev.finalize(), UsageError);
}

TEST_CASE("reports round-trip through json including awkward reals", "[metrics]") {
  EvalReport r;
  r.macro_dice = 0.9876;
  r.macro_iou = 0.9521;
  r.dice = {0.99, 0.98, 0.97};
  r.iou = {0.98, 0.97, 0.96};
  r.epi_mae_px = 1.26;
  r.epi_mae_um = 1.26 * 2.61;
  // dm interface entirely uncovered: stays null
  r.coverage_epi = 0.875;
  r.coverage_dm = 0.0;
  r.ssim = 0.94;
  r.psnr_db = std::numeric_limits<double>::infinity();
  r.throughput_hz = 81.2;
  r.n_frames = 100;

  nlohmann::json j = r;
  CHECK(j.at("dm_mae_px").is_null());
  CHECK(j.at("psnr_db") == "inf");

  EvalReport g = j.get<EvalReport>();
  CHECK(g.macro_dice == r.macro_dice);
  CHECK(g.dice[2] == 0.97);
  CHECK(*g.epi_mae_px == 1.26);
  CHECK(*g.epi_mae_um == 1.26 * 2.61);
  CHECK_FALSE(g.dm_mae_px.has_value());
  CHECK(std::isinf(g.psnr_db));
  CHECK(g.n_frames == 100);

  const std::string csv = report_csv(r);
  CHECK(csv.find("inf") != std::string::npos);
  const std::string table = render_report_table(r);
  CHECK(table.find("SSIM") != std::string::npos);
  CHECK(table.find("PSNR") != std::string::npos);
}

TEST_CASE("frame score csv has one row per frame under a fixed header", "[metrics]") {
  std::mt19937_64 rng(34);
  Evaluator ev;
  for (int f = 0; f < 2; ++f) {
    LabelMap truth = random_ordered_labels(32, 32, rng);
    ProbMap probs(32, 32);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) probs.at(truth.at(r, c), r, c) = 1.0f;
    BoundaryTrace t = extract_trace(truth, 2.61);
    ev.add(truth, truth, probs, t, t);
  }
  const std::string csv = frame_scores_csv(ev.frame_scores());
  CHECK(csv.rfind(kFrameCsvHeader, 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 rows
}
