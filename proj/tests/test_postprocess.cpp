#include <catch_amalgamated.hpp>

#include <random>

#include "octseg/postprocess.hpp"
#include "test_util.hpp"

using namespace octseg;
using namespace octseg::testutil;

TEST_CASE("ordered decode agrees with exhaustive search", "[postprocess]") {
  std::mt19937_64 rng(404);

  SECTION("continuous probabilities, including hard zeros") {
    for (int trial = 0; trial < 60; ++trial) {
      ProbMap pm = random_probmap(16, 8, rng, trial % 3 == 0);
      DecodeResult fast = decode_ordered(pm);
      BruteDecode slow = brute_decode(pm);
      REQUIRE(fast.labels.labels == slow.labels.labels);
      REQUIRE(fast.epi_cut == slow.epi_cut);
      REQUIRE(fast.dm_cut == slow.dm_cut);
      for (int c = 0; c < 8; ++c) CHECK(fast.column_cost[c] == slow.column_cost[c]);
    }
  }
  SECTION("quantized probabilities with deliberate cost ties") {
    for (int trial = 0; trial < 40; ++trial) {
      ProbMap pm = quantized_probmap(16, 8, rng);
      DecodeResult fast = decode_ordered(pm);
      BruteDecode slow = brute_decode(pm);
      REQUIRE(fast.labels.labels == slow.labels.labels);
      REQUIRE(fast.epi_cut == slow.epi_cut);
      REQUIRE(fast.dm_cut == slow.dm_cut);
    }
  }
}

TEST_CASE("decode output always satisfies the layer ordering", "[postprocess]") {
  std::mt19937_64 rng(405);
  for (int trial = 0; trial < 20; ++trial) {
    ProbMap pm = random_probmap(24, 6, rng, true);
    DecodeResult dec = decode_ordered(pm);
    CHECK(validate_ordered(dec.labels));
    for (int c = 0; c < 6; ++c) {
      CHECK(dec.epi_cut[c] >= 0);
      CHECK(dec.epi_cut[c] <= dec.dm_cut[c]);
      CHECK(dec.dm_cut[c] <= 24);
    }
  }
}

TEST_CASE("a column with no evidence collapses to the deepest class", "[postprocess]") {
  ProbMap pm(6, 3);
  for (int k = 0; k < kNumClasses; ++k)
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 3; ++c) pm.at(k, r, c) = 1.0f / 3.0f;
  DecodeResult dec = decode_ordered(pm);
  for (int c = 0; c < 3; ++c) {
    CHECK(dec.epi_cut[c] == 0);
    CHECK(dec.dm_cut[c] == 0);
    for (int r = 0; r < 6; ++r) CHECK(dec.labels.at(r, c) == 2);
  }
}

TEST_CASE("decode is invariant to rescaling a column's probabilities", "[postprocess]") {
  std::mt19937_64 rng(406);
  ProbMap pm = random_probmap(16, 4, rng);
  DecodeResult base = decode_ordered(pm);

  // Uniform per-column scaling shifts every candidate cost by a constant.
  ProbMap scaled = pm;
  for (int k = 0; k < kNumClasses; ++k)
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 4; ++c) scaled.at(k, r, c) *= 0.125f;
  DecodeResult shifted = decode_ordered(scaled);
  CHECK(shifted.labels.labels == base.labels.labels);
  CHECK(shifted.epi_cut == base.epi_cut);
  CHECK(shifted.dm_cut == base.dm_cut);
}

TEST_CASE("decode validates its input", "[postprocess]") {
  CHECK_THROWS_AS(decode_ordered(ProbMap(0, 4)), DimensionError);
  CHECK_THROWS_AS(decode_ordered(ProbMap(4, 4, 2)), DimensionError);
}

TEST_CASE("argmax labelling takes the strongest class, first on ties", "[postprocess]") {
  ProbMap pm(2, 2);
  // (0,0): clear class 2; (0,1): tie 0 vs 1 -> 0; (1,0): clear class 1;
  // (1,1): tie 1 vs 2 -> 1.
  pm.at(2, 0, 0) = 0.8f;
  pm.at(0, 0, 1) = 0.5f;
  pm.at(1, 0, 1) = 0.5f;
  pm.at(1, 1, 0) = 0.9f;
  pm.at(1, 1, 1) = 0.45f;
  pm.at(2, 1, 1) = 0.45f;
  LabelMap lm = argmax_labels(pm);
  CHECK(lm.at(0, 0) == 2);
  CHECK(lm.at(0, 1) == 0);
  CHECK(lm.at(1, 0) == 1);
  CHECK(lm.at(1, 1) == 1);

  std::mt19937_64 rng(407);
  ProbMap rnd = random_probmap(12, 7, rng);
  LabelMap got = argmax_labels(rnd);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 7; ++c) {
      float best = -1.0f;
      int arg = 0;
      for (int k = 0; k < kNumClasses; ++k)
        if (rnd.at(k, r, c) > best) {
          best = rnd.at(k, r, c);
          arg = k;
        }
      CHECK(got.at(r, c) == arg);
    }
}

TEST_CASE("ordering violations are counted per column", "[postprocess]") {
  std::mt19937_64 rng(408);
  LabelMap ok = random_ordered_labels(16, 10, rng);
  CHECK(count_ordering_violations(ok) == 0);

  LabelMap bad = ok;
  bad.at(3, 2) = 2;
  bad.at(4, 2) = 0;  // violation in column 2
  bad.at(0, 7) = 1;
  bad.at(1, 7) = 0;  // violation in column 7
  bad.at(2, 7) = 2;  // still the same column: counted once
  CHECK(count_ordering_violations(bad) == 2);
}

TEST_CASE("trace extraction reads the cornea band edges", "[postprocess]") {
  LabelMap m(8, 3);
  // Column 0: band rows 2..5. Column 1: no cornea. Column 2: band 0..7.
  for (int r = 2; r <= 5; ++r) m.at(r, 0) = 1;
  for (int r = 6; r < 8; ++r) m.at(r, 0) = 2;
  for (int r = 0; r < 8; ++r) m.at(r, 1) = r < 4 ? 0 : 2;
  for (int r = 0; r < 8; ++r) m.at(r, 2) = 1;

  BoundaryTrace t = extract_trace(m, 2.61);
  CHECK(t.pixel_pitch_um == 2.61);
  CHECK(*t.epi_row_px[0] == 2.0);
  CHECK(*t.dm_row_px[0] == 5.0);
  CHECK_FALSE(t.epi_row_px[1].has_value());
  CHECK_FALSE(t.dm_row_px[1].has_value());
  CHECK(*t.epi_row_px[2] == 0.0);
  CHECK(*t.dm_row_px[2] == 7.0);

  LabelMap unordered(4, 1);
  unordered.at(0, 0) = 2;
  unordered.at(1, 0) = 1;
  CHECK_THROWS_AS(extract_trace(unordered), ContractError);
}

TEST_CASE("trace smoothing is a per-interface lower-median filter", "[postprocess]") {
  BoundaryTrace t(7);
  t.epi_row_px = {10.0, 11.0, 50.0, 12.0, 13.0, std::nullopt, 14.0};
  t.dm_row_px = {20.0, 21.0, 60.0, 22.0, 23.0, std::nullopt, 24.0};

  BoundaryTrace s = smooth_trace(t, 5);
  // Window at column 2 sees {50,11,12,10,13}; the median kills the spike.
  CHECK(*s.epi_row_px[2] == 12.0);
  CHECK(*s.dm_row_px[2] == 22.0);
  // Missing stays missing, and missing neighbours are skipped, not zeroed.
  CHECK_FALSE(s.epi_row_px[5].has_value());
  // Window at column 6 sees {13,14}: even count takes the lower value.
  CHECK(*s.epi_row_px[6] == 13.0);
  // Edge column 0 sees {10,11,50}: median 11.
  CHECK(*s.epi_row_px[0] == 11.0);

  CHECK_THROWS_AS(smooth_trace(t, 4), UsageError);
  CHECK_THROWS_AS(smooth_trace(t, 0), UsageError);

  // Window 1 is the identity.
  BoundaryTrace id = smooth_trace(t, 1);
  CHECK(id == t);
}

TEST_CASE("confidence scores probabilities along the interfaces", "[postprocess]") {
  std::mt19937_64 rng(409);
  LabelMap m = random_ordered_labels(32, 8, rng);
  BoundaryTrace t = extract_trace(m);

  SECTION("uniform probabilities score one third") {
    ProbMap uniform(32, 8);
    for (float& v : uniform.probs) v = 1.0f / 3.0f;
    const double conf = trace_confidence(m, uniform, t);
    CHECK(conf == Catch::Approx(1.0 / 3.0).margin(1e-6));
  }
  SECTION("one-hot probabilities score one") {
    ProbMap sharp(32, 8);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 8; ++c) sharp.at(m.at(r, c), r, c) = 1.0f;
    CHECK(trace_confidence(m, sharp, t) == 1.0);
  }
  SECTION("sharper maps never score lower") {
    ProbMap soft(32, 8), sharp(32, 8);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 8; ++c)
        for (int k = 0; k < kNumClasses; ++k) {
          soft.at(k, r, c) = k == m.at(r, c) ? 0.5f : 0.25f;
          sharp.at(k, r, c) = k == m.at(r, c) ? 0.9f : 0.05f;
        }
    CHECK(trace_confidence(m, sharp, t) > trace_confidence(m, soft, t));
  }
  SECTION("an all-missing trace scores zero") {
    LabelMap empty(32, 8);  // all class 0 -> no interfaces anywhere
    ProbMap uniform(32, 8);
    for (float& v : uniform.probs) v = 1.0f / 3.0f;
    BoundaryTrace none = extract_trace(empty);
    CHECK(trace_confidence(empty, uniform, none) == 0.0);
  }
  SECTION("shape mismatches are rejected") {
    ProbMap small(16, 8);
    CHECK_THROWS_AS(trace_confidence(m, small, t), DimensionError);
    BoundaryTrace narrow(4);
    ProbMap uniform(32, 8);
    CHECK_THROWS_AS(trace_confidence(m, uniform, narrow), DimensionError);
  }
}
