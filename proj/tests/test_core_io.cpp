#include <catch_amalgamated.hpp>

#include <cstdint>
#include <fstream>
#include <random>

#include "octseg/core.hpp"
#include "octseg/io.hpp"
#include "test_util.hpp"

using namespace octseg;
using namespace octseg::testutil;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

TEST_CASE("geometry constants are mutually consistent", "[core]") {
  CHECK(kFrameWidth % kStripeWidth == 0);
  CHECK(kStripesPerFrame == 8);
  CHECK(kFrameHeight == 512);
  CHECK(kDefaultPixelPitchUm == 2.61);
}

TEST_CASE("mix_seed separates streams deterministically", "[core]") {
  CHECK(mix_seed(42, 1) == mix_seed(42, 1));
  CHECK(mix_seed(42, 1) != mix_seed(42, 2));
  CHECK(mix_seed(42, 1) != mix_seed(43, 1));
}

TEST_CASE("Frame::validate enforces the intensity contract", "[core]") {
  Frame f(4, 3);
  CHECK_NOTHROW(f.validate());

  SECTION("out-of-range intensity") {
    f.at(1, 2) = 1.5f;
    CHECK_THROWS_AS(f.validate(), ConfigError);
  }
  SECTION("non-finite intensity") {
    f.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(f.validate(), ConfigError);
  }
  SECTION("buffer does not match dimensions") {
    f.pixels.pop_back();
    CHECK_THROWS_AS(f.validate(), DimensionError);
  }
  SECTION("non-positive pitch") {
    f.pixel_pitch_um = 0.0;
    CHECK_THROWS_AS(f.validate(), ConfigError);
  }
  SECTION("non-positive dimensions") {
    Frame bad;
    CHECK_THROWS_AS(bad.validate(), DimensionError);
  }
}

TEST_CASE("LabelMap::validate rejects out-of-range classes", "[core]") {
  LabelMap m(4, 4);
  CHECK_NOTHROW(m.validate());
  m.at(2, 2) = 3;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  LabelMap short_buf(4, 4);
  short_buf.labels.pop_back();
  CHECK_THROWS_AS(short_buf.validate(), DimensionError);
}

TEST_CASE("validate_ordered accepts monotone columns only", "[core]") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 20; ++i) CHECK(validate_ordered(random_ordered_labels(16, 8, rng)));

  LabelMap all0(8, 4), all2(8, 4);
  for (auto& v : all2.labels) v = 2;
  CHECK(validate_ordered(all0));  // runs may be empty
  CHECK(validate_ordered(all2));

  LabelMap bad = random_ordered_labels(16, 8, rng);
  bad.at(0, 3) = 2;
  bad.at(1, 3) = 0;
  CHECK_FALSE(validate_ordered(bad));
}

TEST_CASE("ProbMap uses planar class-major storage", "[core]") {
  ProbMap pm(4, 5);
  pm.at(2, 3, 1) = 0.75f;
  CHECK(pm.probs[(2 * 4 + 3) * 5 + 1] == 0.75f);

  std::mt19937_64 rng(11);
  ProbMap rnd = random_probmap(6, 6, rng);
  CHECK(rnd.normalized());
  rnd.at(0, 0, 0) += 0.1f;
  CHECK_FALSE(rnd.normalized());
}

TEST_CASE("BoundaryTrace::validate enforces range and ordering", "[core]") {
  BoundaryTrace t(4);
  t.epi_row_px = {10.0, std::nullopt, 3.5, 2.0};
  t.dm_row_px = {20.0, std::nullopt, 3.5, 1.0};

  SECTION("epi above dm and missing columns pass") {
    t.dm_row_px[3] = 2.0;
    CHECK_NOTHROW(t.validate(32));
  }
  SECTION("epi below dm") { CHECK_THROWS_AS(t.validate(32), ConfigError); }
  SECTION("row beyond the frame") {
    t.dm_row_px[3] = 2.0;
    t.epi_row_px[0] = 32.0;
    CHECK_THROWS_AS(t.validate(32), ConfigError);
  }
  SECTION("mismatched interface widths") {
    t.dm_row_px.pop_back();
    CHECK_THROWS_AS(t.validate(32), DimensionError);
  }
}

TEST_CASE("BoundaryTrace equality is exact including missing cells", "[core]") {
  BoundaryTrace a(3), b(3);
  a.epi_row_px = {1.0, std::nullopt, 2.25};
  a.dm_row_px = {5.0, std::nullopt, 6.5};
  b = a;
  CHECK(a == b);
  b.epi_row_px[1] = 1.5;
  CHECK_FALSE(a == b);
}

// ---------------------------------------------------------------------------
// PNG / CSV / JSON round trips
// ---------------------------------------------------------------------------

TEST_CASE("frame save/load round-trips pixels and sidecar metadata", "[io]") {
  TempDir dir;
  std::mt19937_64 rng(3);
  Frame f = random_frame(32, 24, rng);
  f.pixel_pitch_um = 2.5;
  f.frame_id = 7;
  f.timestamp_s = 1.25;

  const fs::path p = dir / "frame.png";
  save_frame(f, p);
  REQUIRE(fs::exists(sidecar_path(p)));
  Frame g = load_frame(p);

  REQUIRE(g.height_px == f.height_px);
  REQUIRE(g.width_px == f.width_px);
  CHECK(g.pixel_pitch_um == 2.5);
  CHECK(g.frame_id == 7);
  CHECK(g.timestamp_s == 1.25);
  for (size_t i = 0; i < f.pixels.size(); ++i)
    CHECK(std::abs(g.pixels[i] - f.pixels[i]) <= 0.5f / 65535.0f + 1e-7f);
}

TEST_CASE("16-bit grid values survive a frame round trip exactly", "[io]") {
  TempDir dir;
  Frame f(8, 8);
  for (int i = 0; i < 64; ++i) f.pixels[i] = static_cast<float>(i * 1000) / 65535.0f;
  save_frame(f, dir / "q.png");
  Frame g = load_frame(dir / "q.png");
  for (int i = 0; i < 64; ++i) CHECK(g.pixels[i] == f.pixels[i]);
}

TEST_CASE("label map save/load is lossless", "[io]") {
  TempDir dir;
  std::mt19937_64 rng(5);
  LabelMap m = random_labels(40, 30, rng);
  save_labelmap(m, dir / "m.png");
  LabelMap g = load_labelmap(dir / "m.png");
  REQUIRE(g.height_px == m.height_px);
  REQUIRE(g.width_px == m.width_px);
  CHECK(g.labels == m.labels);
}

TEST_CASE("label load rejects class ids beyond the palette", "[io]") {
  TempDir dir;
  std::vector<uint8_t> data(16, 0);
  data[5] = 3;
  std::vector<PaletteEntry> wide = label_palette();
  wide.push_back({255, 255, 255});
  write_png_indexed8(dir / "bad.png", 4, 4, data.data(), wide);
  CHECK_THROWS_AS(load_labelmap(dir / "bad.png"), ParseError);
}

TEST_CASE("trace CSV round trip is bit-identical", "[io]") {
  TempDir dir;
  BoundaryTrace t(5, 2.61);
  t.epi_row_px = {0.0, 100.12345678901234, std::nullopt, 17.0, 1.0 / 3.0};
  t.dm_row_px = {1.0, 200.98765432109876, std::nullopt, 17.0, 2.0 / 3.0};
  save_trace(t, dir / "t.csv");
  BoundaryTrace g = load_trace(dir / "t.csv", 2.61);
  CHECK(g == t);
}

TEST_CASE("trace load rejects malformed input", "[io]") {
  TempDir dir;
  CHECK_THROWS_AS(load_trace(dir / "absent.csv"), IoError);

  {
    std::ofstream out(dir / "hdr.csv");
    out << "col,epi,dm\n0,1,2\n";
  }
  CHECK_THROWS_AS(load_trace(dir / "hdr.csv"), ParseError);

  {
    std::ofstream out(dir / "gap.csv");
    out << "column,epi_row_px,dm_row_px\n0,1,2\n2,3,4\n";
  }
  CHECK_THROWS_AS(load_trace(dir / "gap.csv"), ParseError);

  {
    std::ofstream out(dir / "num.csv");
    out << "column,epi_row_px,dm_row_px\n0,abc,2\n";
  }
  CHECK_THROWS_AS(load_trace(dir / "num.csv"), ParseError);
}

TEST_CASE("manifest round trip preserves items and split filtering", "[io]") {
  TempDir dir;
  Manifest m;
  m.subset = "hybrid";
  m.items = {{"frames/a.png", "masks/a.png", "traces/a.csv", "train"},
             {"frames/b.png", "masks/b.png", "traces/b.csv", "val"},
             {"frames/c.png", "masks/c.png", "traces/c.csv", "test"},
             {"frames/d.png", "masks/d.png", "traces/d.csv", "train"}};
  save_manifest(m, dir / "manifest.json");
  Manifest g = load_manifest(dir / "manifest.json");
  CHECK(g.subset == "hybrid");
  REQUIRE(g.items.size() == 4);
  CHECK(g.items[1].mask == "masks/b.png");
  CHECK(g.split_items("train").size() == 2);
  CHECK(g.split_items("val").size() == 1);
  CHECK(g.split_items("held").empty());
}

TEST_CASE("json helpers surface parse failures as ParseError", "[io]") {
  TempDir dir;
  {
    std::ofstream out(dir / "bad.json");
    out << "{ not json";
  }
  CHECK_THROWS_AS(read_json_file(dir / "bad.json"), ParseError);
  CHECK_THROWS_AS(read_json_file(dir / "absent.json"), IoError);

  {
    std::ofstream out(dir / "bad_manifest.json");
    out << "{\"subset\": \"x\"}";
  }
  CHECK_THROWS_AS(load_manifest(dir / "bad_manifest.json"), ParseError);
}

TEST_CASE("sidecar path swaps the extension only", "[io]") {
  CHECK(sidecar_path("a/b/frame.png") == fs::path("a/b/frame.json"));
}
