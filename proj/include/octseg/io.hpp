#pragma once

// On-disk formats: frames as 16-bit grayscale PNG with a JSON metadata
// sidecar, label maps as 8-bit paletted PNG with raw class ids, boundary
// traces as CSV, dataset manifests as JSON. Everything here is inspectable
// with standard tools and roundtrips bit-exactly.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <png.h>

#include <json.hpp>

#include "octseg/core.hpp"

namespace octseg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PNG primitives
// ---------------------------------------------------------------------------

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const fs::path& path, const char* mode) {
    fp = std::fopen(path.string().c_str(), mode);
    if (!fp) throw IoError("cannot open " + path.string());
  }
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

inline std::vector<png_bytep> row_pointers(uint8_t* data, int height, size_t row_bytes) {
  std::vector<png_bytep> rows(height);
  for (int r = 0; r < height; ++r) rows[r] = data + r * row_bytes;
  return rows;
}

}  // namespace detail

inline void write_png_gray16(const fs::path& path, int height, int width,
                             const uint16_t* data) {
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write error for " + path.string());
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if constexpr (std::endian::native == std::endian::little) png_set_swap(png);
  auto rows = detail::row_pointers(reinterpret_cast<uint8_t*>(const_cast<uint16_t*>(data)),
                                   height, static_cast<size_t>(width) * 2);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Gray16Image {
  int height = 0;
  int width = 0;
  std::vector<uint16_t> data;
};

inline Gray16Image read_png_gray16(const fs::path& path) {
  detail::PngFile file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("malformed PNG: " + path.string());
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(png, info) != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("expected 16-bit grayscale PNG: " + path.string());
  }
  Gray16Image img;
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.data.resize(static_cast<size_t>(img.height) * img.width);
  if constexpr (std::endian::native == std::endian::little) png_set_swap(png);
  auto rows = detail::row_pointers(reinterpret_cast<uint8_t*>(img.data.data()), img.height,
                                   static_cast<size_t>(img.width) * 2);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

struct PaletteEntry {
  uint8_t r, g, b;
};

inline void write_png_indexed8(const fs::path& path, int height, int width,
                               const uint8_t* data, const std::vector<PaletteEntry>& palette) {
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write error for " + path.string());
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> plte(palette.size());
  for (size_t i = 0; i < palette.size(); ++i)
    plte[i] = {palette[i].r, palette[i].g, palette[i].b};
  png_set_PLTE(png, info, plte.data(), static_cast<int>(plte.size()));
  png_write_info(png, info);
  auto rows = detail::row_pointers(const_cast<uint8_t*>(data), height,
                                   static_cast<size_t>(width));
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Indexed8Image {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // raw palette indices
};

inline Indexed8Image read_png_indexed8(const fs::path& path) {
  detail::PngFile file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("malformed PNG: " + path.string());
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_PALETTE) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("expected paletted PNG: " + path.string());
  }
  png_set_packing(png);  // expand 1/2/4-bit indices to one byte each
  png_read_update_info(png, info);
  Indexed8Image img;
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.data.resize(static_cast<size_t>(img.height) * img.width);
  auto rows = detail::row_pointers(img.data.data(), img.height, static_cast<size_t>(img.width));
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_rgb8(const fs::path& path, int height, int width, const uint8_t* rgb) {
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write error for " + path.string());
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto rows = detail::row_pointers(const_cast<uint8_t*>(rgb), height,
                                   static_cast<size_t>(width) * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const fs::path& path, const json& j, int indent = 2) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(indent) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Frame save/load: 16-bit grayscale PNG + <name>.json sidecar
// ---------------------------------------------------------------------------

inline fs::path sidecar_path(const fs::path& frame_path) {
  fs::path p = frame_path;
  p.replace_extension(".json");
  return p;
}

inline void save_frame(const Frame& frame, const fs::path& path) {
  std::vector<uint16_t> q(frame.pixel_count());
  for (size_t i = 0; i < q.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, frame.pixels[i]));
    q[i] = static_cast<uint16_t>(std::lround(v * 65535.0f));
  }
  write_png_gray16(path, frame.height_px, frame.width_px, q.data());
  json meta = {{"pixel_pitch_um", frame.pixel_pitch_um},
               {"frame_id", frame.frame_id},
               {"timestamp_s", frame.timestamp_s}};
  write_json_file(sidecar_path(path), meta);
}

inline Frame load_frame(const fs::path& path) {
  Gray16Image img = read_png_gray16(path);
  Frame frame(img.height, img.width);
  for (size_t i = 0; i < img.data.size(); ++i)
    frame.pixels[i] = static_cast<float>(img.data[i]) / 65535.0f;
  fs::path side = sidecar_path(path);
  if (fs::exists(side)) {
    json meta = read_json_file(side);
    frame.pixel_pitch_um = meta.value("pixel_pitch_um", kDefaultPixelPitchUm);
    frame.frame_id = meta.value("frame_id", int64_t{0});
    frame.timestamp_s = meta.value("timestamp_s", 0.0);
  }
  return frame;
}

// ---------------------------------------------------------------------------
// LabelMap save/load: 8-bit paletted PNG, pixel values are class ids
// ---------------------------------------------------------------------------

inline const std::vector<PaletteEntry>& label_palette() {
  static const std::vector<PaletteEntry> palette = {
      {24, 24, 24},     // 0: above-cornea
      {250, 180, 60},   // 1: cornea band
      {70, 130, 240},   // 2: below-DM
  };
  return palette;
}

inline void save_labelmap(const LabelMap& map, const fs::path& path) {
  write_png_indexed8(path, map.height_px, map.width_px, map.labels.data(), label_palette());
}

inline LabelMap load_labelmap(const fs::path& path) {
  Indexed8Image img = read_png_indexed8(path);
  LabelMap map(img.height, img.width);
  map.labels = std::move(img.data);
  for (uint8_t v : map.labels)
    if (v >= kNumClasses) throw ParseError("label PNG has class id out of range: " + path.string());
  return map;
}

// ---------------------------------------------------------------------------
// BoundaryTrace save/load: CSV `column,epi_row_px,dm_row_px`, empty = MISSING
// ---------------------------------------------------------------------------

inline void save_trace(const BoundaryTrace& trace, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "column,epi_row_px,dm_row_px\n";
  char buf[96];
  for (int c = 0; c < trace.width(); ++c) {
    out << c << ',';
    if (trace.epi_row_px[c]) {
      std::snprintf(buf, sizeof(buf), "%.17g", *trace.epi_row_px[c]);
      out << buf;
    }
    out << ',';
    if (trace.dm_row_px[c]) {
      std::snprintf(buf, sizeof(buf), "%.17g", *trace.dm_row_px[c]);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline BoundaryTrace load_trace(const fs::path& path,
                                double pixel_pitch_um = kDefaultPixelPitchUm) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty trace CSV: " + path.string());
  if (line.rfind("column,epi_row_px,dm_row_px", 0) != 0)
    throw ParseError("bad trace CSV header in " + path.string());
  std::vector<std::optional<double>> epi, dm;
  int expected_col = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string col_s, epi_s, dm_s;
    std::getline(ss, col_s, ',');
    std::getline(ss, epi_s, ',');
    std::getline(ss, dm_s, ',');
    int col;
    try {
      col = std::stoi(col_s);
    } catch (const std::exception&) {
      throw ParseError("bad column index in " + path.string() + ": " + col_s);
    }
    if (col != expected_col)
      throw ParseError("non-contiguous columns in " + path.string());
    ++expected_col;
    auto parse_cell = [&](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      try {
        return std::stod(s);
      } catch (const std::exception&) {
        throw ParseError("bad row value in " + path.string() + ": " + s);
      }
    };
    epi.push_back(parse_cell(epi_s));
    dm.push_back(parse_cell(dm_s));
  }
  BoundaryTrace trace(static_cast<int>(epi.size()), pixel_pitch_um);
  trace.epi_row_px = std::move(epi);
  trace.dm_row_px = std::move(dm);
  return trace;
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct ManifestItem {
  std::string frame;  // paths relative to the manifest directory
  std::string mask;
  std::string trace;
  std::string split;  // train | val | test
};

struct Manifest {
  std::string subset;
  std::vector<ManifestItem> items;

  std::vector<ManifestItem> split_items(const std::string& split) const {
    std::vector<ManifestItem> out;
    for (const auto& it : items)
      if (it.split == split) out.push_back(it);
    return out;
  }
};

inline void to_json(json& j, const ManifestItem& it) {
  j = {{"frame", it.frame}, {"mask", it.mask}, {"trace", it.trace}, {"split", it.split}};
}

inline void from_json(const json& j, ManifestItem& it) {
  j.at("frame").get_to(it.frame);
  j.at("mask").get_to(it.mask);
  j.at("trace").get_to(it.trace);
  j.at("split").get_to(it.split);
}

inline void to_json(json& j, const Manifest& m) {
  j = {{"subset", m.subset}, {"items", m.items}};
}

inline void from_json(const json& j, Manifest& m) {
  j.at("subset").get_to(m.subset);
  j.at("items").get_to(m.items);
}

inline void save_manifest(const Manifest& m, const fs::path& path) {
  write_json_file(path, json(m));
}

inline Manifest load_manifest(const fs::path& path) {
  try {
    return read_json_file(path).get<Manifest>();
  } catch (const json::exception& e) {
    throw ParseError("bad manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace octseg
