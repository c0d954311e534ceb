#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sdit/errors.hpp"

namespace sdit {

// Images normalized to [-1,1], stored [M,C,H,W] row-major in doubles.
struct Dataset {
  int64_t count = 0;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> data;
  std::string source;

  int64_t item_size() const { return channels * height * width; }
};

// Pixel mapping: 255 -> +1 and 0 -> -1 exactly.
inline double pixel_to_unit(uint8_t p) { return double(p) / 127.5 - 1.0; }
inline uint8_t unit_to_pixel(double x) {
  double c = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
  double v = (c + 1.0) * 127.5;
  int r = int(v + 0.5);
  return uint8_t(r < 0 ? 0 : (r > 255 ? 255 : r));
}

// IDX (big-endian) image file, magic 0x00000803. Labels, when given, must
// have magic 0x00000801 and a matching item count; they are validated and
// discarded (training is unconditional).
Dataset load_idx(const std::string& images_path,
                 const std::optional<std::string>& labels_path = {});

enum class ToyKind { blobs, bars };

// Deterministic desk-scale datasets. `bars`: one bright full row or column
// per image. `blobs`: a few Gaussian bumps on a dark background.
Dataset gen_toy_dataset(ToyKind kind, int64_t n, int64_t size, uint64_t seed,
                        int64_t channels = 1);

// Binary PGM (C=1) / PPM (C=3) grid with 2-pixel separators between cells.
// images is [n,C,H,W] in [-1,1] (values outside are clamped).
void write_image_grid(const std::vector<double>& images, int64_t n, int64_t C,
                      int64_t H, int64_t W, const std::string& path,
                      int64_t cols);

// ---------------------------------------------------------------------------
// Checkpoint container. Self-describing, little-endian payloads, trailing
// CRC32 over everything after the magic.

enum class DType : uint8_t { f32 = 0, f64 = 1 };

struct TensorBlob {
  DType dtype = DType::f64;
  std::vector<int64_t> dims;
  std::vector<uint8_t> raw;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }
  static TensorBlob from_f64(const std::vector<int64_t>& dims,
                             const std::vector<double>& v);
  static TensorBlob from_f32(const std::vector<int64_t>& dims,
                             const std::vector<float>& v);
  std::vector<double> to_f64() const;
  std::vector<float> to_f32() const;
};

struct Checkpoint {
  uint32_t version = 1;
  std::string config_text;  // canonical key-sorted `key = value` lines
  uint64_t step = 0;
  std::string rng_state;
  std::map<std::string, TensorBlob> tensors;  // params + optimizer moments
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sdit
