#include "sdit/data_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "sdit/rng.hpp"

namespace sdit {

namespace {

uint32_t read_be32(std::istream& is, const char* what) {
  uint8_t b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw TruncatedFile(std::string("idx: short read in ") + what);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::optional<std::string>& labels_path) {
  std::ifstream is(images_path, std::ios::binary);
  if (!is) throw IoError("idx: cannot open " + images_path);
  const uint32_t magic = read_be32(is, "magic");
  if (magic != 0x00000803u)
    throw BadMagic("idx: bad image magic in " + images_path);
  const uint32_t m = read_be32(is, "count");
  const uint32_t h = read_be32(is, "height");
  const uint32_t w = read_be32(is, "width");
  if (m < 1) throw DimMismatch("idx: empty image file");
  Dataset ds;
  ds.count = m;
  ds.channels = 1;
  ds.height = h;
  ds.width = w;
  ds.source = images_path;
  const int64_t total = int64_t(m) * h * w;
  std::vector<uint8_t> buf(total);
  if (!is.read(reinterpret_cast<char*>(buf.data()), total))
    throw TruncatedFile("idx: payload shorter than header promises");
  ds.data.resize(total);
  for (int64_t i = 0; i < total; ++i) ds.data[i] = pixel_to_unit(buf[i]);

  if (labels_path) {
    std::ifstream ls(*labels_path, std::ios::binary);
    if (!ls) throw IoError("idx: cannot open " + *labels_path);
    const uint32_t lmagic = read_be32(ls, "label magic");
    if (lmagic != 0x00000801u)
      throw BadMagic("idx: bad label magic in " + *labels_path);
    const uint32_t lm = read_be32(ls, "label count");
    if (lm != m)
      throw DimMismatch("idx: label count " + std::to_string(lm) +
                        " vs image count " + std::to_string(m));
    std::vector<uint8_t> lbuf(lm);
    if (!ls.read(reinterpret_cast<char*>(lbuf.data()), lm))
      throw TruncatedFile("idx: label payload truncated");
    // labels are validated and dropped; training is unconditional
  }
  return ds;
}

Dataset gen_toy_dataset(ToyKind kind, int64_t n, int64_t size, uint64_t seed,
                        int64_t channels) {
  if (size != 8 && size != 16 && size != 28)
    throw BadParam("toy dataset: size must be 8, 16 or 28");
  if (n < 1) throw BadParam("toy dataset: n must be >= 1");
  if (channels != 1 && channels != 3)
    throw BadParam("toy dataset: channels must be 1 or 3");
  Dataset ds;
  ds.count = n;
  ds.channels = channels;
  ds.height = size;
  ds.width = size;
  ds.source = std::string("toy:") + (kind == ToyKind::bars ? "bars" : "blobs");
  ds.data.assign(n * channels * size * size, -1.0);
  Rng rng(seed);
  for (int64_t item = 0; item < n; ++item) {
    double* img = ds.data.data() + item * ds.item_size();
    if (kind == ToyKind::bars) {
      const bool horizontal = rng.uniform01() < 0.5;
      const int64_t pos = rng.uniform_int(size);
      for (int64_t c = 0; c < channels; ++c)
        for (int64_t i = 0; i < size; ++i) {
          const int64_t r = horizontal ? pos : i;
          const int64_t col = horizontal ? i : pos;
          img[(c * size + r) * size + col] = 1.0;
        }
    } else {
      const int64_t bumps = 1 + rng.uniform_int(3);
      for (int64_t b = 0; b < bumps; ++b) {
        const double cy = rng.uniform(0.0, double(size - 1));
        const double cx = rng.uniform(0.0, double(size - 1));
        const double sig = rng.uniform(0.6, double(size) / 5.0);
        const double amp = rng.uniform(0.8, 2.0);
        const int64_t ch = channels == 1 ? 0 : rng.uniform_int(channels);
        for (int64_t i = 0; i < size; ++i)
          for (int64_t j = 0; j < size; ++j) {
            const double d2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
            double& px = img[(ch * size + i) * size + j];
            px = std::min(1.0, px + amp * std::exp(-d2 / (2 * sig * sig)));
          }
      }
    }
  }
  return ds;
}

void write_image_grid(const std::vector<double>& images, int64_t n, int64_t C,
                      int64_t H, int64_t W, const std::string& path,
                      int64_t cols) {
  if (n < 1 || cols < 1) throw BadParam("image grid: need n >= 1, cols >= 1");
  if (C != 1 && C != 3) throw BadParam("image grid: channels must be 1 or 3");
  if (int64_t(images.size()) != n * C * H * W)
    throw BadParam("image grid: buffer size mismatch");
  const int64_t rows = (n + cols - 1) / cols;
  const int64_t sep = 2;
  const int64_t gw = cols * W + (cols - 1) * sep;
  const int64_t gh = rows * H + (rows - 1) * sep;
  std::vector<uint8_t> canvas(gh * gw * C, 128);  // gray separators/background
  for (int64_t item = 0; item < n; ++item) {
    const int64_t r = item / cols, c = item % cols;
    const int64_t oy = r * (H + sep), ox = c * (W + sep);
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j)
        for (int64_t ch = 0; ch < C; ++ch)
          canvas[((oy + i) * gw + ox + j) * C + ch] =
              unit_to_pixel(images[((item * C + ch) * H + i) * W + j]);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("image grid: cannot open " + path);
  os << (C == 1 ? "P5" : "P6") << "\n" << gw << " " << gh << "\n255\n";
  os.write(reinterpret_cast<const char*>(canvas.data()), canvas.size());
  if (!os) throw IoError("image grid: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Checkpoint container.

TensorBlob TensorBlob::from_f64(const std::vector<int64_t>& dims,
                                const std::vector<double>& v) {
  TensorBlob b;
  b.dtype = DType::f64;
  b.dims = dims;
  b.raw.resize(v.size() * sizeof(double));
  std::memcpy(b.raw.data(), v.data(), b.raw.size());
  return b;
}

TensorBlob TensorBlob::from_f32(const std::vector<int64_t>& dims,
                                const std::vector<float>& v) {
  TensorBlob b;
  b.dtype = DType::f32;
  b.dims = dims;
  b.raw.resize(v.size() * sizeof(float));
  std::memcpy(b.raw.data(), v.data(), b.raw.size());
  return b;
}

std::vector<double> TensorBlob::to_f64() const {
  std::vector<double> out(numel());
  if (dtype == DType::f64) {
    std::memcpy(out.data(), raw.data(), raw.size());
  } else {
    std::vector<float> tmp(numel());
    std::memcpy(tmp.data(), raw.data(), raw.size());
    for (size_t i = 0; i < tmp.size(); ++i) out[i] = tmp[i];
  }
  return out;
}

std::vector<float> TensorBlob::to_f32() const {
  std::vector<float> out(numel());
  if (dtype == DType::f32) {
    std::memcpy(out.data(), raw.data(), raw.size());
  } else {
    std::vector<double> tmp(numel());
    std::memcpy(tmp.data(), raw.data(), raw.size());
    for (size_t i = 0; i < tmp.size(); ++i) out[i] = float(tmp[i]);
  }
  return out;
}

namespace {

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(uint8_t(v >> (8 * i)));
}
void put_bytes(std::vector<uint8_t>& b, const void* p, size_t n) {
  const uint8_t* q = static_cast<const uint8_t*>(p);
  b.insert(b.end(), q, q + n);
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > b.size()) throw TruncatedFile("checkpoint: truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n);
    std::vector<uint8_t> v(b.begin() + pos, b.begin() + pos + n);
    pos += n;
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<uint8_t> body;
  put_u32(body, ck.version);
  put_u64(body, ck.config_text.size());
  put_bytes(body, ck.config_text.data(), ck.config_text.size());
  put_u64(body, ck.step);
  put_u64(body, ck.rng_state.size());
  put_bytes(body, ck.rng_state.data(), ck.rng_state.size());
  put_u32(body, uint32_t(ck.tensors.size()));
  for (const auto& [name, blob] : ck.tensors) {  // std::map: sorted, canonical
    put_u32(body, uint32_t(name.size()));
    put_bytes(body, name.data(), name.size());
    body.push_back(uint8_t(blob.dtype));
    put_u32(body, uint32_t(blob.dims.size()));
    for (int64_t d : blob.dims) put_u64(body, uint64_t(d));
    put_bytes(body, blob.raw.data(), blob.raw.size());
  }
  const uint32_t crc =
      uint32_t(::crc32(0L, body.data(), uInt(body.size())));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for write");
  os.write("SDIT", 4);
  os.write(reinterpret_cast<const char*>(body.data()), body.size());
  uint8_t tail[4] = {uint8_t(crc), uint8_t(crc >> 8), uint8_t(crc >> 16),
                     uint8_t(crc >> 24)};
  os.write(reinterpret_cast<const char*>(tail), 4);
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  std::vector<uint8_t> all((std::istreambuf_iterator<char>(is)),
                           std::istreambuf_iterator<char>());
  if (all.size() < 8) throw TruncatedFile("checkpoint: file too small");
  if (std::memcmp(all.data(), "SDIT", 4) != 0)
    throw BadMagic("checkpoint: bad magic");
  const size_t body_len = all.size() - 8;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= uint32_t(all[all.size() - 4 + i]) << (8 * i);
  const uint32_t crc =
      uint32_t(::crc32(0L, all.data() + 4, uInt(body_len)));
  if (crc != stored) throw ChecksumMismatch("checkpoint: CRC32 mismatch");

  std::vector<uint8_t> body(all.begin() + 4, all.end() - 4);
  Reader r{body};
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != 1)
    throw VersionMismatch("checkpoint: unsupported version " +
                          std::to_string(ck.version));
  ck.config_text = r.str(r.u64());
  ck.step = r.u64();
  ck.rng_state = r.str(r.u64());
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str(r.u32());
    TensorBlob blob;
    const uint8_t dt = r.bytes(1)[0];
    if (dt > 1) throw TruncatedFile("checkpoint: bad dtype tag");
    blob.dtype = DType(dt);
    const uint32_t rank = r.u32();
    blob.dims.resize(rank);
    for (uint32_t d = 0; d < rank; ++d) blob.dims[d] = int64_t(r.u64());
    const size_t bytes =
        size_t(blob.numel()) * (blob.dtype == DType::f64 ? 8 : 4);
    blob.raw = r.bytes(bytes);
    ck.tensors.emplace(name, std::move(blob));
  }
  return ck;
}

}  // namespace sdit
