#include "gcunet/data.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gcunet/conv.hpp"
#include "gcunet/ops.hpp"

namespace fs = std::filesystem;

namespace gcunet {
namespace {

constexpr uint32_t kNsegVersion = 1;
enum : uint32_t { kDtypeF32 = 0, kDtypeF64 = 1, kDtypeU8 = 2 };

void put_u32_le(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64_be(std::string& buf, uint64_t v) {
  for (int i = 7; i >= 0; --i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

uint64_t get_u64_be(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | p[i];
  return v;
}

void write_nseg_raw(const std::string& path, uint32_t dtype, const Shape& shape, const void* data,
                    size_t elem_size) {
  std::string buf;
  buf.append("NSEG");
  put_u32_le(buf, kNsegVersion);
  put_u32_le(buf, dtype);
  put_u32_le(buf, static_cast<uint32_t>(shape.size()));
  for (int64_t e : shape) {
    if (e < 1) fail_shape("nseg extents must be positive: " + shape_str(shape));
    put_u64_be(buf, static_cast<uint64_t>(e));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  f.write(static_cast<const char*>(data),
          static_cast<std::streamsize>(static_cast<size_t>(numel_of(shape)) * elem_size));
  if (!f) fail(ErrorKind::io, "short write: " + path);
}

struct NsegRaw {
  uint32_t dtype = 0;
  Shape shape;
  std::vector<char> payload;
};

NsegRaw read_nseg_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open: " + path);
  unsigned char head[16];
  if (!f.read(reinterpret_cast<char*>(head), 16))
    fail(ErrorKind::integrity, "truncated nseg header: " + path);
  if (std::memcmp(head, "NSEG", 4) != 0) fail(ErrorKind::integrity, "not an nseg file: " + path);
  uint32_t version = get_u32_le(head + 4);
  if (version != kNsegVersion)
    fail(ErrorKind::version,
         "unsupported nseg version " + std::to_string(version) + " in " + path);
  NsegRaw raw;
  raw.dtype = get_u32_le(head + 8);
  uint32_t rank = get_u32_le(head + 12);
  if (raw.dtype > kDtypeU8) fail(ErrorKind::integrity, "unknown nseg dtype in " + path);
  if (rank < 1 || rank > 8) fail(ErrorKind::integrity, "bad nseg rank in " + path);
  size_t elem = raw.dtype == kDtypeF32 ? 4 : raw.dtype == kDtypeF64 ? 8 : 1;
  uint64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    unsigned char ext[8];
    if (!f.read(reinterpret_cast<char*>(ext), 8))
      fail(ErrorKind::integrity, "truncated nseg extents: " + path);
    uint64_t e = get_u64_be(ext);
    if (e == 0 || e > (1ull << 32)) fail(ErrorKind::integrity, "bad nseg extent in " + path);
    raw.shape.push_back(static_cast<int64_t>(e));
    numel *= e;
  }
  if (numel > (1ull << 32)) fail(ErrorKind::integrity, "nseg payload too large: " + path);
  raw.payload.resize(static_cast<size_t>(numel) * elem);
  if (!f.read(raw.payload.data(), static_cast<std::streamsize>(raw.payload.size())))
    fail(ErrorKind::integrity, "truncated nseg payload: " + path);
  return raw;
}

}  // namespace

void write_nseg(const std::string& path, const Shape& shape, const float* data) {
  write_nseg_raw(path, kDtypeF32, shape, data, sizeof(float));
}

void write_nseg(const std::string& path, const Shape& shape, const uint8_t* data) {
  write_nseg_raw(path, kDtypeU8, shape, data, 1);
}

Tensor<float> read_nseg_image(const std::string& path) {
  NsegRaw raw = read_nseg_raw(path);
  if (raw.shape.size() != 3 || raw.shape[0] != 3)
    fail_shape("image tensor in " + path + " must be [3,H,W], got " + shape_str(raw.shape));
  Tensor<float> img(raw.shape);
  size_t n = img.values().size();
  if (raw.dtype == kDtypeF32) {
    std::memcpy(img.data(), raw.payload.data(), n * 4);
  } else if (raw.dtype == kDtypeF64) {
    const double* src = reinterpret_cast<const double*>(raw.payload.data());
    for (size_t i = 0; i < n; ++i) img.data()[i] = static_cast<float>(src[i]);
  } else {
    fail(ErrorKind::integrity, "image tensor in " + path + " must be f32 or f64");
  }
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(img.data()[i]))
      fail(ErrorKind::integrity, "non-finite image value in " + path);
  return img;
}

LabelMask read_nseg_mask(const std::string& path) {
  NsegRaw raw = read_nseg_raw(path);
  if (raw.dtype != kDtypeU8) fail(ErrorKind::integrity, "mask tensor in " + path + " must be u8");
  if (raw.shape.size() != 2)
    fail_shape("mask tensor in " + path + " must be [H,W], got " + shape_str(raw.shape));
  LabelMask m(raw.shape);
  const unsigned char* src = reinterpret_cast<const unsigned char*>(raw.payload.data());
  for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = src[i];
  return m;
}

namespace {

void paint_shape(LabelMask& mask, int64_t size, int32_t label, Rng& rng) {
  double lo = static_cast<double>(size) * 0.25, hi = static_cast<double>(size) * 0.75;
  double cy = rng.uniform(lo, hi), cx = rng.uniform(lo, hi);
  double rmin = std::max(4.0, static_cast<double>(size) / 6.0);
  double rmax = static_cast<double>(size) / 3.2;
  uint32_t kind = rng.below(3);
  double ry = rng.uniform(rmin, rmax), rx = rng.uniform(rmin, rmax);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double dy = (static_cast<double>(y) - cy), dx = (static_cast<double>(x) - cx);
      bool inside = false;
      if (kind == 0) {
        double q = (dy / ry) * (dy / ry) + (dx / rx) * (dx / rx);
        inside = q <= 1.0;
      } else if (kind == 1) {
        inside = std::abs(dy) <= ry && std::abs(dx) <= rx;
      } else {
        double r = std::max(ry, rx);
        double d2 = dy * dy + dx * dx;
        inside = d2 <= r * r && d2 >= (0.35 * r) * (0.35 * r);
      }
      if (inside) mask.v[static_cast<size_t>(y * size + x)] = label;
    }
}

SegSample make_sample(int64_t i, int64_t size, int64_t K, Rng rng) {
  SegSample s;
  int64_t fg = K - 1;
  int64_t shapes = std::min<int64_t>(fg, 3);
  s.mask = LabelMask(Shape{size, size});
  std::vector<int32_t> want;
  for (int64_t j = 0; j < shapes; ++j) want.push_back(static_cast<int32_t>(1 + (i + j) % fg));
  // paint low labels first so rarer high labels are never fully occluded
  std::sort(want.begin(), want.end());
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::fill(s.mask.v.begin(), s.mask.v.end(), 0);
    for (int64_t j = 0; j < shapes; ++j) paint_shape(s.mask, size, want[static_cast<size_t>(j)], rng);
    std::vector<int64_t> count(static_cast<size_t>(K), 0);
    for (int32_t v : s.mask.v) ++count[static_cast<size_t>(v)];
    bool ok = count[0] > 0;
    for (int32_t w : want) ok = ok && count[static_cast<size_t>(w)] > 0;
    if (ok) break;
  }
  // Mean intensity rises with the label; each foreground class also carries an
  // oriented stripe texture so regions stay recognizable away from their borders.
  s.image = Tensor<float>(Shape{3, size, size});
  int64_t hw = size * size;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t p = 0; p < hw; ++p) {
      int32_t lab = s.mask.v[static_cast<size_t>(p)];
      double base = 0.15 + 0.6 * static_cast<double>(lab) / static_cast<double>(K - 1);
      double tex = 0.0;
      if (lab > 0) {
        int64_t phase = (lab % 2 == 1) ? p % size : p / size;
        tex = ((phase / 4) % 2 == 0) ? 0.15 : -0.15;
      }
      double v = base + tex + 0.05 * rng.normal();
      s.image.data()[static_cast<size_t>(c * hw + p)] =
          static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth-%04lld", static_cast<long long>(i));
  s.id = buf;
  return s;
}

}  // namespace

Dataset generate_synthetic(int64_t n, int64_t size, int64_t K, uint64_t seed) {
  if (n < 1) fail_config("generate_synthetic needs n >= 1, got " + std::to_string(n));
  if (K < 2 || K > 255) fail_config("generate_synthetic needs 2 <= K <= 255");
  if (size < 8) fail_config("generate_synthetic needs size >= 8, got " + std::to_string(size));
  Dataset ds;
  ds.num_classes = K;
  ds.img_size = size;
  Rng root(seed, 9);
  for (int64_t i = 0; i < n; ++i)
    ds.samples.push_back(make_sample(i, size, K, root.split("sample", static_cast<uint64_t>(i))));
  return ds;
}

std::string save_dataset(const Dataset& ds, const std::string& dir) {
  if (ds.samples.empty()) fail(ErrorKind::usage, "refusing to save an empty dataset");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory " + dir + ": " + ec.message());
  std::ostringstream man;
  man << "nseg-manifest v1\n";
  man << "k " << ds.num_classes << "\n";
  man << "size " << ds.img_size << "\n";
  man << "split " << ds.split << "\n";
  for (const auto& s : ds.samples) {
    std::string img_rel = s.id + ".img.nseg";
    std::string msk_rel = s.id + ".msk.nseg";
    write_nseg((fs::path(dir) / img_rel).string(), s.image.shape(), s.image.data());
    std::vector<uint8_t> u8(s.mask.v.size());
    for (size_t i = 0; i < u8.size(); ++i) {
      if (s.mask.v[i] < 0 || s.mask.v[i] > 255)
        fail(ErrorKind::integrity, "label outside u8 range in sample " + s.id);
      u8[i] = static_cast<uint8_t>(s.mask.v[i]);
    }
    write_nseg((fs::path(dir) / msk_rel).string(), s.mask.shape, u8.data());
    man << "sample " << s.id << " " << img_rel << " " << msk_rel << " " << s.spacing_y << " "
        << s.spacing_x << "\n";
  }
  std::string manifest_path = (fs::path(dir) / "manifest.txt").string();
  std::ofstream f(manifest_path, std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open for writing: " + manifest_path);
  f << man.str();
  if (!f) fail(ErrorKind::io, "short write: " + manifest_path);
  return manifest_path;
}

LabelMask resize_mask_nearest(const LabelMask& m, int64_t Ho, int64_t Wo) {
  if (m.shape.size() != 2) fail_shape("resize_mask_nearest expects [H,W]");
  if (Ho < 1 || Wo < 1) fail_shape("resize_mask_nearest target must be positive");
  int64_t H = m.shape[0], W = m.shape[1];
  LabelMask out(Shape{Ho, Wo});
  for (int64_t y = 0; y < Ho; ++y) {
    int64_t sy = std::min(H - 1, static_cast<int64_t>((static_cast<double>(y) + 0.5) *
                                                      static_cast<double>(H) /
                                                      static_cast<double>(Ho)));
    for (int64_t x = 0; x < Wo; ++x) {
      int64_t sx = std::min(W - 1, static_cast<int64_t>((static_cast<double>(x) + 0.5) *
                                                        static_cast<double>(W) /
                                                        static_cast<double>(Wo)));
      out.v[static_cast<size_t>(y * Wo + x)] = m.v[static_cast<size_t>(sy * W + sx)];
    }
  }
  return out;
}

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) fail(ErrorKind::io, "cannot open manifest: " + manifest_path);
  std::string line;
  if (!std::getline(f, line) || line != "nseg-manifest v1")
    fail(ErrorKind::version, "unrecognized manifest header in " + manifest_path);
  Dataset ds;
  fs::path root = fs::path(manifest_path).parent_path();
  std::vector<std::array<std::string, 3>> entries;  // id, image path, mask path
  std::vector<std::pair<double, double>> spacings;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    auto where = [&] { return manifest_path + ":" + std::to_string(lineno); };
    if (key == "k") {
      if (!(ss >> ds.num_classes) || ds.num_classes < 2)
        fail(ErrorKind::integrity, "bad k at " + where());
    } else if (key == "size") {
      if (!(ss >> ds.img_size) || ds.img_size < 1)
        fail(ErrorKind::integrity, "bad size at " + where());
    } else if (key == "split") {
      if (!(ss >> ds.split)) fail(ErrorKind::integrity, "bad split at " + where());
    } else if (key == "sample") {
      std::array<std::string, 3> e;
      if (!(ss >> e[0] >> e[1] >> e[2]))
        fail(ErrorKind::integrity, "bad sample line at " + where());
      double sy = 1.0, sx = 1.0;
      ss >> sy >> sx;
      for (const auto& prev : entries)
        if (prev[0] == e[0])
          fail(ErrorKind::integrity, "duplicate sample id " + e[0] + " at " + where());
      entries.push_back(e);
      spacings.push_back({sy, sx});
    } else {
      fail(ErrorKind::integrity, "unknown manifest key '" + key + "' at " + where());
    }
  }
  if (ds.num_classes == 0) fail(ErrorKind::integrity, "manifest missing k: " + manifest_path);
  if (ds.img_size == 0) fail(ErrorKind::integrity, "manifest missing size: " + manifest_path);
  if (entries.empty()) fail(ErrorKind::integrity, "manifest lists no samples: " + manifest_path);
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    SegSample s;
    s.id = e[0];
    std::string img_path = (root / e[1]).string();
    std::string msk_path = (root / e[2]).string();
    if (!fs::exists(img_path))
      fail(ErrorKind::io, "sample " + s.id + ": missing image file " + img_path);
    if (!fs::exists(msk_path))
      fail(ErrorKind::io, "sample " + s.id + ": missing mask file " + msk_path);
    s.image = read_nseg_image(img_path);
    s.mask = read_nseg_mask(msk_path);
    if (s.image.dim(1) != s.mask.shape[0] || s.image.dim(2) != s.mask.shape[1])
      fail_shape("sample " + s.id + ": image " + shape_str(s.image.shape()) +
                 " and mask " + shape_str(s.mask.shape) + " extents disagree");
    if (s.image.dim(1) != ds.img_size || s.image.dim(2) != ds.img_size) {
      Tensor<float> batched = reshape(s.image, {1, 3, s.image.dim(1), s.image.dim(2)});
      s.image = reshape(bilinear_resize(batched, ds.img_size, ds.img_size),
                        {3, ds.img_size, ds.img_size});
      s.mask = resize_mask_nearest(s.mask, ds.img_size, ds.img_size);
    }
    if (s.mask.max_label() >= ds.num_classes)
      fail(ErrorKind::integrity, "sample " + s.id + ": label " +
                                     std::to_string(s.mask.max_label()) + " >= k " +
                                     std::to_string(ds.num_classes));
    s.spacing_y = spacings[i].first;
    s.spacing_x = spacings[i].second;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

template <class V>
void flip_lr(std::vector<V>& v, int64_t C, int64_t H, int64_t W) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W / 2; ++x)
        std::swap(v[static_cast<size_t>((c * H + y) * W + x)],
                  v[static_cast<size_t>((c * H + y) * W + (W - 1 - x))]);
}

template <class V>
void flip_ud(std::vector<V>& v, int64_t C, int64_t H, int64_t W) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H / 2; ++y)
      for (int64_t x = 0; x < W; ++x)
        std::swap(v[static_cast<size_t>((c * H + y) * W + x)],
                  v[static_cast<size_t>((c * H + (H - 1 - y)) * W + x)]);
}

// one quarter turn: out(y, x) = in(x, H-1-y); square extents only
template <class V>
void rot90_once(std::vector<V>& v, int64_t C, int64_t H, int64_t W) {
  std::vector<V> src = v;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        v[static_cast<size_t>((c * H + y) * W + x)] =
            src[static_cast<size_t>((c * H + x) * W + (H - 1 - y))];
}

}  // namespace

SegSample augment(const SegSample& s, Rng& rng) {
  int64_t H = s.image.dim(1), W = s.image.dim(2);
  bool hf = rng.uniform() < 0.5;
  bool vf = rng.uniform() < 0.5;
  uint32_t quarter = H == W ? rng.below(4) : 2 * rng.below(2);
  SegSample out;
  out.id = s.id;
  out.spacing_y = s.spacing_y;
  out.spacing_x = s.spacing_x;
  out.image = s.image.clone_values();
  out.mask = s.mask;
  std::vector<float>& iv = out.image.values();
  if (hf) {
    flip_lr(iv, 3, H, W);
    flip_lr(out.mask.v, 1, H, W);
  }
  if (vf) {
    flip_ud(iv, 3, H, W);
    flip_ud(out.mask.v, 1, H, W);
  }
  for (uint32_t q = 0; q < quarter; ++q) {
    rot90_once(iv, 3, H, W);
    rot90_once(out.mask.v, 1, H, W);
  }
  return out;
}

std::vector<std::vector<int64_t>> plan_batches(int64_t n, int64_t batch_size, bool shuffle,
                                               Rng& rng) {
  if (n < 1) fail(ErrorKind::usage, "cannot batch an empty dataset");
  if (batch_size < 1) fail_config("batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle)
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[rng.below(static_cast<uint32_t>(i + 1))]);
  std::vector<std::vector<int64_t>> out;
  for (int64_t at = 0; at < n; at += batch_size) {
    int64_t end = std::min(n, at + batch_size);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

}  // namespace gcunet
