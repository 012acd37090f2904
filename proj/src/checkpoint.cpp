#include "gcunet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gcunet {
namespace {

constexpr char kMagic[4] = {'G', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a64(const char* p, size_t n) {
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ull;
  }
  return h;
}

void put_u32(std::string& b, uint32_t x) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, uint64_t x) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_f64(std::string& b, double x) {
  uint64_t u;
  std::memcpy(&u, &x, 8);
  put_u64(b, u);
}

void put_f32s(std::string& b, const float* p, size_t n) {
  // little-endian host assumed, same as the tensor file payloads
  b.append(reinterpret_cast<const char*>(p), n * 4);
}

struct Cursor {
  const char* p;
  size_t n, at = 0;
  std::string path;

  void need(size_t k) const {
    if (at + k > n) fail(ErrorKind::integrity, "truncated checkpoint: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(static_cast<unsigned char>(p[at + i])) << (8 * i);
    at += 4;
    return x;
  }
  uint64_t u64() {
    need(8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(static_cast<unsigned char>(p[at + i])) << (8 * i);
    at += 8;
    return x;
  }
  double f64() {
    uint64_t u = u64();
    double x;
    std::memcpy(&x, &u, 8);
    return x;
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(p[at++]);
  }
  std::string str(size_t k) {
    need(k);
    std::string s(p + at, k);
    at += k;
    return s;
  }
  void f32s(float* out, size_t k) {
    need(k * 4);
    std::memcpy(out, p + at, k * 4);
    at += k * 4;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg,
                     const Registry<float>& params, const OptSnapshot* opt) {
  std::string b;
  b.append(kMagic, 4);
  put_u32(b, kVersion);
  std::string text = serialize_config(cfg);
  put_u64(b, text.size());
  b += text;
  put_u64(b, params.items.size());
  for (const auto& [name, t] : params.items) {
    put_u32(b, static_cast<uint32_t>(name.size()));
    b += name;
    put_u32(b, static_cast<uint32_t>(t.rank()));
    for (int64_t d = 0; d < t.rank(); ++d) put_u64(b, static_cast<uint64_t>(t.dim(d)));
    put_f32s(b, t.data(), static_cast<size_t>(t.numel()));
  }
  b.push_back(opt ? 1 : 0);
  if (opt) {
    if (opt->m.size() != params.items.size() || opt->v.size() != params.items.size())
      fail(ErrorKind::usage, "optimizer snapshot does not match parameter list");
    put_u64(b, opt->step);
    put_u64(b, opt->epoch);
    put_f64(b, opt->best_metric);
    put_u64(b, opt->bad_epochs);
    for (size_t i = 0; i < params.items.size(); ++i) {
      const size_t n = static_cast<size_t>(params.items[i].second.numel());
      if (opt->m[i].size() != n || opt->v[i].size() != n)
        fail(ErrorKind::usage, "moment shape does not match parameter: " + params.items[i].first);
      put_f32s(b, opt->m[i].data(), n);
      put_f32s(b, opt->v[i].data(), n);
    }
  }
  put_u64(b, fnv1a64(b.data(), b.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint for writing: " + path);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) fail(ErrorKind::io, "short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint: " + path);
  std::string b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (b.size() < 16 + 8) fail(ErrorKind::integrity, "truncated checkpoint: " + path);
  if (std::memcmp(b.data(), kMagic, 4) != 0)
    fail(ErrorKind::integrity, "not a checkpoint file: " + path);

  Cursor c{b.data(), b.size() - 8, 4, path};
  uint32_t version = c.u32();
  if (version != kVersion)
    fail(ErrorKind::version, "unsupported checkpoint version " + std::to_string(version) + ": " + path);

  uint64_t stored = 0;
  std::memcpy(&stored, b.data() + b.size() - 8, 8);
  if (stored != fnv1a64(b.data(), b.size() - 8))
    fail(ErrorKind::integrity, "checksum mismatch, checkpoint corrupted: " + path);

  Checkpoint ck;
  ck.config_text = c.str(c.u64());
  ck.config = parse_config_text(ck.config_text, path + ":config");

  uint64_t n_tensors = c.u64();
  ck.tensors.reserve(n_tensors);
  for (uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = c.str(c.u32());
    uint32_t rank = c.u32();
    if (rank > 8) fail(ErrorKind::integrity, "implausible tensor rank in checkpoint: " + path);
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      uint64_t e = c.u64();
      if (e == 0 || e > (1ull << 32)) fail(ErrorKind::integrity, "bad tensor extent in checkpoint: " + path);
      shape[d] = static_cast<int64_t>(e);
      numel *= shape[d];
    }
    Tensor<float> t(shape);
    c.f32s(t.data(), static_cast<size_t>(numel));
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }

  if (c.u8()) {
    OptSnapshot opt;
    opt.step = c.u64();
    opt.epoch = c.u64();
    opt.best_metric = c.f64();
    opt.bad_epochs = c.u64();
    opt.m.resize(ck.tensors.size());
    opt.v.resize(ck.tensors.size());
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
      const size_t n = static_cast<size_t>(ck.tensors[i].second.numel());
      opt.m[i].resize(n);
      opt.v[i].resize(n);
      c.f32s(opt.m[i].data(), n);
      c.f32s(opt.v[i].data(), n);
    }
    ck.opt = std::move(opt);
  }
  if (c.at != c.n) fail(ErrorKind::integrity, "trailing bytes in checkpoint: " + path);
  return ck;
}

void apply_checkpoint(const Checkpoint& ck, Registry<float>& params) {
  if (ck.tensors.size() != params.items.size())
    fail(ErrorKind::integrity, "checkpoint holds " + std::to_string(ck.tensors.size()) +
                                   " tensors but the model has " + std::to_string(params.items.size()));
  for (const auto& [name, src] : ck.tensors) {
    Tensor<float>* dst = params.find(name);
    if (!dst) fail(ErrorKind::integrity, "checkpoint tensor has no matching parameter: " + name);
    if (dst->shape() != src.shape())
      fail(ErrorKind::integrity, "shape mismatch for parameter " + name + ": checkpoint " +
                                     shape_str(src.shape()) + " vs model " + shape_str(dst->shape()));
    std::copy(src.values().begin(), src.values().end(), dst->values().begin());
  }
}

}  // namespace gcunet
