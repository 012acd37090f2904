#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gcunet/mask.hpp"
#include "gcunet/rng.hpp"
#include "gcunet/tensor.hpp"

namespace gcunet {

struct SegSample {
  Tensor<float> image;  // [3,H,W], values in [0,1]
  LabelMask mask;       // [H,W]
  std::string id;
  double spacing_y = 1.0;
  double spacing_x = 1.0;
};

struct Dataset {
  std::vector<SegSample> samples;
  int64_t num_classes = 0;
  int64_t img_size = 0;
  std::string split = "train";

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

// one tensor per file: "NSEG" magic, u32 LE version/dtype/rank, u64 BE extents,
// then little-endian row-major scalars. dtype 0=f32, 1=f64, 2=u8.
void write_nseg(const std::string& path, const Shape& shape, const float* data);
void write_nseg(const std::string& path, const Shape& shape, const uint8_t* data);
Tensor<float> read_nseg_image(const std::string& path);
LabelMask read_nseg_mask(const std::string& path);

// n samples of [3,size,size] with 1..K-1 random ellipse/rectangle/annulus
// regions, label-correlated intensity plus gaussian noise; deterministic in seed
Dataset generate_synthetic(int64_t n, int64_t size, int64_t K, uint64_t seed);

// writes <id>.img.nseg / <id>.msk.nseg plus manifest.txt into dir
std::string save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& manifest_path);

// flips (p=0.5 each) and a rot90 multiple, shared by image and mask
SegSample augment(const SegSample& s, Rng& rng);

// index batches in manifest order, or a seeded shuffle; last batch may be short
std::vector<std::vector<int64_t>> plan_batches(int64_t n, int64_t batch_size, bool shuffle,
                                               Rng& rng);

LabelMask resize_mask_nearest(const LabelMask& m, int64_t Ho, int64_t Wo);

template <class S>
std::pair<Tensor<S>, LabelMask> make_batch(const Dataset& ds, const std::vector<int64_t>& idx,
                                           Rng* aug_rng = nullptr) {
  if (idx.empty()) fail(ErrorKind::usage, "make_batch needs at least one sample index");
  int64_t H = ds.samples[0].image.dim(1), W = ds.samples[0].image.dim(2);
  int64_t B = static_cast<int64_t>(idx.size());
  Tensor<S> images(Shape{B, 3, H, W});
  LabelMask masks(Shape{B, H, W});
  for (int64_t b = 0; b < B; ++b) {
    if (idx[static_cast<size_t>(b)] < 0 || idx[static_cast<size_t>(b)] >= ds.size())
      fail(ErrorKind::usage, "batch index out of range");
    const SegSample& base = ds.samples[static_cast<size_t>(idx[static_cast<size_t>(b)])];
    SegSample s = aug_rng ? augment(base, *aug_rng) : base;
    if (s.image.dim(1) != H || s.image.dim(2) != W)
      fail_shape("dataset images disagree on extent: sample " + s.id);
    const float* src = s.image.data();
    S* dst = images.data() + b * 3 * H * W;
    for (int64_t i = 0; i < 3 * H * W; ++i) dst[i] = static_cast<S>(src[i]);
    std::copy(s.mask.v.begin(), s.mask.v.end(), masks.v.begin() + b * H * W);
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace gcunet
