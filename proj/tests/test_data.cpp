#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gcunet/data.hpp"
#include "gcunet/metrics.hpp"

using namespace gcunet;
namespace fs = std::filesystem;

static fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("gcunet_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

static ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::usage;
}

TEST_CASE("nseg round trip and byte layout") {
  auto dir = fresh_dir("nseg");
  std::vector<float> vals = {1.5f, -2.0f, 0.0f, 3.25f, 7.0f, -0.125f};
  write_nseg((dir / "t.nseg").string(), {3, 1, 2}, vals.data());

  std::ifstream f(dir / "t.nseg", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 16 + 3 * 8 + 6 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "NSEG");
  CHECK(bytes[4] == 1);   // version u32 LE
  CHECK(bytes[8] == 0);   // dtype f32
  CHECK(bytes[12] == 3);  // rank
  CHECK(bytes[16] == 0);  // extents are big-endian u64: 3 sits in the last byte
  CHECK(bytes[23] == 3);
  CHECK(bytes[31] == 1);
  CHECK(bytes[39] == 2);

  Tensor<float> back = read_nseg_image((dir / "t.nseg").string());
  CHECK(back.shape() == Shape{3, 1, 2});
  CHECK(back.values() == vals);

  std::vector<uint8_t> labels = {0, 1, 2, 1};
  write_nseg((dir / "m.nseg").string(), {2, 2}, labels.data());
  LabelMask m = read_nseg_mask((dir / "m.nseg").string());
  CHECK(m.shape == Shape{2, 2});
  CHECK(m.v == std::vector<int32_t>{0, 1, 2, 1});
}

TEST_CASE("nseg rejects malformed files with the right error kinds") {
  auto dir = fresh_dir("nseg_bad");
  auto write_bytes = [&](const std::string& name, const std::string& content) {
    std::ofstream f(dir / name, std::ios::binary);
    f << content;
    return (dir / name).string();
  };
  CHECK(kind_of([&] { read_nseg_image((dir / "absent.nseg").string()); }) == ErrorKind::io);
  auto junk = write_bytes("junk.nseg", "JUNKxxxxxxxxxxxxxxxxxxxx");
  CHECK(kind_of([&] { read_nseg_image(junk); }) == ErrorKind::integrity);
  auto trunc = write_bytes("trunc.nseg", "NSEG");
  CHECK(kind_of([&] { read_nseg_image(trunc); }) == ErrorKind::integrity);

  std::string v2 = "NSEG";
  v2 += std::string{2, 0, 0, 0};  // version 2
  v2 += std::string(8, 0);
  auto vers = write_bytes("v2.nseg", v2);
  CHECK(kind_of([&] { read_nseg_image(vers); }) == ErrorKind::version);

  // valid header but payload cut short
  std::vector<float> vals(6, 1.0f);
  write_nseg((dir / "short.nseg").string(), {3, 1, 2}, vals.data());
  auto all = [&] {
    std::ifstream f(dir / "short.nseg", std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }();
  write_bytes("short.nseg", all.substr(0, all.size() - 5));
  CHECK(kind_of([&] { read_nseg_image((dir / "short.nseg").string()); }) == ErrorKind::integrity);
}

TEST_CASE("synthetic generation covers labels deterministically") {
  Dataset ds = generate_synthetic(8, 64, 3, 0);
  REQUIRE(ds.size() == 8);
  CHECK(ds.num_classes == 3);
  std::set<int32_t> seen;
  for (const auto& s : ds.samples) {
    CHECK(s.image.shape() == Shape{3, 64, 64});
    CHECK(s.mask.shape == Shape{64, 64});
    std::set<int32_t> local;
    for (int32_t v : s.mask.v) {
      local.insert(v);
      seen.insert(v);
    }
    CHECK(local.count(0) == 1);        // background present
    CHECK(local.size() >= 2);          // at least one foreground region
    for (float v : s.image.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK(seen == std::set<int32_t>{0, 1, 2});

  Dataset again = generate_synthetic(8, 64, 3, 0);
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(again.samples[i].mask.v == ds.samples[i].mask.v);
    CHECK(again.samples[i].image.values() == ds.samples[i].image.values());
  }
  Dataset other = generate_synthetic(8, 64, 3, 1);
  CHECK(other.samples[0].mask.v != ds.samples[0].mask.v);
}

TEST_CASE("dataset save/load round trip is bit exact and idempotent") {
  auto dir = fresh_dir("roundtrip");
  Dataset ds = generate_synthetic(4, 32, 3, 5);
  std::string manifest = save_dataset(ds, dir.string());
  Dataset back = load_dataset(manifest);
  REQUIRE(back.size() == 4);
  CHECK(back.num_classes == 3);
  CHECK(back.img_size == 32);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(back.samples[i].id == ds.samples[i].id);
    CHECK(back.samples[i].mask.v == ds.samples[i].mask.v);
    CHECK(back.samples[i].image.values() == ds.samples[i].image.values());
  }
  Dataset twice = load_dataset(manifest);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(twice.samples[i].image.values() == back.samples[i].image.values());
}

TEST_CASE("manifest errors name the offender") {
  auto dir = fresh_dir("manifest_err");
  Dataset ds = generate_synthetic(2, 16, 2, 3);
  std::string manifest = save_dataset(ds, dir.string());

  fs::remove(dir / "synth-0001.img.nseg");
  try {
    load_dataset(manifest);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
    CHECK(std::string(e.what()).find("synth-0001") != std::string::npos);
  }

  std::ofstream f(dir / "dup.txt");
  f << "nseg-manifest v1\nk 2\nsize 16\n"
    << "sample a a.img a.msk\nsample a a.img a.msk\n";
  f.close();
  CHECK(kind_of([&] { load_dataset((dir / "dup.txt").string()); }) == ErrorKind::integrity);

  std::ofstream g(dir / "junk.txt");
  g << "nseg-manifest v1\nk 2\nsize 16\nwhatever 1\n";
  g.close();
  CHECK(kind_of([&] { load_dataset((dir / "junk.txt").string()); }) == ErrorKind::integrity);

  CHECK(kind_of([&] { load_dataset((dir / "absent.txt").string()); }) == ErrorKind::io);
}

TEST_CASE("declared size triggers resize on load") {
  auto dir = fresh_dir("resize");
  Dataset ds = generate_synthetic(2, 32, 3, 7);
  std::string manifest = save_dataset(ds, dir.string());
  // shrink the declared size; loader must resize on ingestion
  std::ifstream in(manifest);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto at = text.find("size 32");
  REQUIRE(at != std::string::npos);
  text.replace(at, 7, "size 16");
  std::ofstream out(manifest, std::ios::trunc);
  out << text;
  out.close();

  Dataset small = load_dataset(manifest);
  CHECK(small.img_size == 16);
  for (int64_t i = 0; i < 2; ++i) {
    CHECK(small.samples[i].image.shape() == Shape{3, 16, 16});
    CHECK(small.samples[i].mask.shape == Shape{16, 16});
    std::set<int32_t> src(ds.samples[i].mask.v.begin(), ds.samples[i].mask.v.end());
    for (int32_t v : small.samples[i].mask.v) CHECK(src.count(v) == 1);
  }
}

TEST_CASE("label range is validated on load") {
  auto dir = fresh_dir("label_range");
  Dataset ds = generate_synthetic(2, 16, 3, 11);
  bool has2 = false;
  for (int32_t v : ds.samples[1].mask.v) has2 = has2 || v == 2;
  REQUIRE(has2);  // sample 1 paints two shapes, one carrying label 2
  std::string manifest = save_dataset(ds, dir.string());
  std::ifstream in(manifest);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  text.replace(text.find("k 3"), 3, "k 2");
  std::ofstream out(manifest, std::ios::trunc);
  out << text;
  out.close();
  try {
    load_dataset(manifest);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::integrity);
    CHECK(std::string(e.what()).find("label 2") != std::string::npos);
  }
}

TEST_CASE("augmentation applies one permutation to image and mask") {
  Dataset ds = generate_synthetic(1, 24, 3, 13);
  SegSample s = ds.samples[0];
  // stamp channel 0 with the labels so co-location is directly checkable
  for (size_t p = 0; p < s.mask.v.size(); ++p)
    s.image.data()[p] = static_cast<float>(s.mask.v[p]);

  Rng rng(99);
  for (int trial = 0; trial < 16; ++trial) {
    SegSample a = augment(s, rng);
    std::vector<int64_t> before(3, 0), after(3, 0);
    for (int32_t v : s.mask.v) ++before[static_cast<size_t>(v)];
    for (int32_t v : a.mask.v) ++after[static_cast<size_t>(v)];
    CHECK(before == after);  // pure permutation
    for (size_t p = 0; p < a.mask.v.size(); ++p)
      CHECK(a.image.data()[p] == static_cast<float>(a.mask.v[p]));
  }
}

TEST_CASE("double horizontal flip is the identity") {
  Dataset ds = generate_synthetic(1, 16, 2, 17);
  const SegSample& s = ds.samples[0];
  // find a seed whose first draw set is (hflip, no vflip, no rotation)
  uint64_t seed = 0;
  for (;; ++seed) {
    Rng probe(seed);
    bool hf = probe.uniform() < 0.5;
    bool vf = probe.uniform() < 0.5;
    uint32_t q = probe.below(4);
    if (hf && !vf && q == 0) break;
  }
  Rng r1(seed);
  SegSample once = augment(s, r1);
  CHECK(once.mask.v != s.mask.v);
  Rng r2(seed);
  SegSample twice = augment(once, r2);
  CHECK(twice.mask.v == s.mask.v);
  CHECK(twice.image.values() == s.image.values());
}

TEST_CASE("shared augmentation preserves dsc") {
  Dataset ds = generate_synthetic(2, 20, 3, 19);
  SegSample m = ds.samples[0], t = ds.samples[1];
  for (uint64_t seed = 40; seed < 44; ++seed) {
    Rng r1(seed), r2(seed);
    SegSample am = augment(m, r1), at = augment(t, r2);
    for (int32_t cls : {1, 2})
      CHECK(dsc(am.mask, at.mask, cls) == dsc(m.mask, t.mask, cls));
  }
}

TEST_CASE("batch planning and materialization") {
  Rng rng(1);
  auto plan = plan_batches(10, 4, false, rng);
  REQUIRE(plan.size() == 3);
  CHECK(plan[0] == std::vector<int64_t>{0, 1, 2, 3});
  CHECK(plan[1] == std::vector<int64_t>{4, 5, 6, 7});
  CHECK(plan[2] == std::vector<int64_t>{8, 9});

  Rng ra(7), rb(7);
  auto pa = plan_batches(10, 3, true, ra);
  auto pb = plan_batches(10, 3, true, rb);
  CHECK(pa == pb);
  std::set<int64_t> all;
  for (auto& b : pa) all.insert(b.begin(), b.end());
  CHECK(all.size() == 10);

  CHECK_THROWS_AS(plan_batches(0, 4, false, rng), Error);
  CHECK_THROWS_AS(plan_batches(4, 0, false, rng), Error);

  Dataset ds = generate_synthetic(5, 16, 3, 23);
  auto [images, masks] = make_batch<double>(ds, {1, 3});
  CHECK(images.shape() == Shape{2, 3, 16, 16});
  CHECK(masks.shape == Shape{2, 16, 16});
  CHECK(images.data()[0] == doctest::Approx(static_cast<double>(ds.samples[1].image.data()[0])));
  CHECK(std::equal(masks.v.begin(), masks.v.begin() + 256, ds.samples[1].mask.v.begin()));
  CHECK_THROWS_AS(make_batch<double>(ds, {}), Error);
  CHECK_THROWS_AS(make_batch<double>(ds, {7}), Error);
}
