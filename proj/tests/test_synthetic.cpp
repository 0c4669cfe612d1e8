#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "crackkw/synthetic.hpp"

using namespace crackkw;

namespace {

CrackSample noisy_copy(const CrackSample& s, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  CrackSample out = s;
  for (auto& v : out.image.storage()) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
  return out;
}

}  // namespace

TEST(Generate, DeterministicAndConsistent) {
  const auto a = generate(123, 64), b = generate(123, 64);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
  ASSERT_EQ(a.boxes.size(), b.boxes.size());
  int with_cracks = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = generate(derive_seed(7, seed), 64);
    EXPECT_EQ(check_consistency(s), "") << seed;
    with_cracks += !s.boxes.empty();
    for (double v : s.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_GT(with_cracks, 800);
  EXPECT_THROW(generate(1, 8), std::invalid_argument);
}

TEST(Generate, ZeroCracksGiveEmptyMask) {
  Difficulty d;
  d.min_cracks = d.max_cracks = 0;
  const auto s = generate(5, 32, d);
  EXPECT_TRUE(s.boxes.empty());
  for (double v : s.mask.data()) EXPECT_EQ(v, 0.0);
}

TEST(Boxes, ComponentsMergeAndTinyOnesVanish) {
  Tensor m(Shape{6, 8}, 0.0);
  // Diagonal neighbours join under 8-connectivity.
  m[0 * 8 + 0] = m[1 * 8 + 1] = m[2 * 8 + 2] = 1;
  // A lone pixel, erased at min size 2.
  m[5 * 8 + 7] = 1;
  // Two L shapes whose boxes overlap although the pixels never touch.
  m[0 * 8 + 5] = m[0 * 8 + 6] = m[0 * 8 + 7] = m[1 * 8 + 7] = m[2 * 8 + 7] = 1;
  m[2 * 8 + 4] = m[3 * 8 + 4] = m[3 * 8 + 5] = 1;
  Tensor copy = m;
  auto boxes = boxes_from_mask(copy, 2);
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_EQ(boxes[0].x1, 0.0);
  EXPECT_EQ(boxes[0].x2, 3.0);
  EXPECT_EQ(boxes[0].y2, 3.0);
  EXPECT_EQ(boxes[1].x1, 4.0);
  EXPECT_EQ(boxes[1].x2, 8.0);
  EXPECT_EQ(boxes[1].y2, 4.0);
  EXPECT_EQ(copy[5 * 8 + 7], 0.0);
}

TEST(Augment, IdentityDrawChangesNothing) {
  const auto s = generate(9, 64);
  Rng rng(1);
  const auto out = apply_augment(s, AugmentDraw{}, rng);
  EXPECT_EQ(out.image, s.image);
  EXPECT_EQ(out.mask, s.mask);
  ASSERT_EQ(out.boxes.size(), s.boxes.size());
  for (std::size_t i = 0; i < s.boxes.size(); ++i) EXPECT_EQ(out.boxes[i].x1, s.boxes[i].x1);
}

TEST(Augment, HorizontalFlipMirrorsBoxes) {
  Difficulty d;
  d.background_p = 0.0;
  const auto s = generate(11, 64, d);
  ASSERT_FALSE(s.boxes.empty());
  Rng rng(1);
  AugmentDraw flip;
  flip.hflip = true;
  const auto out = apply_augment(s, flip, rng);
  ASSERT_EQ(out.boxes.size(), s.boxes.size());
  std::multiset<std::array<double, 4>> want, got;
  for (const auto& b : s.boxes) want.insert({64 - b.x2, b.y1, 64 - b.x1, b.y2});
  for (const auto& b : out.boxes) got.insert({b.x1, b.y1, b.x2, b.y2});
  EXPECT_EQ(want, got);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) EXPECT_EQ(out.image[y * 64 + x], s.image[y * 64 + 63 - x]);
}

TEST(Augment, RandomDrawsKeepConsistency) {
  AugmentConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto s = generate(derive_seed(3, seed), 64);
    const auto out = augment(s, cfg, rng);
    EXPECT_EQ(check_consistency(out), "") << seed;
    for (double v : out.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  Rng rng(0);
  AugmentDraw rot;
  rot.angle_deg = 30.0;
  EXPECT_EQ(check_consistency(apply_augment(generate(4, 64), rot, rng)), "");
}

TEST(Phash, IdenticalImagesAndBitLayout) {
  const auto s = generate(21, 64);
  EXPECT_EQ(phash64(s.image), phash64(s.image));
  // A pure horizontal cosine at frequency 1 lifts exactly one AC coefficient
  // (row 0, column 1) above the median of zeros.
  Tensor wave(Shape{32, 32});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      wave[y * 32 + x] = 0.5 + 0.4 * std::cos(std::numbers::pi * (2.0 * x + 1.0) / 64.0);
  const auto h = phash64(wave);
  EXPECT_TRUE(h & (std::uint64_t{1} << 62));
  EXPECT_TRUE(h & (std::uint64_t{1} << 63));  // DC is positive
}

TEST(Phash, NearDuplicatesCloseAndIndependentPairsFar) {
  int near = 0, far = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = generate(derive_seed(100, seed), 64);
    near += hamming(phash64(s.image), phash64(noisy_copy(s, 0.02, seed).image)) <= 5;
    const auto t = generate(derive_seed(200, seed), 64);
    far += hamming(phash64(s.image), phash64(t.image)) > 5;
  }
  EXPECT_GE(near, 190);
  EXPECT_GE(far, 198);
}

TEST(Dedup, GreedyScan) {
  EXPECT_EQ(dedup({0x0, 0xFFFF, 0xFFFF0000}), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(dedup({0xF0F0, 0x1234, 0xF0F0}), (std::vector<std::size_t>{0, 1}));
  // A~B (4 bits), B~C (4 bits), A and C 8 bits apart: only A's neighbourhood matters.
  const std::uint64_t A = 0, B = 0xF, C = 0xFF;
  EXPECT_EQ(dedup({A, B, C}), (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(dedup({A}, 65), std::invalid_argument);
}

TEST(Split, LargestRemainder) {
  auto sizes = [](std::size_t n) {
    const auto s = split(n, 1);
    return std::array<std::size_t, 3>{s.train.size(), s.val.size(), s.test.size()};
  };
  EXPECT_EQ(sizes(10), (std::array<std::size_t, 3>{7, 2, 1}));
  EXPECT_EQ(sizes(100), (std::array<std::size_t, 3>{70, 20, 10}));
  EXPECT_EQ(sizes(11), (std::array<std::size_t, 3>{8, 2, 1}));
  const auto s = split(137, 9);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 137u);
  EXPECT_EQ(*all.rbegin(), 136u);
  EXPECT_THROW(split(0, 1), std::invalid_argument);
}

TEST(Subsample, SizesAndNesting) {
  std::vector<std::size_t> items(100);
  std::iota(items.begin(), items.end(), 1000);
  EXPECT_EQ(subsample(items, 1.0, 3).size(), 100u);
  const auto half = subsample(items, 0.5, 3);
  EXPECT_EQ(std::set<std::size_t>(half.begin(), half.end()).size(), 50u);
  const auto small = subsample(items, 0.3, 3);
  const std::set<std::size_t> hs(half.begin(), half.end()), ss(small.begin(), small.end());
  EXPECT_EQ(ss.size(), 30u);
  EXPECT_TRUE(std::includes(hs.begin(), hs.end(), ss.begin(), ss.end()));
  EXPECT_THROW(subsample(items, 0.0, 3), std::invalid_argument);
}

TEST(Dataset, BuildSaveLoadRoundTrip) {
  const auto ds = build_dataset(40, 32, 5);
  EXPECT_EQ(ds.generated, 40u);
  EXPECT_EQ(ds.indices("train").size() + ds.indices("val").size() + ds.indices("test").size(), ds.samples.size());
  const auto dir = std::filesystem::temp_directory_path() / "crackkw_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.split, ds.split);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, ds.samples[i].image);
    EXPECT_EQ(back.samples[i].mask, ds.samples[i].mask);
    ASSERT_EQ(back.samples[i].boxes.size(), ds.samples[i].boxes.size());
    for (std::size_t k = 0; k < ds.samples[i].boxes.size(); ++k) EXPECT_EQ(back.samples[i].boxes[k].x2, ds.samples[i].boxes[k].x2);
  }
  std::filesystem::remove_all(dir);
}

TEST(Pgm, ReadsEightBitBinary) {
  const auto path = std::filesystem::temp_directory_path() / "crackkw_test.pgm";
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n# comment\n3 2\n255\n";
    const unsigned char px[6] = {0, 51, 255, 102, 204, 153};
    os.write(reinterpret_cast<const char*>(px), 6);
  }
  const Tensor t = read_pgm(path);
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_DOUBLE_EQ(t[1], 0.2);
  EXPECT_EQ(t[2], 1.0);
  std::filesystem::remove(path);
}
