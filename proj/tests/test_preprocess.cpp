#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include "convoher2/error.hpp"
#include "convoher2/image_io.hpp"
#include "convoher2/preprocess.hpp"
#include "support.hpp"

using namespace convoher2;
using convoher2::fixtures::TempDir;

namespace {

ImageTensor constant_raw(int side, float value) {
  ImageTensor t;
  t.height = side;
  t.width = side;
  t.range = RangeTag::Raw0To255;
  t.data.assign(static_cast<std::size_t>(side) * side * kChannels, value);
  return t;
}

ImageTensor ramp_raw(int side) {
  ImageTensor t = constant_raw(side, 0.0F);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(i % 251);
  return t;
}

DatasetManifest small_manifest(const TempDir& dir, std::size_t train_per_class, std::size_t test_per_class) {
  fixtures::CorpusLayout layout;
  layout.train.fill(train_per_class);
  layout.test.fill(test_per_class);
  fixtures::write_corpus(dir.path(), layout);
  return scan_dataset(dir.path(), StainModality::HE);
}

}  // namespace

TEST(Resize, LargeSourceBecomes256) {
  TempDir dir("resize");
  encode_rgb(dir / "big.png", fixtures::block_image(1024, 5));
  const ImageTensor t = decode_resize(dir / "big.png");
  EXPECT_EQ(t.width, 256);
  EXPECT_EQ(t.height, 256);
  EXPECT_EQ(t.data.size(), 256U * 256U * 3U);
  EXPECT_EQ(t.range, RangeTag::Raw0To255);
}

TEST(Resize, ConstantImageStaysConstant) {
  const ImageTensor t = resize_bilinear(constant_raw(300, 128.0F), 256);
  for (float v : t.data) ASSERT_EQ(v, 128.0F);
}

TEST(Decode, TruncatedFilesAreDecodeErrors) {
  TempDir dir("trunc");
  for (const char* name : {"x.png", "x.jpg"}) {
    const auto path = dir / name;
    encode_rgb(path, fixtures::block_image(64, 9));
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    try {
      decode_rgb(path);
      ADD_FAILURE() << name << " decoded";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::DecodeError) << name;
    }
  }
}

TEST(Decode, MissingFileIsIoError) {
  try {
    decode_rgb("/nonexistent/convoher2.png");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
  }
}

TEST(Decode, PngRoundTripIsLossless) {
  TempDir dir("png");
  const RgbImage img = fixtures::block_image(40, 2);
  encode_rgb(dir / "a.png", img);
  const RgbImage back = decode_rgb(dir / "a.png");
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Normalize, AffineMap) {
  ImageTensor t = constant_raw(2, 0.0F);
  t.data = {0.0F, 255.0F, 127.5F, 64.0F, 0.0F, 0.0F, 0.0F, 0.0F, 0.0F, 0.0F, 0.0F, 0.0F};
  const ImageTensor n = normalize(t);
  EXPECT_EQ(n.range, RangeTag::NormalizedMinus1To1);
  EXPECT_FLOAT_EQ(n.data[0], -1.0F);
  EXPECT_FLOAT_EQ(n.data[1], 1.0F);
  EXPECT_FLOAT_EQ(n.data[2], 0.0F);
  EXPECT_NEAR(n.data[3], -0.49804, 1e-5);
}

TEST(Normalize, RangeTagGuards) {
  const ImageTensor n = normalize(constant_raw(4, 64.0F));
  for (float v : n.data) ASSERT_NEAR(v, 64.0 / 127.5 - 1.0, 1e-7);
  EXPECT_THROW(normalize(n), Error);
  const ImageTensor back = denormalize(n);
  EXPECT_NEAR(back.data[0], 64.0F, 1e-4);
}

TEST(OneHot, Definition) {
  EXPECT_EQ(one_hot(Her2Score::from_index(0)), (LabelVector{1, 0, 0, 0}));
  EXPECT_EQ(one_hot(Her2Score::from_label("2+")), (LabelVector{0, 0, 1, 0}));
  EXPECT_EQ(one_hot(Her2Score::from_label("3+")), (LabelVector{0, 0, 0, 1}));
}

TEST(Augment, DisabledIsIdentity) {
  const ImageTensor img = normalize(ramp_raw(32));
  std::mt19937_64 rng(1);
  const ImageTensor out = augment(img, AugmentPolicy::disabled(), rng);
  EXPECT_EQ(out.data, img.data);
}

TEST(Augment, HalfTurnTwiceRestores) {
  AugmentPolicy p;
  p.rotation_degrees = {180};
  p.horizontal_flip = false;
  p.vertical_flip = false;
  p.scale_min = p.scale_max = 1.0;
  const ImageTensor img = ramp_raw(31);
  std::mt19937_64 rng(4);
  const ImageTensor twice = augment(augment(img, p, rng), p, rng);
  EXPECT_EQ(twice.data, img.data);
}

TEST(Augment, QuarterTurnMovesPixels) {
  AugmentPolicy p;
  p.rotation_degrees = {90};
  p.horizontal_flip = false;
  p.scale_min = p.scale_max = 1.0;
  const ImageTensor img = ramp_raw(5);
  std::mt19937_64 rng(0);
  const ImageTensor r = augment(img, p, rng);
  // Counter-clockwise: out(y, x) = in(x, W - 1 - y).
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) {
      for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(r.data[(y * 5 + x) * 3 + c], img.data[(x * 5 + (4 - y)) * 3 + c]);
      }
    }
  }
}

TEST(Augment, SeededAndShapePreserving) {
  const AugmentPolicy p;
  const ImageTensor img = normalize(ramp_raw(64));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const ImageTensor x = augment(img, p, a);
    const ImageTensor y = augment(img, p, b);
    EXPECT_EQ(x.data, y.data);
    EXPECT_EQ(x.width, 64);
    EXPECT_EQ(x.height, 64);
    EXPECT_EQ(x.range, RangeTag::NormalizedMinus1To1);
    for (float v : x.data) ASSERT_TRUE(v >= -1.0F && v <= 1.0F);
  }
}

TEST(Augment, PolicyValidation) {
  AugmentPolicy p;
  p.scale_min = 1.05;
  EXPECT_THROW(p.validate(), Error);
  AugmentPolicy q;
  q.rotation_degrees.clear();
  EXPECT_THROW(q.validate(), Error);
}

TEST(Batches, SizesKeepPartialBatch) {
  EXPECT_EQ(batch_sizes(977, 256), (std::vector<std::size_t>{256, 256, 256, 209}));
  EXPECT_EQ(batch_sizes(1, 256), (std::vector<std::size_t>{1}));
  EXPECT_TRUE(batch_sizes(0, 256).empty());
  EXPECT_THROW(batch_sizes(3, 0), Error);
}

TEST(Batches, EpochOrderIsPermutationAndReplayable) {
  const auto a = epoch_order(500, 11, 3, true);
  const auto b = epoch_order(500, 11, 3, true);
  const auto c = epoch_order(500, 11, 4, true);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  // seed + epoch is the only input.
  EXPECT_EQ(epoch_order(500, 10, 4, true), a);
  std::vector<std::size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(500);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  EXPECT_EQ(sorted, iota);
  EXPECT_EQ(epoch_order(500, 11, 3, false), iota);
}

TEST(Batches, TrainPassCoversEveryRecordOnce) {
  TempDir dir("stream");
  const DatasetManifest m = small_manifest(dir, 5, 2);
  BatchOptions opt;
  opt.batch_size = 6;
  opt.shuffle_seed = 9;
  opt.epoch = 1;
  opt.side_px = 16;
  opt.policy = AugmentPolicy{};
  BatchStream s(m, opt);
  EXPECT_EQ(s.num_batches(), 4U);
  std::multiset<std::string> seen;
  std::vector<std::size_t> sizes;
  while (auto b = s.next()) {
    sizes.push_back(b->size());
    EXPECT_EQ(b->images.size(), b->size() * 16 * 16 * 3);
    seen.insert(b->record_ids.begin(), b->record_ids.end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{6, 6, 6, 2}));
  std::multiset<std::string> expected;
  for (const auto& r : m.records_in(Split::Train)) expected.insert(r.sample_id);
  EXPECT_EQ(seen, expected);
}

TEST(Batches, SameSeedSameComposition) {
  TempDir dir("stream2");
  const DatasetManifest m = small_manifest(dir, 4, 1);
  BatchOptions opt;
  opt.batch_size = 5;
  opt.shuffle_seed = 2;
  opt.side_px = 16;
  opt.policy = AugmentPolicy{};
  BatchStream a(m, opt), b(m, opt);
  while (auto x = a.next()) {
    auto y = b.next();
    ASSERT_TRUE(y);
    EXPECT_EQ(x->record_ids, y->record_ids);
    EXPECT_EQ(x->images, y->images);
  }
}

TEST(Batches, TestPassKeepsManifestOrderUnaugmented) {
  TempDir dir("stream3");
  const DatasetManifest m = small_manifest(dir, 1, 3);
  BatchOptions opt;
  opt.split = Split::Test;
  opt.batch_size = 256;
  opt.side_px = 16;
  opt.policy = AugmentPolicy{};
  BatchStream s(m, opt);
  const auto batch = s.next();
  ASSERT_TRUE(batch);
  const auto records = m.records_in(Split::Test);
  ASSERT_EQ(batch->size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(batch->record_ids[i], records[i].sample_id);
    const ImageTensor plain = normalize(decode_resize(records[i].path, 16));
    EXPECT_TRUE(std::equal(plain.data.begin(), plain.data.end(), batch->image(i)));
  }
  EXPECT_FALSE(s.next());
}

TEST(Batches, EmptySplit) {
  TempDir dir("stream4");
  const DatasetManifest m = small_manifest(dir, 1, 0);
  BatchOptions opt;
  opt.split = Split::Test;
  try {
    BatchStream s(m, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptySplit);
  }
}
