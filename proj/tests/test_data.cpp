#include <fstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ncadiff;
using namespace ncadiff::testing;
namespace fs = std::filesystem;

TEST(Pixels, Endpoints) {
  EXPECT_EQ(byte_to_unit(0), -1.0f);
  EXPECT_EQ(byte_to_unit(255), 1.0f);
  EXPECT_EQ(unit_to_byte(-1.0), 0);
  EXPECT_EQ(unit_to_byte(1.0), 255);
  EXPECT_EQ(unit_to_byte(0.0), 128);
  EXPECT_EQ(unit_to_byte(7.0), 255);
  for (int b = 0; b < 256; ++b)
    EXPECT_EQ(unit_to_byte(byte_to_unit(static_cast<std::uint8_t>(b))), b);
}

TEST(Png, RoundTripWithinQuantization) {
  const auto dir = scratch_dir("png");
  const auto img = random_tensor<float>(1, 3, 9, 13, 1);
  write_png(dir / "a.png", img);
  const auto back = read_png(dir / "a.png");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    ASSERT_LE(std::abs(back.storage()[i] - img.storage()[i]), 1.0f / 127.5f);
}

TEST(Png, NonFiniteRejected) {
  const auto dir = scratch_dir("png_nan");
  auto img = random_tensor<float>(1, 3, 4, 4, 1);
  img(0, 1, 2, 2) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(write_png(dir / "a.png", img), ConfigError);
  EXPECT_FALSE(fs::exists(dir / "a.png"));
}

TEST(Png, UnreadableFileIsIoError) {
  const auto dir = scratch_dir("png_bad");
  std::ofstream(dir / "x.png") << "not a png";
  EXPECT_THROW(read_png(dir / "x.png"), IoError);
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
}

TEST(Patches, GridCount) {
  EXPECT_EQ(extract_patches(Image(1, 3, 256, 256), 64, 64).size(), 16u);
  EXPECT_EQ(extract_patches(Image(1, 3, 100, 70), 32, 32).size(), 6u);
  const auto img = random_tensor<float>(1, 3, 8, 8, 3);
  const auto p = extract_patches(img, 4, 4);
  EXPECT_EQ(p[3](0, 2, 1, 1), img(0, 2, 5, 5));
}

TEST(Resize, BoxDownscaleAverages) {
  Image img(1, 3, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      img(0, 0, y, x) = static_cast<float>(y * 4 + x);
  const auto d = box_downscale(img, 2);
  EXPECT_EQ(d.height(), 2);
  EXPECT_FLOAT_EQ(d(0, 0, 0, 0), 2.5f);
  EXPECT_FLOAT_EQ(d(0, 0, 1, 1), 12.5f);
  const auto r = resize_bilinear(Image(1, 3, 5, 5, 0.25f), 9, 3);
  for (float v : r.storage())
    EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Synthetic, Reproducible) {
  SyntheticSpec s;
  s.count = 10;
  s.seed = 4;
  const auto a = make_synthetic(s), b = make_synthetic(s);
  for (int i = 0; i < 10; ++i)
    EXPECT_EQ(a.images[i], b.images[i]);
  EXPECT_EQ(a.names[3], "synthetic_000003");
  s.seed = 5;
  EXPECT_NE(make_synthetic(s).images[0], a.images[0]);
}

TEST(Synthetic, ValuesInRange) {
  for (auto kind : {SyntheticKind::Blobs, SyntheticKind::BicolorHalves}) {
    SyntheticSpec s;
    s.kind = kind;
    s.count = 20;
    for (const auto &img : make_synthetic(s).images)
      for (float v : img.storage()) {
        ASSERT_GE(v, -1.0f);
        ASSERT_LE(v, 1.0f);
      }
  }
}

TEST(Synthetic, BicolorRightIsComplementOfLeft) {
  SyntheticSpec s;
  s.kind = SyntheticKind::BicolorHalves;
  s.size = 32;
  s.count = 20;
  for (const auto &img : make_synthetic(s).images)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 16; ++x) {
          ASSERT_EQ(img(0, c, y, x), img(0, c, 0, 0));
          // [0,1] complement: (r + 1) / 2 == 1 - (l + 1) / 2, i.e. r == -l exactly
          ASSERT_EQ(img(0, c, y, x + 16), -img(0, c, y, x));
          ASSERT_NEAR((img(0, c, y, x + 16) + 1.0f) / 2.0f, 1.0f - (img(0, c, y, x) + 1.0f) / 2.0f, 1e-6f);
        }
}

TEST(Split, HashAssignmentIsStableAndProportional) {
  const std::array<double, 3> f{0.8, 0.1, 0.1};
  EXPECT_EQ(split_of("img/a.png", f), split_of("img/a.png", f));
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 10000; ++i)
    ++counts[static_cast<int>(split_of("file_" + std::to_string(i), f))];
  EXPECT_NEAR(counts[0], 8000, 200);
  EXPECT_NEAR(counts[1], 1000, 150);
  EXPECT_NEAR(counts[2], 1000, 150);
}

TEST(Ingest, DeterministicAndSkipsBadFiles) {
  const auto dir = scratch_dir("ingest");
  fs::create_directories(dir / "sub");
  for (int i = 0; i < 6; ++i)
    write_png(dir / (i % 2 ? "sub" : ".") / ("img" + std::to_string(i) + ".png"), random_tensor<float>(1, 3, 20, 24, i));
  std::ofstream(dir / "broken.png") << "garbage";
  write_png(dir / "tiny.png", random_tensor<float>(1, 3, 4, 4, 9));
  DatasetSpec spec;
  spec.root = dir.string();
  spec.patch_size = 16;
  std::ostringstream warn;
  const auto a = ingest(spec, warn), b = ingest(spec, warn);
  EXPECT_EQ(a.images.size(), 6u);
  EXPECT_EQ(a.skipped, 2);
  EXPECT_EQ(a.names, b.names);
  EXPECT_EQ(a.splits, b.splits);
  EXPECT_TRUE(std::is_sorted(a.names.begin(), a.names.end()));
  EXPECT_NE(warn.str().find("broken.png"), std::string::npos);

  spec.downscale_factor = 2;
  spec.patch_size = 8;
  EXPECT_EQ(ingest(spec, warn).images[0].height(), 10);
  spec.downscale_factor.reset();
  spec.resize = std::array<int, 2>{12, 12};
  EXPECT_EQ(ingest(spec, warn).images[0].width(), 12);
}

TEST(Ingest, EmptyRootFails) {
  const auto dir = scratch_dir("ingest_empty");
  DatasetSpec spec;
  spec.root = dir.string();
  EXPECT_THROW(ingest(spec), IoError);
  spec.root = (dir / "nope").string();
  EXPECT_THROW(ingest(spec), IoError);
}

TEST(Batches, SampledBatchReplaysFromStream) {
  SyntheticSpec s;
  s.count = 40;
  const auto ds = make_synthetic(s);
  Stream a(1, StreamTag::Batch, {7}), b(1, StreamTag::Batch, {7});
  EXPECT_EQ(sample_batch(ds, Split::Train, 4, 8, a), sample_batch(ds, Split::Train, 4, 8, b));
  const auto fixed = fixed_batches(ds, Split::Validation, 3, 8, 2);
  EXPECT_EQ(fixed.size(), 2u);
  EXPECT_EQ(fixed[0].batch(), 3);
}
