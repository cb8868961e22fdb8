// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "repr/data.hpp"
#include "repr/errors.hpp"

using namespace repr;
namespace fs = std::filesystem;

namespace {

using Bytes = std::vector<unsigned char>;

class DataFiles : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("repr_test_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static void write(const std::string& p, const Bytes& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  static Bytes read(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return Bytes(std::istreambuf_iterator<char>(in), {});
  }

  fs::path dir_;
};

void put_u32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

Bytes idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
  Bytes b;
  put_u32(b, 0x00000803);
  put_u32(b, n);
  put_u32(b, h);
  put_u32(b, w);
  for (std::uint32_t i = 0; i < n * h * w; ++i) b.push_back(static_cast<unsigned char>((i * 37) % 256));
  return b;
}

Bytes idx_labels(std::uint32_t n) {
  Bytes b;
  put_u32(b, 0x00000801);
  put_u32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

Dataset counting_dataset(std::size_t n) {
  Dataset ds;
  ds.images = Tensor({n, 1, 2, 2});
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(static_cast<int>(i % 10));
    for (std::size_t k = 0; k < 4; ++k) ds.images[i * 4 + k] = static_cast<double>(i) / 255.0;
  }
  return ds;
}

} // namespace

TEST_F(DataFiles, IdxLoadScalesAndRoundTripsBytes) {
  const Bytes img = idx_images(5, 3, 4), lab = idx_labels(5);
  write(path("i.idx"), img);
  write(path("l.idx"), lab);
  const Dataset ds = load_idx(path("i.idx"), path("l.idx"));
  EXPECT_EQ(ds.images.shape(), (Shape{5, 1, 3, 4}));
  EXPECT_EQ(ds.num_classes, 10u);
  EXPECT_EQ(ds.labels[3], 3);
  EXPECT_EQ(ds.images[1], 37.0 / 255.0);
  write_idx(ds, path("i2.idx"), path("l2.idx"));
  EXPECT_EQ(read(path("i2.idx")), img);
  EXPECT_EQ(read(path("l2.idx")), lab);
}

TEST_F(DataFiles, IdxPixel255IsExactlyOne) {
  Bytes img;
  put_u32(img, 0x00000803);
  put_u32(img, 1);
  put_u32(img, 1);
  put_u32(img, 1);
  img.push_back(255);
  write(path("i.idx"), img);
  write(path("l.idx"), idx_labels(1));
  EXPECT_EQ(load_idx(path("i.idx"), path("l.idx")).images[0], 1.0);
}

TEST_F(DataFiles, IdxErrorsCiteOffsetsAndLengths) {
  Bytes img = idx_images(4, 2, 2);
  write(path("l.idx"), idx_labels(4));

  Bytes bad = img;
  bad[3] = 0x01;
  write(path("bad.idx"), bad);
  try {
    load_idx(path("bad.idx"), path("l.idx"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos) << e.what();
  }

  Bytes truncated(img.begin(), img.end() - 3);
  write(path("trunc.idx"), truncated);
  try {
    load_idx(path("trunc.idx"), path("l.idx"));
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 32 bytes"), std::string::npos) << msg;
    EXPECT_NE(msg.find("got 29"), std::string::npos) << msg;
  }

  write(path("i.idx"), img);
  write(path("l3.idx"), idx_labels(3));
  EXPECT_THROW(load_idx(path("i.idx"), path("l3.idx")), FormatError);
  EXPECT_THROW(load_idx(path("i.idx"), path("missing.idx")), FormatError);
  write(path("short.idx"), Bytes{0, 0, 8});
  EXPECT_THROW(load_idx(path("short.idx"), path("l.idx")), FormatError);
}

TEST_F(DataFiles, CifarSingleRecordAndPlaneOrder) {
  Bytes rec(3073, 0);
  rec[0] = 7;
  for (std::size_t i = 1; i <= 1024; ++i) rec[i] = 255;
  write(path("b.bin"), rec);
  const Dataset ds = load_cifar10_binary({path("b.bin")});
  EXPECT_EQ(ds.images.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(ds.labels, std::vector<int>{7});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      EXPECT_EQ(ds.images.at(0, 0, y, x), 1.0);
      EXPECT_EQ(ds.images.at(0, 1, y, x), 0.0);
      EXPECT_EQ(ds.images.at(0, 2, y, x), 0.0);
    }
  write_cifar10_binary(ds, path("c.bin"));
  EXPECT_EQ(read(path("c.bin")), rec);
}

TEST_F(DataFiles, CifarMultipleFilesAndBadSize) {
  Bytes a(2 * 3073, 1), b(3073, 2);
  a[0] = 1;
  a[3073] = 2;
  b[0] = 9;
  write(path("a.bin"), a);
  write(path("b.bin"), b);
  const Dataset ds = load_cifar10_binary({path("a.bin"), path("b.bin")});
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 2, 9}));
  write(path("bad.bin"), Bytes(3000, 0));
  EXPECT_THROW(load_cifar10_binary({path("bad.bin")}), FormatError);
  EXPECT_THROW(load_cifar10_binary({}), ConfigError);
}

TEST(Splits, DisjointAndInRange) {
  Dataset ds = counting_dataset(10);
  ds.add_split("train", {0, 1, 2, 3, 4, 5});
  EXPECT_THROW(ds.add_split("probe", {5, 6}), ConfigError);
  EXPECT_THROW(ds.add_split("probe", {10}), ConfigError);
  EXPECT_THROW(ds.add_split("probe", {7, 7}), ConfigError);
  EXPECT_THROW(ds.add_split("train", {8}), ConfigError);
  ds.add_split("probe", {6, 7});
  EXPECT_NO_THROW(ds.validate());
  EXPECT_THROW(ds.split("test"), ConfigError);
  const Subset p = ds.materialize("probe");
  EXPECT_EQ(p.labels, (std::vector<int>{6, 7}));
  EXPECT_EQ(p.images[0], 6.0 / 255.0);
}

TEST(Splits, ConcatenateShiftsSecondDatasetSplits) {
  Dataset a = counting_dataset(4), b = counting_dataset(3);
  a.add_split("train", {0, 1, 2, 3});
  b.add_split("test", {0, 2});
  const Dataset c = concatenate(a, b);
  EXPECT_EQ(c.size(), 7u);
  EXPECT_EQ(c.split("test"), (std::vector<std::size_t>{4, 6}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Batches, SizesAndDeterminism) {
  Dataset ds = counting_dataset(10);
  std::vector<std::size_t> all(10);
  for (std::size_t i = 0; i < 10; ++i) all[i] = i;
  ds.add_split("train", all);
  const auto b = make_batches(ds, "train", 4, 7, 0, false);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].labels.size(), 4u);
  EXPECT_EQ(b[1].labels.size(), 4u);
  EXPECT_EQ(b[2].labels.size(), 2u);

  const auto again = make_batches(ds, "train", 4, 7, 0, false);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(b[i].indices, again[i].indices);
  const auto other_epoch = make_batches(ds, "train", 4, 7, 1, false);
  bool differs = false;
  for (std::size_t i = 0; i < 3; ++i) differs = differs || b[i].indices != other_epoch[i].indices;
  EXPECT_TRUE(differs);

  std::set<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.indices.begin(), batch.indices.end());
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Batches, AugmentOffIsBitIdentical) {
  Dataset ds = counting_dataset(6);
  ds.add_split("train", {0, 1, 2, 3, 4, 5});
  for (const auto& batch : make_batches(ds, "train", 4, 1, 3, false))
    for (std::size_t k = 0; k < batch.indices.size(); ++k) {
      const std::size_t src = batch.indices[k];
      for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(batch.images[k * 4 + e], ds.images[src * 4 + e]);
      EXPECT_EQ(batch.labels[k], ds.labels[src]);
    }
}

TEST(Batches, AugmentIsSeededAndKeepsShape) {
  Dataset ds;
  ds.images = Tensor({8, 1, 8, 8});
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<double>(i % 17) / 16.0;
  ds.labels.assign(8, 0);
  ds.add_split("train", {0, 1, 2, 3, 4, 5, 6, 7});
  const auto a = make_batches(ds, "train", 8, 2, 0, true);
  const auto b = make_batches(ds, "train", 8, 2, 0, true);
  EXPECT_EQ(a[0].images, b[0].images);
  EXPECT_EQ(a[0].images.shape(), (Shape{8, 1, 8, 8}));
  const auto plain = make_batches(ds, "train", 8, 2, 0, false);
  EXPECT_NE(a[0].images, plain[0].images);
  for (double v : a[0].images.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Batches, ProbeNeverAppearsInTrainingBatches) {
  Dataset ds = counting_dataset(50);
  std::vector<std::size_t> train, probe;
  for (std::size_t i = 0; i < 50; ++i) (i % 5 == 0 ? probe : train).push_back(i);
  ds.add_split("train", train);
  ds.add_split("probe", probe);
  const std::set<std::size_t> probe_set(probe.begin(), probe.end());
  for (std::uint64_t epoch = 0; epoch < 20; ++epoch)
    for (const auto& batch : make_batches(ds, "train", 7, 3, epoch, true))
      for (std::size_t i : batch.indices) EXPECT_EQ(probe_set.count(i), 0u);
}

TEST(Batches, Errors) {
  Dataset ds = counting_dataset(4);
  ds.add_split("train", {0, 1});
  ds.add_split("empty", {});
  EXPECT_THROW(make_batches(ds, "train", 0, 1, 0, false), ConfigError);
  EXPECT_THROW(make_batches(ds, "empty", 2, 1, 0, false), ConfigError);
  EXPECT_THROW(make_batches(ds, "nope", 2, 1, 0, false), ConfigError);
}
