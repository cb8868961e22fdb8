// SPDX-License-Identifier: Apache-2.0
#include "repr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "repr/errors.hpp"
#include "repr/rng.hpp"

namespace repr {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size()) {
    throw FormatError("'" + path + "': truncated header at byte offset " + std::to_string(offset) + " (file has " +
                      std::to_string(b.size()) + " bytes)");
  }
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::size_t infer_classes(const std::vector<int>& labels) {
  int mx = 0;
  for (int y : labels) mx = std::max(mx, y);
  return std::max<std::size_t>(10, static_cast<std::size_t>(mx) + 1);
}

} // namespace

void Dataset::add_split(const std::string& name, std::vector<std::size_t> indices) {
  std::set<std::size_t> taken;
  for (const auto& [other, idx] : splits) {
    if (other == name) throw ConfigError("split '" + name + "' already exists");
    taken.insert(idx.begin(), idx.end());
  }
  std::set<std::size_t> seen;
  for (std::size_t i : indices) {
    if (i >= size()) throw ConfigError("split '" + name + "' index " + std::to_string(i) + " out of range");
    if (taken.count(i)) throw ConfigError("split '" + name + "' overlaps another split at index " + std::to_string(i));
    if (!seen.insert(i).second) throw ConfigError("split '" + name + "' repeats index " + std::to_string(i));
  }
  splits.emplace(name, std::move(indices));
}

const std::vector<std::size_t>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw ConfigError("dataset has no split '" + name + "'");
  return it->second;
}

Subset Dataset::materialize(const std::string& split_name) const { return materialize(split(split_name)); }

Subset Dataset::materialize(const std::vector<std::size_t>& indices) const {
  const std::size_t per = channels() * height() * width();
  Subset s;
  std::vector<double> data;
  data.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    const auto src = images.data().subspan(i * per, per);
    data.insert(data.end(), src.begin(), src.end());
    s.labels.push_back(labels.at(i));
  }
  s.images = Tensor({indices.size(), channels(), height(), width()}, std::move(data));
  return s;
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ConfigError("dataset images " + shape_string(images.shape()) + " do not match " +
                      std::to_string(labels.size()) + " labels");
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  std::set<std::size_t> seen;
  for (const auto& [name, idx] : splits) {
    for (std::size_t i : idx) {
      if (i >= size()) throw ConfigError("split '" + name + "' index out of range");
      if (!seen.insert(i).second) throw ConfigError("split '" + name + "' overlaps another split");
    }
  }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  const std::uint32_t im = read_be32(ib, 0, images_path);
  if (im != kIdxImagesMagic) {
    throw FormatError("'" + images_path + "': bad magic at byte offset 0, expected 0x00000803");
  }
  const std::uint32_t lm = read_be32(lb, 0, labels_path);
  if (lm != kIdxLabelsMagic) {
    throw FormatError("'" + labels_path + "': bad magic at byte offset 0, expected 0x00000801");
  }
  const std::size_t n = read_be32(ib, 4, images_path);
  const std::size_t rows = read_be32(ib, 8, images_path);
  const std::size_t cols = read_be32(ib, 12, images_path);
  const std::size_t nl = read_be32(lb, 4, labels_path);
  if (n != nl) {
    throw FormatError("image count " + std::to_string(n) + " (byte offset 4 of '" + images_path +
                      "') differs from label count " + std::to_string(nl) + " (byte offset 4 of '" + labels_path +
                      "')");
  }
  const std::size_t expected_images = 16 + n * rows * cols;
  if (ib.size() != expected_images) {
    throw FormatError("'" + images_path + "': expected " + std::to_string(expected_images) + " bytes, got " +
                      std::to_string(ib.size()) + " (payload starts at byte offset 16)");
  }
  if (lb.size() != 8 + n) {
    throw FormatError("'" + labels_path + "': expected " + std::to_string(8 + n) + " bytes, got " +
                      std::to_string(lb.size()) + " (payload starts at byte offset 8)");
  }
  Dataset ds;
  ds.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<double>(ib[16 + i]) / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = lb[8 + i];
  ds.num_classes = infer_classes(ds.labels);
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.channels() != 1) throw ConfigError("IDX images must have a single channel");
  std::vector<unsigned char> ib, lb;
  put_be32(ib, kIdxImagesMagic);
  put_be32(ib, static_cast<std::uint32_t>(ds.size()));
  put_be32(ib, static_cast<std::uint32_t>(ds.height()));
  put_be32(ib, static_cast<std::uint32_t>(ds.width()));
  for (double v : ds.images.data()) ib.push_back(to_byte(v));
  put_be32(lb, kIdxLabelsMagic);
  put_be32(lb, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lb.push_back(static_cast<unsigned char>(y));
  write_file(images_path, ib);
  write_file(labels_path, lb);
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no CIFAR-10 files given");
  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    const auto b = read_file(path);
    if (b.size() % kCifarRecord != 0) {
      throw FormatError("'" + path + "': size " + std::to_string(b.size()) + " is not a multiple of " +
                        std::to_string(kCifarRecord) + "; trailing record starts at byte offset " +
                        std::to_string(b.size() - b.size() % kCifarRecord));
    }
    for (std::size_t off = 0; off < b.size(); off += kCifarRecord) {
      labels.push_back(b[off]);
      for (std::size_t i = 1; i < kCifarRecord; ++i) pixels.push_back(static_cast<double>(b[off + i]) / 255.0);
    }
  }
  Dataset ds;
  ds.images = Tensor({labels.size(), 3, kCifarSide, kCifarSide}, std::move(pixels));
  ds.labels = std::move(labels);
  ds.num_classes = infer_classes(ds.labels);
  return ds;
}

void write_cifar10_binary(const Dataset& ds, const std::string& path) {
  if (ds.channels() != 3 || ds.height() != kCifarSide || ds.width() != kCifarSide) {
    throw ConfigError("CIFAR-10 records must be 3x32x32");
  }
  std::vector<unsigned char> b;
  b.reserve(ds.size() * kCifarRecord);
  const std::size_t per = kCifarRecord - 1;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    b.push_back(static_cast<unsigned char>(ds.labels[i]));
    for (std::size_t p = 0; p < per; ++p) b.push_back(to_byte(ds.images[i * per + p]));
  }
  write_file(path, b);
}

Dataset concatenate(const Dataset& a, const Dataset& b) {
  if (a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width()) {
    throw ConfigError("cannot concatenate datasets with image shapes " + shape_string(a.images.shape()) + " and " +
                      shape_string(b.images.shape()));
  }
  Dataset out;
  std::vector<double> data(a.images.data().begin(), a.images.data().end());
  data.insert(data.end(), b.images.data().begin(), b.images.data().end());
  out.images = Tensor({a.size() + b.size(), a.channels(), a.height(), a.width()}, std::move(data));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.num_classes = std::max(a.num_classes, b.num_classes);
  for (const auto& [name, idx] : a.splits) out.splits[name] = idx;
  for (const auto& [name, idx] : b.splits) {
    std::vector<std::size_t> shifted;
    for (std::size_t i : idx) shifted.push_back(i + a.size());
    out.add_split(name, std::move(shifted));
  }
  return out;
}

namespace {

void augment_image(double* img, std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  constexpr std::size_t pad = 4;
  const bool flip = rng.bernoulli(0.5);
  const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
  const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
  std::vector<double> src(img, img + c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
        if (flip) sx = static_cast<std::ptrdiff_t>(w) - 1 - sx;
        double v = 0.0;
        if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) {
          v = src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
        img[(ch * h + y) * w + x] = v;
      }
    }
  }
}

} // namespace

std::vector<Batch> make_batches(const Dataset& ds, const std::string& split, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch, bool augment) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order = ds.split(split);
  if (order.empty()) throw ConfigError("split '" + split + "' is empty");
  Rng shuffle(seed, {static_cast<std::uint64_t>(Stream::Shuffle), epoch});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  const std::size_t per = ds.channels() * ds.height() * ds.width();
  std::vector<Batch> batches;
  for (std::size_t first = 0; first < order.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - first);
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
                     order.begin() + static_cast<std::ptrdiff_t>(first + n));
    Subset s = ds.materialize(b.indices);
    if (augment) {
      for (std::size_t k = 0; k < n; ++k) {
        Rng rng(seed, {static_cast<std::uint64_t>(Stream::Augment), epoch, b.indices[k]});
        augment_image(s.images.data().data() + k * per, ds.channels(), ds.height(), ds.width(), rng);
      }
    }
    b.images = std::move(s.images);
    b.labels = std::move(s.labels);
    batches.push_back(std::move(b));
  }
  return batches;
}

} // namespace repr
