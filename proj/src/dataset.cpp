#include "casvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "binary_io.hpp"
#include "casvit/layers.hpp"

namespace casvit {

void Dataset::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw DatasetError("dataset has an empty image shape");
  if (num_classes == 0) throw DatasetError("dataset has zero classes");
  if (images.size() != labels.size() * image_bytes()) {
    throw DatasetError("dataset holds " + std::to_string(images.size()) + " image bytes for " +
                       std::to_string(labels.size()) + " labels of " +
                       std::to_string(image_bytes()) + " bytes each");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DatasetError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                         " is not below num_classes " + std::to_string(num_classes));
    }
  }
}

std::vector<std::size_t> Dataset::histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (auto l : labels) {
    if (l < num_classes) ++h[l];
  }
  return h;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  if (ds.size() > UINT32_MAX) throw DatasetError("too many samples for a u32 count");
  io::Writer w;
  w.bytes(std::string("CVDS"));
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  w.put<std::uint16_t>(ds.channels);
  w.put<std::uint16_t>(ds.height);
  w.put<std::uint16_t>(ds.width);
  w.put<std::uint16_t>(ds.num_classes);
  w.bytes(ds.images);
  for (auto l : ds.labels) w.put<std::uint16_t>(l);
  return std::move(w.buffer());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  const auto magic = r.take(4);
  if (!magic || std::memcmp(magic->data(), "CVDS", 4) != 0) throw DatasetError("not a dataset file (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (!version) throw DatasetError("dataset header is truncated");
  if (*version != kDatasetVersion) {
    throw DatasetError("unsupported dataset version " + std::to_string(*version));
  }
  const auto count = r.get<std::uint32_t>();
  const auto c = r.get<std::uint16_t>(), h = r.get<std::uint16_t>(), w = r.get<std::uint16_t>(),
             k = r.get<std::uint16_t>();
  if (!count || !c || !h || !w || !k) throw DatasetError("dataset header is truncated");
  Dataset ds;
  ds.channels = *c;
  ds.height = *h;
  ds.width = *w;
  ds.num_classes = *k;
  const std::size_t expected = std::size_t{*count} * ds.image_bytes() + std::size_t{*count} * 2;
  if (r.remaining() != expected) {
    throw DatasetError("dataset payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                       std::to_string(expected));
  }
  const auto img = r.take(std::size_t{*count} * ds.image_bytes());
  ds.images.assign(img->begin(), img->end());
  ds.labels.resize(*count);
  for (auto& l : ds.labels) l = *r.get<std::uint16_t>();
  ds.validate();
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (!io::write_file(path, encode_dataset(ds))) {
    throw DatasetError("cannot write dataset to " + path.string());
  }
}

Dataset read_dataset(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  if (!bytes) throw DatasetError("cannot read dataset " + path.string());
  return decode_dataset(*bytes);
}

const char* shape_class_name(std::size_t label) {
  static const char* names[] = {"circle", "square", "cross", "stripes"};
  return label < 4 ? names[label] : "?";
}

namespace {

void render(std::size_t label, std::size_t size, Rng& rng, std::uint8_t* out) {
  const double s = static_cast<double>(size);
  const double bg = rng.uniform(0, 70), fg = rng.uniform(150, 255);
  const double cx = s / 2 + rng.uniform(-s / 8, s / 8), cy = s / 2 + rng.uniform(-s / 8, s / 8);
  const double r = rng.uniform(0.22 * s, 0.38 * s);
  const bool vertical = rng.uniform() < 0.5;
  const double period = std::max(2.0, r / 2.5);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      bool on = false;
      switch (label) {
        case 0: on = dx * dx + dy * dy <= r * r; break;
        case 1: on = std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r; break;
        case 2:
          on = (std::abs(dx) <= r / 4 && std::abs(dy) <= r) || (std::abs(dy) <= r / 4 && std::abs(dx) <= r);
          break;
        default: {
          const double t = (vertical ? dx : dy) + r;
          on = std::abs(dx) <= r && std::abs(dy) <= r &&
               static_cast<long>(std::floor(t / period)) % 2 == 0;
        }
      }
      const double v = (on ? fg : bg) + 12.0 * rng.normal();
      out[y * size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
}

}  // namespace

Dataset generate_shapes_dataset(std::size_t n, std::size_t size, std::size_t num_classes,
                                std::uint64_t seed, const WarningSink& warn) {
  if (size < 16 || size > UINT16_MAX) throw ConfigError("shapes image size must be at least 16");
  if (num_classes < 1 || num_classes > 4) throw ConfigError("shapes dataset supports 1 to 4 classes");
  const std::size_t kept = n - n % num_classes;
  if (kept != n) {
    const std::string msg = "requested " + std::to_string(n) + " samples is not divisible by " +
                            std::to_string(num_classes) + " classes; generating " +
                            std::to_string(kept) + " for balance";
    if (warn) warn(msg);
    else std::cerr << "warning: " << msg << "\n";
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = static_cast<std::uint16_t>(size);
  ds.num_classes = static_cast<std::uint16_t>(num_classes);
  ds.images.resize(kept * ds.image_bytes());
  ds.labels.resize(kept);
  Rng rng(seed);
  std::vector<std::uint8_t> gray(size * size);
  for (std::size_t i = 0; i < kept; ++i) {
    ds.labels[i] = static_cast<std::uint16_t>(i % num_classes);
    render(ds.labels[i], size, rng, gray.data());
    std::uint8_t* dst = ds.images.data() + i * ds.image_bytes();
    for (std::size_t c = 0; c < 3; ++c) std::copy(gray.begin(), gray.end(), dst + c * gray.size());
  }
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t holdout) {
  if (holdout > ds.size()) throw DatasetError("holdout exceeds dataset size");
  Dataset a = ds, b = ds;
  const std::size_t keep = ds.size() - holdout, bytes = ds.image_bytes();
  a.images.assign(ds.images.begin(), ds.images.begin() + keep * bytes);
  a.labels.assign(ds.labels.begin(), ds.labels.begin() + keep);
  b.images.assign(ds.images.begin() + keep * bytes, ds.images.end());
  b.labels.assign(ds.labels.begin() + keep, ds.labels.end());
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> images_to_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  Tensor<T> t(Shape{indices.size(), ds.channels, ds.height, ds.width});
  const std::size_t bytes = ds.image_bytes();
  auto out = t.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw DatasetError("sample index out of range");
    const auto img = ds.image(indices[i]);
    for (std::size_t j = 0; j < bytes; ++j) {
      out[i * bytes + j] = static_cast<T>((img[j] / 255.0 - 0.5) / 0.25);
    }
  }
  return t;
}
template Tensor<float> images_to_tensor(const Dataset&, std::span<const std::size_t>);
template Tensor<double> images_to_tensor(const Dataset&, std::span<const std::size_t>);

double knn_accuracy(const Dataset& train, const Dataset& test, std::size_t k) {
  if (train.image_bytes() != test.image_bytes()) throw DatasetError("knn: image shapes differ");
  if (k == 0 || k > train.size()) throw ConfigError("knn: k must be in [1, train size]");
  if (test.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::pair<long, std::size_t>> dist(train.size());
  for (std::size_t t = 0; t < test.size(); ++t) {
    const auto q = test.image(t);
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto p = train.image(i);
      long d = 0;
      for (std::size_t j = 0; j < q.size(); ++j) {
        const long diff = static_cast<long>(q[j]) - static_cast<long>(p[j]);
        d += diff * diff;
      }
      dist[i] = {d, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k), dist.end());
    std::vector<std::size_t> votes(std::max<std::size_t>(train.num_classes, 1), 0);
    for (std::size_t i = 0; i < k; ++i) ++votes[train.labels[dist[i].second]];
    std::size_t best = train.labels[dist[0].second];
    for (std::size_t c = 0; c < votes.size(); ++c) {
      if (votes[c] > votes[best]) best = c;
    }
    if (best == test.labels[t]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace casvit
