#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "casvit/tensor.hpp"

namespace casvit {

/// In-memory form of a "CVDS" file: u8 images [count, C, H, W] and u16 labels.
struct Dataset {
  std::uint16_t channels = 3;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t num_classes = 0;
  std::vector<std::uint8_t> images;
  std::vector<std::uint16_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept {
    return std::size_t{channels} * height * width;
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {images.data() + i * image_bytes(), image_bytes()};
  }
  /// Throws DatasetError on inconsistent sizes or out-of-range labels.
  void validate() const;
  std::vector<std::size_t> histogram() const;
  bool operator==(const Dataset&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

const char* shape_class_name(std::size_t label);

using WarningSink = std::function<void(const std::string&)>;

/// Procedural {circle, square, cross, stripes} images with random position, scale,
/// contrast and noise, replicated to 3 channels. Sample i has label i % num_classes, so
/// any contiguous tail is balanced. n not divisible by num_classes is truncated to the
/// largest balanced count, reporting through `warn` (stderr when empty).
Dataset generate_shapes_dataset(std::size_t n, std::size_t size, std::size_t num_classes,
                                std::uint64_t seed, const WarningSink& warn = {});

/// Splits off the last `holdout` samples.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t holdout);

/// Selected images as [k, C, H, W], scaled to (x/255 - 0.5) / 0.25.
template <typename T>
Tensor<T> images_to_tensor(const Dataset& ds, std::span<const std::size_t> indices);

/// k-nearest-neighbour accuracy on raw pixels (squared L2, majority vote, ties to the
/// nearest neighbour's label).
double knn_accuracy(const Dataset& train, const Dataset& test, std::size_t k);

}  // namespace casvit
