#pragma once

// 8-bit PNG I/O and conversions between [-1, 1] tensors and bytes.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fsit/tensor.hpp"

namespace fsit {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3, interleaved
  std::vector<std::uint8_t> data;

  bool operator==(const Image8&) const = default;
};

/// Throws DataError on I/O failure.
void write_png(const std::filesystem::path& path, const Image8& img);
/// Decodes to `channels` (1 = gray, 3 = RGB) regardless of the stored format.
Image8 read_png(const std::filesystem::path& path, int channels);

/// One item of a (B,3,H,W) tensor in [-1, 1] to RGB bytes (round to nearest).
Image8 tensor_to_image(const Tensor<float>& batch, int index = 0);
/// RGB bytes to a (1,3,H,W) tensor in [-1, 1].
Tensor<float> image_to_tensor(const Image8& img);
void image_into_tensor(const std::uint8_t* rgb, int height, int width, float* chw);

/// Tiles equally sized RGB images into rows x cols with a 2-pixel gutter.
Image8 make_grid(const std::vector<std::vector<Image8>>& rows);

}  // namespace fsit
