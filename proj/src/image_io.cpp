#include "fsit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fsit/errors.hpp"

namespace fsit {

void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("write_png: unsupported channel count");
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw DataError("write_png: buffer size does not match dimensions");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("cannot write " + path.string() + ": " + msg);
  }
}

Image8 read_png(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw DataError("read_png: unsupported channel count");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw DataError("cannot read " + path.string() + ": " + image.message);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.channels = channels;
  out.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("corrupt PNG " + path.string() + ": " + msg);
  }
  return out;
}

Image8 tensor_to_image(const Tensor<float>& batch, int index) {
  if (batch.rank() != 4 || batch.dim(1) != 3) throw ShapeError("tensor_to_image expects (B,3,H,W)");
  const int h = batch.dim(2), w = batch.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const float* src = batch.ptr() + static_cast<std::size_t>(index) * 3 * plane;
  Image8 img{w, h, 3, std::vector<std::uint8_t>(3 * plane)};
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp((src[c * plane + p] + 1.0f) * 127.5f, 0.0f, 255.0f);
      img.data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  return img;
}

void image_into_tensor(const std::uint8_t* rgb, int height, int width, float* chw) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) chw[c * plane + p] = rgb[p * 3 + c] / 127.5f - 1.0f;
}

Tensor<float> image_to_tensor(const Image8& img) {
  if (img.channels != 3) throw ShapeError("image_to_tensor expects RGB");
  Tensor<float> t({1, 3, img.height, img.width});
  image_into_tensor(img.data.data(), img.height, img.width, t.ptr());
  return t;
}

Image8 make_grid(const std::vector<std::vector<Image8>>& rows) {
  constexpr int kGutter = 2;
  if (rows.empty() || rows[0].empty()) throw ShapeError("make_grid: no images");
  const int h = rows[0][0].height, w = rows[0][0].width;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& im : r)
      if (im.height != h || im.width != w || im.channels != 3) throw ShapeError("make_grid: mixed image sizes");
  }
  Image8 g;
  g.channels = 3;
  g.width = static_cast<int>(cols) * (w + kGutter) - kGutter;
  g.height = static_cast<int>(rows.size()) * (h + kGutter) - kGutter;
  g.data.assign(static_cast<std::size_t>(g.width) * g.height * 3, 255);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const int y0 = static_cast<int>(r) * (h + kGutter), x0 = static_cast<int>(c) * (w + kGutter);
      for (int y = 0; y < h; ++y)
        std::copy_n(rows[r][c].data.data() + static_cast<std::size_t>(y) * w * 3, w * 3,
                    g.data.data() + (static_cast<std::size_t>(y0 + y) * g.width + x0) * 3);
    }
  return g;
}

}  // namespace fsit
