#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "enas4d/errors.hpp"
#include "enas4d/tensor.hpp"

namespace enas4d {

// Labeled 8-bit RGB images, CHW per image.
struct Dataset {
  int channels = 3;
  int height = 32;
  int width = 32;
  std::vector<std::uint8_t> pixels;  // N * C * H * W
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return static_cast<std::size_t>(channels) * height * width; }
  bool empty() const { return labels.empty(); }

  // Normalized float batch [n, C, H, W]: (p / 255 - 0.5) / 0.25.
  template <typename T = float>
  Tensor<T> batch(const std::vector<std::size_t>& indices) const {
    Tensor<T> t({static_cast<int>(indices.size()), channels, height, width});
    const std::size_t per = image_bytes();
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const std::uint8_t* src = pixels.data() + indices.at(k) * per;
      T* dst = t.data() + k * per;
      for (std::size_t i = 0; i < per; ++i) dst[i] = static_cast<T>((src[i] / 255.0 - 0.5) / 0.25);
    }
    return t;
  }
  std::vector<int> batch_labels(const std::vector<std::size_t>& indices) const {
    std::vector<int> out;
    for (auto i : indices) out.push_back(labels.at(i));
    return out;
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset d{channels, height, width, {}, {}};
    const std::size_t per = image_bytes();
    for (auto i : indices) {
      d.pixels.insert(d.pixels.end(), pixels.begin() + i * per, pixels.begin() + (i + 1) * per);
      d.labels.push_back(labels.at(i));
    }
    return d;
  }
};

// CIFAR-10 binary layout: per record one label byte then C*H*W bytes.
inline void write_cifar_binary(const Dataset& d, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  const std::size_t per = d.image_bytes();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto label = static_cast<char>(d.labels[i]);
    out.write(&label, 1);
    out.write(reinterpret_cast<const char*>(d.pixels.data() + i * per), static_cast<std::streamsize>(per));
  }
  if (!out.flush()) throw DataError("write failed for " + path.string());
}

inline Dataset read_cifar_binary(const std::filesystem::path& path, int num_classes = 10, int channels = 3,
                                 int height = 32, int width = 32) {
  if (!std::filesystem::exists(path)) throw DataError("dataset file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset d{channels, height, width, {}, {}};
  const std::size_t per = d.image_bytes();
  const auto bytes = std::filesystem::file_size(path);
  if (bytes == 0 || bytes % (per + 1) != 0) {
    throw DataError(path.string() + ": size is not a multiple of the " + std::to_string(per + 1) + "-byte record");
  }
  const std::size_t n = bytes / (per + 1);
  d.pixels.resize(n * per);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char label = 0;
    in.read(&label, 1);
    in.read(reinterpret_cast<char*>(d.pixels.data() + i * per), static_cast<std::streamsize>(per));
    if (!in) throw DataError(path.string() + ": truncated record " + std::to_string(i));
    d.labels[i] = static_cast<unsigned char>(label);
    if (d.labels[i] >= num_classes) throw DataError(path.string() + ": label out of range in record " + std::to_string(i));
  }
  return d;
}

// Procedural 10-class shape/texture images: disk, ring, square, hollow
// square, plus, cross, triangle, horizontal stripes, vertical stripes,
// checkerboard. Each sample draws a random affine pose, colors and noise.
inline Dataset make_synthetic_dataset(std::size_t n, std::uint64_t seed, int size = 32) {
  constexpr int kClasses = 10;
  Dataset d{3, size, size, std::vector<std::uint8_t>(n * 3 * size * size), std::vector<int>(n)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % kClasses);
    d.labels[i] = label;
    const double angle = u(rng) * 2 * M_PI;
    const double scale = 0.45 + 0.4 * u(rng);  // shape radius as a fraction of half the image
    const double cx = (u(rng) - 0.5) * 0.5, cy = (u(rng) - 0.5) * 0.5;
    const double freq = 2.5 + 2.0 * u(rng);
    const double noise = 0.5 * u(rng);
    std::array<double, 3> fg, bg;
    for (int c = 0; c < 3; ++c) {
      fg[c] = u(rng);
      bg[c] = u(rng);
    }
    // Keep foreground/background distinguishable.
    double contrast = 0;
    for (int c = 0; c < 3; ++c) contrast += std::abs(fg[c] - bg[c]);
    if (contrast < 0.6) {
      for (int c = 0; c < 3; ++c) fg[c] = 1.0 - bg[c];
    }
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::normal_distribution<double> gauss(0.0, noise * 0.5);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        // Pixel center in [-1, 1], moved into the shape's frame.
        const double px = (x + 0.5) / size * 2 - 1 - cx, py = (y + 0.5) / size * 2 - 1 - cy;
        const double X = (ca * px + sa * py) / scale, Y = (-sa * px + ca * py) / scale;
        const double r = std::sqrt(X * X + Y * Y);
        bool on = false;
        switch (label) {
          case 0: on = r < 0.8; break;
          case 1: on = r < 0.85 && r > 0.5; break;
          case 2: on = std::abs(X) < 0.7 && std::abs(Y) < 0.7; break;
          case 3: on = std::max(std::abs(X), std::abs(Y)) < 0.8 && std::max(std::abs(X), std::abs(Y)) > 0.5; break;
          case 4: on = (std::abs(X) < 0.22 && std::abs(Y) < 0.85) || (std::abs(Y) < 0.22 && std::abs(X) < 0.85); break;
          case 5: {
            const double a = std::abs(X - Y) / std::sqrt(2.0), b = std::abs(X + Y) / std::sqrt(2.0);
            on = r < 0.9 && (a < 0.18 || b < 0.18);
            break;
          }
          case 6: on = Y > -0.6 && Y < 0.8 && std::abs(X) < (0.8 - Y) * 0.6; break;
          case 7: on = std::sin(Y * freq * M_PI) > 0; break;
          case 8: on = std::sin(X * freq * M_PI) > 0; break;
          case 9: on = std::sin(X * freq * M_PI) * std::sin(Y * freq * M_PI) > 0; break;
        }
        for (int c = 0; c < 3; ++c) {
          const double v = (on ? fg[c] : bg[c]) + gauss(rng);
          d.pixels[i * 3 * plane + c * plane + static_cast<std::size_t>(y) * size + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
        }
      }
    }
  }
  // Interleave classes randomly so prefixes are not class-periodic.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return d.subset(perm);
}

}  // namespace enas4d
