#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "enas4d/data.hpp"

namespace enas4d {
namespace {

namespace fs = std::filesystem;

TEST(Synthetic, DeterministicBalancedAndSized) {
  const auto a = make_synthetic_dataset(50, 3, 16), b = make_synthetic_dataset(50, 3, 16);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(make_synthetic_dataset(50, 4, 16).pixels, a.pixels);
  EXPECT_EQ(a.pixels.size(), 50u * 3 * 16 * 16);
  std::vector<int> count(10, 0);
  for (int l : a.labels) ++count.at(l);
  for (int c : count) EXPECT_EQ(c, 5);
}

TEST(Batch, NormalizationAndLabels) {
  Dataset d{1, 1, 2, {0, 255, 51, 204}, {3, 7}};
  const auto t = d.batch<double>({1, 0});
  EXPECT_EQ(t.shape(), (std::vector<int>{2, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(t[0], (51 / 255.0 - 0.5) / 0.25);
  EXPECT_DOUBLE_EQ(t[2], -2.0);
  EXPECT_DOUBLE_EQ(t[3], 2.0);
  EXPECT_EQ(d.batch_labels({1, 0}), (std::vector<int>{7, 3}));
  const auto s = d.subset({1});
  EXPECT_EQ(s.pixels, (std::vector<std::uint8_t>{51, 204}));
  EXPECT_EQ(s.labels, (std::vector<int>{7}));
}

TEST(CifarBinary, RoundTripAndErrors) {
  const fs::path dir = fs::temp_directory_path() / "enas4d_test_data";
  fs::remove_all(dir);
  const auto d = make_synthetic_dataset(12, 5);
  write_cifar_binary(d, dir / "batch.bin");
  EXPECT_EQ(fs::file_size(dir / "batch.bin"), 12u * 3073);
  const auto back = read_cifar_binary(dir / "batch.bin");
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);

  EXPECT_THROW(read_cifar_binary(dir / "absent.bin"), DataError);
  {
    std::ofstream f(dir / "odd.bin", std::ios::binary);
    f << std::string(3000, '\0');
  }
  EXPECT_THROW(read_cifar_binary(dir / "odd.bin"), DataError);
  EXPECT_THROW(read_cifar_binary(dir / "batch.bin", 5), DataError);  // labels up to 9
  fs::remove_all(dir);
}

}  // namespace
}  // namespace enas4d
