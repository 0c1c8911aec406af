#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lrnet/data.hpp"
#include "test_support.hpp"

namespace lrnet {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("lrnet_test_" + std::to_string(::getpid()) + "_" + name);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string amat_line(double pixel, int label) {
  std::string s;
  for (std::size_t i = 0; i < 784; ++i) s += std::to_string(pixel) + " ";
  return s + std::to_string(label) + "\n";
}

TEST(LoadAmat, HandcraftedFixture) {
  // Two samples: a diagonal stroke labelled 7, a single corner pixel labelled 9.
  Dataset<double> expected;
  expected.images = Tensor<double>({2, 1, 28, 28});
  for (std::size_t i = 0; i < 28; ++i) expected.images(0, 0, i, i) = 0.5;
  expected.images(1, 0, 0, 27) = 1.0;
  expected.images(1, 0, 27, 0) = 0.25;
  expected.labels = {7, 9};

  std::string text;
  for (std::size_t n = 0; n < 2; ++n) {
    for (double v : expected.images.sample(n)) text += (v == 0 ? "0" : std::to_string(v)) + "  ";
    text += std::to_string(expected.labels[n]) + ".000000e+00\n";
  }
  auto path = temp_file("fixture.amat");
  write_text(path, text);
  auto d = load_amat<double>(path, "train");
  EXPECT_EQ(d.images, expected.images);
  EXPECT_EQ(d.labels, expected.labels);
  EXPECT_EQ(d.split, "train");
  // Row-major: pixel (0,27) is the 28th value on the line.
  EXPECT_EQ(d.images[784 + 27], 1.0);
  fs::remove(path);
}

TEST(LoadAmat, SaveThenLoadIsIdentity) {
  auto d = synthetic_confusable<double>(5, 11);
  auto path = temp_file("roundtrip.amat");
  save_amat(d, path);
  auto back = load_amat<double>(path);
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  fs::remove(path);
}

void expect_data_error(const std::string& text, const std::string& needle) {
  auto path = temp_file("bad.amat");
  write_text(path, text);
  try {
    load_amat<float>(path);
    ADD_FAILURE() << "expected a parse error containing '" << needle << "'";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
  fs::remove(path);
}

TEST(LoadAmat, ReportsErrorsWithLineNumbers) {
  const std::string good = amat_line(0.1, 3);
  expect_data_error(good + "0.1 0.2 3\n", ":2: expected 785 fields");
  std::string bad_token = good;
  bad_token.replace(0, 8, "abc     ");
  expect_data_error(good + good + bad_token, ":3: non-numeric token 'abc'");
  expect_data_error(amat_line(0.1, 10), ":1: label");
  expect_data_error(amat_line(1.5, 1), "outside [0,1]");
  expect_data_error("", "no samples");
  EXPECT_THROW(load_amat<float>("/nonexistent/file.amat"), Error);
}

TEST(LoadAmat, IgnoresBlankLinesAndCarriageReturns) {
  auto path = temp_file("crlf.amat");
  std::string line = amat_line(0.25, 4);
  line.insert(line.size() - 1, "\r");
  write_text(path, "\n" + line + "\n");
  auto d = load_amat<float>(path);
  EXPECT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 4);
  fs::remove(path);
}

TEST(LoadAmat, DistributedFilesHaveExpectedSizes) {
  const char* dir = std::getenv("LRNET_MNIST_BG_DIR");
  if (!dir) GTEST_SKIP() << "LRNET_MNIST_BG_DIR not set";
  const fs::path root(dir);
  auto train = load_amat<float>((root / "mnist_background_images_train.amat").string());
  auto test = load_amat<float>((root / "mnist_background_images_test.amat").string());
  EXPECT_EQ(train.size(), 12000u);
  EXPECT_EQ(test.size(), 50000u);
}

TEST(ContrastNormalize, ConstantImageBecomesZero) {
  Dataset<double> d{Tensor<double>({1, 1, 28, 28}, 0.7), {1}, "x"};
  auto n = contrast_normalize(d);
  for (double v : n.images.data()) EXPECT_EQ(v, 0.0);
}

TEST(ContrastNormalize, ZeroMeanUnitStd) {
  auto d = synthetic_confusable<double>(10, 3);
  auto n = contrast_normalize(d);
  for (std::size_t i = 0; i < n.size(); ++i) {
    auto img = n.images.sample(i);
    double mean = 0, sq = 0;
    for (double v : img) mean += v;
    mean /= double(img.size());
    for (double v : img) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(sq / double(img.size())), 1.0, 1e-5);
  }
}

TEST(ContrastNormalize, AffineInvariantAndIdempotent) {
  auto d = synthetic_confusable<double>(4, 5);
  auto shifted = d;
  for (auto& v : shifted.images.data()) v = 0.3 * v + 0.2;
  auto a = contrast_normalize(d);
  auto b = contrast_normalize(shifted);
  auto twice = contrast_normalize(a);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    EXPECT_NEAR(a.images[i], b.images[i], 1e-9);
    EXPECT_NEAR(a.images[i], twice.images[i], 1e-9);
  }
  EXPECT_THROW(contrast_normalize(d, 0.0), Error);
}

TEST(FlipHorizontal, Cases) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  std::vector<std::uint8_t> yes{1};
  EXPECT_EQ(flip_horizontal(x, yes), Tensor<double>({1, 1, 2, 2}, {2, 1, 4, 3}));
  std::vector<std::uint8_t> no{0};
  EXPECT_EQ(flip_horizontal(x, no), x);

  std::mt19937_64 rng(1);
  auto r = test::random_tensor<double>({3, 2, 5, 4}, rng);
  std::vector<std::uint8_t> coins{1, 0, 1};
  EXPECT_EQ(flip_horizontal(flip_horizontal(r, coins), coins), r);

  Tensor<double> sym({1, 1, 1, 3}, {1, 5, 1});
  EXPECT_EQ(flip_horizontal(sym, yes), sym);
}

TEST(BatchIterator, EveryEpochIsAPermutation) {
  BatchIterator it(103, 10, 42);
  for (int e = 0; e < 5; ++e) {
    auto batches = it.next_epoch();
    ASSERT_EQ(batches.size(), 11u);
    EXPECT_EQ(batches.back().size(), 3u);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < 103; ++i) all.insert(i);
    EXPECT_EQ(seen, all);
  }
  EXPECT_EQ(it.epoch(), 5u);
}

TEST(BatchIterator, SeedDeterminesOrder) {
  BatchIterator a(50, 7, 9), b(50, 7, 9), c(50, 7, 10);
  auto ea = a.next_epoch();
  EXPECT_EQ(ea, b.next_epoch());
  EXPECT_NE(ea, c.next_epoch());
  EXPECT_NE(ea, a.next_epoch());
}

TEST(Gather, CopiesSamplesAndLabels) {
  auto d = synthetic_confusable<float>(3, 1);
  std::vector<std::size_t> idx{5, 0};
  auto [batch, labels] = gather(d, idx);
  EXPECT_EQ(batch.shape(), (Shape{2, 1, 28, 28}));
  EXPECT_TRUE(std::equal(batch.sample(0).begin(), batch.sample(0).end(),
                         d.images.sample(5).begin()));
  EXPECT_EQ(labels, (std::vector<int>{d.labels[5], d.labels[0]}));
  std::vector<std::size_t> bad{6};
  EXPECT_THROW(gather(d, bad), Error);
}

TEST(SyntheticConfusable, DeterministicAndBalanced) {
  auto a = synthetic_confusable<float>(20, 7);
  auto b = synthetic_confusable<float>(20, 7);
  auto c = synthetic_confusable<float>(20, 8);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, c.images);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 1), 20);
  for (float v : a.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(SyntheticConfusable, MeanIntensityDoesNotSeparateClasses) {
  auto d = synthetic_confusable<double>(500, 13);
  std::vector<std::pair<double, int>> means;
  for (std::size_t n = 0; n < d.size(); ++n) {
    double m = 0;
    for (double v : d.images.sample(n)) m += v;
    means.emplace_back(m / 784.0, d.labels[n]);
  }
  std::sort(means.begin(), means.end());
  // Best accuracy of any threshold rule on mean intensity, either polarity.
  std::size_t ones_below = 0;
  const std::size_t total = means.size();
  double best = 0.5;
  for (std::size_t i = 0; i < total; ++i) {
    ones_below += means[i].second == 1;
    const std::size_t zeros_below = i + 1 - ones_below;
    const std::size_t ones_above = 500 - ones_below;
    const double acc = double(zeros_below + ones_above) / double(total);
    best = std::max({best, acc, 1.0 - acc});
  }
  EXPECT_LT(best, 0.6);
}

TEST(DownsampleArea, PreservesMeanAndConstants) {
  auto d = synthetic_confusable<double>(3, 4);
  const auto small = downsample_area(d, 8);
  EXPECT_EQ(small.images.shape(), (Shape{6, 1, 8, 8}));
  EXPECT_EQ(small.labels, d.labels);
  for (std::size_t n = 0; n < d.size(); ++n) {
    double big_mean = 0, small_mean = 0;
    for (double v : d.images.sample(n)) big_mean += v / 784.0;
    for (double v : small.images.sample(n)) small_mean += v / 64.0;
    EXPECT_NEAR(small_mean, big_mean, 1e-12);
  }
  d.images.fill(0.25);
  const auto flat = downsample_area(d, 5);
  for (double v : flat.images.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(DownsampleArea, ExactBlocksAtDivisibleSide) {
  Dataset<double> d;
  d.images = Tensor<double>({1, 1, 28, 28});
  d.labels = {0};
  for (std::size_t i = 0; i < 784; ++i) d.images[i] = double(i);
  const auto out = downsample_area(d, 14);
  // Top-left 2x2 block holds 0, 1, 28, 29.
  EXPECT_DOUBLE_EQ(out.images[0], (0 + 1 + 28 + 29) / 4.0);
  EXPECT_THROW(downsample_area(d, 0), Error);
}

TEST(TransposeImages, SwapsRowsAndColumnsAndIsAnInvolution) {
  Dataset<double> d;
  d.images = Tensor<double>({2, 1, 28, 28});
  d.labels = {0, 1};
  for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = double(i);
  const auto t = transpose_images(d);
  EXPECT_EQ(t.images(0, 0, 3, 5), d.images(0, 0, 5, 3));
  EXPECT_EQ(t.images(1, 0, 27, 0), d.images(1, 0, 0, 27));
  EXPECT_EQ(transpose_images(t).images, d.images);
}

}  // namespace
}  // namespace lrnet
