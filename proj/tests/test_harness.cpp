#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "civsf/harness/checkpoint.hpp"
#include "civsf/harness/config.hpp"
#include "civsf/harness/metrics.hpp"
#include "civsf/harness/ppm.hpp"
#include "civsf/harness/report.hpp"

using namespace civsf;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "civsf_test_harness";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.set("framework", "ci-vsf");
  ck.set("note", "a b=c");
  Tensor<float> a({2, 3});
  for (std::size_t i = 0; i < 6; ++i) a[i] = static_cast<float>(i) * 0.25f - 1.0f;
  Tensor<float> b({4});
  b[2] = 7.5f;
  ck.tensors.emplace_back("vit.w", a);
  ck.tensors.emplace_back("dec.b", b);
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto ck = sample_checkpoint();
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.get("framework"), "ci-vsf");
  EXPECT_EQ(back.get("note"), "a b=c");
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_TRUE(bitwise_equal(back.tensors[0].second, ck.tensors[0].second));
  EXPECT_TRUE(bitwise_equal(back.tensors[1].second, ck.tensors[1].second));
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = scratch("rt.ckpt");
  save_checkpoint(ck, path);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), bytes);
}

TEST(Checkpoint, MalformedInputIsFormatError) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  for (std::size_t cut : {std::size_t{4}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> shortened(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(decode_checkpoint(shortened), FormatError) << "cut at " << cut;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer), FormatError);
}

TEST(Checkpoint, MetadataRules) {
  Checkpoint ck;
  EXPECT_THROW(ck.set("a:b", "x"), ContractError);
  EXPECT_THROW(ck.set("a", "x\ny"), ContractError);
  EXPECT_THROW(ck.get("missing"), DataError);
  EXPECT_EQ(ck.get_or("missing", "d"), "d");
  ck.set("k", "1");
  ck.set("k", "2");
  EXPECT_EQ(ck.meta.size(), 1u);
  EXPECT_EQ(ck.get("k"), "2");
}

TEST(Metrics, MaeMse) {
  const std::vector<double> p{1, 2, 3}, t{1, 4, 0};
  EXPECT_DOUBLE_EQ(mae(p, t), 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(mse(p, t), 13.0 / 3.0);
  EXPECT_THROW(mae(p, std::vector<double>{1}), ShapeError);
  EXPECT_THROW(mse(std::vector<double>{}, std::vector<double>{}), DomainError);
}

TEST(Metrics, MacroF1HandOracle) {
  // class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 1, fp 1, fn 0 -> 2/3
  const std::vector<int> pred{0, 1, 1}, truth{0, 0, 1};
  EXPECT_DOUBLE_EQ(macro_f1(pred, truth, 2), (2.0 / 3.0 + 2.0 / 3.0) / 2.0);
  // an absent class does not drag the average down
  EXPECT_DOUBLE_EQ(macro_f1(pred, truth, 5), (2.0 / 3.0 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(macro_f1(truth, truth, 3), 1.0);
  EXPECT_THROW(macro_f1(std::vector<int>{3}, std::vector<int>{0}, 3), DomainError);
}

TEST(Metrics, HorizonBucketBoundaries) {
  EXPECT_EQ(bucketize(0), "0 - 25 days");
  EXPECT_EQ(bucketize(24), "0 - 25 days");
  EXPECT_EQ(bucketize(25), "25 - 50 days");
  EXPECT_EQ(bucketize(49), "25 - 50 days");
  EXPECT_EQ(bucketize(50), "50 - 100 days");
  EXPECT_EQ(bucketize(99), "50 - 100 days");
  EXPECT_EQ(bucketize(100), "More than 100 days");
  EXPECT_EQ(bucketize(365), "More than 100 days");
  EXPECT_THROW(bucketize(-1), DomainError);
}

TEST(Ppm, ConstantImageIsMidGray) {
  std::vector<float> img(kBands * 4 * 4, 0.3f);
  const auto rgb = composite(img, 4);
  for (auto v : rgb.pixels) EXPECT_EQ(v, 128);
}

TEST(Ppm, HeaderAndRoundTrip) {
  std::vector<float> img(kBands * 8 * 8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 17) / 17.0f;
  const auto rgb = composite(img, 8);
  const auto path = scratch("img.ppm");
  write_ppm(rgb, path, {"target doy=120"});
  std::ifstream in(path, std::ios::binary);
  std::string magic, comment;
  std::getline(in, magic);
  std::getline(in, comment);
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(comment, "# target doy=120");
  const auto back = read_ppm(path);
  EXPECT_EQ(back.width, 8u);
  EXPECT_EQ(back.height, 8u);
  EXPECT_EQ(back.pixels, rgb.pixels);
  EXPECT_EQ(std::filesystem::file_size(path), 3u + comment.size() + 1 + 4 + 4 + 3 * 64);
}

TEST(Ppm, StretchUsesPercentiles) {
  std::vector<float> img(kBands * 10 * 10);
  for (std::size_t b = 0; b < kBands; ++b)
    for (std::size_t i = 0; i < 100; ++i) img[b * 100 + i] = static_cast<float>(i);
  const auto rgb = composite(img, 10);
  EXPECT_EQ(rgb.pixels[0], 0);
  EXPECT_EQ(rgb.pixels[3 * 99], 255);
  EXPECT_THROW(composite(img, 10, {0, 1, 6}), ConfigError);
  EXPECT_THROW(composite(img, 9), ShapeError);
}

TEST(Report, CellsAndRendering) {
  ReportTable t("results");
  t.add("CI-VSF", "soil forecast MAE", "0 - 25 days", 0.01234, 4);
  t.add("SM-VSF", "soil forecast MAE", "0 - 25 days", 0.5, 4);
  EXPECT_EQ(t.cell("CI-VSF", "soil forecast MAE", "0 - 25 days"), "0.0123");
  EXPECT_THROW(t.cell("SM-MR", "soil forecast MAE", "0 - 25 days"), RangeError);
  const auto text = t.to_text();
  EXPECT_NE(text.find("CI-VSF"), std::string::npos);
  EXPECT_NE(text.find("0.5000"), std::string::npos);
  const auto csv = t.to_csv();
  EXPECT_NE(csv.find("framework,metric,key,value"), std::string::npos);
}

TEST(Report, ReferenceTablesAreVerbatim) {
  const auto t = render_reference_tables();
  EXPECT_EQ(t.cell("CI-VSF", "soil forecast MAE", "More than 100 days"), "0.0204");
  EXPECT_EQ(t.cell("SM-VSF", "soil forecast MAE", "0 - 25 days"), "0.0406");
  EXPECT_EQ(t.cell("CI-VSF", "soil estimate MAE", "All"), "0.0282");
  EXPECT_EQ(t.cell("SM-MR", "soil estimate MAE (held-out region)", "T15TUH"), "0.1283");
  EXPECT_EQ(t.cell("CI-VSF", "crop macro-F1", "Average"), "0.6233");
  EXPECT_EQ(t.cell("SM-MR", "missing image MSE", "90%"), "826.23");
  EXPECT_EQ(t.cell("CI-VSF", "future image MSE", "50 - 100 days"), "358.23");
  EXPECT_NE(t.to_text().find(kReferenceLabel), std::string::npos);
}

TEST(Config, DefaultsOverridesAndErrors) {
  Config c;
  EXPECT_EQ(c.str("framework"), "ci-vsf");
  EXPECT_EQ(c.size("hidden"), 64u);
  EXPECT_DOUBLE_EQ(c.real("mask_ratio"), 0.5);
  c.parse("# comment\nhidden = 32\nframework=sm-mr  # trailing\n", "cfg");
  EXPECT_EQ(c.size("hidden"), 32u);
  EXPECT_EQ(c.str("framework"), "sm-mr");
  EXPECT_THROW(c.set("nonsense", "1"), ConfigError);
  EXPECT_THROW(c.set("hidden", "-3"), ConfigError);
  EXPECT_THROW(c.set("lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("framework", "other"), ConfigError);
  try {
    c.parse("seed=1\nbogus=2\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
  }
}

TEST(Config, HashTracksEffectiveValues) {
  Config a, b;
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash_hex().size(), 16u);
  b.set("seed", "1");
  EXPECT_NE(a.hash(), b.hash());
  b.set("seed", "0");
  EXPECT_EQ(a.hash(), b.hash());
}
