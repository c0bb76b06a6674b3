#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "cdpir/metrics.hpp"
#include "cdpir/random.hpp"
#include "cdpir/tensor_io.hpp"

using namespace cdpir;

namespace {

const ImageGrid kGrid{32, 32, 1.0};

Image structured(double offset = 0.0) {
  Image img(kGrid);
  for (int iy = 0; iy < kGrid.ny; ++iy)
    for (int ix = 0; ix < kGrid.nx; ++ix)
      img.at(ix, iy) = offset + 0.3 * std::sin(0.4 * ix) * std::cos(0.25 * iy) + (ix > 16 ? 0.2 : -0.2);
  return img;
}

Image shifted(const Image& x, double c) {
  Image out = x;
  for (auto& v : out.values) v += c;
  return out;
}

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Psnr, IdenticalIsInfinite) {
  const Image x = structured();
  EXPECT_TRUE(std::isinf(psnr(x, x, 1.0)));
  EXPECT_EQ(format_metric(psnr(x, x, 1.0)), "inf");
  EXPECT_TRUE(std::isinf(parse_metric("inf")));
}

TEST(Psnr, ConstantOffsetExamples) {
  const Image ref = structured(0.5);
  EXPECT_NEAR(psnr(shifted(ref, 0.01), ref, 1.0), 40.0, 1e-9);
  EXPECT_NEAR(psnr(shifted(ref, 0.1), ref, 1.0), 20.0, 1e-9);
  EXPECT_NEAR(psnr(shifted(ref, 0.1), ref, 2.0), 20.0 + 20.0 * std::log10(2.0), 1e-9);
}

TEST(Psnr, ShiftTheorem) {
  // Dyadic values keep every sum exact.
  Image ref(kGrid), x(kGrid);
  Engine rng = make_engine(1, 0);
  std::uniform_int_distribution<int> q(0, 1024);
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    ref.values[i] = q(rng) / 1024.0;
    x.values[i] = q(rng) / 1024.0;
  }
  EXPECT_EQ(psnr(shifted(x, 0.25), shifted(ref, 0.25), 1.0), psnr(x, ref, 1.0));
  const Image a = structured(), b = shifted(structured(), 0.03);
  EXPECT_NEAR(psnr(shifted(a, 0.37), shifted(b, 0.37), 1.0), psnr(a, b, 1.0), 1e-9);
}

TEST(Psnr, Errors) {
  EXPECT_THROW(psnr(structured(), Image(ImageGrid{16, 16, 1.0}), 1.0), std::invalid_argument);
  EXPECT_THROW(psnr(structured(), structured(), 0.0), std::invalid_argument);
}

TEST(Ssim, IdenticalIsOne) {
  const Image x = structured(0.5);
  EXPECT_EQ(ssim(x, x, 1.0), 1.0);
  EXPECT_LT(ssim(shifted(x, 1e-3), x, 1.0), 1.0);
}

TEST(Ssim, OffsetPenalized) {
  const Image x = structured(0.5);
  EXPECT_LT(ssim(shifted(x, 0.5), x, 1.0), 1.0);
}

TEST(Ssim, NegatedImageIsNegative) {
  // Fast oscillation: local means vanish, so only the structure term carries the sign.
  Image x(kGrid);
  for (int iy = 0; iy < kGrid.ny; ++iy)
    for (int ix = 0; ix < kGrid.nx; ++ix) x.at(ix, iy) = 0.3 * ((ix + iy) % 2 ? 1.0 : -1.0);
  Image neg = x;
  for (auto& v : neg.values) v = -v;
  EXPECT_LT(ssim(neg, x, 1.0), 0.0);
}

TEST(Ssim, Symmetric) {
  const Image a = structured(0.4);
  Image b = a;
  Engine rng = make_engine(2, 0);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : b.values) v += n(rng);
  EXPECT_NEAR(ssim(a, b, 1.0), ssim(b, a, 1.0), 1e-12);
}

TEST(Ssim, UndersizedRejected) {
  const Image small(ImageGrid{8, 8, 1.0});
  EXPECT_THROW(ssim(small, small, 1.0), std::invalid_argument);
}

TEST(Evaluate, DefaultRangeIsReferenceSpan) {
  const Image ref = structured(0.5);
  const auto r = evaluate(shifted(ref, 0.01), ref);
  EXPECT_DOUBLE_EQ(r.data_range, default_data_range(ref.values));
  EXPECT_NEAR(r.psnr_db, 20 * std::log10(r.data_range / 0.01), 1e-9);
  EXPECT_EQ(default_data_range(std::vector<double>(4, 2.0)), 1.0);
}

TEST(TensorIo, RandomRoundTripIsBitwise) {
  Tensor t;
  t.dims = {128, 128};
  Engine rng = make_engine(3, 0);
  std::normal_distribution<float> n;
  for (int i = 0; i < 128 * 128; ++i) t.data.push_back(n(rng));
  t.data[5] = std::numeric_limits<float>::infinity();
  t.data[6] = -0.0f;
  const auto path = temp("cdpir_tensor_rt.ten");
  write_tensor(path, t);
  const Tensor back = read_tensor(path);
  ASSERT_EQ(back.dims, t.dims);
  EXPECT_EQ(std::memcmp(back.data.data(), t.data.data(), t.data.size() * 4), 0);
  EXPECT_EQ(detail::read_file(path), encode_tensor(t));
  std::filesystem::remove(path);
}

TEST(TensorIo, FixedLittleEndianLayout) {
  Tensor t;
  t.dims = {1};
  t.data = {1.0f};
  const std::string bytes = encode_tensor(t);
  EXPECT_EQ(bytes.size(), 8u + 4 + 4 + 4 + 4);
  EXPECT_EQ(bytes.substr(0, 8), "CDPIRTEN");
  EXPECT_EQ(bytes.substr(20), std::string("\x00\x00\x80\x3f", 4));
}

TEST(TensorIo, RankThreeStack) {
  Tensor t;
  t.dims = {55, 128, 1};
  t.data.assign(55 * 128, 0.5f);
  t.data[77] = 2.0f;
  EXPECT_EQ(decode_tensor(encode_tensor(t)), t);
}

TEST(TensorIo, CorruptInputsRejected) {
  Tensor t;
  t.dims = {2, 3};
  t.data.assign(6, 1.0f);
  std::string bytes = encode_tensor(t);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor(bad), DataError);
  bad = bytes;
  bad[8] = 2;
  EXPECT_THROW(decode_tensor(bad), DataError);
  EXPECT_THROW(decode_tensor(bytes.substr(0, bytes.size() - 1)), DataError);
  EXPECT_THROW(decode_tensor(bytes.substr(0, 10)), DataError);
  EXPECT_THROW(read_tensor(temp("cdpir_does_not_exist.ten")), DataError);
  t.data.pop_back();
  EXPECT_THROW(encode_tensor(t), std::invalid_argument);
}

TEST(TensorIo, ImageAndSinogramShapesChecked) {
  const Image img = structured();
  const Image back = image_from_tensor(to_tensor(img), kGrid);
  for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_FLOAT_EQ(back.values[i], img.values[i]);
  EXPECT_THROW(image_from_tensor(to_tensor(img), ImageGrid{16, 64, 1.0}), DataError);
}

TEST(Preview, WindowMapping) {
  const auto pixel = [](const std::string& pgm, std::size_t i) {
    const std::size_t header = pgm.size() - 2 * kGrid.size();
    return (static_cast<unsigned char>(pgm[header + 2 * i]) << 8) | static_cast<unsigned char>(pgm[header + 2 * i + 1]);
  };
  const std::string lo = encode_preview(Image(kGrid, -0.2), -0.2, 1.3);
  const std::string hi = encode_preview(Image(kGrid, 1.3), -0.2, 1.3);
  const std::string mid = encode_preview(Image(kGrid, 0.55), -0.2, 1.3);
  EXPECT_EQ(lo.rfind("P5\n32 32\n65535\n", 0), 0u);
  for (std::size_t i = 0; i < kGrid.size(); ++i) {
    EXPECT_EQ(pixel(lo, i), 0);
    EXPECT_EQ(pixel(hi, i), 65535);
    EXPECT_NEAR(pixel(mid, i), 32768, 1);
  }
  EXPECT_EQ(pixel(encode_preview(Image(kGrid, 9.0), 0.0, 1.0), 0), 65535);
  EXPECT_THROW(encode_preview(Image(kGrid), 1.0, 1.0), std::invalid_argument);
}

TEST(MetricFormat, RoundTrip) {
  for (double v : {0.0, 38.36123456789, -1.5e-7, 1e300}) EXPECT_EQ(parse_metric(format_metric(v)), v);
  EXPECT_EQ(format_metric(-std::numeric_limits<double>::infinity()), "-inf");
}

TEST(MetricCsv, RoundTripWithInfinity) {
  const std::vector<MetricRow> rows{{"test_d0_0000", "cdpir", std::numeric_limits<double>::infinity(), 1.0},
                                    {"test_d2_0003", "asdpocs", 31.25, 0.8712345678901234}};
  const std::string text = encode_metric_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "case,method,psnr,ssim");
  EXPECT_NE(text.find("test_d0_0000,cdpir,inf,1\n"), std::string::npos);
  EXPECT_EQ(decode_metric_csv(text), rows);
  EXPECT_THROW(encode_metric_csv({{"a,b", "m", 1, 1}}), std::invalid_argument);
  EXPECT_THROW(decode_metric_csv("case,method,psnr\n"), DataError);
  EXPECT_THROW(decode_metric_csv("case,method,psnr,ssim\na,b,c\n"), DataError);
  EXPECT_THROW(decode_metric_csv("case,method,psnr,ssim\na,b,x,1\n"), DataError);
}
