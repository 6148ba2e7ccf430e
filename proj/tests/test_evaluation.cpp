#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "test_support.hpp"

using namespace sanr;
using sanr::testing::TempDir;

namespace {

LightField constant_field(int u, int v, int h, int w, std::uint8_t value) {
  LightField lf(u, v, h, w);
  for (auto& img : lf.views()) std::fill(img.rgb.begin(), img.rgb.end(), value);
  return lf;
}

// Classic Bjontegaard: cubic through the points by normal equations, then
// the exact antiderivative over the overlapping interval.
double avg_cubic_gap(const std::vector<double>& xa, const std::vector<double>& ya, const std::vector<double>& xb,
                     const std::vector<double>& yb) {
  auto fit = [](const std::vector<double>& x, const std::vector<double>& y) {
    Eigen::Matrix4d ata = Eigen::Matrix4d::Zero();
    Eigen::Vector4d aty = Eigen::Vector4d::Zero();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Eigen::Vector4d row(1, x[i], x[i] * x[i], x[i] * x[i] * x[i]);
      ata += row * row.transpose();
      aty += row * y[i];
    }
    return Eigen::Vector4d(ata.ldlt().solve(aty));
  };
  auto prim = [](const Eigen::Vector4d& c, double t) {
    return c[0] * t + c[1] * t * t / 2 + c[2] * t * t * t / 3 + c[3] * t * t * t * t / 4;
  };
  const Eigen::Vector4d ca = fit(xa, ya), cb = fit(xb, yb);
  const double lo = std::max(*std::min_element(xa.begin(), xa.end()), *std::min_element(xb.begin(), xb.end()));
  const double hi = std::min(*std::max_element(xa.begin(), xa.end()), *std::max_element(xb.begin(), xb.end()));
  return ((prim(cb, hi) - prim(cb, lo)) - (prim(ca, hi) - prim(ca, lo))) / (hi - lo);
}

BdResult oracle_bd(const RDCurve& a, const RDCurve& t) {
  std::vector<double> ra, pa, rt, pt;
  for (auto p : a.points) ra.push_back(std::log10(p.bpp)), pa.push_back(p.psnr);
  for (auto p : t.points) rt.push_back(std::log10(p.bpp)), pt.push_back(p.psnr);
  return {(std::pow(10.0, avg_cubic_gap(pa, ra, pt, rt)) - 1.0) * 100.0, avg_cubic_gap(ra, pa, rt, pt)};
}

RDCurve anchor_curve() {
  return {"anchor", {{0.05, 30.1}, {0.1, 32.6}, {0.2, 35.0}, {0.4, 37.1}}};
}

std::string file_text(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Psnr, IdenticalFieldsHitTheCap) {
  const LightField a = make_synthetic_lightfield(16, 16, 3, 3, 0.5, 1);
  const PsnrResult r = psnr(a, a);
  EXPECT_EQ(r.mean, 100.0);
  for (double v : r.per_view) EXPECT_EQ(v, 100.0);
}

TEST(Psnr, MaximalErrorIsZeroDb) {
  EXPECT_EQ(psnr(constant_field(2, 2, 4, 4, 0), constant_field(2, 2, 4, 4, 255)).mean, 0.0);
}

TEST(Psnr, OneViewAtTenDb) {
  EXPECT_NEAR(psnr_from_mse(255.0 * 255.0 / 10.0), 10.0, 1e-12);
  // Every pixel off by 255 / sqrt(10) is not an integer; use a mix of 0 and
  // 255 errors whose mean square is 255^2 / 10.
  LightField ref = constant_field(1, 2, 10, 1, 0), rec = ref;
  rec.views()[1].rgb[0] = rec.views()[1].rgb[1] = rec.views()[1].rgb[2] = 255;
  const PsnrResult r = psnr(ref, rec);
  EXPECT_NEAR(r.at(0, 1), 10.0, 1e-12);
  EXPECT_EQ(r.at(0, 0), 100.0);
}

TEST(Psnr, MeanEqualsMeanOfMatrix) {
  const LightField a = make_synthetic_lightfield(16, 16, 3, 4, 0.5, 2);
  const LightField b = make_synthetic_lightfield(16, 16, 3, 4, 0.5, 3);
  const PsnrResult r = per_view_psnr_map(a, b);
  ASSERT_EQ(r.per_view.size(), 12u);
  EXPECT_EQ(r.views_u, 3);
  EXPECT_EQ(r.views_v, 4);
  double s = 0.0;
  for (double v : r.per_view) s += v;
  EXPECT_EQ(r.mean, s / 12.0);
}

TEST(Psnr, DimensionMismatch) {
  EXPECT_THROW(psnr(constant_field(2, 2, 4, 4, 0), constant_field(2, 3, 4, 4, 0)), Error);
}

TEST(Bpp, Examples) {
  EXPECT_NEAR(bpp(1000, 9, 9, 64, 64), 8000.0 / 331776.0, 1e-15);
  EXPECT_NEAR(bpp(1000, 9, 9, 64, 64), 0.02411, 1e-5);
  EXPECT_EQ(bpp(0, 9, 9, 64, 64), 0.0);
  EXPECT_DOUBLE_EQ(bpp(2000, 9, 9, 64, 64), 2 * bpp(1000, 9, 9, 64, 64));
}

TEST(ErrorMap, Examples) {
  const LightField a = make_synthetic_lightfield(16, 16, 3, 3, 0.5, 4);
  for (double v : avg_error_map(a, a).values) EXPECT_EQ(v, 0.0);

  LightField b = a;
  auto& view = b.views()[4];
  for (auto& p : view.rgb) p = static_cast<std::uint8_t>(p < 128 ? p + 90 : p - 90);
  const ErrorMap m = avg_error_map(a, b);
  for (std::size_t px = 0; px < 256; ++px) {
    double e = 0.0;
    for (int c = 0; c < 3; ++c) e += std::abs(double(a.views()[4].rgb[px * 3 + c]) - view.rgb[px * 3 + c]);
    EXPECT_NEAR(m.values[px], e / 3.0 / 9.0, 1e-12);
  }

  const ErrorMap one = avg_error_map(constant_field(2, 3, 4, 5, 10), constant_field(2, 3, 4, 5, 11));
  EXPECT_EQ(one.height, 4);
  EXPECT_EQ(one.width, 5);
  for (double v : one.values) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(PerViewMap, SymmetricFixtureGivesTransposeSymmetricMap) {
  // Model whose u- and v-branches mirror each other: W_u[i] = W_v[U-1-i] and
  // every downstream consumer treats the two angular channels alike. View
  // (u, v) then renders like view (V-1-v, U-1-u).
  const ModelConfig cfg = sanr::testing::desk_config(5, 32, 6, 3, 3);
  SanrModel m = sanr::testing::random_model(cfg, 31, 1.0);
  const int cs = cfg.spatial_channels, cout = cfg.out_channels(), n = cfg.views_u, r = cfg.rank;
  for (int b = 0; b < kNumBlocks; ++b) {
    auto& w = m.blocks[b].weights;
    const int cin = cfg.in_channels(b);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < cin * r; ++k) w.horizontal[i * cin * r + k] = w.vertical[(n - 1 - i) * cin * r + k];
    w.bias_u.fill(0.0f), w.bias_v.fill(0.0f);
    if (b > 0) {
      auto tie = [&](Tensor& t, int rows) {
        for (int o = 0; o < rows; ++o)
          for (int j = 0; j < r; ++j) t[(o * cin + cs + 1) * r + j] = t[(o * cin + cs) * r + j];
      };
      tie(w.spatial, cs), tie(w.horizontal, n), tie(w.vertical, n);
    }
    m.blocks[b].bn_gamma[cs + 1] = m.blocks[b].bn_gamma[cs];
    m.blocks[b].bn_beta[cs + 1] = m.blocks[b].bn_beta[cs];
  }
  const int hk2 = cfg.head_kernel_size * cfg.head_kernel_size;
  for (int o = 0; o < 3; ++o)
    for (int t = 0; t < hk2; ++t) m.head.kernel[(o * cout + cs + 1) * hk2 + t] = m.head.kernel[(o * cout + cs) * hk2 + t];

  const LightField ref = make_synthetic_lightfield(32, 32, 5, 5, 0.0, 32);
  const FrozenModel fm = finalize_model(m, ref, 1e-5);
  const PsnrResult map = per_view_psnr_map(ref, reconstruct(fm));
  double spread = 0.0;
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      EXPECT_NEAR(map.at(u, v), map.at(n - 1 - v, n - 1 - u), 0.5) << u << "," << v;
      spread = std::max(spread, std::abs(map.at(u, v) - map.at(0, 0)));
    }
  EXPECT_GT(spread, 0.0);
}

TEST(PerViewMap, IdenticalFieldsUniform) {
  const LightField a = make_synthetic_lightfield(16, 16, 2, 5, 0.5, 5);
  const PsnrResult r = per_view_psnr_map(a, a);
  EXPECT_EQ(r.per_view.size(), 10u);
  for (double v : r.per_view) EXPECT_EQ(v, 100.0);
}

TEST(BdMetrics, IdentityCurves) {
  const BdResult r = bd_metrics(anchor_curve(), anchor_curve());
  EXPECT_NEAR(r.bd_rate_percent, 0.0, 1e-9);
  EXPECT_NEAR(r.bd_psnr_db, 0.0, 1e-9);
}

TEST(BdMetrics, HalfRateShift) {
  RDCurve t = anchor_curve();
  for (auto& p : t.points) p.bpp /= 2;
  const BdResult r = bd_metrics(anchor_curve(), t);
  EXPECT_NEAR(r.bd_rate_percent, -50.0, 0.1);
}

TEST(BdMetrics, OneDecibelOffset) {
  RDCurve t = anchor_curve();
  for (auto& p : t.points) p.psnr += 1.0;
  EXPECT_NEAR(bd_metrics(anchor_curve(), t).bd_psnr_db, 1.0, 1e-6);
}

TEST(BdMetrics, MatchesNormalEquationOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    RDCurve a{"a", {}}, t{"t", {}};
    double ra = 0.02, rt = 0.03;
    double pa = 28.0, pt = 28.5;
    for (int i = 0; i < 4 + trial % 3; ++i) {
      ra *= rng.uniform(1.5, 2.2), rt *= rng.uniform(1.5, 2.2);
      pa += rng.uniform(1.0, 3.0), pt += rng.uniform(1.0, 3.0);
      a.points.push_back({ra, pa}), t.points.push_back({rt, pt});
    }
    const BdResult got = bd_metrics(a, t), want = oracle_bd(a, t);
    EXPECT_NEAR(got.bd_psnr_db, want.bd_psnr_db, 1e-6);
    EXPECT_NEAR(got.bd_rate_percent, want.bd_rate_percent, 1e-5 * std::max(1.0, std::abs(want.bd_rate_percent)));
  }
}

TEST(BdMetrics, Antisymmetry) {
  // Smooth synthetic curves: PSNR = 40 + 6 log2(bpp) shifted.
  RDCurve a{"a", {}}, t{"t", {}};
  for (double x : {0.05, 0.1, 0.2, 0.4, 0.8}) {
    a.points.push_back({x, 40 + 6 * std::log2(x)});
    t.points.push_back({x * 1.1, 40.3 + 6 * std::log2(x * 1.1) + 0.02 * std::log2(x) * std::log2(x)});
  }
  const BdResult ab = bd_metrics(a, t), ba = bd_metrics(t, a);
  EXPECT_EQ(ab.bd_psnr_db, -ba.bd_psnr_db);
  EXPECT_NEAR((1 + ab.bd_rate_percent / 100) * (1 + ba.bd_rate_percent / 100), 1.0, 1e-3);
}

TEST(BdMetrics, Preconditions) {
  RDCurve few{"few", {{0.1, 30}, {0.2, 32}, {0.3, 33}}};
  EXPECT_THROW(bd_metrics(few, anchor_curve()), Error);
  RDCurve far{"far", {{10, 50}, {20, 51}, {40, 52}, {80, 53}}};
  EXPECT_THROW(bd_metrics(anchor_curve(), far), Error);
  RDCurve bad{"bad", {{0.1, 30}, {0.1, 31}, {0.2, 32}, {0.3, 33}}};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Kmac, SingleConvExample) {
  EXPECT_NEAR(conv_macs(1, 1, 3, 4096) / 4096 / 1000, 0.009, 1e-15);
  EXPECT_EQ(conv_macs(2, 5, 3, 100), 2 * conv_macs(1, 5, 3, 100));
}

TEST(Kmac, BlockConvLinearInInputChannels) {
  ModelConfig a = sanr::testing::desk_config(3, 64, 8, 2, 4), b = a;
  b.latent_channels = 8;  // doubles block 0 input channels
  const auto ma = decode_macs(a), mb = decode_macs(b);
  const double block0_a = 9.0 * conv_macs(4, 10, 3, 4 * 4), block0_b = 9.0 * conv_macs(8, 10, 3, 4 * 4);
  EXPECT_EQ(block0_b, 2 * block0_a);
  EXPECT_GT(mb.block_conv, ma.block_conv);
}

TEST(Kmac, BreakdownMatchesHandCount) {
  // 1x1 views, 16x16, C_S=1, r=1, C_l=1, k=1, head 1x1.
  ModelConfig c = sanr::testing::desk_config(1, 16, 1, 1, 1);
  c.kernel_size = 1;
  c.head_kernel_size = 1;
  const MacBreakdown m = decode_macs(c);
  // Latent sizes 1, 2, 4, 8 squared; C_out = 3; C_in = 1, 4, 4, 4.
  EXPECT_EQ(m.block_conv, 1 * 3 * 1 + 4 * 3 * 4 + 4 * 3 * 16 + 4 * 3 * 64);
  EXPECT_EQ(m.kernel_composition, 3 * 1 + 3 * 4 + 3 * 4 + 3 * 4);
  EXPECT_EQ(m.normalization, 3 * (4 + 16 + 64 + 256));
  EXPECT_EQ(m.head, 3 * 3 * 256);
  EXPECT_EQ(m.context, 0);
  EXPECT_EQ(m.pixels, 256);
}

TEST(Kmac, ConvolutionalPartInvariantToSize) {
  for (int cs : {16, 48}) {
    ModelConfig a = sanr::testing::desk_config(9, 64, cs, 6, 10), b = a;
    b.height = b.width = 128;
    const double ka = decode_macs(a).convolutional_kmac_per_pixel(), kb = decode_macs(b).convolutional_kmac_per_pixel();
    EXPECT_NEAR(ka, kb, 0.01 * ka);
  }
}

TEST(Kmac, FullScaleSameOrderAsReferenceCodec) {
  ModelConfig c;  // C_S = 48, 9x9 views of 432x624
  const double k = kmac_per_pixel(c);
  EXPECT_LT(std::abs(std::log10(k / 4.07)), 1.0) << k;
}

TEST(EmitReports, RowsAndDeterminism) {
  TempDir dir;
  const RDCurve c{"sanr", {{0.1, 30.0}, {0.2, 33.5}}};
  const LightField a = make_synthetic_lightfield(16, 16, 3, 3, 0.5, 7);
  const LightField b = make_synthetic_lightfield(16, 16, 3, 3, 0.5, 8);
  const ReportMaps maps{avg_error_map(a, b), psnr(a, b)};
  emit_reports({c}, maps, dir.path());
  const std::string first = file_text(dir / "rd.csv");
  EXPECT_EQ(first, "label,bpp,psnr_db\nsanr,0.100000,30.000000\nsanr,0.200000,33.500000\n");
  emit_reports({c}, maps, dir.path());
  EXPECT_EQ(file_text(dir / "rd.csv"), first);
  for (const char* f : {"rd.png", "error_map.png", "per_view_psnr.png", "error_map.json", "per_view_psnr.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(fs::file_size(dir / "error_map.f32"), 16u * 16u * 4u);
  EXPECT_EQ(fs::file_size(dir / "per_view_psnr.f32"), 9u * 4u);
  const Image png = read_png(dir / "per_view_psnr.png");
  EXPECT_GT(png.width, 0);
}

TEST(EmitReports, EmptyCurveListRejected) {
  TempDir dir;
  EXPECT_THROW(emit_reports({}, {}, dir.path()), Error);
}
