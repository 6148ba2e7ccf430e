#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace sanr;
using sanr::testing::desk_config;
using sanr::testing::random_frozen;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool within_estimate(std::size_t payload_bytes, double est_bits) {
  return std::abs(payload_bytes * 8.0 - est_bits) <= 0.02 * est_bits + 64 * 8;
}

}  // namespace

TEST(Bitstream, RoundTripIsBitExact) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const FrozenModel m = random_frozen(desk_config(3, 32, 6, 3, 4), seed);
    const auto bytes = serialize_model(m);
    const FrozenModel back = deserialize_model(bytes);
    EXPECT_TRUE(back == m);
    EXPECT_TRUE(reconstruct(back) == reconstruct(m));
  }
}

TEST(Bitstream, RoundTripSingleLatentChannel) {
  const FrozenModel m = random_frozen(desk_config(2, 16, 3, 2, 1), 4);
  EXPECT_TRUE(deserialize_model(serialize_model(m)) == m);
}

TEST(Bitstream, RoundTripNonDefaultWidths) {
  ModelConfig cfg = desk_config(2, 32, 4, 2, 3);
  cfg.context_channels = 7;
  cfg.head_kernel_size = 1;
  const FrozenModel m = random_frozen(cfg, 5);
  const auto bytes = serialize_model(m);
  EXPECT_EQ(inspect_stream(bytes).config, cfg);
  EXPECT_TRUE(deserialize_model(bytes) == m);
}

TEST(Bitstream, NoiseSeedVariant) {
  const ModelConfig cfg = desk_config(2, 32, 4, 2, 3);
  const LightField lf = make_synthetic_lightfield(32, 32, 2, 2, 0.5, 1);
  const FrozenModel m =
      finalize_model(sanr::testing::random_model(cfg, 6), lf, 1e-5, WeightGrid::kSymmetric8Bit, 0xABCDEFull);
  const auto bytes = serialize_model(m);
  const StreamInfo info = inspect_stream(bytes);
  EXPECT_EQ(info.section_bytes(SectionTag::kLatents), 0u);
  EXPECT_EQ(info.section_bytes(SectionTag::kNoise), 13u);
  const FrozenModel back = deserialize_model(bytes);
  EXPECT_TRUE(back == m);
  EXPECT_EQ(*back.noise_seed, 0xABCDEFull);
}

TEST(Bitstream, TamperedPayloadFailsCrc) {
  const auto bytes = serialize_model(random_frozen(desk_config(2, 16, 3, 2, 2), 7));
  for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 5}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    EXPECT_EQ(error_of([&] { deserialize_model(bad); }), "CRC failure");
  }
}

TEST(Bitstream, VersionGate) {
  auto bytes = serialize_model(random_frozen(desk_config(2, 16, 3, 2, 2), 8));
  bytes[4] = 2;
  EXPECT_NE(error_of([&] { deserialize_model(bytes); }).find("unsupported version"), std::string::npos);
}

TEST(Bitstream, HeaderOnlyIsTruncated) {
  const auto bytes = serialize_model(random_frozen(desk_config(2, 16, 3, 2, 2), 9));
  const std::vector<std::uint8_t> header(bytes.begin(), bytes.begin() + kHeaderBytes);
  EXPECT_NE(error_of([&] { deserialize_model(header); }).find("truncated"), std::string::npos);
  const std::vector<std::uint8_t> stub(bytes.begin(), bytes.begin() + 6);
  EXPECT_NE(error_of([&] { deserialize_model(stub); }).find("truncated"), std::string::npos);
}

TEST(Bitstream, BadMagic) {
  auto bytes = serialize_model(random_frozen(desk_config(2, 16, 3, 2, 2), 10));
  bytes[0] = 'X';
  EXPECT_NE(error_of([&] { deserialize_model(bytes); }).find("magic"), std::string::npos);
}

TEST(Bitstream, SectionAccountingMatchesFileSize) {
  for (std::uint64_t seed : {11u, 12u}) {
    const auto bytes = serialize_model(random_frozen(desk_config(3, 32, 5, 2, 3), seed));
    const StreamInfo info = inspect_stream(bytes);
    std::size_t sum = kHeaderBytes + kFooterBytes;
    for (const auto& s : info.sections) sum += s.bytes;
    EXPECT_EQ(sum, bytes.size());
    EXPECT_EQ(info.total_bytes, bytes.size());
  }
}

TEST(Bitstream, HeaderMatchesConfig) {
  const ModelConfig cfg = desk_config(3, 48, 7, 5, 2);
  const StreamInfo info = inspect_stream(serialize_model(random_frozen(cfg, 13)));
  EXPECT_EQ(info.config, cfg);
  EXPECT_EQ(info.version, kFormatVersion);
}

TEST(Bitstream, BppDefinition) {
  const ModelConfig cfg = desk_config(3, 32, 4, 2, 2);
  const auto bytes = serialize_model(random_frozen(cfg, 14));
  EXPECT_DOUBLE_EQ(bpp(bytes.size(), 3, 3, 32, 32), bytes.size() * 8.0 / (9.0 * 32 * 32));
}

TEST(Bitstream, LittleEndianFields) {
  const ModelConfig cfg = desk_config(3, 32, 300, 2, 2);
  const auto bytes = serialize_model(random_frozen(cfg, 15));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SANR");
  EXPECT_EQ(bytes[5], 3);
  EXPECT_EQ(bytes[7] | bytes[8] << 8, 32);
  EXPECT_EQ(bytes[11] | bytes[12] << 8, 300);
  const std::uint32_t stored = bytes[bytes.size() - 4] | bytes[bytes.size() - 3] << 8 |
                               bytes[bytes.size() - 2] << 16 | static_cast<std::uint32_t>(bytes.back()) << 24;
  EXPECT_EQ(stored, detail::crc32_of(std::span(bytes).first(bytes.size() - 4)));
}

TEST(Crc32, KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(detail::crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST(PayloadCoders, WeightPayloadTracksEstimate) {
  Rng rng(16);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor w({static_cast<int>(100 + rng.below(3000))});
    const double spread = std::exp(rng.uniform(-2.0, 3.0));
    for (auto& v : w.storage()) v = static_cast<float>(spread * rng.normal());
    const QuantizedTensor q = quantize_with_stats(w, 0.05f);
    const auto payload = encode_weight_payload(q);
    EXPECT_TRUE(within_estimate(payload.size(), weight_rate_bits(q)))
        << payload.size() * 8 << " vs " << weight_rate_bits(q);
    EXPECT_EQ(decode_weight_payload(payload, q.ints.size(), q.laplace_mu, q.laplace_b, q.min_int(), q.max_int()),
              q.ints);
  }
}

TEST(PayloadCoders, LatentPayloadTracksEstimate) {
  for (std::uint64_t seed : {17u, 18u}) {
    const FrozenModel m = random_frozen(desk_config(3, 64, 4, 2, 4), seed);
    for (int l = 0; l < kNumBlocks; ++l) {
      const auto& y = (*m.latents)[l];
      const ContextModelParams ctx = m.context[l].dequantize();
      const auto payload = encode_latent_payload(y, ctx);
      const double est = latent_level_rate_bits(y, ctx);
      EXPECT_TRUE(within_estimate(payload.size(), est)) << payload.size() * 8 << " vs " << est;
    }
  }
}

TEST(PayloadCoders, LatentDecodingIsCausal) {
  const FrozenModel m = random_frozen(desk_config(2, 32, 4, 2, 5), 19);
  const auto& y = (*m.latents)[2];
  const ContextModelParams ctx = m.context[2].dequantize();
  const auto lo = *std::min_element(y.ints.begin(), y.ints.end()) - 3;
  const auto hi = *std::max_element(y.ints.begin(), y.ints.end()) + 3;
  const std::size_t plane = y.ints.size() / 5;
  // Symbols after channel c are replaced before decoding; the decoder must
  // still recover channels 0..c from the prefix of the payload.
  for (int c = 0; c < 4; ++c) {
    auto z = y;
    Rng rng(c);
    for (std::size_t i = (c + 1) * plane; i < z.ints.size(); ++i) z.ints[i] = lo + static_cast<int>(rng.below(hi - lo + 1));
    z.ints[0] = lo, z.ints[1] = hi;
    auto y2 = y;
    y2.ints[0] = lo, y2.ints[1] = hi;
    RangeEncoder e1, e2;
    detail::for_each_latent_table(5, y.shape[1], y.shape[2], y.first_channel(), ctx, lo, hi, y2.ints,
                                  [&](std::size_t i, const FrequencyTable& t) { e1.encode(y2.ints[i], t); });
    detail::for_each_latent_table(5, y.shape[1], y.shape[2], y.first_channel(), ctx, lo, hi, z.ints,
                                  [&](std::size_t i, const FrequencyTable& t) { e2.encode(z.ints[i], t); });
    const auto d1 = decode_latent_payload(e1.finish(), y.shape, y.first_channel(), ctx, lo, hi);
    const auto d2 = decode_latent_payload(e2.finish(), y.shape, y.first_channel(), ctx, lo, hi);
    for (std::size_t i = 0; i < (c + 1) * plane; ++i) ASSERT_EQ(d1[i], d2[i]);
    EXPECT_EQ(d1, y2.ints);
    EXPECT_EQ(d2, z.ints);
  }
}

TEST(Bitstream, EstimateNearStreamSize) {
  const FrozenModel m = random_frozen(desk_config(3, 64, 8, 3, 4), 20);
  const auto bytes = serialize_model(m);
  const StreamInfo info = inspect_stream(bytes);
  const RateBreakdown r = estimate_rates(m);
  const double coded = static_cast<double>(info.section_bytes(SectionTag::kWeights) +
                                           info.section_bytes(SectionTag::kLatents));
  EXPECT_LE(coded * 8, (r.latent_bits + r.weight_bits) * 1.05 + 64 * 8 * 24);
}

TEST(Bitstream, FileHelpersRoundTrip) {
  sanr::testing::TempDir dir;
  const std::vector<std::uint8_t> bytes{1, 2, 3, 250};
  write_bytes(dir / "a.bin", bytes);
  EXPECT_EQ(read_bytes(dir / "a.bin"), bytes);
  EXPECT_THROW(read_bytes(dir / "missing.bin"), Error);
}
