// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `acceptance 3 10`.

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <string>

#include "test_support.hpp"

using namespace sanr;
using sanr::testing::desk_config;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// The desk fixture shared by criteria 6-8.
const LightField& fixture() {
  static const LightField lf = make_synthetic_lightfield(64, 64, 3, 3, 1.0, 42);
  return lf;
}

ModelConfig fixture_config() { return desk_config(3, 64, 16, 4, 4); }

TrainConfig fixture_train(double lambda, long iterations, long sga_iterations, std::uint64_t seed) {
  TrainConfig t;
  t.lambda = lambda;
  t.samples_per_sai = 100;
  t.max_epochs = 30;
  t.max_iterations = iterations;
  t.sga_epochs = sga_iterations > 0 ? 1 : 0;
  t.max_sga_iterations = sga_iterations;
  t.seed = seed;
  return t;
}

// Survival function above the location avoids 1 - 1 cancellation; the cap is
// the coder's minimum table mass.
double oracle_bits(double x, double mu, double b) {
  auto cdf = [&](double t) { return t < mu ? 0.5 * std::exp((t - mu) / b) : 1.0 - 0.5 * std::exp(-(t - mu) / b); };
  auto sf = [&](double t) { return t < mu ? 1.0 - 0.5 * std::exp((t - mu) / b) : 0.5 * std::exp(-(t - mu) / b); };
  const double p = x <= mu ? cdf(x + 0.5) - cdf(x - 0.5) : sf(x - 0.5) - sf(x + 0.5);
  return std::min(-std::log2(p), 16.0);
}

bool within_estimate(std::size_t payload_bytes, double est_bits, double* worst) {
  const double slack = std::abs(payload_bytes * 8.0 - est_bits) - 0.02 * est_bits;
  *worst = std::max(*worst, slack / 8.0);
  return slack <= 64 * 8;
}

// 1. Bitstream round trip over 20 randomized models.
Verdict bitstream_round_trip() {
  const auto t0 = Clock::now();
  int ok = 0;
  Rng pick(101);
  for (int i = 0; i < 20; ++i) {
    ModelConfig cfg = desk_config(2 + static_cast<int>(pick.below(3)), 16 * (1 + static_cast<int>(pick.below(3))),
                                  2 + static_cast<int>(pick.below(12)), 1 + static_cast<int>(pick.below(6)),
                                  1 + static_cast<int>(pick.below(6)));
    cfg.views_v = 1 + static_cast<int>(pick.below(4));
    if (i % 5 == 4) cfg.context_channels = 2 + static_cast<int>(pick.below(6));
    const FrozenModel m = sanr::testing::random_frozen(cfg, 1000 + i);
    const auto bytes = serialize_model(m);
    const FrozenModel back = deserialize_model(bytes);
    bool same = back == m;
    for (int b = 0; b < kNumBlocks && same; ++b)
      for (int s = 0; s < kQatTensorsPerBlock; ++s) same &= back.blocks[b].qat[s].ints == m.blocks[b].qat[s].ints;
    same &= reconstruct(back) == reconstruct(m);
    ok += same;
  }
  const double secs = seconds_since(t0);
  return {ok == 20 && secs < 120.0, fmt("%d/20 models bit-exact, %.1f s (limit 120 s)", ok, secs)};
}

// 2. Coded payloads against the rate estimates, per tensor.
Verdict estimator_coder_agreement() {
  double worst = -1e300;
  int ok = 0, total = 0;
  Rng rng(202);
  for (int i = 0; i < 50; ++i) {
    Tensor w({static_cast<int>(200 + rng.below(20000))});
    const double spread = std::exp(rng.uniform(-3.0, 3.0));
    for (auto& v : w.storage()) v = static_cast<float>(spread * (rng.uniform() < 0.5 ? rng.normal() : rng.uniform(-1, 1)));
    const QuantizedTensor q = quantize_with_stats(w, static_cast<float>(std::exp(rng.uniform(-4.0, 0.0))));
    ok += within_estimate(encode_weight_payload(q).size(), weight_rate_bits(q), &worst);
    ++total;
  }
  const LightField lf = make_synthetic_lightfield(32, 32, 3, 3, 1.0, 7);
  for (int i = 0; i < 10; ++i) {
    TrainConfig t;
    t.lambda = 1e-3;
    t.samples_per_sai = 20;
    t.max_iterations = 120;
    t.sga_epochs = 1;
    t.max_sga_iterations = 20;
    t.seed = 300 + i;
    const EncodeResult r = encode_lightfield(lf, desk_config(3, 32, 8, 2, 4), t);
    for (int l = 0; l < kNumBlocks; ++l) {
      const auto& y = (*r.model.latents)[l];
      const ContextModelParams ctx = r.model.context[l].dequantize();
      ok += within_estimate(encode_latent_payload(y, ctx).size(), latent_level_rate_bits(y, ctx), &worst);
      ++total;
    }
  }
  return {ok == total, fmt("%d/%d tensors within 2%% + 64 B (50 weight tensors, 10 trained latent sets); "
                           "worst excess over 2%% = %.1f B",
                           ok, total, worst)};
}

// 3. Closed-form Laplace rates.
Verdict closed_form_rates() {
  const double a = laplace_rate(std::vector<double>{0.0}, {0.0, 1.0}).bits;
  const double b = laplace_rate(std::vector<double>{3.0}, {0.0, 1.0}).bits;
  const double ca = -std::log2(1.0 - std::exp(-0.5)), cb = -std::log2(0.5 * (std::exp(-2.5) - std::exp(-3.5)));
  const bool pass = std::abs(a - 1.3457) <= 1e-3 && std::abs(b - 5.269) <= 1e-3 && std::abs(a - ca) < 1e-12 &&
                    std::abs(b - cb) < 1e-12;
  return {pass, fmt("R(0;0,1) = %.6f bits, R(3;0,1) = %.6f bits (tol 1e-3)", a, b)};
}

// 4. Gradients against central differences; STE backward identity.
Verdict gradient_checks() {
  // Small step: the context network is piecewise linear, and a wide central
  // difference straddling a kink is biased.
  const double h = 1e-5;
  double worst = 0.0;
  auto rel = [&](double g, double fd) { worst = std::max(worst, std::abs(g - fd) / std::max(1.0, std::abs(fd))); };
  Rng rng(404);
  for (int i = 0; i < 500; ++i) {
    const double x = std::round(rng.uniform(-6, 6)), mu = rng.uniform(-1, 1), b = rng.uniform(0.3, 3);
    const SymbolCost c = laplace_symbol_cost(x, mu, b);
    rel(c.d_mu, (oracle_bits(x, mu + h, b) - oracle_bits(x, mu - h, b)) / (2 * h));
    rel(c.d_b, (oracle_bits(x, mu, b + h) - oracle_bits(x, mu, b - h)) / (2 * h));
  }
  auto ctx = init_context_model(4, rng);
  ctx.b3[1] = 1.5f;
  for (int trial = 0; trial < 3; ++trial) {
    TensorD y({3, 5, 5});
    for (auto& v : y.storage()) v = 2 * rng.normal();
    y = add_uniform_noise(y, rng);
    const LaplaceParams first{0.2, 1.4};
    const LatentRate r = latent_rate(y, ctx, first, true);
    for (std::size_t i = 0; i < y.size(); ++i) {
      TensorD p = y, m = y;
      p[i] += h, m[i] -= h;
      rel(r.grad[i], (latent_rate(p, ctx, first).bits - latent_rate(m, ctx, first).bits) / (2 * h));
    }
  }
  Tensor g({1000});
  for (auto& v : g.storage()) v = static_cast<float>(rng.normal());
  const bool ste = ste_round_backward(g) == g;
  return {worst <= 1e-4 && ste, fmt("max relative FD error %.2e (tol 1e-4), STE backward identity: %s", worst,
                                    ste ? "yes" : "no")};
}

// 5. Latent shape chain and full-size forward passes.
Verdict shape_chain() {
  bool pass = true;
  const std::array<std::pair<int, int>, 4> lytro{{{27, 39}, {54, 78}, {108, 156}, {216, 312}}};
  const std::array<int, 4> hci{32, 64, 128, 256};
  for (int l = 1; l <= 4; ++l) {
    pass &= latent_shape(l, 432, 624) == lytro[l - 1];
    pass &= latent_shape(l, 512, 512) == std::make_pair(hci[l - 1], hci[l - 1]);
  }
  std::string shapes;
  for (auto [h, w] : {std::pair{432, 624}, std::pair{512, 512}}) {
    ModelConfig cfg = desk_config(2, 16, 4, 2, 2);
    cfg.height = h, cfg.width = w;
    const FrozenModel fm = sanr::testing::random_frozen(cfg, 5);
    const Tensor out = sanr_forward(decoder_network(fm), {1, 0}, latent_inputs(fm));
    const Image img = to_image(out);
    pass &= out.shape() == std::vector<int>{3, h, w} && img.rgb.size() == static_cast<std::size_t>(h) * w * 3;
    shapes += fmt(" %dx%dx%d", out.dim(1), out.dim(2), out.dim(0));
  }
  return {pass, "latent chains 27x39..216x312 and 32..256; forward outputs" + shapes};
}

// 6. Desk-scale overfit.
Verdict desk_overfit() {
  constexpr double kThresholdDb = 35.0;
  const auto t0 = Clock::now();
  const TrainResult r = train(fixture(), fixture_config(), fixture_train(0.0, 3000, 0, 1));
  const FrozenModel fm = finalize_model(r.model, fixture(), 1e-5);
  const double db = psnr(fixture(), reconstruct(fm)).mean;
  const double secs = seconds_since(t0);
  auto trace = [](const TrainReport& rep) {
    std::vector<double> v;
    for (const auto& e : rep.epochs) v.push_back(e.loss);
    return v;
  };
  const TrainResult a = train(fixture(), fixture_config(), fixture_train(0.0, 200, 0, 5));
  const TrainResult b = train(fixture(), fixture_config(), fixture_train(0.0, 200, 0, 5));
  const bool deterministic = trace(a.report) == trace(b.report) && a.model.latents == b.model.latents;
  return {db >= kThresholdDb && deterministic && secs < 900.0,
          fmt("%.2f dB after %ld iterations (threshold %.0f dB), %.0f s (limit 900 s), deterministic: %s", db,
              r.report.iterations, kThresholdDb, secs, deterministic ? "yes" : "no")};
}

// 7. RD monotonicity over lambda.
Verdict rd_monotonicity() {
  std::vector<std::pair<double, double>> pts;
  std::string detail;
  for (double lambda : {1e-4, 1e-3, 1e-2}) {
    const EncodeResult r = encode_lightfield(fixture(), fixture_config(), fixture_train(lambda, 600, 120, 7));
    pts.emplace_back(r.bpp, r.quality.mean);
    detail += fmt(" lambda=%g: %.4f bpp %.2f dB;", lambda, r.bpp, r.quality.mean);
  }
  bool pass = true;
  for (std::size_t i = 1; i < pts.size(); ++i) pass &= pts[i].first <= pts[i - 1].first && pts[i].second <= pts[i - 1].second;
  return {pass, detail};
}

// 8. Ablation direction and SGA improvement.
Verdict ablation() {
  const long iters = 600, sga = 120;
  const EncodeResult base = encode_base(fixture(), fixture_config(), fixture_train(0.0, iters, 0, 11));
  // Bisect lambda (log scale) until SANR lands within 10% of the base bpp.
  double lo = 1e-5, hi = 10.0;
  std::optional<EncodeResult> match;
  std::string trials;
  for (int k = 0; k < 8 && !match; ++k) {
    const double lambda = std::sqrt(lo * hi);
    EncodeResult r = encode_lightfield(fixture(), fixture_config(), fixture_train(lambda, iters, sga, 11));
    trials += fmt(" %.2g->%.3f", lambda, r.bpp);
    if (std::abs(r.bpp / base.bpp - 1.0) <= 0.10) {
      match = std::move(r);
    } else if (r.bpp > base.bpp) {
      lo = lambda;
    } else {
      hi = lambda;
    }
  }
  int sga_ok = 0;
  const LightField& lf = fixture();
  for (int s = 0; s < 10; ++s) {
    TrainConfig t = fixture_train(1e-3, 300, 60, 500 + s);
    TrainResult tr = train(lf, fixture_config(), t);
    const RdEvaluation before = evaluate_rd(finalize_model(tr.model, lf, t.bn_eps), lf, t.lambda, t.batch_views);
    const SanrModel tuned = sga_finetune(std::move(tr.model), lf, t, tr.report);
    const RdEvaluation after = evaluate_rd(finalize_model(tuned, lf, t.bn_eps), lf, t.lambda, t.batch_views);
    sga_ok += after.loss <= before.loss;
  }
  const bool matched = match.has_value();
  const bool better = matched && match->quality.mean >= base.quality.mean;
  std::string d = fmt("base+8bit %.4f bpp %.2f dB; ", base.bpp, base.quality.mean);
  d += matched ? fmt("SANR %.4f bpp %.2f dB; ", match->bpp, match->quality.mean) : "no lambda matched bpp (" + trials + "); ";
  d += fmt("SGA kept or lowered the loss in %d/10 seeds", sga_ok);
  return {better && sga_ok >= 9, d};
}

// 9. Context causality, exact.
Verdict context_causality() {
  bool pass = true;
  int checks = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FrozenModel m = sanr::testing::random_frozen(desk_config(2, 32, 4, 2, 6), 900 + seed);
    for (int l = 0; l < kNumBlocks; ++l) {
      const QuantizedLatent& y = (*m.latents)[l];
      const ContextModelParams ctx = m.context[l].dequantize();
      const int channels = y.shape[0];
      const std::size_t plane = y.ints.size() / channels;
      const std::int32_t lo = -40, hi = 40;
      const LatentRate base = latent_rate(y.values_d(), ctx, y.first_channel());
      std::vector<FrequencyTable> base_tables;
      detail::for_each_latent_table(channels, y.shape[1], y.shape[2], y.first_channel(), ctx, lo, hi, y.ints,
                                    [&](std::size_t, const FrequencyTable& t) { base_tables.push_back(t); });
      RangeEncoder enc0;
      for (std::size_t i = 0; i < y.ints.size(); ++i) enc0.encode(y.ints[i], base_tables[i]);
      const auto decoded0 = decode_latent_payload(enc0.finish(), y.shape, y.first_channel(), ctx, lo, hi);
      pass &= decoded0 == y.ints;
      Rng rng(seed * 31 + l);
      for (int c = 0; c + 1 < channels; ++c) {
        QuantizedLatent z = y;
        for (std::size_t i = (c + 1) * plane; i < z.ints.size(); ++i)
          z.ints[i] = static_cast<std::int32_t>(rng.below(81)) - 40;
        const LatentRate r = latent_rate(z.values_d(), ctx, z.first_channel());
        for (int k = 0; k <= c; ++k) pass &= r.channel_bits[k] == base.channel_bits[k];
        std::vector<FrequencyTable> tables;
        detail::for_each_latent_table(channels, z.shape[1], z.shape[2], z.first_channel(), ctx, lo, hi, z.ints,
                                      [&](std::size_t, const FrequencyTable& t) { tables.push_back(t); });
        RangeEncoder enc;
        for (std::size_t i = 0; i < z.ints.size(); ++i) enc.encode(z.ints[i], tables[i]);
        const auto decoded = decode_latent_payload(enc.finish(), z.shape, z.first_channel(), ctx, lo, hi);
        for (std::size_t i = 0; i < (c + 1) * plane; ++i) {
          pass &= tables[i].cum == base_tables[i].cum && decoded[i] == decoded0[i];
        }
        ++checks;
      }
    }
  }
  return {pass, fmt("%d perturbations: channel costs, tables and decoded prefixes unchanged", checks)};
}

// 10. BD metric oracles.
Verdict bd_oracles() {
  const RDCurve anchor{"anchor", {{0.05, 30.1}, {0.1, 32.6}, {0.2, 35.0}, {0.4, 37.1}}};
  RDCurve half = anchor, plus = anchor;
  for (auto& p : half.points) p.bpp /= 2;
  for (auto& p : plus.points) p.psnr += 1.0;
  const BdResult id = bd_metrics(anchor, anchor), h = bd_metrics(anchor, half), d = bd_metrics(anchor, plus);
  const bool pass = std::abs(id.bd_rate_percent) < 1e-9 && std::abs(id.bd_psnr_db) < 1e-9 &&
                    std::abs(h.bd_rate_percent + 50.0) <= 0.1 && std::abs(d.bd_psnr_db - 1.0) <= 1e-6;
  return {pass, fmt("identity (%.2g%%, %.2g dB), half rate %.4f%%, +1 dB -> %.8f dB", id.bd_rate_percent,
                    id.bd_psnr_db, h.bd_rate_percent, d.bd_psnr_db)};
}

// 11. Share of the 16-bit raw section at C_S = 48.
Verdict raw_share() {
  const LightField lf = make_synthetic_lightfield(64, 64, 9, 9, 1.0, 42);
  TrainConfig t;
  const Preset p = make_preset("r1", "epfl");
  t.lambda = p.lambda;
  t.samples_per_sai = 20;
  t.max_iterations = 300;
  t.sga_epochs = 1;
  t.max_sga_iterations = 60;
  t.seed = 1;
  const EncodeResult r = encode_lightfield(lf, desk_config(9, 64, p.spatial_channels, 6, 10), t);
  const StreamInfo info = inspect_stream(r.stream);
  const double share = info.raw_share();
  return {share < 0.02, fmt("raw16 %zu of %zu bytes = %.2f%% (limit 2%%), %.2f dB at %.3f bpp",
                            info.section_bytes(SectionTag::kRaw16), info.total_bytes, 100 * share, r.quality.mean, r.bpp)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"bitstream round trip", bitstream_round_trip},
      {"estimator-coder agreement", estimator_coder_agreement},
      {"closed-form rates", closed_form_rates},
      {"gradient checks", gradient_checks},
      {"shape chain", shape_chain},
      {"desk-scale overfit", desk_overfit},
      {"RD monotonicity", rd_monotonicity},
      {"ablation direction", ablation},
      {"context causality", context_causality},
      {"BD metric oracle", bd_oracles},
      {"raw-section share", raw_share},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", n, criteria[i].first, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
