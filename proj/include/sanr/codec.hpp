#pragma once

#include <array>
#include <string>
#include <vector>

#include "sanr/bitstream.hpp"
#include "sanr/evaluation.hpp"
#include "sanr/training.hpp"

namespace sanr {

struct Preset {
  std::string name;
  int spatial_channels = 48;
  double lambda = 0.01;
  int epochs = 30;
  int sga_epochs = 6;
};

/// r1..r4 are the four rate points (lowest rate first); fast is r1 with a
/// shortened schedule of 6 QAT epochs and 1 SGA epoch.
inline Preset make_preset(const std::string& name, const std::string& dataset = "epfl") {
  static constexpr std::array<int, 4> kChannels{48, 93, 123, 163};
  static constexpr std::array<double, 4> kLambdaEpfl{0.01, 0.005, 0.001, 0.0005};
  static constexpr std::array<double, 4> kLambdaHci{0.005, 0.001, 0.0005, 0.0001};
  require(dataset == "epfl" || dataset == "hci", "unknown dataset '" + dataset + "' (expected epfl or hci)");
  const auto& lambdas = dataset == "epfl" ? kLambdaEpfl : kLambdaHci;
  if (name == "fast") return {name, kChannels[0], lambdas[0], 6, 1};
  if (name.size() == 2 && name[0] == 'r' && name[1] >= '1' && name[1] <= '4') {
    const int i = name[1] - '1';
    return {name, kChannels[i], lambdas[i], 30, 6};
  }
  throw Error("unknown preset '" + name + "' (expected r1, r2, r3, r4 or fast)");
}

struct EncodeResult {
  FrozenModel model;
  std::vector<std::uint8_t> stream;
  TrainReport report;
  LightField reconstruction;  // encoder-side rendering of the finalized model
  PsnrResult quality;
  double bpp = 0.0;
};

namespace detail {

inline EncodeResult package(const LightField& lf, FrozenModel fm, TrainReport report) {
  EncodeResult r;
  r.stream = serialize_model(fm);
  r.reconstruction = reconstruct(fm);
  r.quality = psnr(lf, r.reconstruction);
  r.bpp = sanr::bpp(r.stream.size(), lf.views_u(), lf.views_v(), lf.height(), lf.width());
  const RateBreakdown rates = estimate_rates(fm);
  report.final_psnr = r.quality.mean;
  report.final_bpp = r.bpp;
  report.stream_bytes = r.stream.size();
  report.estimated_latent_bits = rates.latent_bits;
  report.estimated_weight_bits = rates.weight_bits;
  r.model = std::move(fm);
  r.report = std::move(report);
  return r;
}

}  // namespace detail

/// Full encoder: QAT training, SGA fine-tuning, finalization, serialization.
inline EncodeResult encode_lightfield(const LightField& lf, const ModelConfig& mcfg, const TrainConfig& tcfg) {
  TrainResult t = train(lf, mcfg, tcfg);
  SanrModel tuned = sga_finetune(std::move(t.model), lf, tcfg, t.report);
  FrozenModel fm = finalize_model(tuned, lf, tcfg.bn_eps);
  return detail::package(lf, std::move(fm), std::move(t.report));
}

/// Base-model variant with 8-bit post-training weight quantization.
inline EncodeResult encode_base(const LightField& lf, const ModelConfig& mcfg, const TrainConfig& tcfg) {
  TrainResult t = train_base(lf, mcfg, tcfg);
  FrozenModel fm = finalize_model(t.model, lf, tcfg.bn_eps, WeightGrid::kSymmetric8Bit, base_noise_seed(tcfg.seed));
  return detail::package(lf, std::move(fm), std::move(t.report));
}

inline LightField decode_stream(std::span<const std::uint8_t> bytes) { return reconstruct(deserialize_model(bytes)); }

}  // namespace sanr
