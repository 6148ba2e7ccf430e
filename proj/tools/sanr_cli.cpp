// sanr: encode a directory of sub-aperture PNGs into a .sanr stream, decode it
// back, inspect a stream, or compute quality reports.

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sanr/sanr.hpp"

namespace {

using namespace sanr;

void check_device() {
  const char* dev = std::getenv("SANR_DEVICE");
  if (!dev) return;
  std::string d(dev);
  for (auto& c : d) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (d != "cpu" && !d.empty()) std::cerr << "warning: SANR_DEVICE=" << dev << " is not available, using cpu\n";
}

struct EncodeArgs {
  std::string input, output, preset, dataset = "epfl";
  std::optional<int> cs, rank, cl, epochs, sga_epochs, samples_per_sai;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  long max_iterations = 0;
  long max_sga_iterations = 0;
  bool strict = false;
};

int run_encode(const EncodeArgs& a) {
  if (a.strict && !a.seed) throw Error("--seed is required in --strict mode");
  const LightField lf = load_lightfield(a.input);
  Preset p = a.preset.empty() ? make_preset("r1", a.dataset) : make_preset(a.preset, a.dataset);
  ModelConfig mc;
  mc.spatial_channels = a.cs.value_or(p.spatial_channels);
  mc.rank = a.rank.value_or(6);
  mc.latent_channels = a.cl.value_or(10);
  mc.views_u = lf.views_u(), mc.views_v = lf.views_v(), mc.height = lf.height(), mc.width = lf.width();
  TrainConfig tc;
  tc.lambda = a.lambda.value_or(p.lambda);
  tc.max_epochs = a.epochs.value_or(p.epochs);
  tc.sga_epochs = a.sga_epochs.value_or(p.sga_epochs);
  tc.samples_per_sai = a.samples_per_sai.value_or(500);
  tc.seed = a.seed.value_or(0);
  tc.fast_preset = p.name == "fast";
  tc.max_iterations = a.max_iterations;
  tc.max_sga_iterations = a.max_sga_iterations;

  const EncodeResult r = encode_lightfield(lf, mc, tc);
  const fs::path out(a.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_bytes(out, r.stream);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  std::ofstream(dir / "report.csv") << r.report.to_csv();
  nlohmann::json j = r.report.to_json();
  j["config"] = {{"preset", p.name},         {"dataset", a.dataset},      {"C_S", mc.spatial_channels},
                 {"r", mc.rank},             {"C_l", mc.latent_channels}, {"k", mc.kernel_size},
                 {"lambda", tc.lambda},      {"epochs", tc.max_epochs},   {"sga_epochs", tc.sga_epochs},
                 {"samples_per_sai", tc.samples_per_sai}, {"seed", tc.seed}, {"color_space", "RGB"}};
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
  std::printf("bpp %.5f  psnr %.3f dB  (%zu bytes)\n", r.bpp, r.quality.mean, r.stream.size());
  return 0;
}

int run_decode(const std::string& input, const std::string& output) {
  const auto bytes = read_bytes(input);
  const LightField lf = decode_stream(bytes);
  save_lightfield(lf, output);
  std::printf("decoded %dx%d views of %dx%d into %s\n", lf.views_u(), lf.views_v(), lf.height(), lf.width(),
              output.c_str());
  return 0;
}

int run_info(const std::string& input) {
  const auto bytes = read_bytes(input);
  const StreamInfo info = inspect_stream(bytes);
  const ModelConfig& c = info.config;
  std::printf("version %u\nviews %d x %d\nsize %d x %d\nC_S %d  r %d  C_l %d  k %d\n", info.version, c.views_u,
              c.views_v, c.height, c.width, c.spatial_channels, c.rank, c.latent_channels, c.kernel_size);
  std::printf("%-10s %10s %8s\n", "section", "bytes", "share");
  auto row = [&](const char* name, std::size_t n) {
    std::printf("%-10s %10zu %7.2f%%\n", name, n, 100.0 * static_cast<double>(n) / info.total_bytes);
  };
  row("header", kHeaderBytes);
  for (const auto& s : info.sections) row(section_name(s.tag), s.bytes);
  row("crc", kFooterBytes);
  std::printf("%-10s %10zu\n", "total", info.total_bytes);
  std::printf("bpp %.5f\n", bpp(info.total_bytes, c.views_u, c.views_v, c.height, c.width));
  return 0;
}

int run_eval(const std::string& reference, const std::string& recon, const std::string& stream,
             const std::string& label, const std::string& output) {
  const LightField ref = load_lightfield(reference);
  const LightField rec = load_lightfield(recon);
  const PsnrResult q = psnr(ref, rec);
  ReportMaps maps{avg_error_map(ref, rec), q};
  RDCurve curve{label, {}};
  if (!stream.empty()) {
    const double rate = bpp(fs::file_size(stream), ref.views_u(), ref.views_v(), ref.height(), ref.width());
    curve.points.push_back({rate, q.mean});
    std::printf("bpp %.5f  ", rate);
  }
  std::printf("psnr %.3f dB\n", q.mean);
  if (curve.points.empty()) curve.points.push_back({0.0, q.mean});
  emit_reports({curve}, maps, output);
  return 0;
}

RDCurve read_curve(const std::string& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), "cannot open " + path);
  std::string line;
  std::getline(f, line);
  RDCurve c;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    require(a != std::string::npos && b != a, "malformed row in " + path + ": " + line);
    c.label = line.substr(0, a);
    c.points.push_back({std::stod(line.substr(a + 1, b - a - 1)), std::stod(line.substr(b + 1))});
  }
  std::sort(c.points.begin(), c.points.end(), [](const RDPoint& x, const RDPoint& y) { return x.bpp < y.bpp; });
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Light field codec based on an overfitted scene-aware neural representation"};
  app.require_subcommand(1);

  EncodeArgs enc;
  auto* encode = app.add_subcommand("encode", "Train on a light field and write a .sanr stream");
  encode->add_option("--input", enc.input, "Directory of view_UU_VV.png files")->required();
  encode->add_option("--output", enc.output, "Output .sanr file; report.csv/json go next to it")->required();
  encode->add_option("--preset", enc.preset, "r1, r2, r3, r4 or fast (default r1)");
  encode->add_option("--dataset", enc.dataset, "Lambda table: epfl or hci")->capture_default_str();
  encode->add_option("--cs", enc.cs, "Spatial channels C_S (default from preset)");
  encode->add_option("--lambda", enc.lambda, "Rate-distortion multiplier (default from preset)");
  encode->add_option("--rank", enc.rank, "Kernel base rank r (default 6)");
  encode->add_option("--cl", enc.cl, "Latent channels C_l (default 10)");
  encode->add_option("--epochs", enc.epochs, "Maximum QAT epochs (default from preset)");
  encode->add_option("--sga-epochs", enc.sga_epochs, "SGA epochs (default from preset)");
  encode->add_option("--samples-per-sai", enc.samples_per_sai, "View draws per view and epoch (default 500)");
  encode->add_option("--max-iterations", enc.max_iterations, "Cap on QAT iterations, 0 for none")->capture_default_str();
  encode->add_option("--max-sga-iterations", enc.max_sga_iterations, "Cap on SGA iterations, 0 for none")
      ->capture_default_str();
  encode->add_option("--seed", enc.seed, "Seed for all randomness (default 0)");
  encode->add_flag("--strict", enc.strict, "Require an explicit --seed");

  std::string dec_in, dec_out;
  auto* decode = app.add_subcommand("decode", "Reconstruct all views from a .sanr stream");
  decode->add_option("--input", dec_in, "Input .sanr file")->required();
  decode->add_option("--output", dec_out, "Output directory for PNG views and meta.json")->required();

  std::string info_in;
  auto* info = app.add_subcommand("info", "Print header fields and per-section byte accounting");
  info->add_option("--input", info_in, "Input .sanr file")->required();

  std::string ev_ref, ev_rec, ev_stream, ev_label = "sanr", ev_out;
  auto* eval = app.add_subcommand("eval", "PSNR, error map and per-view PSNR grid of a reconstruction");
  eval->add_option("--reference", ev_ref, "Directory of original views")->required();
  eval->add_option("--recon", ev_rec, "Directory of reconstructed views")->required();
  eval->add_option("--stream", ev_stream, "Stream file, for the bpp of the RD point");
  eval->add_option("--label", ev_label, "Curve label in rd.csv")->capture_default_str();
  eval->add_option("--output", ev_out, "Report directory")->required();

  std::string bd_anchor, bd_test;
  auto* bd = app.add_subcommand("bd", "BD-rate and BD-PSNR between two rd.csv curves");
  bd->add_option("--anchor", bd_anchor, "Anchor curve CSV (label,bpp,psnr_db)")->required();
  bd->add_option("--test", bd_test, "Test curve CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  check_device();
  try {
    if (*encode) return run_encode(enc);
    if (*decode) return run_decode(dec_in, dec_out);
    if (*info) return run_info(info_in);
    if (*eval) return run_eval(ev_ref, ev_rec, ev_stream, ev_label, ev_out);
    if (*bd) {
      const BdResult r = bd_metrics(read_curve(bd_anchor), read_curve(bd_test));
      std::printf("BD-rate %.3f%%  BD-PSNR %.4f dB\n", r.bd_rate_percent, r.bd_psnr_db);
      return 0;
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
