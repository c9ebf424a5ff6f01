// dlsync: command-line front end for the depth-conditioned lip-sync toolkit.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlsync/dlsync.hpp"

namespace fs = std::filesystem;
using namespace dlsync;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Camera parse_camera(const std::string& text) {
  const auto f = io::split(text, ',');
  if (f.size() != 4) throw UsageError("--camera expects sx,tx,ty,dz");
  try {
    return {io::parse_double(f[0], "camera scale"), io::parse_double(f[1], "camera tx"),
            io::parse_double(f[2], "camera ty"), io::parse_double(f[3], "camera depth offset")};
  } catch (const Error& e) {
    throw UsageError(std::string("--camera: ") + e.what());
  }
}

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw FormatError("missing 'x'");
    const auto w = io::parse_int(text.substr(0, x), "width");
    const auto h = io::parse_int(text.substr(x + 1), "height");
    if (w <= 0 || h <= 0) throw FormatError("dimensions must be positive");
    return {static_cast<int>(w), static_cast<int>(h)};
  } catch (const Error& e) {
    throw UsageError("--size expects WxH (" + std::string(e.what()) + ")");
  }
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string basis, identity, expr, camera, size, mouth, out;
  double fps = kVideoFps;
  bool strict = false;
};

void run_render(const RenderArgs& a, int threads) {
  const Camera cam = parse_camera(a.camera);
  const auto [w, h] = parse_size(a.size);
  const BasisSet basis = load_basis(a.basis, a.strict);
  const auto alpha = load_identity_csv(a.identity, basis.identity_dims);
  const auto track = load_expression_csv(a.expr, basis.expression_dims, a.fps);
  auto maps = render_track(basis, alpha, track, cam, w, h, threads);
  if (!a.mouth.empty()) {
    const auto mouths = load_mouth_csv(a.mouth, a.strict ? kStandardMouthPoints : 0);
    for (std::size_t i = 0; i < maps.size(); ++i)
      maps[i] = mask_mouth_region(maps[i], mouth_for_frame(mouths, static_cast<int>(i)));
  }
  fs::create_directories(a.out);
  for (std::size_t i = 0; i < maps.size(); ++i) write_pfm(maps[i], fs::path(a.out) / frame_name(static_cast<int>(i), "pfm"));
}

struct PreprocessArgs {
  std::string frames, tracks, out, metadata, samples, rejected;
  PreprocessOptions opt;
};

void run_preprocess(const PreprocessArgs& a) {
  const auto tracks = load_face_tracks(a.tracks);
  std::vector<CurationRecord> meta;
  if (!a.metadata.empty()) meta = load_curation_csv(a.metadata);
  const auto res = preprocess(tracks, a.metadata.empty() ? nullptr : &meta, a.frames, a.opt);
  write_manifest(res.manifest, a.out);
  fs::path samples = a.samples;
  if (samples.empty()) samples = fs::path(a.out).replace_extension(".samples.csv");
  {
    auto out = io::open_out(samples);
    out << "video_id,frame\n";
    for (const auto& [id, frame] : res.samples) out << id << ',' << frame << '\n';
  }
  if (!a.rejected.empty()) {
    auto out = io::open_out(a.rejected);
    out << "video_id,reason\n";
    for (const auto& [id, reason] : res.rejected) out << id << ',' << reason << '\n';
  }
  std::cerr << "preprocess: " << res.manifest.records.size() << " clips, " << res.samples.size()
            << " sampled frames, " << res.rejected.size() << " rejected videos\n";
}

struct StatsArgs {
  std::string manifest, out;
};

void run_stats(const StatsArgs& a) { write_statistics(compute_statistics(read_manifest(a.manifest)), a.out); }

struct AssembleArgs {
  std::string clip, depth, policy = "uniform:5,25", occlusion = "lower_half", out;
  int target = 0;
  std::uint64_t seed = 0;
  bool augment = true;
  int max_shift = kDefaultMaxShift;
  double dropout = 0.5;
  int audio_window = 1;
  double fps = kVideoFps;
  int bands = 80;
  int fft = 512;
};

void run_assemble(const AssembleArgs& a) {
  BundleConfig cfg;
  try {
    cfg.policy = parse_reference_policy(a.policy);
  } catch (const Error& e) {
    throw UsageError(std::string("--policy: ") + e.what());
  }
  if (a.occlusion == "lower_half") cfg.occlusion = BundleConfig::Occlusion::lower_half;
  else if (a.occlusion == "mouth_polygon") cfg.occlusion = BundleConfig::Occlusion::mouth_polygon;
  else throw UsageError("--occlusion must be lower_half or mouth_polygon");
  cfg.augment = a.augment;
  cfg.max_shift = a.max_shift;
  cfg.dropout_p = a.dropout;
  cfg.audio_window = a.audio_window;
  LogMelConfig mel;
  mel.band_count = a.bands;
  mel.fft_size = a.fft;
  const ClipData clip = load_clip(a.clip, a.depth, a.fps, mel);
  const auto bundle = build_bundle(clip, a.target, cfg, BundleSeeds::from(a.seed));
  write_tensor_file(bundle_to_file(bundle), a.out);
}

struct TrainArgs {
  std::string data, out, loss_csv, optimizer = "adam", pixel_region = "full";
  int steps = 100;
  std::uint64_t seed = 0;
  double lr = 1e-5;
  int batch_size = 0;
  int base_width = 16;
  int depth = 2;
  int heads = 1;
  double lambda1 = 2.0;
  double lambda2 = 1.0;
};

void run_train(const TrainArgs& a, int threads) {
  std::vector<fs::path> files;
  if (!fs::is_directory(a.data)) throw FormatError("--data is not a directory: " + a.data);
  for (const auto& e : fs::directory_iterator(a.data))
    if (e.is_regular_file() && e.path().extension() == ".dlt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no .dlt bundles in " + a.data);
  std::vector<TrainingSample> data;
  for (const auto& f : files) data.push_back(sample_from_bundle(bundle_from_file(read_tensor_file(f))));
  const auto& first = data.front();
  for (const auto& s : data)
    if (!s.input.same_shape(first.input) || s.audio.cols != first.audio.cols)
      throw ShapeError("training bundles differ in shape");

  UNetConfig net;
  net.latent_channels = first.input.channels / 3;
  net.audio_dim = first.audio.cols;
  net.base_width = a.base_width;
  net.depth = a.depth;
  net.heads = a.heads;
  LossConfig loss;
  loss.lambda1 = a.lambda1;
  loss.lambda2 = a.lambda2;
  if (a.pixel_region == "full") loss.pixel_region = LossConfig::PixelRegion::full;
  else if (a.pixel_region == "lower_half") loss.pixel_region = LossConfig::PixelRegion::lower_half;
  else throw UsageError("--pixel-region must be full or lower_half");
  TrainConfig tc;
  if (a.optimizer == "adam") tc.optimizer = TrainConfig::Optimizer::adam;
  else if (a.optimizer == "sgd") tc.optimizer = TrainConfig::Optimizer::sgd;
  else throw UsageError("--optimizer must be adam or sgd");
  tc.lr = a.lr;
  tc.steps = a.steps;
  tc.seed = a.seed;
  tc.batch_size = a.batch_size;
  tc.threads = threads;
  try {
    net.validate();
    loss.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  const auto result = train_loop(data, net, loss, tc);
  write_checkpoint(result.params, a.out);
  const fs::path curve = a.loss_csv.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.loss_csv);
  auto out = io::open_out(curve);
  out << "step,latent_l1,pixel_l1,total\n";
  for (std::size_t i = 0; i < result.curve.size(); ++i) {
    const auto& r = result.curve[i];
    out << i + 1 << ',' << io::format_double(r.latent_l1) << ',' << io::format_double(r.pixel_l1) << ','
        << io::format_double(r.total) << '\n';
  }
  if (!result.curve.empty())
    std::cerr << "train-toy: loss " << result.curve.front().total << " -> " << result.curve.back().total << '\n';
}

struct InferArgs {
  std::string ckpt, bundle, out, image;
};

void run_infer(const InferArgs& a) {
  const auto params = read_checkpoint(a.ckpt);
  const auto bundle = bundle_from_file(read_tensor_file(a.bundle));
  const auto latent = predict(params, bundle.unet_input, audio_tokens(bundle.audio));
  TensorFile f;
  f.add("latent", latent);
  f.attributes["clip"] = bundle.provenance.clip_id.empty() ? "-" : bundle.provenance.clip_id;
  f.attributes["target"] = std::to_string(bundle.provenance.target);
  write_tensor_file(f, a.out);
  if (!a.image.empty()) write_ppm(ImageFrame(decode_latent(latent)), a.image);
}

struct EvalArgs {
  std::string manifest, out, mode = "random";
  int pairs = 900;
  double duration = 10.0;
  std::uint64_t seed = 0;
  int max_lag = kDefaultMaxLag;
  int bins = 20;
  double range_lo = -1.0;
  double range_hi = 1.0;
};

void run_eval(const EvalArgs& a, int threads) {
  PairingMode mode;
  if (a.mode == "random") mode = PairingMode::random;
  else if (a.mode == "cyclic") mode = PairingMode::cyclic;
  else throw UsageError("--mode must be random or cyclic");
  if (a.bins <= 0 || !(a.range_hi > a.range_lo)) throw UsageError("histogram needs bins > 0 and range-hi > range-lo");
  const auto manifest = read_manifest(a.manifest);
  const auto pairs = build_unpaired_pairs(manifest, a.pairs, a.duration, a.seed, mode);
  SyncEvalOptions opt;
  opt.max_lag = a.max_lag;
  const auto scores = score_pairs(manifest, pairs, opt, threads);
  const fs::path dir = a.out;
  write_pairs_csv(pairs, dir / "pairs.csv");
  write_scores_csv(pairs, scores, dir / "scores.csv");
  const std::map<std::string, std::vector<double>> sets{{"unpaired", score_values(scores.unpaired)},
                                                        {"paired", score_values(scores.paired)}};
  emit_distribution(sets, dir, {a.range_lo, a.range_hi, a.bins});
  write_summary(sets, dir / "summary.csv");
}

// ---------------------------------------------------------------------------
// Run-config injection: every "key = value" entry becomes "--key=value"
// unless the flag was already given on the command line.

bool flag_given(const std::vector<std::string>& args, std::size_t from, const std::string& flag) {
  for (std::size_t i = from; i < args.size(); ++i)
    if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) return true;
  return false;
}

void inject_run_config(CLI::App& app, std::vector<std::string>& args) {
  std::size_t sub_pos = 1;
  while (sub_pos < args.size() && !args[sub_pos].empty() && args[sub_pos][0] == '-') ++sub_pos;
  if (sub_pos >= args.size()) return;
  CLI::App* sub = nullptr;
  for (auto* s : app.get_subcommands({}))
    if (s->get_name() == args[sub_pos]) sub = s;
  if (!sub) return;
  std::string path;
  for (std::size_t i = sub_pos + 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return;
  RunConfig cfg;
  try {
    cfg = load_run_config(path);
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.entries) {
    const std::string flag = "--" + key;
    if (key == "config" || key == "help" || sub->get_option_no_throw(flag) == nullptr)
      throw UsageError("unknown config key '" + key + "' in " + path);
    if (!flag_given(args, sub_pos + 1, flag)) extra.push_back(flag + "=" + value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
}

/// CLI11 reports a bare "subcommand required" for both cases below; name
/// the offending token instead.
void check_top_level(CLI::App& app, const std::vector<std::string>& args) {
  if (args.size() < 2) return;
  const std::string& first = args[1];
  if (first == "-h" || first == "--help" || first.rfind("--help=", 0) == 0) return;
  if (!first.empty() && first[0] == '-') throw UsageError("unknown option '" + first + "'; options go after the subcommand");
  CLI::App* sub = nullptr;
  for (auto* s : app.get_subcommands({}))
    if (s->get_name() == first) sub = s;
  if (!sub) throw UsageError("unknown subcommand '" + first + "'");
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i].rfind("--", 0) != 0 || args[i] == "--") continue;
    const std::string name = args[i].substr(0, args[i].find('='));
    if (name != "--help" && sub->get_option_no_throw(name) == nullptr)
      throw UsageError(sub->get_name() + ": unknown option '" + name + "' (see " + sub->get_name() + " --help)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlsync: depth-conditioned lip-sync toolkit", "dlsync"};
  app.require_subcommand(1);
  int threads = 1;
  std::string config;

  auto common = [&](CLI::App* s) {
    s->add_option("--threads", threads, "Worker threads; results do not depend on it")
        ->check(CLI::PositiveNumber);
    s->add_option("--config", config, "key = value file; keys are flag names without dashes")
        ->check(CLI::ExistingFile);
  };

  RenderArgs ra;
  auto* render = app.add_subcommand("render-depth", "Render per-frame depth maps from expression coefficients");
  render->add_option("--basis", ra.basis, "Morphable-model basis file")->required();
  render->add_option("--identity", ra.identity, "Identity coefficient CSV (one row)")->required();
  render->add_option("--expr", ra.expr, "Expression coefficient CSV (one row per frame)")->required();
  render->add_option("--camera", ra.camera, "sx,tx,ty,dz")->required();
  render->add_option("--size", ra.size, "Output WxH")->required();
  render->add_option("--mouth", ra.mouth, "Mouth keypoint CSV; masks each map to the mouth polygon");
  render->add_option("--out", ra.out, "Output directory for NNNNNN.pfm")->required();
  render->add_option("--fps", ra.fps, "Expression track frame rate")->capture_default_str();
  render->add_flag("--strict", ra.strict, "Require 80/64 basis dims and 80 mouth points");
  common(render);

  PreprocessArgs pa;
  auto* prep = app.add_subcommand("preprocess", "Segment single-face clips and sample training frames");
  prep->add_option("--frames", pa.frames, "Root directory holding <video_id>/ folders")->required();
  prep->add_option("--tracks", pa.tracks, "Face track CSV")->required();
  prep->add_option("--out", pa.out, "Output manifest CSV")->required();
  prep->add_option("--seed", pa.opt.seed, "Frame sampling seed")->required();
  prep->add_option("--metadata", pa.metadata, "Curation metadata CSV");
  prep->add_option("--samples", pa.samples, "Sampled frame list (default: <out>.samples.csv)");
  prep->add_option("--rejected", pa.rejected, "Write rejected videos and reasons here");
  prep->add_option("--min-len", pa.opt.min_len, "Minimum clip length in frames")->capture_default_str();
  prep->add_option("--frame-cap", pa.opt.frame_cap, "Maximum sampled frames per video")->capture_default_str();
  common(prep);

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "Dataset statistics histograms and summary");
  stats->add_option("--manifest", sa.manifest, "Manifest CSV")->required();
  stats->add_option("--out", sa.out, "Output directory")->required();
  common(stats);

  AssembleArgs aa;
  auto* assemble = app.add_subcommand("assemble", "Build one conditioning bundle");
  assemble->add_option("--clip", aa.clip, "Clip directory")->required();
  assemble->add_option("--target", aa.target, "Target frame index")->required();
  assemble->add_option("--seed", aa.seed, "Reference, shift and dropout seed")->required();
  assemble->add_option("--out", aa.out, "Output bundle (.dlt)")->required();
  assemble->add_option("--policy", aa.policy, "fixed:T or uniform:a,b")->capture_default_str();
  assemble->add_option("--depth", aa.depth, "Depth map directory (default: <clip>/depth)");
  assemble->add_option("--occlusion", aa.occlusion, "lower_half or mouth_polygon")->capture_default_str();
  assemble->add_option("--augment", aa.augment, "Apply shift and dropout to the lip depth")->capture_default_str();
  assemble->add_option("--max-shift", aa.max_shift, "Maximum depth shift in pixels")->capture_default_str();
  assemble->add_option("--dropout", aa.dropout, "Depth dropout probability")->capture_default_str();
  assemble->add_option("--audio-window", aa.audio_window, "Audio rows per bundle")->capture_default_str();
  assemble->add_option("--fps", aa.fps, "Video frame rate")->capture_default_str();
  assemble->add_option("--bands", aa.bands, "Mel bands")->capture_default_str();
  assemble->add_option("--fft", aa.fft, "FFT size")->capture_default_str();
  common(assemble);

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "Train the toy UNet on a directory of bundles");
  train->add_option("--data", ta.data, "Directory of .dlt bundles")->required();
  train->add_option("--steps", ta.steps, "Optimizer steps")->capture_default_str();
  train->add_option("--seed", ta.seed, "Init and batching seed")->required();
  train->add_option("--out", ta.out, "Checkpoint path")->required();
  train->add_option("--loss-csv", ta.loss_csv, "Loss curve CSV (default: <out>.loss.csv)");
  train->add_option("--optimizer", ta.optimizer, "adam or sgd")->capture_default_str();
  train->add_option("--lr", ta.lr, "Learning rate")->capture_default_str();
  train->add_option("--batch-size", ta.batch_size, "0 for full batch")->capture_default_str();
  train->add_option("--base-width", ta.base_width, "Channels at the first level")->capture_default_str();
  train->add_option("--depth", ta.depth, "Down/up levels")->capture_default_str();
  train->add_option("--heads", ta.heads, "Attention heads")->capture_default_str();
  train->add_option("--lambda1", ta.lambda1, "Latent loss weight")->capture_default_str();
  train->add_option("--lambda2", ta.lambda2, "Pixel loss weight")->capture_default_str();
  train->add_option("--pixel-region", ta.pixel_region, "full or lower_half")->capture_default_str();
  common(train);

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Single forward pass on one bundle");
  infer->add_option("--ckpt", ia.ckpt, "Checkpoint")->required();
  infer->add_option("--bundle", ia.bundle, "Bundle (.dlt)")->required();
  infer->add_option("--out", ia.out, "Output latent (.dlt)")->required();
  infer->add_option("--image", ia.image, "Also write the decoded prediction as PPM");
  common(infer);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval-sync", "Unpaired lip-sync proxy evaluation");
  eval->add_option("--manifest", ea.manifest, "Manifest CSV")->required();
  eval->add_option("--pairs", ea.pairs, "Number of pairs")->capture_default_str();
  eval->add_option("--duration", ea.duration, "Pair duration in seconds")->capture_default_str();
  eval->add_option("--seed", ea.seed, "Pairing seed")->required();
  eval->add_option("--out", ea.out, "Output directory")->required();
  eval->add_option("--max-lag", ea.max_lag, "Largest lag searched, frames")->capture_default_str();
  eval->add_option("--mode", ea.mode, "random or cyclic")->capture_default_str();
  eval->add_option("--bins", ea.bins, "Histogram bins")->capture_default_str();
  eval->add_option("--range-lo", ea.range_lo, "Histogram lower edge")->capture_default_str();
  eval->add_option("--range-hi", ea.range_hi, "Histogram upper edge")->capture_default_str();
  common(eval);

  std::vector<std::string> args(argv, argv + argc);
  try {
    check_top_level(app, args);
    inject_run_config(app, args);
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (std::string(e.what()).rfind("unknown option '", 0) == 0 || std::string(e.what()).rfind("unknown subcommand", 0) == 0)
      std::cerr << app.help();
    return 1;
  }

  try {
    if (render->parsed()) run_render(ra, threads);
    else if (prep->parsed()) run_preprocess(pa);
    else if (stats->parsed()) run_stats(sa);
    else if (assemble->parsed()) run_assemble(aa);
    else if (train->parsed()) run_train(ta, threads);
    else if (infer->parsed()) run_infer(ia);
    else if (eval->parsed()) run_eval(ea, threads);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
