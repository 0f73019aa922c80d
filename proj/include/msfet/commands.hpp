#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msfet/binary_io.hpp"
#include "msfet/event_core.hpp"
#include "msfet/losses.hpp"
#include "msfet/metrics.hpp"
#include "msfet/model.hpp"
#include "msfet/run_config.hpp"
#include "msfet/selftest.hpp"
#include "msfet/synth.hpp"
#include "msfet/train.hpp"

namespace msfet::cli {

namespace fs = std::filesystem;

/// Writes each line to the console and keeps a copy for run.log.
class RunLog {
 public:
  explicit RunLog(std::ostream& console) : console_(console) {}

  void line(const std::string& s) {
    console_ << s << '\n';
    text_ += s + '\n';
  }

  void config(const RunConfig& cfg) {
    for (const auto& [k, v] : cfg.entries()) line("config " + k + " = " + v);
  }

  void save(const fs::path& dir) const { io::write_file((dir / "run.log").string(), text_); }

 private:
  std::ostream& console_;
  std::string text_;
};

inline std::string indexed(const std::string& stem, std::size_t i, const std::string& ext) {
  std::ostringstream os;
  os << stem << '_' << std::setw(4) << std::setfill('0') << i << ext;
  return os.str();
}

/// Files in `dir` with extension `ext`, sorted by name.
inline std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir.string() + "'");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<double> read_times(const fs::path& path) {
  const std::string text = io::read_file(path.string());
  std::vector<double> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    auto s = events::detail::trim(line);
    if (s.empty() || s.front() == '#') continue;
    double t;
    if (!events::detail::parse_number(s, t)) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": not a timestamp");
    }
    out.push_back(t);
  }
  return out;
}

inline std::string format_times(const std::vector<double>& ts) {
  std::ostringstream os;
  os.precision(17);
  for (double t : ts) os << t << '\n';
  return os.str();
}

inline events::EventStream load_events(const fs::path& path, const events::ParseOptions& opts = {}) {
  const std::string bytes = io::read_file(path.string());
  return events::parse_events(bytes, events::sniff_format(bytes), opts);
}

/// Frame times from `explicit_path`, else a times.txt next to the events.
inline std::vector<double> frame_times_for(const GroupingSpec& g, const fs::path& events_path,
                                           const std::optional<fs::path>& explicit_path) {
  if (g.mode != GroupingSpec::Mode::Frames) return {};
  fs::path p = explicit_path ? *explicit_path : events_path.parent_path() / "times.txt";
  if (!fs::exists(p)) throw ConfigError("frames grouping needs frame timestamps; '" + p.string() + "' not found");
  return read_times(p);
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  fs::path out_dir = "data";
  bool static_scene = false;
};

inline int cmd_gen(RunConfig cfg, const GenArgs& args, std::ostream& console) {
  if (args.static_scene) cfg.scene.static_scene = true;
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  const auto seq = synth::generate_sequence(cfg.scene);
  fs::create_directories(args.out_dir / "frames");
  fs::create_directories(args.out_dir / "flows");
  const bool binary = cfg.events_format == "binary";
  const fs::path ev_path = args.out_dir / (binary ? "events.bin" : "events.txt");
  if (binary) {
    io::write_file(ev_path.string(), events::to_binary(seq.events));
  } else {
    io::write_file(ev_path.string(), events::to_text(seq.events));
  }
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    io::write_file((args.out_dir / "frames" / indexed("frame", k, ".pgm")).string(), synth::encode_pgm(seq.frames[k]));
  }
  for (std::size_t k = 0; k < seq.flows.size(); ++k) {
    io::write_file((args.out_dir / "flows" / indexed("flow", k, ".flo")).string(), synth::encode_flow(seq.flows[k]));
  }
  io::write_file((args.out_dir / "times.txt").string(), format_times(seq.frame_times));
  std::string manifest = cfg.echo();
  manifest += "frames = " + std::to_string(seq.frames.size()) + "\n";
  manifest += "flows = " + std::to_string(seq.flows.size()) + "\n";
  manifest += "events = " + std::to_string(seq.events.count()) + "\n";
  io::write_file((args.out_dir / "manifest.txt").string(), manifest);
  log.line("gen: " + std::to_string(seq.frames.size()) + " frames, " + std::to_string(seq.flows.size()) +
           " flows, " + std::to_string(seq.events.count()) + " events -> " + args.out_dir.string());
  log.save(args.out_dir);
  return 0;
}

// ---------------------------------------------------------------- encode

struct EncodeArgs {
  fs::path events;
  std::optional<fs::path> times;
  fs::path out_dir = "voxels";
};

inline int cmd_encode(const RunConfig& cfg, const EncodeArgs& args, std::ostream& console) {
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  const auto stream = load_events(args.events);
  const auto groups = cfg.grouping.apply(stream, frame_times_for(cfg.grouping, args.events, args.times));
  fs::create_directories(args.out_dir);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto v = events::encode_voxel(groups[k], cfg.model.bins, stream.sensor.height, stream.sensor.width);
    const auto name = indexed("voxel", k, ".vox");
    io::write_file((args.out_dir / name).string(), events::encode_voxel_dump(v));
    std::ostringstream os;
    os.precision(12);
    os << "encode: " << name << " events=" << groups[k].events.size() << " mass=" << v.total()
       << " polarity_sum=" << groups[k].polarity_sum();
    log.line(os.str());
  }
  log.line("encode: " + std::to_string(groups.size()) + " voxel grids (" + cfg.grouping.str() + ", B=" +
           std::to_string(cfg.model.bins) + ")");
  log.save(args.out_dir);
  return 0;
}

// ---------------------------------------------------------------- model helpers

template <typename T>
model::MsfetModel<T> load_or_init(const RunConfig& cfg, const std::optional<fs::path>& weights, RunLog& log) {
  if (weights) {
    auto m = model::MsfetModel<T>::load(weights->string());
    log.line("model: loaded " + weights->string() + " (" + std::to_string(m.parameter_count()) + " parameters)");
    return m;
  }
  auto m = model::MsfetModel<T>::create(cfg.model, cfg.seed);
  log.line("model: random init seed " + std::to_string(cfg.seed) + " (" + std::to_string(m.parameter_count()) +
           " parameters)");
  return m;
}

/// Runs the model over groups with one persistent state; returns images and
/// per-frame milliseconds.
template <typename T>
std::pair<std::vector<synth::Image>, std::vector<double>> run_groups(const model::MsfetModel<T>& net,
                                                                      const std::vector<events::EventGroup>& groups,
                                                                      const events::SensorSize& sensor) {
  NoGradGuard guard;
  model::RecurrentState<T> state;
  std::vector<synth::Image> frames;
  std::vector<double> ms;
  for (const auto& g : groups) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto grid = events::encode_voxel(g, net.config().bins, sensor.height, sensor.width);
    frames.push_back(synth::to_image(net.forward(grid, state)));
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return {std::move(frames), std::move(ms)};
}

// ---------------------------------------------------------------- reconstruct

struct ReconstructArgs {
  fs::path events;
  std::optional<fs::path> weights;
  std::optional<fs::path> times;
  fs::path out_dir = "recon";
};

template <typename T>
int reconstruct_impl(const RunConfig& cfg, const ReconstructArgs& args, RunLog& log) {
  const auto net = load_or_init<T>(cfg, args.weights, log);
  const auto stream = load_events(args.events);
  const auto groups = cfg.grouping.apply(stream, frame_times_for(cfg.grouping, args.events, args.times));
  const auto [frames, ms] = run_groups(net, groups, stream.sensor);
  fs::create_directories(args.out_dir);
  std::string timing = "frame_index,ms\n";
  double total = 0.0;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    io::write_file((args.out_dir / indexed("recon", k, ".pgm")).string(), synth::encode_pgm(frames[k]));
    timing += std::to_string(k) + "," + metrics::format_metric(ms[k]) + "\n";
    total += ms[k];
  }
  io::write_file((args.out_dir / "timing.csv").string(), timing);
  log.line("reconstruct: " + std::to_string(frames.size()) + " frames, mean " +
           metrics::format_metric(frames.empty() ? 0.0 : total / static_cast<double>(frames.size())) + " ms/frame");
  return 0;
}

inline int cmd_reconstruct(const RunConfig& cfg, const ReconstructArgs& args, std::ostream& console) {
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  const int rc = cfg.precision == Precision::F64 ? reconstruct_impl<double>(cfg, args, log)
                                                 : reconstruct_impl<float>(cfg, args, log);
  log.save(args.out_dir);
  return rc;
}

// ---------------------------------------------------------------- train-toy

struct TrainArgs {
  std::optional<fs::path> data_dir;
  std::optional<fs::path> resume;
  fs::path out_dir = "train";
};

/// Loads a `gen` output directory back into a synthetic sequence.
inline synth::SyntheticSequence load_dataset(const fs::path& dir) {
  synth::SyntheticSequence seq;
  fs::path ev = dir / "events.txt";
  if (!fs::exists(ev)) ev = dir / "events.bin";
  seq.events = load_events(ev);
  seq.frame_times = read_times(dir / "times.txt");
  for (const auto& p : list_files(dir / "frames", ".pgm")) seq.frames.push_back(synth::decode_pgm(io::read_file(p.string())));
  for (const auto& p : list_files(dir / "flows", ".flo")) seq.flows.push_back(synth::decode_flow(io::read_file(p.string())));
  if (seq.frames.size() != seq.frame_times.size() || seq.flows.size() + 1 != seq.frames.size()) {
    throw ConfigError("dataset '" + dir.string() + "': " + std::to_string(seq.frames.size()) + " frames, " +
                      std::to_string(seq.frame_times.size()) + " timestamps, " + std::to_string(seq.flows.size()) +
                      " flows do not line up");
  }
  return seq;
}

template <typename T>
int train_impl(const RunConfig& cfg, const TrainArgs& args, RunLog& log) {
  const auto seq = args.data_dir ? load_dataset(*args.data_dir) : synth::generate_sequence(cfg.scene);
  auto net = args.resume ? model::MsfetModel<T>::load((*args.resume / "weights.wts").string())
                         : model::MsfetModel<T>::create(cfg.model, cfg.seed);
  const auto data = train::make_training_sequence<T>(seq, net.config().bins);
  log.line("train: " + std::to_string(data.size()) + " steps of data, " + std::to_string(net.parameter_count()) +
           " parameters");
  train::Trainer<T> trainer(net, cfg.loss, cfg.train);
  std::string curve = train::loss_csv_header();
  if (args.resume) {
    trainer.restore_optimizer(decode_weights(io::read_file((*args.resume / "optimizer.wts").string())));
    log.line("train: resumed at step " + std::to_string(trainer.steps_done()));
  }
  fs::create_directories(args.out_dir);
  for (std::size_t s = 0; s < cfg.train.steps; ++s) {
    const auto rec = trainer.step(data);
    curve += train::loss_csv_row(rec);
    if (s == 0 || (rec.step % 25) == 0 || s + 1 == cfg.train.steps) {
      log.line("train: step " + std::to_string(rec.step) + " loss " + metrics::format_metric(rec.total) +
               " (recon " + metrics::format_metric(rec.reconstruction) + ", tc " +
               metrics::format_metric(rec.temporal) + ")");
    }
  }
  io::write_file((args.out_dir / "loss_curve.csv").string(), curve);
  net.save((args.out_dir / "weights.wts").string());
  io::write_file((args.out_dir / "optimizer.wts").string(), encode_weights(trainer.optimizer_snapshot()));

  const std::size_t start = trainer.window_start(data.size());
  const std::size_t len = std::min(cfg.train.unroll, data.size());
  const std::vector<Tensor<T>> window(data.voxels.begin() + static_cast<std::ptrdiff_t>(start),
                                      data.voxels.begin() + static_cast<std::ptrdiff_t>(start + len));
  const auto recon = train::reconstruct(net, window);
  std::vector<metrics::FrameMetrics> rows;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    rows.push_back({start + i, metrics::psnr(recon[i], data.frames[start + i]),
                    metrics::ssim(recon[i], data.frames[start + i])});
  }
  io::write_file((args.out_dir / "train_metrics.csv").string(), metrics::metrics_csv(rows));
  double ssim = 0.0;
  for (const auto& r : rows) ssim += r.ssim;
  log.line("train: mean SSIM on the training window " +
           metrics::format_metric(rows.empty() ? 0.0 : ssim / static_cast<double>(rows.size())));
  return 0;
}

inline int cmd_train_toy(const RunConfig& cfg, const TrainArgs& args, std::ostream& console) {
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  const int rc = cfg.precision == Precision::F64 ? train_impl<double>(cfg, args, log) : train_impl<float>(cfg, args, log);
  log.save(args.out_dir);
  return rc;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  fs::path recon_dir;
  fs::path gt_dir;
  /// Leading ground-truth frames to skip (a `gen` directory has one more
  /// frame than there are event groups).
  std::size_t gt_skip = 0;
  fs::path out_csv = "metrics.csv";
};

/// Rescales a whole sequence to [0, 1] with one min/max.
inline void normalize_sequence(std::vector<synth::Image>& frames) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& f : frames)
    for (double v : f.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi - lo;
  for (auto& f : frames)
    for (auto& v : f.values) v = span > 0.0 ? (v - lo) / span : 0.0;
}

inline std::vector<metrics::FrameMetrics> evaluate_frames(std::vector<synth::Image> recon,
                                                          std::vector<synth::Image> gt, bool normalize) {
  if (recon.size() != gt.size()) {
    throw ArgumentError("eval: " + std::to_string(recon.size()) + " reconstructed frames but " +
                        std::to_string(gt.size()) + " ground-truth frames");
  }
  if (normalize) {
    normalize_sequence(recon);
    normalize_sequence(gt);
  }
  std::vector<metrics::FrameMetrics> rows;
  for (std::size_t k = 0; k < recon.size(); ++k) {
    const auto a = synth::to_tensor<double>(recon[k]), b = synth::to_tensor<double>(gt[k]);
    rows.push_back({k, metrics::psnr(a, b), metrics::ssim(a, b)});
  }
  return rows;
}

inline int cmd_eval(const RunConfig& cfg, const EvalArgs& args, std::ostream& console) {
  RunLog log(console);
  log.config(cfg);
  std::vector<synth::Image> recon, gt;
  for (const auto& p : list_files(args.recon_dir, ".pgm")) recon.push_back(synth::decode_pgm(io::read_file(p.string())));
  auto gt_files = list_files(args.gt_dir, ".pgm");
  if (args.gt_skip > gt_files.size()) throw ArgumentError("eval: --gt-skip exceeds the ground-truth frame count");
  for (std::size_t i = args.gt_skip; i < gt_files.size(); ++i) {
    gt.push_back(synth::decode_pgm(io::read_file(gt_files[i].string())));
  }
  const auto rows = evaluate_frames(std::move(recon), std::move(gt), cfg.normalize_gt);
  const auto csv = metrics::metrics_csv(rows);
  if (args.out_csv.has_parent_path()) fs::create_directories(args.out_csv.parent_path());
  io::write_file(args.out_csv.string(), csv);
  log.line("eval: " + std::to_string(rows.size()) + " frames -> " + args.out_csv.string());
  log.line(csv.substr(csv.rfind("mean,")));
  return 0;
}

// ---------------------------------------------------------------- grouping sweep

struct SweepArgs {
  std::optional<fs::path> weights;
  std::vector<double> durations_ms{10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::vector<std::size_t> counts{5000, 10000, 15000, 20000, 25000, 30000, 35000, 40000, 45000};
  fs::path out_dir = "sweep";
};

/// Reconstructs one synthetic scene under every grouping setting, with
/// ground truth rendered at each group's end time.
template <typename T>
int sweep_impl(const RunConfig& cfg, const SweepArgs& args, RunLog& log) {
  const auto net = load_or_init<T>(cfg, args.weights, log);
  const auto scene = synth::build_scene(cfg.scene);
  const auto seq = synth::generate_sequence(scene, cfg.scene);
  log.line("sweep: scene with " + std::to_string(seq.events.count()) + " events over " +
           metrics::format_metric(cfg.scene.duration) + " s");
  fs::create_directories(args.out_dir);
  std::vector<GroupingSpec> settings;
  for (double d : args.durations_ms) settings.push_back(GroupingSpec::parse("duration:" + metrics::format_metric(d)));
  for (std::size_t n : args.counts) settings.push_back(GroupingSpec::parse("count:" + std::to_string(n)));
  for (const auto& g : settings) {
    auto groups = g.apply(seq.events, {});
    groups.erase(std::remove_if(groups.begin(), groups.end(), [](const auto& x) { return !(x.duration() > 0.0); }),
                 groups.end());
    auto [frames, ms] = run_groups(net, groups, seq.events.sensor);
    std::vector<synth::Image> gt;
    for (const auto& grp : groups) gt.push_back(synth::render_frame(scene, grp.t_end));
    const auto rows = evaluate_frames(std::move(frames), std::move(gt), cfg.normalize_gt);
    std::string name = g.mode == GroupingSpec::Mode::Duration
                           ? "metrics_duration_" + std::to_string(static_cast<long long>(std::llround(g.window_ms))) + "ms.csv"
                           : "metrics_count_" + std::to_string(g.count) + ".csv";
    io::write_file((args.out_dir / name).string(), metrics::metrics_csv(rows));
    log.line("sweep: " + g.str() + " -> " + std::to_string(rows.size()) + " frames, " + name);
  }
  return 0;
}

inline int cmd_sweep(const RunConfig& cfg, const SweepArgs& args, std::ostream& console) {
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  const int rc = cfg.precision == Precision::F64 ? sweep_impl<double>(cfg, args, log) : sweep_impl<float>(cfg, args, log);
  log.save(args.out_dir);
  return rc;
}

// ---------------------------------------------------------------- selftest

inline int cmd_selftest(const std::string& fault, std::ostream& console) {
  const auto results = selftest::run(fault);
  bool ok = true;
  for (const auto& r : results) {
    std::ostringstream os;
    os << (r.passed ? "PASS " : "FAIL ") << r.name << " value=" << std::scientific << std::setprecision(3) << r.value
       << " limit=" << r.limit;
    console << os.str() << '\n';
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------- bench

struct BenchResult {
  std::size_t size = 0;
  double ms_per_frame = 0.0;
  std::map<std::string, double> block_ms;
};

template <typename T>
std::vector<BenchResult> bench_impl(const RunConfig& cfg, RunLog& log) {
  const auto net = model::MsfetModel<T>::create(cfg.model, cfg.seed);
  log.line("bench: parameters " + std::to_string(net.parameter_count()));
  std::mt19937_64 rng(cfg.seed);
  std::vector<BenchResult> out;
  for (std::size_t s : cfg.bench_sizes) {
    auto voxel = selftest::detail::random_tensor<T>({cfg.model.bins, s, s}, -1.0, 1.0, rng);
    NoGradGuard guard;
    model::RecurrentState<T> state;
    model::ForwardTrace trace;
    net.forward(voxel, state);
    const std::size_t reps = std::max<std::size_t>(cfg.bench_repeats, 1);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r) net.forward(voxel, state, &trace);
    BenchResult b;
    b.size = s;
    b.ms_per_frame =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / double(reps);
    for (auto& [k, v] : trace.block_ms) b.block_ms[k] = v / double(reps);
    log.line("bench: " + std::to_string(s) + "x" + std::to_string(s) + " " + metrics::format_metric(b.ms_per_frame) +
             " ms/frame, " + metrics::format_metric(1000.0 / b.ms_per_frame) + " frames/s");
    for (const auto& [k, v] : b.block_ms) log.line("bench:   " + k + " " + metrics::format_metric(v) + " ms");
    out.push_back(std::move(b));
  }
  return out;
}

inline int cmd_bench(const RunConfig& cfg, std::ostream& console) {
  cfg.validate();
  RunLog log(console);
  log.config(cfg);
  if (cfg.precision == Precision::F64) bench_impl<double>(cfg, log);
  else bench_impl<float>(cfg, log);
  return 0;
}

}  // namespace msfet::cli
