#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "msfet/commands.hpp"

namespace {

using msfet::RunConfig;
namespace cli = msfet::cli;

int exit_code_for(const msfet::Error& e) {
  if (dynamic_cast<const msfet::ConfigError*>(&e) || dynamic_cast<const msfet::ArgumentError*>(&e)) return 2;
  if (dynamic_cast<const msfet::IoError*>(&e)) return 3;
  if (dynamic_cast<const msfet::ParseError*>(&e) || dynamic_cast<const msfet::OrderingError*>(&e) ||
      dynamic_cast<const msfet::BoundsError*>(&e)) {
    return 4;
  }
  return 5;
}

std::optional<std::filesystem::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msfet: event-to-video reconstruction engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string precision;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--set", overrides, "override one setting, key=value (repeatable)");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  cli::GenArgs gen;
  std::string gen_out = "data";
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic sequence (events, frames, flows)");
  gen_cmd->add_option("-o,--out", gen_out, "output directory");
  gen_cmd->add_flag("--static", gen.static_scene, "zero every velocity");

  cli::EncodeArgs enc;
  std::string enc_events, enc_times, enc_out = "voxels";
  auto* enc_cmd = app.add_subcommand("encode", "group events and write VOX1 voxel grids");
  enc_cmd->add_option("events", enc_events, "event file (text or EVR1)")->required();
  enc_cmd->add_option("--times", enc_times, "frame timestamps for frames grouping");
  enc_cmd->add_option("-o,--out", enc_out, "output directory");

  cli::ReconstructArgs rec;
  std::string rec_events, rec_weights, rec_times, rec_out = "recon";
  auto* rec_cmd = app.add_subcommand("reconstruct", "reconstruct frames from events");
  rec_cmd->add_option("events", rec_events, "event file")->required();
  rec_cmd->add_option("-w,--weights", rec_weights, "WTS1 weights (random init when omitted)");
  rec_cmd->add_option("--times", rec_times, "frame timestamps for frames grouping");
  rec_cmd->add_option("-o,--out", rec_out, "output directory");

  std::string tr_data, tr_resume, tr_out = "train";
  auto* tr_cmd = app.add_subcommand("train-toy", "train on one synthetic sequence");
  tr_cmd->add_option("--data", tr_data, "dataset written by gen (generated in memory when omitted)");
  tr_cmd->add_option("--resume", tr_resume, "directory of a previous train-toy run");
  tr_cmd->add_option("-o,--out", tr_out, "output directory");

  cli::EvalArgs ev;
  std::string ev_recon, ev_gt, ev_out = "metrics.csv", sw_weights, sw_out = "sweep";
  bool ev_sweep = false;
  std::optional<bool> normalize;
  auto* ev_cmd = app.add_subcommand("eval", "PSNR/SSIM of reconstructions against ground truth");
  ev_cmd->add_option("recon", ev_recon, "directory of reconstructed PGM frames");
  ev_cmd->add_option("gt", ev_gt, "directory of ground-truth PGM frames");
  ev_cmd->add_option("--gt-skip", ev.gt_skip, "drop this many leading ground-truth frames");
  ev_cmd->add_option("-o,--out", ev_out, "metrics CSV path (sweep: output directory)");
  ev_cmd->add_option("--normalize-gt", normalize, "rescale sequences to [0,1] before scoring (default true)");
  ev_cmd->add_flag("--sweep", ev_sweep, "run the duration and count grouping sweeps on a synthetic scene");
  ev_cmd->add_option("-w,--weights", sw_weights, "weights for --sweep");

  std::string fault;
  auto* st_cmd = app.add_subcommand("selftest", "run the invariant suite");
  st_cmd->add_option("--inject-fault", fault, "sabotage one property (test hook)");

  auto* bench_cmd = app.add_subcommand("bench", "time model_forward");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    if (!config_path.empty()) msfet::apply_config_text(cfg, msfet::io::read_file(config_path), config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw msfet::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(std::string(msfet::events::detail::trim(kv.substr(0, eq))), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (!precision.empty()) cfg.set("precision", precision);
    if (normalize) cfg.normalize_gt = *normalize;

    if (*gen_cmd) {
      gen.out_dir = gen_out;
      return cli::cmd_gen(cfg, gen, std::cout);
    }
    if (*enc_cmd) {
      enc.events = enc_events;
      enc.times = opt_path(enc_times);
      enc.out_dir = enc_out;
      return cli::cmd_encode(cfg, enc, std::cout);
    }
    if (*rec_cmd) {
      rec.events = rec_events;
      rec.weights = opt_path(rec_weights);
      rec.times = opt_path(rec_times);
      rec.out_dir = rec_out;
      return cli::cmd_reconstruct(cfg, rec, std::cout);
    }
    if (*tr_cmd) {
      cli::TrainArgs tr;
      tr.data_dir = opt_path(tr_data);
      tr.resume = opt_path(tr_resume);
      tr.out_dir = tr_out;
      return cli::cmd_train_toy(cfg, tr, std::cout);
    }
    if (*ev_cmd) {
      if (ev_sweep) {
        cli::SweepArgs sw;
        sw.weights = opt_path(sw_weights);
        sw.out_dir = ev_out == "metrics.csv" ? sw_out : ev_out;
        return cli::cmd_sweep(cfg, sw, std::cout);
      }
      if (ev_recon.empty() || ev_gt.empty()) throw msfet::ArgumentError("eval needs <recon> and <gt> directories");
      ev.recon_dir = ev_recon;
      ev.gt_dir = ev_gt;
      ev.out_csv = ev_out;
      return cli::cmd_eval(cfg, ev, std::cout);
    }
    if (*st_cmd) return cli::cmd_selftest(fault, std::cout);
    if (*bench_cmd) return cli::cmd_bench(cfg, std::cout);
  } catch (const msfet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 5;
  }
  return 0;
}
