#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "msfet/commands.hpp"

using namespace msfet;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("msfet_cli_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path dir;
};

RunConfig small_config() {
  RunConfig cfg;
  cfg.model.base_channels = 4;
  cfg.model.embed_dim = 16;
  cfg.model.heads = 2;
  return cfg;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string s;
  while (std::getline(in, s)) ++n;
  return n;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MSFET_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

// ---------------------------------------------------------------- helpers

TEST(Helpers, IndexedNames) {
  EXPECT_EQ(cli::indexed("frame", 3, ".pgm"), "frame_0003.pgm");
  EXPECT_EQ(cli::indexed("recon", 12345, ".pgm"), "recon_12345.pgm");
}

TEST_F(TempDir, ListFilesSortedAndFiltered) {
  for (auto n : {"b.pgm", "a.pgm", "c.txt"}) write(dir / n, "x");
  fs::create_directories(dir / "d.pgm");
  const auto files = cli::list_files(dir, ".pgm");
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(files[0].filename(), "a.pgm");
  EXPECT_EQ(files[1].filename(), "b.pgm");
  EXPECT_THROW(cli::list_files(dir / "missing", ".pgm"), IoError);
}

TEST_F(TempDir, TimesRoundTrip) {
  const std::vector<double> ts{0.0, 0.02, 0.1 / 3.0, 1e-7};
  write(dir / "t.txt", "# header\n" + cli::format_times(ts) + "\n");
  EXPECT_EQ(cli::read_times(dir / "t.txt"), ts);
}

TEST_F(TempDir, TimesParseErrorNamesLine) {
  write(dir / "t.txt", "0.1\n0.2\nabc\n");
  try {
    cli::read_times(dir / "t.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST_F(TempDir, FrameTimesLookup) {
  GroupingSpec frames;
  EXPECT_THROW(cli::frame_times_for(frames, dir / "events.txt", std::nullopt), ConfigError);
  write(dir / "times.txt", "0\n0.5\n");
  EXPECT_EQ(cli::frame_times_for(frames, dir / "events.txt", std::nullopt), (std::vector<double>{0.0, 0.5}));
  write(dir / "other.txt", "1\n");
  EXPECT_EQ(cli::frame_times_for(frames, dir / "events.txt", dir / "other.txt"), std::vector<double>{1.0});
  EXPECT_TRUE(cli::frame_times_for(GroupingSpec::parse("count:10"), dir / "nowhere", std::nullopt).empty());
}

// ---------------------------------------------------------------- configuration

TEST(Config, SetKnownKeys) {
  RunConfig cfg;
  cfg.set("model.depth", "2");
  cfg.set("loss.lambda_tc", " 0.5 ");
  cfg.set("grouping", "duration:25");
  cfg.set("precision", "f64");
  cfg.set("scene.static", "on");
  cfg.set("bench.sizes", "16,32");
  EXPECT_EQ(cfg.model.depth, 2u);
  EXPECT_EQ(cfg.loss.lambda_tc, 0.5);
  EXPECT_EQ(cfg.grouping.mode, GroupingSpec::Mode::Duration);
  EXPECT_EQ(cfg.grouping.window_ms, 25.0);
  EXPECT_EQ(cfg.precision, Precision::F64);
  EXPECT_TRUE(cfg.scene.static_scene);
  EXPECT_EQ(cfg.bench_sizes, (std::vector<std::size_t>{16, 32}));
}

TEST(Config, RejectsBadInput) {
  RunConfig cfg;
  EXPECT_THROW(cfg.set("nonsense", "1"), ConfigError);
  EXPECT_THROW(cfg.set("model.nonsense", "1"), ConfigError);
  EXPECT_THROW(cfg.set("train.steps", "many"), ConfigError);
  EXPECT_THROW(cfg.set("precision", "f16"), ConfigError);
  EXPECT_THROW(cfg.set("scene.static", "maybe"), ConfigError);
  EXPECT_THROW(cfg.set("grouping", "count:0"), ConfigError);
  EXPECT_THROW(cfg.set("grouping", "duration:-5"), ConfigError);
  EXPECT_THROW(cfg.set("grouping", "window:5"), ConfigError);
  EXPECT_THROW(cfg.set("bench.sizes", "16,,32"), ConfigError);
  EXPECT_THROW(cfg.set("events.format", "hdf5"), ConfigError);
}

TEST(Config, TextWithCommentsAndErrorsByLine) {
  RunConfig cfg;
  apply_config_text(cfg, "# comment\n\nseed = 42  # trailing\nmodel.heads=4\n");
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.model.heads, 4u);
  try {
    apply_config_text(cfg, "seed = 1\n\nbogus = 2\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:3"), std::string::npos);
  }
  EXPECT_THROW(apply_config_text(cfg, "seed 1\n"), ConfigError);
}

TEST(Config, EchoRoundTrips) {
  RunConfig a;
  a.set("model.subband_mode", "hf");
  a.set("loss.distance", "l1");
  a.set("grouping", "count:500");
  a.set("train.lr", "0.002");
  a.set("seed", "9");
  RunConfig b;
  apply_config_text(b, a.echo());
  EXPECT_EQ(a.echo(), b.echo());
}

TEST(Config, GroupingStrRoundTrips) {
  for (const char* s : {"frames", "duration:12.5", "count:300"}) {
    const auto g = GroupingSpec::parse(s), h = GroupingSpec::parse(g.str());
    EXPECT_EQ(g.mode, h.mode);
    EXPECT_EQ(g.window_ms, h.window_ms);
    EXPECT_EQ(g.count, h.count);
  }
}

// ---------------------------------------------------------------- pipeline

TEST_F(TempDir, GenWritesDataset) {
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(small_config(), {dir / "data", false}, log), 0);
  const auto d = dir / "data";
  EXPECT_EQ(cli::list_files(d / "frames", ".pgm").size(), 11u);
  EXPECT_EQ(cli::list_files(d / "flows", ".flo").size(), 10u);
  EXPECT_EQ(cli::read_times(d / "times.txt").size(), 11u);
  EXPECT_TRUE(fs::exists(d / "events.txt"));
  EXPECT_TRUE(fs::exists(d / "run.log"));
  const auto manifest = io::read_file((d / "manifest.txt").string());
  EXPECT_NE(manifest.find("frames = 11\n"), std::string::npos);
  EXPECT_NE(manifest.find("seed = 1\n"), std::string::npos);
  EXPECT_NE(log.str().find("gen: 11 frames"), std::string::npos);

  const auto seq = cli::load_dataset(d);
  EXPECT_EQ(seq.frames.size(), 11u);
  EXPECT_EQ(seq.flows.size(), 10u);
  EXPECT_GT(seq.events.count(), 0u);
}

TEST_F(TempDir, GenBinaryAndStatic) {
  auto cfg = small_config();
  cfg.set("events.format", "binary");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(cfg, {dir / "data", true}, log), 0);
  EXPECT_TRUE(fs::exists(dir / "data" / "events.bin"));
  EXPECT_FALSE(fs::exists(dir / "data" / "events.txt"));
  EXPECT_EQ(cli::load_dataset(dir / "data").events.count(), 0u);
}

TEST_F(TempDir, LoadDatasetRejectsMismatch) {
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(small_config(), {dir / "data", false}, log), 0);
  fs::remove(dir / "data" / "flows" / cli::indexed("flow", 9, ".flo"));
  EXPECT_THROW(cli::load_dataset(dir / "data"), ConfigError);
}

TEST_F(TempDir, EncodeReconstructEval) {
  const auto cfg = small_config();
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(cfg, {dir / "data", false}, log), 0);
  const auto events = dir / "data" / "events.txt";

  ASSERT_EQ(cli::cmd_encode(cfg, {events, std::nullopt, dir / "vox"}, log), 0);
  const auto vox = cli::list_files(dir / "vox", ".vox");
  ASSERT_EQ(vox.size(), 10u);
  const auto grid = events::decode_voxel_dump(io::read_file(vox[0].string()));
  EXPECT_EQ(grid.bins, cfg.model.bins);
  EXPECT_EQ(grid.height, cfg.scene.height);
  EXPECT_EQ(grid.width, cfg.scene.width);

  ASSERT_EQ(cli::cmd_reconstruct(cfg, {events, std::nullopt, std::nullopt, dir / "recon"}, log), 0);
  const auto recon = cli::list_files(dir / "recon", ".pgm");
  ASSERT_EQ(recon.size(), 10u);
  const auto img = synth::decode_pgm(io::read_file(recon[0].string()));
  EXPECT_EQ(img.height, cfg.scene.height);
  EXPECT_EQ(img.width, cfg.scene.width);
  EXPECT_EQ(line_count(dir / "recon" / "timing.csv"), 11u);

  cli::EvalArgs ev{dir / "recon", dir / "data" / "frames", 1, dir / "out" / "metrics.csv"};
  ASSERT_EQ(cli::cmd_eval(cfg, ev, log), 0);
  const auto csv = io::read_file(ev.out_csv.string());
  EXPECT_EQ(csv.rfind("frame_index,psnr_db,ssim\n", 0), 0u);
  EXPECT_EQ(line_count(ev.out_csv), 12u);
  EXPECT_NE(csv.find("\nmean,"), std::string::npos);

  ev.gt_skip = 0;
  EXPECT_THROW(cli::cmd_eval(cfg, ev, log), ArgumentError);
  ev.gt_skip = 12;
  EXPECT_THROW(cli::cmd_eval(cfg, ev, log), ArgumentError);
}

TEST_F(TempDir, ReconstructWithSavedWeightsIsReproducible) {
  auto cfg = small_config();
  cfg.set("grouping", "count:200");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(cfg, {dir / "data", false}, log), 0);
  auto net = model::MsfetModel<float>::create(cfg.model, 5);
  net.save((dir / "w.wts").string());
  const auto events = dir / "data" / "events.txt";
  ASSERT_EQ(cli::cmd_reconstruct(cfg, {events, dir / "w.wts", std::nullopt, dir / "a"}, log), 0);
  ASSERT_EQ(cli::cmd_reconstruct(cfg, {events, dir / "w.wts", std::nullopt, dir / "b"}, log), 0);
  const auto a = cli::list_files(dir / "a", ".pgm"), b = cli::list_files(dir / "b", ".pgm");
  ASSERT_EQ(a.size(), b.size());
  ASSERT_FALSE(a.empty());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(io::read_file(a[i].string()), io::read_file(b[i].string()));
}

TEST(Eval, IdenticalSequencesScorePerfect) {
  synth::Image img;
  img.height = img.width = 16;
  img.values.resize(256);
  for (std::size_t i = 0; i < 256; ++i) img.values[i] = static_cast<double>((i * 37) % 101) / 100.0;
  const auto rows = cli::evaluate_frames({img, img}, {img, img}, true);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_TRUE(std::isinf(r.psnr_db));
    EXPECT_NEAR(r.ssim, 1.0, 1e-12);
  }
  EXPECT_THROW(cli::evaluate_frames({img}, {img, img}, true), ArgumentError);
}

TEST(Eval, NormalizeSequenceUsesGlobalRange) {
  synth::Image a, b;
  a.height = b.height = 1;
  a.width = b.width = 2;
  a.values = {2.0, 3.0};
  b.values = {4.0, 6.0};
  std::vector<synth::Image> seq{a, b};
  cli::normalize_sequence(seq);
  EXPECT_EQ(seq[0].values, (std::vector<double>{0.0, 0.25}));
  EXPECT_EQ(seq[1].values, (std::vector<double>{0.5, 1.0}));
}

TEST_F(TempDir, TrainToyAndResume) {
  auto cfg = small_config();
  cfg.set("scene.height", "16");
  cfg.set("scene.width", "16");
  cfg.set("train.steps", "3");
  cfg.set("train.unroll", "3");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_train_toy(cfg, {std::nullopt, std::nullopt, dir / "t1"}, log), 0);
  EXPECT_EQ(line_count(dir / "t1" / "loss_curve.csv"), 4u);
  EXPECT_TRUE(fs::exists(dir / "t1" / "weights.wts"));
  EXPECT_TRUE(fs::exists(dir / "t1" / "optimizer.wts"));
  EXPECT_EQ(line_count(dir / "t1" / "train_metrics.csv"), 5u);

  std::ostringstream log2;
  ASSERT_EQ(cli::cmd_train_toy(cfg, {std::nullopt, dir / "t1", dir / "t2"}, log2), 0);
  EXPECT_NE(log2.str().find("resumed at step 3"), std::string::npos);
  const auto curve = io::read_file((dir / "t2" / "loss_curve.csv").string());
  EXPECT_NE(curve.find("\n6,"), std::string::npos);
}

TEST_F(TempDir, TrainToyFromDataset) {
  auto cfg = small_config();
  cfg.set("scene.height", "16");
  cfg.set("scene.width", "16");
  cfg.set("train.steps", "1");
  cfg.set("train.unroll", "2");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen(cfg, {dir / "data", false}, log), 0);
  ASSERT_EQ(cli::cmd_train_toy(cfg, {dir / "data", std::nullopt, dir / "t"}, log), 0);
  EXPECT_EQ(line_count(dir / "t" / "loss_curve.csv"), 2u);
}

TEST_F(TempDir, SweepWritesOneCsvPerSetting) {
  auto cfg = small_config();
  cli::SweepArgs sw;
  sw.durations_ms = {40, 100};
  sw.counts = {300};
  sw.out_dir = dir / "sweep";
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_sweep(cfg, sw, log), 0);
  for (auto n : {"metrics_duration_40ms.csv", "metrics_duration_100ms.csv", "metrics_count_300.csv"}) {
    EXPECT_TRUE(fs::exists(sw.out_dir / n)) << n;
    EXPECT_GE(line_count(sw.out_dir / n), 3u) << n;
  }
}

TEST(Bench, SmallSize) {
  auto cfg = small_config();
  cfg.set("bench.sizes", "16");
  cfg.set("bench.repeats", "1");
  std::ostringstream log;
  EXPECT_EQ(cli::cmd_bench(cfg, log), 0);
  EXPECT_NE(log.str().find("bench: 16x16"), std::string::npos);
}

// ---------------------------------------------------------------- selftest

TEST(Selftest, AllPropertiesPass) {
  std::ostringstream os;
  EXPECT_EQ(cli::cmd_selftest("", os), 0) << os.str();
  EXPECT_EQ(os.str().find("FAIL"), std::string::npos);
}

TEST(Selftest, InjectedFaultIsCaught) {
  const auto names = selftest::property_names();
  ASSERT_GE(names.size(), 2u);
  for (const auto& name : {names.front(), names.back()}) {
    const auto results = selftest::run(name);
    for (const auto& r : results) EXPECT_EQ(r.passed, r.name != name) << name << " -> " << r.name;
  }
}

TEST(Selftest, UnknownFaultThrows) {
  std::ostringstream os;
  EXPECT_THROW(cli::cmd_selftest("no_such_property", os), ArgumentError);
}

// ---------------------------------------------------------------- binary exit codes

TEST_F(TempDir, ExitCodes) {
  const std::string d = dir.string();
  EXPECT_EQ(run_cli("--set scene.height=8 --set scene.width=8 gen -o " + d + "/data"), 0);
  EXPECT_EQ(run_cli("--set no.such.key=1 gen -o " + d + "/x"), 2);
  EXPECT_EQ(run_cli("encode " + d + "/missing.txt -o " + d + "/v"), 3);
  write(dir / "bad.txt", "not an event line\n");
  EXPECT_EQ(run_cli("--set grouping=count:5 encode " + d + "/bad.txt -o " + d + "/v"), 4);
  EXPECT_EQ(run_cli("selftest --inject-fault nope"), 2);
  EXPECT_NE(run_cli(""), 0);
}
