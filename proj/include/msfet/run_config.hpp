#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msfet/error.hpp"
#include "msfet/event_core.hpp"
#include "msfet/losses.hpp"
#include "msfet/model.hpp"
#include "msfet/synth.hpp"
#include "msfet/train.hpp"

namespace msfet {

/// How an event stream is cut into groups.
struct GroupingSpec {
  enum class Mode { Frames, Duration, Count };
  Mode mode = Mode::Frames;
  double window_ms = 0.0;
  std::size_t count = 0;

  static GroupingSpec parse(std::string_view text) {
    GroupingSpec g;
    text = events::detail::trim(text);
    if (text == "frames") return g;
    const auto colon = text.find(':');
    const auto head = text.substr(0, colon);
    const auto arg = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
    if (head == "duration") {
      g.mode = Mode::Duration;
      if (!events::detail::parse_number(arg, g.window_ms) || !(g.window_ms > 0.0)) {
        throw ConfigError("grouping duration:<ms> needs a positive number, got '" + std::string(text) + "'");
      }
    } else if (head == "count") {
      g.mode = Mode::Count;
      if (!events::detail::parse_number(arg, g.count) || g.count == 0) {
        throw ConfigError("grouping count:<n> needs a positive integer, got '" + std::string(text) + "'");
      }
    } else {
      throw ConfigError("grouping must be frames|duration:<ms>|count:<n>, got '" + std::string(text) + "'");
    }
    return g;
  }

  std::string str() const {
    switch (mode) {
      case Mode::Duration: return "duration:" + metrics::format_metric(window_ms);
      case Mode::Count: return "count:" + std::to_string(count);
      default: return "frames";
    }
  }

  /// `frame_times` is only consulted in frames mode.
  std::vector<events::EventGroup> apply(const events::EventStream& s, const std::vector<double>& frame_times) const {
    switch (mode) {
      case Mode::Duration: return events::group_fixed_duration(s, window_ms / 1000.0);
      case Mode::Count: return events::group_fixed_count(s, count);
      default:
        if (frame_times.empty()) throw ConfigError("frames grouping needs frame timestamps (--times)");
        return events::group_by_frames(s, frame_times);
    }
  }
};

enum class Precision { F32, F64 };

/// Everything a command needs, settable from `key = value` lines.
struct RunConfig {
  model::ModelConfig model;
  losses::LossConfig loss;
  synth::SceneConfig scene;
  train::TrainOptions train;
  GroupingSpec grouping;
  std::uint64_t seed = 1;
  Precision precision = Precision::F32;
  bool normalize_gt = true;
  std::vector<std::size_t> bench_sizes{64, 128};
  std::size_t bench_repeats = 3;
  std::string events_format = "text";
  std::string output_dir = "out";

  RunConfig() {
    loss.seq_len = train.unroll;
    loss.tc_start = 2;
  }

  /// Sets one key; unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& raw) {
    const std::string value(events::detail::trim(raw));
    auto num = [&](auto& out) {
      if (!events::detail::parse_number(value, out)) throw ConfigError(key + ": cannot parse '" + value + "'");
    };
    auto flag = [&](bool& out) {
      if (value == "true" || value == "1" || value == "on") out = true;
      else if (value == "false" || value == "0" || value == "off") out = false;
      else throw ConfigError(key + ": expected true|false, got '" + value + "'");
    };
    if (key.rfind("model.", 0) == 0) {
      model.set(key.substr(6), value);
    } else if (key == "loss.lambda_tc") num(loss.lambda_tc);
    else if (key == "loss.alpha") num(loss.alpha);
    else if (key == "loss.seq_len") num(loss.seq_len);
    else if (key == "loss.tc_start") num(loss.tc_start);
    else if (key == "loss.distance") loss.distance = value;
    else if (key == "loss.scalar_occlusion") flag(loss.scalar_occlusion);
    else if (key == "scene.height") num(scene.height);
    else if (key == "scene.width") num(scene.width);
    else if (key == "scene.fps") num(scene.fps);
    else if (key == "scene.duration") num(scene.duration);
    else if (key == "scene.threshold") num(scene.threshold);
    else if (key == "scene.num_objects") num(scene.num_objects);
    else if (key == "scene.max_speed") num(scene.max_speed);
    else if (key == "scene.background_vx") num(scene.background_vx);
    else if (key == "scene.background_vy") num(scene.background_vy);
    else if (key == "scene.static") flag(scene.static_scene);
    else if (key == "train.steps") num(train.steps);
    else if (key == "train.unroll") num(train.unroll);
    else if (key == "train.window_stride") num(train.window_stride);
    else if (key == "train.lr") num(train.adam.lr);
    else if (key == "train.beta1") num(train.adam.beta1);
    else if (key == "train.beta2") num(train.adam.beta2);
    else if (key == "train.eps") num(train.adam.eps);
    else if (key == "grouping") grouping = GroupingSpec::parse(value);
    else if (key == "seed") num(seed);
    else if (key == "precision") {
      if (value == "f32") precision = Precision::F32;
      else if (value == "f64") precision = Precision::F64;
      else throw ConfigError("precision must be f32|f64, got '" + value + "'");
    } else if (key == "eval.normalize_gt") flag(normalize_gt);
    else if (key == "bench.sizes") {
      bench_sizes.clear();
      std::size_t start = 0;
      while (start <= value.size()) {
        auto end = value.find(',', start);
        if (end == std::string::npos) end = value.size();
        std::size_t v = 0;
        if (!events::detail::parse_number(std::string_view(value).substr(start, end - start), v) || v == 0) {
          throw ConfigError("bench.sizes: expected comma-separated positive integers, got '" + value + "'");
        }
        bench_sizes.push_back(v);
        start = end + 1;
      }
    } else if (key == "bench.repeats") num(bench_repeats);
    else if (key == "events.format") {
      if (value != "text" && value != "binary") throw ConfigError("events.format must be text|binary");
      events_format = value;
    } else if (key == "output_dir") output_dir = value;
    else throw ConfigError("unknown configuration key '" + key + "'");
  }

  void validate() const {
    model.validate();
    loss.validate();
    scene.validate();
    if (train.unroll == 0) throw ConfigError("train.unroll must be positive");
    if (!(train.adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
  }

  /// Every effective setting, for the run log.
  std::vector<std::pair<std::string, std::string>> entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [k, v] : model.to_map()) out.emplace_back("model." + k, v);
    auto f = [](double v) { return metrics::format_metric(v); };
    out.emplace_back("loss.lambda_tc", f(loss.lambda_tc));
    out.emplace_back("loss.alpha", f(loss.alpha));
    out.emplace_back("loss.seq_len", std::to_string(loss.seq_len));
    out.emplace_back("loss.tc_start", std::to_string(loss.tc_start));
    out.emplace_back("loss.distance", loss.distance);
    out.emplace_back("loss.scalar_occlusion", loss.scalar_occlusion ? "true" : "false");
    out.emplace_back("scene.height", std::to_string(scene.height));
    out.emplace_back("scene.width", std::to_string(scene.width));
    out.emplace_back("scene.fps", f(scene.fps));
    out.emplace_back("scene.duration", f(scene.duration));
    out.emplace_back("scene.threshold", f(scene.threshold));
    out.emplace_back("scene.num_objects", std::to_string(scene.num_objects));
    out.emplace_back("scene.max_speed", f(scene.max_speed));
    out.emplace_back("scene.background_vx", f(scene.background_vx));
    out.emplace_back("scene.background_vy", f(scene.background_vy));
    out.emplace_back("scene.static", scene.static_scene ? "true" : "false");
    out.emplace_back("train.steps", std::to_string(train.steps));
    out.emplace_back("train.unroll", std::to_string(train.unroll));
    out.emplace_back("train.window_stride", std::to_string(train.window_stride));
    out.emplace_back("train.lr", f(train.adam.lr));
    out.emplace_back("train.beta1", f(train.adam.beta1));
    out.emplace_back("train.beta2", f(train.adam.beta2));
    out.emplace_back("train.eps", std::to_string(train.adam.eps));
    out.emplace_back("grouping", grouping.str());
    out.emplace_back("seed", std::to_string(seed));
    out.emplace_back("precision", precision == Precision::F64 ? "f64" : "f32");
    out.emplace_back("eval.normalize_gt", normalize_gt ? "true" : "false");
    std::string sizes;
    for (auto s : bench_sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(s);
    out.emplace_back("bench.sizes", sizes);
    out.emplace_back("bench.repeats", std::to_string(bench_repeats));
    out.emplace_back("events.format", events_format);
    out.emplace_back("output_dir", output_dir);
    return out;
  }

  std::string echo() const {
    std::string s;
    for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
    return s;
  }
};

/// Parses `key = value` lines with `#` comments into `cfg`.
inline void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source = "config") {
  std::size_t start = 0, line_no = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    auto line = text.substr(start, end - start);
    start = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = events::detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(events::detail::trim(line.substr(0, eq)));
    try {
      cfg.set(key, std::string(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (end == text.size()) break;
  }
}

}  // namespace msfet
