#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "msfet/binary_io.hpp"
#include "msfet/error.hpp"

namespace msfet::events {

/// One brightness-change record. `t` in seconds; `p` is +1 or -1.
struct Event {
  double t = 0.0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t p = 1;

  friend bool operator==(const Event&, const Event&) = default;
};

struct SensorSize {
  std::size_t height = 0;
  std::size_t width = 0;

  friend bool operator==(const SensorSize&, const SensorSize&) = default;
};

/// Events in non-decreasing time order plus the sensor they came from.
struct EventStream {
  std::vector<Event> events;
  SensorSize sensor;

  std::size_t count() const { return events.size(); }
};

/// Events with t_start < t <= t_end (count grouping uses a closed left edge;
/// see group_fixed_count).
struct EventGroup {
  std::vector<Event> events;
  double t_start = 0.0;
  double t_end = 0.0;

  double duration() const { return t_end - t_start; }
  long polarity_sum() const {
    long s = 0;
    for (const auto& e : events) s += e.p;
    return s;
  }
};

/// [bins, H, W] in bin-major, row-major order.
struct VoxelGrid {
  std::size_t bins = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double& at(std::size_t b, std::size_t y, std::size_t x) { return values[(b * height + y) * width + x]; }
  double at(std::size_t b, std::size_t y, std::size_t x) const { return values[(b * height + y) * width + x]; }

  double total() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
};

enum class Format { TextCsv, Binary };

struct ParseOptions {
  /// Used when the input carries no sensor header.
  std::optional<SensorSize> sensor;
  /// Text timestamps are microseconds instead of seconds.
  bool microseconds = false;
  /// Allowed backwards step between consecutive timestamps (seconds).
  double ordering_tolerance = 0.0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename N>
bool parse_number(std::string_view s, N& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

/// Reads "# H=<int> W=<int>" if the comment has that form.
inline std::optional<SensorSize> parse_sensor_header(std::string_view comment) {
  std::istringstream in{std::string(comment)};
  std::string tok;
  std::optional<std::size_t> h, w;
  while (in >> tok) {
    if (tok.rfind("H=", 0) == 0) {
      std::size_t v;
      if (parse_number(std::string_view(tok).substr(2), v)) h = v;
    } else if (tok.rfind("W=", 0) == 0) {
      std::size_t v;
      if (parse_number(std::string_view(tok).substr(2), v)) w = v;
    }
  }
  if (h && w) return SensorSize{*h, *w};
  return std::nullopt;
}

inline void check_event(const Event& e, const SensorSize& s, const std::string& where) {
  if (e.x >= s.width || e.y >= s.height) {
    throw BoundsError("event at (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") outside " +
                      std::to_string(s.height) + "x" + std::to_string(s.width) + " sensor (" + where + ")");
  }
}

inline void check_order(double prev, double t, double tol, const std::string& where) {
  if (t < prev - tol) {
    std::ostringstream os;
    os.precision(17);
    os << "timestamp " << t << " precedes previous " << prev << " (" << where << ")";
    throw OrderingError(os.str());
  }
}

inline EventStream parse_text(std::string_view text, const ParseOptions& opts) {
  EventStream stream;
  std::optional<SensorSize> sensor = opts.sensor;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  double prev = -INFINITY;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line.front() == '#') {
      if (auto hdr = parse_sensor_header(line.substr(1))) sensor = hdr;
      continue;
    }
    std::vector<std::string_view> fields;
    for (std::size_t start = 0;;) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    const std::string where = "line " + std::to_string(line_no);
    if (fields.size() != 4) throw ParseError("expected 't,x,y,p' on " + where + ": '" + std::string(line) + "'");
    double t;
    long x, y, p;
    if (!parse_number(fields[0], t) || !std::isfinite(t) || !parse_number(fields[1], x) ||
        !parse_number(fields[2], y) || !parse_number(fields[3], p)) {
      throw ParseError("malformed record on " + where + ": '" + std::string(line) + "'");
    }
    if (p != 1 && p != -1) throw ParseError("polarity must be +1 or -1 on " + where);
    if (x < 0 || y < 0 || x > 0xFFFF || y > 0xFFFF) throw BoundsError("coordinate out of range on " + where);
    if (opts.microseconds) t *= 1e-6;
    if (t < 0.0) throw ParseError("negative timestamp on " + where);
    check_order(prev, t, opts.ordering_tolerance, where);
    prev = std::max(prev, t);
    stream.events.push_back({t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                             static_cast<std::int8_t>(p)});
  }
  if (sensor) {
    stream.sensor = *sensor;
  } else {
    // No header and nothing configured: the sensor is the bounding box.
    for (const auto& e : stream.events) {
      stream.sensor.width = std::max<std::size_t>(stream.sensor.width, e.x + 1u);
      stream.sensor.height = std::max<std::size_t>(stream.sensor.height, e.y + 1u);
    }
  }
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    check_event(stream.events[i], stream.sensor, "event " + std::to_string(i));
  }
  return stream;
}

inline EventStream parse_binary(std::string_view bytes, const ParseOptions& opts) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "EVR1") throw ParseError("binary events: bad magic at byte offset 0");
  EventStream stream;
  stream.sensor.height = r.get<std::uint32_t>("height");
  stream.sensor.width = r.get<std::uint32_t>("width");
  const auto count = r.get<std::uint64_t>("count");
  constexpr std::size_t kRecord = 8 + 2 + 2 + 1;
  if (count > r.remaining() / kRecord) {
    throw ParseError("binary events: header declares " + std::to_string(count) + " events but only " +
                     std::to_string(r.remaining()) + " bytes follow at byte offset " + std::to_string(r.offset()));
  }
  stream.events.reserve(count);
  double prev = -INFINITY;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    Event e;
    e.t = r.get<double>("timestamp");
    e.x = r.get<std::uint16_t>("x");
    e.y = r.get<std::uint16_t>("y");
    e.p = r.get<std::int8_t>("polarity");
    const std::string where = "byte offset " + std::to_string(at);
    if (!std::isfinite(e.t) || e.t < 0.0) throw ParseError("invalid timestamp at " + where);
    if (e.p != 1 && e.p != -1) throw ParseError("polarity must be +1 or -1 at " + where);
    check_order(prev, e.t, opts.ordering_tolerance, where);
    prev = std::max(prev, e.t);
    check_event(e, stream.sensor, where);
    stream.events.push_back(e);
  }
  if (!r.at_end()) throw ParseError("binary events: trailing bytes at offset " + std::to_string(r.offset()));
  return stream;
}

}  // namespace detail

inline EventStream parse_events(std::string_view bytes, Format format, const ParseOptions& opts = {}) {
  return format == Format::Binary ? detail::parse_binary(bytes, opts) : detail::parse_text(bytes, opts);
}

/// Picks the format from the leading magic.
inline Format sniff_format(std::string_view bytes) {
  return bytes.substr(0, 4) == "EVR1" ? Format::Binary : Format::TextCsv;
}

inline std::string to_text(const EventStream& s) {
  std::ostringstream os;
  os << "# H=" << s.sensor.height << " W=" << s.sensor.width << "\n";
  os.precision(17);
  for (const auto& e : s.events) {
    os << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
  }
  return os.str();
}

inline std::vector<char> to_binary(const EventStream& s) {
  io::ByteWriter w;
  w.bytes("EVR1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.sensor.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.sensor.width));
  w.put<std::uint64_t>(s.events.size());
  for (const auto& e : s.events) {
    w.put<double>(e.t);
    w.put<std::uint16_t>(e.x);
    w.put<std::uint16_t>(e.y);
    w.put<std::int8_t>(e.p);
  }
  return w.take();
}

// ---------------------------------------------------------------- grouping

/// Group k holds the events with frame_times[k-1] < t <= frame_times[k].
inline std::vector<EventGroup> group_by_frames(const EventStream& stream, const std::vector<double>& frame_times) {
  if (frame_times.size() < 2) throw ArgumentError("group_by_frames: need at least 2 frame times");
  for (std::size_t i = 1; i < frame_times.size(); ++i) {
    if (!(frame_times[i] > frame_times[i - 1])) {
      throw ArgumentError("group_by_frames: frame times must be strictly increasing");
    }
  }
  std::vector<EventGroup> groups(frame_times.size() - 1);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    groups[k].t_start = frame_times[k];
    groups[k].t_end = frame_times[k + 1];
  }
  std::size_t k = 0;
  for (const auto& e : stream.events) {
    if (e.t <= frame_times.front()) continue;
    while (k < groups.size() && e.t > groups[k].t_end) ++k;
    if (k == groups.size()) break;
    groups[k].events.push_back(e);
  }
  return groups;
}

/// Equal windows of `window` seconds anchored at the first event's time.
inline std::vector<EventGroup> group_fixed_duration(const EventStream& stream, double window) {
  if (!(window > 0.0) || !std::isfinite(window)) throw ArgumentError("group_fixed_duration: window must be positive");
  if (stream.events.empty()) return {};
  const double t0 = stream.events.front().t;
  const double span = stream.events.back().t - t0;
  auto n = static_cast<std::size_t>(std::ceil(span / window));
  // Guard against ceil landing one short from rounding in span / window.
  while (t0 + static_cast<double>(n) * window < stream.events.back().t) ++n;
  n = std::max<std::size_t>(n, 1);
  std::vector<double> edges(n + 1);
  for (std::size_t i = 0; i <= n; ++i) edges[i] = t0 + static_cast<double>(i) * window;
  return group_by_frames(stream, edges);
}

/// Consecutive chunks of exactly n events; the trailing partial chunk is
/// dropped. Chunk i spans [t of the previous chunk's last event, t of its own
/// last event]; the first chunk starts at its own first event.
inline std::vector<EventGroup> group_fixed_count(const EventStream& stream, std::size_t n) {
  if (n == 0) throw ArgumentError("group_fixed_count: n must be at least 1");
  std::vector<EventGroup> groups;
  const std::size_t full = stream.events.size() / n;
  groups.reserve(full);
  for (std::size_t g = 0; g < full; ++g) {
    EventGroup grp;
    auto first = stream.events.begin() + static_cast<std::ptrdiff_t>(g * n);
    grp.events.assign(first, first + static_cast<std::ptrdiff_t>(n));
    grp.t_start = g == 0 ? grp.events.front().t : stream.events[g * n - 1].t;
    grp.t_end = grp.events.back().t;
    groups.push_back(std::move(grp));
  }
  return groups;
}

// ---------------------------------------------------------------- voxel grid

/// Normalized timestamp in [0, bins-1] for an event inside the window.
inline double normalized_time(double t, double t_start, double duration, std::size_t bins) {
  return static_cast<double>(bins - 1) * (t - t_start) / duration;
}

/// Temporal bilinear voxel encoding: each event adds p * max(0, 1 - |b - t*|)
/// to bins floor(t*) and floor(t*)+1 at its pixel.
inline VoxelGrid encode_voxel(const EventGroup& group, std::size_t bins, std::size_t height, std::size_t width) {
  if (bins < 2) throw ArgumentError("encode_voxel: need at least 2 bins");
  const double dt = group.duration();
  if (!(dt > 0.0)) throw ArgumentError("encode_voxel: window duration must be positive");
  VoxelGrid grid{bins, height, width, std::vector<double>(bins * height * width, 0.0)};
  for (const auto& e : group.events) {
    if (e.x >= width || e.y >= height) {
      throw BoundsError("encode_voxel: event at (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                        ") outside grid");
    }
    const double ts = normalized_time(e.t, group.t_start, dt, bins);
    const double lower = std::floor(ts);
    for (double b : {lower, lower + 1.0}) {
      if (b < 0.0 || b > static_cast<double>(bins - 1)) continue;
      const double w = std::max(0.0, 1.0 - std::abs(b - ts));
      if (w > 0.0) grid.at(static_cast<std::size_t>(b), e.y, e.x) += e.p * w;
    }
  }
  return grid;
}

/// "VOX1", u32 B, u32 H, u32 W, f32 values (bin-major).
inline std::vector<char> encode_voxel_dump(const VoxelGrid& v) {
  io::ByteWriter w;
  w.bytes("VOX1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.bins));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.width));
  for (double x : v.values) w.put<float>(static_cast<float>(x));
  return w.take();
}

inline VoxelGrid decode_voxel_dump(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "VOX1") throw ParseError("voxel dump: bad magic at byte offset 0");
  VoxelGrid v;
  v.bins = r.get<std::uint32_t>("bins");
  v.height = r.get<std::uint32_t>("height");
  v.width = r.get<std::uint32_t>("width");
  v.values.resize(v.bins * v.height * v.width);
  for (auto& x : v.values) x = r.get<float>("voxel value");
  if (!r.at_end()) throw ParseError("voxel dump: trailing bytes at offset " + std::to_string(r.offset()));
  return v;
}

}  // namespace msfet::events
