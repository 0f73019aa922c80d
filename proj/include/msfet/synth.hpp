#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "msfet/binary_io.hpp"
#include "msfet/error.hpp"
#include "msfet/event_core.hpp"
#include "msfet/tensor.hpp"

namespace msfet::synth {

inline constexpr double kLogEps = 1e-3;

/// Single-channel intensity image, row-major.
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Per-pixel forward displacement (dx, dy) in pixels.
struct Flow {
  std::size_t height = 0, width = 0;
  std::vector<double> dx, dy;

  Flow() = default;
  Flow(std::size_t h, std::size_t w) : height(h), width(w), dx(h * w, 0.0), dy(h * w, 0.0) {}
};

/// Periodic texture of n x n random texels, each `cell` pixels wide,
/// sampled bilinearly.
struct Texture {
  std::size_t n = 1;
  double cell = 1.0;
  std::vector<double> texels{0.5};

  static Texture random(std::size_t n, double cell, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    Texture t;
    t.n = n;
    t.cell = cell;
    t.texels.resize(n * n);
    for (auto& v : t.texels) v = u(rng);
    return t;
  }

  double sample(double x, double y) const {
    const double fx = x / cell, fy = y / cell;
    const double x0 = std::floor(fx), y0 = std::floor(fy);
    const double ax = fx - x0, ay = fy - y0;
    const auto wrap = [this](double v) {
      auto i = static_cast<long long>(v) % static_cast<long long>(n);
      return static_cast<std::size_t>(i < 0 ? i + static_cast<long long>(n) : i);
    };
    const std::size_t i0 = wrap(x0), i1 = wrap(x0 + 1), j0 = wrap(y0), j1 = wrap(y0 + 1);
    const double top = (1 - ax) * texels[j0 * n + i0] + ax * texels[j0 * n + i1];
    const double bot = (1 - ax) * texels[j1 * n + i0] + ax * texels[j1 * n + i1];
    return (1 - ay) * top + ay * bot;
  }
};

struct SceneObject {
  enum class Kind { Rect, Disc };
  Kind kind = Kind::Rect;
  /// Centre at t = 0, pixels.
  double cx = 0.0, cy = 0.0;
  /// Half extents for rectangles; `half_w` is the radius for discs.
  double half_w = 4.0, half_h = 4.0;
  /// Velocity, pixels per second.
  double vx = 0.0, vy = 0.0;
  Texture texture;

  bool contains(double lx, double ly) const {
    if (kind == Kind::Disc) return lx * lx + ly * ly <= half_w * half_w;
    return std::abs(lx) <= half_w && std::abs(ly) <= half_h;
  }
};

struct SceneConfig {
  std::size_t height = 32, width = 32;
  double fps = 50.0;
  double duration = 0.2;
  double threshold = 0.2;
  std::uint64_t seed = 7;
  std::size_t num_objects = 2;
  /// Upper bound on random object speed, pixels per second.
  double max_speed = 40.0;
  double background_vx = 20.0, background_vy = 10.0;
  /// Zero every velocity (no events).
  bool static_scene = false;

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("scene canvas must be non-empty");
    if (!(fps > 0.0) || !std::isfinite(fps)) throw ConfigError("scene.fps must be positive");
    if (!(duration >= 0.0) || !std::isfinite(duration)) throw ConfigError("scene.duration must be >= 0");
    if (!(threshold > 0.0) || !std::isfinite(threshold)) throw ConfigError("scene.threshold must be positive");
    if (!std::isfinite(max_speed) || !std::isfinite(background_vx) || !std::isfinite(background_vy)) {
      throw ConfigError("scene velocities must be finite");
    }
  }
};

/// A fully specified scene: background plus objects drawn in order.
struct Scene {
  std::size_t height = 0, width = 0;
  Texture background;
  double background_vx = 0.0, background_vy = 0.0;
  std::vector<SceneObject> objects;

  /// Index of the top-most object covering pixel (x, y) at time t, or -1.
  int owner(double x, double y, double t) const {
    for (std::size_t i = objects.size(); i-- > 0;) {
      const auto& o = objects[i];
      if (o.contains(x - (o.cx + o.vx * t), y - (o.cy + o.vy * t))) return static_cast<int>(i);
    }
    return -1;
  }
};

inline Scene build_scene(const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Scene s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.background = Texture::random(8, std::max(2.0, static_cast<double>(std::min(cfg.height, cfg.width)) / 8.0), 0.15,
                                 0.85, rng);
  if (!cfg.static_scene) {
    s.background_vx = cfg.background_vx;
    s.background_vy = cfg.background_vy;
  }
  const double span = static_cast<double>(std::min(cfg.height, cfg.width));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.num_objects; ++i) {
    SceneObject o;
    o.kind = (i % 2 == 0) ? SceneObject::Kind::Rect : SceneObject::Kind::Disc;
    o.half_w = span * (0.12 + 0.1 * unit(rng));
    o.half_h = span * (0.12 + 0.1 * unit(rng));
    o.cx = static_cast<double>(cfg.width) * (0.25 + 0.5 * unit(rng));
    o.cy = static_cast<double>(cfg.height) * (0.25 + 0.5 * unit(rng));
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double speed = cfg.static_scene ? 0.0 : cfg.max_speed * (0.5 + 0.5 * unit(rng));
    o.vx = speed * std::cos(angle);
    o.vy = speed * std::sin(angle);
    const bool bright = unit(rng) < 0.5;
    o.texture = Texture::random(4, std::max(1.5, o.half_w / 2.0), bright ? 0.6 : 0.05, bright ? 0.95 : 0.4, rng);
    s.objects.push_back(std::move(o));
  }
  return s;
}

inline Image render_frame(const Scene& s, double t) {
  Image img(s.height, s.width);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      const int k = s.owner(px, py, t);
      if (k < 0) {
        img.at(y, x) = s.background.sample(px - s.background_vx * t, py - s.background_vy * t);
      } else {
        const auto& o = s.objects[static_cast<std::size_t>(k)];
        img.at(y, x) = o.texture.sample(px - (o.cx + o.vx * t), py - (o.cy + o.vy * t));
      }
    }
  }
  return img;
}

/// Displacement over [t_a, t_b] of whatever owns each pixel at t_b.
inline Flow analytic_flow(const Scene& s, double t_a, double t_b) {
  Flow f(s.height, s.width);
  const double dt = t_b - t_a;
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const int k = s.owner(static_cast<double>(x), static_cast<double>(y), t_b);
      const double vx = k < 0 ? s.background_vx : s.objects[static_cast<std::size_t>(k)].vx;
      const double vy = k < 0 ? s.background_vy : s.objects[static_cast<std::size_t>(k)].vy;
      f.dx[y * s.width + x] = vx * dt;
      f.dy[y * s.width + x] = vy * dt;
    }
  }
  return f;
}

/// Ideal log-intensity crossings between two frames: floor(|dlog| / theta)
/// events per pixel, timestamps spread linearly over (t_a, t_b], sorted by
/// (t, y, x).
inline std::vector<events::Event> events_between(const Image& a, const Image& b, double t_a, double t_b,
                                                 double theta) {
  if (!(theta > 0.0) || !std::isfinite(theta)) throw ArgumentError("events_between: threshold must be positive");
  if (a.height != b.height || a.width != b.width) throw ShapeError("events_between: frame sizes differ");
  if (!(t_b > t_a)) throw ArgumentError("events_between: t_b must exceed t_a");
  std::vector<events::Event> out;
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) {
      const double d = std::log(b.at(y, x) + kLogEps) - std::log(a.at(y, x) + kLogEps);
      const double mag = std::abs(d);
      const auto n = static_cast<std::size_t>(std::floor(mag / theta));
      const std::int8_t p = d > 0 ? 1 : -1;
      for (std::size_t k = 1; k <= n; ++k) {
        const double t = t_a + (static_cast<double>(k) * theta / mag) * (t_b - t_a);
        out.push_back({std::min(t, t_b), static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), p});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const events::Event& l, const events::Event& r) {
    if (l.t != r.t) return l.t < r.t;
    if (l.y != r.y) return l.y < r.y;
    return l.x < r.x;
  });
  return out;
}

struct SyntheticSequence {
  std::vector<double> frame_times;
  std::vector<Image> frames;
  /// flows[k] carries frame k to frame k + 1.
  std::vector<Flow> flows;
  events::EventStream events;
};

inline SyntheticSequence generate_sequence(const Scene& scene, const SceneConfig& cfg) {
  cfg.validate();
  const auto steps = static_cast<std::size_t>(std::llround(cfg.duration * cfg.fps));
  SyntheticSequence seq;
  seq.events.sensor = {scene.height, scene.width};
  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) / cfg.fps;
    seq.frame_times.push_back(t);
    seq.frames.push_back(render_frame(scene, t));
  }
  for (std::size_t k = 0; k < steps; ++k) {
    const double ta = seq.frame_times[k], tb = seq.frame_times[k + 1];
    auto ev = events_between(seq.frames[k], seq.frames[k + 1], ta, tb, cfg.threshold);
    seq.events.events.insert(seq.events.events.end(), ev.begin(), ev.end());
    seq.flows.push_back(analytic_flow(scene, ta, tb));
  }
  return seq;
}

inline SyntheticSequence generate_sequence(const SceneConfig& cfg) { return generate_sequence(build_scene(cfg), cfg); }

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  std::vector<T> v(img.values.begin(), img.values.end());
  return Tensor<T>::from({1, img.height, img.width}, std::move(v));
}

template <typename T>
Tensor<T> to_tensor(const Flow& f) {
  std::vector<T> v;
  v.reserve(2 * f.dx.size());
  for (double d : f.dx) v.push_back(static_cast<T>(d));
  for (double d : f.dy) v.push_back(static_cast<T>(d));
  return Tensor<T>::from({2, f.height, f.width}, std::move(v));
}

template <typename T>
Image to_image(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("to_image: expects [1,H,W], got " + shape_str(t.shape()));
  Image img(t.dim(1), t.dim(2));
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) img.values[i] = static_cast<double>(d[i]);
  return img;
}

/// Rescales to [0, 1] by min and max; constant images map to zero.
inline Image normalize_range(const Image& img) {
  Image out = img;
  if (img.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  const double span = *hi - *lo;
  for (auto& v : out.values) v = span > 0.0 ? (v - *lo) / span : 0.0;
  return out;
}

// ---------------------------------------------------------------- file formats

/// Binary PGM (P5, maxval 255); values clamped to [0,1] and rounded half-up.
inline std::vector<char> encode_pgm(const Image& img) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  for (double v : img.values) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(c * 255.0 + 0.5))));
  }
  return out;
}

inline Image decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&](const char* what) {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError(std::string("pgm: missing ") + what + " at byte offset " + std::to_string(start));
    return bytes.substr(start, pos - start);
  };
  if (next_token("magic") != "P5") throw ParseError("pgm: expected P5 magic at byte offset 0");
  std::size_t w = 0, h = 0, maxval = 0;
  if (!events::detail::parse_number(next_token("width"), w) || !events::detail::parse_number(next_token("height"), h) ||
      !events::detail::parse_number(next_token("maxval"), maxval) || maxval == 0 || maxval > 255) {
    throw ParseError("pgm: malformed header");
  }
  ++pos;
  if (bytes.size() - std::min(pos, bytes.size()) < w * h) {
    throw ParseError("pgm: truncated pixel data at byte offset " + std::to_string(bytes.size()));
  }
  Image img(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.values[i] = static_cast<double>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<double>(maxval);
  }
  return img;
}

/// "FLO1" u32 H, u32 W, then f32 (dx, dy) pairs row-major.
inline std::vector<char> encode_flow(const Flow& f) {
  io::ByteWriter w;
  w.bytes("FLO1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.width));
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    w.put<float>(static_cast<float>(f.dx[i]));
    w.put<float>(static_cast<float>(f.dy[i]));
  }
  return w.take();
}

inline Flow decode_flow(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "FLO1") throw ParseError("flow file: bad magic at byte offset 0");
  const auto h = r.get<std::uint32_t>("height");
  const auto w = r.get<std::uint32_t>("width");
  Flow f(h, w);
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    f.dx[i] = r.get<float>("dx");
    f.dy[i] = r.get<float>("dy");
  }
  return f;
}

}  // namespace msfet::synth
