#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msfet/binary_io.hpp"
#include "msfet/error.hpp"
#include "msfet/event_core.hpp"
#include "msfet/ops.hpp"
#include "msfet/parameters.hpp"
#include "msfet/serialize.hpp"
#include "msfet/tensor.hpp"
#include "msfet/wavelet.hpp"

namespace msfet::model {

/// Denominator of the attention logits.
enum class AttentionScale {
  Literal,  ///< sqrt(D), D the full embedding width
  PerHead,  ///< sqrt(D / heads)
};

/// Which wavelet subbands feed the frequency branch of each CDAM.
enum class SubbandMode {
  Full,      ///< LL and {LH, HL, HH}
  LowOnly,   ///< LL only
  HighOnly,  ///< {LH, HL, HH} only
};

inline std::string to_string(AttentionScale s) { return s == AttentionScale::Literal ? "literal" : "per_head"; }

inline std::string to_string(SubbandMode m) {
  switch (m) {
    case SubbandMode::LowOnly: return "ll";
    case SubbandMode::HighOnly: return "hf";
    default: return "full";
  }
}

struct ModelConfig {
  std::size_t base_channels = 32;
  std::size_t bins = 5;
  std::size_t embed_dim = 256;
  std::size_t heads = 8;
  std::size_t depth = 3;
  /// Hidden width of the attention FFN as a multiple of embed_dim.
  std::size_t ffn_mult = 4;
  double leaky_slope = 0.01;
  AttentionScale attention_scale = AttentionScale::Literal;
  SubbandMode subband_mode = SubbandMode::Full;

  void validate() const {
    if (base_channels == 0) throw ConfigError("base_channels must be positive");
    if (bins < 2) throw ConfigError("bins must be at least 2");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") must be a positive multiple of heads (" +
                        std::to_string(heads) + ")");
    }
    if (depth < 1 || depth > 4) throw ConfigError("depth must be in 1..4");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
    if (!(leaky_slope >= 0.0) || !std::isfinite(leaky_slope)) throw ConfigError("leaky_slope must be finite and >= 0");
  }

  /// Downsampling factor of each encoder stage: 2, 4, ..., 2^depth.
  std::size_t scale(std::size_t stage) const { return std::size_t{2} << stage; }
  std::size_t channels(std::size_t stage) const { return base_channels * scale(stage); }
  /// Inputs are padded to a multiple of this so the coarsest stage can
  /// still be split into 2x2 wavelet blocks.
  std::size_t pad_multiple() const { return std::size_t{2} << depth; }

  std::map<std::string, std::string> to_map() const {
    return {{"base_channels", std::to_string(base_channels)},
            {"bins", std::to_string(bins)},
            {"embed_dim", std::to_string(embed_dim)},
            {"heads", std::to_string(heads)},
            {"depth", std::to_string(depth)},
            {"ffn_mult", std::to_string(ffn_mult)},
            {"leaky_slope", std::to_string(leaky_slope)},
            {"attention_scale", to_string(attention_scale)},
            {"subband_mode", to_string(subband_mode)}};
  }

  /// Applies one key=value setting; unknown keys and bad values throw.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&](std::size_t& out) {
      std::size_t v;
      if (!events::detail::parse_number(value, v)) throw ConfigError("model." + key + ": not an integer: " + value);
      out = v;
    };
    if (key == "base_channels") as_size(base_channels);
    else if (key == "bins") as_size(bins);
    else if (key == "embed_dim") as_size(embed_dim);
    else if (key == "heads") as_size(heads);
    else if (key == "depth") as_size(depth);
    else if (key == "ffn_mult") as_size(ffn_mult);
    else if (key == "leaky_slope") {
      if (!events::detail::parse_number(value, leaky_slope)) throw ConfigError("model.leaky_slope: not a number: " + value);
    } else if (key == "attention_scale") {
      if (value == "literal") attention_scale = AttentionScale::Literal;
      else if (value == "per_head") attention_scale = AttentionScale::PerHead;
      else throw ConfigError("model.attention_scale must be literal|per_head, got " + value);
    } else if (key == "subband_mode") {
      if (value == "full") subband_mode = SubbandMode::Full;
      else if (value == "ll") subband_mode = SubbandMode::LowOnly;
      else if (value == "hf") subband_mode = SubbandMode::HighOnly;
      else throw ConfigError("model.subband_mode must be full|ll|hf, got " + value);
    } else {
      throw ConfigError("unknown model key '" + key + "'");
    }
  }

  static ModelConfig from_map(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    for (const auto& [k, v] : kv) c.set(k, v);
    c.validate();
    return c;
  }
};

/// Diagnostics collected during a forward pass when requested.
struct ForwardTrace {
  struct AttentionStat {
    std::size_t scale = 0;
    std::size_t head = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    double max_row_sum_error = 0.0;
  };
  std::vector<AttentionStat> attention;
  std::map<std::string, double> block_ms;
};

namespace detail {

class BlockTimer {
 public:
  BlockTimer(ForwardTrace* trace, std::string name) : trace_(trace), name_(std::move(name)) {
    if (trace_) start_ = std::chrono::steady_clock::now();
  }
  ~BlockTimer() {
    if (trace_) {
      auto d = std::chrono::steady_clock::now() - start_;
      trace_->block_ms[name_] += std::chrono::duration<double, std::milli>(d).count();
    }
  }
  BlockTimer(const BlockTimer&) = delete;
  BlockTimer& operator=(const BlockTimer&) = delete;

 private:
  ForwardTrace* trace_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------- layers

template <typename T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d make(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                     std::size_t kernel, std::size_t stride, std::size_t padding) {
    Conv2d c;
    c.weight = store.add(name + ".weight", {cout, cin, kernel, kernel});
    c.bias = store.add(name + ".bias", {cout});
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, stride, padding); }
};

template <typename T>
struct Linear {
  Tensor<T> weight, bias;

  static Linear make(ParameterStore<T>& store, const std::string& name, std::size_t din, std::size_t dout) {
    return {store.add(name + ".weight", {dout, din}), store.add(name + ".bias", {dout})};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  static LayerNorm make(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    return {store.add(name + ".gamma", {dim}), store.add(name + ".beta", {dim})};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

/// x + conv2(swish(conv1(x))), both 3x3 and channel preserving.
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;

  static ResidualBlock make(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
    return {Conv2d<T>::make(store, name + ".conv1", channels, channels, 3, 1, 1),
            Conv2d<T>::make(store, name + ".conv2", channels, channels, 3, 1, 1)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::add(x, conv2(ops::swish(conv1(x)))); }
};

template <typename T>
struct LstmState {
  Tensor<T> hidden, cell;
};

/// Convolutional LSTM cell; one 3x3 conv over [x; h] yields the i, f, o, g
/// gate planes in that order.
template <typename T>
struct ConvLstmCell {
  Conv2d<T> gates;
  std::size_t channels = 0;

  static ConvLstmCell make(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
    return {Conv2d<T>::make(store, name + ".gates", 2 * channels, 4 * channels, 3, 1, 1), channels};
  }

  LstmState<T> step(const Tensor<T>& x, const LstmState<T>& prev) const {
    const Tensor<T> z = gates(ops::concat<T>({x, prev.hidden}, 0));
    const std::size_t c = channels;
    const Tensor<T> i = ops::sigmoid(ops::narrow(z, 0, 0, c));
    const Tensor<T> f = ops::sigmoid(ops::narrow(z, 0, c, c));
    const Tensor<T> o = ops::sigmoid(ops::narrow(z, 0, 2 * c, c));
    const Tensor<T> g = ops::tanh(ops::narrow(z, 0, 3 * c, c));
    Tensor<T> cell = ops::add(ops::mul(f, prev.cell), ops::mul(i, g));
    Tensor<T> hidden = ops::mul(o, ops::tanh(cell));
    return {std::move(hidden), std::move(cell)};
  }
};

/// Kernel, stride and padding that map a stage at `scale` onto the token
/// grid of the coarsest stage (`token_scale`).
struct EmbedGeometry {
  std::size_t kernel, stride, padding;
};

inline EmbedGeometry embed_geometry(std::size_t scale, std::size_t token_scale) {
  const std::size_t s = token_scale / scale;
  if (s <= 1) return {3, 1, 1};
  return {2 * s - 1, s, s - 1};
}

/// Overlapping patch embedding: strided conv to D channels, then flatten
/// the [D,h',w'] map row-major into [h'*w', D] tokens.
template <typename T>
struct PatchEmbed {
  Conv2d<T> conv;

  static PatchEmbed make(ParameterStore<T>& store, const std::string& name, std::size_t channels, std::size_t dim,
                         EmbedGeometry g) {
    return {Conv2d<T>::make(store, name, channels, dim, g.kernel, g.stride, g.padding)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> m = conv(x);
    const std::size_t D = m.dim(0), n = m.dim(1) * m.dim(2);
    return ops::transpose(ops::reshape(m, {D, n}));
  }
};

/// Softmax(Q_h K_h^T / scale) V_h for each head, heads concatenated.
/// Q, K, V are already projected [n, D].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               double scale, std::vector<ForwardTrace::AttentionStat>* probe = nullptr,
                               std::size_t stage_scale = 0) {
  if (q.rank() != 2 || k.shape() != v.shape() || q.dim(1) != k.dim(1) || q.dim(1) % heads != 0) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  const std::size_t dh = q.dim(1) / heads;
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = ops::narrow(q, 1, h * dh, dh);
    Tensor<T> kh = ops::narrow(k, 1, h * dh, dh);
    Tensor<T> vh = ops::narrow(v, 1, h * dh, dh);
    Tensor<T> logits = ops::mul_scalar(ops::matmul(qh, ops::transpose(kh)), static_cast<T>(1.0 / scale));
    Tensor<T> attn = ops::softmax(logits);
    if (probe) {
      ForwardTrace::AttentionStat st{stage_scale, h, attn.dim(0), attn.dim(1), 0.0};
      auto a = attn.data();
      for (std::size_t r = 0; r < st.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < st.cols; ++c) s += static_cast<double>(a[r * st.cols + c]);
        st.max_row_sum_error = std::max(st.max_row_sum_error, std::abs(s - 1.0));
      }
      probe->push_back(st);
    }
    outs.push_back(ops::matmul(attn, vh));
  }
  return ops::concat(outs, 1);
}

template <typename T>
struct CrossAttention {
  Linear<T> query, key, value, output;
  std::size_t heads = 1;
  double scale = 1.0;

  static CrossAttention make(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                             AttentionScale mode) {
    CrossAttention a;
    a.query = Linear<T>::make(store, name + ".q", dim, dim);
    a.key = Linear<T>::make(store, name + ".k", dim, dim);
    a.value = Linear<T>::make(store, name + ".v", dim, dim);
    a.output = Linear<T>::make(store, name + ".o", dim, dim);
    a.heads = heads;
    a.scale = std::sqrt(static_cast<double>(mode == AttentionScale::Literal ? dim : dim / heads));
    return a;
  }

  /// Queries from `st_tokens`, keys and values from `fq_tokens`.
  Tensor<T> operator()(const Tensor<T>& st_tokens, const Tensor<T>& fq_tokens,
                       std::vector<ForwardTrace::AttentionStat>* probe = nullptr, std::size_t stage_scale = 0) const {
    return output(multi_head_attention(query(st_tokens), key(fq_tokens), value(fq_tokens), heads, scale, probe,
                                       stage_scale));
  }
};

template <typename T>
struct FeedForward {
  Linear<T> fc1, fc2;

  static FeedForward make(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden) {
    return {Linear<T>::make(store, name + ".fc1", dim, hidden), Linear<T>::make(store, name + ".fc2", hidden, dim)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ops::gelu(fc1(x))); }
};

// ---------------------------------------------------------------- blocks

/// Cross-domain attention module for one encoder stage.
template <typename T>
struct Cdam {
  std::size_t scale = 2;
  SubbandMode mode = SubbandMode::Full;
  ResidualBlock<T> st_block;
  ConvLstmCell<T> lstm;
  std::optional<ResidualBlock<T>> ll_block;
  std::optional<ResidualBlock<T>> hf_block;
  Conv2d<T> reduce;
  PatchEmbed<T> st_embed, fq_embed;
  CrossAttention<T> attention;
  FeedForward<T> ffn;
  LayerNorm<T> ffn_norm;

  static Cdam make(ParameterStore<T>& store, const std::string& name, const ModelConfig& cfg, std::size_t stage) {
    Cdam m;
    const std::size_t c = cfg.channels(stage);
    m.scale = cfg.scale(stage);
    m.mode = cfg.subband_mode;
    m.st_block = ResidualBlock<T>::make(store, name + ".st_block", c);
    m.lstm = ConvLstmCell<T>::make(store, name + ".lstm", c);
    std::size_t merged = 0;
    if (m.mode != SubbandMode::HighOnly) {
      m.ll_block = ResidualBlock<T>::make(store, name + ".ll_block", c);
      merged += c;
    }
    if (m.mode != SubbandMode::LowOnly) {
      m.hf_block = ResidualBlock<T>::make(store, name + ".hf_block", 3 * c);
      merged += 3 * c;
    }
    m.reduce = Conv2d<T>::make(store, name + ".reduce", merged, c, 3, 1, 1);
    const EmbedGeometry g = embed_geometry(m.scale, cfg.scale(cfg.depth - 1));
    m.st_embed = PatchEmbed<T>::make(store, name + ".st_embed", c, cfg.embed_dim, g);
    m.fq_embed = PatchEmbed<T>::make(store, name + ".fq_embed", c, cfg.embed_dim, g);
    m.attention = CrossAttention<T>::make(store, name + ".attn", cfg.embed_dim, cfg.heads, cfg.attention_scale);
    m.ffn = FeedForward<T>::make(store, name + ".ffn", cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
    m.ffn_norm = LayerNorm<T>::make(store, name + ".ffn_norm", cfg.embed_dim);
    return m;
  }

  /// Wavelet branch: subband residual blocks, channel reduce, then back up
  /// to the stage resolution.
  Tensor<T> frequency_branch(const Tensor<T>& f) const {
    const auto sb = wavelet::dwt2(f);
    std::vector<Tensor<T>> parts;
    if (ll_block) parts.push_back((*ll_block)(sb.ll));
    if (hf_block) parts.push_back((*hf_block)(ops::concat<T>({sb.lh, sb.hl, sb.hh}, 0)));
    return ops::bilinear_upsample2x(reduce(ops::concat(parts, 0)));
  }

  /// Returns [n, D] tokens and advances `state`.
  Tensor<T> operator()(const Tensor<T>& f, LstmState<T>& state, ForwardTrace* trace = nullptr) const {
    state = lstm.step(st_block(f), state);
    const Tensor<T> freq = frequency_branch(f);
    const Tensor<T> st_tokens = st_embed(state.hidden);
    const Tensor<T> fq_tokens = fq_embed(freq);
    const Tensor<T> attended = attention(st_tokens, fq_tokens, trace ? &trace->attention : nullptr, scale);
    const Tensor<T> fused = ops::add(attended, ops::add(st_tokens, fq_tokens));
    return ffn_norm(ops::add(fused, ffn(fused)));
  }
};

/// Wavelet-enhanced skip: spatial residual block plus an inverse transform
/// in which only the HH band is refined.
template <typename T>
struct Wsb {
  ResidualBlock<T> spatial;
  ResidualBlock<T> hh_block;

  static Wsb make(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
    return {ResidualBlock<T>::make(store, name + ".spatial", channels),
            ResidualBlock<T>::make(store, name + ".hh_block", channels)};
  }

  Tensor<T> operator()(const Tensor<T>& f) const {
    auto sb = wavelet::dwt2(f);
    sb.hh = hh_block(sb.hh);
    return ops::add(spatial(f), wavelet::iwt2(sb));
  }
};

/// Residual-guided decoder stage: (x + skip) -> 2x upsample -> residual
/// block -> 3x3 channel adjust.
template <typename T>
struct Rgd {
  ResidualBlock<T> block;
  Conv2d<T> adjust;

  static Rgd make(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout) {
    return {ResidualBlock<T>::make(store, name + ".block", cin),
            Conv2d<T>::make(store, name + ".adjust", cin, cout, 3, 1, 1)};
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& skip) const {
    return adjust(block(ops::bilinear_upsample2x(ops::add(x, skip))));
  }
};

/// Per-stage ConvLSTM memory carried between time steps.
template <typename T>
struct RecurrentState {
  std::vector<LstmState<T>> stages;

  bool empty() const { return stages.empty(); }
  void reset() { stages.clear(); }

  /// Drops the graph history, keeping values (truncated backpropagation).
  void detach() {
    for (auto& s : stages) {
      s.hidden = s.hidden.detach();
      s.cell = s.cell.detach();
    }
  }
};

// ---------------------------------------------------------------- network

template <typename T>
class MsfetModel {
 public:
  /// Builds the architecture for `config` and initializes every parameter
  /// deterministically from `seed`.
  static MsfetModel create(const ModelConfig& config, std::uint64_t seed) {
    MsfetModel m(config);
    m.initialize(seed);
    return m;
  }

  /// Architecture with all-zero parameters.
  static MsfetModel uninitialized(const ModelConfig& config) { return MsfetModel(config); }

  static MsfetModel from_weights(const WeightsFile& file) {
    MsfetModel m(ModelConfig::from_map(file.manifest));
    restore_weights(m.store_, file);
    return m;
  }

  static MsfetModel load(const std::string& path) { return from_weights(decode_weights(io::read_file(path))); }

  void save(const std::string& path) const { io::write_file(path, encode_weights(snapshot())); }

  WeightsFile snapshot() const { return snapshot_weights(store_, config_.to_map()); }

  MsfetModel(MsfetModel&&) noexcept = default;
  MsfetModel& operator=(MsfetModel&&) noexcept = default;
  MsfetModel(const MsfetModel&) = delete;
  MsfetModel& operator=(const MsfetModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& weights() { return store_; }
  const ParameterStore<T>& weights() const { return store_; }
  std::size_t parameter_count() const { return store_.count_values(); }

  /// He-style uniform init with bound 1/sqrt(fan_in); zero biases; ConvLSTM
  /// forget-gate bias 1; LayerNorm gamma 1.
  void initialize(std::uint64_t seed) {
    for (auto& p : store_.params()) {
      auto rng = parameter_rng(seed, p.name);
      auto data = p.tensor.mutable_data();
      const std::string& n = p.name;
      auto ends_with = [&](std::string_view suffix) {
        return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
      };
      if (ends_with(".gamma")) {
        std::fill(data.begin(), data.end(), T(1));
      } else if (ends_with(".beta") || ends_with(".bias")) {
        std::fill(data.begin(), data.end(), T(0));
        if (ends_with(".gates.bias")) {
          const std::size_t c = data.size() / 4;
          std::fill(data.begin() + static_cast<std::ptrdiff_t>(c), data.begin() + static_cast<std::ptrdiff_t>(2 * c),
                    T(1));
        }
      } else {
        const auto& s = p.tensor.shape();
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
        fill_uniform(p.tensor, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
      }
    }
  }

  /// Encoder features F_2, F_4, ... (post-LeakyReLU) for an already padded
  /// head output.
  std::vector<Tensor<T>> encode(const Tensor<T>& head_out, ForwardTrace* trace = nullptr) const {
    detail::BlockTimer timer(trace, "downconv");
    std::vector<Tensor<T>> feats;
    Tensor<T> x = head_out;
    for (const auto& d : down) {
      x = ops::leaky_relu(d(x), static_cast<T>(config_.leaky_slope));
      feats.push_back(x);
    }
    return feats;
  }

  /// Sum of the per-stage token matrices reshaped to [D, h', w'].
  static Tensor<T> aggregate(const std::vector<Tensor<T>>& tokens, std::size_t grid_h, std::size_t grid_w) {
    if (tokens.empty()) throw ArgumentError("aggregate: no token sets");
    Tensor<T> z = tokens.front();
    for (std::size_t i = 1; i < tokens.size(); ++i) z = ops::add(z, tokens[i]);
    if (z.dim(0) != grid_h * grid_w) {
      throw ShapeError("aggregate: " + std::to_string(z.dim(0)) + " tokens do not fill a " + std::to_string(grid_h) +
                       "x" + std::to_string(grid_w) + " grid");
    }
    return ops::reshape(ops::transpose(z), {z.dim(1), grid_h, grid_w});
  }

  /// One reconstruction step. `voxel` is [B,H,W]; returns [1,H,W].
  Tensor<T> forward(const Tensor<T>& voxel, RecurrentState<T>& state, ForwardTrace* trace = nullptr) const {
    if (voxel.rank() != 3) throw ShapeError("model_forward: voxel must be [B,H,W], got " + shape_str(voxel.shape()));
    if (voxel.dim(0) != config_.bins) {
      throw ConfigError("model_forward: voxel has " + std::to_string(voxel.dim(0)) + " bins, model expects " +
                        std::to_string(config_.bins));
    }
    const std::size_t H = voxel.dim(1), W = voxel.dim(2);
    const std::size_t m = config_.pad_multiple();
    const std::size_t Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
    Tensor<T> x = (Hp == H && Wp == W) ? voxel : ops::pad_reflect(voxel, Hp - H, Wp - W);

    Tensor<T> h0;
    {
      detail::BlockTimer timer(trace, "head");
      h0 = head(x);
    }
    const auto feats = encode(h0, trace);
    prepare_state(state, feats);

    std::vector<Tensor<T>> tokens;
    for (std::size_t s = 0; s < cdams.size(); ++s) {
      detail::BlockTimer timer(trace, "cdam." + std::to_string(config_.scale(s)));
      tokens.push_back(cdams[s](feats[s], state.stages[s], trace));
    }
    const std::size_t gh = Hp / config_.scale(config_.depth - 1);
    const std::size_t gw = Wp / config_.scale(config_.depth - 1);
    Tensor<T> y;
    {
      detail::BlockTimer timer(trace, "aggregate");
      y = aggregate(tokens, gh, gw);
      if (project) y = (*project)(y);
    }
    for (std::size_t s = cdams.size(); s-- > 0;) {
      Tensor<T> skip;
      {
        detail::BlockTimer timer(trace, "wsb." + std::to_string(config_.scale(s)));
        skip = wsbs[s](feats[s]);
      }
      detail::BlockTimer timer(trace, "rgd." + std::to_string(config_.scale(s)));
      y = rgds[s](y, skip);
    }
    Tensor<T> out;
    {
      detail::BlockTimer timer(trace, "predict");
      out = predict(y);
    }
    return (Hp == H && Wp == W) ? out : ops::crop(out, H, W);
  }

  Tensor<T> forward(const events::VoxelGrid& grid, RecurrentState<T>& state, ForwardTrace* trace = nullptr) const {
    return forward(voxel_tensor<T>(grid), state, trace);
  }

  template <typename U>
  static Tensor<U> voxel_tensor(const events::VoxelGrid& grid) {
    std::vector<U> v(grid.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(grid.values[i]);
    return Tensor<U>::from({grid.bins, grid.height, grid.width}, std::move(v));
  }

  // Blocks are public so tests can drive them in isolation.
  Conv2d<T> head;
  std::vector<Conv2d<T>> down;
  std::vector<Cdam<T>> cdams;
  std::optional<Conv2d<T>> project;
  std::vector<Wsb<T>> wsbs;
  std::vector<Rgd<T>> rgds;
  Conv2d<T> predict;

 private:
  explicit MsfetModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const auto& c = config_;
    head = Conv2d<T>::make(store_, "head", c.bins, c.base_channels, 3, 1, 1);
    std::size_t prev = c.base_channels;
    for (std::size_t s = 0; s < c.depth; ++s) {
      down.push_back(Conv2d<T>::make(store_, "down." + std::to_string(s), prev, c.channels(s), 3, 2, 1));
      prev = c.channels(s);
    }
    for (std::size_t s = 0; s < c.depth; ++s) {
      cdams.push_back(Cdam<T>::make(store_, "cdam." + std::to_string(s), c, s));
    }
    const std::size_t deepest = c.channels(c.depth - 1);
    if (c.embed_dim != deepest) {
      project = Conv2d<T>::make(store_, "project", c.embed_dim, deepest, 1, 1, 0);
    }
    for (std::size_t s = 0; s < c.depth; ++s) {
      wsbs.push_back(Wsb<T>::make(store_, "wsb." + std::to_string(s), c.channels(s)));
    }
    for (std::size_t s = 0; s < c.depth; ++s) {
      rgds.push_back(Rgd<T>::make(store_, "rgd." + std::to_string(s), c.channels(s), c.channels(s) / 2));
    }
    predict = Conv2d<T>::make(store_, "predict", c.base_channels, 1, 1, 1, 0);
  }

  void prepare_state(RecurrentState<T>& state, const std::vector<Tensor<T>>& feats) const {
    if (state.empty()) {
      for (const auto& f : feats) state.stages.push_back({Tensor<T>::zeros(f.shape()), Tensor<T>::zeros(f.shape())});
      return;
    }
    if (state.stages.size() != feats.size()) throw ShapeError("recurrent state depth does not match the model");
    for (std::size_t s = 0; s < feats.size(); ++s) {
      if (state.stages[s].hidden.shape() != feats[s].shape()) {
        throw ShapeError("recurrent state " + shape_str(state.stages[s].hidden.shape()) +
                         " does not match stage features " + shape_str(feats[s].shape()) + "; reset the state first");
      }
    }
  }

  ModelConfig config_;
  ParameterStore<T> store_;
};

template <typename T>
MsfetModel<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
  return MsfetModel<T>::create(config, seed);
}

}  // namespace msfet::model
