#pragma once

#include <string>
#include <vector>

#include "msfet/event_core.hpp"
#include "msfet/losses.hpp"
#include "msfet/model.hpp"
#include "msfet/optim.hpp"
#include "msfet/serialize.hpp"
#include "msfet/synth.hpp"

namespace msfet::train {

/// Model-ready view of a synthetic sequence. voxels[i] covers the events
/// before frames[i]; flows[i] carries frames[i] to frames[i + 1].
template <typename T>
struct TrainingSequence {
  std::vector<Tensor<T>> voxels;
  std::vector<Tensor<T>> frames;
  std::vector<Tensor<T>> flows;

  std::size_t size() const { return voxels.size(); }
};

template <typename T>
TrainingSequence<T> make_training_sequence(const synth::SyntheticSequence& seq, std::size_t bins) {
  if (seq.frames.size() < 2) throw ArgumentError("training sequence needs at least two frames");
  const auto groups = events::group_by_frames(seq.events, seq.frame_times);
  TrainingSequence<T> out;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& sensor = seq.events.sensor;
    out.voxels.push_back(
        model::MsfetModel<T>::template voxel_tensor<T>(events::encode_voxel(groups[k], bins, sensor.height, sensor.width)));
    out.frames.push_back(synth::to_tensor<T>(seq.frames[k + 1]));
    if (k + 1 < groups.size()) out.flows.push_back(synth::to_tensor<T>(seq.flows[k + 1]));
  }
  return out;
}

struct TrainOptions {
  std::size_t steps = 300;
  /// Time steps per truncated unroll.
  std::size_t unroll = 8;
  /// Shift of the unroll window between steps; 0 keeps it fixed.
  std::size_t window_stride = 0;
  AdamOptions adam;
};

struct StepRecord {
  std::size_t step = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double temporal = 0.0;
};

inline std::string loss_csv_header() { return "step,total,reconstruction,temporal\n"; }

inline std::string loss_csv_row(const StepRecord& r) {
  return std::to_string(r.step) + "," + metrics::format_metric(r.total) + "," +
         metrics::format_metric(r.reconstruction) + "," + metrics::format_metric(r.temporal) + "\n";
}

/// Runs the model over `voxels` from a fresh state without recording a graph.
template <typename T>
std::vector<Tensor<T>> reconstruct(const model::MsfetModel<T>& net, const std::vector<Tensor<T>>& voxels) {
  NoGradGuard guard;
  model::RecurrentState<T> state;
  std::vector<Tensor<T>> out;
  out.reserve(voxels.size());
  for (const auto& v : voxels) out.push_back(net.forward(v, state));
  return out;
}

template <typename T>
class Trainer {
 public:
  Trainer(model::MsfetModel<T>& net, losses::LossConfig loss, TrainOptions opts)
      : net_(net), loss_(std::move(loss)), opts_(opts), adam_(opts.adam), distance_(losses::make_distance<T>(loss_.distance)) {
    if (opts_.unroll == 0) throw ConfigError("train.unroll must be positive");
    loss_.seq_len = std::max(loss_.seq_len, loss_.tc_start);
    loss_.validate();
  }

  Adam<T>& optimizer() { return adam_; }
  std::size_t steps_done() const { return static_cast<std::size_t>(adam_.step_count()); }

  /// First index of the unroll window used by the next step.
  std::size_t window_start(std::size_t sequence_length) const {
    const std::size_t span = sequence_length - std::min(opts_.unroll, sequence_length) + 1;
    return (steps_done() * opts_.window_stride) % span;
  }

  /// One forward/backward/Adam update over an unroll window.
  StepRecord step(const TrainingSequence<T>& seq) {
    if (seq.size() == 0) throw ArgumentError("train: empty sequence");
    const std::size_t len = std::min(opts_.unroll, seq.size());
    const std::size_t start = window_start(seq.size());
    net_.weights().zero_grad();
    model::RecurrentState<T> state;
    std::vector<Tensor<T>> recon, gt, flows;
    for (std::size_t i = start; i < start + len; ++i) {
      recon.push_back(net_.forward(seq.voxels[i], state));
      gt.push_back(seq.frames[i]);
      if (i + 1 < start + len) flows.push_back(seq.flows[i]);
    }
    auto terms = losses::total_loss_terms(recon, gt, flows, loss_, distance_);
    backward(terms.total);
    adam_.step(net_.weights().params());
    return {steps_done(), static_cast<double>(terms.total.item()), terms.reconstruction, terms.temporal};
  }

  /// Moments stored as `m.<name>` / `v.<name>` entries with the step count
  /// in the manifest.
  WeightsFile optimizer_snapshot() const {
    WeightsFile f;
    const auto st = adam_.state();
    f.manifest["step"] = std::to_string(st.step);
    const auto& params = net_.weights().params();
    for (std::size_t p = 0; p < params.size() && p < st.m.size(); ++p) {
      if (st.m[p].empty()) continue;
      for (const char* kind : {"m", "v"}) {
        const auto& src = kind[0] == 'm' ? st.m[p] : st.v[p];
        f.entries.push_back({std::string(kind) + "." + params[p].name, params[p].tensor.shape(),
                             std::vector<float>(src.begin(), src.end())});
      }
    }
    return f;
  }

  void restore_optimizer(const WeightsFile& f) {
    typename Adam<T>::State st;
    auto it = f.manifest.find("step");
    if (it == f.manifest.end() || !events::detail::parse_number(it->second, st.step)) {
      throw ParseError("optimizer state lacks a step count");
    }
    std::map<std::string, const WeightsFile::Entry*> by_name;
    for (const auto& e : f.entries) by_name[e.name] = &e;
    const auto& params = net_.weights().params();
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto m = by_name.find("m." + params[p].name), v = by_name.find("v." + params[p].name);
      if (m == by_name.end() || v == by_name.end()) continue;
      if (m->second->values.size() != params[p].tensor.numel()) {
        throw ShapeError("optimizer state for '" + params[p].name + "' has the wrong size");
      }
      st.m[p].assign(m->second->values.begin(), m->second->values.end());
      st.v[p].assign(v->second->values.begin(), v->second->values.end());
    }
    adam_.load_state(std::move(st));
  }

 private:
  model::MsfetModel<T>& net_;
  losses::LossConfig loss_;
  TrainOptions opts_;
  Adam<T> adam_;
  losses::DistanceFn<T> distance_;
};

}  // namespace msfet::train
