#pragma once

// Speed-binned flow loss, the training loop and checkpoint helpers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include "flow4d/autodiff.hpp"
#include "flow4d/eval.hpp"
#include "flow4d/nn.hpp"

namespace flow4d {

struct LossConfig {
  // bin b holds speeds in [edges[b-1], edges[b]); the last bin is open
  std::vector<double> speed_bin_edges{0.05, 0.5};
  std::vector<double> bin_weights{1.0, 1.0, 1.0};

  std::size_t num_bins() const { return speed_bin_edges.size() + 1; }

  std::size_t bin_of(double speed) const {
    return static_cast<std::size_t>(std::upper_bound(speed_bin_edges.begin(), speed_bin_edges.end(), speed) -
                                    speed_bin_edges.begin());
  }

  void validate() const {
    for (std::size_t i = 1; i < speed_bin_edges.size(); ++i) {
      if (!(speed_bin_edges[i] > speed_bin_edges[i - 1])) throw std::invalid_argument("loss bin edges must increase");
    }
    if (bin_weights.size() != num_bins()) throw std::invalid_argument("need one loss weight per speed bin");
    for (double w : bin_weights) {
      if (!(w > 0)) throw std::invalid_argument("loss weights must be positive");
    }
  }
};

namespace ops {

/// Sum over non-empty speed bins of weight * mean point error, divided by the
/// sum of those weights. Zero (with zero gradient) for no points. At e = 0 the
/// subgradient 0 is used.
template <typename T>
Var flow_loss(Tape<T>& tape, Var pred, const Matrix<T>& gt, const std::vector<float>& gt_speed,
              const LossConfig& cfg = {}) {
  cfg.validate();
  const Matrix<T>& p = tape.value(pred);
  if (p.cols != 3 || !p.same_shape(gt) || gt_speed.size() != p.rows) {
    throw std::invalid_argument("flow_loss: pred " + shape_str(p) + ", gt " + shape_str(gt) + " and " +
                                std::to_string(gt_speed.size()) + " speeds are not aligned");
  }
  const std::size_t n = p.rows, nb = cfg.num_bins();
  std::vector<std::size_t> bin(n);
  std::vector<std::size_t> count(nb, 0);
  for (std::size_t i = 0; i < n; ++i) {
    bin[i] = cfg.bin_of(gt_speed[i]);
    ++count[bin[i]];
  }
  double wsum = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b]) wsum += cfg.bin_weights[b];
  }
  // coefficient of each point's error in the loss
  std::vector<double> coef(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b]) coef[b] = cfg.bin_weights[b] / (wsum * static_cast<double>(count[b]));
  }
  Matrix<T> err(n, 1);
  std::vector<double> bin_sum(nb, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(p(i, c)) - static_cast<double>(gt(i, c));
      s += d * d;
    }
    err(i, 0) = static_cast<T>(std::sqrt(s));
    bin_sum[bin[i]] += std::sqrt(s);
  }
  double loss = 0;
  for (std::size_t b = 0; b < nb; ++b) loss += coef[b] * bin_sum[b];
  return tape.record(Matrix<T>(1, 1, static_cast<T>(loss)), {pred},
                     [pred, gt, err = std::move(err), bin = std::move(bin), coef = std::move(coef),
                      self = int32_t(tape.size())](Tape<T>& t) {
                       const T g = t.grad(Var{self})(0, 0);
                       const Matrix<T>& pv = t.value(pred);
                       Matrix<T>& gp = t.grad(pred);
                       for (std::size_t i = 0; i < pv.rows; ++i) {
                         const T e = err(i, 0);
                         if (e == T(0)) continue;
                         const T k = g * static_cast<T>(coef[bin[i]]) / e;
                         for (int c = 0; c < 3; ++c) gp(i, c) += k * (pv(i, c) - gt(i, c));
                       }
                     });
}

}  // namespace ops

/// Plain evaluation of the loss.
template <typename T>
double flow_loss(const Matrix<T>& pred, const Matrix<T>& gt, const std::vector<float>& gt_speed,
                 const LossConfig& cfg = {}) {
  Tape<T> tape(false);
  const Var l = ops::flow_loss(tape, tape.constant(pred), gt, gt_speed, cfg);
  return static_cast<double>(tape.value(l)(0, 0));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 15;
  AdamConfig adam;
  uint64_t seed = 0;
  // stop after this many optimizer steps (0: run all epochs)
  int64_t max_steps = 0;
  // scenes per forward, stacked along t so BN statistics span the batch
  int batch_size = 1;
  // batches whose gradients are summed per optimizer step
  int accumulate = 1;
  // validation every n epochs and after the last one (0: only after the last)
  int eval_every = 1;
  LossConfig loss;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (accumulate < 1 || batch_size < 1) throw std::invalid_argument("accumulate and batch_size must be >= 1");
    if (max_steps < 0 || eval_every < 0) throw std::invalid_argument("max_steps and eval_every must be >= 0");
    adam.validate();
    loss.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;  // mean step loss over the epoch
  std::optional<double> mean_dynamic_epe;
  std::optional<double> mean_static_epe;
};

struct EvalSummary {
  std::optional<double> mean_dynamic_epe;
  std::optional<double> mean_static_epe;
  double dynamic_iou = 0;  // mean over scenes
};

template <typename T>
struct TrainResult {
  ParamStore<T> store;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;  // loss of every scene visit, in order
};

/// Ground truth of the in-range points of sweep t, in head-output order.
template <typename T>
struct FrameTargets {
  Matrix<T> motion;
  std::vector<float> speed;
};

template <typename T>
FrameTargets<T> frame_targets(const Scene& scene, const PreparedFrame<T>& frame) {
  const auto& in_range = frame.map_t().in_range;
  FrameTargets<T> out;
  out.motion = Matrix<T>(in_range.size(), 3);
  out.speed.resize(in_range.size());
  for (std::size_t r = 0; r < in_range.size(); ++r) {
    for (int c = 0; c < 3; ++c) out.motion(r, c) = static_cast<T>(scene.gt_motion(in_range[r], c));
    out.speed[r] = scene.gt_speed[in_range[r]];
  }
  return out;
}

/// Point-weighted EPE over all scenes (inference mode), and mean dynamic IoU.
template <typename T>
EvalSummary evaluate_scenes(ParamStore<T>& store, const NetworkConfig& cfg, const std::vector<Scene>& scenes) {
  double dyn = 0, stat = 0, iou = 0;
  std::size_t nd = 0, ns = 0;
  for (const auto& s : scenes) {
    const auto pred = predict_motion(store, cfg, s);
    const auto e = epe_summary(pred, s.gt_motion, s.gt_speed);
    if (e.mean_dynamic) dyn += *e.mean_dynamic * e.n_dynamic;
    if (e.mean_static) stat += *e.mean_static * e.n_static;
    nd += e.n_dynamic;
    ns += e.n_static;
    iou += dynamic_iou(pred, s.gt_motion, s.gt_speed);
  }
  EvalSummary out;
  if (nd) out.mean_dynamic_epe = dyn / nd;
  if (ns) out.mean_static_epe = stat / ns;
  out.dynamic_iou = scenes.empty() ? 0.0 : iou / scenes.size();
  return out;
}

/// Adam on one batch per step (or `accumulate` batches), seeded shuffle per
/// epoch. Validation uses `val` when non-empty, the training scenes otherwise.
/// Deterministic for a fixed seed and thread count.
template <typename T>
TrainResult<T> train_loop(const std::vector<Scene>& data, const NetworkConfig& net, const TrainConfig& tc,
                          const std::vector<Scene>& val = {}, std::optional<ParamStore<T>> init = std::nullopt,
                          const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  net.validate();
  tc.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: no training scenes");
  for (const auto& s : data) s.validate();

  TrainResult<T> res{init ? std::move(*init) : init_params<T>(net, tc.seed), {}, {}};
  ParamStore<T>& store = res.store;
  std::vector<PreparedFrame<T>> frames;
  std::vector<FrameTargets<T>> targets;
  frames.reserve(data.size());
  for (const auto& s : data) {
    frames.push_back(prepare_frame<T>(s, net.grid));
    targets.push_back(frame_targets(s, frames.back()));
  }
  const auto& val_scenes = val.empty() ? data : val;
  const std::size_t batch = static_cast<std::size_t>(tc.batch_size);
  constexpr std::size_t kBatchCache = 64;
  std::map<std::vector<std::size_t>, PreparedBatch<T>> batches;

  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  int64_t steps = 0;
  int pending = 0;
  bool done = false;
  store.zero_grad();
  for (int epoch = 1; epoch <= tc.epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t visits = 0;
    for (std::size_t first = 0; first < order.size(); first += batch) {
      std::vector<std::size_t> members(order.begin() + first, order.begin() + std::min(order.size(), first + batch));
      Tape<T> tape;
      Var loss;
      std::vector<double> lvs;
      if (batch == 1) {
        const std::size_t k = members[0];
        const auto out = model_forward(tape, store, net, frames[k]);
        loss = ops::flow_loss(tape, out.motion, targets[k].motion, targets[k].speed, tc.loss);
        lvs.push_back(static_cast<double>(tape.value(loss)(0, 0)));
      } else {
        // sorted so a composition maps to one cache entry
        std::sort(members.begin(), members.end());
        auto it = batches.find(members);
        if (it == batches.end()) {
          std::vector<const PreparedFrame<T>*> ptrs;
          for (std::size_t k : members) ptrs.push_back(&frames[k]);
          if (batches.size() >= kBatchCache) batches.clear();
          it = batches.emplace(members, prepare_batch(ptrs, net)).first;
        }
        PreparedBatch<T>& pb = it->second;
        const auto out = batch_forward(tape, store, pb);
        std::vector<Var> parts;
        for (std::size_t b = 0; b < members.size(); ++b) {
          std::vector<int32_t> rows(pb.head_offset[b + 1] - pb.head_offset[b]);
          std::iota(rows.begin(), rows.end(), static_cast<int32_t>(pb.head_offset[b]));
          const auto& tg = targets[members[b]];
          parts.push_back(ops::flow_loss(tape, ops::gather_rows(tape, out.motion, std::move(rows)), tg.motion, tg.speed,
                                         tc.loss));
          lvs.push_back(static_cast<double>(tape.value(parts.back())(0, 0)));
        }
        loss = ops::scale(tape, ops::sum(tape, ops::concat_rows(tape, parts, 1)), static_cast<T>(1.0 / members.size()));
      }
      for (std::size_t b = 0; b < lvs.size(); ++b) {
        if (!std::isfinite(lvs[b])) {
          std::ostringstream msg;
          msg << "non-finite loss " << lvs[b] << " at epoch " << epoch << ", scene " << members[b] << ", step " << steps;
          throw std::runtime_error(msg.str());
        }
      }
      if (tc.accumulate > 1) loss = ops::scale(tape, loss, static_cast<T>(1.0 / tc.accumulate));
      tape.backward(loss);
      for (double lv : lvs) {
        res.step_losses.push_back(lv);
        loss_sum += lv;
        ++visits;
      }
      if (++pending == tc.accumulate) {
        adam_step(store, tc.adam);
        pending = 0;
        if (tc.max_steps && ++steps >= tc.max_steps) {
          done = true;
          break;
        }
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = visits ? loss_sum / visits : 0.0;
    const bool last = done || epoch == tc.epochs;
    if (last || (tc.eval_every && epoch % tc.eval_every == 0)) {
      const auto ev = evaluate_scenes(store, net, val_scenes);
      rec.mean_dynamic_epe = ev.mean_dynamic_epe;
      rec.mean_static_epe = ev.mean_static_epe;
    }
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (pending) {
    adam_step(store, tc.adam);
  }
  return res;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,loss,mean_dynamic_epe,mean_static_epe\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << r.loss << ',';
    if (r.mean_dynamic_epe) os << *r.mean_dynamic_epe;
    os << ',';
    if (r.mean_static_epe) os << *r.mean_static_epe;
    os << '\n';
  }
  return os.str();
}

/// Checkpoint with the network config stored in the header.
template <typename T>
void save_model(const std::filesystem::path& path, const ParamStore<T>& store, const NetworkConfig& net,
                const AdamConfig& adam) {
  save_checkpoint(path, store, adam, nlohmann::json{{"network", to_json(net)}});
}

template <typename T>
ParamStore<T> load_model(const std::filesystem::path& path, NetworkConfig& net, AdamConfig* adam = nullptr) {
  CheckpointInfo info;
  ParamStore<T> store = load_checkpoint<T>(path, &info);
  if (!info.extra.contains("network")) throw std::runtime_error(path.string() + ": checkpoint has no network config");
  net = network_config_from_json(info.extra["network"]);
  if (adam) *adam = info.adam;
  return store;
}

}  // namespace flow4d
