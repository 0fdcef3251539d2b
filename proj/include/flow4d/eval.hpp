#pragma once

// Scene-flow metrics and the analytic FLOP counter.

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flow4d/geom.hpp"
#include "flow4d/nn.hpp"
#include "flow4d/sparse.hpp"

namespace flow4d {

namespace detail {

inline void check_aligned(const Matrix<float>& pred, const Matrix<float>& gt, std::size_t n_other) {
  if (!pred.same_shape(gt) || pred.cols != 3 || gt.rows != n_other) {
    throw std::invalid_argument("metrics: predictions, ground truth and labels must be row-aligned N x 3");
  }
}

inline double epe(const Matrix<float>& pred, const Matrix<float>& gt, std::size_t i) {
  double s = 0;
  for (int c = 0; c < 3; ++c) {
    const double d = static_cast<double>(pred(i, c)) - gt(i, c);
    s += d * d;
  }
  return std::sqrt(s);
}

inline double norm3(const Matrix<float>& m, std::size_t i) {
  double s = 0;
  for (int c = 0; c < 3; ++c) s += static_cast<double>(m(i, c)) * m(i, c);
  return std::sqrt(s);
}

// mean of a subset; empty subsets yield nullopt
struct MeanAcc {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> mean() const { return n ? std::optional<double>(sum / n) : std::nullopt; }
};

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Three-way EPE

struct ThreeWayResult {
  std::optional<double> fd, bs, fs;  // nullopt: no points in that category
  double avg = 0;                    // mean over non-empty categories
  std::size_t n_fd = 0, n_bs = 0, n_fs = 0;
};

/// Dynamic iff gt_speed >= 0.5 m/s; foreground iff class_id != 0.
/// Dynamic background points belong to none of the three categories.
inline ThreeWayResult three_way_epe(const Matrix<float>& pred, const Matrix<float>& gt,
                                   const std::vector<uint8_t>& class_id, const std::vector<float>& gt_speed) {
  detail::check_aligned(pred, gt, class_id.size());
  if (gt_speed.size() != gt.rows) throw std::invalid_argument("metrics: gt_speed row mismatch");
  detail::MeanAcc fd, bs, fs;
  for (std::size_t i = 0; i < gt.rows; ++i) {
    const bool dynamic = gt_speed[i] >= kDynamicSpeed;
    const bool fg = class_id[i] != 0;
    const double e = detail::epe(pred, gt, i);
    if (fg && dynamic) fd.add(e);
    else if (fg) fs.add(e);
    else if (!dynamic) bs.add(e);
  }
  ThreeWayResult r;
  r.fd = fd.mean();
  r.bs = bs.mean();
  r.fs = fs.mean();
  r.n_fd = fd.n;
  r.n_bs = bs.n;
  r.n_fs = fs.n;
  detail::MeanAcc avg;
  for (const auto& v : {r.fd, r.bs, r.fs}) {
    if (v) avg.add(*v);
  }
  r.avg = avg.mean().value_or(0.0);
  return r;
}

// ---------------------------------------------------------------------------
// Bucket-normalized EPE

struct BucketConfig {
  double start = 0.4;   // m/s; slower points are static
  double width = 0.4;   // m/s per bucket
  double dt = kSweepInterval;
};

struct BucketResult {
  // classes 1..4 (car, other-vehicle, pedestrian, wheeled-vru); nullopt when
  // the class has no dynamic points
  std::array<std::optional<double>, 4> per_class;
  std::optional<double> mean_dynamic;
  std::optional<double> mean_static;
};

/// Per class, dynamic points are bucketed by speed; a bucket scores its mean
/// EPE divided by its mean displacement (mean speed * dt). A class scores the
/// mean of its non-empty buckets. The static score is the plain mean EPE of
/// every point slower than `start`.
inline BucketResult bucket_normalized_epe(const Matrix<float>& pred, const Matrix<float>& gt,
                                          const std::vector<uint8_t>& class_id, const std::vector<float>& gt_speed,
                                          const BucketConfig& cfg = {}) {
  detail::check_aligned(pred, gt, class_id.size());
  if (gt_speed.size() != gt.rows) throw std::invalid_argument("metrics: gt_speed row mismatch");
  std::array<std::map<int64_t, std::pair<detail::MeanAcc, detail::MeanAcc>>, 4> buckets;  // (epe, speed)
  detail::MeanAcc stat;
  for (std::size_t i = 0; i < gt.rows; ++i) {
    const double e = detail::epe(pred, gt, i);
    const double s = gt_speed[i];
    if (s < cfg.start) {
      stat.add(e);
      continue;
    }
    if (class_id[i] == 0) continue;
    const auto b = static_cast<int64_t>(std::floor((s - cfg.start) / cfg.width));
    auto& acc = buckets[class_id[i] - 1][b];
    acc.first.add(e);
    acc.second.add(s);
  }
  BucketResult r;
  detail::MeanAcc dyn;
  for (int c = 0; c < 4; ++c) {
    detail::MeanAcc cls;
    for (const auto& [b, acc] : buckets[c]) {
      const double disp = *acc.second.mean() * cfg.dt;
      cls.add(*acc.first.mean() / disp);
    }
    r.per_class[c] = cls.mean();
    if (r.per_class[c]) dyn.add(*r.per_class[c]);
  }
  r.mean_dynamic = dyn.mean();
  r.mean_static = stat.mean();
  return r;
}

// ---------------------------------------------------------------------------
// Dynamic IoU

/// Each point is dynamic iff its flow magnitude / dt >= 0.5 m/s: predictions
/// by their predicted vector, ground truth by gt_speed. 1 when both sets are
/// empty.
inline double dynamic_iou(const Matrix<float>& pred, const Matrix<float>& gt, const std::vector<float>& gt_speed) {
  detail::check_aligned(pred, gt, gt_speed.size());
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.rows; ++i) {
    const bool p = detail::norm3(pred, i) / kSweepInterval >= kDynamicSpeed;
    const bool g = gt_speed[i] >= kDynamicSpeed;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Plain mean EPE over dynamic (>= 0.5 m/s) and static points.
struct EpeSummary {
  std::optional<double> mean_dynamic;
  std::optional<double> mean_static;
  std::size_t n_dynamic = 0, n_static = 0;
};

inline EpeSummary epe_summary(const Matrix<float>& pred, const Matrix<float>& gt, const std::vector<float>& gt_speed) {
  detail::check_aligned(pred, gt, gt_speed.size());
  detail::MeanAcc dyn, stat;
  for (std::size_t i = 0; i < gt.rows; ++i) {
    (gt_speed[i] >= kDynamicSpeed ? dyn : stat).add(detail::epe(pred, gt, i));
  }
  return {dyn.mean(), stat.mean(), dyn.n, stat.n};
}

inline nlohmann::json metrics_report(const Matrix<float>& pred, const Scene& scene) {
  const auto tw = three_way_epe(pred, scene.gt_motion, scene.class_id, scene.gt_speed);
  const auto bk = bucket_normalized_epe(pred, scene.gt_motion, scene.class_id, scene.gt_speed);
  const auto es = epe_summary(pred, scene.gt_motion, scene.gt_speed);
  using detail::opt_json;
  nlohmann::json j;
  j["three_way"] = {{"fd", opt_json(tw.fd)}, {"bs", opt_json(tw.bs)}, {"fs", opt_json(tw.fs)}, {"avg", tw.avg},
                    {"counts", {{"fd", tw.n_fd}, {"bs", tw.n_bs}, {"fs", tw.n_fs}}}};
  j["bucketed"] = {{"car", opt_json(bk.per_class[0])},
                   {"other_vehicle", opt_json(bk.per_class[1])},
                   {"pedestrian", opt_json(bk.per_class[2])},
                   {"wheeled_vru", opt_json(bk.per_class[3])},
                   {"mean_dynamic", opt_json(bk.mean_dynamic)},
                   {"mean_static", opt_json(bk.mean_static)}};
  j["dynamic_iou"] = dynamic_iou(pred, scene.gt_motion, scene.gt_speed);
  j["epe"] = {{"mean_dynamic", opt_json(es.mean_dynamic)}, {"mean_static", opt_json(es.mean_static)}};
  return j;
}

// ---------------------------------------------------------------------------
// FLOP counting

struct LayerFlops {
  std::string name;
  std::string op;  // conv | bn | relu
  int stage = 0;
  uint64_t flops = 0;
};

struct FlopReport {
  BlockKind kind = BlockKind::kStdbP;
  std::vector<LayerFlops> layers;
  uint64_t total = 0;

  std::map<int, uint64_t> per_stage() const {
    std::map<int, uint64_t> out;
    for (const auto& l : layers) out[l.stage] += l.flops;
    return out;
  }
};

/// Executor that walks the network wiring and counts, without running:
/// conv 2*Cin*Cout*pairs, BN 2 per element, ReLU 1 per element.
class FlopExec {
 public:
  using Value = ShapeValue;

  explicit FlopExec(FlopReport& rep) : rep_(rep) {}

  Value conv(const std::string& name, const Value& x, KernelShape k, std::size_t cout) {
    const uint64_t pairs = x.sites->count_pairs(k);
    push(name, "conv", 2ull * x.channels * cout * pairs);
    return {x.sites, cout, {}};
  }
  Value batch_norm(const std::string& name, const Value& x) {
    push(name, "bn", 2ull * x.sites->size() * x.channels);
    return x;
  }
  Value relu(const Value& x) {
    push(current_prefix_ + "relu", "relu", 1ull * x.sites->size() * x.channels);
    return x;
  }
  Value add(const Value& a, const Value&) { return a; }
  Value concat(const Value& a, const Value& b) { return {a.sites, a.channels + b.channels, {}}; }
  Value pool(const Value& x, Stride4 stride) {
    const PoolMap& pm = pools_.get(x.sites, stride);
    return {pm.coarse, x.channels, {}};
  }
  Value up(const Value& x, const Value& target, Stride4) { return {target.sites, x.channels, {}}; }
  std::size_t channels(const Value& x) const { return x.channels; }
  Coord4 dims(const Value& x) const { return x.sites->dims(); }
  std::size_t active(const Value& x) const { return x.sites->size(); }

 private:
  void push(const std::string& name, const char* op, uint64_t flops) {
    LayerFlops l;
    l.name = name;
    l.op = op;
    l.stage = stage_of(name);
    if (l.stage) last_stage_ = l.stage;
    else l.stage = last_stage_;
    l.flops = flops;
    if (op != std::string("relu")) current_prefix_ = name.substr(0, name.rfind('.') + 1);
    rep_.layers.push_back(std::move(l));
    rep_.total += flops;
  }
  static int stage_of(const std::string& name) {
    if (name.rfind("net.s", 0) != 0) return 0;
    return std::atoi(name.c_str() + 5);
  }

  FlopReport& rep_;
  PoolCache pools_;
  std::string current_prefix_;
  int last_stage_ = 0;
};

/// FLOPs of the voxel network on the given input sites.
inline FlopReport count_flops(const NetworkConfig& cfg, const std::shared_ptr<const CoordSet>& input) {
  cfg.validate();
  if (input->dims() != cfg.grid.dims4()) throw std::invalid_argument("count_flops: input dims differ from grid");
  FlopReport rep;
  rep.kind = cfg.block;
  FlopExec ex(rep);
  network_apply(ex, cfg, ShapeValue{input, cfg.input_channels(), {}});
  return rep;
}

}  // namespace flow4d
