#pragma once

// Network building blocks: the 4D residual block, the three spatio-temporal
// decomposition blocks (STDB-B/P/D), the hourglass voxel network and the
// point head.
//
// Block and network wiring is written once, against an "executor" that
// decides what a layer does: TapeExec runs it, ParamInitExec creates its
// parameters, and eval::FlopExec counts its arithmetic. All three therefore
// see exactly the same layer sequence.

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flow4d/autodiff.hpp"
#include "flow4d/geom.hpp"
#include "flow4d/sparse.hpp"
#include "flow4d/voxelize.hpp"

namespace flow4d {

enum class BlockKind { kConv4D, kStdbB, kStdbP, kStdbD };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kConv4D: return "conv4d";
    case BlockKind::kStdbB: return "stdb_b";
    case BlockKind::kStdbP: return "stdb_p";
    case BlockKind::kStdbD: return "stdb_d";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "conv4d") return BlockKind::kConv4D;
  if (s == "stdb_b") return BlockKind::kStdbB;
  if (s == "stdb_p") return BlockKind::kStdbP;
  if (s == "stdb_d") return BlockKind::kStdbD;
  throw std::invalid_argument("unknown block kind '" + s + "' (expected conv4d|stdb_b|stdb_p|stdb_d)");
}

struct BlockConfig {
  BlockKind kind = BlockKind::kStdbP;
  std::size_t in_ch = 16;
  std::size_t set1_ch = 16;
  std::size_t set2_ch = 16;

  void validate() const {
    if (in_ch == 0 || set1_ch == 0 || set2_ch == 0) throw std::invalid_argument("block channels must be positive");
  }
};

enum class Resample { kNone, kPool, kUp };

struct StageConfig {
  int index = 0;
  std::vector<std::pair<std::size_t, std::size_t>> filters;  // (set1, set2) per block
  Resample resample = Resample::kNone;
  Stride4 stride{1, 1, 1, 1};
};

struct PointHeadConfig {
  std::size_t voxel_ch = 16;
  std::size_t point_ch = 16;
  std::size_t hidden = 32;
  std::size_t out = 3;
};

struct NetworkConfig {
  static constexpr int kSchemaVersion = 1;

  GridConfig grid;
  BlockKind block = BlockKind::kStdbP;
  VfeConfig vfe;
  std::vector<StageConfig> stages;
  PointHeadConfig head;

  /// The nine-stage hourglass with the paper's filter plan on the full
  /// 512x512x32x5 grid.
  static NetworkConfig table1(BlockKind kind = BlockKind::kStdbP) {
    NetworkConfig c;
    c.block = kind;
    const Stride4 s2221{2, 2, 2, 1}, s2211{2, 2, 1, 1};
    c.stages = {
        {1, {{16, 32}, {32, 32}}, Resample::kPool, s2221},
        {2, {{32, 64}, {64, 64}}, Resample::kPool, s2221},
        {3, {{64, 64}, {64, 64}}, Resample::kPool, s2221},
        {4, {{64, 64}, {64, 64}}, Resample::kPool, s2211},
        {5, {{64, 64}, {64, 64}}, Resample::kUp, s2211},
        {6, {{64, 64}}, Resample::kUp, s2221},
        {7, {{64, 64}}, Resample::kUp, s2221},
        {8, {{64, 64}}, Resample::kUp, s2221},
        {9, {{32, 16}}, Resample::kNone, {1, 1, 1, 1}},
    };
    return c;
  }

  /// Same stage plan on a smaller grid centred on the ego vehicle.
  static NetworkConfig scaled(Coord3 dims, int32_t num_timesteps = 5, BlockKind kind = BlockKind::kStdbP,
                              double voxel = 0.2) {
    NetworkConfig c = table1(kind);
    c.grid.dims = dims;
    c.grid.num_timesteps = num_timesteps;
    c.grid.voxel_size = {voxel, voxel, voxel};
    c.grid.origin = {-0.5 * dims[0] * voxel, -0.5 * dims[1] * voxel, -0.5 * dims[2] * voxel};
    return c;
  }

  std::size_t input_channels() const { return vfe.out_channels; }

  void validate() const;
};

// ---------------------------------------------------------------------------
// Static stage shapes

struct StageShape {
  int stage = 0;
  Coord4 block_dims{};   // resolution the stage's blocks run at
  Coord4 output_dims{};  // after the stage's pool / upsample
  std::size_t channels = 0;
  Resample resample = Resample::kNone;

  /// The shape reported per stage in the network table: the pooled shape for
  /// pooling stages, the block shape otherwise.
  Coord4 table_dims() const { return resample == Resample::kPool ? output_dims : block_dims; }
};

inline std::vector<StageShape> stage_shapes(const NetworkConfig& cfg) {
  std::vector<StageShape> out;
  std::vector<Coord4> skip_dims;
  Coord4 dims = cfg.grid.dims4();
  for (const auto& st : cfg.stages) {
    StageShape s;
    s.stage = st.index;
    s.block_dims = dims;
    s.channels = st.filters.empty() ? 0 : st.filters.back().second;
    s.resample = st.resample;
    if (st.resample == Resample::kPool) {
      skip_dims.push_back(dims);
      dims = pooled_dims(dims, st.stride);
    } else if (st.resample == Resample::kUp) {
      if (skip_dims.empty()) throw std::invalid_argument("stage " + std::to_string(st.index) + ": up without a pool");
      dims = skip_dims.back();
      skip_dims.pop_back();
    }
    s.output_dims = dims;
    out.push_back(s);
  }
  return out;
}

inline void NetworkConfig::validate() const {
  grid.validate();
  if (stages.empty()) throw std::invalid_argument("network has no stages");
  if (vfe.layers < 1) throw std::invalid_argument("vfe_layers must be >= 1");
  std::size_t ch = input_channels();
  std::vector<Stride4> pool_strides;
  for (const auto& st : stages) {
    if (st.filters.empty()) throw std::invalid_argument("stage " + std::to_string(st.index) + " has no blocks");
    if (st.stride[3] != 1) throw std::invalid_argument("the time axis is never strided");
    for (const auto& [a, b] : st.filters) {
      if (a == 0 || b == 0) throw std::invalid_argument("filters must be positive");
      ch = b;
    }
    if (st.resample == Resample::kPool) {
      check_stride(st.stride);
      pool_strides.push_back(st.stride);
    } else if (st.resample == Resample::kUp) {
      if (pool_strides.empty() || pool_strides.back() != st.stride) {
        throw std::invalid_argument("stage " + std::to_string(st.index) + ": up stride does not mirror a pool stride");
      }
      pool_strides.pop_back();
    }
  }
  if (!pool_strides.empty()) throw std::invalid_argument("every pool needs a matching up stage");
  if (ch != head.voxel_ch) throw std::invalid_argument("network output channels do not match the point head");
  if (head.point_ch != vfe.out_channels) throw std::invalid_argument("point head expects the VFE width");
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const NetworkConfig& c) {
  nlohmann::json j;
  j["schema_version"] = NetworkConfig::kSchemaVersion;
  j["block"] = to_string(c.block);
  j["grid"] = {{"origin", c.grid.origin},
               {"voxel_size", c.grid.voxel_size},
               {"dims", c.grid.dims},
               {"num_timesteps", c.grid.num_timesteps}};
  j["vfe"] = {{"layers", c.vfe.layers}, {"channels", c.vfe.out_channels}};
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& [a, b] : s.filters) f.push_back({a, b});
    stages.push_back({{"stage", s.index},
                      {"filters", f},
                      {"resample", s.resample == Resample::kPool ? "pool" : s.resample == Resample::kUp ? "up" : "none"},
                      {"stride", s.stride}});
  }
  j["stages"] = stages;
  j["point_head"] = {{"voxel_channels", c.head.voxel_ch},
                     {"point_channels", c.head.point_ch},
                     {"hidden", c.head.hidden},
                     {"out", c.head.out}};
  return j;
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  const int version = j.at("schema_version").get<int>();
  if (version != NetworkConfig::kSchemaVersion) {
    throw std::invalid_argument("unsupported config schema_version " + std::to_string(version));
  }
  NetworkConfig c;
  c.block = parse_block_kind(j.at("block").get<std::string>());
  const auto& g = j.at("grid");
  c.grid.origin = g.at("origin").get<std::array<double, 3>>();
  c.grid.voxel_size = g.at("voxel_size").get<std::array<double, 3>>();
  c.grid.dims = g.at("dims").get<Coord3>();
  c.grid.num_timesteps = g.at("num_timesteps").get<int32_t>();
  if (j.contains("vfe")) {
    c.vfe.layers = j["vfe"].value("layers", 1);
    c.vfe.out_channels = j["vfe"].value("channels", std::size_t{16});
  }
  for (const auto& s : j.at("stages")) {
    StageConfig st;
    st.index = s.at("stage").get<int>();
    for (const auto& f : s.at("filters")) st.filters.emplace_back(f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>());
    const auto r = s.at("resample").get<std::string>();
    if (r == "pool") st.resample = Resample::kPool;
    else if (r == "up") st.resample = Resample::kUp;
    else if (r == "none") st.resample = Resample::kNone;
    else throw std::invalid_argument("unknown resample '" + r + "'");
    st.stride = s.value("stride", Stride4{1, 1, 1, 1});
    c.stages.push_back(std::move(st));
  }
  if (j.contains("point_head")) {
    const auto& h = j["point_head"];
    c.head.voxel_ch = h.value("voxel_channels", std::size_t{16});
    c.head.point_ch = h.value("point_channels", std::size_t{16});
    c.head.hidden = h.value("hidden", std::size_t{32});
    c.head.out = h.value("out", std::size_t{3});
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Wiring

namespace detail {

template <class Exec>
typename Exec::Value conv_bn(Exec& ex, const std::string& name, const typename Exec::Value& x, KernelShape k,
                             std::size_t cout, bool relu) {
  auto h = ex.conv(name, x, k, cout);
  h = ex.batch_norm(name + ".bn", h);
  return relu ? ex.relu(h) : h;
}

template <class Exec>
typename Exec::Value residual(Exec& ex, const std::string& prefix, const typename Exec::Value& x, std::size_t cout) {
  if (ex.channels(x) == cout) return x;
  return ex.conv(prefix + ".proj", x, KernelShape::pointwise(), cout);
}

}  // namespace detail

/// One block. Coordinates are never changed. The last BN of every variant
/// feeds the residual sum, and ReLU follows the sum.
template <class Exec>
typename Exec::Value block_apply(Exec& ex, const std::string& prefix, const BlockConfig& cfg,
                                 const typename Exec::Value& x) {
  cfg.validate();
  if (ex.channels(x) != cfg.in_ch) {
    throw std::invalid_argument(prefix + ": expected " + std::to_string(cfg.in_ch) + " input channels, got " +
                                std::to_string(ex.channels(x)));
  }
  using detail::conv_bn;
  const std::size_t cx = cfg.set1_ch, cy = cfg.set2_ch;
  const auto S = KernelShape::spatial(), Tm = KernelShape::temporal(), F = KernelShape::full4d(),
             P = KernelShape::pointwise();
  typename Exec::Value h;
  switch (cfg.kind) {
    case BlockKind::kConv4D: {
      h = conv_bn(ex, prefix + ".conv1", x, F, cx, true);
      h = conv_bn(ex, prefix + ".conv2", h, F, cy, false);
      break;
    }
    case BlockKind::kStdbB: {
      h = conv_bn(ex, prefix + ".set1.spatial", x, S, cx, true);
      h = conv_bn(ex, prefix + ".set1.temporal", h, Tm, cx, true);
      h = conv_bn(ex, prefix + ".set2.spatial", h, S, cy, true);
      h = conv_bn(ex, prefix + ".set2.temporal", h, Tm, cy, false);
      break;
    }
    case BlockKind::kStdbP: {
      auto parallel_set = [&](const std::string& name, const typename Exec::Value& in, std::size_t c, bool last) {
        const auto s = conv_bn(ex, name + ".spatial", in, S, c, true);
        const auto t = conv_bn(ex, name + ".temporal", in, Tm, c, true);
        return conv_bn(ex, name + ".fuse", ex.concat(s, t), P, c, !last);
      };
      h = parallel_set(prefix + ".set1", x, cx, false);
      h = parallel_set(prefix + ".set2", h, cy, true);
      break;
    }
    case BlockKind::kStdbD: {
      auto a = conv_bn(ex, prefix + ".path_st.spatial", x, S, cx, true);
      a = conv_bn(ex, prefix + ".path_st.temporal", a, Tm, cy, true);
      auto b = conv_bn(ex, prefix + ".path_ts.temporal", x, Tm, cx, true);
      b = conv_bn(ex, prefix + ".path_ts.spatial", b, S, cy, true);
      h = conv_bn(ex, prefix + ".fuse", ex.concat(a, b), P, cy, false);
      break;
    }
  }
  return ex.relu(ex.add(h, detail::residual(ex, prefix, x, cy)));
}

struct StageTrace {
  int stage = 0;
  Coord4 block_dims{};
  Coord4 output_dims{};
  std::size_t channels = 0;
  std::size_t active_sites = 0;
};

/// Encoder stages run their blocks and pool, remembering their block output
/// as the skip for the matching decoder level. An up stage unpools onto the
/// most recent skip's sites; the following stage adds the skip (projected
/// 1x1x1x1 when widths differ) before its blocks.
template <class Exec>
typename Exec::Value network_apply(Exec& ex, const NetworkConfig& cfg, typename Exec::Value x,
                                   std::vector<StageTrace>* trace = nullptr) {
  std::vector<typename Exec::Value> skips;
  std::optional<typename Exec::Value> pending_skip;
  for (const auto& st : cfg.stages) {
    const std::string sp = "net.s" + std::to_string(st.index);
    if (pending_skip) {
      const auto skip = detail::residual(ex, sp + ".skip", *pending_skip, ex.channels(x));
      x = ex.add(x, skip);
      pending_skip.reset();
    }
    StageTrace tr;
    tr.stage = st.index;
    tr.block_dims = ex.dims(x);
    for (std::size_t b = 0; b < st.filters.size(); ++b) {
      const BlockConfig bc{cfg.block, ex.channels(x), st.filters[b].first, st.filters[b].second};
      x = block_apply(ex, sp + ".b" + std::to_string(b), bc, x);
    }
    tr.channels = ex.channels(x);
    tr.active_sites = ex.active(x);
    if (st.resample == Resample::kPool) {
      skips.push_back(x);
      x = ex.pool(x, st.stride);
    } else if (st.resample == Resample::kUp) {
      if (skips.empty()) throw std::invalid_argument(sp + ": up without a matching pool");
      x = ex.up(x, skips.back(), st.stride);
      pending_skip = skips.back();
      skips.pop_back();
    }
    tr.output_dims = ex.dims(x);
    if (trace) trace->push_back(tr);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Executors

/// Channel-and-sites only view of a layer output.
struct ShapeValue {
  std::shared_ptr<const CoordSet> sites;
  std::size_t channels = 0;
  Coord4 dims_override{};
};

template <typename T>
class ParamInitExec {
 public:
  using Value = ShapeValue;

  ParamInitExec(ParamStore<T>& store, std::mt19937_64& rng) : store_(store), rng_(rng) {}

  Value conv(const std::string& name, const Value& x, KernelShape k, std::size_t cout) {
    const std::size_t K = static_cast<std::size_t>(k.volume());
    store_.add(name + ".weight", kaiming<T>(rng_, K * x.channels, cout, K * x.channels));
    store_.add(name + ".bias", Matrix<T>(1, cout));
    return {x.sites, cout, x.dims_override};
  }
  Value batch_norm(const std::string& name, const Value& x) {
    add_batch_norm_params(store_, name, x.channels);
    return x;
  }
  Value relu(const Value& x) { return x; }
  Value add(const Value& a, const Value&) { return a; }
  Value concat(const Value& a, const Value& b) { return {a.sites, a.channels + b.channels, a.dims_override}; }
  Value pool(const Value& x, Stride4) { return x; }
  Value up(const Value& x, const Value&, Stride4) { return x; }
  std::size_t channels(const Value& x) const { return x.channels; }
  Coord4 dims(const Value& x) const { return x.dims_override; }
  std::size_t active(const Value&) const { return 0; }

 private:
  ParamStore<T>& store_;
  std::mt19937_64& rng_;
};

struct PoolCache {
  std::map<std::pair<const CoordSet*, Stride4>, PoolMap> maps;

  const PoolMap& get(const std::shared_ptr<const CoordSet>& fine, Stride4 stride) {
    auto key = std::make_pair(fine.get(), stride);
    auto it = maps.find(key);
    if (it == maps.end()) it = maps.emplace(key, build_pool_map(fine, stride)).first;
    return it->second;
  }
};

template <typename T>
struct SparseVar {
  std::shared_ptr<const CoordSet> sites;
  Var feats;
};

template <typename T>
class TapeExec {
 public:
  using Value = SparseVar<T>;

  TapeExec(Tape<T>& tape, ParamStore<T>& store, PoolCache* pools = nullptr)
      : tape_(tape), store_(store), pools_(pools ? pools : &own_pools_) {}

  Value conv(const std::string& name, const Value& x, KernelShape k, std::size_t cout) {
    const Var W = tape_.param(store_, name + ".weight");
    const Var b = tape_.param(store_, name + ".bias");
    const std::size_t K = static_cast<std::size_t>(k.volume());
    if (tape_.value(W).rows != K * channels(x) || tape_.value(W).cols != cout) {
      throw std::invalid_argument(name + ": weight " + shape_str(tape_.value(W)) + " does not match " +
                                  k.str() + " " + std::to_string(channels(x)) + "->" + std::to_string(cout));
    }
    return {x.sites, ops::sparse_conv(tape_, x.feats, W, b, x.sites->kernel_map(k))};
  }
  Value batch_norm(const std::string& name, const Value& x) {
    return {x.sites, ops::batch_norm(tape_, x.feats, store_, name)};
  }
  Value relu(const Value& x) { return {x.sites, ops::relu(tape_, x.feats)}; }
  Value add(const Value& a, const Value& b) {
    if (!a.sites->same_sites(*b.sites)) throw std::logic_error("add: operands live on different sites");
    return {a.sites, ops::add(tape_, a.feats, b.feats)};
  }
  Value concat(const Value& a, const Value& b) { return {a.sites, ops::concat_cols(tape_, a.feats, b.feats)}; }
  Value pool(const Value& x, Stride4 stride) {
    const PoolMap& pm = pools_->get(x.sites, stride);
    return {pm.coarse, ops::pool_down(tape_, x.feats, pm)};
  }
  Value up(const Value& coarse, const Value& target, Stride4 stride) {
    return {target.sites, ops::up_sample(tape_, coarse.feats, *coarse.sites, *target.sites, stride)};
  }
  std::size_t channels(const Value& x) const { return tape_.value(x.feats).cols; }
  Coord4 dims(const Value& x) const { return x.sites->dims(); }
  std::size_t active(const Value& x) const { return x.sites->size(); }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  PoolCache own_pools_;
  PoolCache* pools_;
};

// ---------------------------------------------------------------------------
// Parameters

inline constexpr double kHeadOutputGain = 0.1;

template <typename T>
void add_point_head_params(ParamStore<T>& store, const PointHeadConfig& h, std::mt19937_64& rng) {
  const std::size_t in = h.voxel_ch + h.point_ch;
  store.add("head.fc1.weight", kaiming<T>(rng, in, h.hidden, in));
  store.add("head.fc1.bias", Matrix<T>(1, h.hidden));
  // output layer starts small: the motion targets are a few cm per sweep
  Matrix<T> w2 = kaiming<T>(rng, h.hidden, h.out, h.hidden);
  for (auto& v : w2.data) v *= static_cast<T>(kHeadOutputGain);
  store.add("head.fc2.weight", std::move(w2));
  store.add("head.fc2.bias", Matrix<T>(1, h.out));
}

template <typename T>
void add_block_params(ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng) {
  ParamInitExec<T> ex(store, rng);
  block_apply(ex, prefix, cfg, ShapeValue{nullptr, cfg.in_ch, {}});
}

/// Seeded Kaiming-normal initialization of every parameter of the pipeline
/// (head output layer scaled by kHeadOutputGain).
template <typename T>
ParamStore<T> init_params(const NetworkConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  add_vfe_params(store, cfg.vfe, rng);
  ParamInitExec<T> ex(store, rng);
  network_apply(ex, cfg, ShapeValue{nullptr, cfg.input_channels(), {}});
  add_point_head_params(store, cfg.head, rng);
  return store;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
SparseVar<T> block_forward(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg,
                           const SparseVar<T>& x) {
  TapeExec<T> ex(tape, store);
  return block_apply(ex, prefix, cfg, x);
}

/// Runs the voxel network and checks every stage against the static shape
/// plan. Output: input sites, head.voxel_ch channels.
template <typename T>
SparseVar<T> network_forward(Tape<T>& tape, ParamStore<T>& store, const NetworkConfig& cfg, const SparseVar<T>& f4d,
                             PoolCache* pools = nullptr, std::vector<StageTrace>* trace = nullptr) {
  if (tape.value(f4d.feats).cols != cfg.input_channels()) {
    throw std::invalid_argument("network_forward: expected " + std::to_string(cfg.input_channels()) +
                                " input channels");
  }
  if (f4d.sites->dims() != cfg.grid.dims4()) throw std::invalid_argument("network_forward: input dims differ from grid");
  TapeExec<T> ex(tape, store, pools);
  std::vector<StageTrace> local;
  auto out = network_apply(ex, cfg, f4d, &local);
  const auto plan = stage_shapes(cfg);
  for (std::size_t s = 0; s < plan.size(); ++s) {
    if (plan[s].block_dims != local[s].block_dims || plan[s].output_dims != local[s].output_dims ||
        plan[s].channels != local[s].channels) {
      throw std::logic_error("stage " + std::to_string(plan[s].stage) + " deviates from its shape plan");
    }
  }
  if (trace) *trace = std::move(local);
  return out;
}

/// Per in-range point of sweep t: [voxel feature | initial point feature] ->
/// fc1 -> ReLU -> fc2.
template <typename T>
Var point_head(Tape<T>& tape, ParamStore<T>& store, Var voxel_feats, std::vector<int32_t> voxel_row_of_point,
               Var point_feats, std::vector<int32_t> point_row) {
  const std::size_t nv = tape.value(voxel_feats).rows;
  for (int32_t r : voxel_row_of_point) {
    if (r < 0 || static_cast<std::size_t>(r) >= nv) {
      throw std::logic_error("point_head: point maps to a voxel without features");
    }
  }
  if (voxel_row_of_point.size() != point_row.size()) throw std::invalid_argument("point_head: row count mismatch");
  const Var v = ops::gather_rows(tape, voxel_feats, std::move(voxel_row_of_point));
  const Var p = ops::gather_rows(tape, point_feats, std::move(point_row));
  Var h = ops::concat_cols(tape, v, p);
  h = ops::linear(tape, h, tape.param(store, "head.fc1.weight"), tape.param(store, "head.fc1.bias"));
  h = ops::relu(tape, h);
  return ops::linear(tape, h, tape.param(store, "head.fc2.weight"), tape.param(store, "head.fc2.bias"));
}

// ---------------------------------------------------------------------------
// Whole pipeline

/// Everything about a scene that does not depend on parameters: warped
/// sweeps, voxel maps, raw point features and the fused 4D sites. Reusable
/// across training steps.
template <typename T>
struct PreparedFrame {
  std::vector<PointVoxelMap> maps;           // per used sweep, oldest first
  Matrix<T> raw;                             // raw 9-features of all used sweeps, stacked
  std::vector<std::size_t> raw_offset;       // first raw row of each sweep
  std::shared_ptr<const CoordSet> sites;     // fused 4D sites
  std::vector<std::size_t> site_offset;      // first 4D row of each sweep
  std::size_t t_sweep = 0;                   // index of sweep t among the used sweeps
  std::size_t num_points_t = 0;              // all points of sweep t, in range or not
  PoolCache pools;

  const PointVoxelMap& map_t() const { return maps[t_sweep]; }
};

template <typename T>
PreparedFrame<T> prepare_frame(const Scene& scene, const GridConfig& grid) {
  grid.validate();
  const std::size_t n_used = static_cast<std::size_t>(grid.num_timesteps);
  if (n_used < 2) throw std::invalid_argument("need at least two timesteps (t and t+1)");
  if (scene.sweeps.size() < n_used) throw std::invalid_argument("scene has fewer sweeps than num_timesteps");
  const auto warped = warp_to_last(scene);
  const std::size_t first = scene.sweeps.size() - n_used;

  PreparedFrame<T> f;
  f.t_sweep = n_used - 2;
  f.num_points_t = scene.cloud_t().size();
  std::vector<Matrix<T>> raws;
  std::size_t rows = 0;
  for (std::size_t k = 0; k < n_used; ++k) {
    const PointCloud& cloud = warped[first + k];
    f.maps.push_back(assign_voxels(cloud, grid));
    raws.push_back(build_point_features<T>(cloud, f.maps.back(), grid));
    f.raw_offset.push_back(rows);
    rows += raws.back().rows;
  }
  f.raw = Matrix<T>(rows, kRawPointFeatures);
  for (std::size_t k = 0; k < n_used; ++k) {
    std::copy(raws[k].data.begin(), raws[k].data.end(), f.raw.data.begin() + f.raw_offset[k] * kRawPointFeatures);
  }
  std::vector<const std::vector<Coord3>*> coords;
  std::size_t site = 0;
  for (const auto& m : f.maps) {
    coords.push_back(&m.active_voxels);
    f.site_offset.push_back(site);
    site += m.num_voxels();
  }
  f.sites = fused_sites(coords, grid);
  return f;
}

template <typename T>
struct ModelOutput {
  Var motion;       // in-range points of sweep t x 3
  Var point_feats;  // VFE output of every used sweep's points, stacked
  SparseVar<T> voxel_out;
};

/// VFE on all sweeps (shared weights, one batch), voxel pooling, temporal
/// fusion and the voxel network. Fills point_feats and voxel_out.
template <typename T>
ModelOutput<T> voxel_forward(Tape<T>& tape, ParamStore<T>& store, const NetworkConfig& cfg, PreparedFrame<T>& frame,
                             std::vector<StageTrace>* trace = nullptr) {
  const Var raw = tape.constant(frame.raw);
  ModelOutput<T> out;
  out.point_feats = encode_vfe(tape, raw, store, cfg.vfe);

  // pool every sweep's points into its voxels; the stacked voxel rows are
  // exactly the fused tensor's rows
  auto groups = std::make_shared<ops::RowGroups>();
  for (std::size_t k = 0; k < frame.maps.size(); ++k) {
    const auto& m = *frame.maps[k].members;
    for (std::size_t g = 0; g < m.num_groups(); ++g) {
      for (int32_t i = m.offsets[g]; i < m.offsets[g + 1]; ++i) {
        groups->members.push_back(static_cast<int32_t>(frame.raw_offset[k]) + m.members[i]);
      }
      groups->offsets.push_back(static_cast<int32_t>(groups->members.size()));
    }
  }
  const Var f4d = ops::group_mean(tape, out.point_feats, groups);
  out.voxel_out = network_forward(tape, store, cfg, SparseVar<T>{frame.sites, f4d}, &frame.pools, trace);
  return out;
}

namespace detail {

// point head over the in-range points of the listed sweeps, in list order
template <typename T>
Var head_rows(Tape<T>& tape, ParamStore<T>& store, const PreparedFrame<T>& frame, const std::vector<std::size_t>& sweeps,
              const ModelOutput<T>& out) {
  std::vector<int32_t> vrow, prow;
  for (std::size_t k : sweeps) {
    const PointVoxelMap& m = frame.maps[k];
    for (std::size_t r = 0; r < m.num_in_range(); ++r) {
      vrow.push_back(static_cast<int32_t>(frame.site_offset[k]) + m.voxel_of_row[r]);
      prow.push_back(static_cast<int32_t>(frame.raw_offset[k] + r));
    }
  }
  return point_head(tape, store, out.voxel_out.feats, std::move(vrow), out.point_feats, std::move(prow));
}

}  // namespace detail

/// Time slice t of the voxel output and the point head. Sets out.motion.
template <typename T>
void head_forward(Tape<T>& tape, ParamStore<T>& store, const PreparedFrame<T>& frame, ModelOutput<T>& out) {
  out.motion = detail::head_rows(tape, store, frame, {frame.t_sweep}, out);
}

template <typename T>
ModelOutput<T> model_forward(Tape<T>& tape, ParamStore<T>& store, const NetworkConfig& cfg, PreparedFrame<T>& frame,
                             std::vector<StageTrace>* trace = nullptr) {
  auto out = voxel_forward(tape, store, cfg, frame, trace);
  head_forward(tape, store, frame, out);
  return out;
}

/// Inference: predicted motion for every point of sweep t (zeros for points
/// outside the grid), in the scene's point order.
template <typename T>
Matrix<float> predict_motion(ParamStore<T>& store, const NetworkConfig& cfg, const Scene& scene) {
  PreparedFrame<T> frame = prepare_frame<T>(scene, cfg.grid);
  Tape<T> tape(false);
  tape.training = false;
  const auto out = model_forward(tape, store, cfg, frame);
  const Matrix<T>& m = tape.value(out.motion);
  Matrix<float> full(frame.num_points_t, 3);
  const auto& in_range = frame.map_t().in_range;
  for (std::size_t r = 0; r < in_range.size(); ++r) {
    for (int c = 0; c < 3; ++c) full(in_range[r], c) = static_cast<float>(m(r, c));
  }
  return full;
}

/// Several scenes stacked along t in one sparse tensor. Scene b owns slots
/// b*(T+1) .. b*(T+1)+T-1; the slot after it stays empty, so temporal kernels
/// (radius 1) never reach a neighbouring scene. BN then sees the whole batch.
template <typename T>
struct PreparedBatch {
  PreparedFrame<T> frame;                // stacked sweeps; frame.t_sweep is unused
  NetworkConfig cfg;                     // cfg with the stacked grid
  std::vector<std::size_t> t_sweeps;     // sweep t of each scene, as a stacked sweep index
  std::vector<std::size_t> head_offset;  // first motion row of each scene, then the total

  std::size_t size() const { return t_sweeps.size(); }
};

template <typename T>
PreparedBatch<T> prepare_batch(const std::vector<const PreparedFrame<T>*>& frames, const NetworkConfig& cfg) {
  if (frames.empty()) throw std::invalid_argument("prepare_batch: empty batch");
  const int nt = cfg.grid.num_timesteps;
  PreparedBatch<T> b;
  b.cfg = cfg;
  b.cfg.grid.num_timesteps = static_cast<int>(frames.size()) * (nt + 1) - 1;
  PreparedFrame<T>& f = b.frame;

  std::size_t raw_rows = 0, site_rows = 0, sweeps = 0, head_rows = 0;
  std::vector<Coord4> coords;
  for (std::size_t s = 0; s < frames.size(); ++s) {
    const PreparedFrame<T>& src = *frames[s];
    if (src.maps.size() != static_cast<std::size_t>(nt) || src.sites->dims() != cfg.grid.dims4()) {
      throw std::invalid_argument("prepare_batch: frame was prepared for a different grid");
    }
    for (std::size_t k = 0; k < src.maps.size(); ++k) {
      f.maps.push_back(src.maps[k]);
      f.raw_offset.push_back(raw_rows + src.raw_offset[k]);
      f.site_offset.push_back(site_rows + src.site_offset[k]);
    }
    const int32_t shift = static_cast<int32_t>(s) * (nt + 1);
    for (Coord4 c : src.sites->coords()) {
      c[3] += shift;
      coords.push_back(c);
    }
    b.t_sweeps.push_back(sweeps + src.t_sweep);
    b.head_offset.push_back(head_rows);
    head_rows += src.map_t().num_in_range();
    raw_rows += src.raw.rows;
    site_rows += src.sites->size();
    sweeps += src.maps.size();
  }
  b.head_offset.push_back(head_rows);
  f.raw = Matrix<T>(raw_rows, kRawPointFeatures);
  auto dst = f.raw.data.begin();
  for (const auto* src : frames) dst = std::copy(src->raw.data.begin(), src->raw.data.end(), dst);
  // t is the most significant key, so the shifted coordinates keep each
  // scene's rows contiguous and in their original order
  f.sites = CoordSet::make(std::move(coords), b.cfg.grid.dims4());
  f.num_points_t = 0;
  return b;
}

/// One forward over a stacked batch. motion holds every scene's in-range
/// points of sweep t, scene after scene (rows head_offset[b] ..).
template <typename T>
ModelOutput<T> batch_forward(Tape<T>& tape, ParamStore<T>& store, PreparedBatch<T>& batch) {
  auto out = voxel_forward(tape, store, batch.cfg, batch.frame);
  out.motion = detail::head_rows(tape, store, batch.frame, batch.t_sweeps, out);
  return out;
}

}  // namespace flow4d
