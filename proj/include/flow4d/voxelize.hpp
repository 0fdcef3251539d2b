#pragma once

// Point-to-voxel assignment, the voxel feature encoder (VFE) and temporal
// fusion of per-sweep voxel features into one 4D sparse tensor.

#include <random>
#include <vector>

#include "flow4d/autodiff.hpp"
#include "flow4d/geom.hpp"
#include "flow4d/sparse.hpp"

namespace flow4d {

struct GridConfig {
  std::array<double, 3> origin{-51.2, -51.2, -3.2};
  std::array<double, 3> voxel_size{0.2, 0.2, 0.2};
  Coord3 dims{512, 512, 32};
  int32_t num_timesteps = 5;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(voxel_size[a] > 0)) throw std::invalid_argument("voxel size must be positive");
      if (dims[a] <= 0) throw std::invalid_argument("grid dims must be positive");
    }
    if (num_timesteps <= 0) throw std::invalid_argument("num_timesteps must be positive");
    check_dims(dims4());
  }

  Coord4 dims4() const { return {dims[0], dims[1], dims[2], num_timesteps}; }

  std::array<double, 3> range_max() const {
    return {origin[0] + dims[0] * voxel_size[0], origin[1] + dims[1] * voxel_size[1],
            origin[2] + dims[2] * voxel_size[2]};
  }

  bool operator==(const GridConfig&) const = default;
};

// Result of binning one cloud. Rows of the per-point feature matrices are the
// in-range points in their original order.
struct PointVoxelMap {
  static constexpr int32_t kOutOfRange = -1;

  std::vector<int32_t> voxel_of_point;  // per original point: voxel row or kOutOfRange
  std::vector<int32_t> in_range;        // original indices of the in-range points
  std::vector<int32_t> voxel_of_row;    // per in-range row: voxel row
  std::vector<Coord3> active_voxels;    // sorted by (h, l, w)
  std::shared_ptr<const ops::RowGroups> members;  // per voxel: in-range rows

  std::size_t num_points() const { return voxel_of_point.size(); }
  std::size_t num_in_range() const { return in_range.size(); }
  std::size_t num_voxels() const { return active_voxels.size(); }
};

inline PointVoxelMap assign_voxels(const PointCloud& cloud, const GridConfig& grid) {
  grid.validate();
  PointVoxelMap map;
  const std::size_t n = cloud.size();
  map.voxel_of_point.assign(n, PointVoxelMap::kOutOfRange);
  std::vector<uint64_t> keys;
  keys.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = cloud.points.row(i);
    Coord4 c{0, 0, 0, 0};
    bool ok = true;
    for (int a = 0; a < 3; ++a) {
      // points are f32, so the origin is compared at f32 precision too
      const double f = std::floor((static_cast<double>(p[a]) - static_cast<float>(grid.origin[a])) / grid.voxel_size[a]);
      if (!(f >= 0 && f < grid.dims[a])) {
        ok = false;
        break;
      }
      c[a] = static_cast<int32_t>(f);
    }
    if (!ok) continue;
    map.in_range.push_back(static_cast<int32_t>(i));
    keys.push_back(pack_coord(c));
  }
  std::vector<uint64_t> uniq = keys;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  for (uint64_t k : uniq) {
    const Coord4 c = unpack_coord(k);
    map.active_voxels.push_back({c[0], c[1], c[2]});
  }
  map.voxel_of_row.resize(keys.size());
  std::vector<int32_t> counts(uniq.size(), 0);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    const auto v = static_cast<int32_t>(std::lower_bound(uniq.begin(), uniq.end(), keys[r]) - uniq.begin());
    map.voxel_of_row[r] = v;
    map.voxel_of_point[map.in_range[r]] = v;
    ++counts[v];
  }
  auto groups = std::make_shared<ops::RowGroups>();
  groups->offsets.assign(uniq.size() + 1, 0);
  for (std::size_t v = 0; v < uniq.size(); ++v) groups->offsets[v + 1] = groups->offsets[v] + counts[v];
  groups->members.resize(keys.size());
  std::vector<int32_t> fill(groups->offsets.begin(), groups->offsets.end() - 1);
  for (std::size_t r = 0; r < keys.size(); ++r) groups->members[fill[map.voxel_of_row[r]]++] = static_cast<int32_t>(r);
  map.members = std::move(groups);
  return map;
}

inline constexpr std::size_t kRawPointFeatures = 9;

/// Per in-range point: (x, y, z), offset from its voxel's geometric center,
/// offset from the mean of the points sharing its voxel.
template <typename T>
Matrix<T> build_point_features(const PointCloud& cloud, const PointVoxelMap& map, const GridConfig& grid) {
  if (map.num_points() != cloud.size()) throw std::invalid_argument("voxel map was built for a different cloud");
  const std::size_t nv = map.num_voxels();
  std::vector<double> centroid(nv * 3, 0.0);
  for (std::size_t v = 0; v < nv; ++v) {
    const int32_t b = map.members->offsets[v], e = map.members->offsets[v + 1];
    for (int32_t m = b; m < e; ++m) {
      const float* p = cloud.points.row(map.in_range[map.members->members[m]]);
      for (int a = 0; a < 3; ++a) centroid[v * 3 + a] += p[a];
    }
    for (int a = 0; a < 3; ++a) centroid[v * 3 + a] /= static_cast<double>(e - b);
  }
  Matrix<T> raw(map.num_in_range(), kRawPointFeatures);
  for (std::size_t r = 0; r < map.num_in_range(); ++r) {
    const float* p = cloud.points.row(map.in_range[r]);
    const int32_t v = map.voxel_of_row[r];
    const Coord3& c = map.active_voxels[v];
    T* out = raw.row(r);
    for (int a = 0; a < 3; ++a) {
      const double x = p[a];
      const double center = grid.origin[a] + (c[a] + 0.5) * grid.voxel_size[a];
      out[a] = static_cast<T>(x);
      out[3 + a] = static_cast<T>(x - center);
      out[6 + a] = static_cast<T>(x - centroid[v * 3 + a]);
    }
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Voxel feature encoder

struct VfeConfig {
  int layers = 1;  // stacked linear+BN+ReLU layers, 9 -> 16 (-> 16 ...)
  std::size_t out_channels = 16;
};

template <typename T>
void add_batch_norm_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
  store.add(prefix + ".gamma", Matrix<T>(1, channels, T(1)));
  store.add(prefix + ".beta", Matrix<T>(1, channels, T(0)));
  store.add(prefix + ".running_mean", Matrix<T>(1, channels, T(0)), false);
  store.add(prefix + ".running_var", Matrix<T>(1, channels, T(1)), false);
}

/// Kaiming-normal weight of shape [rows x cols] with the given fan-in.
template <typename T>
Matrix<T> kaiming(std::mt19937_64& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))));
  Matrix<T> w(rows, cols);
  for (auto& v : w.data) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
void add_vfe_params(ParamStore<T>& store, const VfeConfig& cfg, std::mt19937_64& rng) {
  std::size_t in = kRawPointFeatures;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "vfe." + std::to_string(l);
    store.add(p + ".weight", kaiming<T>(rng, in, cfg.out_channels, in));
    store.add(p + ".bias", Matrix<T>(1, cfg.out_channels));
    add_batch_norm_params(store, p + ".bn", cfg.out_channels);
    in = cfg.out_channels;
  }
}

namespace ops {

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, ParamStore<T>& store, const std::string& prefix) {
  return batch_norm(tape, x, tape.param(store, prefix + ".gamma"), tape.param(store, prefix + ".beta"),
                    store.at(prefix + ".running_mean"), store.at(prefix + ".running_var"));
}

}  // namespace ops

/// f_p = ReLU(BN(raw9 * W + b)) per layer. Batch statistics are taken over
/// every row of `raw9`.
template <typename T>
Var encode_vfe(Tape<T>& tape, Var raw9, ParamStore<T>& store, const VfeConfig& cfg = {}) {
  if (tape.value(raw9).cols != kRawPointFeatures) {
    throw std::invalid_argument("encode_vfe: expected 9 input features, got " + shape_str(tape.value(raw9)));
  }
  Var h = raw9;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "vfe." + std::to_string(l);
    const Var W = tape.param(store, p + ".weight");
    if (tape.value(W).rows != tape.value(h).cols) throw std::invalid_argument("encode_vfe: weight shape mismatch");
    h = ops::linear(tape, h, W, tape.param(store, p + ".bias"));
    h = ops::batch_norm(tape, h, store, p + ".bn");
    h = ops::relu(tape, h);
  }
  return h;
}

/// Voxel-wise average of point features.
template <typename T>
Var pool_to_voxels(Tape<T>& tape, Var point_features, const PointVoxelMap& map) {
  if (tape.value(point_features).rows != map.num_in_range()) {
    throw std::invalid_argument("pool_to_voxels: feature rows do not match in-range points");
  }
  return ops::group_mean(tape, point_features, map.members);
}

template <typename T>
struct VoxelFeatures {
  std::vector<Coord3> coords;
  Matrix<T> features;
  int32_t timestep = 0;
};

template <typename T>
VoxelFeatures<T> pool_to_voxels(const Matrix<T>& point_features, const PointVoxelMap& map, int32_t timestep = 0) {
  Tape<T> tape(false);
  const Var v = pool_to_voxels(tape, tape.constant(point_features), map);
  return {map.active_voxels, tape.value(v), timestep};
}

/// Sites of the fused tensor: sweep k's voxels at t = k. Because both inputs
/// are sorted by (h, l, w) and the packed key orders by t first, the rows of
/// sweep k form one contiguous block in sweep order.
inline std::shared_ptr<const CoordSet> fused_sites(const std::vector<const std::vector<Coord3>*>& per_sweep,
                                                   const GridConfig& grid) {
  if (static_cast<int32_t>(per_sweep.size()) != grid.num_timesteps) {
    throw std::invalid_argument("fuse_temporal: expected " + std::to_string(grid.num_timesteps) + " sweeps, got " +
                                std::to_string(per_sweep.size()));
  }
  std::vector<Coord4> coords;
  for (std::size_t k = 0; k < per_sweep.size(); ++k) {
    for (const Coord3& c : *per_sweep[k]) coords.push_back({c[0], c[1], c[2], static_cast<int32_t>(k)});
  }
  return CoordSet::make(std::move(coords), grid.dims4());
}

template <typename T>
SparseTensor4D<T> fuse_temporal(const std::vector<VoxelFeatures<T>>& per_sweep, const GridConfig& grid) {
  std::vector<const std::vector<Coord3>*> coords;
  std::size_t channels = per_sweep.empty() ? 0 : per_sweep.front().features.cols;
  for (const auto& v : per_sweep) {
    if (v.features.rows != v.coords.size()) throw std::invalid_argument("fuse_temporal: features/coords mismatch");
    if (v.features.cols != channels && v.features.rows > 0) throw std::invalid_argument("fuse_temporal: channel mismatch");
    for (const auto& c : v.coords) {
      for (int a = 0; a < 3; ++a) {
        if (c[a] < 0 || c[a] >= grid.dims[a]) throw std::invalid_argument("fuse_temporal: voxel outside grid");
      }
    }
    coords.push_back(&v.coords);
  }
  auto sites = fused_sites(coords, grid);
  Matrix<T> feats(sites->size(), channels);
  std::size_t row = 0;
  for (const auto& v : per_sweep) {
    std::copy(v.features.data.begin(), v.features.data.end(), feats.data.begin() + row * channels);
    row += v.features.rows;
  }
  return {std::move(sites), std::move(feats)};
}

}  // namespace flow4d
