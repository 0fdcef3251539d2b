#pragma once

// Sparse 4D tensors and the submanifold convolution engine.
//
// Coordinates are (w, l, h, t) and always kept sorted by the packed 64-bit
// key, which orders them lexicographically by (t, h, l, w). A convolution is
// executed from a KernelMap: for every kernel offset, the (in_row, out_row)
// pairs whose coordinates differ by that offset. Offsets are accumulated in a
// fixed order.

#include <Eigen/Dense>

#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <vector>

#include "flow4d/autodiff.hpp"
#include "flow4d/common.hpp"

namespace flow4d {

// ---------------------------------------------------------------------------
// Coordinate packing: 16 bits w, 16 bits l, 10 bits h, 6 bits t.

inline constexpr Coord4 kMaxDims = {1 << 16, 1 << 16, 1 << 10, 1 << 6};

inline uint64_t pack_coord(const Coord4& c) {
  return static_cast<uint64_t>(c[0]) | (static_cast<uint64_t>(c[1]) << 16) |
         (static_cast<uint64_t>(c[2]) << 32) | (static_cast<uint64_t>(c[3]) << 42);
}

inline Coord4 unpack_coord(uint64_t key) {
  return {static_cast<int32_t>(key & 0xFFFF), static_cast<int32_t>((key >> 16) & 0xFFFF),
          static_cast<int32_t>((key >> 32) & 0x3FF), static_cast<int32_t>((key >> 42) & 0x3F)};
}

inline bool in_bounds(const Coord4& c, const Coord4& dims) {
  for (int a = 0; a < 4; ++a) {
    if (c[a] < 0 || c[a] >= dims[a]) return false;
  }
  return true;
}

inline void check_dims(const Coord4& dims) {
  for (int a = 0; a < 4; ++a) {
    if (dims[a] <= 0 || dims[a] > kMaxDims[a]) {
      throw std::invalid_argument("grid dims out of the packable range");
    }
  }
}

// Open-addressing hash from packed coordinate to row.
class CoordIndex {
 public:
  CoordIndex() = default;
  explicit CoordIndex(std::span<const uint64_t> keys) {
    std::size_t cap = 16;
    while (cap < keys.size() * 2) cap <<= 1;
    slots_.assign(cap, Slot{kEmpty, -1});
    mask_ = cap - 1;
    for (std::size_t i = 0; i < keys.size(); ++i) insert(keys[i], static_cast<int32_t>(i));
  }

  int32_t find(uint64_t key) const {
    if (slots_.empty()) return -1;
    for (std::size_t s = mix(key) & mask_;; s = (s + 1) & mask_) {
      if (slots_[s].key == key) return slots_[s].row;
      if (slots_[s].key == kEmpty) return -1;
    }
  }

 private:
  static constexpr uint64_t kEmpty = ~uint64_t{0};
  struct Slot {
    uint64_t key;
    int32_t row;
  };

  static uint64_t mix(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  void insert(uint64_t key, int32_t row) {
    for (std::size_t s = mix(key) & mask_;; s = (s + 1) & mask_) {
      if (slots_[s].key == kEmpty) {
        slots_[s] = {key, row};
        return;
      }
      if (slots_[s].key == key) throw std::invalid_argument("duplicate coordinate");
    }
  }

  std::vector<Slot> slots_;
  std::size_t mask_ = 0;
};

// ---------------------------------------------------------------------------
// Kernel shapes

struct KernelShape {
  std::array<int, 4> k{1, 1, 1, 1};

  static constexpr KernelShape full4d() { return {{3, 3, 3, 3}}; }
  static constexpr KernelShape spatial() { return {{3, 3, 3, 1}}; }
  static constexpr KernelShape temporal() { return {{1, 1, 1, 3}}; }
  static constexpr KernelShape pointwise() { return {{1, 1, 1, 1}}; }

  int volume() const { return k[0] * k[1] * k[2] * k[3]; }
  int center() const { return volume() / 2; }

  bool supported() const {
    return *this == full4d() || *this == spatial() || *this == temporal() || *this == pointwise();
  }
  void validate() const {
    if (!supported()) throw std::invalid_argument("unsupported kernel shape " + str());
  }
  std::string str() const {
    return std::to_string(k[0]) + "x" + std::to_string(k[1]) + "x" + std::to_string(k[2]) + "x" +
           std::to_string(k[3]);
  }

  /// Centered offsets with t varying fastest; index volume()/2 is the zero
  /// offset.
  std::vector<Coord4> offsets() const {
    std::vector<Coord4> out;
    out.reserve(volume());
    for (int a = 0; a < k[0]; ++a)
      for (int b = 0; b < k[1]; ++b)
        for (int c = 0; c < k[2]; ++c)
          for (int d = 0; d < k[3]; ++d) out.push_back({a - k[0] / 2, b - k[1] / 2, c - k[2] / 2, d - k[3] / 2});
    return out;
  }

  bool operator==(const KernelShape&) const = default;
  auto operator<=>(const KernelShape&) const = default;
};

// Gather/scatter plan of one submanifold convolution.
struct KernelMap {
  KernelShape shape;
  std::size_t num_rows = 0;
  // pairs[k] holds (in_row, out_row), sorted by out_row.
  std::vector<std::vector<std::pair<int32_t, int32_t>>> pairs;
  // Out-major view: in_row feeding out_row j through offset k, or -1.
  std::vector<int32_t> gather;
  // In-major view: out_row fed by in_row i through offset k, or -1.
  std::vector<int32_t> scatter;

  int volume() const { return shape.volume(); }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Coordinate sets

/// An immutable, sorted set of active 4D sites, shared by every feature
/// tensor defined on it. Kernel maps are built on demand and cached.
class CoordSet {
 public:
  CoordSet(std::vector<Coord4> coords, Coord4 dims) : dims_(dims) {
    check_dims(dims_);
    keys_.reserve(coords.size());
    for (const auto& c : coords) {
      if (!in_bounds(c, dims_)) throw std::out_of_range("coordinate outside grid dims");
      keys_.push_back(pack_coord(c));
    }
    if (!std::is_sorted(keys_.begin(), keys_.end())) std::sort(keys_.begin(), keys_.end());
    if (std::adjacent_find(keys_.begin(), keys_.end()) != keys_.end()) {
      throw std::invalid_argument("duplicate active coordinate");
    }
    coords_.reserve(keys_.size());
    for (uint64_t k : keys_) coords_.push_back(unpack_coord(k));
    index_ = CoordIndex(keys_);
  }

  static std::shared_ptr<const CoordSet> make(std::vector<Coord4> coords, Coord4 dims) {
    return std::make_shared<const CoordSet>(std::move(coords), dims);
  }

  std::size_t size() const { return coords_.size(); }
  bool empty() const { return coords_.empty(); }
  const Coord4& dims() const { return dims_; }
  const std::vector<Coord4>& coords() const { return coords_; }
  const Coord4& operator[](std::size_t i) const { return coords_[i]; }

  int32_t find(const Coord4& c) const {
    if (!in_bounds(c, dims_)) return -1;
    return index_.find(pack_coord(c));
  }

  bool same_sites(const CoordSet& o) const { return dims_ == o.dims_ && keys_ == o.keys_; }

  std::shared_ptr<const KernelMap> kernel_map(KernelShape shape) const;

  /// Sum over offsets of active pairs, without materializing the map.
  std::size_t count_pairs(KernelShape shape) const {
    shape.validate();
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (auto it = pair_counts_.find(shape); it != pair_counts_.end()) return it->second;
    }
    std::size_t n = 0;
    const auto offs = shape.offsets();
    for (const auto& c : coords_) {
      for (const auto& d : offs) {
        if (find({c[0] - d[0], c[1] - d[1], c[2] - d[2], c[3] - d[3]}) >= 0) ++n;
      }
    }
    std::lock_guard<std::mutex> lock(mutex_);
    pair_counts_[shape] = n;
    return n;
  }

 private:
  Coord4 dims_;
  std::vector<Coord4> coords_;
  std::vector<uint64_t> keys_;
  CoordIndex index_;
  mutable std::mutex mutex_;
  mutable std::map<KernelShape, std::shared_ptr<const KernelMap>> maps_;
  mutable std::map<KernelShape, std::size_t> pair_counts_;
};

/// Pair (i, j) is present for offset d iff coords[i] == coords[j] - d.
/// Output sites equal input sites.
inline KernelMap build_kernel_map_subm(const CoordSet& x, KernelShape shape) {
  shape.validate();
  const auto offs = shape.offsets();
  const int K = shape.volume();
  const std::size_t n = x.size();
  KernelMap map;
  map.shape = shape;
  map.num_rows = n;
  map.pairs.resize(K);
  map.gather.assign(n * K, -1);
  map.scatter.assign(n * K, -1);
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::size_t j = 0; j < n; ++j) {
    const Coord4& c = x[j];
    for (int k = 0; k < K; ++k) {
      const Coord4& d = offs[k];
      map.gather[j * K + k] = x.find({c[0] - d[0], c[1] - d[1], c[2] - d[2], c[3] - d[3]});
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (int k = 0; k < K; ++k) {
      const int32_t i = map.gather[j * K + k];
      if (i < 0) continue;
      map.pairs[k].emplace_back(i, static_cast<int32_t>(j));
      map.scatter[static_cast<std::size_t>(i) * K + k] = static_cast<int32_t>(j);
    }
  }
  return map;
}

inline std::shared_ptr<const KernelMap> CoordSet::kernel_map(KernelShape shape) const {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (auto it = maps_.find(shape); it != maps_.end()) return it->second;
  }
  auto map = std::make_shared<const KernelMap>(build_kernel_map_subm(*this, shape));
  std::lock_guard<std::mutex> lock(mutex_);
  return maps_.emplace(shape, std::move(map)).first->second;
}

// ---------------------------------------------------------------------------
// Feature tensors

template <typename T>
struct SparseTensor4D {
  std::shared_ptr<const CoordSet> sites;
  Matrix<T> features;  // sites->size() x C

  SparseTensor4D() = default;
  SparseTensor4D(std::shared_ptr<const CoordSet> s, Matrix<T> f) : sites(std::move(s)), features(std::move(f)) {
    if (!sites) throw std::invalid_argument("sparse tensor without coordinates");
    if (features.rows != sites->size()) throw std::invalid_argument("feature rows do not match active sites");
  }

  std::size_t size() const { return sites ? sites->size() : 0; }
  std::size_t channels() const { return features.cols; }
  const Coord4& dims() const { return sites->dims(); }
  const std::vector<Coord4>& coords() const { return sites->coords(); }
};

template <typename T>
struct SparseTensor3D {
  std::vector<Coord3> coords;
  Matrix<T> features;
};

// ---------------------------------------------------------------------------
// Convolution kernels (plain functions; ops::sparse_conv records them)

namespace detail {

template <typename T>
void check_conv_args(const Matrix<T>& x, const Matrix<T>& W, const Matrix<T>* bias, const KernelMap& map) {
  const std::size_t K = static_cast<std::size_t>(map.volume());
  if (x.rows != map.num_rows) {
    throw std::invalid_argument("conv: tensor has " + std::to_string(x.rows) + " rows, map has " +
                                std::to_string(map.num_rows));
  }
  if (W.rows != K * x.cols) {
    throw std::invalid_argument("conv: weight " + shape_str(W) + " does not fit kernel " + map.shape.str() +
                                " with " + std::to_string(x.cols) + " input channels");
  }
  if (bias && (bias->rows != 1 || bias->cols != W.cols)) throw std::invalid_argument("conv: bias shape mismatch");
}

}  // namespace detail

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> rows_of(const Matrix<T>& m, std::size_t first, std::size_t count) {
  return {m.data.data() + first * m.cols, static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(m.cols)};
}

// The centre offset of a submanifold map pairs every row with itself.
inline bool is_identity(const KernelMap& map, int k) {
  return k == map.shape.center() && map.pairs[k].size() == map.num_rows;
}

// Copies x[idx[p]] into row p of buf.
template <typename T>
void gather_into(RowMat<T>& buf, const Matrix<T>& x, const std::vector<std::pair<int32_t, int32_t>>& pairs,
                 bool first) {
  buf.resize(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(x.cols));
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const T* src = x.row(first ? pairs[p].first : pairs[p].second);
    std::copy(src, src + x.cols, buf.data() + p * x.cols);
  }
}

}  // namespace detail

/// out[j] = bias + sum_k sum_{(i,j) in pairs[k]} x[i] * W_k, with W stored as
/// K stacked [C_in x C_out] blocks. Each offset is one gather, one GEMM and
/// one scatter-add, in offset order.
template <typename T>
Matrix<T> conv_subm_forward(const Matrix<T>& x, const Matrix<T>& W, const Matrix<T>* bias, const KernelMap& map) {
  detail::check_conv_args(x, W, bias, map);
  const int K = map.volume();
  const std::size_t n = x.rows, cin = x.cols, cout = W.cols;
  Matrix<T> y(n, cout);
  if (bias) {
    for (std::size_t j = 0; j < n; ++j) std::copy(bias->data.begin(), bias->data.end(), y.row(j));
  }
  detail::RowMat<T> xg, yk;
  Eigen::Map<detail::RowMat<T>> ym(y.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cout));
  for (int k = 0; k < K; ++k) {
    const auto& pairs = map.pairs[k];
    if (pairs.empty()) continue;
    if (detail::is_identity(map, k)) {
      ym.noalias() += detail::rows_of(x, 0, n) * detail::rows_of(W, static_cast<std::size_t>(k) * cin, cin);
      continue;
    }
    detail::gather_into(xg, x, pairs, true);
    yk.noalias() = xg * detail::rows_of(W, static_cast<std::size_t>(k) * cin, cin);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      T* yr = y.row(pairs[p].second);
      const T* src = yk.data() + p * cout;
      for (std::size_t co = 0; co < cout; ++co) yr[co] += src[co];
    }
  }
  return y;
}

template <typename T>
void conv_subm_backward(const Matrix<T>& x, const Matrix<T>& W, const KernelMap& map, const Matrix<T>& grad_out,
                        Matrix<T>* grad_x, Matrix<T>* grad_W, Matrix<T>* grad_b) {
  const int K = map.volume();
  const std::size_t n = x.rows, cin = x.cols, cout = W.cols;
  detail::RowMat<T> xg, gg, gx;
  for (int k = 0; k < K; ++k) {
    const auto& pairs = map.pairs[k];
    if (pairs.empty()) continue;
    const auto wk = detail::rows_of(W, static_cast<std::size_t>(k) * cin, cin);
    if (detail::is_identity(map, k)) {
      const auto g = detail::rows_of(grad_out, 0, n);
      if (grad_x) {
        Eigen::Map<detail::RowMat<T>>(grad_x->data.data(), static_cast<Eigen::Index>(n),
                                      static_cast<Eigen::Index>(cin)).noalias() += g * wk.transpose();
      }
      if (grad_W) {
        Eigen::Map<detail::RowMat<T>>(grad_W->row(static_cast<std::size_t>(k) * cin), static_cast<Eigen::Index>(cin),
                                      static_cast<Eigen::Index>(cout)).noalias() += detail::rows_of(x, 0, n).transpose() * g;
      }
      continue;
    }
    detail::gather_into(gg, grad_out, pairs, false);
    if (grad_x) {
      gx.noalias() = gg * wk.transpose();
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        T* dst = grad_x->row(pairs[p].first);
        const T* src = gx.data() + p * cin;
        for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
      }
    }
    if (grad_W) {
      detail::gather_into(xg, x, pairs, true);
      Eigen::Map<detail::RowMat<T>> gw(grad_W->row(static_cast<std::size_t>(k) * cin), static_cast<Eigen::Index>(cin),
                                       static_cast<Eigen::Index>(cout));
      gw.noalias() += xg.transpose() * gg;
    }
  }
  if (grad_b) {
    for (std::size_t j = 0; j < n; ++j) {
      const T* gr = grad_out.row(j);
      for (std::size_t co = 0; co < cout; ++co) grad_b->data[co] += gr[co];
    }
  }
}

template <typename T>
SparseTensor4D<T> conv_subm(const SparseTensor4D<T>& x, const Matrix<T>& W, const Matrix<T>& bias,
                            const KernelMap& map) {
  return {x.sites, conv_subm_forward(x.features, W, &bias, map)};
}

// ---------------------------------------------------------------------------
// Pooling and upsampling

using Stride4 = std::array<int32_t, 4>;

inline void check_stride(const Stride4& s) {
  for (int32_t v : s) {
    if (v != 1 && v != 2) throw std::invalid_argument("stride components must be 1 or 2");
  }
}

inline Coord4 pooled_dims(const Coord4& dims, const Stride4& s) {
  Coord4 out;
  for (int a = 0; a < 4; ++a) out[a] = (dims[a] + s[a] - 1) / s[a];
  return out;
}

inline Coord4 parent_of(const Coord4& c, const Stride4& s) {
  return {c[0] / s[0], c[1] / s[1], c[2] / s[2], c[3] / s[3]};
}

/// Downsampling plan: coarse sites plus, per coarse site, its fine children in
/// fine row order.
struct PoolMap {
  Stride4 stride{1, 1, 1, 1};
  std::shared_ptr<const CoordSet> fine;
  std::shared_ptr<const CoordSet> coarse;
  std::shared_ptr<const ops::RowGroups> children;
  std::vector<int32_t> parent;  // per fine row
};

inline PoolMap build_pool_map(std::shared_ptr<const CoordSet> fine, Stride4 stride) {
  check_stride(stride);
  PoolMap pm;
  pm.stride = stride;
  std::vector<uint64_t> parent_keys(fine->size());
  for (std::size_t i = 0; i < fine->size(); ++i) parent_keys[i] = pack_coord(parent_of((*fine)[i], stride));
  std::vector<uint64_t> uniq = parent_keys;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<Coord4> coarse_coords;
  coarse_coords.reserve(uniq.size());
  for (uint64_t k : uniq) coarse_coords.push_back(unpack_coord(k));
  pm.coarse = CoordSet::make(std::move(coarse_coords), pooled_dims(fine->dims(), stride));

  pm.parent.resize(fine->size());
  std::vector<int32_t> counts(pm.coarse->size(), 0);
  for (std::size_t i = 0; i < fine->size(); ++i) {
    pm.parent[i] = static_cast<int32_t>(std::lower_bound(uniq.begin(), uniq.end(), parent_keys[i]) - uniq.begin());
    ++counts[pm.parent[i]];
  }
  auto groups = std::make_shared<ops::RowGroups>();
  groups->offsets.resize(pm.coarse->size() + 1, 0);
  for (std::size_t g = 0; g < counts.size(); ++g) groups->offsets[g + 1] = groups->offsets[g] + counts[g];
  groups->members.resize(fine->size());
  std::vector<int32_t> fill(groups->offsets.begin(), groups->offsets.end() - 1);
  for (std::size_t i = 0; i < fine->size(); ++i) groups->members[fill[pm.parent[i]]++] = static_cast<int32_t>(i);
  pm.children = std::move(groups);
  pm.fine = std::move(fine);
  return pm;
}

/// Mean of the children of every coarse site.
template <typename T>
SparseTensor4D<T> pool_down(const SparseTensor4D<T>& x, Stride4 stride) {
  const PoolMap pm = build_pool_map(x.sites, stride);
  Tape<T> tape(false);
  const Var y = ops::group_mean(tape, tape.constant(x.features), pm.children);
  return {pm.coarse, tape.value(y)};
}

/// For every target site, the row of its parent in `coarse` (or -1).
inline std::vector<int32_t> upsample_index(const CoordSet& coarse, const CoordSet& target, Stride4 stride) {
  check_stride(stride);
  if (pooled_dims(target.dims(), stride) != coarse.dims()) {
    throw std::invalid_argument("up_sample: stride does not map target dims onto coarse dims");
  }
  std::vector<int32_t> idx(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) idx[i] = coarse.find(parent_of(target[i], stride));
  return idx;
}

/// Nearest-neighbour unpooling onto `target`; sites without a parent get 0.
template <typename T>
SparseTensor4D<T> up_sample(const SparseTensor4D<T>& coarse, std::shared_ptr<const CoordSet> target,
                            Stride4 stride) {
  Tape<T> tape(false);
  const Var y = ops::gather_rows(tape, tape.constant(coarse.features), upsample_index(*coarse.sites, *target, stride));
  return {std::move(target), tape.value(y)};
}

/// Rows of `sites` whose t coordinate equals t_index, in order.
inline std::vector<int32_t> time_slice_rows(const CoordSet& sites, int32_t t_index) {
  if (t_index < 0 || t_index >= sites.dims()[3]) throw std::out_of_range("slice_time: t index outside dims");
  std::vector<int32_t> rows;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (sites[i][3] == t_index) rows.push_back(static_cast<int32_t>(i));
  }
  return rows;
}

template <typename T>
SparseTensor3D<T> slice_time(const SparseTensor4D<T>& x, int32_t t_index) {
  const auto rows = time_slice_rows(*x.sites, t_index);
  SparseTensor3D<T> out;
  out.features = Matrix<T>(rows.size(), x.channels());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Coord4& c = (*x.sites)[rows[r]];
    out.coords.push_back({c[0], c[1], c[2]});
    std::copy(x.features.row(rows[r]), x.features.row(rows[r]) + x.channels(), out.features.row(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable wrappers

namespace ops {

template <typename T>
Var sparse_conv(Tape<T>& tape, Var x, Var W, Var b, std::shared_ptr<const KernelMap> map) {
  const Matrix<T>* bias = b.valid() ? &tape.value(b) : nullptr;
  Matrix<T> y = conv_subm_forward(tape.value(x), tape.value(W), bias, *map);
  std::vector<Var> inputs{x, W};
  if (b.valid()) inputs.push_back(b);
  return tape.record(std::move(y), inputs, [x, W, b, map, self = int32_t(tape.size())](Tape<T>& t) {
    conv_subm_backward(t.value(x), t.value(W), *map, t.grad(Var{self}), t.requires_grad(x) ? &t.grad(x) : nullptr,
                       t.requires_grad(W) ? &t.grad(W) : nullptr,
                       b.valid() && t.requires_grad(b) ? &t.grad(b) : nullptr);
  });
}

template <typename T>
Var pool_down(Tape<T>& tape, Var x, const PoolMap& pm) {
  return group_mean(tape, x, pm.children);
}

template <typename T>
Var up_sample(Tape<T>& tape, Var coarse, const CoordSet& coarse_sites, const CoordSet& target, Stride4 stride) {
  return gather_rows(tape, coarse, upsample_index(coarse_sites, target, stride));
}

}  // namespace ops

}  // namespace flow4d
