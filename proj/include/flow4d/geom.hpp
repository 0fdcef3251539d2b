#pragma once

// Rigid transforms, ego-motion warping and the synthetic multi-sweep scene
// generator.
//
// Frame convention: every sweep is stored in its own ego frame and carries a
// pose-to-world transform. The network works in the frame of the last sweep
// (t+1). For a point p of sweep t,
//
//   ego_flow(p)    = T_{t,t+1} p - p,   T_{t,t+1} = inverse(pose_{t+1}) * pose_t
//   motion_flow(p) = R_{t+1}^T (world displacement of p over one sweep)
//
// so that p + ego_flow + motion_flow is the position of the same surface point
// at t+1, expressed in the t+1 frame. Ground-truth and predicted flows are
// always motion flows.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "flow4d/common.hpp"

namespace flow4d {

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_translation(double x, double y, double z) {
    RigidTransform t;
    t.translation = {x, y, z};
    return t;
  }

  /// Rotation about +z by `yaw` radians, then translation.
  static RigidTransform from_yaw(double yaw, Eigen::Vector3d trans = {0, 0, 0}) {
    RigidTransform t;
    t.rotation = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    t.translation = trans;
    return t;
  }

  /// Row-major 4x4 homogeneous matrix. Throws if the rotation block is not
  /// orthonormal with determinant +1.
  static RigidTransform from_matrix4(std::span<const double> m) {
    if (m.size() != 16) throw std::invalid_argument("pose needs 16 entries");
    RigidTransform t;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) t.rotation(r, c) = m[r * 4 + c];
      t.translation[r] = m[r * 4 + 3];
    }
    if (!t.is_valid(1e-5)) throw std::invalid_argument("pose rotation is not a proper rotation");
    return t;
  }

  std::array<double, 16> to_matrix4() const {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r * 4 + c] = rotation(r, c);
      m[r * 4 + 3] = translation[r];
    }
    m[15] = 1.0;
    return m;
  }

  bool is_valid(double tol = 1e-6) const {
    const Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// (a * b)(p) = a(b(p)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    return out;
  }
};

struct PointCloud {
  Matrix<float> points{0, 3};  // N x 3, meters
  int timestep = 0;

  std::size_t size() const { return points.rows; }
  Eigen::Vector3d point(std::size_t i) const {
    const float* p = points.row(i);
    return {p[0], p[1], p[2]};
  }
};

/// Class ids. Anything non-zero is foreground.
enum class PointClass : uint8_t {
  kBackground = 0,
  kCar = 1,
  kOtherVehicle = 2,
  kPedestrian = 3,
  kWheeledVru = 4,
};
inline constexpr int kNumClasses = 5;

struct Sweep {
  PointCloud cloud;
  RigidTransform pose;  // ego frame -> world
};

/// Five (or more) consecutive sweeps, oldest first. The sweep at `t_index()`
/// (second to last) is the one whose motion is labelled.
struct Scene {
  std::vector<Sweep> sweeps;
  Matrix<float> gt_motion{0, 3};
  std::vector<uint8_t> class_id;
  std::vector<float> gt_speed;

  std::size_t t_index() const {
    if (sweeps.size() < 2) throw std::invalid_argument("scene needs at least two sweeps");
    return sweeps.size() - 2;
  }
  const PointCloud& cloud_t() const { return sweeps[t_index()].cloud; }

  /// Throws std::invalid_argument when label rows or class ids are inconsistent.
  void validate() const {
    const std::size_t n = cloud_t().size();
    if (gt_motion.rows != n || gt_motion.cols != 3 || class_id.size() != n || gt_speed.size() != n) {
      throw std::invalid_argument("scene labels do not have one row per point of sweep t");
    }
    for (uint8_t c : class_id) {
      if (c >= kNumClasses) throw std::invalid_argument("class id out of range");
    }
    for (const auto& s : sweeps) {
      if (s.cloud.points.cols != 3) throw std::invalid_argument("points must be N x 3");
      for (float v : s.cloud.points.data) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite point coordinate");
      }
    }
  }
};

inline PointCloud warp(const PointCloud& cloud, const RigidTransform& T) {
  PointCloud out;
  out.timestep = cloud.timestep;
  out.points = Matrix<float>(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d q = T.apply(cloud.point(i));
    float* dst = out.points.row(i);
    dst[0] = static_cast<float>(q[0]);
    dst[1] = static_cast<float>(q[1]);
    dst[2] = static_cast<float>(q[2]);
  }
  return out;
}

/// Transform taking sweep-tau ego coordinates to sweep-(t+1) ego coordinates.
inline RigidTransform relative_transform(const RigidTransform& pose_from,
                                         const RigidTransform& pose_to) {
  return pose_to.inverse() * pose_from;
}

/// Per-point ego flow of `cloud_t` in the t+1 convention (see header comment).
inline Matrix<float> ego_flow(const RigidTransform& pose_t, const RigidTransform& pose_t1,
                              const PointCloud& cloud_t) {
  const RigidTransform rel = relative_transform(pose_t, pose_t1);
  Matrix<float> flow(cloud_t.size(), 3);
  for (std::size_t i = 0; i < cloud_t.size(); ++i) {
    const Eigen::Vector3d p = cloud_t.point(i);
    const Eigen::Vector3d d = rel.apply(p) - p;
    for (int k = 0; k < 3; ++k) flow(i, k) = static_cast<float>(d[k]);
  }
  return flow;
}

/// All sweeps of a scene expressed in the frame of its last sweep.
inline std::vector<PointCloud> warp_to_last(const Scene& scene) {
  std::vector<PointCloud> out;
  out.reserve(scene.sweeps.size());
  const RigidTransform& last = scene.sweeps.back().pose;
  for (const auto& s : scene.sweeps) out.push_back(warp(s.cloud, relative_transform(s.pose, last)));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneSpec {
  double extent = 25.6;              // half-width of the sampled square (m)
  double ground_z = -1.6;            // ground height in the ego frame (m)
  double ground_density = 4.0;       // ground points per m^2
  double ground_jitter = 0.05;       // uniform +- jitter on ground height (m)
  int num_movers = 4;
  double mover_speed_min = 2.0;      // m/s
  double mover_speed_max = 8.0;      // m/s
  int num_parked = 2;                // static foreground objects
  double object_density = 40.0;      // points per m^3 of box volume
  double max_object_height = 2.0;    // boxes are clipped to this height (m)
  double ego_speed = 5.0;            // m/s along the ego heading
  double ego_yaw_rate = 0.0;         // rad/s
  int num_sweeps = 5;
  double sweep_interval = kSweepInterval;
  // Optional explicit world velocities, one per mover, overriding the sampled
  // heading and speed.
  std::vector<Eigen::Vector3d> mover_velocities;

  /// Sparser scene filling a 64x64x8 grid of 0.2 m voxels centred on the ego.
  static SceneSpec desk() {
    SceneSpec s;
    s.extent = 6.4;
    s.ground_z = -0.7;
    s.ground_density = 2.0;
    s.object_density = 12.0;
    s.max_object_height = 1.4;
    s.num_movers = 3;
    s.num_parked = 1;
    return s;
  }

  void validate() const {
    if (!(extent > 0)) throw std::invalid_argument("scene extent must be positive");
    if (ground_density < 0 || object_density < 0) {
      throw std::invalid_argument("densities must be non-negative");
    }
    if (ground_jitter < 0) throw std::invalid_argument("ground jitter must be non-negative");
    if (num_movers < 0 || num_parked < 0) throw std::invalid_argument("object counts must be non-negative");
    if (mover_speed_min < 0 || mover_speed_max < mover_speed_min) {
      throw std::invalid_argument("invalid mover speed range");
    }
    if (!(max_object_height > 0)) throw std::invalid_argument("object height must be positive");
    if (num_sweeps < 2) throw std::invalid_argument("need at least two sweeps");
    if (!(sweep_interval > 0)) throw std::invalid_argument("sweep interval must be positive");
    if (!mover_velocities.empty() && static_cast<int>(mover_velocities.size()) != num_movers) {
      throw std::invalid_argument("mover_velocities must have one entry per mover");
    }
  }
};

struct ObjectBox {
  PointClass cls = PointClass::kCar;
  Eigen::Vector3d center_world0;  // box center at sweep 0 (world)
  Eigen::Vector3d velocity;       // world, m/s
  double yaw = 0.0;
  std::vector<Eigen::Vector3d> body_points;  // fixed samples in the box frame
};

namespace detail {

inline Eigen::Vector3d box_size(PointClass c) {
  switch (c) {
    case PointClass::kCar: return {4.4, 1.9, 1.6};
    case PointClass::kOtherVehicle: return {7.0, 2.5, 3.0};
    case PointClass::kPedestrian: return {0.6, 0.6, 1.8};
    case PointClass::kWheeledVru: return {1.8, 0.7, 1.6};
    default: return {1.0, 1.0, 1.0};
  }
}

inline double class_speed_scale(PointClass c) {
  // pedestrians and bikes stay at the slow end of the range
  switch (c) {
    case PointClass::kPedestrian: return 0.35;
    case PointClass::kWheeledVru: return 0.6;
    default: return 1.0;
  }
}

}  // namespace detail

/// Deterministic for a fixed seed. Object boxes keep the same body-frame
/// samples across sweeps so each labelled point has an exact correspondence
/// at t+1; the ground is resampled per sweep like a real sensor.
inline Scene generate_scene(uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };

  const int n_sweeps = spec.num_sweeps;
  const double dt = spec.sweep_interval;

  std::vector<RigidTransform> poses(n_sweeps);
  for (int k = 0; k < n_sweeps; ++k) {
    const double s = k * dt;
    const double yaw = spec.ego_yaw_rate * s;
    // integrate a constant-speed, constant-yaw-rate path
    Eigen::Vector3d pos = Eigen::Vector3d::Zero();
    if (std::abs(spec.ego_yaw_rate) < 1e-12) {
      pos.x() = spec.ego_speed * s;
    } else {
      const double r = spec.ego_speed / spec.ego_yaw_rate;
      pos.x() = r * std::sin(yaw);
      pos.y() = r * (1.0 - std::cos(yaw));
    }
    poses[k] = RigidTransform::from_yaw(yaw, pos);
  }
  const std::size_t t_idx = static_cast<std::size_t>(n_sweeps - 2);

  // Objects live in world coordinates, placed around the ego at sweep t.
  std::vector<ObjectBox> objects;
  const int n_objects = spec.num_movers + spec.num_parked;
  const double place = spec.extent * 0.6;
  for (int o = 0; o < n_objects; ++o) {
    ObjectBox box;
    box.cls = static_cast<PointClass>(1 + static_cast<int>(uniform(0.0, 4.0)) % 4);
    Eigen::Vector3d size = detail::box_size(box.cls);
    size.z() = std::min(size.z(), spec.max_object_height);
    box.yaw = uniform(-M_PI, M_PI);
    const bool moving = o < spec.num_movers;
    if (moving && !spec.mover_velocities.empty()) {
      box.velocity = spec.mover_velocities[o];
    } else if (moving) {
      const double speed = uniform(spec.mover_speed_min, spec.mover_speed_max) *
                           detail::class_speed_scale(box.cls);
      box.velocity = {speed * std::cos(box.yaw), speed * std::sin(box.yaw), 0.0};
    } else {
      box.velocity.setZero();
    }
    const Eigen::Vector3d center_t(uniform(-place, place), uniform(-place, place),
                                   spec.ground_z + 0.5 * size.z() + 0.05);
    const Eigen::Vector3d c_world_t = poses[t_idx].apply(center_t);
    box.center_world0 = c_world_t - box.velocity * (static_cast<double>(t_idx) * dt);

    const int n_pts = std::max(1, static_cast<int>(std::lround(spec.object_density * size.prod())));
    box.body_points.reserve(n_pts);
    for (int i = 0; i < n_pts; ++i) {
      box.body_points.emplace_back(uniform(-0.5, 0.5) * size.x(), uniform(-0.5, 0.5) * size.y(),
                                   uniform(-0.5, 0.5) * size.z());
    }
    objects.push_back(std::move(box));
  }

  auto object_world = [&](const ObjectBox& box, const Eigen::Vector3d& body, int k) {
    const Eigen::Matrix3d R = Eigen::AngleAxisd(box.yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    return (R * body + box.center_world0 + box.velocity * (k * dt)).eval();
  };

  Scene scene;
  scene.sweeps.resize(n_sweeps);
  const double area = 4.0 * spec.extent * spec.extent;
  const int n_ground = static_cast<int>(std::lround(spec.ground_density * area));
  for (int k = 0; k < n_sweeps; ++k) {
    const RigidTransform to_local = poses[k].inverse();
    std::size_t n_obj_pts = 0;
    for (const auto& b : objects) n_obj_pts += b.body_points.size();

    PointCloud cloud;
    cloud.timestep = k;
    cloud.points = Matrix<float>(n_ground + n_obj_pts, 3);
    std::size_t row = 0;
    for (int i = 0; i < n_ground; ++i, ++row) {
      cloud.points(row, 0) = static_cast<float>(uniform(-spec.extent, spec.extent));
      cloud.points(row, 1) = static_cast<float>(uniform(-spec.extent, spec.extent));
      cloud.points(row, 2) = static_cast<float>(spec.ground_z + uniform(-spec.ground_jitter, spec.ground_jitter));
    }
    for (const auto& b : objects) {
      for (const auto& body : b.body_points) {
        const Eigen::Vector3d q = to_local.apply(object_world(b, body, k));
        for (int c = 0; c < 3; ++c) cloud.points(row, c) = static_cast<float>(q[c]);
        ++row;
      }
    }
    scene.sweeps[k] = {std::move(cloud), poses[k]};
  }

  // Labels for sweep t: motion over one interval, rotated into the t+1 frame.
  const std::size_t n_t = scene.sweeps[t_idx].cloud.size();
  scene.gt_motion = Matrix<float>(n_t, 3);
  scene.class_id.assign(n_t, 0);
  scene.gt_speed.assign(n_t, 0.0f);
  const Eigen::Matrix3d r_next_inv = poses[t_idx + 1].rotation.transpose();
  std::size_t row = static_cast<std::size_t>(n_ground);
  for (const auto& b : objects) {
    const Eigen::Vector3d m = r_next_inv * (b.velocity * dt);
    const float speed = static_cast<float>(m.norm() / dt);
    for (std::size_t i = 0; i < b.body_points.size(); ++i, ++row) {
      for (int c = 0; c < 3; ++c) scene.gt_motion(row, c) = static_cast<float>(m[c]);
      scene.class_id[row] = static_cast<uint8_t>(b.cls);
      scene.gt_speed[row] = speed;
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Scene directory I/O
//
//   manifest.json      counts, sweep indices, row-major 4x4 poses, dtypes
//   points_<k>.bin     N_k x 3 float32 LE, k = 0..num_sweeps-1
//   gt_motion.bin      N_t x 3 float32 LE
//   gt_speed.bin       N_t float32 LE
//   class_id.bin       N_t uint8

inline void save_scene(const Scene& scene, const std::filesystem::path& dir) {
  scene.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "flow4d-scene";
  manifest["version"] = 1;
  manifest["endianness"] = "little";
  manifest["dtypes"] = {{"points", "float32"}, {"gt_motion", "float32"},
                        {"gt_speed", "float32"}, {"class_id", "uint8"}};
  manifest["sweep_interval"] = kSweepInterval;
  manifest["t_index"] = scene.t_index();
  nlohmann::json sweeps = nlohmann::json::array();
  for (std::size_t k = 0; k < scene.sweeps.size(); ++k) {
    const auto& s = scene.sweeps[k];
    const std::string file = "points_" + std::to_string(k) + ".bin";
    write_blob<float>(dir / file, s.cloud.points.data);
    sweeps.push_back({{"index", k},
                      {"timestep", s.cloud.timestep},
                      {"num_points", s.cloud.size()},
                      {"file", file},
                      {"pose", s.pose.to_matrix4()}});
  }
  manifest["sweeps"] = sweeps;
  manifest["num_points_t"] = scene.cloud_t().size();
  write_blob<float>(dir / "gt_motion.bin", scene.gt_motion.data);
  write_blob<float>(dir / "gt_speed.bin", scene.gt_speed);
  write_blob<uint8_t>(dir / "class_id.bin", scene.class_id);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Scene load_scene(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  if (manifest.value("endianness", "little") != "little") {
    throw std::runtime_error("only little-endian scenes are supported");
  }
  Scene scene;
  for (const auto& s : manifest.at("sweeps")) {
    Sweep sweep;
    const auto values = read_blob<float>(dir / s.at("file").get<std::string>(), 3);
    const std::size_t n = s.at("num_points").get<std::size_t>();
    if (values.size() != n * 3) throw std::runtime_error("point blob does not match manifest count");
    sweep.cloud.points = Matrix<float>(n, 3);
    sweep.cloud.points.data = values;
    sweep.cloud.timestep = s.value("timestep", 0);
    const auto pose = s.at("pose").get<std::vector<double>>();
    sweep.pose = RigidTransform::from_matrix4(pose);
    scene.sweeps.push_back(std::move(sweep));
  }
  const std::size_t n_t = scene.cloud_t().size();
  auto motion = read_blob<float>(dir / "gt_motion.bin", 3);
  if (motion.size() != n_t * 3) throw std::runtime_error("gt_motion.bin row count mismatch");
  scene.gt_motion = Matrix<float>(n_t, 3);
  scene.gt_motion.data = std::move(motion);
  scene.gt_speed = read_blob<float>(dir / "gt_speed.bin");
  scene.class_id = read_blob<uint8_t>(dir / "class_id.bin");
  scene.validate();
  return scene;
}

}  // namespace flow4d
