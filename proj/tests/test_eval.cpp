#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "flow4d/eval.hpp"

using namespace flow4d;

namespace {

struct Labeled {
  Matrix<float> pred, gt;
  std::vector<uint8_t> cls;
  std::vector<float> speed;
};

// Random labelled points whose gt_speed agrees with the gt vector.
Labeled random_labeled(std::size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  std::uniform_int_distribution<int> c(0, 4);
  Labeled l{Matrix<float>(n, 3), Matrix<float>(n, 3), std::vector<uint8_t>(n), std::vector<float>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    l.cls[i] = static_cast<uint8_t>(c(rng));
    const float s = l.cls[i] == 0 || i % 3 == 0 ? 0.0f : 1.0f;
    double norm = 0;
    for (int k = 0; k < 3; ++k) {
      l.gt(i, k) = s * u(rng);
      l.pred(i, k) = l.gt(i, k) + 0.1f * u(rng);
      norm += double(l.gt(i, k)) * l.gt(i, k);
    }
    l.speed[i] = static_cast<float>(std::sqrt(norm) / kSweepInterval);
  }
  return l;
}

Labeled permuted(const Labeled& l, uint64_t seed) {
  std::vector<std::size_t> p(l.cls.size());
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  Labeled o = l;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      o.pred(i, k) = l.pred(p[i], k);
      o.gt(i, k) = l.gt(p[i], k);
    }
    o.cls[i] = l.cls[p[i]];
    o.speed[i] = l.speed[p[i]];
  }
  return o;
}

Matrix<float> rows(std::initializer_list<std::array<float, 3>> r) {
  Matrix<float> m(r.size(), 3);
  std::size_t i = 0;
  for (const auto& v : r) {
    for (int k = 0; k < 3; ++k) m(i, k) = v[k];
    ++i;
  }
  return m;
}

}  // namespace

TEST(ThreeWay, ExactPredictionIsZero) {
  const auto l = random_labeled(200, 1);
  const auto r = three_way_epe(l.gt, l.gt, l.cls, l.speed);
  EXPECT_EQ(r.fd, 0.0);
  EXPECT_EQ(r.bs, 0.0);
  EXPECT_EQ(r.fs, 0.0);
  EXPECT_EQ(r.avg, 0.0);
}

TEST(ThreeWay, SingleDynamicForegroundPoint) {
  const auto gt = rows({{0.1f, 0, 0}});
  const auto pred = rows({{0.4f, 0, 0.4f}});
  const auto r = three_way_epe(pred, gt, {1}, {1.0f});
  ASSERT_TRUE(r.fd);
  EXPECT_NEAR(*r.fd, 0.5, 1e-6);
  EXPECT_FALSE(r.bs);
  EXPECT_FALSE(r.fs);
  EXPECT_NEAR(r.avg, 0.5, 1e-6);
}

TEST(ThreeWay, StaticBackgroundOnly) {
  const auto gt = rows({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  const auto pred = rows({{0.1f, 0, 0}, {0, -0.1f, 0}, {0, 0, 0.1f}});
  const auto r = three_way_epe(pred, gt, {0, 0, 0}, {0, 0, 0});
  EXPECT_NEAR(*r.bs, 0.1, 1e-7);
  EXPECT_FALSE(r.fd);
  EXPECT_FALSE(r.fs);
  EXPECT_EQ(r.n_bs, 3u);
}

TEST(ThreeWay, AverageOfComponents) {
  const auto l = random_labeled(400, 2);
  const auto r = three_way_epe(l.pred, l.gt, l.cls, l.speed);
  ASSERT_TRUE(r.fd && r.bs && r.fs);
  EXPECT_EQ(r.avg, (*r.fd + *r.bs + *r.fs) / 3.0);
  EXPECT_EQ(r.n_fd + r.n_bs + r.n_fs, 400u);
}

TEST(ThreeWay, ThresholdIsInclusive) {
  const auto gt = rows({{0.05f, 0, 0}, {0.0499f, 0, 0}});
  const auto pred = rows({{0, 0, 0}, {0, 0, 0}});
  const auto r = three_way_epe(pred, gt, {2, 2}, {0.5f, 0.499f});
  EXPECT_EQ(r.n_fd, 1u);
  EXPECT_EQ(r.n_fs, 1u);
}

TEST(ThreeWay, RejectsMisalignedInput) {
  const auto l = random_labeled(5, 3);
  EXPECT_THROW(three_way_epe(l.pred, l.gt, {0, 1}, l.speed), std::invalid_argument);
  EXPECT_THROW(three_way_epe(l.pred, l.gt, l.cls, {1.f}), std::invalid_argument);
}

TEST(Bucketed, ExactPredictionIsZero) {
  const auto l = random_labeled(300, 4);
  const auto r = bucket_normalized_epe(l.gt, l.gt, l.cls, l.speed);
  for (const auto& c : r.per_class) {
    if (c) {
      EXPECT_EQ(*c, 0.0);
    }
  }
  EXPECT_EQ(r.mean_dynamic, 0.0);
  EXPECT_EQ(r.mean_static, 0.0);
}

TEST(Bucketed, CarAtTwoMetresPerSecond) {
  // 0.2 m displacement per sweep, 0.02 m error everywhere -> 0.02 / 0.2
  const auto gt = rows({{0.2f, 0, 0}, {0, 0.2f, 0}, {0, 0, 0}});
  const auto pred = rows({{0.22f, 0, 0}, {0, 0.18f, 0}, {0, 0.02f, 0}});
  const auto r = bucket_normalized_epe(pred, gt, {1, 1, 0}, {2.f, 2.f, 0.f});
  ASSERT_TRUE(r.per_class[0]);
  EXPECT_NEAR(*r.per_class[0], 0.1, 1e-5);
  EXPECT_FALSE(r.per_class[1]);
  EXPECT_NEAR(*r.mean_dynamic, 0.1, 1e-5);
  EXPECT_NEAR(*r.mean_static, 0.02, 1e-6);
}

TEST(Bucketed, BucketsAreAveragedWithinClass) {
  // pedestrian at 1 m/s (error 0.01 -> 0.1) and at 3 m/s (error 0.06 -> 0.2)
  const auto gt = rows({{0.1f, 0, 0}, {0.3f, 0, 0}});
  const auto pred = rows({{0.11f, 0, 0}, {0.36f, 0, 0}});
  const auto r = bucket_normalized_epe(pred, gt, {3, 3}, {1.f, 3.f});
  EXPECT_NEAR(*r.per_class[2], 0.15, 1e-5);
}

TEST(Bucketed, RatioInvariance) {
  for (float k : {2.f, 3.5f}) {
    const auto gt = rows({{0.1f, 0, 0}, {0, 0.12f, 0}});
    const auto pred = rows({{0.11f, 0, 0}, {0, 0.1f, 0}});
    Matrix<float> gt2 = gt, pred2 = pred;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt2.data[i] *= k;
      pred2.data[i] *= k;
    }
    // speeds stay inside one bucket per point in both cases
    const auto a = bucket_normalized_epe(pred, gt, {4, 4}, {1.0f, 1.2f}, {0.4, 100.0});
    const auto b = bucket_normalized_epe(pred2, gt2, {4, 4}, {1.0f * k, 1.2f * k}, {0.4, 100.0});
    EXPECT_NEAR(*a.per_class[3], *b.per_class[3], 1e-5);
  }
}

TEST(Bucketed, NonNegativeAndPermutationInvariant) {
  const auto l = random_labeled(500, 5);
  const auto a = bucket_normalized_epe(l.pred, l.gt, l.cls, l.speed);
  const auto p = permuted(l, 6);
  const auto b = bucket_normalized_epe(p.pred, p.gt, p.cls, p.speed);
  for (int c = 0; c < 4; ++c) {
    ASSERT_EQ(a.per_class[c].has_value(), b.per_class[c].has_value());
    if (a.per_class[c]) {
      EXPECT_GE(*a.per_class[c], 0.0);
      EXPECT_NEAR(*a.per_class[c], *b.per_class[c], 1e-9);
    }
  }
  EXPECT_NEAR(*a.mean_static, *b.mean_static, 1e-9);
}

TEST(DynamicIou, Cases) {
  const auto l = random_labeled(300, 7);
  EXPECT_EQ(dynamic_iou(l.gt, l.gt, l.speed), 1.0);
  EXPECT_EQ(dynamic_iou(Matrix<float>(300, 3), l.gt, l.speed), 0.0);
  const auto none = Matrix<float>(4, 3);
  EXPECT_EQ(dynamic_iou(none, none, std::vector<float>(4, 0.f)), 1.0);
  // gt: 4 dynamic; pred: 2 of them, no false positives
  const auto gt = rows({{0.1f, 0, 0}, {0.1f, 0, 0}, {0.1f, 0, 0}, {0.1f, 0, 0}, {0, 0, 0}});
  const auto pred = rows({{0.1f, 0, 0}, {0.1f, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0.01f, 0, 0}});
  EXPECT_EQ(dynamic_iou(pred, gt, {1, 1, 1, 1, 0}), 0.5);
}

TEST(DynamicIou, PermutationInvariant) {
  const auto l = random_labeled(300, 8);
  const auto p = permuted(l, 9);
  EXPECT_EQ(dynamic_iou(l.pred, l.gt, l.speed), dynamic_iou(p.pred, p.gt, p.speed));
  EXPECT_NEAR(three_way_epe(l.pred, l.gt, l.cls, l.speed).avg, three_way_epe(p.pred, p.gt, p.cls, p.speed).avg, 1e-9);
}

TEST(Report, HasAllKeys) {
  const auto scene = generate_scene(1, SceneSpec::desk());
  const auto j = metrics_report(Matrix<float>(scene.gt_motion.rows, 3), scene);
  for (const char* k : {"three_way", "bucketed", "dynamic_iou", "epe"}) EXPECT_TRUE(j.contains(k)) << k;
  for (const char* k : {"car", "other_vehicle", "pedestrian", "wheeled_vru", "mean_dynamic", "mean_static"}) {
    EXPECT_TRUE(j["bucketed"].contains(k)) << k;
  }
  EXPECT_EQ(j["dynamic_iou"], 0.0);
}

namespace {

FlopReport count_layers(const std::shared_ptr<const CoordSet>& sites,
                        const std::vector<std::pair<KernelShape, std::size_t>>& layers, std::size_t cin) {
  FlopReport rep;
  FlopExec ex(rep);
  ShapeValue v{sites, cin, {}};
  int i = 0;
  for (const auto& [k, cout] : layers) v = ex.conv("l" + std::to_string(i++), v, k, cout);
  return rep;
}

}  // namespace

TEST(Flops, SingleVoxelFullKernel) {
  const auto s = CoordSet::make({{3, 3, 3, 2}}, {8, 8, 8, 5});
  EXPECT_EQ(count_layers(s, {{KernelShape::full4d(), 16}}, 16).total, 512u);
}

TEST(Flops, SingleVoxelDecomposed) {
  const auto s = CoordSet::make({{3, 3, 3, 2}}, {8, 8, 8, 5});
  const auto r = count_layers(
      s, {{KernelShape::spatial(), 16}, {KernelShape::temporal(), 16}, {KernelShape::pointwise(), 16}}, 16);
  EXPECT_EQ(r.total, 1536u);
}

TEST(Flops, ConvCountsPairs) {
  const auto s = CoordSet::make({{1, 1, 1, 0}, {2, 1, 1, 0}, {2, 2, 1, 1}}, {4, 4, 4, 2});
  // full4d pairs: 3 centre, the w-neighbours twice, (1,1,1,0)-(2,2,1,1) twice, (2,1,1,0)-(2,2,1,1) twice
  EXPECT_EQ(count_layers(s, {{KernelShape::full4d(), 5}}, 3).total, 2u * 3 * 5 * 9);
}

TEST(Flops, DeskNetworkIsAdditiveOverStages) {
  const auto cfg = NetworkConfig::scaled({64, 64, 8}, 5);
  const auto scene = generate_scene(2, SceneSpec::desk());
  const auto frame = prepare_frame<float>(scene, cfg.grid);
  const auto r = count_flops(cfg, frame.sites);
  uint64_t sum = 0;
  for (const auto& [stage, f] : r.per_stage()) {
    EXPECT_GE(stage, 1);
    EXPECT_LE(stage, 9);
    sum += f;
  }
  EXPECT_EQ(sum, r.total);
  uint64_t layers = 0;
  for (const auto& l : r.layers) layers += l.flops;
  EXPECT_EQ(layers, r.total);
  EXPECT_EQ(count_flops(cfg, frame.sites).total, r.total);
}

TEST(Flops, FullScaleOrderingAndRatio) {
  const auto scene = generate_scene(1, SceneSpec{});
  auto cfg = NetworkConfig::table1();
  const auto frame = prepare_frame<float>(scene, cfg.grid);
  std::map<BlockKind, double> f;
  for (BlockKind k : {BlockKind::kConv4D, BlockKind::kStdbB, BlockKind::kStdbP, BlockKind::kStdbD}) {
    cfg.block = k;
    f[k] = static_cast<double>(count_flops(cfg, frame.sites).total);
  }
  EXPECT_LT(f[BlockKind::kStdbB], f[BlockKind::kStdbD]);
  EXPECT_LT(f[BlockKind::kStdbD], f[BlockKind::kStdbP]);
  EXPECT_LT(f[BlockKind::kStdbP], f[BlockKind::kConv4D]);
  const double ratio = f[BlockKind::kStdbB] / f[BlockKind::kConv4D];
  EXPECT_GE(ratio, 0.30);
  EXPECT_LE(ratio, 0.50);
}

TEST(Flops, RejectsWrongGrid) {
  const auto s = CoordSet::make({{0, 0, 0, 0}}, {8, 8, 8, 5});
  EXPECT_THROW(count_flops(NetworkConfig::scaled({16, 16, 4}, 5), s), std::invalid_argument);
}
