#include <gtest/gtest.h>

#include "flow4d/nn.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace flow4d;
using testutil::random_matrix;
using testutil::random_sites;

namespace {

const BlockKind kKinds[] = {BlockKind::kConv4D, BlockKind::kStdbB, BlockKind::kStdbP, BlockKind::kStdbD};

// Random values everywhere, including BN affine terms, so no layer is an identity.
void randomize(ParamStore<double>& store, uint64_t seed) {
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    const bool gamma = p.name.ends_with(".gamma");
    p.value = random_matrix<double>(p.value.rows, p.value.cols, seed++, gamma ? 0.5 : -0.5, gamma ? 1.5 : 0.5);
  }
}

ParamStore<double> block_store(const BlockConfig& cfg, uint64_t seed) {
  ParamStore<double> store;
  std::mt19937_64 rng(seed);
  add_block_params(store, "blk", cfg, rng);
  randomize(store, seed + 1);
  return store;
}

SparseVar<double> input(Tape<double>& t, const SparseTensor4D<double>& x) { return {x.sites, t.input(x.features)}; }

std::string last_bn(BlockKind k) {
  switch (k) {
    case BlockKind::kConv4D: return "blk.conv2.bn";
    case BlockKind::kStdbB: return "blk.set2.temporal.bn";
    case BlockKind::kStdbP: return "blk.set2.fuse.bn";
    case BlockKind::kStdbD: return "blk.fuse.bn";
  }
  return "";
}

}  // namespace

TEST(Block, MatchesDenseOracle) {
  uint64_t seed = 1;
  for (BlockKind kind : kKinds) {
    for (const auto& [cin, c1, c2] : {std::tuple{4, 6, 4}, std::tuple{3, 5, 7}}) {
      const BlockConfig cfg{kind, std::size_t(cin), std::size_t(c1), std::size_t(c2)};
      auto store = block_store(cfg, seed);
      const auto sites = random_sites({8, 8, 8, 5}, 0.25, seed + 2);
      const SparseTensor4D<double> x{sites, random_matrix<double>(sites->size(), cin, seed + 3)};
      ++seed;
      Tape<double> t;
      const auto y = block_forward(t, store, "blk", cfg, input(t, x));
      const auto d = oracle::from_dense(oracle::dense_block(oracle::to_dense(x), store, "blk", cfg));
      ASSERT_TRUE(d.sites->same_sites(*y.sites));
      EXPECT_LT(testutil::max_rel_diff(t.value(y.feats).data, d.features.data, 1e-6), 1e-8) << to_string(kind);
    }
  }
}

TEST(Block, KeepsCoordinatesAndWidth) {
  for (BlockKind kind : kKinds) {
    const BlockConfig cfg{kind, 3, 4, 6};
    auto store = block_store(cfg, 7);
    const auto sites = random_sites({6, 6, 4, 5}, 0.3, 8);
    Tape<double> t;
    const auto y = block_forward(t, store, "blk", cfg, {sites, t.constant(random_matrix<double>(sites->size(), 3, 9))});
    EXPECT_TRUE(y.sites->same_sites(*sites));
    EXPECT_EQ(t.value(y.feats).rows, sites->size());
    EXPECT_EQ(t.value(y.feats).cols, 6u);
  }
}

TEST(Block, ZeroWeightsLeaveReluOfResidual) {
  for (BlockKind kind : kKinds) {
    for (std::size_t cin : {4, 3}) {
      const BlockConfig cfg{kind, cin, 5, 4};
      ParamStore<double> store;
      std::mt19937_64 rng(3);
      add_block_params(store, "blk", cfg, rng);
      for (auto& p : store.params()) {
        if (p.name.ends_with(".weight") && !p.name.starts_with("blk.proj")) p.value.fill(0);
      }
      const auto sites = random_sites({6, 6, 4, 5}, 0.3, 4);
      const auto x = random_matrix<double>(sites->size(), cin, 5);
      Tape<double> t;
      const auto y = t.value(block_forward(t, store, "blk", cfg, {sites, t.constant(x)}).feats);
      for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
          double res;
          if (cin == 4) {
            res = x(r, c);
          } else {
            res = store.at("blk.proj.bias").value(0, c);
            for (std::size_t k = 0; k < cin; ++k) res += x(r, k) * store.at("blk.proj.weight").value(k, c);
          }
          EXPECT_NEAR(y(r, c), std::max(res, 0.0), 1e-12);
        }
      }
    }
  }
}

// One active site: every BN normalizes a single row to its beta, so the block
// reduces to relu(beta_last + residual) whatever the other weights are.
TEST(Block, SingleSiteClosedForm) {
  for (BlockKind kind : kKinds) {
    const BlockConfig cfg{kind, 3, 4, 5};
    auto store = block_store(cfg, 11);
    const auto sites = CoordSet::make({{2, 1, 3, 4}}, {5, 5, 5, 5});
    const auto x = random_matrix<double>(1, 3, 12);
    Tape<double> t;
    const auto y = t.value(block_forward(t, store, "blk", cfg, {sites, t.constant(x)}).feats);
    const auto& beta = store.at(last_bn(kind) + ".beta").value;
    const auto& Wp = store.at("blk.proj.weight").value;
    for (std::size_t c = 0; c < 5; ++c) {
      double e = beta(0, c) + store.at("blk.proj.bias").value(0, c);
      for (std::size_t k = 0; k < 3; ++k) e += x(0, k) * Wp(k, c);
      EXPECT_NEAR(y(0, c), std::max(e, 0.0), 1e-9) << to_string(kind);
    }
  }
}

TEST(Block, RejectsChannelMismatch) {
  const BlockConfig cfg{BlockKind::kStdbP, 4, 4, 4};
  auto store = block_store(cfg, 1);
  const auto sites = random_sites({4, 4, 4, 2}, 0.5, 2);
  Tape<double> t;
  EXPECT_THROW(block_forward(t, store, "blk", cfg, {sites, t.constant(Matrix<double>(sites->size(), 3))}),
               std::invalid_argument);
  EXPECT_THROW((BlockConfig{BlockKind::kConv4D, 0, 1, 1}.validate()), std::invalid_argument);
}

TEST(Block, GradientsMatchFiniteDifferences) {
  for (BlockKind kind : kKinds) {
    for (uint64_t seed : {21, 22, 23}) {
      const BlockConfig cfg{kind, 3, 4, 5};
      auto store = block_store(cfg, seed);
      const auto sites = random_sites({6, 6, 6, 5}, 0.15, seed + 50);
      const auto x0 = random_matrix<double>(sites->size(), 3, seed + 60);
      auto build = [&](Tape<double>& t, Var in) {
        return testutil::weighted_loss(t, block_forward(t, store, "blk", cfg, {sites, in}).feats);
      };
      const auto rx = testutil::check_input(x0, build);
      EXPECT_TRUE(rx.passed) << to_string(kind) << " input " << rx.max_rel_error;
      for (const auto& p : store.params()) {
        if (!p.trainable) continue;
        GradCheckOptions opt;
        for (std::size_t i = 0; i < p.value.size(); i += 1 + p.value.size() / 24) opt.indices.push_back(i);
        const auto r = testutil::check_param(
            store, p.name, [&](Tape<double>& t) { return build(t, t.constant(x0)); }, opt);
        EXPECT_TRUE(testutil::param_ok(r, p.name)) << to_string(kind) << " " << p.name << " " << r.max_rel_error;
      }
    }
  }
}

TEST(Block, Deterministic) {
  const BlockConfig cfg{BlockKind::kStdbD, 4, 6, 6};
  auto store = block_store(cfg, 31);
  const auto sites = random_sites({8, 8, 8, 5}, 0.3, 32);
  const auto x = random_matrix<double>(sites->size(), 4, 33);
  Tape<double> a, b;
  const auto ya = a.value(block_forward(a, store, "blk", cfg, {sites, a.constant(x)}).feats);
  const auto yb = b.value(block_forward(b, store, "blk", cfg, {sites, b.constant(x)}).feats);
  EXPECT_EQ(ya, yb);
}

TEST(Block, ParameterNames) {
  ParamStore<double> s;
  std::mt19937_64 rng(1);
  add_block_params(s, "b", BlockConfig{BlockKind::kStdbP, 16, 32, 32}, rng);
  for (const char* n : {"b.set1.spatial.weight", "b.set1.temporal.bias", "b.set1.fuse.bn.gamma", "b.set2.fuse.weight",
                        "b.proj.weight", "b.set2.spatial.bn.running_var"}) {
    EXPECT_TRUE(s.contains(n)) << n;
  }
  EXPECT_EQ(s.at("b.set1.spatial.weight").value.rows, 27u * 16);
  EXPECT_EQ(s.at("b.set1.temporal.weight").value.rows, 3u * 16);
  EXPECT_EQ(s.at("b.set1.fuse.weight").value.rows, 64u);
  EXPECT_EQ(s.at("b.set2.fuse.weight").value.cols, 32u);
}

TEST(Network, Table1Shapes) {
  const auto shapes = stage_shapes(NetworkConfig::table1());
  const std::vector<std::pair<Coord4, std::size_t>> expect = {
      {{256, 256, 16, 5}, 32}, {{128, 128, 8, 5}, 64}, {{64, 64, 4, 5}, 64},
      {{32, 32, 4, 5}, 64},    {{32, 32, 4, 5}, 64},   {{64, 64, 4, 5}, 64},
      {{128, 128, 8, 5}, 64},  {{256, 256, 16, 5}, 64}, {{512, 512, 32, 5}, 16}};
  ASSERT_EQ(shapes.size(), 9u);
  for (std::size_t s = 0; s < 9; ++s) {
    EXPECT_EQ(shapes[s].table_dims(), expect[s].first) << "stage " << s + 1;
    EXPECT_EQ(shapes[s].channels, expect[s].second) << "stage " << s + 1;
  }
  EXPECT_EQ(shapes.back().output_dims, (Coord4{512, 512, 32, 5}));
  EXPECT_NO_THROW(NetworkConfig::table1().validate());
}

TEST(Network, DeskScaleStageTrace) {
  const auto cfg = NetworkConfig::scaled({64, 64, 8}, 5);
  auto store = init_params<double>(cfg, 1);
  const auto sites = random_sites({64, 64, 8, 5}, 0.01, 2);
  Tape<double> t;
  std::vector<StageTrace> trace;
  const auto y = network_forward(t, store, cfg, {sites, t.constant(random_matrix<double>(sites->size(), 16, 3))},
                                 nullptr, &trace);
  const std::vector<Coord4> block_dims = {{64, 64, 8, 5}, {32, 32, 4, 5}, {16, 16, 2, 5}, {8, 8, 1, 5}, {4, 4, 1, 5},
                                          {8, 8, 1, 5},   {16, 16, 2, 5}, {32, 32, 4, 5}, {64, 64, 8, 5}};
  ASSERT_EQ(trace.size(), 9u);
  for (std::size_t s = 0; s < 9; ++s) EXPECT_EQ(trace[s].block_dims, block_dims[s]) << "stage " << s + 1;
  EXPECT_TRUE(y.sites->same_sites(*sites));
  EXPECT_EQ(t.value(y.feats).cols, 16u);
  EXPECT_GT(trace[3].active_sites, 0u);
  EXPECT_LE(trace[3].active_sites, trace[2].active_sites);
}

TEST(Network, OddDimsRoundUp) {
  const auto shapes = stage_shapes(NetworkConfig::scaled({20, 12, 3}, 3));
  EXPECT_EQ(shapes[0].output_dims, (Coord4{10, 6, 2, 3}));
  EXPECT_EQ(shapes[1].output_dims, (Coord4{5, 3, 1, 3}));
  EXPECT_EQ(shapes[2].output_dims, (Coord4{3, 2, 1, 3}));
  EXPECT_EQ(shapes[3].output_dims, (Coord4{2, 1, 1, 3}));
  EXPECT_EQ(shapes[8].output_dims, (Coord4{20, 12, 3, 3}));
}

TEST(Network, EmptyInputGivesEmptyOutput) {
  const auto cfg = NetworkConfig::scaled({16, 16, 4}, 5);
  auto store = init_params<double>(cfg, 1);
  const auto sites = CoordSet::make({}, cfg.grid.dims4());
  Tape<double> t;
  const auto y = network_forward(t, store, cfg, {sites, t.constant(Matrix<double>(0, 16))});
  EXPECT_EQ(y.sites->size(), 0u);
  EXPECT_EQ(t.value(y.feats).rows, 0u);
}

TEST(Network, RejectsBadInputs) {
  const auto cfg = NetworkConfig::scaled({16, 16, 4}, 5);
  auto store = init_params<double>(cfg, 1);
  const auto sites = random_sites({16, 16, 4, 5}, 0.1, 1);
  Tape<double> t;
  EXPECT_THROW(network_forward(t, store, cfg, {sites, t.constant(Matrix<double>(sites->size(), 8))}),
               std::invalid_argument);
  const auto other = random_sites({16, 16, 4, 4}, 0.1, 1);
  EXPECT_THROW(network_forward(t, store, cfg, {other, t.constant(Matrix<double>(other->size(), 16))}),
               std::invalid_argument);
}

TEST(Network, WholeNetworkGradientCheck) {
  auto cfg = NetworkConfig::scaled({16, 16, 4}, 5);
  auto store = init_params<double>(cfg, 5);
  // dense enough that the bottleneck BN layers see more than a handful of rows
  const auto sites = random_sites({16, 16, 4, 5}, 0.5, 6);
  const auto x0 = random_matrix<double>(sites->size(), 16, 7);
  auto build = [&](Tape<double>& t, Var in) {
    return testutil::weighted_loss(t, network_forward(t, store, cfg, {sites, in}).feats);
  };
  GradCheckOptions opt;
  opt.tol = 1e-3;
  for (std::size_t i = 0; i < x0.size(); i += x0.size() / 40) opt.indices.push_back(i);
  const auto rx = testutil::check_input(x0, build, opt);
  EXPECT_TRUE(rx.passed) << rx.max_rel_error;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < store.size(); k += 3) {
    const auto& p = store.params()[k];
    if (!p.trainable || p.name.starts_with("vfe") || p.name.starts_with("head")) continue;
    GradCheckOptions po = opt;
    po.indices = {0, p.value.size() / 2, p.value.size() - 1};
    const auto r =
        testutil::check_param(store, p.name, [&](Tape<double>& t) { return build(t, t.constant(x0)); }, po);
    EXPECT_TRUE(testutil::param_ok(r, p.name)) << p.name << " " << r.max_rel_error << " abs " << r.max_abs_error;
    ++checked;
  }
  EXPECT_GT(checked, 50u);
}

TEST(Config, JsonRoundTrip) {
  for (BlockKind kind : kKinds) {
    const auto c = NetworkConfig::scaled({64, 64, 8}, 3, kind);
    const auto j = to_json(c);
    const auto r = network_config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(to_json(r), j);
    EXPECT_EQ(r.block, kind);
  }
}

TEST(Config, RejectsInvalid) {
  auto j = to_json(NetworkConfig::table1());
  j["schema_version"] = 2;
  EXPECT_THROW(network_config_from_json(j), std::invalid_argument);
  j = to_json(NetworkConfig::table1());
  j["block"] = "stdb_x";
  EXPECT_THROW(network_config_from_json(j), std::invalid_argument);
  j = to_json(NetworkConfig::table1());
  j["stages"][4]["stride"] = {2, 2, 2, 1};
  EXPECT_THROW(network_config_from_json(j), std::invalid_argument);
  j = to_json(NetworkConfig::table1());
  j["stages"][0]["stride"] = {2, 2, 2, 2};
  EXPECT_THROW(network_config_from_json(j), std::invalid_argument);
  j = to_json(NetworkConfig::table1());
  j["stages"][8]["filters"] = {{32, 8}};
  EXPECT_THROW(network_config_from_json(j), std::invalid_argument);
}

TEST(Network, ParameterCountsByKind) {
  std::map<BlockKind, std::size_t> n;
  for (BlockKind k : kKinds) n[k] = init_params<float>(NetworkConfig::table1(k), 1).num_scalars();
  EXPECT_LT(n[BlockKind::kStdbB], n[BlockKind::kStdbD]);
  EXPECT_LT(n[BlockKind::kStdbD], n[BlockKind::kStdbP]);
  EXPECT_LT(n[BlockKind::kStdbP], n[BlockKind::kConv4D]);
}

TEST(Init, SeededAndKaimingScaled) {
  const auto cfg = NetworkConfig::scaled({16, 16, 4}, 5);
  const auto a = init_params<float>(cfg, 3);
  const auto b = init_params<float>(cfg, 3);
  const auto c = init_params<float>(cfg, 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  EXPECT_NE(a.at("net.s2.b0.set1.spatial.weight").value, c.at("net.s2.b0.set1.spatial.weight").value);
  const auto& w = a.at("net.s2.b0.set1.spatial.weight").value;
  double ss = 0;
  for (float v : w.data) ss += double(v) * v;
  const double fan_in = 27.0 * 32;
  EXPECT_NEAR(ss / w.size(), 2.0 / fan_in, 0.2 * 2.0 / fan_in);

  const auto& w2 = a.at("head.fc2.weight").value;
  ss = 0;
  for (float v : w2.data) ss += double(v) * v;
  const double var2 = kHeadOutputGain * kHeadOutputGain * 2.0 / cfg.head.hidden;
  EXPECT_NEAR(ss / w2.size(), var2, 0.3 * var2);
}

TEST(PointHead, ZeroFinalLayerGivesBias) {
  ParamStore<double> store;
  std::mt19937_64 rng(1);
  add_point_head_params(store, PointHeadConfig{}, rng);
  store.at("head.fc2.weight").value.fill(0);
  store.at("head.fc2.bias").value = random_matrix<double>(1, 3, 2);
  Tape<double> t;
  const Var v = t.constant(random_matrix<double>(4, 16, 3));
  const Var p = t.constant(random_matrix<double>(6, 16, 4));
  const auto y = t.value(point_head(t, store, v, {0, 3, 3, 1, 2}, p, {5, 0, 1, 2, 3}));
  ASSERT_EQ(y.rows, 5u);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(r, c), store.at("head.fc2.bias").value(0, c));
  }
}

TEST(PointHead, SameVoxelSameFeatureSameOutput) {
  ParamStore<double> store;
  std::mt19937_64 rng(5);
  add_point_head_params(store, PointHeadConfig{}, rng);
  randomize(store, 6);
  Tape<double> t;
  const Var v = t.constant(random_matrix<double>(3, 16, 7));
  auto pf = random_matrix<double>(3, 16, 8);
  std::copy(pf.row(0), pf.row(0) + 16, pf.row(2));
  const auto y = t.value(point_head(t, store, v, {1, 0, 1}, t.constant(pf), {0, 1, 2}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(0, c), y(2, c));
  EXPECT_NE(y(0, 0), y(1, 0));
}

TEST(PointHead, RejectsMissingVoxel) {
  ParamStore<double> store;
  std::mt19937_64 rng(1);
  add_point_head_params(store, PointHeadConfig{}, rng);
  Tape<double> t;
  const Var v = t.constant(Matrix<double>(2, 16));
  const Var p = t.constant(Matrix<double>(2, 16));
  EXPECT_THROW(point_head(t, store, v, {0, 2}, p, {0, 1}), std::logic_error);
  EXPECT_THROW(point_head(t, store, v, {-1, 0}, p, {0, 1}), std::logic_error);
}

TEST(Model, PredictsOneVectorPerPoint) {
  const auto cfg = NetworkConfig::scaled({32, 32, 8}, 5, BlockKind::kStdbB, 0.4);
  auto store = init_params<float>(cfg, 1);
  const auto scene = generate_scene(3, SceneSpec::desk());
  const auto m = predict_motion(store, cfg, scene);
  EXPECT_EQ(m.rows, scene.cloud_t().size());
  EXPECT_EQ(m.cols, 3u);
  EXPECT_EQ(predict_motion(store, cfg, scene), m);
  PreparedFrame<float> frame = prepare_frame<float>(scene, cfg.grid);
  Tape<float> t;
  const auto out = model_forward(t, store, cfg, frame);
  EXPECT_EQ(t.value(out.motion).rows, frame.map_t().num_in_range());
  // a training-mode pass moves the BN running statistics, and with them inference
  EXPECT_NE(predict_motion(store, cfg, scene), m);
}
