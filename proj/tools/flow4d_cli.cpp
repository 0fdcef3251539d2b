// flow4d command line: gen | train | infer | eval | flops | bench
#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "flow4d/eval.hpp"
#include "flow4d/train.hpp"

namespace fs = std::filesystem;
using namespace flow4d;

namespace {

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw std::runtime_error("no such file: " + p.string());
}

void require_scene(const fs::path& dir) {
  if (!fs::is_regular_file(dir / "manifest.json")) throw std::runtime_error("not a scene directory: " + dir.string());
}

NetworkConfig load_config(const fs::path& p) {
  require_file(p);
  return network_config_from_json(nlohmann::json::parse(read_file(p)));
}

// sorted scene subdirectories of dir, or dir itself when it is a scene
std::vector<Scene> load_scene_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("no such directory: " + dir.string());
  std::vector<fs::path> dirs;
  if (fs::is_regular_file(dir / "manifest.json")) {
    dirs.push_back(dir);
  } else {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::is_regular_file(e.path() / "manifest.json")) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
  }
  if (dirs.empty()) throw std::runtime_error("no scenes under " + dir.string());
  std::vector<Scene> out;
  for (const auto& d : dirs) out.push_back(load_scene(d));
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    write_file(path, text);
  }
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct GenArgs {
  std::string out;
  int scenes = 1;
  uint64_t seed = 0;
  std::optional<int> movers;
  std::optional<double> extent;
  std::string preset = "desk";
};

int run_gen(const GenArgs& a) {
  SceneSpec spec = a.preset == "desk" ? SceneSpec::desk() : SceneSpec{};
  if (a.movers) spec.num_movers = *a.movers;
  if (a.extent) spec.extent = *a.extent;
  spec.validate();
  for (int i = 0; i < a.scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03d", i);
    save_scene(generate_scene(a.seed + static_cast<uint64_t>(i), spec), fs::path(a.out) / name);
  }
  std::cerr << "wrote " << a.scenes << " scene(s) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, val, history;
  uint64_t seed = 0;
  int epochs = 15;
  double lr = 1e-3;
  int64_t max_steps = 0;
  int batch = 1;
  int accumulate = 1;
  int eval_every = 1;
};

int run_train(const TrainArgs& a) {
  const NetworkConfig net = load_config(a.config);
  const auto data = load_scene_dir(a.data);
  const auto val = a.val.empty() ? std::vector<Scene>{} : load_scene_dir(a.val);
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.adam.lr = a.lr;
  tc.max_steps = a.max_steps;
  tc.batch_size = a.batch;
  tc.accumulate = a.accumulate;
  tc.eval_every = a.eval_every;
  const auto res = train_loop<float>(data, net, tc, val, std::nullopt, [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " loss " << r.loss;
    if (r.mean_dynamic_epe) std::cerr << " dyn_epe " << *r.mean_dynamic_epe;
    std::cerr << "\n";
  });
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_model(a.out, res.store, net, tc.adam);
  write_text(a.history.empty() ? a.out + ".history.csv" : a.history, history_csv(res.history));
  return 0;
}

struct InferArgs {
  std::string ckpt, scene, out;
};

int run_infer(const InferArgs& a) {
  require_file(a.ckpt);
  require_scene(a.scene);
  NetworkConfig net;
  auto store = load_model<float>(a.ckpt, net);
  const Scene scene = load_scene(a.scene);
  const auto pred = predict_motion(store, net, scene);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_blob<float>(a.out, pred.data);
  nlohmann::json side = {{"format", "flow4d-pred"},
                         {"dtype", "float32"},
                         {"endianness", "little"},
                         {"rows", pred.rows},
                         {"cols", 3},
                         {"block", to_string(net.block)},
                         {"checkpoint", a.ckpt},
                         {"scene", a.scene}};
  write_file(a.out + ".json", side.dump(2) + "\n");
  return 0;
}

struct EvalArgs {
  std::string pred, scene, out;
};

int run_eval(const EvalArgs& a) {
  require_file(a.pred);
  require_scene(a.scene);
  const Scene scene = load_scene(a.scene);
  Matrix<float> pred(scene.cloud_t().size(), 3);
  auto values = read_blob<float>(a.pred, 3);
  if (values.size() != pred.data.size()) {
    throw std::runtime_error("prediction has " + std::to_string(values.size() / 3) + " rows, scene has " +
                             std::to_string(pred.rows));
  }
  pred.data = std::move(values);
  write_text(a.out, metrics_report(pred, scene).dump(2) + "\n");
  return 0;
}

struct FlopsArgs {
  std::string config, scene, block, out;
};

int run_flops(const FlopsArgs& a) {
  NetworkConfig net = load_config(a.config);
  if (!a.block.empty()) net.block = parse_block_kind(a.block);
  require_scene(a.scene);
  const auto frame = prepare_frame<float>(load_scene(a.scene), net.grid);
  const auto rep = count_flops(net, frame.sites);
  std::map<int, std::array<uint64_t, 3>> rows;
  for (const auto& l : rep.layers) {
    auto& r = rows[l.stage];
    r[l.op == "conv" ? 0 : l.op == "bn" ? 1 : 2] += l.flops;
  }
  std::ostringstream os;
  os << "block,stage,conv_flops,bn_flops,relu_flops,total_flops\n";
  std::array<uint64_t, 3> sum{};
  for (const auto& [stage, r] : rows) {
    os << to_string(net.block) << ',' << stage << ',' << r[0] << ',' << r[1] << ',' << r[2] << ','
       << r[0] + r[1] + r[2] << '\n';
    for (int i = 0; i < 3; ++i) sum[i] += r[i];
  }
  os << to_string(net.block) << ",total," << sum[0] << ',' << sum[1] << ',' << sum[2] << ',' << rep.total << '\n';
  write_text(a.out, os.str());
  return 0;
}

struct BenchArgs {
  std::string config, scene, out;
  int repeat = 5;
  uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  const NetworkConfig net = load_config(a.config);
  require_scene(a.scene);
  if (a.repeat < 1) throw std::invalid_argument("--repeat must be >= 1");
  const Scene scene = load_scene(a.scene);
  auto store = init_params<float>(net, a.seed);
  std::array<std::vector<double>, 4> t;
  for (int rep = 0; rep < a.repeat; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    const auto warped = warp_to_last(scene);
    const double warp_ms = ms_since(t0);
    t0 = std::chrono::steady_clock::now();
    // prepare_frame warps again internally; its warp share is subtracted
    PreparedFrame<float> frame = prepare_frame<float>(scene, net.grid);
    const double vox_ms = std::max(0.0, ms_since(t0) - warp_ms);
    Tape<float> tape(false);
    tape.training = false;
    t0 = std::chrono::steady_clock::now();
    auto out = voxel_forward(tape, store, net, frame);
    const double net_ms = ms_since(t0);
    t0 = std::chrono::steady_clock::now();
    head_forward(tape, store, frame, out);
    const double head_ms = ms_since(t0);
    t[0].push_back(warp_ms);
    t[1].push_back(vox_ms);
    t[2].push_back(net_ms);
    t[3].push_back(head_ms);
    (void)warped;
  }
  const char* names[] = {"warping", "voxelization", "network", "head"};
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << "stage,mean_ms,min_ms\n";
  double total = 0;
  for (int s = 0; s < 4; ++s) {
    double mean = 0;
    for (double v : t[s]) mean += v;
    mean /= t[s].size();
    total += mean;
    os << names[s] << ',' << mean << ',' << *std::min_element(t[s].begin(), t[s].end()) << '\n';
  }
  os << "total," << total << ",\n";
  write_text(a.out, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow4D scene flow: synthetic data, training, inference, metrics and FLOP counts"};
  app.require_subcommand(1, 1);
  int threads = 0;
  app.add_option("--threads", threads, "Cap on OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Write synthetic scene directories");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--scenes", gen.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  c_gen->add_option("--seed", gen.seed, "Seed of the first scene; scene i uses seed + i");
  c_gen->add_option("--movers", gen.movers, "Moving objects per scene")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--extent", gen.extent, "Half-width of the sampled square (m)")->check(CLI::PositiveNumber);
  c_gen->add_option("--preset", gen.preset, "Scene preset")->check(CLI::IsMember({"desk", "default"}));

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model with Adam");
  c_train->add_option("--config", tr.config, "Network config JSON")->required();
  c_train->add_option("--data", tr.data, "Directory of training scenes")->required();
  c_train->add_option("--out", tr.out, "Output checkpoint")->required();
  c_train->add_option("--seed", tr.seed, "Init and shuffle seed");
  c_train->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::PositiveNumber);
  c_train->add_option("--lr", tr.lr, "Adam learning rate");
  c_train->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps (0: no limit)");
  c_train->add_option("--batch", tr.batch, "Scenes per forward pass")->check(CLI::PositiveNumber);
  c_train->add_option("--accumulate", tr.accumulate, "Batches per optimizer step")->check(CLI::PositiveNumber);
  c_train->add_option("--eval-every", tr.eval_every, "Validate every n epochs (0: only at the end)");
  c_train->add_option("--val", tr.val, "Directory of validation scenes (default: training scenes)");
  c_train->add_option("--history", tr.history, "History CSV (default: <out>.history.csv)");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Predict per-point motion for sweep t");
  c_infer->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
  c_infer->add_option("--scene", inf.scene, "Scene directory")->required();
  c_infer->add_option("--out", inf.out, "Output pred_motion.bin (Nx3 f32 LE, sidecar <out>.json)")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score a prediction against a scene");
  c_eval->add_option("--pred", ev.pred, "Prediction blob (Nx3 f32 LE)")->required();
  c_eval->add_option("--scene", ev.scene, "Scene directory")->required();
  c_eval->add_option("--out", ev.out, "Output JSON report ('-' for stdout)")->required();

  FlopsArgs fl;
  auto* c_flops = app.add_subcommand("flops", "Per-stage FLOP counts of the voxel network as CSV");
  c_flops->add_option("--config", fl.config, "Network config JSON")->required();
  c_flops->add_option("--scene", fl.scene, "Scene directory")->required();
  c_flops->add_option("--block", fl.block, "Override the block kind")
      ->check(CLI::IsMember({"conv4d", "stdb_b", "stdb_p", "stdb_d"}));
  c_flops->add_option("--out", fl.out, "Output CSV (default: stdout)");

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "Wall-clock time per pipeline stage");
  c_bench->add_option("--config", bn.config, "Network config JSON")->required();
  c_bench->add_option("--scene", bn.scene, "Scene directory")->required();
  c_bench->add_option("--repeat", bn.repeat, "Repetitions")->check(CLI::PositiveNumber);
  c_bench->add_option("--seed", bn.seed, "Parameter init seed");
  c_bench->add_option("--out", bn.out, "Output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*c_gen) return run_gen(gen);
    if (*c_train) return run_train(tr);
    if (*c_infer) return run_infer(inf);
    if (*c_eval) return run_eval(ev);
    if (*c_flops) return run_flops(fl);
    if (*c_bench) return run_bench(bn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
