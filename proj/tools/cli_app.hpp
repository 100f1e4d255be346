#pragma once

// dqs3d command-line front end. run() is separate from main() so tests can
// drive it with captured streams.
//
// Option precedence: built-in defaults < --config JSON < DQS_* environment
// variables < command-line flags.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "CLI11.hpp"
#include "dqs3d/dqs3d.hpp"

namespace dqs3d::cli {

namespace fs = std::filesystem;

struct UsageError : Error {
  using Error::Error;
};

/// Raised when a checked property fails; the message is the counterexample.
struct InvariantViolation : Error {
  using Error::Error;
};

struct CliConfig {
  std::string subcommand;
  double voxel_size = 0.01;
  double tau_center = 0.40;
  double tau_cls = 0.20;
  double tau_box = 0.30;
  double lambda_box = 1.00;
  double lambda_center = 0.25;
  double lambda_semantic = 0.50;
  double alpha = 0.999;
  std::uint64_t seed = 0;
  double labeled_fraction = 0.1;
  std::uint64_t steps = 500;
  std::string output;

  unsigned threads = default_threads();
  std::uint64_t samples = 100000;
  std::uint64_t scenes = 20;
  double translation = 0.5;
  double noise_sigma = 0.05;
  double learning_rate = 0.5;
  double warmup_fraction = 0.30;
  std::uint64_t eval_every = 10;
  bool qec = true;
  bool consistency = true;
  std::string data;
  std::string scene;
  std::string predictions;
  std::string gt;
  std::string histogram;
  std::string params_out;
};

namespace detail {

using Ref = std::variant<double*, std::uint64_t*, unsigned*, bool*, std::string*>;

struct Field {
  std::string name;
  Ref ref;
  std::string help;
};

inline std::vector<Field> fields(CliConfig& c) {
  return {
      {"voxel_size", &c.voxel_size, "voxel edge length in meters"},
      {"tau_center", &c.tau_center, "teacher centerness threshold"},
      {"tau_cls", &c.tau_cls, "teacher class-confidence threshold"},
      {"tau_box", &c.tau_box, "Huber threshold of the box consistency term"},
      {"lambda_box", &c.lambda_box, "box consistency weight"},
      {"lambda_center", &c.lambda_center, "centerness consistency weight"},
      {"lambda_semantic", &c.lambda_semantic, "semantic consistency weight"},
      {"alpha", &c.alpha, "EMA decay of the teacher"},
      {"seed", &c.seed, "random seed"},
      {"labeled_fraction", &c.labeled_fraction, "fraction of generated scenes that carry labels"},
      {"steps", &c.steps, "training steps"},
      {"output", &c.output, "output path (stdout if empty)"},
      {"threads", &c.threads, "worker threads"},
      {"samples", &c.samples, "number of random samples"},
      {"scenes", &c.scenes, "number of generated scenes"},
      {"translation", &c.translation, "translation half-range in meters"},
      {"noise_sigma", &c.noise_sigma, "mock predictor delta noise"},
      {"learning_rate", &c.learning_rate, "SGD step size"},
      {"warmup_fraction", &c.warmup_fraction, "fraction of training spent ramping up consistency"},
      {"eval_every", &c.eval_every, "steps between transductive evaluations"},
      {"qec", &c.qec, "apply quantization error correction to the student view"},
      {"consistency", &c.consistency, "enable the teacher-student consistency loss"},
      {"data", &c.data, "directory of scene files"},
      {"scene", &c.scene, "scene file"},
      {"predictions", &c.predictions, "predictions JSON"},
      {"gt", &c.gt, "ground-truth scene file or directory"},
      {"histogram", &c.histogram, "histogram CSV path"},
      {"params_out", &c.params_out, "write final parameters as JSON"},
  };
}

inline std::string flag_name(std::string name) {
  std::replace(name.begin(), name.end(), '_', '-');
  return "--" + name;
}

inline std::string env_name(std::string name) {
  for (char& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return "DQS_" + name;
}

inline void apply_config_json(const json& j, CliConfig& cfg, const std::string& source) {
  if (!j.is_object()) throw UsageError(source + ": config must be a JSON object");
  auto table = fields(cfg);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto f = std::find_if(table.begin(), table.end(), [&](const Field& x) { return x.name == it.key(); });
    if (f == table.end()) throw UsageError(source + ": unknown config key \"" + it.key() + "\"");
    const json& v = it.value();
    const std::string where = source + ": \"" + it.key() + "\"";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw UsageError(where + " must be a boolean");
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw UsageError(where + " must be a string");
          } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw UsageError(where + " must be a number");
          } else {
            if (!v.is_number_unsigned()) throw UsageError(where + " must be a non-negative integer");
          }
          *p = v.get<T>();
        },
        f->ref);
  }
}

/// Finds --config in argv before the real parse so its values can sit
/// beneath environment variables and flags.
inline std::optional<std::string> find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a path");
      return args[i + 1];
    }
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  if (const char* env = std::getenv("DQS_CONFIG"); env != nullptr && *env != '\0') return std::string(env);
  return std::nullopt;
}

inline void add_fields(CLI::App* sub, CliConfig& cfg, const std::vector<std::string>& names) {
  sub->add_option("--config")->description("JSON config file (read before parsing)");
  for (const Field& f : fields(cfg)) {
    if (std::find(names.begin(), names.end(), f.name) == names.end()) continue;
    std::visit([&](auto* p) { sub->add_option(flag_name(f.name), *p, f.help)->envname(env_name(f.name)); }, f.ref);
  }
}

/// Writes to --output, or to `out` when no path was given.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) {
    if (path.empty()) {
      stream_ = &fallback;
    } else {
      file_.open(path, std::ios::binary);
      if (!file_) throw UsageError("cannot open output file " + path);
      stream_ = &file_;
    }
  }
  std::ostream& operator*() { return *stream_; }

 private:
  std::ofstream file_;
  std::ostream* stream_;
};

inline bool is_sidecar(const fs::path& p) {
  if (p.extension() != ".json") return false;
  fs::path xyz = p;
  return fs::exists(xyz.replace_extension(".xyz")) || fs::exists(p.parent_path() / (p.stem().string() + ".txt"));
}

/// Scene files of a directory in filename order, or a single file.
inline std::vector<Scene> load_scenes(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("no such file or directory: " + path);
  if (!fs::is_directory(path)) return {load_scene(path)};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    const fs::path& p = entry.path();
    const std::string ext = p.extension().string();
    if (!entry.is_regular_file()) continue;
    if (ext == ".xyz" || ext == ".txt" || (ext == ".json" && !is_sidecar(p))) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no scene files in " + path);
  std::vector<Scene> out;
  for (const fs::path& p : files) out.push_back(load_scene(p));
  return out;
}

inline SimConfig sim_config(const CliConfig& c) {
  SimConfig s;
  s.voxel_size = c.voxel_size;
  s.labeled_fraction = c.labeled_fraction;
  s.translation_half_range = c.translation;
  s.seed = c.seed;
  s.validate();
  return s;
}

inline FilterConfig filter_config(const CliConfig& c) {
  FilterConfig f{c.tau_center, c.tau_cls};
  f.validate();
  return f;
}

inline std::string key_string(VoxelKey k) {
  return "(" + std::to_string(k.i) + ", " + std::to_string(k.j) + ", " + std::to_string(k.k) + ")";
}

inline std::string point_string(Point3 p) { return "(" + sig9(p.x) + ", " + sig9(p.y) + ", " + sig9(p.z) + ")"; }

// ---------------------------------------------------------------- commands

inline int cmd_qec_check(const CliConfig& c, std::ostream& out) {
  if (c.samples == 0) throw UsageError("--samples must be positive");
  QecSampler sampler;
  sampler.voxel_size = c.voxel_size;
  sampler.translation_half_range = c.translation;
  const VoxelSize s(c.voxel_size);
  constexpr std::size_t kChunk = 4096;
  const std::size_t n_chunks = (c.samples + kChunk - 1) / kChunk;
  struct Failure {
    std::size_t index = 0;
    std::string text;
  };
  std::vector<std::optional<Failure>> failures(n_chunks);
  parallel_for(n_chunks, c.threads, [&](std::size_t chunk) {
    std::mt19937_64 rng(mix_seed(c.seed, chunk));
    const std::size_t end = std::min(c.samples, (chunk + 1) * kChunk);
    for (std::size_t i = chunk * kChunk; i < end; ++i) {
      const Transform t = sampler.sample_transform(rng);
      const Point3 p = sampler.sample_point(rng);
      const Point3 r = compensation(p, t, s).r_prime;
      const VoxelKey got = quantize(apply_transform(p, t) + r, s);
      const VoxelKey want = map_anchor(quantize(p, s), t, s);
      if (!(got == want)) {
        failures[chunk] = Failure{i, "sample " + std::to_string(i) + ": point " + point_string(p) + ", quarter_turns " +
                                         std::to_string(t.quarter_turns) + ", translation " +
                                         point_string(t.translation) + " -> key " + key_string(got) + ", expected " +
                                         key_string(want)};
        return;
      }
    }
  });
  for (const auto& f : failures) {
    if (f) {
      out << "commutativity violated at " << f->text << '\n';
      throw InvariantViolation("qec-check failed");
    }
  }
  Sink sink(c.output, out);
  *sink << c.samples << '/' << c.samples << " commutativity checks passed\n";
  if (!c.output.empty()) out << c.samples << '/' << c.samples << " commutativity checks passed\n";
  return 0;
}

inline int cmd_qec_stats(const CliConfig& c, std::ostream& out) {
  if (c.samples == 0) throw UsageError("--samples must be positive");
  QecSampler sampler;
  sampler.voxel_size = c.voxel_size;
  sampler.translation_half_range = c.translation;
  const StatReport r = qec_statistics(c.samples, sampler, c.seed, c.threads);
  if (!c.histogram.empty()) {
    Sink h(c.histogram, out);
    write_histogram_csv(*h, r);
  }
  Sink sink(c.output, out);
  *sink << stat_report_json(r).dump(2) << '\n';
  return 0;
}

inline int cmd_roundtrip(const CliConfig& c, std::ostream& out) {
  if (c.samples == 0) throw UsageError("--samples must be positive");
  constexpr double kTol = 1e-9;
  std::mt19937_64 rng(mix_seed(c.seed, 0x52));
  std::uniform_real_distribution<double> pos(-5.0, 5.0);
  std::uniform_real_distribution<double> near(-1.0, 1.0);
  std::uniform_real_distribution<double> dim(0.1, 3.0);
  std::uniform_real_distribution<double> yaw(-std::numbers::pi, std::numbers::pi);
  double worst = 0.0;
  std::size_t checks = 0;
  for (std::size_t i = 0; i < c.samples; ++i) {
    OrientedBox b;
    b.center = {pos(rng), pos(rng), pos(rng)};
    b.dims = {dim(rng), dim(rng), dim(rng)};
    b.yaw = yaw(rng);
    const Point3 a = b.center + Point3{near(rng), near(rng), near(rng)};
    const Point3 dr{near(rng), near(rng), near(rng)};
    for (int k = 0; k < 4; ++k) {
      const Transform t{k, dr};
      const BoxDeltas lhs = transform_deltas(encode(b, a), k);
      const BoxDeltas rhs = encode(transform_box(b, t), apply_transform(a, t));
      double err = 0.0;
      for (std::size_t m = 0; m < 8; ++m) err = std::max(err, std::abs(lhs[m] - rhs[m]));
      worst = std::max(worst, err);
      ++checks;
      if (!(err <= kTol)) {
        out << "roundtrip violated at sample " << i << ", quarter_turns " << k << ": max delta error " << sig9(err)
            << '\n';
        throw InvariantViolation("roundtrip failed");
      }
    }
  }
  Sink sink(c.output, out);
  *sink << checks << '/' << checks << " roundtrip checks passed, max error " << sig9(worst) << '\n';
  return 0;
}

struct ViewPair {
  Scene scene;
  Transform transform;
  PredictionGrid teacher;
  PredictionGrid student;
};

/// Mock teacher on the raw scene and mock student on the augmented one.
inline ViewPair mock_views(const Scene& scene, const CliConfig& c, std::uint64_t stream) {
  const VoxelSize s(c.voxel_size);
  std::mt19937_64 rng(mix_seed(c.seed, stream));
  const Transform t = sample_transform(rng, c.translation);
  MockConfig mc;
  mc.noise_sigma = c.noise_sigma;
  const Scene moved = transform_scene(scene, t, s, c.qec);
  return {scene, t, mock_predict(scene, s, mc, mix_seed(c.seed, 2 * stream + 1)),
          mock_predict(moved, s, mc, mix_seed(c.seed, 2 * stream + 2))};
}

inline int cmd_match_compare(const CliConfig& c, std::ostream& out) {
  if (c.scenes == 0) throw UsageError("--scenes must be positive");
  const FilterConfig filter = filter_config(c);
  const std::vector<Scene> scenes = c.data.empty() ? generate_dataset(sim_config(c), c.scenes) : load_scenes(c.data);
  std::vector<PairCounts> counts(scenes.size());
  parallel_for(scenes.size(), c.threads, [&](std::size_t i) {
    const ViewPair v = mock_views(scenes[i], c, i);
    counts[i] = count_pairs(v.teacher, v.student, v.transform, filter);
  });
  double dense = 0.0;
  double prop = 0.0;
  Sink sink(c.output, out);
  *sink << "scene,pairs_dense,pairs_proposal\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    *sink << i << ',' << counts[i].dense << ',' << counts[i].proposal << '\n';
    dense += static_cast<double>(counts[i].dense);
    prop += static_cast<double>(counts[i].proposal);
  }
  const auto n = static_cast<double>(counts.size());
  out << "mean filtered pairs: dense " << sig9(dense / n) << ", proposal " << sig9(prop / n) << '\n';
  if (!(dense > prop)) throw InvariantViolation("dense pairs do not exceed proposal pairs");
  return 0;
}

inline int cmd_match(const CliConfig& c, std::ostream& out) {
  if (c.scene.empty()) throw UsageError("match needs --scene");
  const Scene scene = load_scenes(c.scene).front();
  const ViewPair v = mock_views(scene, c, 0);
  const MatchSet m = dense_match(align_teacher(v.teacher, v.transform), v.student, filter_config(c));
  Sink sink(c.output, out);
  write_matches_jsonl(*sink, m);
  return 0;
}

inline int cmd_simulate(const CliConfig& c, std::ostream& out) {
  if (c.scenes == 0) throw UsageError("--scenes must be positive");
  if (c.output.empty()) throw UsageError("simulate needs --output DIR");
  const std::vector<Scene> scenes = generate_dataset(sim_config(c), c.scenes);
  fs::create_directories(c.output);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.json", i);
    save_scene(fs::path(c.output) / name, scenes[i]);
  }
  out << "wrote " << scenes.size() << " scenes to " << c.output << '\n';
  return 0;
}

inline SelfTrainConfig train_config(const CliConfig& c) {
  SelfTrainConfig t;
  t.voxel_size = c.voxel_size;
  t.translation_half_range = c.translation;
  t.loss = LossConfig{c.tau_box, c.lambda_box, c.lambda_center, c.lambda_semantic, c.warmup_fraction};
  t.filter = filter_config(c);
  t.alpha = c.alpha;
  t.learning_rate = c.learning_rate;
  t.steps = c.steps;
  t.use_qec = c.qec;
  t.consistency = c.consistency;
  t.seed = c.seed;
  t.threads = c.threads;
  t.eval_every = std::max<std::size_t>(1, c.eval_every);
  return t;
}

inline int cmd_train(const CliConfig& c, std::ostream& out) {
  if (c.steps == 0) throw UsageError("--steps must be positive");
  const std::vector<Scene> scenes = c.data.empty() ? generate_dataset(sim_config(c), c.scenes) : load_scenes(c.data);
  const SelfTrainResult r = self_train(scenes, train_config(c));
  {
    Sink sink(c.output, out);
    write_trace_csv(*sink, r.trace);
  }
  if (!c.params_out.empty()) {
    Sink p(c.params_out, out);
    const json j = {{"student", params_json(r.student)}, {"teacher", params_json(r.teacher)}};
    *p << round_sig9(j).dump() << '\n';
  }
  if (!c.output.empty()) {
    const TraceRow& last = r.trace.back();
    out << "trained " << c.steps << " steps: sup_loss " << sig9(last.sup_loss) << ", cons_loss "
        << sig9(last.cons_loss) << ", coverage25 " << sig9(last.coverage25) << '\n';
  }
  return 0;
}

inline int cmd_eval(const CliConfig& c, std::ostream& out) {
  if (c.predictions.empty() || c.gt.empty()) throw UsageError("eval needs --predictions and --gt");
  if (!fs::exists(c.predictions)) throw UsageError("no such file: " + c.predictions);
  const auto preds = predictions_from_json(
      dqs3d::detail::parse_json_text(dqs3d::detail::read_file(c.predictions), c.predictions), c.predictions);
  const std::vector<Scene> scenes = load_scenes(c.gt);
  std::vector<std::vector<OrientedBox>> gt;
  for (const Scene& s : scenes) gt.push_back(s.boxes);
  if (preds.size() != gt.size()) {
    throw UsageError("predictions cover " + std::to_string(preds.size()) + " scenes, ground truth " +
                     std::to_string(gt.size()));
  }
  Sink sink(c.output, out);
  *sink << metrics_json(evaluate(preds, gt)).dump(2) << '\n';
  return 0;
}

}  // namespace detail

/// Parses and runs one invocation. Exit codes: 0 success, 1 invariant
/// violation, 2 usage error.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  using namespace detail;
  CliConfig cfg;
  try {
    if (auto path = find_config(args)) {
      if (!fs::exists(*path)) throw UsageError("no such config file: " + *path);
      apply_config_json(dqs3d::detail::parse_json_text(dqs3d::detail::read_file(*path), *path), cfg, *path);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  CLI::App app{"Quantization-aware dense matching toolkit for voxel detectors", "dqs3d"};
  app.require_subcommand(1);
  const std::vector<std::string> common{"seed", "threads", "output", "voxel_size"};
  auto sub = [&](const std::string& name, const std::string& help, std::vector<std::string> extra) {
    CLI::App* s = app.add_subcommand(name, help);
    extra.insert(extra.end(), common.begin(), common.end());
    add_fields(s, cfg, extra);
    return s;
  };
  const std::vector<std::string> filter{"tau_center", "tau_cls"};
  auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  CLI::App* qec_check = sub("qec-check", "verify voxelize/transform commutativity with compensation", {"samples", "translation"});
  CLI::App* qec_stats = sub("qec-stats", "statistics of the compensation term", {"samples", "translation", "histogram"});
  CLI::App* roundtrip = sub("roundtrip", "box delta transform consistency sweep", {"samples"});
  CLI::App* match_compare = sub("match-compare", "dense vs proposal pair counts on synthetic scenes",
                                with({"scenes", "data", "labeled_fraction", "noise_sigma", "translation", "qec"}, filter));
  CLI::App* match = sub("match", "dense match mock teacher/student views of a scene (JSONL)",
                        with({"scene", "noise_sigma", "translation", "qec"}, filter));
  CLI::App* simulate = sub("simulate", "generate synthetic scenes", {"scenes", "labeled_fraction", "translation"});
  CLI::App* train = sub("train", "mean-teacher self-training of the toy detector",
                        with({"data", "scenes", "labeled_fraction", "steps", "tau_box", "lambda_box", "lambda_center",
                              "lambda_semantic", "alpha", "learning_rate", "warmup_fraction", "eval_every", "qec",
                              "consistency", "translation", "params_out"},
                             filter));
  CLI::App* eval = sub("eval", "coverage and mAP of saved predictions", {"predictions", "gt"});

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (cfg.threads == 0) throw UsageError("--threads must be positive");
    (void)VoxelSize(cfg.voxel_size);
    if (qec_check->parsed()) return cmd_qec_check(cfg, out);
    if (qec_stats->parsed()) return cmd_qec_stats(cfg, out);
    if (roundtrip->parsed()) return cmd_roundtrip(cfg, out);
    if (match_compare->parsed()) return cmd_match_compare(cfg, out);
    if (match->parsed()) return cmd_match(cfg, out);
    if (simulate->parsed()) return cmd_simulate(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out);
    if (eval->parsed()) return cmd_eval(cfg, out);
  } catch (const InvariantViolation& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dqs3d::cli
