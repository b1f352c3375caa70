// Command-line entry point: pretrain / linear / knn / export / project2d /
// benchmark-loader over the sslkit library.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "sslkit/config.hpp"
#include "sslkit/eval.hpp"
#include "sslkit/trainer.hpp"

namespace fs = std::filesystem;
using namespace sslkit;

namespace {

struct CliArgs {
  std::string config_file;
  std::map<std::string, std::string> kv;  // explicit flag/--set overrides
  double latency_ms = 2.0;                // benchmark-loader only
};

// defaults < config file < explicit flags/--set
std::map<std::string, std::string> merged_kv(const CliArgs& args,
                                             const std::string& base = "") {
  std::map<std::string, std::string> kv =
      base.empty() ? std::map<std::string, std::string>{} : config::parse_kv(base);
  if (!args.config_file.empty()) {
    std::ifstream f(args.config_file);
    if (!f)
      throw config::ConfigError("cannot read config file " + args.config_file);
    std::stringstream ss;
    ss << f.rdbuf();
    for (const auto& [k, v] : config::parse_kv(ss.str())) kv[k] = v;
  }
  for (const auto& [k, v] : args.kv) kv[k] = v;
  return kv;
}

void add_common_flags(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("--config", args.config_file, "key=value config file");
  auto bind = [cmd, &args](const std::string& flag, const std::string& key) {
    cmd->add_option_function<std::string>(
           flag, [&args, key](const std::string& v) { args.kv[key] = v; })
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  bind("--method", "method");
  bind("--dataset", "dataset");
  bind("--data-path", "data_path");
  bind("--epochs", "epochs");
  bind("--batch-size", "batch_size");
  bind("--lr", "lr");
  bind("--workers", "workers");
  bind("--buffer", "buffer");
  bind("--seed", "seed");
  bind("--out", "out");
  bind("--checkpoint", "checkpoint");
  cmd->add_option_function<std::vector<std::string>>(
      "--set",
      [&args](const std::vector<std::string>& pairs) {
        for (const auto& p : pairs) {
          const auto eq = p.find('=');
          if (eq == std::string::npos)
            throw config::ConfigError("--set expects key=value, got '" + p + "'");
          args.kv[p.substr(0, eq)] = p.substr(eq + 1);
        }
      },
      "per-method key=value override (repeatable)");
}

data::Dataset subset(const data::Dataset& ds, const std::vector<int64_t>& ids) {
  data::Dataset out;
  out.kind = ds.kind;
  out.n = static_cast<int64_t>(ids.size());
  out.c = ds.c;
  out.h = ds.h;
  out.w = ds.w;
  out.num_classes = ds.num_classes;
  for (int64_t i : ids) {
    const auto* px = ds.pixels.data() + i * ds.image_numel();
    out.pixels.insert(out.pixels.end(), px, px + ds.image_numel());
    out.labels.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  return out;
}

data::Dataset load_split(const config::RunConfig& cfg, bool train) {
  if (cfg.dataset == "synth") {
    // train and test share class templates: generate one pool, hold out the
    // last fifth of every class
    const int per_train = static_cast<int>(cfg.synth_per_class);
    const int per_test = std::max(1, per_train / 5);
    auto full = data::synth_blobs(static_cast<int>(cfg.synth_classes),
                                  per_train + per_test, 3, cfg.synth_size,
                                  cfg.synth_size,
                                  static_cast<float>(cfg.synth_sigma), cfg.seed);
    std::vector<int64_t> ids;
    const int per_total = per_train + per_test;
    for (int64_t i = 0; i < full.n; ++i) {
      const bool held_out = (i % per_total) >= per_train;
      if (held_out != train) ids.push_back(i);
    }
    return subset(full, ids);
  }
  // cifar: directory layout data_batch_*.bin / test_batch.bin, or one file
  if (fs::is_directory(cfg.data_path)) {
    std::vector<std::string> paths;
    if (train) {
      for (int i = 1; i <= 5; ++i) {
        const std::string p =
            cfg.data_path + "/data_batch_" + std::to_string(i) + ".bin";
        if (fs::exists(p)) paths.push_back(p);
      }
    } else {
      const std::string p = cfg.data_path + "/test_batch.bin";
      if (fs::exists(p)) paths.push_back(p);
    }
    if (paths.empty())
      throw config::ConfigError("no " + std::string(train ? "data" : "test") +
                                "_batch*.bin files under " + cfg.data_path);
    return data::read_cifar_bin(paths);
  }
  return data::read_cifar_bin({cfg.data_path});
}

config::RunConfig bind_dataset(config::RunConfig cfg, const data::Dataset& ds) {
  if (cfg.method.name == "deepclusterv2") cfg.method.dataset_size = ds.n;
  return cfg;
}

// rebuild trainer state (method + probe) exactly as checkpointed
trainer::TrainerState restore_run(const config::RunConfig& cfg,
                                  const trainer::Checkpoint& ck,
                                  const data::Dataset& train_ds) {
  auto bound = bind_dataset(cfg, train_ds);
  Rng rng(bound.seed);
  auto st = trainer::make_trainer(bound.method, train_ds.num_classes, rng);
  trainer::restore(st, ck);
  return st;
}

int run_pretrain(const CliArgs& args) {
  auto cfg = config::from_kv(merged_kv(args));
  if (cfg.out.empty())
    throw config::ConfigError("pretrain requires --out <run directory>");
  auto ds = load_split(cfg, /*train=*/true);
  cfg = bind_dataset(cfg, ds);
  const std::string canonical = config::serialize(cfg);

  fs::create_directories(cfg.out);
  std::ofstream(cfg.out + "/config.txt") << canonical;

  Rng rng(cfg.seed);
  auto st = trainer::make_trainer(cfg.method, ds.num_classes, rng);
  auto rows = trainer::fit(st, ds, cfg.train_config(), canonical);
  for (const auto& r : rows)
    std::printf("epoch %lld  loss %.4f  probe top1 %.2f%%  top5 %.2f%%\n",
                static_cast<long long>(r.epoch), r.loss, r.top1, r.top5);
  return 0;
}

// shared setup for the checkpoint-consuming subcommands
struct EvalContext {
  config::RunConfig cfg;
  data::Dataset train;
  trainer::TrainerState state;
};

EvalContext eval_context(const CliArgs& args, bool need_test) {
  auto flag_cfg = merged_kv(args);
  const auto it = flag_cfg.find("checkpoint");
  if (it == flag_cfg.end() || it->second.empty())
    throw config::ConfigError("this subcommand requires --checkpoint <file>");
  auto ck = trainer::load_checkpoint(it->second);
  // the stored run config supplies method/dataset defaults; flags override
  auto cfg = config::from_kv(merged_kv(args, ck.config));
  auto train = load_split(cfg, /*train=*/true);
  (void)need_test;
  auto st = restore_run(cfg, ck, train);
  return {std::move(cfg), std::move(train), std::move(st)};
}

int run_linear(const CliArgs& args) {
  auto ctx = eval_context(args, true);
  auto test = load_split(ctx.cfg, /*train=*/false);
  if (test.num_classes > ctx.train.num_classes)
    throw config::ConfigError("test set has more classes than the train set");
  auto ftr = eval::embed(ctx.state.method.backbone, ctx.train);
  auto fte = eval::embed(ctx.state.method.backbone, test);
  auto res = eval::linear_eval_offline(ftr, ctx.train.labels, fte, test.labels,
                                       ctx.train.num_classes);
  std::printf("top1 %.2f%%  top5 %.2f%%\n", res.top1, res.top5);
  return 0;
}

int run_knn(const CliArgs& args) {
  auto ctx = eval_context(args, true);
  auto test = load_split(ctx.cfg, /*train=*/false);
  auto ftr = eval::embed(ctx.state.method.backbone, ctx.train);
  auto fte = eval::embed(ctx.state.method.backbone, test);
  const double top1 = eval::knn_eval(ftr, ctx.train.labels, fte, test.labels,
                                     ctx.train.num_classes,
                                     std::min<int>(20, static_cast<int>(ctx.train.n)));
  std::printf("top1 %.2f%%\n", top1);
  return 0;
}

int run_export(const CliArgs& args, bool project) {
  auto ctx = eval_context(args, false);
  auto f = eval::embed(ctx.state.method.backbone, ctx.train);
  if (project) f = eval::pca2d(f);
  std::vector<int64_t> ids(static_cast<size_t>(ctx.train.n));
  std::iota(ids.begin(), ids.end(), 0);
  std::string path = ctx.cfg.out;
  if (path.empty())
    path = project ? "projection2d.csv" : "embeddings.csv";
  else if (fs::is_directory(path) || path.back() == '/')
    path += std::string("/") + (project ? "projection2d.csv" : "embeddings.csv");
  if (const auto dir = fs::path(path).parent_path(); !dir.empty())
    fs::create_directories(dir);
  eval::export_embeddings(f, ids, ctx.train.labels, path);
  std::printf("wrote %s (%lld rows)\n", path.c_str(),
              static_cast<long long>(ctx.train.n));
  return 0;
}

int run_benchmark(const CliArgs& args) {
  auto cfg = config::from_kv(merged_kv(args));
  auto ds = load_split(cfg, /*train=*/true);
  data::LoaderConfig naive, pipe;
  naive.batch = pipe.batch = cfg.batch_size;
  naive.seed = pipe.seed = cfg.seed;
  naive.decode_latency_ms = pipe.decode_latency_ms = args.latency_ms;
  naive.workers = 1;
  naive.depth = 1;
  pipe.workers = static_cast<int>(cfg.workers);
  pipe.depth = static_cast<int>(cfg.buffer);
  auto policies = cfg.method.view_policies();
  auto rep = data::benchmark_loader(ds, naive, pipe, policies, 1);
  std::printf("workers buffer  naive_s  pipe_s  imgs/s  speedup%%  buffer_mb\n");
  std::printf("%7d %6d %8.3f %7.3f %7.1f %9.1f %10.2f\n", pipe.workers,
              pipe.depth, rep.naive_epoch_s, rep.pipe_epoch_s,
              rep.pipe_imgs_per_sec, rep.speedup_pct, rep.buffer_mb);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised visual representation learning toolkit"};
  app.require_subcommand(1);
  CliArgs args;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain a method");
  auto* linear = app.add_subcommand("linear", "offline linear probe");
  auto* knn = app.add_subcommand("knn", "k-nearest-neighbor evaluation");
  auto* exp = app.add_subcommand("export", "write embeddings CSV");
  auto* proj = app.add_subcommand("project2d", "write 2d PCA projection CSV");
  auto* bench = app.add_subcommand("benchmark-loader", "loader speedup table");
  for (auto* cmd : {pretrain, linear, knn, exp, proj, bench})
    add_common_flags(cmd, args);
  bench->add_option("--latency-ms", args.latency_ms,
                    "simulated per-image decode latency");

  try {
    app.parse(argc, argv);
    if (pretrain->parsed()) return run_pretrain(args);
    if (linear->parsed()) return run_linear(args);
    if (knn->parsed()) return run_knn(args);
    if (exp->parsed()) return run_export(args, false);
    if (proj->parsed()) return run_export(args, true);
    if (bench->parsed()) return run_benchmark(args);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version exit cleanly
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
