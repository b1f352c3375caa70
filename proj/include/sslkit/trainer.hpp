#pragma once

// Optimization loop: SGD with momentum + cosine schedule, an online linear
// probe on detached features, metrics CSV, and bit-exact binary checkpoints.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sslkit/data.hpp"
#include "sslkit/methods.hpp"

namespace sslkit::trainer {

struct OptimizerState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::map<std::string, std::vector<float>> buffers;  // velocity per param name
};

// v <- momentum*v + g + wd*theta; theta <- theta - lr*v
void sgd_step(models::ParamList<float>& params, OptimizerState& opt);

// linear 0 -> base over W steps, then half-cosine decay to 0 at K
double cosine_lr(int64_t k, int64_t total, double base_lr, int64_t warmup);

struct ProbeMetricsRow {
  int64_t epoch = 0;
  double loss = 0;   // mean method loss over the epoch
  double top1 = 0;   // online probe accuracy, percent
  double top5 = 0;
  double seconds = 0;
};

void export_metrics(const std::vector<ProbeMetricsRow>& rows,
                    const std::string& path);

struct TrainConfig {
  int64_t epochs = 10;      // schedule horizon; lr/momentum anneal over this
  int64_t stop_after = -1;  // optional early stop (epoch index), -1 = run all
  double base_lr = 0.3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 0;
  double probe_lr = 0.1;
  data::LoaderConfig loader;
  std::string out_dir;       // empty: no checkpoints/metrics written
  int64_t checkpoint_every = 1;
};

struct TrainerState {
  methods::MethodState method;
  OptimizerState opt;
  models::MlpHead<float> probe;  // single linear layer on backbone features
  OptimizerState probe_opt;
  int64_t epoch = 0;
  int64_t global_step = 0;
};

TrainerState make_trainer(const methods::MethodConfig& cfg, int num_classes,
                          const Rng& rng);

// Runs epochs [state.epoch, cfg.epochs); appends one metrics row per epoch
// and (if out_dir set) writes a checkpoint every checkpoint_every epochs,
// keeping the last two.
std::vector<ProbeMetricsRow> fit(TrainerState& state, const data::Dataset& ds,
                                 const TrainConfig& cfg,
                                 const std::string& canonical_config = "");

// ---------------------------------------------------------------------------
// checkpoint format "SLCK1": magic, version u32, config length+bytes, blob
// count u64, then per blob: name length+utf8, dtype u32 (0=f32 1=f64 2=u64
// 3=i32), rank u32, dims u64 each, raw little-endian payload.

struct Blob {
  uint32_t dtype = 0;
  std::vector<uint64_t> dims;
  std::vector<unsigned char> raw;

  static Blob f32(const std::vector<float>& v, std::vector<uint64_t> dims = {});
  static Blob u64(const std::vector<uint64_t>& v);
  static Blob i32(const std::vector<int>& v);
  std::vector<float> as_f32() const;
  std::vector<uint64_t> as_u64() const;
  std::vector<int> as_i32() const;
  uint64_t count() const;
};

struct Checkpoint {
  std::string config;  // canonical run config, stored opaquely
  std::vector<std::pair<std::string, Blob>> blobs;

  const Blob* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot(TrainerState& state, const std::string& canonical_config);
void restore(TrainerState& state, const Checkpoint& ck);

}  // namespace sslkit::trainer
