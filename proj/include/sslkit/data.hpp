#pragma once

// Dataset ingestion (CIFAR binary layout + synthetic blobs) and a pipelined
// multi-worker loader whose output is deterministic in the worker count.

#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sslkit/augment.hpp"
#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit::data {

struct Dataset {
  std::string kind;  // "cifar_bin" or "synth_blobs"
  int64_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> pixels;  // n*c*h*w, values in [0,1]
  std::vector<int> labels;    // n entries
  int num_classes = 0;

  int64_t image_numel() const { return c * h * w; }
  nd::Tensor<float> image(int64_t i) const;
  // gathers rows `ids` into a B x C x H x W batch
  nd::Tensor<float> gather(const std::vector<int64_t>& ids) const;
};

// CIFAR binary layout: records of 1 label byte + c*h*w pixel bytes.
Dataset read_cifar_bin(const std::vector<std::string>& paths, int64_t c = 3,
                       int64_t h = 32, int64_t w = 32);
void write_cifar_bin(const Dataset& ds, const std::string& path);

Dataset synth_blobs(int classes, int per_class, int64_t c, int64_t h, int64_t w,
                    float sigma, uint64_t seed);

struct LoaderConfig {
  int64_t batch = 128;
  int workers = 1;        // P
  int depth = 2;          // Q, reorder-buffer bound
  uint64_t seed = 0;
  bool drop_last = true;
  double decode_latency_ms = 0;  // simulated per-image decode cost (benchmark)

  void validate() const;
};

// the seeded batch schedule for one epoch: a permutation of 0..n-1 cut into
// batches; pure function of (n, seed, epoch)
std::vector<std::vector<int64_t>> epoch_batches(int64_t n, const LoaderConfig& cfg,
                                                int64_t epoch);

// One epoch of augmented batches. P worker threads decode+augment into a
// bounded reorder buffer; next() hands batches out strictly in schedule
// order no matter how workers are scheduled.
class Loader {
 public:
  Loader(const Dataset& ds, LoaderConfig cfg,
         std::vector<augment::AugmentPolicy> policies, int64_t epoch);
  ~Loader();
  Loader(const Loader&) = delete;
  Loader& operator=(const Loader&) = delete;

  std::optional<augment::ViewBatch> next();  // rethrows worker errors
  int64_t num_batches() const { return static_cast<int64_t>(schedule_.size()); }

  // builds the batch with sequence number `b` synchronously; the threaded
  // path must produce exactly this
  static augment::ViewBatch make_batch(const Dataset& ds, const LoaderConfig& cfg,
                                       const std::vector<augment::AugmentPolicy>& policies,
                                       int64_t epoch,
                                       const std::vector<int64_t>& ids, int64_t b);

 private:
  void worker_loop();

  const Dataset& ds_;
  LoaderConfig cfg_;
  std::vector<augment::AugmentPolicy> policies_;
  int64_t epoch_;
  std::vector<std::vector<int64_t>> schedule_;

  std::mutex mu_;
  std::condition_variable cv_produce_, cv_consume_;
  std::map<int64_t, augment::ViewBatch> ready_;
  int64_t next_to_claim_ = 0;
  int64_t next_to_emit_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::vector<std::thread> threads_;
};

struct BenchReport {
  double naive_epoch_s = 0, pipe_epoch_s = 0;
  double naive_imgs_per_sec = 0, pipe_imgs_per_sec = 0;
  double speedup_pct = 0;                 // (t_naive/t_pipe - 1) * 100
  double buffer_mb = 0;                   // Q * B * bytes per decoded image
};

BenchReport benchmark_loader(const Dataset& ds, const LoaderConfig& cfg_naive,
                             const LoaderConfig& cfg_pipe,
                             const std::vector<augment::AugmentPolicy>& policies,
                             int epochs);

}  // namespace sslkit::data
