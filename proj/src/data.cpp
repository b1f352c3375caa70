#include "sslkit/data.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sslkit::data {

using nd::Tensor;
using nd::TensorError;

nd::Tensor<float> Dataset::image(int64_t i) const {
  if (i < 0 || i >= n) throw TensorError("Dataset: index out of range");
  const int64_t per = image_numel();
  std::vector<float> px(pixels.begin() + i * per, pixels.begin() + (i + 1) * per);
  return Tensor<float>::from({c, h, w}, std::move(px));
}

nd::Tensor<float> Dataset::gather(const std::vector<int64_t>& ids) const {
  const int64_t per = image_numel();
  std::vector<float> out(ids.size() * static_cast<size_t>(per));
  for (size_t k = 0; k < ids.size(); ++k) {
    const int64_t i = ids[k];
    if (i < 0 || i >= n) throw TensorError("Dataset: index out of range");
    std::copy_n(pixels.begin() + i * per, per,
                out.begin() + static_cast<int64_t>(k) * per);
  }
  return Tensor<float>::from({static_cast<int64_t>(ids.size()), c, h, w},
                             std::move(out));
}

Dataset read_cifar_bin(const std::vector<std::string>& paths, int64_t c, int64_t h,
                       int64_t w) {
  Dataset ds;
  ds.kind = "cifar_bin";
  ds.c = c;
  ds.h = h;
  ds.w = w;
  const int64_t record = 1 + c * h * w;
  int max_label = -1;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorError("read_cifar_bin: cannot open " + path);
    f.seekg(0, std::ios::end);
    const int64_t bytes = static_cast<int64_t>(f.tellg());
    f.seekg(0);
    if (bytes % record != 0)
      throw TensorError("read_cifar_bin: " + path + " has " + std::to_string(bytes) +
                        " bytes, expected a multiple of " + std::to_string(record));
    const int64_t count = bytes / record;
    std::vector<unsigned char> raw(static_cast<size_t>(bytes));
    f.read(reinterpret_cast<char*>(raw.data()), bytes);
    for (int64_t i = 0; i < count; ++i) {
      const unsigned char* rec = raw.data() + i * record;
      ds.labels.push_back(rec[0]);
      max_label = std::max(max_label, static_cast<int>(rec[0]));
      for (int64_t j = 0; j < record - 1; ++j)
        ds.pixels.push_back(static_cast<float>(rec[1 + j]) / 255.0f);
    }
    ds.n += count;
  }
  ds.num_classes = max_label + 1;
  return ds;
}

void write_cifar_bin(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("write_cifar_bin: cannot open " + path);
  const int64_t per = ds.image_numel();
  for (int64_t i = 0; i < ds.n; ++i) {
    const auto label = static_cast<unsigned char>(ds.labels[static_cast<size_t>(i)]);
    f.put(static_cast<char>(label));
    for (int64_t j = 0; j < per; ++j) {
      const float v = ds.pixels[static_cast<size_t>(i * per + j)];
      f.put(static_cast<char>(
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    }
  }
}

Dataset synth_blobs(int classes, int per_class, int64_t c, int64_t h, int64_t w,
                    float sigma, uint64_t seed) {
  if (classes < 2) throw TensorError("synth_blobs: need at least 2 classes");
  if (per_class < 1) throw TensorError("synth_blobs: per_class must be >= 1");
  Dataset ds;
  ds.kind = "synth_blobs";
  ds.c = c;
  ds.h = h;
  ds.w = w;
  ds.n = static_cast<int64_t>(classes) * per_class;
  ds.num_classes = classes;
  const int64_t per = c * h * w;

  Rng template_rng(seed);
  std::vector<float> templates(static_cast<size_t>(classes) * static_cast<size_t>(per));
  for (auto& v : templates) v = static_cast<float>(template_rng.uniform(0, 1));

  ds.pixels.resize(static_cast<size_t>(ds.n * per));
  ds.labels.resize(static_cast<size_t>(ds.n));
  Rng noise_rng = template_rng.fork(1);
  int64_t i = 0;
  for (int k = 0; k < classes; ++k)
    for (int s = 0; s < per_class; ++s, ++i) {
      ds.labels[static_cast<size_t>(i)] = k;
      for (int64_t j = 0; j < per; ++j) {
        const float base = templates[static_cast<size_t>(k * per + j)];
        const float noise =
            sigma > 0 ? static_cast<float>(noise_rng.normal(0, sigma)) : 0.0f;
        ds.pixels[static_cast<size_t>(i * per + j)] =
            std::clamp(base + noise, 0.0f, 1.0f);
      }
    }
  return ds;
}

void LoaderConfig::validate() const {
  if (batch < 1 || workers < 1 || depth < 1)
    throw TensorError("LoaderConfig: batch, workers and depth must all be >= 1");
  if (decode_latency_ms < 0)
    throw TensorError("LoaderConfig: decode_latency_ms must be >= 0");
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, const LoaderConfig& cfg,
                                                int64_t epoch) {
  cfg.validate();
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(cfg.seed).fork(static_cast<uint64_t>(epoch));
  rng.shuffle(perm);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += cfg.batch) {
    const int64_t end = std::min(n, start + cfg.batch);
    if (cfg.drop_last && end - start < cfg.batch) break;
    batches.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return batches;
}

augment::ViewBatch Loader::make_batch(const Dataset& ds, const LoaderConfig& cfg,
                                      const std::vector<augment::AugmentPolicy>& policies,
                                      int64_t epoch, const std::vector<int64_t>& ids,
                                      int64_t b) {
  if (cfg.decode_latency_ms > 0) {
    const auto per_image = std::chrono::duration<double, std::milli>(
        cfg.decode_latency_ms * static_cast<double>(ids.size()));
    std::this_thread::sleep_for(per_image);
  }
  // the augmentation stream is a pure function of (seed, epoch, batch), so
  // batch contents cannot depend on which worker produced them
  Rng rng = Rng(cfg.seed).fork(static_cast<uint64_t>(epoch) * 0x10001 + 7)
                .fork(static_cast<uint64_t>(b));
  std::vector<int> labels(ids.size());
  for (size_t i = 0; i < ids.size(); ++i)
    labels[i] = ds.labels[static_cast<size_t>(ids[i])];
  return augment::generate_views(ds.gather(ids), policies, rng, ids, std::move(labels));
}

Loader::Loader(const Dataset& ds, LoaderConfig cfg,
               std::vector<augment::AugmentPolicy> policies, int64_t epoch)
    : ds_(ds), cfg_(std::move(cfg)), policies_(std::move(policies)), epoch_(epoch) {
  cfg_.validate();
  schedule_ = epoch_batches(ds.n, cfg_, epoch);
  const int workers = static_cast<int>(
      std::min<int64_t>(cfg_.workers, std::max<int64_t>(1, num_batches())));
  threads_.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t)
    threads_.emplace_back([this] { worker_loop(); });
}

Loader::~Loader() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  cv_produce_.notify_all();
  cv_consume_.notify_all();
  for (auto& t : threads_) t.join();
}

void Loader::worker_loop() {
  try {
    while (true) {
      int64_t b;
      {
        std::unique_lock<std::mutex> lock(mu_);
        // bounded buffer: at most `depth` batches may sit ahead of the consumer
        cv_produce_.wait(lock, [this] {
          return stop_ || next_to_claim_ >= num_batches() ||
                 next_to_claim_ < next_to_emit_ + cfg_.depth;
        });
        if (stop_ || next_to_claim_ >= num_batches()) return;
        b = next_to_claim_++;
      }
      augment::ViewBatch vb = make_batch(ds_, cfg_, policies_, epoch_,
                                         schedule_[static_cast<size_t>(b)], b);
      {
        std::lock_guard<std::mutex> lock(mu_);
        ready_.emplace(b, std::move(vb));
      }
      cv_consume_.notify_all();
    }
  } catch (...) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!error_) error_ = std::current_exception();
    stop_ = true;
    cv_consume_.notify_all();
    cv_produce_.notify_all();
  }
}

std::optional<augment::ViewBatch> Loader::next() {
  std::unique_lock<std::mutex> lock(mu_);
  if (next_to_emit_ >= num_batches()) return std::nullopt;
  cv_consume_.wait(lock, [this] {
    return error_ || ready_.count(next_to_emit_) > 0;
  });
  if (error_) std::rethrow_exception(error_);
  auto it = ready_.find(next_to_emit_);
  augment::ViewBatch vb = std::move(it->second);
  ready_.erase(it);
  ++next_to_emit_;
  cv_produce_.notify_all();
  return vb;
}

BenchReport benchmark_loader(const Dataset& ds, const LoaderConfig& cfg_naive,
                             const LoaderConfig& cfg_pipe,
                             const std::vector<augment::AugmentPolicy>& policies,
                             int epochs) {
  using clock = std::chrono::steady_clock;
  BenchReport report;
  int64_t imgs_naive = 0, imgs_pipe = 0;

  const auto t0 = clock::now();
  for (int e = 0; e < epochs; ++e) {
    const auto schedule = epoch_batches(ds.n, cfg_naive, e);
    for (int64_t b = 0; b < static_cast<int64_t>(schedule.size()); ++b) {
      auto vb = Loader::make_batch(ds, cfg_naive, policies, e,
                                   schedule[static_cast<size_t>(b)], b);
      imgs_naive += vb.views[0].dim(0);
    }
  }
  const auto t1 = clock::now();
  for (int e = 0; e < epochs; ++e) {
    Loader loader(ds, cfg_pipe, policies, e);
    while (auto vb = loader.next()) imgs_pipe += vb->views[0].dim(0);
  }
  const auto t2 = clock::now();

  report.naive_epoch_s =
      std::chrono::duration<double>(t1 - t0).count() / std::max(1, epochs);
  report.pipe_epoch_s =
      std::chrono::duration<double>(t2 - t1).count() / std::max(1, epochs);
  report.naive_imgs_per_sec =
      static_cast<double>(imgs_naive) / std::chrono::duration<double>(t1 - t0).count();
  report.pipe_imgs_per_sec =
      static_cast<double>(imgs_pipe) / std::chrono::duration<double>(t2 - t1).count();
  report.speedup_pct =
      (report.naive_epoch_s / std::max(1e-12, report.pipe_epoch_s) - 1.0) * 100.0;
  report.buffer_mb = static_cast<double>(cfg_pipe.depth) *
                     static_cast<double>(cfg_pipe.batch) *
                     static_cast<double>(ds.image_numel()) *
                     static_cast<double>(policies.size()) * sizeof(float) /
                     (1024.0 * 1024.0);
  return report;
}

}  // namespace sslkit::data
