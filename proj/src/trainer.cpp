#include "sslkit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace sslkit::trainer {

using nd::Tensor;
using nd::TensorError;
using FT = Tensor<float>;

void sgd_step(models::ParamList<float>& params, OptimizerState& opt) {
  for (auto& [name, p] : params) {
    const auto* g = p.grad();
    if (!g) continue;
    for (float v : *g)
      if (!std::isfinite(v))
        throw TensorError("sgd_step: non-finite gradient in '" + name + "'");
    auto& buf = opt.buffers[name];
    if (buf.empty()) buf.assign(p.data().size(), 0.0f);
    if (buf.size() != p.data().size())
      throw TensorError("sgd_step: buffer/param size mismatch for '" + name + "'");
    auto& theta = p.data();
    for (size_t i = 0; i < theta.size(); ++i) {
      buf[i] = static_cast<float>(opt.momentum) * buf[i] + (*g)[i] +
               static_cast<float>(opt.weight_decay) * theta[i];
      theta[i] -= static_cast<float>(opt.lr) * buf[i];
    }
  }
}

double cosine_lr(int64_t k, int64_t total, double base_lr, int64_t warmup) {
  if (total <= 0) throw TensorError("cosine_lr: total must be positive");
  if (warmup >= total) throw TensorError("cosine_lr: warmup must be < total");
  if (k < 0 || k > total) throw TensorError("cosine_lr: step out of range");
  if (k < warmup)
    return base_lr * static_cast<double>(k) / static_cast<double>(warmup);
  const double t = static_cast<double>(k - warmup) / static_cast<double>(total - warmup);
  return base_lr * (std::cos(M_PI * t) + 1.0) / 2.0;
}

void export_metrics(const std::vector<ProbeMetricsRow>& rows,
                    const std::string& path) {
  std::ofstream f(path);
  if (!f) throw TensorError("export_metrics: cannot open " + path);
  f << "epoch,loss,top1,top5,seconds\n";
  for (const auto& r : rows)
    f << r.epoch << ',' << r.loss << ',' << r.top1 << ',' << r.top5 << ','
      << r.seconds << '\n';
  f.flush();
  if (!f) throw TensorError("export_metrics: write failed for " + path);
}

TrainerState make_trainer(const methods::MethodConfig& cfg, int num_classes,
                          const Rng& rng) {
  Rng r = rng;
  methods::MethodState method = methods::build(cfg, r);
  Rng probe_rng = r.fork(0x9B);
  TrainerState st{std::move(method),
                  OptimizerState{},
                  models::MlpHead<float>("probe", {256, num_classes}, false,
                                         probe_rng),
                  OptimizerState{}};
  st.probe_opt.lr = 0.1;
  st.probe_opt.weight_decay = 0.0;
  return st;
}

namespace {

// mean cross-entropy of logits against integer labels, plus top-1/top-5 hits
FT probe_ce(const FT& logits, const std::vector<int>& labels, int64_t& hit1,
            int64_t& hit5) {
  using namespace nd;
  const int64_t B = logits.dim(0), C = logits.dim(1);
  std::vector<float> onehot(static_cast<size_t>(B * C), 0.0f);
  for (int64_t i = 0; i < B; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= C)
      throw TensorError("probe: label " + std::to_string(y) + " outside [0," +
                        std::to_string(C) + ")");
    onehot[static_cast<size_t>(i * C + y)] = 1.0f;
    // rank of the true class among the logits
    const float own = logits.data()[static_cast<size_t>(i * C + y)];
    int64_t above = 0;
    for (int64_t c = 0; c < C; ++c)
      above += logits.data()[static_cast<size_t>(i * C + c)] > own;
    hit1 += above == 0;
    hit5 += above < 5;
  }
  FT lp = sub(logits, logsumexp(logits, 1, true));
  return scale(sum(mul(lp, FT::from({B, C}, std::move(onehot)))),
               -1.0f / static_cast<float>(B));
}

std::string ckpt_path(const std::string& out_dir, int64_t epoch) {
  return out_dir + "/ckpt-" + std::to_string(epoch) + ".slck";
}

}  // namespace

std::vector<ProbeMetricsRow> fit(TrainerState& state, const data::Dataset& ds,
                                 const TrainConfig& cfg,
                                 const std::string& canonical_config) {
  using clock = std::chrono::steady_clock;
  const auto policies = state.method.cfg.view_policies();
  const int64_t per_epoch =
      static_cast<int64_t>(data::epoch_batches(ds.n, cfg.loader, 0).size());
  if (per_epoch == 0)
    throw TensorError("fit: dataset yields no batches under this loader config");
  const int64_t total_steps = cfg.epochs * per_epoch;

  const int64_t last_epoch =
      cfg.stop_after >= 0 ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;
  std::vector<ProbeMetricsRow> rows;
  for (int64_t epoch = state.epoch; epoch < last_epoch; ++epoch) {
    const auto t0 = clock::now();
    double loss_sum = 0;
    int64_t hit1 = 0, hit5 = 0, seen = 0;

    data::Loader loader(ds, cfg.loader, policies, epoch);
    while (auto batch = loader.next()) {
      auto params = state.method.trainable_params();
      for (auto& [n, p] : params) p.zero_grad();
      auto res = methods::training_step(state.method, *batch);
      nd::backward(res.loss);
      state.opt.lr = cosine_lr(state.global_step, total_steps, cfg.base_lr,
                               cfg.warmup_steps);
      state.opt.weight_decay = cfg.weight_decay;
      sgd_step(params, state.opt);
      methods::post_optimizer_hook(state.method, state.global_step, total_steps);

      // online probe on detached features, isolated from the backbone
      auto probe_params = state.probe.params();
      for (auto& [n, p] : probe_params) p.zero_grad();
      FT logits = state.probe.forward(res.features);
      FT ploss = probe_ce(logits, batch->labels, hit1, hit5);
      nd::backward(ploss);
      state.probe_opt.lr = cfg.probe_lr;
      sgd_step(probe_params, state.probe_opt);

      loss_sum += res.metrics.at("loss");
      seen += batch->views[0].dim(0);
      ++state.global_step;
    }
    methods::epoch_hook(state.method);
    state.epoch = epoch + 1;

    ProbeMetricsRow row;
    row.epoch = epoch;
    row.loss = loss_sum / static_cast<double>(per_epoch);
    row.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(seen);
    row.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(seen);
    row.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    rows.push_back(row);

    if (!cfg.out_dir.empty()) {
      export_metrics(rows, cfg.out_dir + "/metrics.csv");
      if (cfg.checkpoint_every > 0 &&
          ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs)) {
        save_checkpoint(snapshot(state, canonical_config),
                        ckpt_path(cfg.out_dir, epoch + 1));
        std::remove(
            ckpt_path(cfg.out_dir, epoch + 1 - 2 * cfg.checkpoint_every).c_str());
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

constexpr char kMagic[5] = {'S', 'L', 'C', 'K', '1'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(reinterpret_cast<char*>(b), sizeof(T));
}

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

struct Reader {
  const std::vector<unsigned char>& buf;
  size_t off = 0;

  void need(size_t n, const char* what) const {
    if (off + n > buf.size())
      throw TensorError("checkpoint: truncated reading " + std::string(what) +
                        " at byte " + std::to_string(off));
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
  }
  std::string get_str(const char* what) {
    const auto n = get<uint64_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + off),
                  static_cast<size_t>(n));
    off += n;
    return s;
  }
};

size_t dtype_size(uint32_t dtype) {
  switch (dtype) {
    case 0: return 4;  // f32
    case 1: return 8;  // f64
    case 2: return 8;  // u64
    case 3: return 4;  // i32
    default: throw TensorError("checkpoint: unknown dtype " + std::to_string(dtype));
  }
}

}  // namespace

Blob Blob::f32(const std::vector<float>& v, std::vector<uint64_t> dims) {
  Blob b;
  b.dtype = 0;
  b.dims = dims.empty() ? std::vector<uint64_t>{v.size()} : std::move(dims);
  b.raw.resize(v.size() * 4);
  std::memcpy(b.raw.data(), v.data(), b.raw.size());
  return b;
}

Blob Blob::u64(const std::vector<uint64_t>& v) {
  Blob b;
  b.dtype = 2;
  b.dims = {v.size()};
  b.raw.resize(v.size() * 8);
  std::memcpy(b.raw.data(), v.data(), b.raw.size());
  return b;
}

Blob Blob::i32(const std::vector<int>& v) {
  Blob b;
  b.dtype = 3;
  b.dims = {v.size()};
  b.raw.resize(v.size() * 4);
  std::memcpy(b.raw.data(), v.data(), b.raw.size());
  return b;
}

uint64_t Blob::count() const {
  uint64_t n = 1;
  for (uint64_t d : dims) n *= d;
  return n;
}

std::vector<float> Blob::as_f32() const {
  if (dtype != 0) throw TensorError("checkpoint: blob is not f32");
  std::vector<float> v(count());
  std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

std::vector<uint64_t> Blob::as_u64() const {
  if (dtype != 2) throw TensorError("checkpoint: blob is not u64");
  std::vector<uint64_t> v(count());
  std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

std::vector<int> Blob::as_i32() const {
  if (dtype != 3) throw TensorError("checkpoint: blob is not i32");
  std::vector<int> v(count());
  std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

const Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, b] : blobs)
    if (n == name) return &b;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string out;
  put_bytes(out, kMagic, 5);
  put(out, kVersion);
  put(out, static_cast<uint64_t>(ck.config.size()));
  put_bytes(out, ck.config.data(), ck.config.size());
  put(out, static_cast<uint64_t>(ck.blobs.size()));
  for (const auto& [name, blob] : ck.blobs) {
    put(out, static_cast<uint64_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put(out, blob.dtype);
    put(out, static_cast<uint32_t>(blob.dims.size()));
    for (uint64_t d : blob.dims) put(out, d);
    if (blob.raw.size() != blob.count() * dtype_size(blob.dtype))
      throw TensorError("checkpoint: blob '" + name + "' payload/shape mismatch");
    put_bytes(out, blob.raw.data(), blob.raw.size());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw TensorError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("checkpoint: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  Reader r{buf};
  r.need(5, "magic");
  if (std::memcmp(buf.data(), kMagic, 5) != 0)
    throw TensorError("checkpoint: bad magic at byte 0 in " + path);
  r.off = 5;
  const auto version = r.get<uint32_t>("version");
  if (version != kVersion)
    throw TensorError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config = r.get_str("config");
  const auto nblobs = r.get<uint64_t>("blob count");
  for (uint64_t i = 0; i < nblobs; ++i) {
    std::string name = r.get_str("blob name");
    Blob b;
    b.dtype = r.get<uint32_t>("dtype");
    const auto rank = r.get<uint32_t>("rank");
    for (uint32_t d = 0; d < rank; ++d) b.dims.push_back(r.get<uint64_t>("dims"));
    const size_t bytes = static_cast<size_t>(b.count()) * dtype_size(b.dtype);
    r.need(bytes, name.c_str());
    b.raw.assign(buf.begin() + static_cast<int64_t>(r.off),
                 buf.begin() + static_cast<int64_t>(r.off + bytes));
    r.off += bytes;
    ck.blobs.emplace_back(std::move(name), std::move(b));
  }
  if (r.off != buf.size())
    throw TensorError("checkpoint: trailing bytes at " + std::to_string(r.off));
  return ck;
}

namespace {

void add_optimizer(Checkpoint& ck, const std::string& prefix,
                   const OptimizerState& opt) {
  for (const auto& [name, buf] : opt.buffers)
    ck.blobs.emplace_back(prefix + name, Blob::f32(buf));
}

void restore_optimizer(const Checkpoint& ck, const std::string& prefix,
                       OptimizerState& opt) {
  opt.buffers.clear();
  for (const auto& [name, blob] : ck.blobs)
    if (name.rfind(prefix, 0) == 0)
      opt.buffers[name.substr(prefix.size())] = blob.as_f32();
}

std::vector<uint64_t> shape_u64(const nd::Shape& s) {
  return {s.begin(), s.end()};
}

}  // namespace

Checkpoint snapshot(TrainerState& state, const std::string& canonical_config) {
  Checkpoint ck;
  ck.config = canonical_config;
  auto& m = state.method;
  for (auto& [name, p] : m.all_params())
    ck.blobs.emplace_back("param." + name, Blob::f32(p.data(), shape_u64(p.shape())));
  for (auto& [name, p] : state.probe.params())
    ck.blobs.emplace_back("probe." + name, Blob::f32(p.data(), shape_u64(p.shape())));
  add_optimizer(ck, "opt.", state.opt);
  add_optimizer(ck, "probe_opt.", state.probe_opt);
  ck.blobs.emplace_back("counters",
                        Blob::u64({static_cast<uint64_t>(state.epoch),
                                   static_cast<uint64_t>(state.global_step),
                                   static_cast<uint64_t>(m.step)}));
  const auto rs = m.rng.state();
  ck.blobs.emplace_back("method.rng", Blob::u64({rs[0], rs[1], rs[2], rs[3]}));
  if (m.queue) {
    ck.blobs.emplace_back("queue.storage", Blob::f32(m.queue->raw_storage()));
    ck.blobs.emplace_back(
        "queue.counters",
        Blob::u64({static_cast<uint64_t>(m.queue->raw_cursor()),
                   static_cast<uint64_t>(m.queue->raw_fill())}));
  }
  if (m.center) ck.blobs.emplace_back("center.c", Blob::f32(m.center->c));
  if (m.cfg.name == "deepclusterv2") {
    ck.blobs.emplace_back("dcv2.memory", Blob::f32(m.memory));
    ck.blobs.emplace_back("dcv2.assignments", Blob::i32(m.assignments));
    ck.blobs.emplace_back("dcv2.centroids",
                          Blob::f32(m.centroids.data(), shape_u64(m.centroids.shape())));
  }
  return ck;
}

namespace {

void restore_params(const Checkpoint& ck, const std::string& prefix,
                    models::ParamList<float> params) {
  for (auto& [name, p] : params) {
    const Blob* b = ck.find(prefix + name);
    if (!b) throw TensorError("checkpoint: missing blob '" + prefix + name + "'");
    auto v = b->as_f32();
    if (v.size() != p.data().size())
      throw TensorError("checkpoint: shape mismatch for '" + prefix + name + "'");
    p.data() = std::move(v);
  }
}

}  // namespace

void restore(TrainerState& state, const Checkpoint& ck) {
  auto& m = state.method;
  restore_params(ck, "param.", m.all_params());
  restore_params(ck, "probe.", state.probe.params());
  restore_optimizer(ck, "opt.", state.opt);
  restore_optimizer(ck, "probe_opt.", state.probe_opt);
  const Blob* counters = ck.find("counters");
  if (!counters) throw TensorError("checkpoint: missing counters");
  const auto c = counters->as_u64();
  state.epoch = static_cast<int64_t>(c[0]);
  state.global_step = static_cast<int64_t>(c[1]);
  m.step = static_cast<int64_t>(c[2]);
  if (const Blob* rb = ck.find("method.rng")) {
    const auto v = rb->as_u64();
    m.rng.set_state({v[0], v[1], v[2], v[3]});
  }
  if (m.queue) {
    const Blob* qs = ck.find("queue.storage");
    const Blob* qc = ck.find("queue.counters");
    if (!qs || !qc) throw TensorError("checkpoint: missing queue state");
    m.queue->raw_storage() = qs->as_f32();
    const auto v = qc->as_u64();
    m.queue->raw_cursor() = static_cast<int64_t>(v[0]);
    m.queue->raw_fill() = static_cast<int64_t>(v[1]);
  }
  if (m.center) {
    const Blob* cb = ck.find("center.c");
    if (!cb) throw TensorError("checkpoint: missing center state");
    m.center->c = cb->as_f32();
  }
  if (m.cfg.name == "deepclusterv2") {
    const Blob* mem = ck.find("dcv2.memory");
    const Blob* as = ck.find("dcv2.assignments");
    const Blob* ce = ck.find("dcv2.centroids");
    if (!mem || !as || !ce)
      throw TensorError("checkpoint: missing deepclusterv2 state");
    m.memory = mem->as_f32();
    m.assignments = as->as_i32();
    nd::Shape s;
    for (uint64_t d : ce->dims) s.push_back(static_cast<int64_t>(d));
    m.centroids = FT::from(s, ce->as_f32());
  }
}

}  // namespace sslkit::trainer
