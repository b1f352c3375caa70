#include "sslkit/methods.hpp"

#include <algorithm>
#include <cmath>

namespace sslkit::methods {

using nd::Tensor;
using nd::TensorError;
using FT = Tensor<float>;

MethodConfig MethodConfig::defaults(const std::string& name) {
  MethodConfig cfg;
  cfg.name = name;
  if (name == "simclr") {
    cfg.tau = 0.2;
  } else if (name == "mocov2plus") {
    cfg.tau = 0.2;
    cfg.queue_size = 4096;
    cfg.momentum_base = 0.99;
  } else if (name == "byol") {
    cfg.momentum_base = 0.99;
    cfg.momentum_scheduled = true;
  } else if (name == "simsiam") {
  } else if (name == "barlow") {
  } else if (name == "vicreg") {
  } else if (name == "nnclr") {
    cfg.tau = 0.2;
    cfg.queue_size = 4096;
  } else if (name == "swav") {
    cfg.tau = 0.1;
    cfg.prototypes = 100;
  } else if (name == "deepclusterv2") {
    cfg.tau = 0.1;
    cfg.prototypes = 100;
  } else if (name == "dino") {
    cfg.tau = 0.1;
    cfg.tau_teacher = 0.04;
    cfg.prototypes = 100;
    cfg.projector = {256, 512, 100};
    cfg.momentum_base = 0.99;
    cfg.momentum_scheduled = true;
  } else if (name == "ressl") {
    cfg.tau = 0.1;
    cfg.tau_teacher = 0.04;
    cfg.queue_size = 4096;
    cfg.momentum_base = 0.999;
  } else if (name == "wmse") {
    // whitening needs sub-batch > embedding dim, so the head is narrower
    cfg.projector = {256, 512, 32};
  } else if (name == "supcon") {
    cfg.tau = 0.1;
  } else {
    throw TensorError("unknown method '" + name + "'");
  }
  return cfg;
}

bool MethodConfig::uses_queue() const {
  return name == "mocov2plus" || name == "nnclr" || name == "ressl";
}

bool MethodConfig::uses_target() const {
  return name == "mocov2plus" || name == "byol" || name == "dino" ||
         name == "ressl";
}

bool MethodConfig::uses_predictor() const {
  return name == "byol" || name == "simsiam" || name == "nnclr";
}

void MethodConfig::validate() const {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw TensorError("unknown method '" + name + "'");
  if (projector.size() < 2)
    throw TensorError("MethodConfig: projector needs at least [in, out]");
  if (uses_queue() != (queue_size > 0))
    throw TensorError("MethodConfig: queue_size " + std::to_string(queue_size) +
                      " is invalid for method '" + name + "'");
  if (uses_target() != (momentum_base > 0))
    throw TensorError("MethodConfig: momentum_base is only valid for methods "
                      "with a target network");
  const bool needs_protos =
      name == "swav" || name == "deepclusterv2" || name == "dino";
  if (needs_protos && prototypes < 2)
    throw TensorError("MethodConfig: '" + name + "' needs prototypes >= 2");
  if (!needs_protos && prototypes != 0)
    throw TensorError("MethodConfig: prototypes is invalid for '" + name + "'");
  if (name == "deepclusterv2" && dataset_size < 1)
    throw TensorError("MethodConfig: deepclusterv2 needs dataset_size");
  if (name == "wmse" && wmse_sub_batch <= projector.back())
    throw TensorError("MethodConfig: wmse sub-batch must exceed the head output dim");
  if (tau <= 0 || tau_teacher <= 0)
    throw TensorError("MethodConfig: temperatures must be positive");
}

std::vector<augment::AugmentPolicy> MethodConfig::view_policies() const {
  if (name == "ressl")
    return {augment::AugmentPolicy::strong_view1(), augment::AugmentPolicy::weak()};
  return {augment::AugmentPolicy::strong_view1(),
          augment::AugmentPolicy::strong_view2()};
}

models::ParamList<float> MethodState::trainable_params() {
  models::ParamList<float> p = backbone.params();
  for (auto& kv : projector.params()) p.push_back(kv);
  if (predictor)
    for (auto& kv : predictor->params()) p.push_back(kv);
  if (prototypes)
    for (auto& kv : prototypes->params()) p.push_back(kv);
  return p;
}

models::ParamList<float> MethodState::all_params() {
  models::ParamList<float> p = trainable_params();
  if (momentum)
    for (auto& kv : momentum->target_params()) p.push_back(kv);
  return p;
}

MethodState build(const MethodConfig& cfg, const Rng& rng) {
  cfg.validate();
  Rng r = rng;
  MethodState st{cfg,
                 models::SmallCnn<float>("backbone", r),
                 models::MlpHead<float>("projector", cfg.projector, true, r)};
  st.rng = r.fork(0xD5);
  if (cfg.uses_predictor())
    st.predictor.emplace("predictor", cfg.predictor, true, r);
  if (cfg.uses_target()) {
    st.target_backbone.emplace("target_backbone", r);
    st.target_projector.emplace("target_projector", cfg.projector, true, r);
    models::ParamList<float> online = st.backbone.params();
    for (auto& kv : st.projector.params()) online.push_back(kv);
    models::ParamList<float> target = st.target_backbone->params();
    for (auto& kv : st.target_projector->params()) target.push_back(kv);
    st.momentum.emplace(online, target);
  }
  if (cfg.uses_queue())
    st.queue.emplace(cfg.queue_size, cfg.projector.back());
  if (cfg.name == "dino")
    st.center.emplace(cfg.projector.back(), static_cast<float>(cfg.center_momentum));
  if (cfg.name == "swav")
    st.prototypes.emplace("prototypes", cfg.prototypes, cfg.projector.back(), r);
  if (cfg.name == "deepclusterv2") {
    const int64_t d = cfg.projector.back();
    st.memory.resize(static_cast<size_t>(cfg.dataset_size * d));
    Rng mem_rng = r.fork(0xDC);
    for (int64_t i = 0; i < cfg.dataset_size; ++i) {
      float norm = 0;
      for (int64_t j = 0; j < d; ++j) {
        const auto v = static_cast<float>(mem_rng.normal());
        st.memory[static_cast<size_t>(i * d + j)] = v;
        norm += v * v;
      }
      norm = std::sqrt(norm) + 1e-8f;
      for (int64_t j = 0; j < d; ++j)
        st.memory[static_cast<size_t>(i * d + j)] /= norm;
    }
    epoch_hook(st);  // initial clustering so step 0 has assignments
  }
  return st;
}

namespace {

FT project(MethodState& st, const FT& view) {
  return st.projector.forward(st.backbone.forward(view));
}

FT project_target(MethodState& st, const FT& view) {
  nd::NoGradGuard ng;
  return st.target_projector->forward(st.target_backbone->forward(view)).detach();
}

void check_views(const MethodState& st, const augment::ViewBatch& batch) {
  if (batch.views.size() != 2)
    throw TensorError("training_step: '" + st.cfg.name + "' expects 2 views, got " +
                      std::to_string(batch.views.size()));
}

// per-term decomposition for the metrics map, computed on detached values
std::map<std::string, double> vicreg_terms(const FT& z1, const FT& z2,
                                           const MethodConfig& cfg) {
  using namespace nd;
  NoGradGuard ng;
  auto term = [](const FT& t) { return static_cast<double>(t.item()); };
  FT d = sub(z1, z2);
  const double sim = term(mean(mul(d, d)));
  auto var_of = [&](const FT& z) {
    const auto B = static_cast<float>(z.dim(0));
    FT c = sub(z, mean(z, 0, true));
    FT var = scale(sum(mul(c, c), 0, true), 1.0f / (B - 1));
    return term(mean(relu(sub(FT::scalar(1.0f), sqrt(add_scalar(var, 1e-4f))))));
  };
  auto cov_of = [&](const FT& z) {
    const auto B = static_cast<float>(z.dim(0));
    FT centered = sub(z, mean(z, 0, true));
    FT cov = scale(matmul(transpose(centered), centered), 1.0f / (B - 1));
    FT off = mul(cov, losses::detail::offdiag_mask<float>(z.dim(1)));
    return term(scale(sum(mul(off, off)), 1.0f / static_cast<float>(z.dim(1))));
  };
  return {{"sim", cfg.vicreg_sim * sim},
          {"var", cfg.vicreg_var * (var_of(z1) + var_of(z2))},
          {"cov", cfg.vicreg_cov * (cov_of(z1) + cov_of(z2))}};
}

}  // namespace

StepResult training_step(MethodState& st, const augment::ViewBatch& batch) {
  check_views(st, batch);
  const auto& cfg = st.cfg;
  const FT& v1 = batch.views[0];
  const FT& v2 = batch.views[1];
  const int64_t B = v1.dim(0);
  const auto tau = static_cast<float>(cfg.tau);

  StepResult out;
  FT h1 = st.backbone.forward(v1);
  out.features = h1.detach();

  if (cfg.name == "simclr") {
    out.loss = losses::nt_xent(st.projector.forward(h1), project(st, v2), tau);
  } else if (cfg.name == "mocov2plus") {
    FT q1 = st.projector.forward(h1);
    FT q2 = project(st, v2);
    FT k1 = project_target(st, v1);
    FT k2 = project_target(st, v2);
    const bool bootstrap = st.queue->fill() == 0;
    if (bootstrap) st.queue->enqueue(k2);  // first step: seed the negatives
    out.loss = nd::scale(nd::add(losses::infonce_queue(q1, k2, *st.queue, tau),
                                 losses::infonce_queue(q2, k1, *st.queue, tau)),
                         0.5f);
    if (!bootstrap) st.queue->enqueue(k2);
  } else if (cfg.name == "byol") {
    FT p1 = st.predictor->forward(st.projector.forward(h1));
    FT p2 = st.predictor->forward(project(st, v2));
    out.loss = losses::byol_loss(p1, p2, project_target(st, v1),
                                 project_target(st, v2));
  } else if (cfg.name == "simsiam") {
    FT z1 = st.projector.forward(h1);
    FT z2 = project(st, v2);
    FT p1 = st.predictor->forward(z1);
    FT p2 = st.predictor->forward(z2);
    out.loss = losses::simsiam_loss(p1, p2, z1, z2);
  } else if (cfg.name == "barlow") {
    out.loss = losses::barlow_loss(st.projector.forward(h1), project(st, v2),
                                   static_cast<float>(cfg.barlow_lambda));
  } else if (cfg.name == "vicreg") {
    FT z1 = st.projector.forward(h1);
    FT z2 = project(st, v2);
    out.loss = losses::vicreg_loss(z1, z2, static_cast<float>(cfg.vicreg_sim),
                                   static_cast<float>(cfg.vicreg_var),
                                   static_cast<float>(cfg.vicreg_cov));
    out.metrics = vicreg_terms(z1.detach(), z2.detach(), cfg);
  } else if (cfg.name == "nnclr") {
    FT z1 = st.projector.forward(h1);
    FT z2 = project(st, v2);
    FT p1 = st.predictor->forward(z1);
    FT p2 = st.predictor->forward(z2);
    const bool bootstrap = st.queue->fill() == 0;
    if (bootstrap) st.queue->enqueue(z1.detach());
    out.loss = losses::nnclr_loss(z1, z2, p1, p2, *st.queue, tau);
    if (!bootstrap) st.queue->enqueue(z1.detach());
  } else if (cfg.name == "swav") {
    out.loss = losses::swav_loss(st.projector.forward(h1), project(st, v2),
                                 st.prototypes->matrix(), tau,
                                 static_cast<float>(cfg.swav_eps), cfg.swav_iters);
  } else if (cfg.name == "deepclusterv2") {
    FT z1 = st.projector.forward(h1);
    std::vector<int> assigned(batch.indices.size());
    for (size_t i = 0; i < batch.indices.size(); ++i)
      assigned[i] = st.assignments[static_cast<size_t>(batch.indices[i])];
    out.loss = losses::deepclusterv2_loss(z1, st.centroids, assigned, tau);
    // refresh the feature memory with this batch's projected features
    {
      nd::NoGradGuard ng;
      FT zn = nd::l2_normalize(z1.detach(), 1);
      const int64_t d = cfg.projector.back();
      for (size_t i = 0; i < batch.indices.size(); ++i)
        std::copy_n(zn.data().begin() + static_cast<int64_t>(i) * d, d,
                    st.memory.begin() + batch.indices[i] * d);
    }
  } else if (cfg.name == "dino") {
    FT s1 = st.projector.forward(h1);
    FT s2 = project(st, v2);
    FT t1 = project_target(st, v1);
    FT t2 = project_target(st, v2);
    out.loss = losses::dino_loss<float>({s1, s2}, {t1, t2}, *st.center,
                                        tau, static_cast<float>(cfg.tau_teacher));
    st.center->update(nd::concat<float>({t1, t2}, 0));
  } else if (cfg.name == "ressl") {
    FT zs = st.projector.forward(h1);       // strong view through the student
    FT zt = project_target(st, v2);         // weak view through the teacher
    const bool bootstrap = st.queue->fill() < 2;
    if (bootstrap) st.queue->enqueue(zt);
    out.loss = losses::ressl_loss(zs, zt, *st.queue, tau,
                                  static_cast<float>(cfg.tau_teacher));
    if (!bootstrap) st.queue->enqueue(zt);
  } else if (cfg.name == "wmse") {
    const int64_t sub = std::min<int64_t>(cfg.wmse_sub_batch, B);
    out.loss = losses::wmse_loss<float>(
        {st.projector.forward(h1), project(st, v2)}, sub);
  } else if (cfg.name == "supcon") {
    if (batch.labels.empty())
      throw TensorError("training_step: supcon needs labels in the batch");
    FT z = nd::concat<float>({st.projector.forward(h1), project(st, v2)}, 0);
    std::vector<int> labels2 = batch.labels;
    labels2.insert(labels2.end(), batch.labels.begin(), batch.labels.end());
    out.loss = losses::supcon_loss(z, labels2, tau);
  } else {
    throw TensorError("unknown method '" + cfg.name + "'");
  }

  const auto value = static_cast<double>(out.loss.item());
  if (!std::isfinite(value))
    throw TensorError("training_step: non-finite loss in '" + cfg.name +
                      "' at step " + std::to_string(st.step));
  out.metrics["loss"] = value;
  if (st.queue) out.metrics["queue_fill"] = static_cast<double>(st.queue->fill());
  ++st.step;
  return out;
}

void post_optimizer_hook(MethodState& st, int64_t k, int64_t total) {
  const auto& cfg = st.cfg;
  if (st.momentum) {
    const double m = cfg.momentum_scheduled
                         ? models::momentum_schedule(k, total, cfg.momentum_base)
                         : cfg.momentum_base;
    st.momentum->ema_update(static_cast<float>(m));
  }
  if (st.prototypes) st.prototypes->renormalize();
}

void epoch_hook(MethodState& st) {
  if (st.cfg.name != "deepclusterv2") return;
  const int64_t n = st.cfg.dataset_size;
  const int64_t d = st.cfg.projector.back();
  if (static_cast<int64_t>(st.memory.size()) != n * d)
    throw TensorError("epoch_hook: feature memory holds " +
                      std::to_string(st.memory.size() / static_cast<size_t>(d)) +
                      " rows, expected " + std::to_string(n));
  auto res = losses::kmeans_spherical<float>(st.memory, n, d, st.cfg.prototypes,
                                             st.cfg.kmeans_iters, st.rng);
  st.assignments = std::move(res.assign);
  st.centroids = FT::from({st.cfg.prototypes, d}, std::move(res.centroids));
}

}  // namespace sslkit::methods
