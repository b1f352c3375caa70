#pragma once

// Method registry: assembles backbone + heads + EMA/queue/center/prototype
// machinery behind one uniform training-step interface so the trainer has no
// per-method branches.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslkit/augment.hpp"
#include "sslkit/losses.hpp"
#include "sslkit/models.hpp"

namespace sslkit::methods {

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {
      "simclr", "mocov2plus", "byol",          "simsiam", "barlow",
      "vicreg", "nnclr",      "swav",          "deepclusterv2",
      "dino",   "ressl",      "wmse",          "supcon"};
  return names;
}

struct MethodConfig {
  std::string name;
  std::vector<int64_t> projector{256, 512, 128};  // starts at backbone dim
  std::vector<int64_t> predictor{128, 256, 128};
  double tau = 0.2;
  double tau_teacher = 0.04;   // dino / ressl
  int64_t queue_size = 0;      // 0 for methods without a queue
  double momentum_base = 0.0;  // 0 for methods without a target network
  bool momentum_scheduled = false;
  int64_t prototypes = 0;      // swav / deepclusterv2 K; dino head output
  double barlow_lambda = 5e-3;
  double vicreg_sim = 25, vicreg_var = 25, vicreg_cov = 1;
  double swav_eps = 0.05;
  int swav_iters = 3;
  int64_t wmse_sub_batch = 64;
  double center_momentum = 0.9;
  int kmeans_iters = 10;
  int64_t dataset_size = 0;  // required for deepclusterv2

  static MethodConfig defaults(const std::string& name);
  void validate() const;
  bool uses_queue() const;
  bool uses_target() const;
  bool uses_predictor() const;
  std::vector<augment::AugmentPolicy> view_policies() const;
};

struct MethodState {
  MethodConfig cfg;
  models::SmallCnn<float> backbone;
  models::MlpHead<float> projector;
  std::optional<models::MlpHead<float>> predictor;
  std::optional<models::SmallCnn<float>> target_backbone;
  std::optional<models::MlpHead<float>> target_projector;
  std::optional<models::MomentumPair<float>> momentum;
  std::optional<losses::FeatureQueue<float>> queue;
  std::optional<losses::Center<float>> center;
  std::optional<models::Prototypes<float>> prototypes;
  // DeepCluster V2: one projected feature per dataset sample + assignments
  std::vector<float> memory;
  std::vector<int> assignments;
  nd::Tensor<float> centroids;
  Rng rng{0};
  int64_t step = 0;

  // everything the optimizer updates
  models::ParamList<float> trainable_params();
  // trainable + EMA targets + anything else the checkpoint must carry
  models::ParamList<float> all_params();
};

struct StepResult {
  nd::Tensor<float> loss;
  std::map<std::string, double> metrics;
  nd::Tensor<float> features;  // detached backbone output, feeds the probe
};

MethodState build(const MethodConfig& cfg, const Rng& rng);
StepResult training_step(MethodState& state, const augment::ViewBatch& batch);
void post_optimizer_hook(MethodState& state, int64_t k, int64_t total);
void epoch_hook(MethodState& state);

}  // namespace sslkit::methods
