#pragma once

// Offline evaluation on frozen features: linear probe, k-NN, PCA projection
// and embedding export.

#include <string>
#include <vector>

#include "sslkit/data.hpp"
#include "sslkit/models.hpp"

namespace sslkit::eval {

// Frozen-backbone features for a whole dataset, batched, no augmentation.
nd::Tensor<float> embed(const models::SmallCnn<float>& backbone,
                        const data::Dataset& ds, int64_t batch = 256);

struct EvalResult {
  double top1 = 0;  // percent
  double top5 = 0;
};

EvalResult linear_eval_offline(const nd::Tensor<float>& train_features,
                               const std::vector<int>& train_labels,
                               const nd::Tensor<float>& test_features,
                               const std::vector<int>& test_labels,
                               int num_classes, int epochs = 30, double lr = 0.1,
                               int64_t batch = 256, uint64_t seed = 0);

// cosine-similarity weighted vote among the k nearest train features;
// weights clipped at 0, ties broken toward the lower index
double knn_eval(const nd::Tensor<float>& train_features,
                const std::vector<int>& train_labels,
                const nd::Tensor<float>& test_features,
                const std::vector<int>& test_labels, int num_classes, int k = 20);

// projection onto the top-2 principal components (power iteration with
// deflation, tol 1e-6, max 1000 iters); rank<2 zeroes the second axis
nd::Tensor<float> pca2d(const nd::Tensor<float>& features);

// header "d,N" then per row: sample id, label, d comma-separated values
void export_embeddings(const nd::Tensor<float>& features,
                       const std::vector<int64_t>& ids,
                       const std::vector<int>& labels, const std::string& path);

}  // namespace sslkit::eval
