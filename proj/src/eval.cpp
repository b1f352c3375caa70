#include "sslkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace sslkit::eval {

using nd::Tensor;
using nd::TensorError;
using FT = Tensor<float>;

FT embed(const models::SmallCnn<float>& backbone, const data::Dataset& ds,
         int64_t batch) {
  nd::NoGradGuard ng;
  std::vector<float> out;
  out.reserve(static_cast<size_t>(ds.n) * 256);
  for (int64_t start = 0; start < ds.n; start += batch) {
    const int64_t end = std::min(ds.n, start + batch);
    std::vector<int64_t> ids(static_cast<size_t>(end - start));
    std::iota(ids.begin(), ids.end(), start);
    FT h = backbone.forward(ds.gather(ids));
    out.insert(out.end(), h.data().begin(), h.data().end());
  }
  return FT::from({ds.n, 256}, std::move(out));
}

namespace {

void check_labels(const std::vector<int>& labels, int num_classes,
                  const char* who) {
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw TensorError(std::string(who) + ": label " + std::to_string(y) +
                        " outside [0," + std::to_string(num_classes) + ")");
}

}  // namespace

EvalResult linear_eval_offline(const FT& train_features,
                               const std::vector<int>& train_labels,
                               const FT& test_features,
                               const std::vector<int>& test_labels,
                               int num_classes, int epochs, double lr,
                               int64_t batch, uint64_t seed) {
  using namespace nd;
  const int64_t n = train_features.dim(0), d = train_features.dim(1);
  if (static_cast<size_t>(n) != train_labels.size())
    throw TensorError("linear_eval: train feature/label count mismatch");
  check_labels(train_labels, num_classes, "linear_eval");
  check_labels(test_labels, num_classes, "linear_eval");

  Rng rng(seed);
  models::MlpHead<float> head("linear", {d, num_classes}, false, rng);
  auto params = head.params();
  std::map<std::string, std::vector<float>> velocity;

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (int64_t start = 0; start < n; start += batch) {
      const int64_t end = std::min(n, start + batch);
      const int64_t B = end - start;
      std::vector<float> x(static_cast<size_t>(B * d));
      std::vector<float> onehot(static_cast<size_t>(B) *
                                    static_cast<size_t>(num_classes),
                                0.0f);
      for (int64_t i = 0; i < B; ++i) {
        const int64_t src = order[static_cast<size_t>(start + i)];
        std::copy_n(train_features.data().begin() + src * d, d, x.begin() + i * d);
        onehot[static_cast<size_t>(i * num_classes +
                                   train_labels[static_cast<size_t>(src)])] = 1.0f;
      }
      for (auto& [nm, p] : params) p.zero_grad();
      FT logits = head.forward(FT::from({B, d}, std::move(x)));
      FT lp = sub(logits, logsumexp(logits, 1, true));
      FT loss = scale(sum(mul(lp, FT::from({B, num_classes}, std::move(onehot)))),
                      -1.0f / static_cast<float>(B));
      backward(loss);
      for (auto& [nm, p] : params) {
        const auto* g = p.grad();
        if (!g) continue;
        auto& v = velocity[nm];
        if (v.empty()) v.assign(p.data().size(), 0.0f);
        for (size_t i = 0; i < v.size(); ++i) {
          v[i] = 0.9f * v[i] + (*g)[i];
          p.data()[i] -= static_cast<float>(lr) * v[i];
        }
      }
    }
  }

  nd::NoGradGuard ng;
  EvalResult res;
  const int64_t m = test_features.dim(0);
  int64_t hit1 = 0, hit5 = 0;
  for (int64_t start = 0; start < m; start += batch) {
    const int64_t end = std::min(m, start + batch);
    const int64_t B = end - start;
    std::vector<float> x(test_features.data().begin() + start * d,
                         test_features.data().begin() + end * d);
    FT logits = head.forward(FT::from({B, d}, std::move(x)));
    for (int64_t i = 0; i < B; ++i) {
      const int y = test_labels[static_cast<size_t>(start + i)];
      const float own = logits.data()[static_cast<size_t>(i * num_classes + y)];
      int64_t above = 0;
      for (int64_t c = 0; c < num_classes; ++c)
        above += logits.data()[static_cast<size_t>(i * num_classes + c)] > own;
      hit1 += above == 0;
      hit5 += above < 5;
    }
  }
  res.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(m);
  res.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(m);
  return res;
}

double knn_eval(const FT& train_features, const std::vector<int>& train_labels,
                const FT& test_features, const std::vector<int>& test_labels,
                int num_classes, int k) {
  const int64_t n = train_features.dim(0), d = train_features.dim(1);
  if (n == 0) throw TensorError("knn_eval: empty train set");
  if (k < 1 || k > n)
    throw TensorError("knn_eval: k=" + std::to_string(k) + " outside [1," +
                      std::to_string(n) + "]");
  check_labels(train_labels, num_classes, "knn_eval");

  auto normalize = [&](const FT& f) {
    nd::NoGradGuard ng;
    return nd::l2_normalize(f, 1);
  };
  FT tn = normalize(train_features);
  FT qn = normalize(test_features);

  const int64_t m = test_features.dim(0);
  int64_t correct = 0;
  std::vector<std::pair<float, int64_t>> sims(static_cast<size_t>(n));
  for (int64_t q = 0; q < m; ++q) {
    for (int64_t i = 0; i < n; ++i) {
      float s = 0;
      for (int64_t j = 0; j < d; ++j)
        s += tn.data()[static_cast<size_t>(i * d + j)] *
             qn.data()[static_cast<size_t>(q * d + j)];
      sims[static_cast<size_t>(i)] = {s, i};
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    std::vector<double> votes(static_cast<size_t>(num_classes), 0.0);
    for (int i = 0; i < k; ++i)
      votes[static_cast<size_t>(
          train_labels[static_cast<size_t>(sims[static_cast<size_t>(i)].second)])] +=
          std::max(0.0f, sims[static_cast<size_t>(i)].first);
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)]) best = c;
    correct += best == test_labels[static_cast<size_t>(q)];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(m);
}

FT pca2d(const FT& features) {
  const int64_t n = features.dim(0), d = features.dim(1);
  if (n < 3) throw TensorError("pca2d: need at least 3 samples");

  // center
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      mean[static_cast<size_t>(j)] +=
          features.data()[static_cast<size_t>(i * d + j)];
  for (auto& v : mean) v /= static_cast<double>(n);
  std::vector<double> xc(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      xc[static_cast<size_t>(i * d + j)] =
          features.data()[static_cast<size_t>(i * d + j)] -
          mean[static_cast<size_t>(j)];

  // covariance, d x d
  std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = 0; q < d; ++q)
        cov[static_cast<size_t>(p * d + q)] +=
            xc[static_cast<size_t>(i * d + p)] * xc[static_cast<size_t>(i * d + q)];
  for (auto& v : cov) v /= static_cast<double>(n - 1);

  auto power_iterate = [&](std::vector<double>& v) {
    double lambda = 0;
    for (int it = 0; it < 1000; ++it) {
      std::vector<double> w(static_cast<size_t>(d), 0.0);
      for (int64_t p = 0; p < d; ++p)
        for (int64_t q = 0; q < d; ++q)
          w[static_cast<size_t>(p)] +=
              cov[static_cast<size_t>(p * d + q)] * v[static_cast<size_t>(q)];
      double norm = 0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-12) return 0.0;  // rank deficient
      double diff = 0;
      for (int64_t j = 0; j < d; ++j) {
        w[static_cast<size_t>(j)] /= norm;
        diff = std::max(diff, std::abs(w[static_cast<size_t>(j)] -
                                       v[static_cast<size_t>(j)]));
      }
      v = w;
      lambda = norm;
      if (diff < 1e-6) break;
    }
    return lambda;
  };

  Rng rng(0);
  std::vector<double> v1(static_cast<size_t>(d));
  for (auto& x : v1) x = rng.normal();
  const double l1 = power_iterate(v1);

  // deflate and repeat
  if (l1 > 0)
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = 0; q < d; ++q)
        cov[static_cast<size_t>(p * d + q)] -=
            l1 * v1[static_cast<size_t>(p)] * v1[static_cast<size_t>(q)];
  std::vector<double> v2(static_cast<size_t>(d));
  for (auto& x : v2) x = rng.normal();
  // keep v2 orthogonal to v1 while iterating
  auto orthogonalize = [&] {
    double dot = 0;
    for (int64_t j = 0; j < d; ++j)
      dot += v1[static_cast<size_t>(j)] * v2[static_cast<size_t>(j)];
    for (int64_t j = 0; j < d; ++j) v2[static_cast<size_t>(j)] -= dot * v1[static_cast<size_t>(j)];
  };
  orthogonalize();
  const double l2 = power_iterate(v2);
  orthogonalize();
  double n2 = 0;
  for (double x : v2) n2 += x * x;
  n2 = std::sqrt(n2);
  if (l2 <= 1e-10 || n2 < 1e-12) {
    std::cerr << "pca2d: data has rank < 2; second axis zeroed\n";
    std::fill(v2.begin(), v2.end(), 0.0);
  } else {
    for (auto& x : v2) x /= n2;
  }

  std::vector<float> out(static_cast<size_t>(n * 2));
  for (int64_t i = 0; i < n; ++i) {
    double a = 0, b = 0;
    for (int64_t j = 0; j < d; ++j) {
      a += xc[static_cast<size_t>(i * d + j)] * v1[static_cast<size_t>(j)];
      b += xc[static_cast<size_t>(i * d + j)] * v2[static_cast<size_t>(j)];
    }
    out[static_cast<size_t>(i * 2)] = static_cast<float>(a);
    out[static_cast<size_t>(i * 2 + 1)] = static_cast<float>(b);
  }
  return FT::from({n, 2}, std::move(out));
}

void export_embeddings(const FT& features, const std::vector<int64_t>& ids,
                       const std::vector<int>& labels, const std::string& path) {
  const int64_t n = features.dim(0), d = features.dim(1);
  if (static_cast<size_t>(n) != ids.size() ||
      static_cast<size_t>(n) != labels.size())
    throw TensorError("export_embeddings: id/label/feature count mismatch");
  std::ofstream f(path);
  if (!f) throw TensorError("export_embeddings: cannot open " + path);
  f << d << ',' << n << '\n';
  for (int64_t i = 0; i < n; ++i) {
    f << ids[static_cast<size_t>(i)] << ',' << labels[static_cast<size_t>(i)];
    for (int64_t j = 0; j < d; ++j)
      f << ',' << features.data()[static_cast<size_t>(i * d + j)];
    f << '\n';
  }
  if (!f) throw TensorError("export_embeddings: write failed for " + path);
}

}  // namespace sslkit::eval
