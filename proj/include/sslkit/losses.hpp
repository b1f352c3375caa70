#pragma once

// The 13 self-supervised losses plus the shared machinery they need:
// feature queue, Sinkhorn-Knopp assignment, whitening, EMA centering and
// spherical k-means. Losses are pure functions of tensors; detached inputs
// are documented per function and enforced (a detached/constant operand
// never receives gradient).

#include <cstdio>
#include <limits>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit::losses {

using nd::Tensor;
using nd::TensorError;

// ---------------------------------------------------------------------------
// FeatureQueue: fixed-capacity FIFO of L2-normalized rows.

template <class T>
class FeatureQueue {
 public:
  FeatureQueue() = default;
  FeatureQueue(int64_t capacity, int64_t dim, bool with_labels = false)
      : capacity_(capacity),
        dim_(dim),
        storage_(static_cast<size_t>(capacity * dim), T(0)),
        with_labels_(with_labels) {
    if (with_labels) labels_.assign(static_cast<size_t>(capacity), -1);
  }

  int64_t capacity() const { return capacity_; }
  int64_t dim() const { return dim_; }
  int64_t fill() const { return fill_; }

  void enqueue(const Tensor<T>& z, const std::vector<int>* labels = nullptr) {
    if (z.ndim() != 2 || z.dim(1) != dim_)
      throw TensorError("queue: expected [B," + std::to_string(dim_) +
                        "] rows, got " + nd::shape_str(z.shape()));
    const int64_t B = z.dim(0);
    for (int64_t i = 0; i < B; ++i) {
      T n = 0;
      for (int64_t j = 0; j < dim_; ++j) {
        const T v = z.data()[static_cast<size_t>(i * dim_ + j)];
        n += v * v;
      }
      n = std::sqrt(n) + T(1e-8);
      for (int64_t j = 0; j < dim_; ++j)
        storage_[static_cast<size_t>(cursor_ * dim_ + j)] =
            z.data()[static_cast<size_t>(i * dim_ + j)] / n;
      if (with_labels_)
        labels_[static_cast<size_t>(cursor_)] = labels ? (*labels)[static_cast<size_t>(i)] : -1;
      cursor_ = (cursor_ + 1) % capacity_;
      fill_ = std::min(fill_ + 1, capacity_);
    }
  }

  // Filled slots as a detached [fill, dim] tensor.
  Tensor<T> as_tensor() const {
    std::vector<T> v(storage_.begin(), storage_.begin() + fill_ * dim_);
    return Tensor<T>::from({fill_, dim_}, std::move(v));
  }

  // Per row of z, the filled entry with the highest cosine similarity.
  // Ties break towards the lowest slot index. Result is detached.
  Tensor<T> nearest(const Tensor<T>& z) const {
    if (fill_ == 0) throw TensorError("queue: nearest() on empty queue");
    const int64_t B = z.dim(0);
    std::vector<T> out(static_cast<size_t>(B * dim_));
    for (int64_t i = 0; i < B; ++i) {
      T zn = 0;
      for (int64_t j = 0; j < dim_; ++j) {
        const T v = z.data()[static_cast<size_t>(i * dim_ + j)];
        zn += v * v;
      }
      zn = std::sqrt(zn) + T(1e-8);
      int64_t best = 0;
      T best_sim = -std::numeric_limits<T>::infinity();
      for (int64_t s = 0; s < fill_; ++s) {
        T dot = 0;
        for (int64_t j = 0; j < dim_; ++j)
          dot += storage_[static_cast<size_t>(s * dim_ + j)] *
                 z.data()[static_cast<size_t>(i * dim_ + j)];
        const T sim = dot / zn;
        if (sim > best_sim) {
          best_sim = sim;
          best = s;
        }
      }
      std::copy_n(storage_.data() + best * dim_, dim_, out.data() + i * dim_);
    }
    return Tensor<T>::from({B, dim_}, std::move(out));
  }

  std::vector<T>& raw_storage() { return storage_; }
  const std::vector<T>& raw_storage() const { return storage_; }
  int64_t& raw_cursor() { return cursor_; }
  int64_t& raw_fill() { return fill_; }

 private:
  int64_t capacity_ = 0, dim_ = 0, cursor_ = 0, fill_ = 0;
  std::vector<T> storage_;
  bool with_labels_ = false;
  std::vector<int> labels_;
};

// EMA center for DINO-style logit centering.
template <class T>
struct Center {
  std::vector<T> c;  // 1 x K
  T momentum = T(0.9);

  Center() = default;
  Center(int64_t k, T m) : c(static_cast<size_t>(k), T(0)), momentum(m) {}

  // c <- m*c + (1-m)*mean_i(batch_i)
  void update(const Tensor<T>& teacher_batch) {
    const int64_t B = teacher_batch.dim(0);
    const int64_t K = teacher_batch.dim(1);
    if (static_cast<size_t>(K) != c.size())
      throw TensorError("center: width mismatch");
    for (int64_t k = 0; k < K; ++k) {
      T m = 0;
      for (int64_t b = 0; b < B; ++b)
        m += teacher_batch.data()[static_cast<size_t>(b * K + k)];
      m /= static_cast<T>(B);
      c[static_cast<size_t>(k)] =
          momentum * c[static_cast<size_t>(k)] + (T(1) - momentum) * m;
    }
  }

  Tensor<T> as_tensor() const {
    return Tensor<T>::from({1, static_cast<int64_t>(c.size())}, c);
  }
};

// ---------------------------------------------------------------------------
// shared helpers

template <class T>
Tensor<T> cosine_sim(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  using namespace nd;
  Tensor<T> na = sqrt(sum(mul(a, a)));
  Tensor<T> nb = sqrt(sum(mul(b, b)));
  return div(sum(mul(a, b)), add_scalar(mul(na, nb), eps));
}

// per-row cosine similarity of two [B,d] matrices -> [B,1]
template <class T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace nd;
  return sum(mul(l2_normalize(a, 1), l2_normalize(b, 1)), 1, true);
}

namespace detail {

template <class T>
Tensor<T> diag_mask(int64_t n, T value) {
  std::vector<T> v(static_cast<size_t>(n * n), T(0));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = value;
  return Tensor<T>::from({n, n}, std::move(v));
}

template <class T>
Tensor<T> offdiag_mask(int64_t n) {
  std::vector<T> v(static_cast<size_t>(n * n), T(1));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = T(0);
  return Tensor<T>::from({n, n}, std::move(v));
}

// numerically inert "minus infinity" for masked logits
template <class T>
constexpr T neg_large() {
  return T(-1e30);
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& s) {
  return nd::sub(s, nd::logsumexp(s, 1, true));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SimCLR

template <class T>
Tensor<T> nt_xent(const Tensor<T>& z1, const Tensor<T>& z2, T tau) {
  using namespace nd;
  const int64_t B = z1.dim(0);
  if (B < 2) throw TensorError("nt_xent: batch must have at least 2 samples");
  if (tau <= T(0)) throw TensorError("nt_xent: temperature must be positive");
  Tensor<T> z = l2_normalize(concat<T>({z1, z2}, 0), 1);
  Tensor<T> s = scale(matmul(z, transpose(z)), T(1) / tau);
  Tensor<T> masked = add(s, detail::diag_mask<T>(2 * B, detail::neg_large<T>()));
  // positive for row i is row (i+B) mod 2B
  std::vector<T> pm(static_cast<size_t>(4 * B * B), T(0));
  for (int64_t i = 0; i < 2 * B; ++i)
    pm[static_cast<size_t>(i * 2 * B + (i + B) % (2 * B))] = T(1);
  Tensor<T> pos = sum(mul(masked, Tensor<T>::from({2 * B, 2 * B}, std::move(pm))), 1,
                      true);
  return mean(sub(logsumexp(masked, 1, true), pos));
}

// ---------------------------------------------------------------------------
// MoCo V2+ (one direction; the method symmetrizes by calling twice)

template <class T>
Tensor<T> infonce_queue(const Tensor<T>& q, const Tensor<T>& k_pos,
                        const FeatureQueue<T>& queue, T tau) {
  using namespace nd;
  if (queue.fill() < 1) throw TensorError("infonce_queue: queue is empty");
  Tensor<T> qn = l2_normalize(q, 1);
  Tensor<T> kn = l2_normalize(k_pos.detach(), 1);
  Tensor<T> pos = scale(sum(mul(qn, kn), 1, true), T(1) / tau);        // [B,1]
  Tensor<T> neg = scale(matmul(qn, transpose(queue.as_tensor())), T(1) / tau);
  Tensor<T> logits = concat<T>({pos, neg}, 1);
  return mean(sub(logsumexp(logits, 1, true), pos));
}

// ---------------------------------------------------------------------------
// BYOL

template <class T>
Tensor<T> byol_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& t1,
                    const Tensor<T>& t2) {
  using namespace nd;
  Tensor<T> a = mean(sub(Tensor<T>::scalar(T(2)), scale(row_cosine(p1, t2.detach()), T(2))));
  Tensor<T> b = mean(sub(Tensor<T>::scalar(T(2)), scale(row_cosine(p2, t1.detach()), T(2))));
  return add(a, b);
}

// ---------------------------------------------------------------------------
// SimSiam

template <class T>
Tensor<T> simsiam_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& z1,
                       const Tensor<T>& z2) {
  using namespace nd;
  Tensor<T> a = mean(row_cosine(p1, z2.detach()));
  Tensor<T> b = mean(row_cosine(p2, z1.detach()));
  return scale(add(a, b), T(-0.5));
}

// ---------------------------------------------------------------------------
// Barlow Twins

template <class T>
Tensor<T> barlow_loss(const Tensor<T>& z1, const Tensor<T>& z2, T lambda) {
  using namespace nd;
  const int64_t B = z1.dim(0), d = z1.dim(1);
  if (B < 2) throw TensorError("barlow_loss: need B >= 2 for batch std");
  for (const Tensor<T>* z : {&z1, &z2}) {
    for (int64_t j = 0; j < d; ++j) {
      T m = 0, v = 0;
      for (int64_t i = 0; i < B; ++i) m += z->data()[static_cast<size_t>(i * d + j)];
      m /= static_cast<T>(B);
      for (int64_t i = 0; i < B; ++i) {
        const T x = z->data()[static_cast<size_t>(i * d + j)] - m;
        v += x * x;
      }
      if (v / static_cast<T>(B) < T(1e-12)) {
        std::fprintf(stderr,
                     "barlow_loss: near-zero std in dimension %lld, eps-guarded\n",
                     static_cast<long long>(j));
        break;
      }
    }
  }
  auto standardize = [&](const Tensor<T>& z) {
    return div(sub(z, batch_mean(z)), batch_std(z, T(1e-5)));
  };
  Tensor<T> c = scale(matmul(transpose(standardize(z1)), standardize(z2)),
                      T(1) / static_cast<T>(B));
  Tensor<T> on = sub(detail::diag_mask<T>(d, T(1)), mul(c, detail::diag_mask<T>(d, T(1))));
  Tensor<T> off = mul(c, detail::offdiag_mask<T>(d));
  return add(sum(mul(on, on)), scale(sum(mul(off, off)), lambda));
}

// ---------------------------------------------------------------------------
// VICReg

template <class T>
Tensor<T> vicreg_loss(const Tensor<T>& z1, const Tensor<T>& z2, T lambda = T(25),
                      T mu = T(25), T nu = T(1)) {
  using namespace nd;
  const int64_t B = z1.dim(0), d = z1.dim(1);
  if (B < 2) throw TensorError("vicreg_loss: need B >= 2");
  Tensor<T> diff = sub(z1, z2);
  Tensor<T> sim = mean(mul(diff, diff));
  auto var_term = [&](const Tensor<T>& z) {
    Tensor<T> c = sub(z, batch_mean(z));
    Tensor<T> var = scale(sum(mul(c, c), 0, true), T(1) / static_cast<T>(B - 1));
    return mean(relu(sub(Tensor<T>::scalar(T(1)), sqrt(add_scalar(var, T(1e-4))))));
  };
  auto cov_term = [&](const Tensor<T>& z) {
    Tensor<T> c = sub(z, batch_mean(z));
    Tensor<T> cov = scale(matmul(transpose(c), c), T(1) / static_cast<T>(B - 1));
    Tensor<T> off = mul(cov, detail::offdiag_mask<T>(d));
    return scale(sum(mul(off, off)), T(1) / static_cast<T>(d));
  };
  return add(add(scale(sim, lambda), scale(add(var_term(z1), var_term(z2)), mu)),
             scale(add(cov_term(z1), cov_term(z2)), nu));
}

// ---------------------------------------------------------------------------
// NNCLR

template <class T>
Tensor<T> nnclr_loss(const Tensor<T>& z1, const Tensor<T>& z2, const Tensor<T>& p1,
                     const Tensor<T>& p2, const FeatureQueue<T>& queue, T tau) {
  using namespace nd;
  if (queue.fill() < 1) throw TensorError("nnclr_loss: queue is empty");
  auto direction = [&](const Tensor<T>& z, const Tensor<T>& p) {
    Tensor<T> nn = queue.nearest(z.detach());  // gradient-free lookup
    Tensor<T> logits = scale(matmul(nn, transpose(l2_normalize(p, 1))), T(1) / tau);
    const int64_t B = z.dim(0);
    std::vector<T> dm(static_cast<size_t>(B * B), T(0));
    for (int64_t i = 0; i < B; ++i) dm[static_cast<size_t>(i * B + i)] = T(1);
    Tensor<T> pos = sum(mul(logits, Tensor<T>::from({B, B}, std::move(dm))), 1, true);
    return mean(sub(logsumexp(logits, 1, true), pos));
  };
  return scale(add(direction(z1, p2), direction(z2, p1)), T(0.5));
}

// ---------------------------------------------------------------------------
// Sinkhorn-Knopp (non-differentiable; SwAV detaches the assignment)

template <class T>
Tensor<T> sinkhorn(const Tensor<T>& scores, T eps = T(0.05), int iters = 3) {
  if (eps <= T(0)) throw TensorError("sinkhorn: eps must be positive");
  const int64_t B = scores.dim(0), K = scores.dim(1);
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : scores.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw TensorError("sinkhorn: non-finite score");
    mx = std::max(mx, v);
  }
  std::vector<T> q(scores.data().size());
  for (size_t i = 0; i < q.size(); ++i)
    q[i] = std::exp((scores.data()[i] - mx) / eps);
  for (int it = 0; it < iters; ++it) {
    for (int64_t k = 0; k < K; ++k) {  // columns to uniform mass
      T s = 0;
      for (int64_t b = 0; b < B; ++b) s += q[static_cast<size_t>(b * K + k)];
      if (s > T(0))
        for (int64_t b = 0; b < B; ++b) q[static_cast<size_t>(b * K + k)] /= s * K;
    }
    for (int64_t b = 0; b < B; ++b) {  // rows to uniform mass
      T s = 0;
      for (int64_t k = 0; k < K; ++k) s += q[static_cast<size_t>(b * K + k)];
      if (s > T(0))
        for (int64_t k = 0; k < K; ++k) q[static_cast<size_t>(b * K + k)] /= s * B;
    }
  }
  for (int64_t b = 0; b < B; ++b) {  // final step: each row sums to exactly 1
    T s = 0;
    for (int64_t k = 0; k < K; ++k) s += q[static_cast<size_t>(b * K + k)];
    for (int64_t k = 0; k < K; ++k) q[static_cast<size_t>(b * K + k)] /= s;
  }
  return Tensor<T>::from({B, K}, std::move(q));
}

// ---------------------------------------------------------------------------
// SwAV

// prototype scores s = z_hat C_hat^T, gradient flows to both z and C
template <class T>
Tensor<T> swav_scores(const Tensor<T>& z, const Tensor<T>& prototypes) {
  using namespace nd;
  return matmul(l2_normalize(z, 1), transpose(l2_normalize(prototypes, 1)));
}

// -mean_i sum_k q_ik log softmax(s_i / tau)_k with q a fixed assignment
template <class T>
Tensor<T> swav_ce(const Tensor<T>& scores, const Tensor<T>& q, T tau) {
  using namespace nd;
  Tensor<T> lp = detail::log_softmax_rows(scale(scores, T(1) / tau));
  return scale(sum(mul(q.detach(), lp)), T(-1) / static_cast<T>(scores.dim(0)));
}

template <class T>
Tensor<T> swav_loss(const Tensor<T>& z1, const Tensor<T>& z2,
                    const Tensor<T>& prototypes, T tau = T(0.1), T eps = T(0.05),
                    int sinkhorn_iters = 3) {
  using namespace nd;
  Tensor<T> s1 = swav_scores(z1, prototypes);
  Tensor<T> s2 = swav_scores(z2, prototypes);
  Tensor<T> q1 = sinkhorn(s1.detach(), eps, sinkhorn_iters);
  Tensor<T> q2 = sinkhorn(s2.detach(), eps, sinkhorn_iters);
  return scale(add(swav_ce(s1, q2, tau), swav_ce(s2, q1, tau)), T(0.5));
}

// ---------------------------------------------------------------------------
// spherical k-means (DeepCluster V2)

template <class T>
struct KmeansResult {
  std::vector<T> centroids;  // K x d, unit rows
  std::vector<int> assign;   // N
  T objective = T(0);        // mean (1 - cos) after the last assignment
};

template <class T>
KmeansResult<T> kmeans_spherical(const std::vector<T>& features, int64_t n,
                                 int64_t d, int64_t k, int iters, Rng& rng) {
  if (k > n) throw TensorError("kmeans: K exceeds number of points");
  KmeansResult<T> res;
  res.centroids.assign(static_cast<size_t>(k * d), T(0));
  res.assign.assign(static_cast<size_t>(n), 0);
  // init: K distinct random rows
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  for (int64_t c = 0; c < k; ++c)
    std::copy_n(features.data() + idx[static_cast<size_t>(c)] * d, d,
                res.centroids.data() + c * d);

  auto assign_pass = [&]() {
    T obj = 0;
    for (int64_t i = 0; i < n; ++i) {
      int best = 0;
      T best_dot = -std::numeric_limits<T>::infinity();
      for (int64_t c = 0; c < k; ++c) {
        T dot = 0;
        for (int64_t j = 0; j < d; ++j)
          dot += features[static_cast<size_t>(i * d + j)] *
                 res.centroids[static_cast<size_t>(c * d + j)];
        if (dot > best_dot) {  // ties: lowest index wins
          best_dot = dot;
          best = static_cast<int>(c);
        }
      }
      res.assign[static_cast<size_t>(i)] = best;
      obj += T(1) - best_dot;
    }
    return obj / static_cast<T>(n);
  };

  for (int it = 0; it < iters; ++it) {
    res.objective = assign_pass();
    // update: mean + renormalize
    std::vector<T> acc(static_cast<size_t>(k * d), T(0));
    std::vector<int64_t> count(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < n; ++i) {
      const int c = res.assign[static_cast<size_t>(i)];
      ++count[static_cast<size_t>(c)];
      for (int64_t j = 0; j < d; ++j)
        acc[static_cast<size_t>(c * d + j)] += features[static_cast<size_t>(i * d + j)];
    }
    for (int64_t c = 0; c < k; ++c) {
      if (count[static_cast<size_t>(c)] == 0) {
        // empty cluster: re-seed from the point farthest from its centroid
        int64_t far = 0;
        T far_dist = -std::numeric_limits<T>::infinity();
        for (int64_t i = 0; i < n; ++i) {
          const int ci = res.assign[static_cast<size_t>(i)];
          T dot = 0;
          for (int64_t j = 0; j < d; ++j)
            dot += features[static_cast<size_t>(i * d + j)] *
                   res.centroids[static_cast<size_t>(ci * d + j)];
          if (T(1) - dot > far_dist) {
            far_dist = T(1) - dot;
            far = i;
          }
        }
        std::copy_n(features.data() + far * d, d, acc.data() + c * d);
        count[static_cast<size_t>(c)] = 1;
      }
      T norm = 0;
      for (int64_t j = 0; j < d; ++j) {
        acc[static_cast<size_t>(c * d + j)] /= static_cast<T>(count[static_cast<size_t>(c)]);
        norm += acc[static_cast<size_t>(c * d + j)] * acc[static_cast<size_t>(c * d + j)];
      }
      norm = std::sqrt(norm) + T(1e-8);
      for (int64_t j = 0; j < d; ++j)
        res.centroids[static_cast<size_t>(c * d + j)] =
            acc[static_cast<size_t>(c * d + j)] / norm;
    }
  }
  res.objective = assign_pass();
  return res;
}

template <class T>
Tensor<T> deepclusterv2_loss(const Tensor<T>& z, const Tensor<T>& centroids,
                             const std::vector<int>& assigned, T tau = T(0.1)) {
  using namespace nd;
  const int64_t B = z.dim(0), K = centroids.dim(0);
  for (int64_t i = 0; i < B; ++i)
    if (assigned[static_cast<size_t>(i)] < 0)
      throw TensorError("deepclusterv2_loss: missing cluster assignment for row " +
                        std::to_string(i));
  Tensor<T> logits =
      scale(matmul(l2_normalize(z, 1), transpose(centroids.detach())), T(1) / tau);
  Tensor<T> lp = detail::log_softmax_rows(logits);
  std::vector<T> onehot(static_cast<size_t>(B * K), T(0));
  for (int64_t i = 0; i < B; ++i)
    onehot[static_cast<size_t>(i * K + assigned[static_cast<size_t>(i)])] = T(1);
  return scale(sum(mul(lp, Tensor<T>::from({B, K}, std::move(onehot)))),
               T(-1) / static_cast<T>(B));
}

// ---------------------------------------------------------------------------
// DINO

template <class T>
Tensor<T> dino_loss(const std::vector<Tensor<T>>& student,
                    const std::vector<Tensor<T>>& teacher, const Center<T>& center,
                    T tau_s = T(0.1), T tau_t = T(0.04)) {
  using namespace nd;
  if (tau_s <= T(0) || tau_t <= T(0))
    throw TensorError("dino_loss: temperatures must be positive");
  if (student.size() < 2 || teacher.size() != student.size())
    throw TensorError("dino_loss: need >= 2 views on both branches");
  Tensor<T> c = center.as_tensor();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  int pairs = 0;
  for (size_t v = 0; v < student.size(); ++v)
    for (size_t w = 0; w < teacher.size(); ++w) {
      if (v == w) continue;
      Tensor<T> pt;
      {
        nd::NoGradGuard ng;
        pt = softmax(scale(sub(teacher[w].detach(), c), T(1) / tau_t), 1);
      }
      Tensor<T> lp = detail::log_softmax_rows(scale(student[v], T(1) / tau_s));
      total = add(total, scale(sum(mul(pt, lp)),
                               T(-1) / static_cast<T>(student[v].dim(0))));
      ++pairs;
    }
  return scale(total, T(1) / static_cast<T>(pairs));
}

template <class T>
void center_update(Center<T>& center, const Tensor<T>& teacher_batch) {
  center.update(teacher_batch);
}

// ---------------------------------------------------------------------------
// ReSSL

template <class T>
Tensor<T> ressl_loss(const Tensor<T>& z_student, const Tensor<T>& z_teacher,
                     const FeatureQueue<T>& queue, T tau_s = T(0.1),
                     T tau_t = T(0.04)) {
  using namespace nd;
  if (queue.fill() < 2) throw TensorError("ressl_loss: queue fill must be >= 2");
  Tensor<T> qm = transpose(queue.as_tensor());
  Tensor<T> pt;
  {
    nd::NoGradGuard ng;
    pt = softmax(scale(matmul(l2_normalize(z_teacher.detach(), 1), qm), T(1) / tau_t), 1);
  }
  Tensor<T> lp = detail::log_softmax_rows(
      scale(matmul(l2_normalize(z_student, 1), qm), T(1) / tau_s));
  return scale(sum(mul(pt, lp)), T(-1) / static_cast<T>(z_student.dim(0)));
}

// ---------------------------------------------------------------------------
// whitening (W-MSE)

template <class T>
Tensor<T> whiten(const Tensor<T>& z, T eps = T(1e-4)) {
  using namespace nd;
  const int64_t B = z.dim(0), d = z.dim(1);
  if (B <= d)
    throw TensorError("whiten: need B > d (got B=" + std::to_string(B) +
                      ", d=" + std::to_string(d) + "); use a larger sub-batch");
  Tensor<T> a = sub(z, batch_mean(z));
  std::vector<T> eye(static_cast<size_t>(d * d), T(0));
  for (int64_t i = 0; i < d; ++i) eye[static_cast<size_t>(i * d + i)] = eps;
  Tensor<T> cov = add(scale(matmul(transpose(a), a), T(1) / static_cast<T>(B - 1)),
                      Tensor<T>::from({d, d}, std::move(eye)));
  Tensor<T> l = cholesky(cov);
  return transpose(triangular_solve(l, transpose(a)));
}

template <class T>
Tensor<T> wmse_loss(const std::vector<Tensor<T>>& views, int64_t sub_batch = 64) {
  using namespace nd;
  if (views.size() < 2) throw TensorError("wmse_loss: need at least 2 views");
  const int64_t B = views[0].dim(0);
  std::vector<Tensor<T>> whitened;
  for (const auto& v : views) {
    std::vector<Tensor<T>> chunks;
    for (int64_t start = 0; start < B; start += sub_batch) {
      const int64_t len = std::min(sub_batch, B - start);
      chunks.push_back(whiten(slice(v, 0, start, len)));
    }
    whitened.push_back(l2_normalize(concat<T>(chunks, 0), 1));
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  int pairs = 0;
  for (size_t i = 0; i < whitened.size(); ++i)
    for (size_t j = i + 1; j < whitened.size(); ++j) {
      Tensor<T> diff = sub(whitened[i], whitened[j]);
      total = add(total, mean(mul(diff, diff)));
      ++pairs;
    }
  return scale(total, T(1) / static_cast<T>(pairs));
}

// ---------------------------------------------------------------------------
// Supervised Contrastive

template <class T>
Tensor<T> supcon_loss(const Tensor<T>& z, const std::vector<int>& labels,
                      T tau = T(0.1)) {
  using namespace nd;
  const int64_t N = z.dim(0);
  if (tau <= T(0)) throw TensorError("supcon_loss: temperature must be positive");
  Tensor<T> zn = l2_normalize(z, 1);
  Tensor<T> s = scale(matmul(zn, transpose(zn)), T(1) / tau);
  Tensor<T> masked = add(s, detail::diag_mask<T>(N, detail::neg_large<T>()));
  Tensor<T> lse = logsumexp(masked, 1, true);  // [N,1]
  Tensor<T> logprob = sub(masked, lse);
  // positive mask and per-anchor positive counts
  std::vector<T> pm(static_cast<size_t>(N * N), T(0));
  std::vector<T> inv_count(static_cast<size_t>(N), T(0));
  int64_t anchors = 0;
  for (int64_t i = 0; i < N; ++i) {
    int64_t cnt = 0;
    for (int64_t j = 0; j < N; ++j)
      if (i != j && labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
        pm[static_cast<size_t>(i * N + j)] = T(1);
        ++cnt;
      }
    if (cnt > 0) {
      inv_count[static_cast<size_t>(i)] = T(1) / static_cast<T>(cnt);
      ++anchors;
    }
  }
  if (anchors == 0)
    throw TensorError("supcon_loss: no anchor has a positive with the same label");
  Tensor<T> per_anchor = sum(mul(logprob, Tensor<T>::from({N, N}, std::move(pm))), 1,
                             true);  // [N,1]
  Tensor<T> weighted =
      mul(per_anchor, Tensor<T>::from({static_cast<int64_t>(N), 1}, std::move(inv_count)));
  return scale(sum(weighted), T(-1) / static_cast<T>(anchors));
}

}  // namespace sslkit::losses
