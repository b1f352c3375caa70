#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "sslkit/eval.hpp"

using namespace sslkit;
using namespace sslkit::eval;
using FT = nd::Tensor<float>;

namespace {

// one-hot-ish features: class c lights up coordinate c plus small noise
FT class_coded(const std::vector<int>& labels, int64_t d, float noise,
               uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(labels.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < labels.size(); ++i) {
    for (int64_t j = 0; j < d; ++j)
      v[i * static_cast<size_t>(d) + static_cast<size_t>(j)] =
          noise * static_cast<float>(rng.normal());
    v[i * static_cast<size_t>(d) + static_cast<size_t>(labels[i])] += 1.0f;
  }
  return FT::from({static_cast<int64_t>(labels.size()), d}, std::move(v));
}

std::vector<int> cyclic_labels(int64_t n, int classes) {
  std::vector<int> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = static_cast<int>(i % classes);
  return y;
}

}  // namespace

TEST_CASE("linear probe: separable features reach 100%, top5 >= top1") {
  const int C = 10;
  auto ytr = cyclic_labels(200, C);
  auto yte = cyclic_labels(50, C);
  auto res = linear_eval_offline(class_coded(ytr, 16, 0.05f, 1), ytr,
                                 class_coded(yte, 16, 0.05f, 2), yte, C, 30,
                                 0.1, 32);
  CHECK(res.top1 == doctest::Approx(100.0));
  CHECK(res.top5 == doctest::Approx(100.0));
  CHECK(res.top5 >= res.top1);
}

TEST_CASE("linear probe: pure-noise features stay near chance") {
  const int C = 10;
  auto ytr = cyclic_labels(500, C);
  auto yte = cyclic_labels(200, C);
  Rng rng(3);
  auto noise = [&](int64_t n, uint64_t seed) {
    Rng r(seed);
    std::vector<float> v(static_cast<size_t>(n) * 16);
    for (auto& x : v) x = static_cast<float>(r.normal());
    return FT::from({n, 16}, std::move(v));
  };
  auto res = linear_eval_offline(noise(500, 4), ytr, noise(200, 5), yte, C, 5);
  CHECK(res.top1 < 25.0);
  CHECK(res.top5 < 70.0);
  CHECK(res.top5 >= res.top1);
}

TEST_CASE("linear probe: label range and count validation") {
  auto y = cyclic_labels(10, 3);
  auto f = class_coded(y, 4, 0.0f, 1);
  CHECK_THROWS_WITH_AS(linear_eval_offline(f, y, f, y, 2, 1),
                       doctest::Contains("label"), nd::TensorError);
  std::vector<int> short_y(y.begin(), y.end() - 1);
  CHECK_THROWS_AS(linear_eval_offline(f, short_y, f, y, 3, 1), nd::TensorError);
}

TEST_CASE("linear probe is deterministic for a fixed seed") {
  const int C = 5;
  auto ytr = cyclic_labels(60, C);
  auto yte = cyclic_labels(20, C);
  auto ftr = class_coded(ytr, 8, 0.3f, 7);
  auto fte = class_coded(yte, 8, 0.3f, 8);
  auto a = linear_eval_offline(ftr, ytr, fte, yte, C, 3, 0.1, 16, 42);
  auto b = linear_eval_offline(ftr, ytr, fte, yte, C, 3, 0.1, 16, 42);
  CHECK(a.top1 == b.top1);
  CHECK(a.top5 == b.top5);
}

TEST_CASE("knn_eval matches the naive per-query oracle") {
  const int C = 4;
  const int64_t n = 100, d = 6;
  auto ytr = cyclic_labels(n, C);
  auto yte = cyclic_labels(30, C);
  auto ftr = class_coded(ytr, d, 0.8f, 11);
  auto fte = class_coded(yte, d, 0.8f, 12);

  oracles::Vec train(ftr.data().begin(), ftr.data().end());
  int correct = 0;
  for (int64_t q = 0; q < 30; ++q) {
    oracles::Vec query(fte.data().begin() + q * d, fte.data().begin() + (q + 1) * d);
    correct += oracles::knn_predict(train, ytr, n, d, query, 5, C) ==
               yte[static_cast<size_t>(q)];
  }
  const double expect = 100.0 * correct / 30.0;
  CHECK(knn_eval(ftr, ytr, fte, yte, C, 5) == doctest::Approx(expect));
}

TEST_CASE("knn_eval: exact duplicate wins at k=1; clean clusters at k=20") {
  const int C = 3;
  auto ytr = cyclic_labels(60, C);
  auto ftr = class_coded(ytr, 5, 0.02f, 21);
  // query = a scaled copy of train row 7 (cosine ignores scale)
  std::vector<float> q(ftr.data().begin() + 7 * 5, ftr.data().begin() + 8 * 5);
  for (auto& v : q) v *= 3.0f;
  std::vector<int> yq = {ytr[7]};
  CHECK(knn_eval(ftr, ytr, FT::from({1, 5}, std::move(q)), yq, C, 1) ==
        doctest::Approx(100.0));

  auto yte = cyclic_labels(30, C);
  auto fte = class_coded(yte, 5, 0.02f, 22);
  CHECK(knn_eval(ftr, ytr, fte, yte, C, 20) == doctest::Approx(100.0));
}

TEST_CASE("knn_eval: empty train and bad k are errors") {
  auto y = cyclic_labels(10, 2);
  auto f = class_coded(y, 3, 0.1f, 1);
  CHECK_THROWS_AS(knn_eval(FT::zeros({0, 3}), {}, f, y, 2, 1), nd::TensorError);
  CHECK_THROWS_AS(knn_eval(f, y, f, y, 2, 11), nd::TensorError);
  CHECK_THROWS_AS(knn_eval(f, y, f, y, 2, 0), nd::TensorError);
}

TEST_CASE("pca2d reconstructs planar data") {
  // points on a 2d plane embedded in 8d: x = a*u + b*w + m
  Rng rng(31);
  const int64_t n = 50, d = 8;
  std::vector<double> u(d), w(d);
  for (auto& x : u) x = rng.normal();
  for (auto& x : w) x = rng.normal();
  std::vector<float> pts(static_cast<size_t>(n * d));
  std::vector<std::pair<double, double>> coords;
  for (int64_t i = 0; i < n; ++i) {
    const double a = rng.normal(), b = rng.normal();
    coords.push_back({a, b});
    for (int64_t j = 0; j < d; ++j)
      pts[static_cast<size_t>(i * d + j)] =
          static_cast<float>(a * u[static_cast<size_t>(j)] +
                             b * w[static_cast<size_t>(j)] + 0.5);
  }
  FT X = FT::from({n, d}, pts);
  FT P = pca2d(X);
  REQUIRE(P.shape() == nd::Shape({n, 2}));

  // total variance of the projection equals total variance of the data
  double var_x = 0, var_p = 0, mean_p[2] = {0, 0};
  std::vector<double> mean_x(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      mean_x[static_cast<size_t>(j)] += pts[static_cast<size_t>(i * d + j)];
  for (auto& m : mean_x) m /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      const double c =
          pts[static_cast<size_t>(i * d + j)] - mean_x[static_cast<size_t>(j)];
      var_x += c * c;
    }
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < 2; ++j) mean_p[j] += P.data()[static_cast<size_t>(i * 2 + j)];
  mean_p[0] /= static_cast<double>(n);
  mean_p[1] /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < 2; ++j) {
      const double c = P.data()[static_cast<size_t>(i * 2 + j)] - mean_p[j];
      var_p += c * c;
    }
  CHECK(var_p == doctest::Approx(var_x).epsilon(1e-6));
  // projection of centered data is zero-mean
  CHECK(std::abs(mean_p[0]) < 1e-4);
  CHECK(std::abs(mean_p[1]) < 1e-4);
}

TEST_CASE("pca2d on isotropic noise captures about 2/d of the variance") {
  Rng rng(33);
  const int64_t n = 4000, d = 16;
  std::vector<float> pts(static_cast<size_t>(n * d));
  for (auto& x : pts) x = static_cast<float>(rng.normal());
  FT P = pca2d(FT::from({n, d}, std::move(pts)));
  double var_p = 0;
  for (float v : P.data()) var_p += static_cast<double>(v) * v;
  const double frac = var_p / static_cast<double>(n * d);  // data var ~= 1/dim
  CHECK(frac > 1.5 / static_cast<double>(d));
  CHECK(frac < 3.5 / static_cast<double>(d));
}

TEST_CASE("pca2d: rank-1 data zeroes the second axis; n<3 errors") {
  // all points on a single line
  std::vector<float> pts;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 4; ++j) pts.push_back(static_cast<float>(i) * (j + 1));
  FT P = pca2d(FT::from({10, 4}, std::move(pts)));
  for (int64_t i = 0; i < 10; ++i)
    CHECK(P.data()[static_cast<size_t>(i * 2 + 1)] == 0.0f);

  CHECK_THROWS_AS(pca2d(FT::zeros({2, 4})), nd::TensorError);
}

TEST_CASE("export_embeddings format and N=0") {
  const std::string dir = "/tmp/sslkit_eval_export";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  FT f = FT::from({2, 3}, {1.0f, 2.5f, -3.0f, 0.0f, 4.0f, 5.0f});
  export_embeddings(f, {10, 11}, {0, 7}, dir + "/e.csv");
  std::ifstream in(dir + "/e.csv");
  std::string l0, l1, l2, extra;
  std::getline(in, l0);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l0 == "3,2");
  CHECK(l1 == "10,0,1,2.5,-3");
  CHECK(l2 == "11,7,0,4,5");
  CHECK(!std::getline(in, extra));

  export_embeddings(FT::zeros({0, 5}), {}, {}, dir + "/empty.csv");
  std::ifstream in2(dir + "/empty.csv");
  std::getline(in2, l0);
  CHECK(l0 == "5,0");
  CHECK(!std::getline(in2, extra));

  CHECK_THROWS_AS(export_embeddings(f, {1}, {0, 7}, dir + "/bad.csv"),
                  nd::TensorError);
  CHECK_THROWS_AS(export_embeddings(f, {1, 2}, {0, 7}, "/no_such_dir_xyz/e.csv"),
                  nd::TensorError);
}

TEST_CASE("embed: batched frozen features, backbone untouched") {
  auto ds = data::synth_blobs(3, 10, 3, 8, 8, 0.05f, 41);
  Rng rng(42);
  models::SmallCnn<float> net("bb", rng);
  auto before = net.params()[0].second.data();

  FT all = embed(net, ds, ds.n);  // single batch covers the whole set
  REQUIRE(all.shape() == nd::Shape({ds.n, 256}));
  CHECK(net.params()[0].second.data() == before);

  // a full-set batch matches a single-shot forward exactly
  {
    nd::NoGradGuard ng;
    std::vector<int64_t> ids(static_cast<size_t>(ds.n));
    std::iota(ids.begin(), ids.end(), 0);
    FT ref = net.forward(ds.gather(ids));
    CHECK(all.data() == ref.data());
  }

  // deterministic for a fixed batch size, even one that does not divide n
  FT a = embed(net, ds, 7);
  FT b = embed(net, ds, 7);
  REQUIRE(a.shape() == nd::Shape({ds.n, 256}));
  CHECK(a.data() == b.data());
}

TEST_CASE("offline probe separates frozen blob features better than chance") {
  auto train = data::synth_blobs(4, 30, 3, 8, 8, 0.05f, 51);
  auto test = data::synth_blobs(4, 10, 3, 8, 8, 0.05f, 51);
  Rng rng(52);
  models::SmallCnn<float> net("bb", rng);
  FT ftr = embed(net, train);
  FT fte = embed(net, test);
  auto res = linear_eval_offline(ftr, train.labels, fte, test.labels,
                                 train.num_classes, 10);
  CHECK(res.top1 > 40.0);  // random backbone on sigma=0.05 blobs still separates
  const double knn = knn_eval(ftr, train.labels, fte, test.labels,
                              train.num_classes, 5);
  CHECK(knn > 40.0);
}
