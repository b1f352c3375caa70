#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "sslkit/data.hpp"

using namespace sslkit;
using namespace sslkit::data;

namespace {

std::string tmp_path(const char* name) {
  return std::string("/tmp/sslkit_test_") + name;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("read_cifar_bin: empty file, crafted record, concatenation, size error") {
  const auto empty = tmp_path("empty.bin");
  write_bytes(empty, {});
  CHECK(read_cifar_bin({empty}).n == 0);

  // one record: label 7, all pixels 255
  std::vector<unsigned char> rec(3073, 255);
  rec[0] = 7;
  const auto one = tmp_path("one.bin");
  write_bytes(one, rec);
  Dataset ds = read_cifar_bin({one});
  CHECK(ds.n == 1);
  CHECK(ds.labels[0] == 7);
  for (float v : ds.pixels) CHECK(v == doctest::Approx(1.0f));

  // two files concatenate in order
  std::vector<unsigned char> rec2(3073, 0);
  rec2[0] = 3;
  const auto two = tmp_path("two.bin");
  write_bytes(two, rec2);
  Dataset both = read_cifar_bin({one, two});
  CHECK(both.n == 2);
  CHECK(both.labels == std::vector<int>({7, 3}));
  CHECK(both.pixels[0] == doctest::Approx(1.0f));
  CHECK(both.pixels[3072] == doctest::Approx(0.0f));

  const auto bad = tmp_path("bad.bin");
  write_bytes(bad, std::vector<unsigned char>(100, 0));
  CHECK_THROWS_WITH_AS(read_cifar_bin({bad}), doctest::Contains("100"),
                       nd::TensorError);
}

TEST_CASE("write_cifar_bin round-trips") {
  Dataset ds = synth_blobs(3, 4, 3, 8, 8, 0.1f, 5);
  const auto path = tmp_path("roundtrip.bin");
  write_cifar_bin(ds, path);
  Dataset back = read_cifar_bin({path}, 3, 8, 8);
  CHECK(back.n == ds.n);
  CHECK(back.labels == ds.labels);
  for (size_t i = 0; i < ds.pixels.size(); ++i)
    CHECK(std::abs(back.pixels[i] - ds.pixels[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("synth_blobs: determinism, sigma=0, class structure") {
  Dataset a = synth_blobs(4, 3, 3, 8, 8, 0.1f, 42);
  Dataset b = synth_blobs(4, 3, 3, 8, 8, 0.1f, 42);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  Dataset c = synth_blobs(4, 3, 3, 8, 8, 0.1f, 43);
  CHECK(a.pixels != c.pixels);

  Dataset clean = synth_blobs(4, 3, 3, 8, 8, 0.0f, 42);
  const int64_t per = clean.image_numel();
  for (int k = 0; k < 4; ++k)
    for (int s = 1; s < 3; ++s)
      for (int64_t j = 0; j < per; ++j)
        CHECK(clean.pixels[static_cast<size_t>((k * 3 + s) * per + j)] ==
              clean.pixels[static_cast<size_t>((k * 3) * per + j)]);

  CHECK_THROWS_AS(synth_blobs(1, 3, 3, 8, 8, 0.1f, 0), nd::TensorError);
}

TEST_CASE("1-NN on raw pixels solves synth_blobs at sigma=0.05") {
  Dataset ds = synth_blobs(5, 10, 3, 8, 8, 0.05f, 7);
  const int64_t per = ds.image_numel();
  // leave-one-out: query each image against the rest
  std::vector<double> train;
  std::vector<int> labels;
  int correct = 0;
  for (int64_t q = 0; q < ds.n; ++q) {
    train.clear();
    labels.clear();
    for (int64_t i = 0; i < ds.n; ++i) {
      if (i == q) continue;
      for (int64_t j = 0; j < per; ++j)
        train.push_back(ds.pixels[static_cast<size_t>(i * per + j)]);
      labels.push_back(ds.labels[static_cast<size_t>(i)]);
    }
    std::vector<double> query(ds.pixels.begin() + q * per,
                              ds.pixels.begin() + (q + 1) * per);
    const int pred =
        oracles::knn_predict(train, labels, ds.n - 1, per, query, 1, ds.num_classes);
    correct += pred == ds.labels[static_cast<size_t>(q)];
  }
  CHECK(correct == ds.n);
}

TEST_CASE("epoch_batches: permutation, drop_last, determinism") {
  LoaderConfig cfg;
  cfg.batch = 4;
  cfg.seed = 9;
  auto batches = epoch_batches(10, cfg, 0);
  CHECK(batches.size() == 2);  // drop_last on
  cfg.drop_last = false;
  batches = epoch_batches(10, cfg, 0);
  CHECK(batches.size() == 3);
  CHECK(batches.back().size() == 2);
  // union of all batches is exactly 0..9
  std::vector<int64_t> seen;
  for (auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  for (int64_t i = 0; i < 10; ++i) CHECK(seen[static_cast<size_t>(i)] == i);

  CHECK(epoch_batches(10, cfg, 3) == epoch_batches(10, cfg, 3));
  CHECK(epoch_batches(10, cfg, 3) != epoch_batches(10, cfg, 4));
}

TEST_CASE("loader output is independent of worker count") {
  Dataset ds = synth_blobs(3, 8, 3, 8, 8, 0.1f, 11);
  std::vector<augment::AugmentPolicy> policies = {augment::AugmentPolicy::strong_view1(),
                                                  augment::AugmentPolicy::strong_view2()};
  auto run = [&](int workers, int depth) {
    LoaderConfig cfg;
    cfg.batch = 5;
    cfg.workers = workers;
    cfg.depth = depth;
    cfg.seed = 21;
    cfg.drop_last = false;
    std::vector<augment::ViewBatch> out;
    Loader loader(ds, cfg, policies, 2);
    while (auto vb = loader.next()) out.push_back(std::move(*vb));
    return out;
  };
  auto base = run(1, 1);
  for (auto [p, q] : {std::pair{2, 2}, std::pair{4, 8}, std::pair{3, 1}}) {
    auto got = run(p, q);
    REQUIRE(got.size() == base.size());
    for (size_t b = 0; b < base.size(); ++b) {
      CHECK(got[b].indices == base[b].indices);
      CHECK(got[b].labels == base[b].labels);
      for (size_t v = 0; v < base[b].views.size(); ++v)
        CHECK(got[b].views[v].data() == base[b].views[v].data());
    }
  }

  // P=1, Q=1 equals the synchronous reference path
  LoaderConfig cfg;
  cfg.batch = 5;
  cfg.seed = 21;
  cfg.drop_last = false;
  auto schedule = epoch_batches(ds.n, cfg, 2);
  for (size_t b = 0; b < base.size(); ++b) {
    auto ref = Loader::make_batch(ds, cfg, policies, 2, schedule[b],
                                  static_cast<int64_t>(b));
    CHECK(base[b].views[0].data() == ref.views[0].data());
    CHECK(base[b].views[1].data() == ref.views[1].data());
  }
}

TEST_CASE("worker errors surface on the consumer thread") {
  Dataset ds = synth_blobs(2, 4, 3, 8, 8, 0.1f, 1);
  augment::AugmentPolicy broken;
  broken.flip_prob = 2.0f;  // fails validation inside apply_policy
  LoaderConfig cfg;
  cfg.batch = 4;
  cfg.workers = 2;
  Loader loader(ds, cfg, {broken, broken}, 0);
  CHECK_THROWS_AS(
      [&] {
        while (loader.next()) {
        }
      }(),
      nd::TensorError);
}

TEST_CASE("benchmark: pipelined workers beat the naive loop under decode latency") {
  Dataset ds = synth_blobs(2, 24, 3, 8, 8, 0.05f, 3);
  std::vector<augment::AugmentPolicy> policies = {augment::AugmentPolicy::weak(),
                                                  augment::AugmentPolicy::weak()};
  LoaderConfig naive;
  naive.batch = 8;
  naive.decode_latency_ms = 2.0;
  LoaderConfig pipe = naive;
  pipe.workers = 4;
  pipe.depth = 8;
  BenchReport rep = benchmark_loader(ds, naive, pipe, policies, 1);
  CHECK(rep.naive_imgs_per_sec > 0);
  CHECK(rep.pipe_imgs_per_sec > rep.naive_imgs_per_sec);
  CHECK(rep.speedup_pct > 50.0);  // latency-bound regime
  CHECK(rep.buffer_mb ==
        doctest::Approx(8.0 * 8 * 3 * 8 * 8 * 2 * 4 / (1024.0 * 1024.0)));
}
