// Python bindings for the main operations: synthetic data, method losses,
// pretraining, and the offline evaluation suite.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sslkit/config.hpp"
#include "sslkit/eval.hpp"
#include "sslkit/trainer.hpp"

namespace py = pybind11;
using namespace sslkit;
using FT = nd::Tensor<float>;

namespace {

FT tensor2d(const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
            const char* name) {
  if (a.ndim() != 2)
    throw std::invalid_argument(std::string(name) + " must be a 2d float array");
  std::vector<float> v(a.data(), a.data() + a.size());
  return FT::from({a.shape(0), a.shape(1)}, std::move(v));
}

py::array_t<float> to_numpy(const FT& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::map<std::string, std::string> to_kv(const py::dict& d) {
  std::map<std::string, std::string> kv;
  for (auto item : d)
    kv[py::str(item.first)] = py::str(item.second);
  return kv;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "self-supervised visual representation learning toolkit";

  m.def("method_names", [] { return methods::method_names(); },
        "names of the 13 supported methods");

  m.def(
      "synth_blobs",
      [](int classes, int per_class, int64_t size, float sigma, uint64_t seed) {
        auto ds = data::synth_blobs(classes, per_class, 3, size, size, sigma, seed);
        py::array_t<float> px({ds.n, ds.c, ds.h, ds.w});
        std::copy(ds.pixels.begin(), ds.pixels.end(), px.mutable_data());
        py::array_t<int> labels(static_cast<py::ssize_t>(ds.n));
        std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
        return py::make_tuple(px, labels);
      },
      py::arg("classes"), py::arg("per_class"), py::arg("size") = 32,
      py::arg("sigma") = 0.1f, py::arg("seed") = 0,
      "deterministic gaussian-blob image dataset -> (pixels, labels)");

  // --- losses on raw embeddings ------------------------------------------
  m.def(
      "nt_xent",
      [](const py::array_t<float>& z1, const py::array_t<float>& z2, float tau) {
        return losses::nt_xent(tensor2d(z1, "z1"), tensor2d(z2, "z2"), tau).item();
      },
      py::arg("z1"), py::arg("z2"), py::arg("tau") = 0.2f);
  m.def(
      "barlow",
      [](const py::array_t<float>& z1, const py::array_t<float>& z2, float lam) {
        return losses::barlow_loss(tensor2d(z1, "z1"), tensor2d(z2, "z2"), lam).item();
      },
      py::arg("z1"), py::arg("z2"), py::arg("lambda_") = 5e-3f);
  m.def(
      "vicreg",
      [](const py::array_t<float>& z1, const py::array_t<float>& z2) {
        return losses::vicreg_loss(tensor2d(z1, "z1"), tensor2d(z2, "z2")).item();
      },
      py::arg("z1"), py::arg("z2"));
  m.def(
      "byol",
      [](const py::array_t<float>& p1, const py::array_t<float>& p2,
         const py::array_t<float>& t1, const py::array_t<float>& t2) {
        return losses::byol_loss(tensor2d(p1, "p1"), tensor2d(p2, "p2"),
                                 tensor2d(t1, "t1"), tensor2d(t2, "t2"))
            .item();
      },
      py::arg("p1"), py::arg("p2"), py::arg("t1"), py::arg("t2"));

  // --- config -------------------------------------------------------------
  m.def(
      "canonical_config",
      [](const py::dict& d) { return config::serialize(config::from_kv(to_kv(d))); },
      py::arg("overrides"),
      "validated canonical key=value form of a run config");

  // --- training -----------------------------------------------------------
  m.def(
      "pretrain",
      [](const py::dict& overrides) {
        auto cfg = config::from_kv(to_kv(overrides));
        auto ds = data::synth_blobs(static_cast<int>(cfg.synth_classes),
                                    static_cast<int>(cfg.synth_per_class), 3,
                                    cfg.synth_size, cfg.synth_size,
                                    static_cast<float>(cfg.synth_sigma), cfg.seed);
        if (cfg.method.name == "deepclusterv2") cfg.method.dataset_size = ds.n;
        Rng rng(cfg.seed);
        auto st = trainer::make_trainer(cfg.method, ds.num_classes, rng);
        auto rows = trainer::fit(st, ds, cfg.train_config(),
                                 config::serialize(cfg));
        py::list out;
        for (const auto& r : rows) {
          py::dict row;
          row["epoch"] = r.epoch;
          row["loss"] = r.loss;
          row["top1"] = r.top1;
          row["top5"] = r.top5;
          out.append(row);
        }
        return out;
      },
      py::arg("overrides"),
      "pretrain on synthetic blobs; returns per-epoch metrics dicts");

  // --- evaluation ---------------------------------------------------------
  m.def(
      "linear_eval",
      [](const py::array_t<float>& ftr, const std::vector<int>& ytr,
         const py::array_t<float>& fte, const std::vector<int>& yte,
         int num_classes, int epochs) {
        auto r = eval::linear_eval_offline(tensor2d(ftr, "train_features"), ytr,
                                           tensor2d(fte, "test_features"), yte,
                                           num_classes, epochs);
        return py::make_tuple(r.top1, r.top5);
      },
      py::arg("train_features"), py::arg("train_labels"),
      py::arg("test_features"), py::arg("test_labels"), py::arg("num_classes"),
      py::arg("epochs") = 30);
  m.def(
      "knn_eval",
      [](const py::array_t<float>& ftr, const std::vector<int>& ytr,
         const py::array_t<float>& fte, const std::vector<int>& yte,
         int num_classes, int k) {
        return eval::knn_eval(tensor2d(ftr, "train_features"), ytr,
                              tensor2d(fte, "test_features"), yte, num_classes, k);
      },
      py::arg("train_features"), py::arg("train_labels"),
      py::arg("test_features"), py::arg("test_labels"), py::arg("num_classes"),
      py::arg("k") = 20);
  m.def(
      "pca2d",
      [](const py::array_t<float>& f) {
        return to_numpy(eval::pca2d(tensor2d(f, "features")));
      },
      py::arg("features"));
}
