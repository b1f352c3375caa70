#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sslkit/config.hpp"

using namespace sslkit;
using namespace sslkit::config;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct RunResult {
  int code = -1;
  std::string out, err;
};

// run the installed CLI binary, capturing exit code and both streams
RunResult run_cli(const std::string& argstr, const char* tag) {
  const std::string dir = std::string("/tmp/sslkit_cli_io_") + tag;
  std::filesystem::create_directories(dir);
  const std::string cmd = std::string(SSLKIT_CLI_PATH) + " " + argstr + " >" +
                          dir + "/out 2>" + dir + "/err";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(dir + "/out");
  r.err = slurp(dir + "/err");
  return r;
}

std::string fresh_dir(const char* name) {
  const std::string dir = std::string("/tmp/sslkit_cli_") + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// tiny but trainable: 3 classes x 8 images, 16x16
const char* kTinyData =
    "--dataset synth --set synth_classes=3 --set synth_per_class=8 "
    "--set synth_size=16 --batch-size 8 --workers 2 --buffer 2 --seed 3";

}  // namespace

TEST_CASE("parse_kv: comments, blanks, whitespace, malformed lines") {
  auto kv = parse_kv("# header\n\n  lr = 0.3  # trailing\nmethod=byol\n");
  CHECK(kv.size() == 2);
  CHECK(kv["lr"] == "0.3");
  CHECK(kv["method"] == "byol");
  CHECK_THROWS_WITH_AS(parse_kv("novalue\n"), doctest::Contains("key=value"),
                       ConfigError);
  CHECK_THROWS_AS(parse_kv("=0.3\n"), ConfigError);
}

TEST_CASE("from_kv fills method defaults") {
  auto byol = from_kv({{"method", "byol"}});
  CHECK(byol.method.uses_target());
  CHECK(byol.method.uses_predictor());
  CHECK(byol.method.momentum_base == doctest::Approx(0.99));
  CHECK(byol.method.momentum_scheduled);

  auto simclr = from_kv({{"method", "simclr"}});
  CHECK(simclr.method.tau == doctest::Approx(0.2));
  CHECK(!simclr.method.uses_queue());

  // override a default
  auto hot = from_kv({{"method", "simclr"}, {"tau", "0.07"}});
  CHECK(hot.method.tau == doctest::Approx(0.07));
}

TEST_CASE("from_kv: unknown method error lists all 13 names") {
  try {
    from_kv({{"method", "foo"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& n : methods::method_names())
      CHECK(msg.find(n) != std::string::npos);
  }
}

TEST_CASE("from_kv: invalid values name the key and constraint") {
  CHECK_THROWS_WITH_AS(from_kv({{"epochs", "-1"}}), doctest::Contains("epochs"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(from_kv({{"batch_size", "0"}}),
                       doctest::Contains("batch_size"), ConfigError);
  CHECK_THROWS_WITH_AS(from_kv({{"lr", "banana"}}), doctest::Contains("lr"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(from_kv({{"dataset", "imagenet"}}),
                       doctest::Contains("dataset"), ConfigError);
  CHECK_THROWS_WITH_AS(from_kv({{"dataset", "cifar"}}),
                       doctest::Contains("data_path"), ConfigError);
  CHECK_THROWS_AS(from_kv({{"no_such_key", "1"}}), ConfigError);
  // structural method constraint surfaces as a config error
  CHECK_THROWS_AS(from_kv({{"method", "simclr"}, {"queue_size", "128"}}),
                  ConfigError);
}

TEST_CASE("config round-trip: parse(serialize(cfg)) == cfg") {
  for (const auto& name : methods::method_names()) {
    CAPTURE(name);
    std::map<std::string, std::string> kv = {
        {"method", name}, {"lr", "0.05"},   {"epochs", "7"},
        {"seed", "42"},   {"out", "/tmp/x"}};
    auto cfg = from_kv(kv);
    auto back = from_kv(parse_kv(serialize(cfg)));
    CHECK(back == cfg);
    CHECK(serialize(back) == serialize(cfg));
  }
  // non-default numeric values survive exactly
  auto cfg = from_kv({{"method", "vicreg"},
                      {"vicreg_sim", "12.5"},
                      {"lr", "0.037"},
                      {"projector", "256,64"}});
  auto back = from_kv(parse_kv(serialize(cfg)));
  CHECK(back.method.vicreg_sim == cfg.method.vicreg_sim);
  CHECK(back.lr == cfg.lr);
  CHECK(back.method.projector == cfg.method.projector);
}

TEST_CASE("cli: unknown method exits 2 and lists the valid names") {
  auto r = run_cli("pretrain --method foo --out /tmp/never", "badmethod");
  CHECK(r.code == 2);
  CHECK(r.err.find("byol") != std::string::npos);
  CHECK(r.err.find("wmse") != std::string::npos);
}

TEST_CASE("cli: missing checkpoint is a config error, bad file a runtime one") {
  CHECK(run_cli("linear", "nockpt").code == 2);
  auto r = run_cli("knn --checkpoint /tmp/does_not_exist.slck", "badckpt");
  CHECK(r.code == 3);
}

TEST_CASE("cli pretrain: run dir is self-describing; flags beat the file") {
  const auto dir = fresh_dir("pretrain");
  std::ofstream(dir + "/base.cfg") << "lr=0.9\nepochs=5\n# comment\n";
  auto r = run_cli("pretrain --method simclr " + std::string(kTinyData) +
                       " --config " + dir + "/base.cfg --epochs 1 --out " + dir +
                       "/run",
                   "pretrain");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(dir + "/run/config.txt"));
  CHECK(std::filesystem::exists(dir + "/run/metrics.csv"));
  CHECK(std::filesystem::exists(dir + "/run/ckpt-1.slck"));
  const std::string cfg = slurp(dir + "/run/config.txt");
  CHECK(cfg.find("lr=0.9\n") != std::string::npos);   // file value kept
  CHECK(cfg.find("epochs=1\n") != std::string::npos);  // flag overrode file
  CHECK(r.out.find("epoch 0") != std::string::npos);

  // the stored config is canonical: re-parsing it round-trips
  auto rc = from_kv(parse_kv(cfg));
  CHECK(serialize(rc) == cfg);

  SUBCASE("linear / knn on the checkpoint print accuracies") {
    auto lin = run_cli("linear --checkpoint " + dir + "/run/ckpt-1.slck",
                       "linear");
    CAPTURE(lin.err);
    REQUIRE(lin.code == 0);
    CHECK(lin.out.find("top1") != std::string::npos);
    CHECK(lin.out.find("top5") != std::string::npos);

    auto knn = run_cli("knn --checkpoint " + dir + "/run/ckpt-1.slck", "knn");
    REQUIRE(knn.code == 0);
    CHECK(knn.out.find("top1") != std::string::npos);
  }

  SUBCASE("export and project2d write the documented CSV headers") {
    auto exp = run_cli("export --checkpoint " + dir + "/run/ckpt-1.slck" +
                           " --out " + dir + "/run/",
                       "export");
    CAPTURE(exp.err);
    REQUIRE(exp.code == 0);
    std::ifstream e(dir + "/run/embeddings.csv");
    std::string header;
    std::getline(e, header);
    CHECK(header == "256,24");

    auto prj = run_cli("project2d --checkpoint " + dir + "/run/ckpt-1.slck" +
                           " --out " + dir + "/run/",
                       "project2d");
    REQUIRE(prj.code == 0);
    std::ifstream p(dir + "/run/projection2d.csv");
    std::getline(p, header);
    CHECK(header == "2,24");
    // 24 rows of "id,label,x,y"
    int rows = 0;
    std::string line;
    while (std::getline(p, line)) ++rows;
    CHECK(rows == 24);
  }
}

TEST_CASE("cli benchmark-loader prints a speedup row") {
  auto r = run_cli("benchmark-loader " + std::string(kTinyData) +
                       " --workers 4 --latency-ms 1",
                   "bench");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("speedup") != std::string::npos);
  CHECK(r.out.find("buffer_mb") != std::string::npos);
}
