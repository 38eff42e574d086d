// SPDX-License-Identifier: Apache-2.0
//
// Integration tests driving the kmae binary end to end at a tiny scale.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "kmae/container.hpp"

using namespace kmae;
namespace fs = std::filesystem;

namespace {

#ifndef KMAE_CLI_PATH
#error "KMAE_CLI_PATH must be defined by the build"
#endif

struct Workdir {
  fs::path dir;
  Workdir() {
    dir = fs::temp_directory_path() /
          ("kmae_cli_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~Workdir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
  static inline int counter = 0;
};

int run(const std::string& args) {
  const std::string cmd = std::string(KMAE_CLI_PATH) + " " + args +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_tiny_config(const std::string& path, double lr_peak = 1e-3) {
  nlohmann::json j;
  j["model"] = {{"embed_dim", 16},
                {"heads", 2},
                {"encoder_layers", 1},
                {"decoder_layers", 1},
                {"decoder_dim", 8},
                {"grid", {{"height", 16}, {"width", 16}, {"frames", 4}, {"slices", 1}}}};
  j["phantom"] = {{"grid_size", 16},
                  {"frames", 4},
                  {"slices", 1},
                  {"base_cavity_radius", 3.5},
                  {"wall_area", 40.0}};
  j["train"] = {{"lr_peak", lr_peak}};
  std::ofstream f(path);
  f << j.dump(2);
}

std::string gen_cmd(const Workdir& w, const std::string& out,
                    const std::string& mode, int seed) {
  return "gen --out " + w.path(out) + " --subjects 16 --size 16 --frames 4 "
         "--slices 1 --mode " + mode + " --seed " + std::to_string(seed) +
         " --config " + w.path("cfg.json");
}

}  // namespace

TEST_CASE("gen: determinism and validation") {
  Workdir w;
  write_tiny_config(w.path("cfg.json"));
  CHECK(run(gen_cmd(w, "a.kmae", "classify", 5)) == 0);
  CHECK(run(gen_cmd(w, "b.kmae", "classify", 5)) == 0);
  CHECK(slurp(w.path("a.kmae")) == slurp(w.path("b.kmae")));

  // power-of-two contract
  CHECK(run("gen --out " + w.path("bad.kmae") +
            " --subjects 16 --size 33 --mode classify") == 2);
  CHECK(!fs::exists(w.path("bad.kmae")));

  auto c = read_container(w.path("a.kmae"));
  CHECK(c.meta.at("kind") == "dataset");
  CHECK(c.meta.at("subjects") == 16);
  CHECK(!c.meta.at("config_hash").get<std::string>().empty());
}

TEST_CASE("masks: container/PGM agreement and the R=1 and R=4 patterns") {
  Workdir w;

  SUBCASE("R=1 gives an all-white PGM") {
    CHECK(run("masks --H 32 --T 4 --R 1 --seed 2 --out " + w.path("m1.kmae")) == 0);
    auto pgm = slurp(w.path("m1.pgm"));
    const std::string header = "P5\n32 4\n255\n";
    REQUIRE(pgm.size() == header.size() + 32 * 4);
    CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())) ==
          header);
    for (size_t i = header.size(); i < pgm.size(); ++i) CHECK(pgm[i] == 255);
  }

  SUBCASE("R=4 at H=32: 8 white cells per row, bytewise equal to the mask") {
    CHECK(run("masks --H 32 --T 8 --R 4 --seed 3 --out " + w.path("m4.kmae")) == 0);
    auto c = read_container(w.path("m4.kmae"));
    auto lines = c.u8("lines");
    auto pgm = slurp(w.path("m4.pgm"));
    const std::string header = "P5\n32 8\n255\n";
    REQUIRE(pgm.size() == header.size() + lines.size());
    for (size_t i = 0; i < lines.size(); ++i)
      CHECK(pgm[header.size() + i] == (lines[i] ? 255 : 0));
    for (int t = 0; t < 8; ++t) {
      int white = 0;
      for (int k = 0; k < 32; ++k) white += lines[static_cast<size_t>(t) * 32 + k] != 0;
      CHECK(white == 8);
    }
    CHECK(c.meta.at("acs_count") == 4);
  }

  SUBCASE("deterministic containers") {
    CHECK(run("masks --H 16 --T 4 --R 2 --seed 9 --out " + w.path("x.kmae")) == 0);
    CHECK(run("masks --H 16 --T 4 --R 2 --seed 9 --out " + w.path("y.kmae")) == 0);
    CHECK(slurp(w.path("x.kmae")) == slurp(w.path("y.kmae")));
  }
}

TEST_CASE("pretrain / finetune / eval round trip") {
  Workdir w;
  write_tiny_config(w.path("cfg.json"));
  REQUIRE(run(gen_cmd(w, "data.kmae", "classify", 7)) == 0);
  REQUIRE(run("pretrain --data " + w.path("data.kmae") + " --config " +
              w.path("cfg.json") + " --out-ckpt " + w.path("pre.kmae") +
              " --epochs 2 --seed 1") == 0);
  CHECK(fs::exists(w.path("pre.kmae")));
  CHECK(fs::exists(w.path("pre.kmae.report.json")));
  CHECK(fs::exists(w.path("pre.kmae.loss.csv")));

  SUBCASE("checkpoint meta carries hashes and the grid") {
    auto c = read_container(w.path("pre.kmae"));
    CHECK(c.meta.at("arch") == "kmae");
    CHECK(c.meta.at("task") == "pretrain");
    CHECK(!c.meta.at("config_hash").get<std::string>().empty());
    CHECK(!c.meta.at("data_config_hash").get<std::string>().empty());
    auto data = read_container(w.path("data.kmae"));
    CHECK(c.meta.at("data_config_hash") == data.meta.at("config_hash"));
  }

  SUBCASE("frozen fine-tune keeps encoder arrays bit-identical") {
    REQUIRE(run("finetune --ckpt " + w.path("pre.kmae") + " --data " +
                w.path("data.kmae") + " --task classify --R 4 "
                "--freeze-encoder --out-ckpt " + w.path("cls.kmae") +
                " --epochs 2 --seed 2 --config " + w.path("cfg.json")) == 0);
    auto before = read_container(w.path("pre.kmae"));
    auto after = read_container(w.path("cls.kmae"));
    bool some_param_changed = false;
    for (const auto& a : before.arrays()) {
      if (a.name.rfind("p.", 0) != 0) continue;
      const auto& b = after.get(a.name);
      const bool encoder = a.name.rfind("p.tok.", 0) == 0 ||
                           a.name.rfind("p.enc.", 0) == 0;
      if (encoder)
        CHECK(a.bytes == b.bytes);
      else if (a.bytes != b.bytes)
        some_param_changed = true;
    }
    CHECK(some_param_changed);
    CHECK(after.meta.at("freeze_encoder") == true);

    SUBCASE("eval report: one block per R, deterministic modulo wall time") {
      REQUIRE(run("eval --ckpt " + w.path("cls.kmae") + " --data " +
                  w.path("data.kmae") + " --split test --R 1,4,8 --report " +
                  w.path("r1.json") + " --seed 5") == 0);
      REQUIRE(run("eval --ckpt " + w.path("cls.kmae") + " --data " +
                  w.path("data.kmae") + " --split test --R 1,4,8 --report " +
                  w.path("r2.json") + " --seed 5 --predictions " +
                  w.path("r2.pred")) == 0);
      auto j1 = nlohmann::json::parse(std::ifstream(w.path("r1.json")));
      auto j2 = nlohmann::json::parse(std::ifstream(w.path("r2.json")));
      for (auto* j : {&j1, &j2}) {
        (*j)["meta"].erase("wall_time_s");
        (*j)["meta"].erase("predictions");
      }
      CHECK(j1 == j2);
      CHECK(j1.at("per_r").size() == 3);
      for (const auto& r : {"1", "4", "8"})
        CHECK(j1.at("per_r").contains(r));
      CHECK(j1.at("meta").contains("deltas_vs_r1"));
      CHECK(fs::exists(w.path("r1.json.pred.kmae")));
      CHECK(fs::exists(w.path("r2.pred")));
    }
  }

  SUBCASE("--R 8 is accepted and recorded") {
    REQUIRE(run("finetune --ckpt " + w.path("pre.kmae") + " --data " +
                w.path("data.kmae") + " --task regress_ef --R 8 --out-ckpt " +
                w.path("reg8.kmae") + " --epochs 1 --seed 3") == 0);
    auto c = read_container(w.path("reg8.kmae"));
    CHECK(c.meta.at("input_r") == 8.0);
  }

  SUBCASE("cnn arch trains without a checkpoint") {
    REQUIRE(run("finetune --data " + w.path("data.kmae") +
                " --task classify --R 4 --arch cnn --out-ckpt " +
                w.path("cnn.kmae") + " --epochs 1 --seed 4") == 0);
    auto c = read_container(w.path("cnn.kmae"));
    CHECK(c.meta.at("arch") == "cnn");
    CHECK(run("eval --ckpt " + w.path("cnn.kmae") + " --data " +
              w.path("data.kmae") + " --split test --R 4 --report " +
              w.path("cnn.json")) == 0);
  }
}

TEST_CASE("error paths and exit codes") {
  Workdir w;
  write_tiny_config(w.path("cfg.json"));
  REQUIRE(run(gen_cmd(w, "cls.kmae", "classify", 11)) == 0);
  REQUIRE(run(gen_cmd(w, "reg.kmae", "regress", 12)) == 0);
  REQUIRE(run("pretrain --data " + w.path("cls.kmae") + " --config " +
              w.path("cfg.json") + " --out-ckpt " + w.path("pre.kmae") +
              " --epochs 1 --seed 1") == 0);

  SUBCASE("segmentation on a regression cohort is rejected") {
    CHECK(run("finetune --ckpt " + w.path("pre.kmae") + " --data " +
              w.path("reg.kmae") + " --task segment --R 4 --out-ckpt " +
              w.path("seg.kmae") + " --epochs 1") == 2);
    CHECK(!fs::exists(w.path("seg.kmae")));
  }

  SUBCASE("missing output directory: nonzero exit, no partial checkpoint") {
    CHECK(run("pretrain --data " + w.path("cls.kmae") + " --config " +
              w.path("cfg.json") + " --out-ckpt " +
              w.path("no_dir/out.kmae") + " --epochs 1") == 2);
    CHECK(!fs::exists(w.path("no_dir")));
  }

  SUBCASE("grid mismatch between config and dataset") {
    // default config grid is 32x32x8x3; dataset is 16x16x4x1
    CHECK(run("pretrain --data " + w.path("cls.kmae") + " --out-ckpt " +
              w.path("out.kmae") + " --epochs 1") == 2);
  }

  SUBCASE("usage errors exit with 1") {
    CHECK(run("masks --no-such-flag 1") == 1);
    CHECK(run("") == 1);
  }

  SUBCASE("unknown config keys are rejected") {
    std::ofstream f(w.path("bad.json"));
    f << R"({"trian": {"lr_peak": 1.0}})";
    f.close();
    CHECK(run("pretrain --data " + w.path("cls.kmae") + " --config " +
              w.path("bad.json") + " --out-ckpt " + w.path("o.kmae")) == 2);
  }
}
