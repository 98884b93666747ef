#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "odgen/io.hpp"

// Spawns the installed binary and asserts on exit codes and artifacts.

using namespace odgen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch() {
  static fs::path dir = [] {
    fs::path d = fs::current_path() / "cli_scratch";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(ODGEN_CLI) + " " + args + " > " +
                          (scratch() / "out.log").string() + " 2> " +
                          (scratch() / "err.log").string();
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

std::string last_out() { return read_text_file(scratch() / "out.log"); }
std::string last_err() { return read_text_file(scratch() / "err.log"); }

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

json load_json(const fs::path& p) { return json::parse(read_text_file(p)); }

bool same_bytes(const fs::path& a, const fs::path& b) {
  return read_text_file(a) == read_text_file(b);
}

// One shared corpus and config for every subcommand test.
struct Fixture {
  fs::path corpus = scratch() / "corpus";
  fs::path config = scratch() / "tiny.json";

  Fixture() {
    if (fs::exists(corpus)) return;
    std::ofstream cfg(config);
    cfg << R"({
      "model": {"n_kernels": 2, "kernel_dim": 4, "enc_c1": 4, "enc_c2": 6,
                "enc_c3": 8, "latent_channels": 2, "proj_dim": 8,
                "d_e": 4, "d_c": 6, "n_max": 8, "pinet_base": 6,
                "t_embed_dim": 8, "T": 40},
      "train_vae": {"batch_size": 3, "lr": 0.003},
      "train_diff": {"batch_size": 3, "lr": 0.003}
    })";
    cfg.close();
    REQUIRE(run("gen-corpus --out " + quoted(corpus) +
                " --cities 6 --n-min 4 --n-max 6 --feat-dim 5 --seed 3") == 0);
  }

  std::string first_city() const {
    return load_json(corpus / "corpus.json")["cities"][0]["city_id"];
  }
};

}  // namespace

// ===== gen-corpus ===========================================================

TEST_CASE("gen-corpus is deterministic and guards its target") {
  Fixture fx;
  const fs::path again = scratch() / "corpus_again";
  fs::remove_all(again);  // subcases re-enter this section
  REQUIRE(run("gen-corpus --out " + quoted(again) +
              " --cities 6 --n-min 4 --n-max 6 --feat-dim 5 --seed 3") == 0);
  CHECK(same_bytes(fx.corpus / "corpus.json", again / "corpus.json"));
  const std::string c0 = fx.first_city();
  CHECK(same_bytes(fx.corpus / c0 / "od.csv", again / c0 / "od.csv"));
  CHECK(same_bytes(fx.corpus / c0 / "features.csv", again / c0 / "features.csv"));

  SUBCASE("existing directories need --force") {
    CHECK(run("gen-corpus --out " + quoted(again) + " --cities 6 --seed 3") == 7);
    CHECK(last_err().find("error[io]") != std::string::npos);
    CHECK(run("gen-corpus --out " + quoted(again) +
              " --cities 6 --n-min 4 --n-max 6 --feat-dim 5 --seed 3 --force") == 0);
  }

  SUBCASE("import re-emits an external layout") {
    const fs::path bare = scratch() / "bare";
    fs::create_directories(bare);
    for (const auto& e : fs::directory_iterator(fx.corpus))
      if (e.is_directory())
        fs::copy(e.path(), bare / e.path().filename(), fs::copy_options::recursive);
    const fs::path adopted = scratch() / "adopted";
    REQUIRE(run("gen-corpus --import " + quoted(bare) + " --out " + quoted(adopted)) == 0);
    CHECK(fs::exists(adopted / "corpus.json"));
    CHECK(same_bytes(fx.corpus / c0 / "od.csv", adopted / c0 / "od.csv"));
  }
}

// ===== training and resume ==================================================

TEST_CASE("train-vae resumes exactly where it stopped") {
  Fixture fx;
  const fs::path straight = scratch() / "straight.ckpt";
  const fs::path half = scratch() / "half.ckpt";

  const std::string common = " --corpus " + quoted(fx.corpus) + " --config " +
                             quoted(fx.config) + " --patience 50";
  REQUIRE(run("train-vae" + common + " --epochs 4 --out " + quoted(straight)) == 0);
  CHECK(last_out().find("4 epochs") != std::string::npos);
  REQUIRE(run("train-vae" + common + " --epochs 2 --out " + quoted(half)) == 0);

  SUBCASE("continuation matches a straight-through run byte for byte") {
    const fs::path resumed = scratch() / "resumed.ckpt";
    REQUIRE(run("train-vae --corpus " + quoted(fx.corpus) + " --resume " +
                quoted(half) + " --epochs 4 --out " + quoted(resumed)) == 0);
    CHECK(same_bytes(straight, resumed));

    const json side = load_json(resumed.string() + ".json");
    CHECK(side["stage"] == 2);
    CHECK(side["epoch"] == 4);
    CHECK(side["loss_history"].size() == 4);
  }

  SUBCASE("loss log has one row per epoch") {
    const std::string log = read_text_file(straight.string() + ".loss.csv");
    CHECK(log.rfind("epoch,total,recon,contrastive,kl,val_recon\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 5);
  }

  SUBCASE("resume refuses a different configuration") {
    CHECK(run("train-vae --corpus " + quoted(fx.corpus) + " --resume " +
              quoted(half) + " --epochs 4 --lr 0.001 --out " +
              quoted(scratch() / "no.ckpt")) == 3);
    CHECK(last_err().find("resume refused") != std::string::npos);
  }

  SUBCASE("a vae checkpoint cannot seed sampling") {
    CHECK(run("sample --model " + quoted(straight) + " --corpus " +
              quoted(fx.corpus) + " --city " + fx.first_city() + " --out " +
              quoted(scratch() / "no.csv")) == 5);
  }
}

// ===== sampling and evaluation ==============================================

TEST_CASE("sample, eval and perm-test close the loop") {
  Fixture fx;
  const fs::path vae = scratch() / "pipe_s2.ckpt";
  const fs::path diff = scratch() / "pipe_s3.ckpt";
  const std::string common = " --corpus " + quoted(fx.corpus) + " --config " +
                             quoted(fx.config) + " --patience 50";
  REQUIRE(run("train-vae" + common + " --epochs 2 --out " + quoted(vae)) == 0);
  REQUIRE(run("train-diff" + common + " --epochs 1 --vae " + quoted(vae) +
              " --out " + quoted(diff)) == 0);

  const std::string c0 = fx.first_city();
  const fs::path od1 = scratch() / "gen1.csv";
  const std::string sample_args = "sample --model " + quoted(diff) + " --corpus " +
                                  quoted(fx.corpus) + " --city " + c0 +
                                  " --tau-steps 5 --seed 11 --out ";
  REQUIRE(run(sample_args + quoted(od1)) == 0);

  SUBCASE("same flags reproduce the file, new seeds change it") {
    const fs::path od2 = scratch() / "gen2.csv";
    REQUIRE(run(sample_args + quoted(od2)) == 0);
    CHECK(same_bytes(od1, od2));
    REQUIRE(run("sample --model " + quoted(diff) + " --corpus " + quoted(fx.corpus) +
                " --city " + c0 + " --tau-steps 5 --seed 12 --out " + quoted(od2)) == 0);
    CHECK(!same_bytes(od1, od2));
  }

  SUBCASE("sampled matrices are valid and sized to the city") {
    const Eigen::MatrixXd m = read_matrix_csv(od1);
    const Corpus corpus = read_corpus(fx.corpus);
    CHECK(m.rows() == corpus.by_id(c0).n());
    CHECK(m.rows() == m.cols());
    CHECK(m.minCoeff() >= 0.0);
    CHECK(m.allFinite());

    const json side = load_json(od1.string() + ".json");
    CHECK(side["city_id"] == c0);
    CHECK(side["perm_intensity"] == 0.0);
    const auto& pi = side["permutation"];
    REQUIRE(static_cast<int>(pi.size()) == m.rows());
    for (int i = 0; i < m.rows(); ++i) CHECK(pi[i] == i);  // intensity 0 is identity
  }

  SUBCASE("eval reports perfect scores against itself") {
    const fs::path truth = fx.corpus / c0 / "od.csv";
    const fs::path report = scratch() / "report.json";
    REQUIRE(run("eval --pred " + quoted(truth) + " --truth " + quoted(truth) +
                " --report " + quoted(report)) == 0);
    const json rep = load_json(report);
    CHECK(rep["cpc"] == 1.0);
    CHECK(rep["rmse"] == 0.0);
    CHECK(rep["jsd_odflow"] == 0.0);
    CHECK(last_out().find("cpc") != std::string::npos);
  }

  SUBCASE("eval names both files on a shape mismatch") {
    const fs::path small = scratch() / "small.csv";
    write_matrix_csv(small, Eigen::MatrixXd::Zero(2, 2));
    CHECK(run("eval --pred " + quoted(small) + " --truth " +
              quoted(fx.corpus / c0 / "od.csv")) == 2);
    CHECK(last_err().find("small.csv") != std::string::npos);
    CHECK(last_err().find("od.csv") != std::string::npos);
  }

  SUBCASE("perm-test sweeps intensities and stays flat for gravity") {
    const fs::path table = scratch() / "table.json";
    REQUIRE(run("perm-test --corpus " + quoted(fx.corpus) +
                " --generator gravity-exp --split train"
                " --intensities 0.1,0.3,0.5,0.8,1.0 --seeds 2 --out " +
                quoted(table)) == 0);
    const json tab = load_json(table);
    REQUIRE(tab["rows"].size() == 5);
    CHECK(tab["rows"][0]["intensity"] == 0.1);
    const double first = tab["rows"][0]["mean_jsd_odflow"];
    for (const auto& row : tab["rows"])
      CHECK(std::abs(double(row["mean_jsd_odflow"]) - first) <= 1e-12);
    CHECK(std::abs(double(tab["drift"])) <= 1e-12);
    CHECK(last_out().find("drift") != std::string::npos);

    CHECK(run("perm-test --corpus " + quoted(fx.corpus) +
              " --generator diffusion --out " + quoted(table)) == 3);
  }
}
