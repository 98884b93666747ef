#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "odgen/io.hpp"

using namespace odgen;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static fs::path dir = [] {
    fs::path d = fs::current_path() / "io_scratch";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

ModelConfig tiny_mc() {
  ModelConfig mc;
  mc.feat_dim = 5;
  mc.n_kernels = 2;
  mc.kernel_dim = 4;
  mc.enc_c1 = 4;
  mc.enc_c2 = 6;
  mc.enc_c3 = 8;
  mc.latent_channels = 2;
  mc.proj_dim = 8;
  mc.d_e = 4;
  mc.d_c = 6;
  mc.n_max = 8;
  mc.pinet_base = 6;
  mc.t_embed_dim = 8;
  mc.T = 40;
  return mc;
}

Corpus tiny_corpus() {
  CorpusConfig cc;
  cc.n_cities = 6;
  cc.n_min = 4;
  cc.n_max = 6;
  cc.feat_dim = 5;
  cc.seed = 3;
  return generate_corpus(cc);
}

ExperimentConfig tiny_ec() {
  ExperimentConfig ec;
  ec.corpus.n_cities = 6;
  ec.corpus.n_min = 4;
  ec.corpus.n_max = 6;
  ec.corpus.feat_dim = 5;
  ec.corpus.seed = 3;
  ec.model = tiny_mc();
  ec.train_vae.max_epochs = 2;
  ec.train_vae.batch_size = 3;
  ec.train_diff.max_epochs = 1;
  ec.train_diff.batch_size = 3;
  return ec;
}

std::vector<double> param_bytes(const nn::ParamStore& ps) {
  std::vector<double> out;
  for (size_t i = 0; i < ps.size(); ++i) {
    const nn::Tensor& v = ps[i].value;
    out.insert(out.end(), v.data(), v.data() + v.size());
  }
  return out;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
  return read_text_file(a) == read_text_file(b);
}

}  // namespace

// ===== matrices =============================================================

TEST_CASE("matrix csv round trips exactly") {
  RandomStream rs(9);
  Eigen::MatrixXd m(5, 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = rs.normal() * std::pow(10.0, i - 2);
  m(0, 0) = 0.0;
  m(1, 1) = 1.0 / 3.0;
  m(2, 2) = -7.25e16;

  const fs::path p = scratch() / "m.csv";
  write_matrix_csv(p, m);
  const Eigen::MatrixXd back = read_matrix_csv(p);
  REQUIRE(back.rows() == 5);
  REQUIRE(back.cols() == 3);
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("malformed files raise io errors") {
    auto write_raw = [&](const char* text) {
      std::ofstream out(scratch() / "bad.csv", std::ios::trunc);
      out << text;
    };
    write_raw("1,2\n3\n");
    CHECK_THROWS_AS(read_matrix_csv(scratch() / "bad.csv"), OdError);
    write_raw("1,zzz\n");
    CHECK_THROWS_AS(read_matrix_csv(scratch() / "bad.csv"), OdError);
    write_raw("");
    CHECK_THROWS_AS(read_matrix_csv(scratch() / "bad.csv"), OdError);
    try {
      read_matrix_csv(scratch() / "absent.csv");
      CHECK(false);
    } catch (const OdError& e) {
      CHECK(e.kind() == ErrorKind::Io);
      CHECK(std::string(e.what()).find("absent.csv") != std::string::npos);
    }
  }
}

// ===== experiment config ====================================================

TEST_CASE("experiment config json round trips and hashes run identity") {
  ExperimentConfig ec = tiny_ec();
  ec.seed = 42;
  ec.train_vae.lr = 0.004;

  const ExperimentConfig back = experiment_from_json(experiment_to_json(ec));
  CHECK(back.seed == 42);
  CHECK(back.corpus.n_cities == ec.corpus.n_cities);
  CHECK(back.model.kernel_dim == ec.model.kernel_dim);
  CHECK(back.model.perm_aug_intensity == ec.model.perm_aug_intensity);
  CHECK(back.train_vae.lr == 0.004);
  CHECK(back.train_diff.max_epochs == ec.train_diff.max_epochs);
  CHECK(config_hash(back) == config_hash(ec));

  SUBCASE("hash ignores run length but nothing else") {
    ExperimentConfig longer = ec;
    longer.train_vae.max_epochs = 500;
    longer.train_diff.max_epochs = 99;
    CHECK(config_hash(longer) == config_hash(ec));
    ExperimentConfig tweaked = ec;
    tweaked.train_vae.lr = 0.005;
    CHECK(config_hash(tweaked) != config_hash(ec));
    ExperimentConfig reseeded = ec;
    reseeded.seed = 43;
    CHECK(config_hash(reseeded) != config_hash(ec));
  }

  SUBCASE("partial json keeps defaults elsewhere") {
    const ExperimentConfig part =
        experiment_from_json(R"({"model": {"n_kernels": 3}})");
    CHECK(part.model.n_kernels == 3);
    CHECK(part.model.kernel_dim == ModelConfig{}.kernel_dim);
    CHECK_THROWS_AS(experiment_from_json("not json"), OdError);
  }

  SUBCASE("cross-field validation") {
    ExperimentConfig bad = tiny_ec();
    bad.model.feat_dim = bad.corpus.feat_dim + 1;
    CHECK_THROWS_AS(bad.validate(), OdError);
    bad = tiny_ec();
    bad.model.n_max = bad.corpus.n_max - 1;
    CHECK_THROWS_AS(bad.validate(), OdError);
  }
}

// ===== corpus directories ===================================================

TEST_CASE("corpus directories round trip") {
  const Corpus corpus = tiny_corpus();
  const fs::path dir = scratch() / "corpus";
  fs::remove_all(dir);  // subcases re-enter this section
  write_corpus(dir, corpus);

  const Corpus back = read_corpus(dir);
  REQUIRE(back.cities.size() == corpus.cities.size());
  CHECK(back.config.feat_dim == corpus.config.feat_dim);
  for (size_t k = 0; k < corpus.cities.size(); ++k) {
    const CityBundle& a = corpus.cities[k];
    const CityBundle& b = back.cities[k];
    CHECK(a.city_id == b.city_id);
    CHECK(back.splits[k] == corpus.splits[k]);
    CHECK((a.features.vectors - b.features.vectors).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.regions.centroids - b.regions.centroids).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.od.values - b.od.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK(b.od.scale == Scale::Raw);
  }

  SUBCASE("rewriting a loaded corpus is byte-identical") {
    const fs::path dir2 = scratch() / "corpus2";
    write_corpus(dir2, back);
    CHECK(same_file_bytes(dir / "corpus.json", dir2 / "corpus.json"));
    for (const CityBundle& c : corpus.cities)
      for (const char* f : {"manifest.json", "features.csv", "centroids.csv", "od.csv"})
        CHECK(same_file_bytes(dir / c.city_id / f, dir2 / c.city_id / f));
  }

  SUBCASE("non-empty targets need force") {
    CHECK_THROWS_AS(write_corpus(dir, corpus, false), OdError);
    write_corpus(dir, corpus, true);  // replaces in place
    CHECK(read_corpus(dir).cities.size() == corpus.cities.size());
  }

  SUBCASE("bare city directories load without corpus.json") {
    const fs::path dir3 = scratch() / "imported";
    fs::create_directories(dir3);
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory())
        fs::copy(e.path(), dir3 / e.path().filename(), fs::copy_options::recursive);
    const Corpus imported = read_corpus(dir3);
    REQUIRE(imported.cities.size() == corpus.cities.size());
    CHECK(imported.config.n_cities == static_cast<int>(corpus.cities.size()));
    CHECK(imported.config.feat_dim == corpus.config.feat_dim);
    int val = 0;
    for (Split s : imported.splits) val += s == Split::Val;
    CHECK(val >= 1);  // splits come from the manifests, not defaults
  }

  SUBCASE("shape drift against the manifest is rejected") {
    const fs::path dir4 = scratch() / "drift";
    write_corpus(dir4, corpus);
    const fs::path od = dir4 / corpus.cities[0].city_id / "od.csv";
    Eigen::MatrixXd wrong = Eigen::MatrixXd::Zero(2, 2);
    write_matrix_csv(od, wrong);
    try {
      read_corpus(dir4);
      CHECK(false);
    } catch (const OdError& e) {
      CHECK(e.kind() == ErrorKind::Io);
      CHECK(std::string(e.what()).find("od.csv") != std::string::npos);
    }
  }
}

// ===== checkpoints ==========================================================

TEST_CASE("checkpoints round trip byte-identically") {
  const Corpus corpus = tiny_corpus();
  ExperimentConfig ec = tiny_ec();
  ec.validate();

  Stage2Model s2 = Stage2Model::build(ec.model, 1);
  nn::AdamW opt;
  opt.lr = ec.train_vae.lr;
  Stage2History history;
  train_stage2(s2, corpus, ec.train_vae, opt, history);
  REQUIRE(history.size() == 2);

  const fs::path p1 = scratch() / "s2.ckpt";
  save_checkpoint(p1, snapshot_stage2(s2, opt, history, ec));
  const Checkpoint loaded = load_checkpoint(p1);
  const fs::path p2 = scratch() / "s2_again.ckpt";
  save_checkpoint(p2, loaded);
  CHECK(same_file_bytes(p1, p2));
  CHECK(!fs::exists(p1.string() + ".tmp"));

  SUBCASE("restore reproduces parameters, optimizer and history") {
    Stage2Model fresh = Stage2Model::build(ec.model, 999);
    nn::AdamW fresh_opt;
    Stage2History fresh_hist;
    restore_stage2(loaded, fresh, fresh_opt, fresh_hist);
    CHECK(param_bytes(fresh.params) == param_bytes(s2.params));
    CHECK(fresh_opt.t == opt.t);
    REQUIRE(fresh_hist.size() == 2);
    CHECK(fresh_hist[1].val_recon == history[1].val_recon);
    const nn::Tensor& m0 = fresh.params[0].adam_m;
    const nn::Tensor& m1 = s2.params[0].adam_m;
    REQUIRE(!m0.empty());
    CHECK(std::equal(m0.data(), m0.data() + m0.size(), m1.data()));
  }

  SUBCASE("sidecar metadata matches") {
    const auto sidecar = read_text_file(p1.string() + ".json");
    CHECK(sidecar.find("\"stage\": 2") != std::string::npos);
    CHECK(sidecar.find("\"epoch\": 2") != std::string::npos);
    CHECK(sidecar.find("config_hash") != std::string::npos);
    CHECK(sidecar.find("loss_history") != std::string::npos);
  }

  SUBCASE("corruption is detected") {
    std::string bytes = read_text_file(p1);
    const fs::path trunc = scratch() / "trunc.ckpt";
    {
      std::ofstream out(trunc, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    }
    CHECK_THROWS_AS(load_checkpoint(trunc), OdError);

    std::string flipped = bytes;
    flipped[40] = static_cast<char>(flipped[40] ^ 0x1);  // inside the config json
    const fs::path bad = scratch() / "bad.ckpt";
    {
      std::ofstream out(bad, std::ios::binary);
      out.write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(bad), OdError);
    CHECK_THROWS_AS(load_checkpoint(scratch() / "m.csv"), OdError);
  }

  SUBCASE("a stage-3 checkpoint carries both stages") {
    Stage3Model s3 = Stage3Model::build(ec.model, 2);
    nn::AdamW opt3;
    opt3.lr = ec.train_diff.lr;
    Stage3History hist3;
    train_stage3(s2, s3, corpus, ec.train_diff, opt3, hist3);
    REQUIRE(hist3.size() == 1);
    REQUIRE(s3.latent_scale > 0.0);

    const fs::path p3 = scratch() / "s3.ckpt";
    save_checkpoint(p3, snapshot_stage3(s2, s3, opt3, hist3, ec));
    const Checkpoint ck3 = load_checkpoint(p3);
    CHECK(ck3.stage == 3);

    Stage2Model r2 = Stage2Model::build(ec.model, 0);
    Stage3Model r3 = Stage3Model::build(ec.model, 0);
    nn::AdamW ro;
    Stage3History rh;
    restore_stage3(ck3, r2, r3, ro, rh);
    CHECK(r3.latent_scale == s3.latent_scale);

    const CityBundle& city = corpus.cities[0];
    const Permutation id = Permutation::identity(city.n());
    const ODMatrix a = generate_od(s2, s3, city.features, city.regions, id, 5, 11);
    const ODMatrix b = generate_od(r2, r3, city.features, city.regions, id, 5, 11);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);

    Stage2History wrong_hist;
    nn::AdamW wrong_opt;
    try {
      restore_stage2(ck3, r2, wrong_opt, wrong_hist);
      CHECK(false);
    } catch (const OdError& e) {
      CHECK(e.kind() == ErrorKind::Input);
    }
  }

  SUBCASE("model mismatch is rejected on restore") {
    ModelConfig other = ec.model;
    other.kernel_dim = 6;
    Stage2Model wrong = Stage2Model::build(other, 0);
    nn::AdamW o;
    Stage2History h;
    try {
      restore_stage2(loaded, wrong, o, h);
      CHECK(false);
    } catch (const OdError& e) {
      CHECK(e.kind() == ErrorKind::Io);
    }
  }
}
