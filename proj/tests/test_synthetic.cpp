#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>
#include <cmath>
#include <map>

#include "odgen/synthetic.hpp"

using namespace odgen;

namespace {

CorpusConfig tiny_cfg() {
  CorpusConfig cfg;
  cfg.n_cities = 10;
  cfg.n_min = 6;
  cfg.n_max = 12;
  cfg.feat_dim = 16;
  cfg.latent_factor_dim = 4;
  cfg.noise_level = 0.3;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("generate_city is deterministic and well-formed") {
  CorpusConfig cfg = tiny_cfg();
  CityBundle a = generate_city(cfg, 3);
  CityBundle b = generate_city(cfg, 3);

  a.validate();
  CHECK(a.city_id == b.city_id);
  CHECK(a.od.values == b.od.values);
  CHECK(a.features.vectors == b.features.vectors);
  CHECK(a.regions.centroids == b.regions.centroids);

  SUBCASE("different index gives different flows") {
    CityBundle c = generate_city(cfg, 4);
    CHECK(a.od.values != c.od.values);
  }
  SUBCASE("diagonal is exactly zero") {
    for (int i = 0; i < a.n(); ++i) CHECK(a.od.values(i, i) == 0.0);
  }
  SUBCASE("flows are nonnegative and finite") {
    CHECK(a.od.values.minCoeff() >= 0.0);
    CHECK(a.od.values.allFinite());
  }
  SUBCASE("region count stays inside the configured range") {
    for (int i = 0; i < cfg.n_cities; ++i) {
      CityBundle c = generate_city(cfg, i);
      CHECK(c.n() >= cfg.n_min);
      CHECK(c.n() <= cfg.n_max);
    }
  }
}

TEST_CASE("noiseless flows follow the generative law exactly") {
  CorpusConfig cfg = tiny_cfg();
  cfg.noise_level = 0.0;
  CityOracle oracle;
  CityBundle c = generate_city(cfg, 1, &oracle);
  const int n = c.n();

  // independent re-evaluation: log M_ij vs log m_i + log m_j - dist/rho
  // must correlate perfectly (the scale factor only shifts the log)
  std::vector<double> x, y;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double dist = (c.regions.centroids.row(i) - c.regions.centroids.row(j)).norm();
      x.push_back(std::log(oracle.mass(i)) + std::log(oracle.mass(j)) - dist / cfg.rho);
      y.push_back(std::log(c.od.values(i, j)));
    }
  const auto m = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= m;
  my /= m;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
  }
  double corr = sxy / std::sqrt(sxx * syy);
  CHECK(corr == doctest::Approx(1.0).epsilon(1e-9));

  SUBCASE("oracle matrix matches the emitted one at zero noise") {
    CHECK((oracle.noiseless - c.od.values).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("off-diagonal mean is pinned to 10") {
    double sum = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) sum += c.od.values(i, j);
    CHECK(sum / (n * (n - 1)) == doctest::Approx(10.0).epsilon(1e-9));
  }
}

TEST_CASE("features expose the latent factors") {
  CorpusConfig cfg = tiny_cfg();
  CityBundle c = generate_city(cfg, 2);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(c.features.vectors);
  // the first latent_factor_dim singular values carry genuine signal
  CHECK(svd.singularValues()(cfg.latent_factor_dim - 1) > 1e-8);
}

TEST_CASE("generate_corpus splits 8:1:1 deterministically") {
  CorpusConfig cfg = tiny_cfg();
  Corpus corpus = generate_corpus(cfg);

  CHECK(corpus.cities.size() == 10);
  CHECK(corpus.indices_of(Split::Train).size() == 8);
  CHECK(corpus.indices_of(Split::Val).size() == 1);
  CHECK(corpus.indices_of(Split::Test).size() == 1);

  SUBCASE("every city lands in exactly one split") {
    size_t total = corpus.indices_of(Split::Train).size() +
                   corpus.indices_of(Split::Val).size() +
                   corpus.indices_of(Split::Test).size();
    CHECK(total == corpus.cities.size());
  }
  SUBCASE("regeneration reproduces the split") {
    Corpus again = generate_corpus(cfg);
    CHECK(corpus.splits == again.splits);
    for (size_t i = 0; i < corpus.cities.size(); ++i)
      CHECK(corpus.cities[i].od.values == again.cities[i].od.values);
  }
  SUBCASE("ids are unique and resolvable") {
    for (const auto& c : corpus.cities) CHECK(corpus.by_id(c.city_id).city_id == c.city_id);
    CHECK_THROWS_AS(corpus.by_id("no-such-city"), OdError);
  }
  SUBCASE("larger corpus splits 160/20/20") {
    CorpusConfig big = tiny_cfg();
    big.n_cities = 200;
    big.n_min = 4;
    big.n_max = 6;
    Corpus bc = generate_corpus(big);
    CHECK(bc.indices_of(Split::Train).size() == 160);
    CHECK(bc.indices_of(Split::Val).size() == 20);
    CHECK(bc.indices_of(Split::Test).size() == 20);
  }
}

TEST_CASE("degenerate configs are rejected") {
  CorpusConfig cfg = tiny_cfg();
  SUBCASE("n_min below 2") {
    cfg.n_min = 1;
    CHECK_THROWS_AS(cfg.validate(), OdError);
  }
  SUBCASE("inverted range") {
    cfg.n_min = 10;
    cfg.n_max = 9;
    CHECK_THROWS_AS(cfg.validate(), OdError);
  }
  SUBCASE("nonpositive decay length") {
    cfg.rho = 0.0;
    CHECK_THROWS_AS(cfg.validate(), OdError);
  }
  SUBCASE("negative noise") {
    cfg.noise_level = -0.1;
    CHECK_THROWS_AS(cfg.validate(), OdError);
  }
  SUBCASE("index out of range is an input error") {
    CHECK_THROWS_AS(generate_city(cfg, cfg.n_cities), OdError);
  }
}

TEST_CASE("split names round trip") {
  for (Split s : {Split::Train, Split::Val, Split::Test})
    CHECK(split_from_name(split_name(s)) == s);
  CHECK_THROWS_AS(split_from_name("bogus"), OdError);
}
