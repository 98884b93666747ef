#include "odgen/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace odgen {

void CorpusConfig::validate() const {
  if (n_cities < 1) throw OdError::config("n_cities must be ≥ 1");
  if (n_min < 2 || n_min > n_max)
    throw OdError::config("need 2 ≤ n_min ≤ n_max");
  if (feat_dim < 1) throw OdError::config("feat_dim must be ≥ 1");
  if (latent_factor_dim < 1)
    throw OdError::config("latent_factor_dim must be ≥ 1");
  if (noise_level < 0.0) throw OdError::config("noise_level must be ≥ 0");
  if (rho <= 0.0) throw OdError::config("rho must be > 0");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw OdError::input("unknown split name: " + name);
}

std::vector<int> Corpus::indices_of(Split s) const {
  std::vector<int> out;
  for (size_t i = 0; i < cities.size(); ++i)
    if (splits[i] == s) out.push_back(static_cast<int>(i));
  return out;
}

const CityBundle& Corpus::by_id(const std::string& city_id) const {
  for (const auto& c : cities)
    if (c.city_id == city_id) return c;
  throw OdError::input("unknown city id: " + city_id);
}

namespace {

// shared across all cities of one corpus: mass direction w, feature map (A, b)
struct SharedFactors {
  Eigen::VectorXd w;   // latent_factor_dim
  Eigen::MatrixXd a;   // feat_dim × latent_factor_dim
  Eigen::VectorXd b;   // feat_dim
};

SharedFactors shared_factors(const CorpusConfig& cfg) {
  RandomStream rs(RandomStream::derive(cfg.seed, "corpus-shared", 0));
  SharedFactors f;
  double inv_sqrt_l = 1.0 / std::sqrt(static_cast<double>(cfg.latent_factor_dim));
  f.w.resize(cfg.latent_factor_dim);
  for (int i = 0; i < cfg.latent_factor_dim; ++i)
    f.w[i] = rs.normal() * inv_sqrt_l;
  f.a.resize(cfg.feat_dim, cfg.latent_factor_dim);
  for (int i = 0; i < cfg.feat_dim; ++i)
    for (int j = 0; j < cfg.latent_factor_dim; ++j)
      f.a(i, j) = rs.normal() * inv_sqrt_l;
  f.b.resize(cfg.feat_dim);
  for (int i = 0; i < cfg.feat_dim; ++i) f.b[i] = rs.normal();
  return f;
}

}  // namespace

CityBundle generate_city(const CorpusConfig& cfg, int index, CityOracle* oracle) {
  cfg.validate();
  if (index < 0 || index >= cfg.n_cities)
    throw OdError::input("city index out of range");

  SharedFactors shared = shared_factors(cfg);
  RandomStream rs(
      RandomStream::derive(cfg.seed, "city", static_cast<uint64_t>(index)));

  CityBundle city;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "city_%04d", index);
    city.city_id = buf;
  }

  int n = static_cast<int>(rs.uniform_int(cfg.n_min, cfg.n_max));
  city.regions.ids.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    city.regions.ids[i] = city.city_id + "_r" + std::to_string(i);
  city.regions.centroids.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    city.regions.centroids(i, 0) = rs.uniform();
    city.regions.centroids(i, 1) = rs.uniform();
  }

  Eigen::MatrixXd u(n, cfg.latent_factor_dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cfg.latent_factor_dim; ++j) u(i, j) = rs.normal();

  Eigen::VectorXd mass = (u * shared.w).array().exp();

  // gravity flows on the hidden factors, zero diagonal
  Eigen::MatrixXd m0(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) {
        m0(i, j) = 0.0;
        continue;
      }
      double dx = city.regions.centroids(i, 0) - city.regions.centroids(j, 0);
      double dy = city.regions.centroids(i, 1) - city.regions.centroids(j, 1);
      double dist = std::sqrt(dx * dx + dy * dy);
      m0(i, j) = mass[i] * mass[j] * std::exp(-dist / cfg.rho);
    }
  double offdiag_mean = m0.sum() / static_cast<double>(n) / (n - 1);
  double flow_scale = 10.0 / offdiag_mean;  // off-diagonal mean becomes 10
  m0 *= flow_scale;

  city.od.scale = Scale::Raw;
  city.od.values = m0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double noise = rs.normal();
      city.od.values(i, j) =
          std::max(0.0, m0(i, j) * std::exp(cfg.noise_level * noise));
    }

  // features: linear view of the hidden factors plus small observation noise
  city.features.vectors.resize(n, cfg.feat_dim);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = shared.a * u.row(i).transpose() + shared.b;
    for (int j = 0; j < cfg.feat_dim; ++j)
      city.features.vectors(i, j) = x[j] + 0.05 * rs.normal();
  }

  city.validate();
  if (oracle) {
    oracle->mass = mass;
    oracle->noiseless = m0;
    oracle->flow_scale = flow_scale;
  }
  return city;
}

std::vector<Split> assign_splits(const std::vector<std::string>& ids) {
  size_t n = ids.size();
  std::vector<Split> out(n, Split::Train);
  if (n < 3) return out;
  size_t n_test = std::max<size_t>(
      1, static_cast<size_t>(std::llround(0.1 * static_cast<double>(n))));
  size_t n_val = n_test;

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<uint64_t> h(n);
  for (size_t i = 0; i < n; ++i) h[i] = hash_str(0x0d5eed, ids[i]);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return h[a] != h[b] ? h[a] < h[b] : ids[a] < ids[b];
  });
  for (size_t r = 0; r < n; ++r) {
    if (r < n_test)
      out[order[r]] = Split::Test;
    else if (r < n_test + n_val)
      out[order[r]] = Split::Val;
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;
  corpus.cities.reserve(static_cast<size_t>(cfg.n_cities));
  for (int i = 0; i < cfg.n_cities; ++i)
    corpus.cities.push_back(generate_city(cfg, i));
  std::vector<std::string> ids;
  ids.reserve(corpus.cities.size());
  for (const auto& c : corpus.cities) ids.push_back(c.city_id);
  corpus.splits = assign_splits(ids);
  return corpus;
}

}  // namespace odgen
