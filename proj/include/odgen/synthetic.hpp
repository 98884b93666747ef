#pragma once

#include "odgen/od_core.hpp"

namespace odgen {

struct CorpusConfig {
  int n_cities = 200;
  int n_min = 8;
  int n_max = 32;
  int feat_dim = 32;
  int latent_factor_dim = 8;
  double noise_level = 0.3;  // std of multiplicative log-normal flow noise
  double rho = 0.3;          // distance decay length of the ground-truth law
  uint64_t seed = 0;

  void validate() const;
};

enum class Split { Train, Val, Test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Corpus {
  CorpusConfig config;
  std::vector<CityBundle> cities;
  std::vector<Split> splits;  // parallel to cities

  std::vector<int> indices_of(Split s) const;
  const CityBundle& by_id(const std::string& city_id) const;
};

// Exposes the hidden generative quantities for oracle tests.
struct CityOracle {
  Eigen::VectorXd mass;        // m_i = exp(⟨w, u_i⟩)
  Eigen::MatrixXd noiseless;   // scaled flows before noise
  double flow_scale = 0.0;     // global factor bringing off-diag mean to 10
};

// One city, fully determined by (cfg.seed, index).  Flows follow a gravity
// law on hidden per-region factors; features are a noisy linear view of the
// same factors, so they are informative about flows without containing them.
CityBundle generate_city(const CorpusConfig& cfg, int index,
                         CityOracle* oracle = nullptr);

// All cities plus a deterministic 8:1:1 train/val/test split by id hash.
Corpus generate_corpus(const CorpusConfig& cfg);

// 8:1:1 assignment by ranking hash(city_id); exact sizes for n ≥ 3
// (e.g. 10 → 8/1/1, 200 → 160/20/20); everything lands in train below that.
std::vector<Split> assign_splits(const std::vector<std::string>& ids);

}  // namespace odgen
