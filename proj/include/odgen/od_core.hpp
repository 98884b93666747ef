#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "odgen/common.hpp"

namespace odgen {

// ===== domain types ========================================================

struct RegionSet {
  std::vector<std::string> ids;  // unique, stable identifiers
  Eigen::MatrixXd centroids;     // N×2 coordinates (abstract units)

  int n() const { return static_cast<int>(ids.size()); }
  void validate() const;
};

enum class Scale { Raw, Log1p };

// Square flow matrix; entry (i,j) is flow from region i to region j.
struct ODMatrix {
  Eigen::MatrixXd values;
  Scale scale = Scale::Raw;

  int n() const { return static_cast<int>(values.rows()); }
  void validate() const;
};

struct FeatureMatrix {
  Eigen::MatrixXd vectors;  // N×d, one embedding row per region

  int n() const { return static_cast<int>(vectors.rows()); }
  int d() const { return static_cast<int>(vectors.cols()); }
  void validate() const;
};

// 0-based index bijection; map[i] is the source index that lands at slot i,
// i.e. applying p to a matrix gives out[i][j] = in[map[i]][map[j]].
struct Permutation {
  std::vector<int> map;

  int n() const { return static_cast<int>(map.size()); }
  static Permutation identity(int n);
  bool is_identity() const;
  Permutation inverse() const;
  void validate() const;
};

// one synthetic or imported urban instance
struct CityBundle {
  std::string city_id;
  RegionSet regions;
  FeatureMatrix features;
  ODMatrix od;  // raw scale

  int n() const { return regions.n(); }
  void validate() const;
};

// ===== operations ==========================================================

ODMatrix permutation_apply(const ODMatrix& m, const Permutation& p);
// row-wise reindexing for features / centroids: out.row(i) = in.row(map[i])
Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& m, const Permutation& p);
CityBundle permute_city(const CityBundle& c, const Permutation& p);

// compose(p, q)(i) = q(p(i)); satisfies
// permutation_apply(m, compose(p, q)) == permutation_apply(permutation_apply(m, q), p)
Permutation compose(const Permutation& p, const Permutation& q);

// Fixes all indices outside a uniform random subset of size ⌈intensity·n⌉
// and shuffles that subset uniformly.  Deterministic in (n, intensity, seed).
Permutation permutation_random(int n, double intensity, uint64_t seed);

// element-wise log(1+x) / exp(x)−1 (clamped at 0); scale tag flips
ODMatrix log_transform(const ODMatrix& m);
ODMatrix log_inverse(const ODMatrix& m);

}  // namespace odgen
