#include "odgen/od_core.hpp"

#include <cmath>
#include <unordered_set>

namespace odgen {

void RegionSet::validate() const {
  if (n() < 2) throw OdError::input("region set needs at least 2 regions");
  if (centroids.rows() != n() || centroids.cols() != 2)
    throw OdError::dimension("centroids must be N×2");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids)
    if (!seen.insert(id).second)
      throw OdError::input("duplicate region id: " + id);
  if (!centroids.allFinite())
    throw OdError::input("non-finite centroid coordinates");
}

void ODMatrix::validate() const {
  if (values.rows() != values.cols())
    throw OdError::dimension("OD matrix must be square");
  if (!values.allFinite()) throw OdError::input("non-finite OD entries");
  if (scale == Scale::Raw && (values.array() < 0.0).any())
    throw OdError::input("negative raw OD entries");
}

void FeatureMatrix::validate() const {
  if (vectors.cols() < 1) throw OdError::dimension("feature dim must be ≥ 1");
  if (!vectors.allFinite()) throw OdError::input("non-finite feature entries");
}

void CityBundle::validate() const {
  regions.validate();
  features.validate();
  od.validate();
  if (features.n() != regions.n() || od.n() != regions.n())
    throw OdError::dimension("city " + city_id + ": component sizes disagree");
}

Permutation Permutation::identity(int n) {
  Permutation p;
  p.map.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p.map[static_cast<size_t>(i)] = i;
  return p;
}

bool Permutation::is_identity() const {
  for (int i = 0; i < n(); ++i)
    if (map[static_cast<size_t>(i)] != i) return false;
  return true;
}

Permutation Permutation::inverse() const {
  Permutation inv;
  inv.map.assign(map.size(), -1);
  for (int i = 0; i < n(); ++i) inv.map[static_cast<size_t>(map[i])] = i;
  return inv;
}

void Permutation::validate() const {
  std::vector<char> seen(map.size(), 0);
  for (int v : map) {
    if (v < 0 || v >= n() || seen[static_cast<size_t>(v)])
      throw OdError::input("invalid permutation: not a bijection");
    seen[static_cast<size_t>(v)] = 1;
  }
}

ODMatrix permutation_apply(const ODMatrix& m, const Permutation& p) {
  if (m.n() != p.n())
    throw OdError::dimension("permutation_apply: size mismatch");
  ODMatrix out;
  out.scale = m.scale;
  out.values.resize(m.n(), m.n());
  for (int i = 0; i < m.n(); ++i)
    for (int j = 0; j < m.n(); ++j)
      out.values(i, j) = m.values(p.map[i], p.map[j]);
  return out;
}

Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& m, const Permutation& p) {
  if (m.rows() != p.n()) throw OdError::dimension("permute_rows: size mismatch");
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (int i = 0; i < p.n(); ++i) out.row(i) = m.row(p.map[i]);
  return out;
}

CityBundle permute_city(const CityBundle& c, const Permutation& p) {
  CityBundle out;
  out.city_id = c.city_id;
  out.regions.centroids = permute_rows(c.regions.centroids, p);
  out.regions.ids.resize(c.regions.ids.size());
  for (int i = 0; i < p.n(); ++i) out.regions.ids[i] = c.regions.ids[p.map[i]];
  out.features.vectors = permute_rows(c.features.vectors, p);
  out.od = permutation_apply(c.od, p);
  return out;
}

Permutation compose(const Permutation& p, const Permutation& q) {
  if (p.n() != q.n()) throw OdError::dimension("compose: size mismatch");
  Permutation r;
  r.map.resize(p.map.size());
  for (int i = 0; i < p.n(); ++i) r.map[i] = q.map[p.map[i]];
  return r;
}

Permutation permutation_random(int n, double intensity, uint64_t seed) {
  if (intensity < 0.0 || intensity > 1.0)
    throw OdError::config("permutation intensity must lie in [0,1]");
  int k = static_cast<int>(
      std::ceil(intensity * static_cast<double>(n) - 1e-9));
  k = std::max(0, std::min(n, k));
  Permutation p = Permutation::identity(n);
  if (k < 2) return p;  // shuffling 0 or 1 indices moves nothing

  RandomStream rs(RandomStream::derive(seed, "perm", static_cast<uint64_t>(n)));
  std::vector<int> positions(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) positions[i] = i;
  rs.shuffle(positions);
  positions.resize(static_cast<size_t>(k));  // the affected subset

  std::vector<int> values = positions;
  rs.shuffle(values);
  for (int i = 0; i < k; ++i) p.map[positions[i]] = values[i];
  return p;
}

ODMatrix log_transform(const ODMatrix& m) {
  if (m.scale != Scale::Raw)
    throw OdError::state("log_transform expects a raw-scale matrix");
  m.validate();
  ODMatrix out;
  out.scale = Scale::Log1p;
  out.values = m.values.array().log1p();
  return out;
}

ODMatrix log_inverse(const ODMatrix& m) {
  if (m.scale != Scale::Log1p)
    throw OdError::state("log_inverse expects a log1p-scale matrix");
  if (!m.values.allFinite()) throw OdError::input("non-finite log-scale entries");
  ODMatrix out;
  out.scale = Scale::Raw;
  out.values = m.values.array().expm1().max(0.0);
  return out;
}

}  // namespace odgen
