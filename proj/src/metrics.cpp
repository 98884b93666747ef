#include "odgen/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "odgen/diffusion.hpp"

namespace odgen {

namespace {

// Sums after sorting so the result does not depend on the caller's element
// order.  This is what makes every metric bitwise invariant under relabeling.
double ordered_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

std::vector<double> matrix_entries(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(m.size()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

std::vector<double> offdiag_entries(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(m.size()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      if (i != j) v.push_back(m(i, j));
  return v;
}

void check_pair(const ODMatrix& m, const ODMatrix& mhat) {
  m.validate();
  mhat.validate();
  if (m.n() != mhat.n())
    throw OdError::dimension("flow matrices differ in size");
  if (m.scale != Scale::Raw || mhat.scale != Scale::Raw)
    throw OdError::state("metrics are defined on raw-scale flows");
}

}  // namespace

// ===== value-level metrics =====

double cpc(const ODMatrix& m, const ODMatrix& mhat) {
  check_pair(m, mhat);
  std::vector<double> mins;
  mins.reserve(static_cast<size_t>(m.values.size()));
  for (int i = 0; i < m.n(); ++i)
    for (int j = 0; j < m.n(); ++j)
      mins.push_back(std::min(m.values(i, j), mhat.values(i, j)));
  const double denom =
      ordered_sum(matrix_entries(m.values)) + ordered_sum(matrix_entries(mhat.values));
  if (denom == 0.0) return 1.0;  // two empty flow fields agree perfectly
  return std::clamp(2.0 * ordered_sum(std::move(mins)) / denom, 0.0, 1.0);
}

double rmse(const ODMatrix& m, const ODMatrix& mhat) {
  check_pair(m, mhat);
  std::vector<double> sq;
  sq.reserve(static_cast<size_t>(m.values.size()));
  for (int i = 0; i < m.n(); ++i)
    for (int j = 0; j < m.n(); ++j) {
      const double d = m.values(i, j) - mhat.values(i, j);
      sq.push_back(d * d);
    }
  const double n2 = static_cast<double>(m.n()) * static_cast<double>(m.n());
  return std::sqrt(ordered_sum(std::move(sq)) / n2);
}

double nrmse(const ODMatrix& m, const ODMatrix& mhat) {
  check_pair(m, mhat);
  // A constant matrix is detected exactly, not via a tolerance: its rounded
  // deviations would otherwise produce a tiny nonzero denominator.
  if (m.values.minCoeff() == m.values.maxCoeff())
    throw OdError::undefined_metric("nrmse of a constant matrix is undefined");
  const double n2 = static_cast<double>(m.n()) * static_cast<double>(m.n());
  const double mean = ordered_sum(matrix_entries(m.values)) / n2;
  std::vector<double> sq;
  sq.reserve(static_cast<size_t>(m.values.size()));
  for (int i = 0; i < m.n(); ++i)
    for (int j = 0; j < m.n(); ++j) {
      const double d = m.values(i, j) - mean;
      sq.push_back(d * d);
    }
  const double stddev = std::sqrt(ordered_sum(std::move(sq)) / n2);
  return rmse(m, mhat) / stddev;
}

double jsd_histogram(const std::vector<double>& a, const std::vector<double>& b,
                     int bins) {
  if (bins < 2) throw OdError::config("histogram needs at least two bins");
  if (a.empty() || b.empty())
    throw OdError::undefined_metric("histogram JSD needs nonempty value lists");
  double maxv = 0.0;
  for (const auto* list : {&a, &b})
    for (double x : *list) {
      if (!std::isfinite(x) || x < 0.0)
        throw OdError::input("histogram values must be finite and nonnegative");
      maxv = std::max(maxv, x);
    }
  if (maxv == 0.0) return 0.0;  // both lists sit entirely at zero

  // Shared log1p-spaced bins over [0, maxv]; the top edge is closed.
  const double span = std::log1p(maxv);
  auto bin_of = [&](double x) {
    const int k = static_cast<int>(std::log1p(x) / span * bins);
    return std::min(k, bins - 1);
  };
  std::vector<double> p(static_cast<size_t>(bins), 0.0);
  std::vector<double> q(static_cast<size_t>(bins), 0.0);
  for (double x : a) p[static_cast<size_t>(bin_of(x))] += 1.0;
  for (double x : b) q[static_cast<size_t>(bin_of(x))] += 1.0;
  for (double& v : p) v /= static_cast<double>(a.size());
  for (double& v : q) v /= static_cast<double>(b.size());

  // Base-2 JSD against the mixture midpoint; empty bins contribute nothing.
  // Each bin's two terms are combined locally so swapping the arguments
  // leaves the result bitwise unchanged.
  double s = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double mid = 0.5 * (p[k] + q[k]);
    double term = 0.0;
    if (p[k] > 0.0) term += 0.5 * p[k] * std::log2(p[k] / mid);
    if (q[k] > 0.0) term += 0.5 * q[k] * std::log2(q[k] / mid);
    s += term;
  }
  return std::clamp(s, 0.0, 1.0);
}

double jsd_flow_values(const ODMatrix& m, const ODMatrix& mhat, int bins,
                       bool include_diagonal) {
  check_pair(m, mhat);
  if (include_diagonal)
    return jsd_histogram(matrix_entries(m.values), matrix_entries(mhat.values), bins);
  return jsd_histogram(offdiag_entries(m.values), offdiag_entries(mhat.values), bins);
}

// ===== per-city report =====

namespace {

// Row/column sums in value order, so a relabeled matrix yields bitwise the
// same sum multiset and therefore identical histograms.
std::vector<double> ordered_row_sums(const Eigen::MatrixXd& m, bool columns) {
  std::vector<double> sums;
  sums.reserve(static_cast<size_t>(m.rows()));
  std::vector<double> line(static_cast<size_t>(m.cols()));
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j)
      line[static_cast<size_t>(j)] = columns ? m(j, i) : m(i, j);
    sums.push_back(ordered_sum(line));
  }
  return sums;
}

}  // namespace

MetricsReport evaluate(const ODMatrix& m, const ODMatrix& mhat, int bins) {
  check_pair(m, mhat);
  MetricsReport r;
  r.cpc = cpc(m, mhat);
  r.rmse = rmse(m, mhat);
  r.nrmse = nrmse(m, mhat);
  r.jsd_inflow = jsd_histogram(ordered_row_sums(m.values, true),
                               ordered_row_sums(mhat.values, true), bins);
  r.jsd_outflow = jsd_histogram(ordered_row_sums(m.values, false),
                                ordered_row_sums(mhat.values, false), bins);
  r.jsd_odflow = jsd_flow_values(m, mhat, bins);
  return r;
}

MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
  if (reports.empty())
    throw OdError::undefined_metric("aggregate of an empty report list");
  MetricsReport mean;
  for (const MetricsReport& r : reports) {
    mean.cpc += r.cpc;
    mean.rmse += r.rmse;
    mean.nrmse += r.nrmse;
    mean.jsd_inflow += r.jsd_inflow;
    mean.jsd_outflow += r.jsd_outflow;
    mean.jsd_odflow += r.jsd_odflow;
  }
  const double k = static_cast<double>(reports.size());
  mean.cpc /= k;
  mean.rmse /= k;
  mean.nrmse /= k;
  mean.jsd_inflow /= k;
  mean.jsd_outflow /= k;
  mean.jsd_odflow /= k;
  return mean;
}

// ===== gravity baselines =====

void GravityParams::validate() const {
  if (!std::isfinite(scale) || scale <= 0.0)
    throw OdError::config("gravity scale must be positive");
  if (!std::isfinite(decay) || decay <= 0.0)
    throw OdError::config("gravity decay must be positive");
}

Eigen::VectorXd flow_masses(const ODMatrix& m) {
  m.validate();
  if (m.scale != Scale::Raw)
    throw OdError::state("flow masses are defined on raw-scale flows");
  const std::vector<double> sums = ordered_row_sums(m.values, false);
  Eigen::VectorXd masses(m.n());
  for (int i = 0; i < m.n(); ++i) masses(i) = sums[static_cast<size_t>(i)];
  return masses;
}

GravityParams gravity_fit(const Corpus& corpus, Split split, DecayForm form) {
  // log M_ij = log C + log m_i + log m_j − decay · g(d_ij), pooled over every
  // positive off-diagonal pair of the split; g is log d or d by form.
  std::vector<double> xs, ys;
  for (int ci : corpus.indices_of(split)) {
    const CityBundle& city = corpus.cities[static_cast<size_t>(ci)];
    if (city.od.scale != Scale::Raw)
      throw OdError::state("gravity fit needs raw-scale flows");
    city.od.validate();
    const Eigen::VectorXd masses = flow_masses(city.od);
    const int n = city.n();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        const double flow = city.od.values(i, j);
        if (flow <= 0.0) continue;
        // Masses are row sums, so m_i > 0 here; a silent destination still
        // has zero mass and cannot enter the log model.
        if (masses(j) <= 0.0) continue;
        const double d = (city.regions.centroids.row(i) - city.regions.centroids.row(j)).norm();
        if (d <= 0.0)
          throw OdError::input("coincident centroids in gravity fit");
        xs.push_back(form == DecayForm::Power ? std::log(d) : d);
        ys.push_back(std::log(flow) - std::log(masses(i)) - std::log(masses(j)));
      }
  }
  if (xs.size() < 2)
    throw OdError::input("gravity fit needs at least two positive off-diagonal flows");
  const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  if (*xmax - *xmin < 1e-12)
    throw OdError::input("gravity fit needs varying pair distances");

  Eigen::MatrixXd a(static_cast<Eigen::Index>(xs.size()), 2);
  Eigen::VectorXd b(static_cast<Eigen::Index>(xs.size()));
  for (size_t r = 0; r < xs.size(); ++r) {
    a(static_cast<Eigen::Index>(r), 0) = 1.0;
    a(static_cast<Eigen::Index>(r), 1) = -xs[r];
    b(static_cast<Eigen::Index>(r)) = ys[r];
  }
  const Eigen::Vector2d sol = a.colPivHouseholderQr().solve(b);
  GravityParams params;
  params.form = form;
  params.scale = std::exp(sol(0));
  params.decay = sol(1);
  if (!std::isfinite(params.decay) || params.decay <= 0.0)
    throw OdError::input("fitted flows do not decay with distance");
  params.validate();
  return params;
}

ODMatrix gravity_predict(const GravityParams& params, const RegionSet& regions,
                         const Eigen::VectorXd& masses) {
  params.validate();
  regions.validate();
  const int n = regions.n();
  if (masses.size() != n)
    throw OdError::dimension("mass vector does not match the region count");
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(masses(i)) || masses(i) < 0.0)
      throw OdError::input("masses must be finite and nonnegative");

  ODMatrix out;
  out.values = Eigen::MatrixXd::Zero(n, n);
  out.scale = Scale::Raw;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = (regions.centroids.row(i) - regions.centroids.row(j)).norm();
      if (d <= 0.0)
        throw OdError::input("coincident centroids make gravity flows undefined");
      const double f = params.form == DecayForm::Power ? std::pow(d, -params.decay)
                                                       : std::exp(-params.decay * d);
      // The mass product is grouped so swapping i and j is bitwise neutral.
      out.values(i, j) = params.scale * (masses(i) * masses(j)) * f;
    }
  return out;
}

// ===== permutation robustness protocol =====

double RobustnessTable::drift() const {
  if (rows.empty()) return 0.0;
  return rows.back().mean_jsd_odflow - rows.front().mean_jsd_odflow;
}

RobustnessTable perm_robustness(const FlowGenerator& gen, const Corpus& corpus,
                                Split split, const std::vector<double>& intensities,
                                int n_seeds, uint64_t seed) {
  if (intensities.empty())
    throw OdError::config("robustness protocol needs at least one intensity");
  for (double k : intensities)
    if (!(k >= 0.0 && k <= 1.0))
      throw OdError::config("permutation intensity must lie in [0, 1]");
  if (n_seeds < 1)
    throw OdError::config("robustness protocol needs at least one seed repeat");
  const std::vector<int> cities = corpus.indices_of(split);
  if (cities.empty())
    throw OdError::input("no cities in the requested split");

  RobustnessTable table;
  for (double k : intensities) {
    double sum = 0.0;
    for (int rep = 0; rep < n_seeds; ++rep)
      for (size_t ci = 0; ci < cities.size(); ++ci) {
        const CityBundle& city = corpus.cities[static_cast<size_t>(cities[ci])];
        // Seeds depend on (repeat, city) only: the intensity-0 row then
        // reproduces plain evaluation and repeats of an intensity match.
        const uint64_t draw = static_cast<uint64_t>(rep) * cities.size() + ci;
        const Permutation p =
            permutation_random(city.n(), k, RandomStream::derive(seed, "pi", draw));
        ODMatrix generated = gen(city, p, RandomStream::derive(seed, "gen", draw));
        if (generated.n() != city.n())
          throw OdError::dimension("generator returned a mismatched matrix");
        const ODMatrix restored = permutation_apply(generated, p.inverse());
        sum += jsd_flow_values(city.od, restored);
      }
    const double count = static_cast<double>(n_seeds) * static_cast<double>(cities.size());
    table.rows.push_back({k, sum / count});
  }
  return table;
}

FlowGenerator diffusion_generator(const Stage2Model& s2, const Stage3Model& s3,
                                  int tau_steps) {
  return [&s2, &s3, tau_steps](const CityBundle& city, const Permutation& p,
                               uint64_t seed) {
    return generate_od(s2, s3, city.features, city.regions, p, tau_steps, seed);
  };
}

FlowGenerator gravity_generator(const GravityParams& params) {
  return [params](const CityBundle& city, const Permutation& p, uint64_t seed) {
    (void)seed;  // per-pair formula, nothing stochastic
    const CityBundle relabeled = permute_city(city, p);
    return gravity_predict(params, relabeled.regions, flow_masses(relabeled.od));
  };
}

}  // namespace odgen
