#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "odgen/od_core.hpp"
#include "odgen/synthetic.hpp"

namespace odgen {

// Flow-matrix evaluation: value-level errors (CPC, RMSE, NRMSE), histogram
// JSDs over marginal distributions, gravity baselines, and the progressive
// permutation robustness protocol.
//
// Every metric here is exactly invariant under relabeling both matrices with
// the same permutation: all reductions either sum their terms in value order
// or aggregate over order-free histogram bins, so the results are bitwise
// reproducible no matter how the caller indexed the regions.

// ===== value-level metrics =====

// Common part of commuting: 2·Σ min(M, M̂) / (Σ M + Σ M̂), in [0, 1].
// Returns 1 when both matrices are all-zero (nothing to disagree about).
double cpc(const ODMatrix& m, const ODMatrix& mhat);

// √(mean squared entry difference) and its normalization by the population
// standard deviation of m's entries.  nrmse on a constant m has a zero
// denominator and raises an undefined-metric error.
double rmse(const ODMatrix& m, const ODMatrix& mhat);
double nrmse(const ODMatrix& m, const ODMatrix& mhat);

// Base-2 Jensen-Shannon divergence between the histograms of two value
// lists, in [0, 1].  Both lists share one set of log1p-spaced bins spanning
// their union range; empty bins follow the 0·log 0 = 0 convention.
double jsd_histogram(const std::vector<double>& a, const std::vector<double>& b,
                     int bins = 50);

// JSD between the entry distributions of two flow matrices.  Diagonal
// (intra-region) flows are excluded by default: self-flows are zero by
// construction and would otherwise dominate the first bin.
double jsd_flow_values(const ODMatrix& m, const ODMatrix& mhat, int bins = 50,
                       bool include_diagonal = false);

// ===== per-city report =====

struct MetricsReport {
  double cpc = 0.0;
  double rmse = 0.0;
  double nrmse = 0.0;
  double jsd_inflow = 0.0;   // histogram JSD of column sums
  double jsd_outflow = 0.0;  // histogram JSD of row sums
  double jsd_odflow = 0.0;   // histogram JSD of off-diagonal entries
};

// Full report for one city; both matrices must be raw-scale and same shape.
MetricsReport evaluate(const ODMatrix& m, const ODMatrix& mhat, int bins = 50);

// Unweighted field-wise mean over per-city reports.
MetricsReport aggregate(const std::vector<MetricsReport>& reports);

// ===== gravity baselines =====

enum class DecayForm { Power, Exponential };

// M̂_ij = scale · m_i · m_j · f(d_ij) with f(d) = d^(−decay) or exp(−decay·d).
struct GravityParams {
  DecayForm form = DecayForm::Power;
  double scale = 0.0;
  double decay = 0.0;  // > 0: flows fall off with distance

  void validate() const;
};

// Least-squares fit of (log scale, decay) on log flows over the positive
// off-diagonal pairs of the given split, with region masses taken from the
// row sums of each city's ground-truth matrix.
GravityParams gravity_fit(const Corpus& corpus, Split split, DecayForm form);

// Predicted raw flows for one city from its masses and centroid distances.
// The diagonal is zero; off-diagonal centroids must be distinct.
ODMatrix gravity_predict(const GravityParams& params, const RegionSet& regions,
                         const Eigen::VectorXd& masses);

// Row sums of a raw OD matrix, accumulated in value order so the masses of a
// relabeled city are bitwise equal to the relabeled masses.
Eigen::VectorXd flow_masses(const ODMatrix& m);

// ===== permutation robustness protocol =====

// A generator is handed the city, a relabeling, and a seed, and must return
// raw flows indexed in the relabeled frame (row a of the output corresponds
// to original region p.map[a]).  The protocol maps the output back before
// scoring, so a generator that is truly equivariant scores flat across
// intensities.
using FlowGenerator =
    std::function<ODMatrix(const CityBundle& city, const Permutation& p, uint64_t seed)>;

struct RobustnessRow {
  double intensity = 0.0;
  double mean_jsd_odflow = 0.0;  // over cities × seeds
};

struct RobustnessTable {
  std::vector<RobustnessRow> rows;  // one per requested intensity, input order

  // Signed end-to-end drift: last row minus first row.  Near zero for a
  // permutation-oblivious or equivariant generator.
  double drift() const;
};

// For each intensity: draw a permutation per (city, repeat), generate with
// the permuted inputs, map the output back, and score jsd_odflow against the
// ground truth.  Permutation and generator seeds depend only on the (city,
// repeat) pair, never on the intensity, so an intensity-0 row reproduces
// plain evaluation exactly and repeated intensities give identical rows.
RobustnessTable perm_robustness(const FlowGenerator& gen, const Corpus& corpus,
                                Split split, const std::vector<double>& intensities,
                                int n_seeds, uint64_t seed);

struct Stage2Model;
struct Stage3Model;

// Diffusion-backed generator: permuted features/regions plus the matching
// permutation tokens.  Captures the models by reference.
FlowGenerator diffusion_generator(const Stage2Model& s2, const Stage3Model& s3,
                                  int tau_steps);

// Gravity-backed generator: per-pair formula on the permuted city, oblivious
// to indexing by construction.  Ignores the seed.
FlowGenerator gravity_generator(const GravityParams& params);

}  // namespace odgen
