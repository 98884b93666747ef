#include "odgen/multikernel.hpp"

#include <algorithm>
#include <cmath>

namespace odgen {

using nn::Graph;
using nn::Node;
using nn::NodeP;
using nn::Tensor;

Eigen::MatrixXd MKTensor::channel(int c) const {
  int nd = n();
  Eigen::MatrixXd out(nd, nd);
  for (int i = 0; i < nd; ++i)
    for (int j = 0; j < nd; ++j) out(i, j) = channels.at3(c, i, j);
  return out;
}

Eigen::MatrixXd gram(const Eigen::MatrixXd& phi) {
  int n = static_cast<int>(phi.rows());
  Eigen::MatrixXd k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      double v = phi.row(i).dot(phi.row(j));
      k(i, j) = v;
      k(j, i) = v;
    }
  return k;
}

Eigen::MatrixXd structural_kernel(const RegionSet& regions, double sigma) {
  if (sigma <= 0.0) throw OdError::config("structural kernel needs sigma > 0");
  int n = regions.n();
  Eigen::MatrixXd k(n, n);
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int i = 0; i < n; ++i) {
    k(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) {
      double dx = regions.centroids(i, 0) - regions.centroids(j, 0);
      double dy = regions.centroids(i, 1) - regions.centroids(j, 1);
      double v = std::exp(-(dx * dx + dy * dy) * inv);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

double median_pairwise_distance(const RegionSet& regions) {
  int n = regions.n();
  std::vector<double> d;
  d.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double dx = regions.centroids(i, 0) - regions.centroids(j, 0);
      double dy = regions.centroids(i, 1) - regions.centroids(j, 1);
      d.push_back(std::sqrt(dx * dx + dy * dy));
    }
  std::sort(d.begin(), d.end());
  size_t m = d.size();
  return m % 2 == 1 ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2]);
}

namespace {

// mean of |x| accumulated over sorted values: permutation-invariant bitwise
double sorted_mean_abs(const Tensor& t) {
  std::vector<double> v(t.data(), t.data() + t.size());
  for (double& x : v) x = std::fabs(x);
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// differentiable mirrored Gram: out[i,j] = out[j,i] = φ_i·φ_j
NodeP gram_node(Graph& g, NodeP phi) {
  int n = phi->value.dim(0);
  Tensor out({n, n});
  {
    auto pm = phi->value.matrix();
    auto om = out.matrix();
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        double v = pm.row(i).dot(pm.row(j));
        om(i, j) = v;
        om(j, i) = v;
      }
  }
  return g.make(std::move(out), {phi}, [phi](Node& nd) {
    if (!phi->needs_grad) return;
    // K = ΦΦᵀ (symmetric construction) ⇒ dΦ = (G + Gᵀ)·Φ
    auto gk = nd.grad.matrix();
    phi->grad_buf().matrix().noalias() +=
        (gk + gk.transpose()) * phi->value.matrix();
  });
}

}  // namespace

KernelMaps::KernelMaps(nn::ParamStore& ps, const std::string& prefix,
                       int feat_dim, int n_kernels, int kernel_dim,
                       RandomStream& rs)
    : feat_dim_(feat_dim), kernel_dim_(kernel_dim) {
  if (n_kernels < 1) throw OdError::config("need at least one kernel map");
  if (feat_dim < 1 || kernel_dim < 1)
    throw OdError::config("kernel map dims must be positive");
  maps_.reserve(static_cast<size_t>(n_kernels));
  for (int l = 0; l < n_kernels; ++l)
    maps_.push_back(nn::Mlp2::make(ps, prefix + ".phi" + std::to_string(l),
                                   feat_dim, kernel_dim, kernel_dim, rs));
}

Eigen::MatrixXd KernelMaps::kernel_matrix(const FeatureMatrix& features,
                                          int l) const {
  features.validate();
  if (features.d() != feat_dim_)
    throw OdError::dimension("kernel_matrix: feature dim mismatch");
  if (l < 0 || l >= n_kernels())
    throw OdError::input("kernel_matrix: kernel index out of range");
  Graph g;
  NodeP x = g.constant(Tensor::from_matrix(features.vectors));
  NodeP phi = maps_[static_cast<size_t>(l)](g, x);
  return gram(phi->value.to_matrix());
}

NodeP KernelMaps::kernel_node(Graph& g, NodeP features, int l) const {
  if (features->value.ndim() != 2 || features->value.dim(1) != feat_dim_)
    throw OdError::dimension("kernel_node: feature dim mismatch");
  if (l < 0 || l >= n_kernels())
    throw OdError::input("kernel_node: kernel index out of range");
  return gram_node(g, maps_[static_cast<size_t>(l)](g, features));
}

NodeP KernelMaps::mk_tensor_node(Graph& g, NodeP features,
                                 const RegionSet& regions) const {
  if (features->value.ndim() != 2 || features->value.dim(1) != feat_dim_)
    throw OdError::dimension("mk_tensor: feature dim mismatch");
  int n = features->value.dim(0);
  if (n != regions.n())
    throw OdError::dimension("mk_tensor: features/regions size mismatch");
  if (!features->value.flat().isFinite().all())
    throw OdError::input("mk_tensor: non-finite features");

  NodeP stacked;
  for (const auto& map : maps_) {
    NodeP k = gram_node(g, map(g, features));
    double norm = sorted_mean_abs(k->value);
    if (norm > 0.0) k = nn::scale(g, k, 1.0 / norm);
    NodeP ch = nn::reshape(g, k, {1, n, n});
    stacked = stacked ? nn::concat_channels(g, stacked, ch) : ch;
  }

  double sigma = median_pairwise_distance(regions);
  if (sigma <= 0.0)
    throw OdError::input("mk_tensor: degenerate centroids (zero median distance)");
  Tensor structural({1, n, n});
  {
    Eigen::MatrixXd s = structural_kernel(regions, sigma);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) structural.at3(0, i, j) = s(i, j);
  }
  return nn::concat_channels(g, stacked, g.constant(std::move(structural)));
}

MKTensor KernelMaps::mk_tensor(const FeatureMatrix& features,
                               const RegionSet& regions) const {
  Graph g;
  NodeP x = g.constant(Tensor::from_matrix(features.vectors));
  NodeP node = mk_tensor_node(g, x, regions);
  MKTensor out;
  out.channels = node->value.clone();
  return out;
}

}  // namespace odgen
