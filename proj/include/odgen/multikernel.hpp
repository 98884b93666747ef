#pragma once

#include "odgen/layers.hpp"
#include "odgen/od_core.hpp"

namespace odgen {

// Stack of L learned kernel matrices plus one structural-prior channel,
// shaped [L+1, N, N].
struct MKTensor {
  nn::Tensor channels;

  int n_channels() const { return channels.dim(0); }
  int n() const { return channels.dim(1); }
  Eigen::MatrixXd channel(int c) const;
};

// exact Gram matrix: one dot product per (i,j) pair, mirrored, so the result
// is symmetric to the last bit and permutation-equivariant to the last bit
Eigen::MatrixXd gram(const Eigen::MatrixXd& phi);

// RBF on centroid distances: K[i,j] = exp(−dist²/(2σ²)), unit diagonal
Eigen::MatrixXd structural_kernel(const RegionSet& regions, double sigma);

// median over the N(N−1)/2 pairwise centroid distances (sorted, so the
// result is permutation-invariant bitwise)
double median_pairwise_distance(const RegionSet& regions);

// L learnable feature maps φ_l (two-layer perceptrons d → d_k), producing
// kernel channels K^l = Φ_l·Φ_lᵀ.  Before stacking, each learned channel is
// divided by its mean absolute value (treated as a constant, i.e. no
// gradient flows through the normalizer; the mean is accumulated over
// sorted values so it is permutation-invariant bitwise).
class KernelMaps {
 public:
  KernelMaps(nn::ParamStore& ps, const std::string& prefix, int feat_dim,
             int n_kernels, int kernel_dim, RandomStream& rs);

  int n_kernels() const { return static_cast<int>(maps_.size()); }
  int feat_dim() const { return feat_dim_; }

  // one learned kernel matrix, no normalization (l in [0, n_kernels))
  Eigen::MatrixXd kernel_matrix(const FeatureMatrix& features, int l) const;
  // same channel as a differentiable node (gradients reach phi_l and features)
  nn::NodeP kernel_node(nn::Graph& g, nn::NodeP features, int l) const;

  // differentiable path: features node [N,d] -> stacked [L+1,N,N]
  nn::NodeP mk_tensor_node(nn::Graph& g, nn::NodeP features,
                           const RegionSet& regions) const;

  // convenience evaluation without keeping a graph
  MKTensor mk_tensor(const FeatureMatrix& features,
                     const RegionSet& regions) const;

 private:
  std::vector<nn::Mlp2> maps_;
  int feat_dim_ = 0;
  int kernel_dim_ = 0;
};

}  // namespace odgen
