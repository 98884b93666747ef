#pragma once

#include <optional>
#include <string>

#include "odgen/ops.hpp"

namespace odgen::nn {

// Layers are thin bundles of Param references plus a forward method.  All
// parameters live in a ParamStore; construction order defines serialization
// order, so model classes must register layers deterministically.

void init_normal(Tensor& t, double stddev, RandomStream& rs);

// largest divisor of c that is <= 8 (GroupNorm group count)
int pick_groups(int c);

struct Linear {
  Param* w = nullptr;
  Param* b = nullptr;  // null when bias-free

  // weight std = wscale / sqrt(fan_in)
  static Linear make(ParamStore& ps, const std::string& name, int din,
                     int dout, RandomStream& rs, bool bias = true,
                     double wscale = 1.0);
  NodeP operator()(Graph& g, NodeP x) const;
};

struct Conv2d {
  Param* w = nullptr;
  Param* b = nullptr;
  int stride = 1;
  int pad = 1;

  static Conv2d make(ParamStore& ps, const std::string& name, int cin,
                     int cout, int k, int stride, int pad, RandomStream& rs,
                     bool bias = true, double wscale = 1.0);
  NodeP operator()(Graph& g, NodeP x) const;
};

struct GroupNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  int groups = 1;

  static GroupNorm make(ParamStore& ps, const std::string& name, int c);
  NodeP operator()(Graph& g, NodeP x) const;
};

// Pre-norm single-head self-attention over spatial positions, residual.
// Q/K/V projections are bias-free so zeroed weights give exactly zero
// attention output.
struct SelfAttention {
  GroupNorm norm;
  Linear q, k, v, o;
  int channels = 0;

  static SelfAttention make(ParamStore& ps, const std::string& name, int c,
                            RandomStream& rs);
  NodeP operator()(Graph& g, NodeP x) const;
};

// Queries from the feature map, keys/values from an external token sequence
// [n_tokens, d_cond].  Residual; V projection bias-free (see SelfAttention).
struct CrossAttention {
  GroupNorm norm;
  Linear q, k, v, o;
  int channels = 0;
  int dk = 0;

  static CrossAttention make(ParamStore& ps, const std::string& name, int c,
                             int d_cond, int dk, RandomStream& rs);
  NodeP operator()(Graph& g, NodeP x, NodeP tokens) const;
};

// conv -> norm -> silu twice with residual; optional additive per-channel
// time-embedding injection between the convs
struct ResBlock {
  GroupNorm n1, n2;
  Conv2d c1, c2;
  Linear t_proj;  // only when built with temb_dim > 0
  std::optional<Conv2d> skip;
  bool has_temb = false;

  static ResBlock make(ParamStore& ps, const std::string& name, int cin,
                       int cout, int temb_dim, RandomStream& rs);
  NodeP operator()(Graph& g, NodeP x, NodeP temb) const;  // temb nullable
};

// two-layer perceptron with SiLU between
struct Mlp2 {
  Linear l1, l2;

  static Mlp2 make(ParamStore& ps, const std::string& name, int din,
                   int dhidden, int dout, RandomStream& rs);
  NodeP operator()(Graph& g, NodeP x) const;
};

// sinusoidal position/timestep features of an integer, as a [1, dim] tensor
Tensor sinusoidal_embedding(int t, int dim);

}  // namespace odgen::nn
