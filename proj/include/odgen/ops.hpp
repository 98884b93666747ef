#pragma once

#include <vector>

#include "odgen/graph.hpp"

// Differentiable op vocabulary.  Every function appends one node to the
// graph and returns it; backward closures capture exactly what they need.
// Shapes follow two conventions: feature maps are [C,H,W], token/vector
// batches are [rows, cols].

namespace odgen::nn {

// ----- elementwise ---------------------------------------------------------
NodeP add(Graph& g, NodeP a, NodeP b);
NodeP sub(Graph& g, NodeP a, NodeP b);
NodeP mul(Graph& g, NodeP a, NodeP b);
NodeP scale(Graph& g, NodeP a, double s);
NodeP add_scalar(Graph& g, NodeP a, double s);
NodeP exp_op(Graph& g, NodeP a);
NodeP log_op(Graph& g, NodeP a);   // requires strictly positive input
NodeP tanh_op(Graph& g, NodeP a);
NodeP silu(Graph& g, NodeP a);
NodeP square(Graph& g, NodeP a);

// ----- shape ---------------------------------------------------------------
NodeP reshape(Graph& g, NodeP a, std::vector<int> dims);
NodeP transpose2d(Graph& g, NodeP a);                       // [r,c] -> [c,r]
NodeP concat_channels(Graph& g, NodeP a, NodeP b);          // along dim 0 of [C,H,W]
NodeP crop2d(Graph& g, NodeP a, int h, int w);              // keep top-left h×w
NodeP pad2d(Graph& g, NodeP a, int h, int w);               // zero-pad bottom/right
NodeP diag2d(Graph& g, NodeP a);                            // [n,n] -> [n]

// ----- linear algebra ------------------------------------------------------
NodeP matmul(Graph& g, NodeP a, NodeP b);                   // [m,k]·[k,n]
// y = x·wᵀ (+ b per row); x:[n,din], w:[dout,din], b:[dout] or null
NodeP linear(Graph& g, NodeP x, NodeP w, NodeP b);

// ----- conv / spatial ------------------------------------------------------
// x:[Ci,H,W], w:[Co,Ci,kh,kw], b:[Co] or null
NodeP conv2d(Graph& g, NodeP x, NodeP w, NodeP b, int stride, int pad);
NodeP upsample_nearest2x(Graph& g, NodeP x);
NodeP group_norm(Graph& g, NodeP x, NodeP gamma, NodeP beta, int groups,
                 double eps = 1e-5);
// global average pool [C,H,W] -> [1,C]
NodeP global_avg_pool(Graph& g, NodeP x);
// y[c,h,w] = x[c,h,w] + v[c]; v is [1,C] or [C]
NodeP add_channel_bias(Graph& g, NodeP x, NodeP v);

// ----- rows ----------------------------------------------------------------
NodeP softmax_rows(Graph& g, NodeP x);                      // [r,c], stable
NodeP rows_l2_normalize(Graph& g, NodeP x, double eps = 1e-12);
NodeP gather_rows(Graph& g, NodeP table, std::vector<int> idx);

// ----- reductions / losses -------------------------------------------------
NodeP sum_all(Graph& g, NodeP a);                           // -> scalar [1]
NodeP mean_all(Graph& g, NodeP a);                          // -> scalar [1]
// mean((pred - target)^2) against a constant target
NodeP mse_vs(Graph& g, NodeP pred, const Tensor& target);

// ----- token layout helpers (composed, no new node types) ------------------
NodeP chw_to_tokens(Graph& g, NodeP x);   // [C,H,W] -> [H·W, C]
NodeP tokens_to_chw(Graph& g, NodeP t, int c, int h, int w);

}  // namespace odgen::nn
