#include "odgen/ops.hpp"

#include <cmath>

namespace odgen::nn {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw OdError::dimension(what);
}

// accumulate g into the grad buffer of `in`, respecting needs_grad
inline void accum(const NodeP& in, const Eigen::Ref<const Eigen::ArrayXd>& g) {
  if (in->needs_grad) in->grad_buf().flat() += g;
}

}  // namespace

// ===== elementwise =========================================================

NodeP add(Graph& g, NodeP a, NodeP b) {
  require(a->value.same_dims(b->value), "add: shape mismatch");
  Tensor out = a->value.clone();
  out.flat() += b->value.flat();
  return g.make(std::move(out), {a, b}, [a, b](Node& n) {
    accum(a, n.grad.flat());
    accum(b, n.grad.flat());
  });
}

NodeP sub(Graph& g, NodeP a, NodeP b) {
  require(a->value.same_dims(b->value), "sub: shape mismatch");
  Tensor out = a->value.clone();
  out.flat() -= b->value.flat();
  return g.make(std::move(out), {a, b}, [a, b](Node& n) {
    accum(a, n.grad.flat());
    accum(b, -n.grad.flat());
  });
}

NodeP mul(Graph& g, NodeP a, NodeP b) {
  require(a->value.same_dims(b->value), "mul: shape mismatch");
  Tensor out = a->value.clone();
  out.flat() *= b->value.flat();
  return g.make(std::move(out), {a, b}, [a, b](Node& n) {
    accum(a, n.grad.flat() * b->value.flat());
    accum(b, n.grad.flat() * a->value.flat());
  });
}

NodeP scale(Graph& g, NodeP a, double s) {
  Tensor out = a->value.clone();
  out.flat() *= s;
  return g.make(std::move(out), {a},
                [a, s](Node& n) { accum(a, s * n.grad.flat()); });
}

NodeP add_scalar(Graph& g, NodeP a, double s) {
  Tensor out = a->value.clone();
  out.flat() += s;
  return g.make(std::move(out), {a},
                [a](Node& n) { accum(a, n.grad.flat()); });
}

NodeP exp_op(Graph& g, NodeP a) {
  Tensor out = a->value.clone();
  out.flat() = out.flat().exp();
  NodeP r = g.make(std::move(out), {a}, nullptr);
  r->backward_fn = [a, r = r.get()](Node& n) {
    accum(a, n.grad.flat() * r->value.flat());
  };
  if (!r->needs_grad) r->backward_fn = nullptr;
  return r;
}

NodeP log_op(Graph& g, NodeP a) {
  Tensor out = a->value.clone();
  out.flat() = out.flat().log();
  return g.make(std::move(out), {a}, [a](Node& n) {
    accum(a, n.grad.flat() / a->value.flat());
  });
}

NodeP tanh_op(Graph& g, NodeP a) {
  Tensor out = a->value.clone();
  out.flat() = out.flat().tanh();
  NodeP r = g.make(std::move(out), {a}, nullptr);
  r->backward_fn = [a, r = r.get()](Node& n) {
    accum(a, n.grad.flat() * (1.0 - r->value.flat().square()));
  };
  if (!r->needs_grad) r->backward_fn = nullptr;
  return r;
}

NodeP silu(Graph& g, NodeP a) {
  Tensor out(a->value.dims());
  auto x = a->value.flat();
  Eigen::ArrayXd sig = 1.0 / (1.0 + (-x).exp());
  out.flat() = x * sig;
  return g.make(std::move(out), {a}, [a, sig = std::move(sig)](Node& n) {
    auto x = a->value.flat();
    accum(a, n.grad.flat() * (sig * (1.0 + x * (1.0 - sig))));
  });
}

NodeP square(Graph& g, NodeP a) { return mul(g, a, a); }

// ===== shape ===============================================================

NodeP reshape(Graph& g, NodeP a, std::vector<int> dims) {
  Tensor out = a->value.reshaped(std::move(dims));
  return g.make(std::move(out), {a},
                [a](Node& n) { accum(a, n.grad.flat()); });
}

NodeP transpose2d(Graph& g, NodeP a) {
  require(a->value.ndim() == 2, "transpose2d: need 2-D");
  Tensor out({a->value.dim(1), a->value.dim(0)});
  out.matrix() = a->value.matrix().transpose();
  return g.make(std::move(out), {a}, [a](Node& n) {
    if (a->needs_grad)
      a->grad_buf().matrix() += n.grad.matrix().transpose();
  });
}

NodeP concat_channels(Graph& g, NodeP a, NodeP b) {
  require(a->value.ndim() == 3 && b->value.ndim() == 3 &&
              a->value.dim(1) == b->value.dim(1) &&
              a->value.dim(2) == b->value.dim(2),
          "concat_channels: spatial mismatch");
  int ca = a->value.dim(0), cb = b->value.dim(0);
  int h = a->value.dim(1), w = a->value.dim(2);
  Tensor out({ca + cb, h, w});
  std::copy(a->value.data(), a->value.data() + a->value.size(), out.data());
  std::copy(b->value.data(), b->value.data() + b->value.size(),
            out.data() + a->value.size());
  int64_t na = a->value.size();
  return g.make(std::move(out), {a, b}, [a, b, na](Node& n) {
    accum(a, n.grad.flat().head(na));
    accum(b, n.grad.flat().tail(n.grad.size() - na));
  });
}

NodeP crop2d(Graph& g, NodeP a, int h, int w) {
  require(a->value.ndim() == 3, "crop2d: need [C,H,W]");
  int c = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  require(h <= H && w <= W && h > 0 && w > 0, "crop2d: crop exceeds input");
  Tensor out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at3(ci, i, j) = a->value.at3(ci, i, j);
  return g.make(std::move(out), {a}, [a, c, h, w](Node& n) {
    if (!a->needs_grad) return;
    Tensor& ga = a->grad_buf();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) ga.at3(ci, i, j) += n.grad.at3(ci, i, j);
  });
}

NodeP pad2d(Graph& g, NodeP a, int h, int w) {
  require(a->value.ndim() == 3, "pad2d: need [C,H,W]");
  int c = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  require(h >= H && w >= W, "pad2d: target smaller than input");
  Tensor out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) out.at3(ci, i, j) = a->value.at3(ci, i, j);
  return g.make(std::move(out), {a}, [a, c, H, W](Node& n) {
    if (!a->needs_grad) return;
    Tensor& ga = a->grad_buf();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) ga.at3(ci, i, j) += n.grad.at3(ci, i, j);
  });
}

NodeP diag2d(Graph& g, NodeP a) {
  require(a->value.ndim() == 2 && a->value.dim(0) == a->value.dim(1),
          "diag2d: need square matrix");
  int ndim = a->value.dim(0);
  Tensor out({ndim});
  for (int i = 0; i < ndim; ++i) out.data()[i] = a->value.matrix()(i, i);
  return g.make(std::move(out), {a}, [a, ndim](Node& n) {
    if (!a->needs_grad) return;
    auto ga = a->grad_buf().matrix();
    for (int i = 0; i < ndim; ++i) ga(i, i) += n.grad.data()[i];
  });
}

// ===== linear algebra ======================================================

NodeP matmul(Graph& g, NodeP a, NodeP b) {
  require(a->value.ndim() == 2 && b->value.ndim() == 2 &&
              a->value.dim(1) == b->value.dim(0),
          "matmul: inner dims mismatch");
  Tensor out({a->value.dim(0), b->value.dim(1)});
  out.matrix().noalias() = a->value.matrix() * b->value.matrix();
  return g.make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->needs_grad)
      a->grad_buf().matrix().noalias() +=
          n.grad.matrix() * b->value.matrix().transpose();
    if (b->needs_grad)
      b->grad_buf().matrix().noalias() +=
          a->value.matrix().transpose() * n.grad.matrix();
  });
}

NodeP linear(Graph& g, NodeP x, NodeP w, NodeP b) {
  require(x->value.ndim() == 2 && w->value.ndim() == 2 &&
              x->value.dim(1) == w->value.dim(1),
          "linear: input dim mismatch");
  int n_rows = x->value.dim(0), dout = w->value.dim(0);
  Tensor out({n_rows, dout});
  out.matrix().noalias() = x->value.matrix() * w->value.matrix().transpose();
  if (b) {
    require(b->value.size() == dout, "linear: bias dim mismatch");
    out.matrix().rowwise() +=
        Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), dout);
  }
  std::vector<NodeP> ins = b ? std::vector<NodeP>{x, w, b}
                             : std::vector<NodeP>{x, w};
  return g.make(std::move(out), std::move(ins), [x, w, b](Node& n) {
    if (x->needs_grad)
      x->grad_buf().matrix().noalias() += n.grad.matrix() * w->value.matrix();
    if (w->needs_grad)
      w->grad_buf().matrix().noalias() +=
          n.grad.matrix().transpose() * x->value.matrix();
    if (b && b->needs_grad) {
      Eigen::Map<Eigen::RowVectorXd> gb(b->grad_buf().data(), b->value.size());
      gb += n.grad.matrix().colwise().sum();
    }
  });
}

// ===== conv / spatial ======================================================

namespace {

// col has one row per (ci, ki, kj) and one column per output pixel
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho,
            int wo, Tensor& col) {
  int ci = x.dim(0), H = x.dim(1), W = x.dim(2);
  double* cd = col.data();
  for (int c = 0; c < ci; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < wo; ++oj) {
            int jj = oj * stride - pad + kj;
            *cd++ = (ii >= 0 && ii < H && jj >= 0 && jj < W) ? x.at3(c, ii, jj)
                                                             : 0.0;
          }
        }
      }
}

void col2im_add(const Tensor& col, int kh, int kw, int stride, int pad, int ho,
                int wo, Tensor& gx) {
  int ci = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
  const double* cd = col.data();
  for (int c = 0; c < ci; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < wo; ++oj, ++cd) {
            int jj = oj * stride - pad + kj;
            if (ii >= 0 && ii < H && jj >= 0 && jj < W) gx.at3(c, ii, jj) += *cd;
          }
        }
      }
}

}  // namespace

NodeP conv2d(Graph& g, NodeP x, NodeP w, NodeP b, int stride, int pad) {
  require(x->value.ndim() == 3 && w->value.ndim() == 4, "conv2d: bad ranks");
  int ci = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  int co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  require(w->value.dim(1) == ci, "conv2d: channel mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  int ho = (H + 2 * pad - kh) / stride + 1;
  int wo = (W + 2 * pad - kw) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d: output collapses to zero");

  Tensor col({ci * kh * kw, ho * wo});
  im2col(x->value, kh, kw, stride, pad, ho, wo, col);

  Tensor out({co, ho, wo});
  auto w_mat = Eigen::Map<const RowMat>(w->value.data(), co, ci * kh * kw);
  Eigen::Map<RowMat> out_mat(out.data(), co, ho * wo);
  out_mat.noalias() = w_mat * col.matrix();
  if (b) {
    require(b->value.size() == co, "conv2d: bias dim mismatch");
    for (int c = 0; c < co; ++c) out_mat.row(c).array() += b->value.data()[c];
  }

  std::vector<NodeP> ins = b ? std::vector<NodeP>{x, w, b}
                             : std::vector<NodeP>{x, w};
  return g.make(std::move(out), std::move(ins),
                [x, w, b, col = std::move(col), kh, kw, stride, pad, ho, wo,
                 co, ci](Node& n) {
                  Eigen::Map<const RowMat> gout(n.grad.data(), co, ho * wo);
                  if (w->needs_grad) {
                    Eigen::Map<RowMat> gw(w->grad_buf().data(), co,
                                          ci * kh * kw);
                    gw.noalias() += gout * col.matrix().transpose();
                  }
                  if (b && b->needs_grad) {
                    for (int c = 0; c < co; ++c)
                      b->grad_buf().data()[c] += gout.row(c).sum();
                  }
                  if (x->needs_grad) {
                    Tensor gcol({ci * kh * kw, ho * wo});
                    auto w_mat = Eigen::Map<const RowMat>(w->value.data(), co,
                                                          ci * kh * kw);
                    gcol.matrix().noalias() = w_mat.transpose() * gout;
                    col2im_add(gcol, kh, kw, stride, pad, ho, wo,
                               x->grad_buf());
                  }
                });
}

NodeP upsample_nearest2x(Graph& g, NodeP x) {
  require(x->value.ndim() == 3, "upsample: need [C,H,W]");
  int c = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  Tensor out({c, 2 * H, 2 * W});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double v = x->value.at3(ci, i, j);
        out.at3(ci, 2 * i, 2 * j) = v;
        out.at3(ci, 2 * i, 2 * j + 1) = v;
        out.at3(ci, 2 * i + 1, 2 * j) = v;
        out.at3(ci, 2 * i + 1, 2 * j + 1) = v;
      }
  return g.make(std::move(out), {x}, [x, c, H, W](Node& n) {
    if (!x->needs_grad) return;
    Tensor& gx = x->grad_buf();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          gx.at3(ci, i, j) += n.grad.at3(ci, 2 * i, 2 * j) +
                              n.grad.at3(ci, 2 * i, 2 * j + 1) +
                              n.grad.at3(ci, 2 * i + 1, 2 * j) +
                              n.grad.at3(ci, 2 * i + 1, 2 * j + 1);
  });
}

NodeP group_norm(Graph& g, NodeP x, NodeP gamma, NodeP beta, int groups,
                 double eps) {
  require(x->value.ndim() == 3, "group_norm: need [C,H,W]");
  int c = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  require(groups >= 1 && c % groups == 0, "group_norm: groups must divide C");
  require(gamma->value.size() == c && beta->value.size() == c,
          "group_norm: affine dim mismatch");
  int gs = c / groups;              // channels per group
  int64_t gn = int64_t(gs) * H * W;  // elements per group

  Tensor xhat({c, H, W});
  Tensor inv_std({groups});
  for (int gi = 0; gi < groups; ++gi) {
    auto seg = x->value.flat().segment(int64_t(gi) * gn, gn);
    double mean = seg.mean();
    double var = (seg - mean).square().sum() / static_cast<double>(gn);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std.data()[gi] = is;
    xhat.flat().segment(int64_t(gi) * gn, gn) = (seg - mean) * is;
  }
  Tensor out({c, H, W});
  int64_t hw = int64_t(H) * W;
  for (int ci = 0; ci < c; ++ci)
    out.flat().segment(ci * hw, hw) =
        gamma->value.data()[ci] * xhat.flat().segment(ci * hw, hw) +
        beta->value.data()[ci];

  return g.make(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
       groups, gs, gn, hw, c](Node& n) {
        // d(xhat) = dy * gamma, then the usual normalization backward per group
        if (gamma->needs_grad || beta->needs_grad) {
          for (int ci = 0; ci < c; ++ci) {
            auto dy = n.grad.flat().segment(ci * hw, hw);
            if (gamma->needs_grad)
              gamma->grad_buf().data()[ci] +=
                  (dy * xhat.flat().segment(ci * hw, hw)).sum();
            if (beta->needs_grad) beta->grad_buf().data()[ci] += dy.sum();
          }
        }
        if (!x->needs_grad) return;
        Eigen::ArrayXd dxhat(gn);
        for (int gi = 0; gi < groups; ++gi) {
          for (int k = 0; k < gs; ++k) {
            int ci = gi * gs + k;
            dxhat.segment(k * hw, hw) =
                n.grad.flat().segment(ci * hw, hw) * gamma->value.data()[ci];
          }
          auto xh = xhat.flat().segment(int64_t(gi) * gn, gn);
          double m1 = dxhat.mean();
          double m2 = (dxhat * xh).mean();
          x->grad_buf().flat().segment(int64_t(gi) * gn, gn) +=
              inv_std.data()[gi] * (dxhat - m1 - xh * m2);
        }
      });
}

NodeP global_avg_pool(Graph& g, NodeP x) {
  require(x->value.ndim() == 3, "global_avg_pool: need [C,H,W]");
  int c = x->value.dim(0);
  int64_t hw = int64_t(x->value.dim(1)) * x->value.dim(2);
  Tensor out({1, c});
  for (int ci = 0; ci < c; ++ci)
    out.data()[ci] = x->value.flat().segment(ci * hw, hw).mean();
  return g.make(std::move(out), {x}, [x, c, hw](Node& n) {
    if (!x->needs_grad) return;
    for (int ci = 0; ci < c; ++ci)
      x->grad_buf().flat().segment(ci * hw, hw) +=
          n.grad.data()[ci] / static_cast<double>(hw);
  });
}

NodeP add_channel_bias(Graph& g, NodeP x, NodeP v) {
  require(x->value.ndim() == 3, "add_channel_bias: need [C,H,W]");
  int c = x->value.dim(0);
  require(v->value.size() == c, "add_channel_bias: channel mismatch");
  int64_t hw = int64_t(x->value.dim(1)) * x->value.dim(2);
  Tensor out = x->value.clone();
  for (int ci = 0; ci < c; ++ci)
    out.flat().segment(ci * hw, hw) += v->value.data()[ci];
  return g.make(std::move(out), {x, v}, [x, v, c, hw](Node& n) {
    accum(x, n.grad.flat());
    if (v->needs_grad)
      for (int ci = 0; ci < c; ++ci)
        v->grad_buf().data()[ci] += n.grad.flat().segment(ci * hw, hw).sum();
  });
}

// ===== rows ================================================================

NodeP softmax_rows(Graph& g, NodeP x) {
  require(x->value.ndim() == 2, "softmax_rows: need 2-D");
  int r = x->value.dim(0), c = x->value.dim(1);
  Tensor out({r, c});
  auto xm = x->value.matrix();
  auto om = out.matrix();
  for (int i = 0; i < r; ++i) {
    Eigen::ArrayXd row = xm.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    om.row(i) = (row / row.sum()).matrix();
  }
  NodeP res = g.make(std::move(out), {x}, nullptr);
  res->backward_fn = [x, res = res.get()](Node& n) {
    if (!x->needs_grad) return;
    auto y = res->value.matrix();
    auto dy = n.grad.matrix();
    auto gx = x->grad_buf().matrix();
    for (int i = 0; i < y.rows(); ++i) {
      double dot = (dy.row(i).array() * y.row(i).array()).sum();
      gx.row(i).array() += (dy.row(i).array() - dot) * y.row(i).array();
    }
  };
  if (!res->needs_grad) res->backward_fn = nullptr;
  return res;
}

NodeP rows_l2_normalize(Graph& g, NodeP x, double eps) {
  require(x->value.ndim() == 2, "rows_l2_normalize: need 2-D");
  int r = x->value.dim(0);
  Tensor out({r, x->value.dim(1)});
  Eigen::ArrayXd norms(r);
  for (int i = 0; i < r; ++i) {
    double nv = std::max(x->value.matrix().row(i).norm(), eps);
    norms[i] = nv;
    out.matrix().row(i) = x->value.matrix().row(i) / nv;
  }
  NodeP res = g.make(std::move(out), {x}, nullptr);
  res->backward_fn = [x, norms = std::move(norms), res = res.get()](Node& n) {
    if (!x->needs_grad) return;
    auto y = res->value.matrix();
    auto dy = n.grad.matrix();
    auto gx = x->grad_buf().matrix();
    for (int i = 0; i < y.rows(); ++i) {
      double dot = dy.row(i).dot(y.row(i));
      gx.row(i) += (dy.row(i) - dot * y.row(i)) / norms[i];
    }
  };
  if (!res->needs_grad) res->backward_fn = nullptr;
  return res;
}

NodeP gather_rows(Graph& g, NodeP table, std::vector<int> idx) {
  require(table->value.ndim() == 2, "gather_rows: need 2-D table");
  int rows = table->value.dim(0), d = table->value.dim(1);
  for (int i : idx)
    if (i < 0 || i >= rows) throw OdError::input("gather_rows: index out of range");
  Tensor out({static_cast<int>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i)
    out.matrix().row(static_cast<int>(i)) = table->value.matrix().row(idx[i]);
  return g.make(std::move(out), {table}, [table, idx = std::move(idx)](Node& n) {
    if (!table->needs_grad) return;
    auto gt = table->grad_buf().matrix();
    for (size_t i = 0; i < idx.size(); ++i)
      gt.row(idx[i]) += n.grad.matrix().row(static_cast<int>(i));
  });
}

// ===== reductions / losses =================================================

NodeP sum_all(Graph& g, NodeP a) {
  Tensor out = Tensor::scalar(a->value.flat().sum());
  return g.make(std::move(out), {a}, [a](Node& n) {
    if (a->needs_grad) a->grad_buf().flat() += n.grad.data()[0];
  });
}

NodeP mean_all(Graph& g, NodeP a) {
  double inv = 1.0 / static_cast<double>(a->value.size());
  Tensor out = Tensor::scalar(a->value.flat().sum() * inv);
  return g.make(std::move(out), {a}, [a, inv](Node& n) {
    if (a->needs_grad) a->grad_buf().flat() += n.grad.data()[0] * inv;
  });
}

NodeP mse_vs(Graph& g, NodeP pred, const Tensor& target) {
  require(pred->value.same_dims(target), "mse_vs: shape mismatch");
  Eigen::ArrayXd diff = pred->value.flat() - target.flat();
  double inv = 1.0 / static_cast<double>(diff.size());
  Tensor out = Tensor::scalar(diff.square().sum() * inv);
  return g.make(std::move(out), {pred}, [pred, diff = std::move(diff), inv](Node& n) {
    if (pred->needs_grad)
      pred->grad_buf().flat() += (2.0 * inv * n.grad.data()[0]) * diff;
  });
}

// ===== token layout ========================================================

NodeP chw_to_tokens(Graph& g, NodeP x) {
  require(x->value.ndim() == 3, "chw_to_tokens: need [C,H,W]");
  int c = x->value.dim(0), hw = x->value.dim(1) * x->value.dim(2);
  return transpose2d(g, reshape(g, x, {c, hw}));
}

NodeP tokens_to_chw(Graph& g, NodeP t, int c, int h, int w) {
  require(t->value.ndim() == 2 && t->value.dim(0) == h * w &&
              t->value.dim(1) == c,
          "tokens_to_chw: shape mismatch");
  return reshape(g, transpose2d(g, t), {c, h, w});
}

}  // namespace odgen::nn
