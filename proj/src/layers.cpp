#include "odgen/layers.hpp"

#include <cmath>

namespace odgen::nn {

void init_normal(Tensor& t, double stddev, RandomStream& rs) {
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = stddev * rs.normal();
}

int pick_groups(int c) {
  for (int gr = std::min(8, c); gr >= 1; --gr)
    if (c % gr == 0) return gr;
  return 1;
}

// ===== Linear ==============================================================

Linear Linear::make(ParamStore& ps, const std::string& name, int din, int dout,
                    RandomStream& rs, bool bias, double wscale) {
  Linear l;
  l.w = &ps.create(name + ".w", {dout, din});
  init_normal(l.w->value, wscale / std::sqrt(static_cast<double>(din)), rs);
  if (bias) {
    l.b = &ps.create(name + ".b", {dout});
    l.b->apply_decay = false;
  }
  return l;
}

NodeP Linear::operator()(Graph& g, NodeP x) const {
  return linear(g, x, g.param(*w), b ? g.param(*b) : nullptr);
}

// ===== Conv2d ==============================================================

Conv2d Conv2d::make(ParamStore& ps, const std::string& name, int cin, int cout,
                    int k, int stride, int pad, RandomStream& rs, bool bias,
                    double wscale) {
  Conv2d c;
  c.stride = stride;
  c.pad = pad;
  c.w = &ps.create(name + ".w", {cout, cin, k, k});
  init_normal(c.w->value, wscale / std::sqrt(static_cast<double>(cin) * k * k),
              rs);
  if (bias) {
    c.b = &ps.create(name + ".b", {cout});
    c.b->apply_decay = false;
  }
  return c;
}

NodeP Conv2d::operator()(Graph& g, NodeP x) const {
  return conv2d(g, x, g.param(*w), b ? g.param(*b) : nullptr, stride, pad);
}

// ===== GroupNorm ===========================================================

GroupNorm GroupNorm::make(ParamStore& ps, const std::string& name, int c) {
  GroupNorm n;
  n.groups = pick_groups(c);
  n.gamma = &ps.create(name + ".gamma", {c});
  n.gamma->value.flat().setOnes();
  n.gamma->apply_decay = false;
  n.beta = &ps.create(name + ".beta", {c});
  n.beta->apply_decay = false;
  return n;
}

NodeP GroupNorm::operator()(Graph& g, NodeP x) const {
  return group_norm(g, x, g.param(*gamma), g.param(*beta), groups);
}

// ===== SelfAttention =======================================================

SelfAttention SelfAttention::make(ParamStore& ps, const std::string& name,
                                  int c, RandomStream& rs) {
  SelfAttention a;
  a.channels = c;
  a.norm = GroupNorm::make(ps, name + ".norm", c);
  a.q = Linear::make(ps, name + ".q", c, c, rs, /*bias=*/false);
  a.k = Linear::make(ps, name + ".k", c, c, rs, /*bias=*/false);
  a.v = Linear::make(ps, name + ".v", c, c, rs, /*bias=*/false);
  a.o = Linear::make(ps, name + ".o", c, c, rs, /*bias=*/true, 0.1);
  return a;
}

NodeP SelfAttention::operator()(Graph& g, NodeP x) const {
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  NodeP t = chw_to_tokens(g, norm(g, x));  // [HW, C]
  NodeP qm = q(g, t), km = k(g, t), vm = v(g, t);
  NodeP att = softmax_rows(
      g, scale(g, matmul(g, qm, transpose2d(g, km)), 1.0 / std::sqrt(c)));
  NodeP out = o(g, matmul(g, att, vm));
  return add(g, x, tokens_to_chw(g, out, c, h, w));
}

// ===== CrossAttention ======================================================

CrossAttention CrossAttention::make(ParamStore& ps, const std::string& name,
                                    int c, int d_cond, int dk,
                                    RandomStream& rs) {
  CrossAttention a;
  a.channels = c;
  a.dk = dk;
  a.norm = GroupNorm::make(ps, name + ".norm", c);
  a.q = Linear::make(ps, name + ".q", c, dk, rs, /*bias=*/false);
  a.k = Linear::make(ps, name + ".k", d_cond, dk, rs, /*bias=*/false);
  a.v = Linear::make(ps, name + ".v", d_cond, c, rs, /*bias=*/false);
  a.o = Linear::make(ps, name + ".o", c, c, rs, /*bias=*/true, 0.1);
  return a;
}

NodeP CrossAttention::operator()(Graph& g, NodeP x, NodeP tokens) const {
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  NodeP t = chw_to_tokens(g, norm(g, x));  // [HW, C]
  NodeP qm = q(g, t);                      // [HW, dk]
  NodeP km = k(g, tokens);                 // [n_tok, dk]
  NodeP vm = v(g, tokens);                 // [n_tok, C]
  NodeP att = softmax_rows(
      g, scale(g, matmul(g, qm, transpose2d(g, km)), 1.0 / std::sqrt(dk)));
  NodeP out = o(g, matmul(g, att, vm));
  return add(g, x, tokens_to_chw(g, out, c, h, w));
}

// ===== ResBlock ============================================================

ResBlock ResBlock::make(ParamStore& ps, const std::string& name, int cin,
                        int cout, int temb_dim, RandomStream& rs) {
  ResBlock r;
  r.n1 = GroupNorm::make(ps, name + ".n1", cin);
  r.c1 = Conv2d::make(ps, name + ".c1", cin, cout, 3, 1, 1, rs);
  if (temb_dim > 0) {
    r.t_proj = Linear::make(ps, name + ".temb", temb_dim, cout, rs);
    r.has_temb = true;
  }
  r.n2 = GroupNorm::make(ps, name + ".n2", cout);
  // second conv starts small so the block begins near identity
  r.c2 = Conv2d::make(ps, name + ".c2", cout, cout, 3, 1, 1, rs, true, 0.1);
  if (cin != cout)
    r.skip = Conv2d::make(ps, name + ".skip", cin, cout, 1, 1, 0, rs, false);
  return r;
}

NodeP ResBlock::operator()(Graph& g, NodeP x, NodeP temb) const {
  NodeP h = c1(g, silu(g, n1(g, x)));
  if (has_temb) {
    if (!temb) throw OdError::state("ResBlock built with temb but none given");
    h = add_channel_bias(g, h, t_proj(g, temb));
  }
  h = c2(g, silu(g, n2(g, h)));
  NodeP base = skip ? (*skip)(g, x) : x;
  return add(g, base, h);
}

// ===== Mlp2 ================================================================

Mlp2 Mlp2::make(ParamStore& ps, const std::string& name, int din, int dhidden,
                int dout, RandomStream& rs) {
  Mlp2 m;
  m.l1 = Linear::make(ps, name + ".l1", din, dhidden, rs);
  m.l2 = Linear::make(ps, name + ".l2", dhidden, dout, rs);
  return m;
}

NodeP Mlp2::operator()(Graph& g, NodeP x) const {
  return l2(g, silu(g, l1(g, x)));
}

// ===== sinusoidal embedding ================================================

Tensor sinusoidal_embedding(int t, int dim) {
  if (dim % 2 != 0) throw OdError::config("sinusoidal dim must be even");
  Tensor e({1, dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    e.data()[i] = std::sin(t * freq);
    e.data()[half + i] = std::cos(t * freq);
  }
  return e;
}

}  // namespace odgen::nn
