#include "odgen/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace odgen {

using nn::Graph;
using nn::NodeP;
using nn::Tensor;

// ===== noise schedule =======================================================

NoiseSchedule NoiseSchedule::linear(int T) {
  if (T < 2) throw OdError::config("schedule needs at least 2 steps");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(static_cast<size_t>(T));
  s.alpha_bars.resize(static_cast<size_t>(T));
  const double rescale = 1000.0 / T;
  const double b1 = 1e-4 * rescale;
  const double bT = 0.02 * rescale;
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = b1 + (bT - b1) * (t - 1) / (T - 1);
    b = std::clamp(b, 1e-8, 0.999);
    s.betas[static_cast<size_t>(t - 1)] = b;
    prod *= 1.0 - b;
    s.alpha_bars[static_cast<size_t>(t - 1)] = prod;
  }
  return s;
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > T) throw OdError::input("schedule step out of range");
  return betas[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > T) throw OdError::input("schedule step out of range");
  return alpha_bars[static_cast<size_t>(t - 1)];
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                       const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw OdError::input("diffusion step out of range");
  if (!z0.same_dims(eps))
    throw OdError::dimension("forward_diffuse: z0/eps shape mismatch");
  const double ab = sched.alpha_bar(t);
  Tensor zt = Tensor::zeros(z0.dims());
  zt.flat() = std::sqrt(ab) * z0.flat() + std::sqrt(1.0 - ab) * eps.flat();
  return zt;
}

// ===== permutation tokens ===================================================

PermEmbedding::PermEmbedding(nn::ParamStore& ps, const ModelConfig& cfg,
                             RandomStream& rs)
    : proj_(nn::Mlp2::make(ps, "perm.proj", cfg.d_e, cfg.d_c, cfg.d_c, rs)),
      n_max_(cfg.n_max) {
  table_ = &ps.create("perm.table", {cfg.n_max, cfg.d_e});
  nn::init_normal(table_->value, 1.0, rs);
}

NodeP PermEmbedding::tokens(Graph& g, const Permutation& p) const {
  p.validate();
  if (p.n() > n_max_)
    throw OdError::capacity("permutation exceeds the embedding table size");
  NodeP rows = nn::gather_rows(g, g.param(*table_), p.map);
  return proj_(g, rows);
}

Tensor PermEmbedding::tokens_value(const Permutation& p) const {
  Graph g;
  return tokens(g, p)->value.clone();
}

// ===== denoiser =============================================================

PiNet::PiNet(nn::ParamStore& ps, const ModelConfig& cfg, RandomStream& rs)
    : cfg_(cfg),
      t_mlp_(nn::Mlp2::make(ps, "pinet.temb", cfg.t_embed_dim, cfg.t_embed_dim,
                            cfg.t_embed_dim, rs)),
      stem_(nn::Conv2d::make(ps, "pinet.stem", 2 * cfg.latent_channels,
                             cfg.pinet_base, 3, 1, 1, rs)),
      down1_(nn::Conv2d::make(ps, "pinet.down1", cfg.pinet_base,
                              cfg.pinet_base, 3, 2, 1, rs)),
      down2_(nn::Conv2d::make(ps, "pinet.down2", cfg.pinet_base,
                              cfg.pinet_base, 3, 2, 1, rs)),
      // zero-initialized head: an untrained net predicts exactly zero noise
      out_(nn::Conv2d::make(ps, "pinet.out", cfg.pinet_base,
                            cfg.latent_channels, 3, 1, 1, rs, true, 0.0)),
      out_norm_(nn::GroupNorm::make(ps, "pinet.out_norm", cfg.pinet_base)),
      rb_s1_(nn::ResBlock::make(ps, "pinet.rb_s1", cfg.pinet_base,
                                cfg.pinet_base, cfg.t_embed_dim, rs)),
      rb_m1_(nn::ResBlock::make(ps, "pinet.rb_m1", cfg.pinet_base,
                                cfg.pinet_base, cfg.t_embed_dim, rs)),
      rb_w_(nn::ResBlock::make(ps, "pinet.rb_w", cfg.pinet_base,
                               cfg.pinet_base, cfg.t_embed_dim, rs)),
      rb_m2_(nn::ResBlock::make(ps, "pinet.rb_m2", 2 * cfg.pinet_base,
                                cfg.pinet_base, cfg.t_embed_dim, rs)),
      rb_s2_(nn::ResBlock::make(ps, "pinet.rb_s2", 2 * cfg.pinet_base,
                                cfg.pinet_base, cfg.t_embed_dim, rs)),
      xa_s1_(nn::CrossAttention::make(ps, "pinet.xa_s1", cfg.pinet_base,
                                      cfg.d_c, cfg.d_c, rs)),
      xa_m1_(nn::CrossAttention::make(ps, "pinet.xa_m1", cfg.pinet_base,
                                      cfg.d_c, cfg.d_c, rs)),
      xa_w_(nn::CrossAttention::make(ps, "pinet.xa_w", cfg.pinet_base,
                                     cfg.d_c, cfg.d_c, rs)),
      xa_m2_(nn::CrossAttention::make(ps, "pinet.xa_m2", cfg.pinet_base,
                                      cfg.d_c, cfg.d_c, rs)),
      xa_s2_(nn::CrossAttention::make(ps, "pinet.xa_s2", cfg.pinet_base,
                                      cfg.d_c, cfg.d_c, rs)) {}

NodeP PiNet::operator()(Graph& g, NodeP z_t, NodeP z_c, NodeP tokens,
                        int t) const {
  const Tensor& zv = z_t->value;
  if (zv.ndim() != 3 || zv.dim(0) != cfg_.latent_channels ||
      zv.dim(1) != zv.dim(2))
    throw OdError::dimension("denoiser expects a square [c_z, s, s] latent");
  if (!zv.same_dims(z_c->value))
    throw OdError::dimension("latent/condition shape mismatch");
  if (tokens->value.ndim() != 2 || tokens->value.dim(1) != cfg_.d_c ||
      tokens->value.dim(0) < 1)
    throw OdError::dimension("token sequence must be [N, d_c]");
  if (t < 1 || t > cfg_.T) throw OdError::input("diffusion step out of range");

  NodeP temb = t_mlp_(g, g.constant(nn::sinusoidal_embedding(t, cfg_.t_embed_dim)));
  NodeP h = stem_(g, nn::concat_channels(g, z_t, z_c));
  // up the inverted U: side s, 2s, 4s
  NodeP a = xa_s1_(g, rb_s1_(g, h, temb), tokens);
  NodeP b = xa_m1_(g, rb_m1_(g, nn::upsample_nearest2x(g, a), temb), tokens);
  NodeP c = xa_w_(g, rb_w_(g, nn::upsample_nearest2x(g, b), temb), tokens);
  // back down with skip concatenation at matching resolutions
  NodeP d = xa_m2_(
      g, rb_m2_(g, nn::concat_channels(g, down1_(g, c), b), temb), tokens);
  NodeP e = xa_s2_(
      g, rb_s2_(g, nn::concat_channels(g, down2_(g, d), a), temb), tokens);
  return out_(g, nn::silu(g, out_norm_(g, e)));
}

// ===== stage-3 bundle =======================================================

Stage3Model Stage3Model::build(const ModelConfig& cfg, uint64_t init_seed) {
  cfg.validate();
  Stage3Model m;
  m.config = cfg;
  RandomStream rs(RandomStream::derive(init_seed, "init-s3", 0));
  m.perm = std::make_unique<PermEmbedding>(m.params, cfg, rs);
  m.pinet = std::make_unique<PiNet>(m.params, cfg, rs);
  m.sched = NoiseSchedule::linear(cfg.T);
  return m;
}

// ===== training losses ======================================================

namespace {

Tensor log_flow_target(const ODMatrix& od) {
  ODMatrix lm = log_transform(od);
  const int n = lm.n();
  Tensor t = Tensor::zeros({1, n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) t.at3(0, i, j) = lm.values(i, j);
  return t;
}

struct VariantInputs {
  CityBundle city_p;
  Tensor z_t;  // already on the scaled latent
  Tensor z_c;
};

VariantInputs variant_inputs(const Stage2Model& s2, const Stage3Model& s3,
                             const CityBundle& city, const Permutation& p,
                             int t, const Tensor& eps) {
  if (s3.latent_scale <= 0.0)
    throw OdError::state("latent scale unset: train stage 3 first");
  VariantInputs v;
  v.city_p = permute_city(city, p);
  Tensor z0 = s2.vae->encode_mean(log_transform(v.city_p.od));
  z0.flat() /= s3.latent_scale;
  if (!z0.same_dims(eps))
    throw OdError::dimension("eps must match the latent shape");
  v.z_t = forward_diffuse(z0, t, eps, s3.sched);
  v.z_c = s2.vae->mk_condition(*s2.kernels, v.city_p);
  return v;
}

}  // namespace

NodeP loss_ldm_node(Graph& g, const Stage2Model& s2, const Stage3Model& s3,
                    const CityBundle& city, const Permutation& p, int t,
                    const Tensor& eps) {
  VariantInputs v = variant_inputs(s2, s3, city, p, t, eps);
  NodeP tok = s3.perm->tokens(g, p);
  NodeP eps_hat =
      (*s3.pinet)(g, g.constant(v.z_t), g.constant(v.z_c), tok, t);
  return nn::mse_vs(g, eps_hat, eps);
}

NodeP loss_pre_node(Graph& g, const Stage2Model& s2, const Stage3Model& s3,
                    const CityBundle& city, const Permutation& p, int t,
                    const Tensor& eps) {
  VariantInputs v = variant_inputs(s2, s3, city, p, t, eps);
  NodeP tok = s3.perm->tokens(g, p);
  NodeP zt = g.constant(v.z_t);
  NodeP eps_hat = (*s3.pinet)(g, zt, g.constant(v.z_c), tok, t);
  const double ab = s3.sched.alpha_bar(t);
  NodeP zhat0 = nn::scale(
      g, nn::sub(g, zt, nn::scale(g, eps_hat, std::sqrt(1.0 - ab))),
      1.0 / std::sqrt(ab));
  NodeP dec = s2.vae->decode(g, nn::scale(g, zhat0, s3.latent_scale),
                             v.city_p.n());
  return nn::mse_vs(g, dec, log_flow_target(v.city_p.od));
}

// ===== training loop ========================================================

namespace {

// RMS of stage-2 latent means over the training split; fixes the working
// scale of the diffusion space.
double latent_rms(const Stage2Model& s2, const Corpus& corpus,
                  const std::vector<int>& train) {
  double sum_sq = 0.0;
  int64_t count = 0;
  for (int idx : train) {
    Tensor z0 = s2.vae->encode_mean(log_transform(corpus.cities[static_cast<size_t>(idx)].od));
    sum_sq += (z0.flat() * z0.flat()).sum();
    count += z0.size();
  }
  if (count == 0) throw OdError::config("empty training split");
  double rms = std::sqrt(sum_sq / static_cast<double>(count));
  if (!(rms > 1e-12) || !std::isfinite(rms))
    throw OdError::state("degenerate stage-2 latents: cannot set scale");
  return rms;
}

// fixed probe: identity arrangement at three spread-out noise levels with
// epoch-independent noise, so validation values are comparable across epochs
double val_ldm_probe(const Stage2Model& s2, const Stage3Model& s3,
                     const Corpus& corpus, const std::vector<int>& val,
                     uint64_t seed) {
  const ModelConfig& mc = s3.config;
  const int probes[3] = {std::max(1, mc.T / 4), std::max(1, mc.T / 2),
                         std::max(1, (3 * mc.T) / 4)};
  double sum = 0.0;
  int count = 0;
  for (size_t k = 0; k < val.size(); ++k) {
    const CityBundle& city = corpus.cities[static_cast<size_t>(val[k])];
    const int ls = latent_side(city.n());
    for (int j = 0; j < 3; ++j) {
      RandomStream rs(RandomStream::derive(seed, "s3-val", k * 8 + static_cast<uint64_t>(j)));
      Tensor eps = Tensor::randn({mc.latent_channels, ls, ls}, rs);
      Graph g;
      NodeP l = loss_ldm_node(g, s2, s3, city, Permutation::identity(city.n()),
                              probes[j], eps);
      sum += l->scalar();
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

}  // namespace

void train_stage3(Stage2Model& s2, Stage3Model& s3, const Corpus& corpus,
                  const TrainConfig& cfg, nn::AdamW& opt,
                  Stage3History& history, std::ostream* log) {
  cfg.validate();
  if (corpus.cities.empty()) throw OdError::config("empty corpus");
  const ModelConfig& mc = s3.config;
  for (const auto& city : corpus.cities)
    if (city.n() > mc.n_max)
      throw OdError::capacity("corpus city exceeds the model's region capacity");

  // stage-2 weights are frozen from here on: gradients flow through the
  // decoder in the reconstruction term but never into it
  for (size_t i = 0; i < s2.params.size(); ++i) s2.params[i].trainable = false;

  std::vector<int> train = corpus.indices_of(Split::Train);
  std::vector<int> val = corpus.indices_of(Split::Val);
  if (train.empty()) throw OdError::config("empty training split");
  if (val.empty()) val = train;

  if (s3.latent_scale <= 0.0) {
    if (!history.empty())
      throw OdError::state("resume checkpoint lost its latent scale");
    s3.latent_scale = latent_rms(s2, corpus, train);
  }

  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  for (size_t e = 0; e < history.size(); ++e) {
    if (history[e].val_ldm < best_val) {
      best_val = history[e].val_ldm;
      best_epoch = static_cast<int>(e);
    }
  }

  for (int epoch = static_cast<int>(history.size()); epoch < cfg.max_epochs;
       ++epoch) {
    const uint64_t eseed = RandomStream::derive(cfg.seed, "s3-epoch",
                                                static_cast<uint64_t>(epoch));
    std::vector<int> order = train;
    {
      RandomStream shuffler(RandomStream::derive(eseed, "shuffle", 0));
      shuffler.shuffle(order);
    }

    double sum_ldm = 0.0, sum_pre = 0.0;
    int64_t n_seen = 0, n_pre = 0;

    size_t at = 0;
    while (at < order.size()) {
      size_t bsz = std::min<size_t>(static_cast<size_t>(cfg.batch_size),
                                    order.size() - at);
      if (order.size() - at - bsz == 1) bsz += 1;  // fold trailing singleton

      for (size_t k = 0; k < bsz; ++k) {
        const CityBundle& city =
            corpus.cities[static_cast<size_t>(order[at + k])];
        const int n = city.n();
        const int ls = latent_side(n);
        RandomStream ss(RandomStream::derive(eseed, "draw", at + k));

        Graph g;
        Permutation aug =
            permutation_random(n, mc.perm_aug_intensity, ss.next_u64());
        int t = static_cast<int>(ss.uniform_int(1, mc.T));
        Tensor eps = Tensor::randn({mc.latent_channels, ls, ls}, ss);
        NodeP ldm = loss_ldm_node(g, s2, s3, city, aug, t, eps);
        ldm->add_grad(1.0 / static_cast<double>(bsz));

        std::vector<NodeP> pres;
        if (mc.lambda_pre > 0.0) {
          for (int j = 0; j < mc.n_p; ++j) {
            Permutation pj = permutation_random(n, 1.0, ss.next_u64());
            int tj = static_cast<int>(ss.uniform_int(1, mc.T));
            Tensor ej = Tensor::randn({mc.latent_channels, ls, ls}, ss);
            NodeP pre = loss_pre_node(g, s2, s3, city, pj, tj, ej);
            pre->add_grad(mc.lambda_pre /
                          static_cast<double>(bsz * static_cast<size_t>(mc.n_p)));
            pres.push_back(pre);
          }
        }
        g.backward_seeded();

        sum_ldm += ldm->scalar();
        for (const NodeP& pre : pres) {
          sum_pre += pre->scalar();
          ++n_pre;
        }
        ++n_seen;
      }
      opt.step(s3.params, 1.0);
      at += bsz;
    }

    Stage3Epoch ep;
    ep.ldm = sum_ldm / static_cast<double>(n_seen);
    ep.pre = n_pre ? sum_pre / static_cast<double>(n_pre) : 0.0;
    ep.total = ep.ldm + mc.lambda_pre * ep.pre;
    ep.val_ldm = val_ldm_probe(s2, s3, corpus, val, cfg.seed);
    if (!std::isfinite(ep.total) || !std::isfinite(ep.val_ldm))
      throw OdError::state("stage-3 diverged at epoch " +
                           std::to_string(epoch));
    history.push_back(ep);

    if (log) {
      char line[160];
      std::snprintf(line, sizeof line,
                    "s3 epoch %4d total %.6f ldm %.6f pre %.6f val %.6f",
                    epoch, ep.total, ep.ldm, ep.pre, ep.val_ldm);
      *log << line << '\n';
    }

    if (ep.val_ldm < best_val) {
      best_val = ep.val_ldm;
      best_epoch = epoch;
    }
    if (epoch + 1 >= cfg.min_epochs && epoch - best_epoch >= cfg.patience)
      break;
  }
}

// ===== sampling =============================================================

Tensor ddim_sample(const DenoiseFn& eps_fn, const NoiseSchedule& sched,
                   const std::vector<int>& dims, int tau_steps, uint64_t seed,
                   bool literal) {
  if (tau_steps < 1 || tau_steps > sched.T)
    throw OdError::config("tau_steps must lie in [1, T]");
  Tensor z;
  {
    RandomStream rs(RandomStream::derive(seed, "ddim", 0));
    z = Tensor::randn(dims, rs);
  }
  const int dt = sched.T / tau_steps;
  std::vector<int> ts;
  for (int t = sched.T; t >= 1; t -= dt) ts.push_back(t);

  for (size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int tn = (k + 1 < ts.size()) ? ts[k + 1] : 0;
    Tensor e = eps_fn(z, t);
    if (!e.same_dims(z))
      throw OdError::dimension("denoiser output shape mismatch");
    if (!e.flat().isFinite().all())
      throw OdError::state("denoiser produced non-finite values");
    if (literal) {
      const double a = sched.alpha(t);
      const double ab = sched.alpha_bar(t);
      z.flat() =
          (z.flat() - ((1.0 - a) / std::sqrt(1.0 - ab)) * e.flat()) / std::sqrt(a);
      continue;
    }
    const double ab = sched.alpha_bar(t);
    Tensor zhat0 = Tensor::zeros(z.dims());
    zhat0.flat() = (z.flat() - std::sqrt(1.0 - ab) * e.flat()) / std::sqrt(ab);
    if (tn == 0) {
      z = std::move(zhat0);  // level 0 is the clean reconstruction itself
    } else {
      const double abn = sched.alpha_bar(tn);
      z.flat() = std::sqrt(abn) * zhat0.flat() + std::sqrt(1.0 - abn) * e.flat();
    }
  }
  return z;
}

ODMatrix generate_od(const Stage2Model& s2, const Stage3Model& s3,
                     const FeatureMatrix& features, const RegionSet& regions,
                     const Permutation& p, int tau_steps, uint64_t seed,
                     bool literal) {
  regions.validate();
  features.validate();
  p.validate();
  const int n = regions.n();
  if (features.n() != n || p.n() != n)
    throw OdError::dimension("regions, features, and permutation disagree on N");
  if (n < 2) throw OdError::input("generation needs at least 2 regions");
  if (n > s3.config.n_max)
    throw OdError::capacity("city exceeds the model's region capacity");
  if (s3.latent_scale <= 0.0)
    throw OdError::state("latent scale unset: train stage 3 first");

  RegionSet reg_p;
  reg_p.ids.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    reg_p.ids[static_cast<size_t>(i)] =
        regions.ids[static_cast<size_t>(p.map[static_cast<size_t>(i)])];
  reg_p.centroids = permute_rows(regions.centroids, p);
  FeatureMatrix feat_p{permute_rows(features.vectors, p)};

  Tensor z_c = s2.vae->mk_condition(*s2.kernels, feat_p, reg_p);
  Tensor tok = s3.perm->tokens_value(p);
  const int ls = latent_side(n);

  DenoiseFn eps_fn = [&](const Tensor& z_t, int t) {
    Graph g;
    return (*s3.pinet)(g, g.constant(z_t), g.constant(z_c), g.constant(tok), t)
        ->value.clone();
  };
  Tensor zhat0 = ddim_sample(eps_fn, s3.sched,
                             {s3.config.latent_channels, ls, ls}, tau_steps,
                             seed, literal);
  zhat0.flat() *= s3.latent_scale;
  ODMatrix log_od = s2.vae->decode_to_log(zhat0, n);
  ODMatrix raw = log_inverse(log_od);
  raw.values.diagonal().setZero();  // self-flows are zero by convention
  return raw;
}

}  // namespace odgen
