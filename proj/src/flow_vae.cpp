#include "odgen/flow_vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <utility>

namespace odgen {

using nn::Graph;
using nn::NodeP;
using nn::Tensor;

// ===== encoder =============================================================

ConvEncoder::ConvEncoder(nn::ParamStore& ps, const std::string& prefix,
                         int in_channels, const ModelConfig& cfg,
                         RandomStream& rs) {
  stem_ = nn::Conv2d::make(ps, prefix + ".stem", in_channels, cfg.enc_c1, 3, 1, 1, rs);
  norm1_ = nn::GroupNorm::make(ps, prefix + ".n1", cfg.enc_c1);
  down1_ = nn::Conv2d::make(ps, prefix + ".down1", cfg.enc_c1, cfg.enc_c2, 3, 2, 1, rs);
  norm2_ = nn::GroupNorm::make(ps, prefix + ".n2", cfg.enc_c2);
  down2_ = nn::Conv2d::make(ps, prefix + ".down2", cfg.enc_c2, cfg.enc_c3, 3, 2, 1, rs);
  norm3_ = nn::GroupNorm::make(ps, prefix + ".n3", cfg.enc_c3);
  attn_ = nn::SelfAttention::make(ps, prefix + ".attn", cfg.enc_c3, rs);
}

NodeP ConvEncoder::operator()(Graph& g, NodeP x) const {
  if (x->value.ndim() != 3 || x->value.dim(1) != x->value.dim(2))
    throw OdError::dimension("encoder expects a square [C,S,S] input");
  if (x->value.dim(1) % ModelConfig::downsample != 0)
    throw OdError::dimension("encoder input side must be a multiple of 4");
  NodeP h = nn::silu(g, norm1_(g, stem_(g, x)));
  h = nn::silu(g, norm2_(g, down1_(g, h)));
  h = nn::silu(g, norm3_(g, down2_(g, h)));
  return attn_(g, h);
}

// ===== vae =================================================================

FlowVae::FlowVae(nn::ParamStore& ps, const ModelConfig& cfg, RandomStream& rs)
    : cfg_(cfg),
      flow_enc_(ps, "vae.flow_enc", 1, cfg, rs),
      mk_enc_(ps, "vae.mk_enc", cfg.n_kernels + 1, cfg, rs) {
  cfg_.validate();
  const int cz = cfg.latent_channels;
  head_mu_ = nn::Conv2d::make(ps, "vae.head_mu", cfg.enc_c3, cz, 3, 1, 1, rs);
  head_logvar_ = nn::Conv2d::make(ps, "vae.head_logvar", cfg.enc_c3, cz, 3, 1, 1, rs);
  head_zc_ = nn::Conv2d::make(ps, "vae.head_zc", cfg.enc_c3, cz, 3, 1, 1, rs);

  dec_in_ = nn::Conv2d::make(ps, "vae.dec.in", cz, cfg.enc_c3, 3, 1, 1, rs);
  dec_n0_ = nn::GroupNorm::make(ps, "vae.dec.n0", cfg.enc_c3);
  dec_attn_ = nn::SelfAttention::make(ps, "vae.dec.attn", cfg.enc_c3, rs);
  dec_up1_ = nn::Conv2d::make(ps, "vae.dec.up1", cfg.enc_c3, cfg.enc_c2, 3, 1, 1, rs);
  dec_n1_ = nn::GroupNorm::make(ps, "vae.dec.n1", cfg.enc_c2);
  dec_up2_ = nn::Conv2d::make(ps, "vae.dec.up2", cfg.enc_c2, cfg.enc_c1, 3, 1, 1, rs);
  dec_n2_ = nn::GroupNorm::make(ps, "vae.dec.n2", cfg.enc_c1);
  dec_out_ = nn::Conv2d::make(ps, "vae.dec.out", cfg.enc_c1, 1, 3, 1, 1, rs);

  proj_flow_ = nn::Linear::make(ps, "vae.proj_flow", cz, cfg.proj_dim, rs);
  proj_mk_ = nn::Linear::make(ps, "vae.proj_mk", cz, cfg.proj_dim, rs);
}

Tensor FlowVae::pad_flow_input(const ODMatrix& log_m) {
  if (log_m.scale != Scale::Log1p)
    throw OdError::state("flow input must be log-scaled");
  log_m.validate();
  const int n = log_m.n();
  const int s = padded_side(n);
  Tensor t = Tensor::zeros({1, s, s});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) t.at3(0, i, j) = log_m.values(i, j);
  return t;
}

Tensor FlowVae::mask_padding(Tensor x, int n_real) {
  if (x.ndim() != 3 || x.dim(1) != x.dim(2))
    throw OdError::dimension("mask_padding expects [C,S,S]");
  if (n_real < 1 || n_real > x.dim(1))
    throw OdError::dimension("mask_padding: n_real out of range");
  Tensor out = x.clone();
  const int side = out.dim(1);
  for (int c = 0; c < out.dim(0); ++c)
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j)
        if (i >= n_real || j >= n_real) out.at3(c, i, j) = 0.0;
  return out;
}

FlowVae::Posterior FlowVae::flow_encode(Graph& g, const Tensor& x,
                                        int n_real) const {
  if (x.ndim() != 3 || x.dim(0) != 1 || x.dim(1) != x.dim(2))
    throw OdError::dimension("flow_encode expects [1,S,S]");
  if (x.dim(1) != padded_side(n_real))
    throw OdError::dimension("flow_encode: padded side does not match n_real");
  if (!x.flat().allFinite())
    throw OdError::input("flow_encode: non-finite input");
  NodeP in = g.constant(mask_padding(x, n_real));
  NodeP h = flow_enc_(g, in);
  Posterior p;
  p.mu = head_mu_(g, h);
  // smooth squash keeps logvar in (-6, 2) so sigma can neither explode nor
  // underflow during training
  NodeP raw = head_logvar_(g, h);
  p.logvar = nn::add_scalar(g, nn::scale(g, nn::tanh_op(g, nn::scale(g, raw, 0.25)), 4.0), -2.0);
  return p;
}

FlowVae::Posterior FlowVae::flow_encode(Graph& g, const ODMatrix& log_m) const {
  return flow_encode(g, pad_flow_input(log_m), log_m.n());
}

NodeP FlowVae::mk_encode(Graph& g, const Tensor& mk, int n_real) const {
  if (mk.ndim() != 3 || mk.dim(1) != mk.dim(2))
    throw OdError::dimension("mk_encode expects [L+1,S,S]");
  if (mk.dim(0) != cfg_.n_kernels + 1)
    throw OdError::config("mk_encode: channel count does not match n_kernels");
  if (mk.dim(1) != padded_side(n_real))
    throw OdError::dimension("mk_encode: padded side does not match n_real");
  if (!mk.flat().allFinite())
    throw OdError::input("mk_encode: non-finite input");
  NodeP in = g.constant(mask_padding(mk, n_real));
  return head_zc_(g, mk_enc_(g, in));
}

NodeP FlowVae::decode(Graph& g, NodeP z, int target_n) const {
  if (target_n < 1) throw OdError::dimension("decode: target_n must be >= 1");
  if (z->value.ndim() != 3 || z->value.dim(0) != cfg_.latent_channels ||
      z->value.dim(1) != z->value.dim(2) ||
      z->value.dim(1) != latent_side(target_n))
    throw OdError::dimension("decode: latent shape does not match target_n");
  NodeP h = nn::silu(g, dec_n0_(g, dec_in_(g, z)));
  h = dec_attn_(g, h);
  h = nn::upsample_nearest2x(g, h);
  h = nn::silu(g, dec_n1_(g, dec_up1_(g, h)));
  h = nn::upsample_nearest2x(g, h);
  h = nn::silu(g, dec_n2_(g, dec_up2_(g, h)));
  h = dec_out_(g, h);
  return nn::crop2d(g, h, target_n, target_n);
}

NodeP FlowVae::project_flow(Graph& g, NodeP latent) const {
  return nn::rows_l2_normalize(g, proj_flow_(g, nn::global_avg_pool(g, latent)));
}

NodeP FlowVae::project_mk(Graph& g, NodeP latent) const {
  return nn::rows_l2_normalize(g, proj_mk_(g, nn::global_avg_pool(g, latent)));
}

Tensor FlowVae::encode_mean(const ODMatrix& log_m) const {
  Graph g;
  return flow_encode(g, log_m).mu->value.clone();
}

ODMatrix FlowVae::decode_to_log(const Tensor& z, int target_n) const {
  Graph g;
  NodeP out = decode(g, g.constant(z), target_n);
  ODMatrix m;
  m.values = out->value.reshaped({target_n, target_n}).to_matrix();
  m.scale = Scale::Log1p;
  return m;
}

NodeP FlowVae::mk_condition_node(Graph& g, const KernelMaps& kernels,
                                 const FeatureMatrix& features,
                                 const RegionSet& regions) const {
  const int n = regions.n();
  NodeP feats = g.constant(Tensor::from_matrix(features.vectors));
  NodeP mk = kernels.mk_tensor_node(g, feats, regions);
  const int s = padded_side(n);
  NodeP padded = (s == n) ? mk : nn::pad2d(g, mk, s, s);
  return head_zc_(g, mk_enc_(g, padded));
}

NodeP FlowVae::mk_condition_node(Graph& g, const KernelMaps& kernels,
                                 const CityBundle& city) const {
  return mk_condition_node(g, kernels, city.features, city.regions);
}

Tensor FlowVae::mk_condition(const KernelMaps& kernels,
                             const FeatureMatrix& features,
                             const RegionSet& regions) const {
  Graph g;
  return mk_condition_node(g, kernels, features, regions)->value.clone();
}

Tensor FlowVae::mk_condition(const KernelMaps& kernels,
                             const CityBundle& city) const {
  return mk_condition(kernels, city.features, city.regions);
}

// ===== posterior sampling and losses =======================================

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, uint64_t seed) {
  if (!mu.same_dims(logvar))
    throw OdError::dimension("reparameterize: mu/logvar shape mismatch");
  RandomStream rs(seed);
  Tensor eps = Tensor::randn(mu.dims(), rs);
  Tensor z = Tensor::zeros(mu.dims());
  z.flat() = mu.flat() + (0.5 * logvar.flat()).exp() * eps.flat();
  return z;
}

NodeP reparameterize_node(Graph& g, NodeP mu, NodeP logvar, const Tensor& eps) {
  if (!mu->value.same_dims(logvar->value) || !mu->value.same_dims(eps))
    throw OdError::dimension("reparameterize: mu/logvar/eps shape mismatch");
  NodeP sigma = nn::exp_op(g, nn::scale(g, logvar, 0.5));
  return nn::add(g, mu, nn::mul(g, sigma, g.constant(eps)));
}

NodeP loss_kl_node(Graph& g, NodeP mu, NodeP logvar) {
  // 0.5 * mean(mu^2 + sigma^2 - 1 - log sigma^2), elementwise over the latent
  NodeP t = nn::add(g, nn::square(g, mu), nn::exp_op(g, logvar));
  t = nn::add(g, t, nn::add_scalar(g, nn::scale(g, logvar, -1.0), -1.0));
  return nn::scale(g, nn::mean_all(g, t), 0.5);
}

double loss_kl(const Tensor& mu, const Tensor& logvar) {
  if (!mu.same_dims(logvar))
    throw OdError::dimension("loss_kl: mu/logvar shape mismatch");
  return 0.5 * (mu.flat().square() + logvar.flat().exp() - 1.0 - logvar.flat()).mean();
}

NodeP loss_contrastive_node(Graph& g, NodeP zs, NodeP zcs, double tau_temp) {
  if (tau_temp <= 0.0) throw OdError::config("contrastive: tau must be > 0");
  const Tensor& a = zs->value;
  const Tensor& b = zcs->value;
  if (a.ndim() != 2 || !a.same_dims(b))
    throw OdError::dimension("contrastive: expected matching [B,D] inputs");
  if (a.dim(0) < 2)
    throw OdError::config("contrastive: needs a batch of at least 2");
  NodeP sim = nn::scale(g, nn::matmul(g, zs, nn::transpose2d(g, zcs)), 1.0 / tau_temp);
  // flow->kernel and kernel->flow matching directions, averaged
  NodeP l1 = nn::scale(g, nn::mean_all(g, nn::log_op(g, nn::diag2d(g, nn::softmax_rows(g, sim)))), -1.0);
  NodeP l2 = nn::scale(g, nn::mean_all(g, nn::log_op(g, nn::diag2d(g, nn::softmax_rows(g, nn::transpose2d(g, sim))))), -1.0);
  return nn::scale(g, nn::add(g, l1, l2), 0.5);
}

double loss_contrastive(const Eigen::MatrixXd& zs, const Eigen::MatrixXd& zcs,
                        double tau_temp) {
  Graph g;
  NodeP a = g.constant(Tensor::from_matrix(zs));
  NodeP b = g.constant(Tensor::from_matrix(zcs));
  return loss_contrastive_node(g, a, b, tau_temp)->scalar();
}

// ===== stage-2 bundle and training =========================================

Stage2Model Stage2Model::build(const ModelConfig& cfg, uint64_t init_seed) {
  cfg.validate();
  Stage2Model m;
  m.config = cfg;
  RandomStream rs(RandomStream::derive(init_seed, "init-s2", 0));
  m.kernels = std::make_unique<KernelMaps>(m.params, "kernels", cfg.feat_dim,
                                           cfg.n_kernels, cfg.kernel_dim, rs);
  m.vae = std::make_unique<FlowVae>(m.params, cfg, rs);
  return m;
}

namespace {

Tensor log_target(const ODMatrix& log_m) {
  const int n = log_m.n();
  return Tensor::from_matrix(log_m.values).reshaped({1, n, n});
}

double validation_recon(const Stage2Model& model, const Corpus& corpus,
                        const std::vector<int>& val_idx) {
  double total = 0.0;
  for (int vi : val_idx) {
    const CityBundle& city = corpus.cities[static_cast<size_t>(vi)];
    ODMatrix logm = log_transform(city.od);
    Graph g;
    auto post = model.vae->flow_encode(g, logm);
    NodeP dec = model.vae->decode(g, post.mu, city.n());
    total += nn::mse_vs(g, dec, log_target(logm))->scalar();
  }
  return total / static_cast<double>(val_idx.size());
}

}  // namespace

void train_stage2(Stage2Model& model, const Corpus& corpus,
                  const TrainConfig& cfg, nn::AdamW& opt,
                  Stage2History& history, std::ostream* log) {
  model.config.validate();
  cfg.validate();
  const ModelConfig& mc = model.config;

  std::vector<int> train_idx = corpus.indices_of(Split::Train);
  std::vector<int> val_idx = corpus.indices_of(Split::Val);
  if (train_idx.empty()) throw OdError::state("stage-2: empty training split");

  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  // resume support: history length is the next epoch index
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < history.size(); ++i) {
    if (history[i].val_recon < best_val) {
      best_val = history[i].val_recon;
      best_epoch = static_cast<int>(i);
    }
  }

  for (int epoch = static_cast<int>(history.size()); epoch < cfg.max_epochs;
       ++epoch) {
    const uint64_t eseed =
        RandomStream::derive(cfg.seed, "s2-epoch", static_cast<uint64_t>(epoch));
    RandomStream order_rs(eseed);
    std::vector<int> order = train_idx;
    order_rs.shuffle(order);

    // fixed-size batches; a trailing singleton joins the previous batch so
    // every batch can form contrastive pairs
    std::vector<std::pair<size_t, size_t>> batches;
    for (size_t at = 0; at < order.size();
         at += static_cast<size_t>(cfg.batch_size))
      batches.emplace_back(at, std::min(static_cast<size_t>(cfg.batch_size),
                                        order.size() - at));
    if (batches.size() > 1 && batches.back().second == 1) {
      batches.pop_back();
      batches.back().second += 1;
    }

    double sum_recon = 0.0, sum_kl = 0.0, sum_con = 0.0;
    size_t n_seen = 0, n_con = 0;

    for (const auto& [at, bsz] : batches) {
      struct SampleTerms {
        Graph g;
        NodeP recon, kl, u, v;
      };
      std::vector<SampleTerms> batch(bsz);

      for (size_t k = 0; k < bsz; ++k) {
        const CityBundle& city =
            corpus.cities[static_cast<size_t>(order[at + k])];
        SampleTerms& s = batch[k];
        ODMatrix logm = log_transform(city.od);
        auto post = model.vae->flow_encode(s.g, logm);
        RandomStream eps_rs(RandomStream::derive(eseed, "eps", at + k));
        Tensor eps = Tensor::randn(post.mu->value.dims(), eps_rs);
        NodeP z = reparameterize_node(s.g, post.mu, post.logvar, eps);
        NodeP dec = model.vae->decode(s.g, z, city.n());
        s.recon = nn::mse_vs(s.g, dec, log_target(logm));
        s.kl = loss_kl_node(s.g, post.mu, post.logvar);
        if (mc.alpha > 0.0) {
          NodeP zc = model.vae->mk_condition_node(s.g, *model.kernels, city);
          s.u = model.vae->project_flow(s.g, post.mu);
          s.v = model.vae->project_mk(s.g, zc);
        }
      }

      // The contrastive term couples samples, so it runs as a second pass: a
      // small graph over the pooled vectors produces the loss and its
      // gradient rows, which then seed each per-sample tape.
      const bool with_con = mc.alpha > 0.0 && bsz >= 2;
      double lc = 0.0;
      Eigen::MatrixXd du, dv;
      if (with_con) {
        Eigen::MatrixXd u_rows(bsz, mc.proj_dim), v_rows(bsz, mc.proj_dim);
        for (size_t k = 0; k < bsz; ++k) {
          u_rows.row(static_cast<Eigen::Index>(k)) = batch[k].u->value.matrix().row(0);
          v_rows.row(static_cast<Eigen::Index>(k)) = batch[k].v->value.matrix().row(0);
        }
        Graph cg;
        NodeP un = cg.input(Tensor::from_matrix(u_rows));
        NodeP vn = cg.input(Tensor::from_matrix(v_rows));
        NodeP ln = loss_contrastive_node(cg, un, vn, mc.tau_temp);
        lc = ln->scalar();
        cg.backward(ln);
        du = un->grad.matrix();
        dv = vn->grad.matrix();
      }

      const double inv_b = 1.0 / static_cast<double>(bsz);
      for (size_t k = 0; k < bsz; ++k) {
        SampleTerms& s = batch[k];
        s.recon->add_grad(inv_b);
        s.kl->add_grad(mc.beta * inv_b);
        if (with_con) {
          const Eigen::Index r = static_cast<Eigen::Index>(k);
          s.u->add_grad(Tensor::from_matrix(mc.alpha * du.row(r)));
          s.v->add_grad(Tensor::from_matrix(mc.alpha * dv.row(r)));
        }
        s.g.backward_seeded();
        sum_recon += s.recon->scalar();
        sum_kl += s.kl->scalar();
      }
      opt.step(model.params, 1.0);
      n_seen += bsz;
      if (with_con) {
        sum_con += lc;
        n_con += 1;
      }
    }

    Stage2Epoch e;
    e.recon = sum_recon / static_cast<double>(n_seen);
    e.kl = sum_kl / static_cast<double>(n_seen);
    e.contrastive = n_con ? sum_con / static_cast<double>(n_con) : 0.0;
    e.total = e.recon + mc.alpha * e.contrastive + mc.beta * e.kl;
    e.val_recon =
        val_idx.empty() ? e.recon : validation_recon(model, corpus, val_idx);

    if (!std::isfinite(e.total) || !std::isfinite(e.val_recon))
      throw OdError::state("stage-2 diverged at epoch " + std::to_string(epoch));

    history.push_back(e);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "s2 epoch %4d  total %.6f  recon %.6f  con %.6f  kl %.6f  val %.6f",
                    epoch, e.total, e.recon, e.contrastive, e.kl, e.val_recon);
      *log << line << '\n';
    }

    if (e.val_recon < best_val) {
      best_val = e.val_recon;
      best_epoch = epoch;
    }
    if (epoch + 1 >= cfg.min_epochs && epoch - best_epoch >= cfg.patience)
      break;
  }
}

}  // namespace odgen
