#pragma once

#include <memory>
#include <ostream>

#include "odgen/config.hpp"
#include "odgen/multikernel.hpp"
#include "odgen/synthetic.hpp"

namespace odgen {

// Convolutional encoder shared (as an architecture) by the flow and
// multi-kernel paths: stem conv, two stride-2 stages, self-attention at the
// bottleneck.  Input side must be a multiple of 4; output is
// [enc_c3, side/4, side/4].
class ConvEncoder {
 public:
  ConvEncoder(nn::ParamStore& ps, const std::string& prefix, int in_channels,
              const ModelConfig& cfg, RandomStream& rs);
  nn::NodeP operator()(nn::Graph& g, nn::NodeP x) const;

 private:
  nn::Conv2d stem_, down1_, down2_;
  nn::GroupNorm norm1_, norm2_, norm3_;
  nn::SelfAttention attn_;
};

// Stage-2 model: Flow Encoder (posterior over spatial latents), symmetric
// decoder, MK Encoder producing the kernel condition z_c, and the two
// contrastive projection heads.
class FlowVae {
 public:
  FlowVae(nn::ParamStore& ps, const ModelConfig& cfg, RandomStream& rs);

  const ModelConfig& config() const { return cfg_; }

  // [1, S, S] input tensor for a log-scale matrix, zero-padded to S = padded_side(n)
  static nn::Tensor pad_flow_input(const ODMatrix& log_m);
  // zero every cell outside the leading n_real×n_real block of each channel
  static nn::Tensor mask_padding(nn::Tensor x, int n_real);

  struct Posterior {
    nn::NodeP mu;      // [c_z, s, s]
    nn::NodeP logvar;  // bounded to (−6, 2) by a smooth squash
  };

  // x is a padded [1,S,S] tensor; cells beyond n_real are forced to zero
  // before the stack runs, so junk in the padding cannot reach any output
  Posterior flow_encode(nn::Graph& g, const nn::Tensor& x, int n_real) const;
  Posterior flow_encode(nn::Graph& g, const ODMatrix& log_m) const;

  // mk is a padded [L+1,S,S] tensor; same masking contract as flow_encode
  nn::NodeP mk_encode(nn::Graph& g, const nn::Tensor& mk, int n_real) const;

  // z: [c_z, s, s] with s = latent_side(target_n); output [1, target_n, target_n]
  nn::NodeP decode(nn::Graph& g, nn::NodeP z, int target_n) const;

  // pooled, unit-normalized contrastive vectors [1, proj_dim]
  nn::NodeP project_flow(nn::Graph& g, nn::NodeP latent) const;
  nn::NodeP project_mk(nn::Graph& g, nn::NodeP latent) const;

  // ----- value-level helpers (fresh graph per call, no gradients) ----------
  nn::Tensor encode_mean(const ODMatrix& log_m) const;
  ODMatrix decode_to_log(const nn::Tensor& z, int target_n) const;
  // z_c for a city: kernel tensor -> padded -> MK encoder
  nn::Tensor mk_condition(const KernelMaps& kernels, const CityBundle& city) const;
  nn::Tensor mk_condition(const KernelMaps& kernels, const FeatureMatrix& features,
                          const RegionSet& regions) const;
  nn::NodeP mk_condition_node(nn::Graph& g, const KernelMaps& kernels,
                              const FeatureMatrix& features,
                              const RegionSet& regions) const;
  nn::NodeP mk_condition_node(nn::Graph& g, const KernelMaps& kernels,
                              const CityBundle& city) const;

 private:
  ModelConfig cfg_;
  ConvEncoder flow_enc_, mk_enc_;
  nn::Conv2d head_mu_, head_logvar_, head_zc_;
  nn::Conv2d dec_in_, dec_up1_, dec_up2_, dec_out_;
  nn::GroupNorm dec_n0_, dec_n1_, dec_n2_;
  nn::SelfAttention dec_attn_;
  nn::Linear proj_flow_, proj_mk_;
};

// z = mu + exp(logvar/2)·eps
nn::Tensor reparameterize(const nn::Tensor& mu, const nn::Tensor& logvar,
                          uint64_t seed);
nn::NodeP reparameterize_node(nn::Graph& g, nn::NodeP mu, nn::NodeP logvar,
                              const nn::Tensor& eps);

// mean over latent cells of 0.5(μ² + σ² − 1 − log σ²)
nn::NodeP loss_kl_node(nn::Graph& g, nn::NodeP mu, nn::NodeP logvar);
double loss_kl(const nn::Tensor& mu, const nn::Tensor& logvar);

// Symmetric InfoNCE over both matching directions; rows of zs/zcs must be
// unit vectors.  Requires batch ≥ 2.
nn::NodeP loss_contrastive_node(nn::Graph& g, nn::NodeP zs, nn::NodeP zcs,
                                double tau_temp);
double loss_contrastive(const Eigen::MatrixXd& zs, const Eigen::MatrixXd& zcs,
                        double tau_temp);

// ===== stage-2 bundle and training =========================================

// Owns the parameter store and both stage-2 submodels.
struct Stage2Model {
  ModelConfig config;
  nn::ParamStore params;
  std::unique_ptr<KernelMaps> kernels;
  std::unique_ptr<FlowVae> vae;

  static Stage2Model build(const ModelConfig& cfg, uint64_t init_seed);

  Stage2Model() = default;
  Stage2Model(Stage2Model&&) = default;
  Stage2Model& operator=(Stage2Model&&) = default;
};

struct Stage2Epoch {
  double total = 0.0;
  double recon = 0.0;
  double contrastive = 0.0;
  double kl = 0.0;
  double val_recon = 0.0;
};
using Stage2History = std::vector<Stage2Epoch>;

// Joint training of VAE + MK encoder + kernel maps.  Appends one entry per
// completed epoch to `history` (whose current size is the starting epoch, so
// a resumed run continues the same deterministic schedule).  Early-stops on
// validation reconstruction.  Throws a state error if the loss turns
// non-finite.
void train_stage2(Stage2Model& model, const Corpus& corpus,
                  const TrainConfig& cfg, nn::AdamW& opt,
                  Stage2History& history, std::ostream* log = nullptr);

}  // namespace odgen
