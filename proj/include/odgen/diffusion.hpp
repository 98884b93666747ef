#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

#include "odgen/flow_vae.hpp"

namespace odgen {

// ===== noise schedule =======================================================

// Variance schedule for the forward process.  Index convention: step t runs
// over [1, T]; alpha_bar(0) is exactly 1 so a final update step can land on a
// clean reconstruction.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // betas[t-1], t in [1, T]
  std::vector<double> alpha_bars;  // running products of (1 - beta)

  // Linearly spaced betas.  The endpoints 1e-4 and 0.02 hold at T = 1000 and
  // are rescaled by 1000/T otherwise so the terminal signal level stays
  // negligible for short schedules (values clamped to [1e-8, 0.999]).
  static NoiseSchedule linear(int T);

  double beta(int t) const;
  double alpha(int t) const;      // 1 - beta(t)
  double alpha_bar(int t) const;  // accepts t in [0, T]
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t in [1, T]
nn::Tensor forward_diffuse(const nn::Tensor& z0, int t, const nn::Tensor& eps,
                           const NoiseSchedule& sched);

// ===== permutation tokens ===================================================

// Learned per-slot embedding table of n_max rows.  A permutation of N regions
// selects rows map[0..N-1], and a shared two-layer projector lifts each to the
// conditioning width d_c.  Gradients reach only the selected rows.
class PermEmbedding {
 public:
  PermEmbedding(nn::ParamStore& ps, const ModelConfig& cfg, RandomStream& rs);

  nn::NodeP tokens(nn::Graph& g, const Permutation& p) const;  // [N, d_c]
  nn::Tensor tokens_value(const Permutation& p) const;

 private:
  nn::Param* table_ = nullptr;  // [n_max, d_e]
  nn::Mlp2 proj_;
  int n_max_ = 0;
};

// ===== denoiser =============================================================

// Epsilon predictor over latent maps.  The noisy latent and the regional
// condition are concatenated on channels, then run through an inverted U:
// two nearest-neighbour upsamplings to the widest grid, a mirrored pair of
// strided downsamplings with skip concatenation, and a residual block plus
// token cross-attention at every resolution.  A sinusoidal step embedding is
// injected into each residual block.  The output head starts at zero so a
// fresh model predicts exactly zero noise.
class PiNet {
 public:
  PiNet(nn::ParamStore& ps, const ModelConfig& cfg, RandomStream& rs);

  // z_t, z_c: [c_z, s, s] with matching shapes; tokens: [N, d_c]; t in [1, T]
  nn::NodeP operator()(nn::Graph& g, nn::NodeP z_t, nn::NodeP z_c,
                       nn::NodeP tokens, int t) const;

 private:
  ModelConfig cfg_;
  nn::Mlp2 t_mlp_;
  nn::Conv2d stem_, down1_, down2_, out_;
  nn::GroupNorm out_norm_;
  nn::ResBlock rb_s1_, rb_m1_, rb_w_, rb_m2_, rb_s2_;
  nn::CrossAttention xa_s1_, xa_m1_, xa_w_, xa_m2_, xa_s2_;
};

// ===== stage-3 bundle =======================================================

struct Stage3Model {
  ModelConfig config;
  nn::ParamStore params;  // denoiser + permutation-embedding parameters only
  std::unique_ptr<PermEmbedding> perm;
  std::unique_ptr<PiNet> pinet;
  NoiseSchedule sched;
  // Scalar standard deviation of stage-2 latent means over the training
  // split; latents are divided by it before diffusion and multiplied back
  // before decoding.  Zero until training has run.
  double latent_scale = 0.0;

  static Stage3Model build(const ModelConfig& cfg, uint64_t init_seed);

  Stage3Model() = default;
  Stage3Model(Stage3Model&&) = default;
  Stage3Model& operator=(Stage3Model&&) = default;
  Stage3Model(const Stage3Model&) = delete;
  Stage3Model& operator=(const Stage3Model&) = delete;
};

// ===== training losses ======================================================

// Both losses view the stage-2 model as frozen: encoder and condition outputs
// enter the graph as constants, and decoder weights (used by loss_pre) are
// expected to be non-trainable so gradients flow through them but not into
// them.  `p` reindexes the city before anything else sees it.

// || eps - eps_theta(z_t, cond, t) ||^2 averaged per cell
nn::NodeP loss_ldm_node(nn::Graph& g, const Stage2Model& s2,
                        const Stage3Model& s3, const CityBundle& city,
                        const Permutation& p, int t, const nn::Tensor& eps);

// One-step latent reconstruction decoded against the reindexed log flows:
// zhat0 = (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), decoded and compared
// to log M_p over the real N x N cells.
nn::NodeP loss_pre_node(nn::Graph& g, const Stage2Model& s2,
                        const Stage3Model& s3, const CityBundle& city,
                        const Permutation& p, int t, const nn::Tensor& eps);

struct Stage3Epoch {
  double total = 0.0;  // ldm + lambda_pre * pre
  double ldm = 0.0;
  double pre = 0.0;
  double val_ldm = 0.0;
};
using Stage3History = std::vector<Stage3Epoch>;

// Trains the denoiser and permutation embeddings against a frozen stage-2
// model (whose parameters are marked non-trainable here and never change).
// Resumable: pass the populated history and optimizer to continue.
void train_stage3(Stage2Model& s2, Stage3Model& s3, const Corpus& corpus,
                  const TrainConfig& cfg, nn::AdamW& opt,
                  Stage3History& history, std::ostream* log = nullptr);

// ===== sampling =============================================================

using DenoiseFn = std::function<nn::Tensor(const nn::Tensor& z_t, int t)>;

// Deterministic (eta = 0) DDIM over tau evenly spaced steps of a T-step
// schedule, starting from seeded Gaussian noise of the given dims.  Each step
// projects to zhat0 and re-noises to the next level; the final step targets
// level 0 and returns zhat0 itself.  With `literal` the per-step posterior
// mean update (z - (1-alpha_t)/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t) is
// applied instead.
nn::Tensor ddim_sample(const DenoiseFn& eps_fn, const NoiseSchedule& sched,
                       const std::vector<int>& dims, int tau_steps,
                       uint64_t seed, bool literal = false);

// Full conditional generation for a region arrangement: reindex by p, build
// the kernel condition and permutation tokens, run DDIM in latent space,
// decode with the stage-2 decoder, and map back to raw flows (clamped >= 0).
ODMatrix generate_od(const Stage2Model& s2, const Stage3Model& s3,
                     const FeatureMatrix& features, const RegionSet& regions,
                     const Permutation& p, int tau_steps, uint64_t seed,
                     bool literal = false);

}  // namespace odgen
