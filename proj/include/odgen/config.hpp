#pragma once

#include <cstdint>

#include "odgen/common.hpp"

namespace odgen {

// Model hyperparameters shared by the kernel maps, the VAE and the
// diffusion stage.  Values are the artifact defaults; everything can be
// overridden from the CLI and is recorded inside checkpoints.
struct ModelConfig {
  // multi-kernel encoding
  int feat_dim = 32;  // region feature width the kernel maps consume
  int n_kernels = 8;
  int kernel_dim = 64;

  // VAE encoder/decoder (stem + two stride-2 stages, so f = 4)
  int enc_c1 = 32;
  int enc_c2 = 64;
  int enc_c3 = 128;
  int latent_channels = 4;  // c_z
  int proj_dim = 128;       // contrastive projection width

  // stage-2 loss weights
  double alpha = 0.1;    // contrastive
  double beta = 1e-3;    // KL
  double tau_temp = 0.07;

  // diffusion
  int T = 1000;
  double lambda_pre = 0.1;
  int n_p = 2;
  int d_e = 32;   // permutation embedding width
  int d_c = 64;   // permutation token width
  int n_max = 64;
  int pinet_base = 64;
  int t_embed_dim = 128;
  double perm_aug_intensity = 0.5;

  static constexpr int downsample = 4;

  void validate() const {
    if (feat_dim < 1 || n_kernels < 1 || kernel_dim < 1)
      throw OdError::config("kernel config out of range");
    if (enc_c1 < 1 || enc_c2 < 1 || enc_c3 < 1 || latent_channels < 1 ||
        proj_dim < 1)
      throw OdError::config("encoder channel config out of range");
    if (alpha < 0.0 || beta < 0.0 || tau_temp <= 0.0)
      throw OdError::config("loss weights out of range (need alpha,beta ≥ 0, tau > 0)");
    if (T < 2) throw OdError::config("diffusion needs T ≥ 2");
    if (lambda_pre < 0.0 || n_p < 1)
      throw OdError::config("equivariance loss config out of range");
    if (d_e < 1 || d_c < 1 || n_max < 2 || pinet_base < 1)
      throw OdError::config("denoiser config out of range");
    if (t_embed_dim < 2 || t_embed_dim % 2 != 0)
      throw OdError::config("t_embed_dim must be even and ≥ 2");
    if (perm_aug_intensity < 0.0 || perm_aug_intensity > 1.0)
      throw OdError::config("perm_aug_intensity must lie in [0,1]");
  }
};

struct TrainConfig {
  int max_epochs = 1000;
  int min_epochs = 0;   // epochs before early stopping may trigger
  int patience = 50;    // early-stop patience on validation reconstruction
  int batch_size = 12;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  uint64_t seed = 0;

  void validate() const {
    if (max_epochs < 1) throw OdError::config("max_epochs must be ≥ 1");
    if (batch_size < 2)
      throw OdError::config("batch_size must be ≥ 2 (contrastive pairs)");
    if (lr <= 0.0) throw OdError::config("lr must be > 0");
    if (weight_decay < 0.0) throw OdError::config("weight_decay must be ≥ 0");
    if (patience < 1) throw OdError::config("patience must be ≥ 1");
    if (min_epochs < 0 || min_epochs > max_epochs)
      throw OdError::config("min_epochs out of range");
  }
};

// Spatial sizes produced by the f = 4 encoder for a city of n regions.  The
// latent side is floored at 2: a 1x1 latent would leave the group norms with
// single-value statistics, erasing the latent entirely for very small cities.
inline int latent_side(int n) { return n <= 4 ? 2 : (n + 3) / 4; }
inline int padded_side(int n) { return 4 * latent_side(n); }

}  // namespace odgen
