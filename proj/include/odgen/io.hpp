#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "odgen/diffusion.hpp"
#include "odgen/flow_vae.hpp"
#include "odgen/synthetic.hpp"

namespace odgen {

// On-disk formats: text matrices and JSON manifests for corpora (diffable,
// language-agnostic), a versioned binary blob plus JSON sidecar for
// checkpoints (size).  All writes that must not be observed half-done go
// through a temp file in the same directory followed by a rename.

// ===== text matrices =====

// Comma-separated, row-major, no header, '.' decimal, %.17g so values
// round-trip exactly.
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

// Whole-file text helpers; writes go temp-then-rename.
std::string read_text_file(const std::filesystem::path& path);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// ===== experiment configuration =====

// Everything a run needs, serialized alongside every checkpoint.
struct ExperimentConfig {
  uint64_t seed = 0;
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train_vae;
  TrainConfig train_diff;

  void validate() const;
};

// Canonical (key-sorted, shortest-round-trip numbers) JSON form; parsing
// accepts missing keys and fills defaults so partial files stay usable.
std::string experiment_to_json(const ExperimentConfig& ec);
ExperimentConfig experiment_from_json(const std::string& text);

// FNV-1a over the canonical JSON with the run-length knobs (max_epochs)
// zeroed: growing a run does not change its identity, any other change does.
uint64_t config_hash(const ExperimentConfig& ec);

// ===== corpus directory =====

// Layout: <dir>/corpus.json plus one subdirectory per city holding
// manifest.json, features.csv, centroids.csv and od.csv.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus,
                  bool force = false);

// Reads the layout above.  A directory without corpus.json is accepted when
// its subdirectories carry manifests (external imports); cities then load in
// sorted subdirectory order.
Corpus read_corpus(const std::filesystem::path& dir);

// ===== checkpoints =====

struct ParamBlob {
  std::string name;
  std::vector<int> dims;
  std::vector<double> value;
  std::vector<double> adam_m;  // empty until the optimizer has run
  std::vector<double> adam_v;
};

struct Checkpoint {
  int stage = 2;  // 2 or 3
  ExperimentConfig config;
  int64_t adam_t = 0;
  double latent_scale = 0.0;     // stage 3 only
  Stage2History history2;        // stage 2 only
  Stage3History history3;        // stage 3 only
  std::vector<ParamBlob> s2_params;
  std::vector<ParamBlob> s3_params;  // stage 3 carries the frozen stage-2
                                     // blob too, so sampling needs one file
};

// Binary blob at `path` plus a human-readable sidecar at `path.json` holding
// version, stage, config hash, epoch count and the loss history.  Both are
// written temp-then-rename; a failed save leaves no partial files behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model/optimizer state <-> checkpoint blobs.  Restores verify that names,
// shapes and order match the freshly built model.
Checkpoint snapshot_stage2(const Stage2Model& s2, const nn::AdamW& opt,
                           const Stage2History& history, const ExperimentConfig& ec);
Checkpoint snapshot_stage3(const Stage2Model& s2, const Stage3Model& s3,
                           const nn::AdamW& opt, const Stage3History& history,
                           const ExperimentConfig& ec);
void restore_stage2(const Checkpoint& ck, Stage2Model& s2, nn::AdamW& opt,
                    Stage2History& history);
void restore_stage3(const Checkpoint& ck, Stage2Model& s2, Stage3Model& s3,
                    nn::AdamW& opt, Stage3History& history);

}  // namespace odgen
