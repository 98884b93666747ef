// CLI entry point: corpus generation, the two training stages, sampling,
// evaluation, and the permutation robustness table.  Every failure maps an
// error kind to a stable exit code with one categorized line on stderr.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "odgen/io.hpp"
#include "odgen/metrics.hpp"

using namespace odgen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Dimension: return 2;
    case ErrorKind::Config: return 3;
    case ErrorKind::State: return 4;
    case ErrorKind::Input: return 5;
    case ErrorKind::Capacity: return 6;
    case ErrorKind::Io: return 7;
    case ErrorKind::UndefinedMetric: return 8;
  }
  return 1;
}

std::vector<double> parse_intensity_list(const std::string& text) {
  std::vector<double> out;
  const char* p = text.c_str();
  while (*p) {
    char* end = nullptr;
    const double v = std::strtod(p, &end);
    if (end == p) throw OdError::config("bad --intensities value near '" + std::string(p) + "'");
    out.push_back(v);
    p = end;
    if (*p == ',') ++p;
  }
  if (out.empty()) throw OdError::config("--intensities is empty");
  return out;
}

// Effective config for a training run: defaults, then --config file, then
// explicit flags; corpus-derived widths always win so checkpoints stay
// consistent with their data.
struct TrainFlags {
  std::string corpus_dir, out, config_file, resume;
  int epochs = -1;
  int batch = -1;
  double lr = -1.0;
  double weight_decay = -1.0;
  int patience = -1;
  int min_epochs = -1;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--corpus", f.corpus_dir, "corpus directory")->required();
  cmd->add_option("--out", f.out, "checkpoint output path")->required();
  cmd->add_option("--config", f.config_file, "experiment config JSON");
  cmd->add_option("--resume", f.resume, "checkpoint to continue from");
  cmd->add_option("--epochs", f.epochs, "total epochs to reach");
  cmd->add_option("--batch", f.batch, "batch size");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--weight-decay", f.weight_decay, "AdamW weight decay");
  cmd->add_option("--patience", f.patience, "early-stop patience");
  cmd->add_option("--min-epochs", f.min_epochs, "epochs before early stopping");
  cmd->add_option("--seed", f.seed, "run seed")->each([&](const std::string&) {
    f.seed_set = true;
  });
}

ExperimentConfig effective_config(const TrainFlags& f, const Corpus& corpus,
                                  const ExperimentConfig* base = nullptr) {
  ExperimentConfig ec;
  if (base) ec = *base;  // a checkpoint being continued is self-describing
  if (!f.config_file.empty())
    ec = experiment_from_json(read_text_file(f.config_file));
  ec.corpus = corpus.config;
  ec.model.feat_dim = corpus.config.feat_dim;
  int widest = 2;
  for (const CityBundle& c : corpus.cities) widest = std::max(widest, c.n());
  ec.model.n_max = std::max(ec.model.n_max, widest);
  return ec;
}

void apply_train_flags(const TrainFlags& f, TrainConfig& t, uint64_t* run_seed) {
  if (f.epochs >= 0) t.max_epochs = f.epochs;
  if (f.batch >= 0) t.batch_size = f.batch;
  if (f.lr >= 0.0) t.lr = f.lr;
  if (f.weight_decay >= 0.0) t.weight_decay = f.weight_decay;
  if (f.patience >= 0) t.patience = f.patience;
  if (f.min_epochs >= 0) t.min_epochs = f.min_epochs;
  if (f.seed_set) *run_seed = f.seed;
  t.seed = *run_seed;
}

void check_resume_hash(const Checkpoint& ck, const ExperimentConfig& ec,
                       const std::string& path) {
  if (config_hash(ck.config) != config_hash(ec))
    throw OdError::config("resume refused: config hash of " + path +
                          " does not match this run's configuration");
}

void write_loss_log_stage2(const std::string& ckpt_path, const Stage2History& h) {
  std::string csv = "epoch,total,recon,contrastive,kl,val_recon\n";
  char line[160];
  for (size_t i = 0; i < h.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", i + 1,
                  h[i].total, h[i].recon, h[i].contrastive, h[i].kl, h[i].val_recon);
    csv += line;
  }
  write_text_atomic(ckpt_path + ".loss.csv", csv);
}

void write_loss_log_stage3(const std::string& ckpt_path, const Stage3History& h) {
  std::string csv = "epoch,total,ldm,pre,val_ldm\n";
  char line[140];
  for (size_t i = 0; i < h.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", i + 1,
                  h[i].total, h[i].ldm, h[i].pre, h[i].val_ldm);
    csv += line;
  }
  write_text_atomic(ckpt_path + ".loss.csv", csv);
}

// ===== subcommand bodies ====================================================

struct GenCorpusFlags {
  std::string out, import_dir;
  int cities = 10;
  int n_min = 8, n_max = 32;
  int feat_dim = 32;
  double noise = 0.3, rho = 0.3;
  uint64_t seed = 0;
  bool force = false;
};

void run_gen_corpus(const GenCorpusFlags& f) {
  Corpus corpus;
  if (!f.import_dir.empty()) {
    corpus = read_corpus(f.import_dir);
  } else {
    CorpusConfig cc;
    cc.n_cities = f.cities;
    cc.n_min = f.n_min;
    cc.n_max = f.n_max;
    cc.feat_dim = f.feat_dim;
    cc.noise_level = f.noise;
    cc.rho = f.rho;
    cc.seed = f.seed;
    corpus = generate_corpus(cc);
  }
  write_corpus(f.out, corpus, f.force);
  int train = 0, val = 0, test = 0;
  for (Split s : corpus.splits)
    (s == Split::Train ? train : s == Split::Val ? val : test) += 1;
  std::printf("wrote %zu cities to %s (train/val/test = %d/%d/%d)\n",
              corpus.cities.size(), f.out.c_str(), train, val, test);
}

void run_train_vae(const TrainFlags& f) {
  const Corpus corpus = read_corpus(f.corpus_dir);
  std::optional<Checkpoint> ck;
  if (!f.resume.empty()) {
    ck = load_checkpoint(f.resume);
    if (ck->stage != 2)
      throw OdError::input(f.resume + " is a stage-" + std::to_string(ck->stage) +
                           " checkpoint; train-vae resumes stage 2");
  }
  ExperimentConfig ec = effective_config(f, corpus, ck ? &ck->config : nullptr);
  apply_train_flags(f, ec.train_vae, &ec.seed);
  if (ck) check_resume_hash(*ck, ec, f.resume);
  ec.validate();

  Stage2Model model =
      Stage2Model::build(ec.model, RandomStream::derive(ec.seed, "init", 2));
  nn::AdamW opt;
  Stage2History history;
  if (ck) restore_stage2(*ck, model, opt, history);
  opt.lr = ec.train_vae.lr;
  opt.weight_decay = ec.train_vae.weight_decay;

  train_stage2(model, corpus, ec.train_vae, opt, history, &std::cout);
  save_checkpoint(f.out, snapshot_stage2(model, opt, history, ec));
  write_loss_log_stage2(f.out, history);
  std::printf("stage-2 checkpoint: %s (%zu epochs)\n", f.out.c_str(), history.size());
}

void run_train_diff(const TrainFlags& f, const std::string& vae_path) {
  const Corpus corpus = read_corpus(f.corpus_dir);

  Stage2Model s2;
  Stage3Model s3;
  nn::AdamW opt;
  Stage3History history;
  ExperimentConfig ec;
  if (!f.resume.empty()) {
    const Checkpoint ck = load_checkpoint(f.resume);
    if (ck.stage != 3)
      throw OdError::input(f.resume + " is a stage-" + std::to_string(ck.stage) +
                           " checkpoint; train-diff resumes stage 3");
    ec = effective_config(f, corpus, &ck.config);
    apply_train_flags(f, ec.train_diff, &ec.seed);
    check_resume_hash(ck, ec, f.resume);
    ec.validate();
    s2 = Stage2Model::build(ec.model, 0);
    s3 = Stage3Model::build(ec.model, 0);
    restore_stage3(ck, s2, s3, opt, history);
  } else {
    if (vae_path.empty())
      throw OdError::config("train-diff needs --vae (or --resume)");
    const Checkpoint ck2 = load_checkpoint(vae_path);
    if (ck2.stage != 2)
      throw OdError::input(vae_path + " is not a stage-2 checkpoint");
    ec = effective_config(f, corpus, &ck2.config);
    apply_train_flags(f, ec.train_diff, &ec.seed);
    ec.validate();
    s2 = Stage2Model::build(ec.model, 0);
    nn::AdamW opt2;
    Stage2History h2;
    restore_stage2(ck2, s2, opt2, h2);
    s3 = Stage3Model::build(ec.model, RandomStream::derive(ec.seed, "init", 3));
  }
  opt.lr = ec.train_diff.lr;
  opt.weight_decay = ec.train_diff.weight_decay;

  train_stage3(s2, s3, corpus, ec.train_diff, opt, history, &std::cout);
  save_checkpoint(f.out, snapshot_stage3(s2, s3, opt, history, ec));
  write_loss_log_stage3(f.out, history);
  std::printf("stage-3 checkpoint: %s (%zu epochs)\n", f.out.c_str(), history.size());
}

struct SampleFlags {
  std::string model, corpus_dir, city, out;
  uint64_t perm_seed = 0;
  double perm_intensity = 0.0;
  int tau_steps = 50;
  uint64_t seed = 0;
};

void run_sample(const SampleFlags& f) {
  const Checkpoint ck = load_checkpoint(f.model);
  if (ck.stage != 3)
    throw OdError::input(f.model + " is a stage-" + std::to_string(ck.stage) +
                         " checkpoint; sampling needs stage 3");
  Stage2Model s2 = Stage2Model::build(ck.config.model, 0);
  Stage3Model s3 = Stage3Model::build(ck.config.model, 0);
  nn::AdamW opt;
  Stage3History history;
  restore_stage3(ck, s2, s3, opt, history);

  const Corpus corpus = read_corpus(f.corpus_dir);
  const CityBundle& city = corpus.by_id(f.city);
  const Permutation perm =
      permutation_random(city.n(), f.perm_intensity, f.perm_seed);
  const ODMatrix od = generate_od(s2, s3, city.features, city.regions, perm,
                                  f.tau_steps, f.seed);
  write_matrix_csv(f.out, od.values);

  char hash_hex[17];
  std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                static_cast<unsigned long long>(config_hash(ck.config)));
  json sidecar = {{"version", 1},
                  {"city_id", f.city},
                  {"n", city.n()},
                  {"seed", f.seed},
                  {"perm_seed", f.perm_seed},
                  {"perm_intensity", f.perm_intensity},
                  {"tau_steps", f.tau_steps},
                  {"permutation", perm.map},
                  {"model_config_hash", hash_hex}};
  write_text_atomic(f.out + ".json", sidecar.dump(2) + "\n");
  std::printf("wrote %s (%d x %d)\n", f.out.c_str(), city.n(), city.n());
}

void run_eval(const std::string& pred_path, const std::string& truth_path,
              const std::string& report_path) {
  ODMatrix pred, truth;
  pred.values = read_matrix_csv(pred_path);
  truth.values = read_matrix_csv(truth_path);
  pred.scale = Scale::Raw;
  truth.scale = Scale::Raw;
  if (pred.values.rows() != truth.values.rows() ||
      pred.values.cols() != truth.values.cols())
    throw OdError::dimension(
        "prediction " + pred_path + " is " + std::to_string(pred.values.rows()) +
        "x" + std::to_string(pred.values.cols()) + " but truth " + truth_path +
        " is " + std::to_string(truth.values.rows()) + "x" +
        std::to_string(truth.values.cols()));

  const MetricsReport r = evaluate(truth, pred);
  const json out = {{"version", 1},
                    {"cpc", r.cpc},
                    {"rmse", r.rmse},
                    {"nrmse", r.nrmse},
                    {"jsd_inflow", r.jsd_inflow},
                    {"jsd_outflow", r.jsd_outflow},
                    {"jsd_odflow", r.jsd_odflow}};
  if (!report_path.empty()) write_text_atomic(report_path, out.dump(2) + "\n");
  std::printf("cpc         %.6f\n", r.cpc);
  std::printf("rmse        %.6f\n", r.rmse);
  std::printf("nrmse       %.6f\n", r.nrmse);
  std::printf("jsd_inflow  %.6f\n", r.jsd_inflow);
  std::printf("jsd_outflow %.6f\n", r.jsd_outflow);
  std::printf("jsd_odflow  %.6f\n", r.jsd_odflow);
}

struct PermTestFlags {
  std::string model, corpus_dir, out, generator = "diffusion", split = "test";
  std::string intensities = "0.1,0.3,0.5,0.8,1.0";
  int seeds = 3;
  int tau_steps = 50;
  uint64_t seed = 0;
};

void run_perm_test(const PermTestFlags& f) {
  const Corpus corpus = read_corpus(f.corpus_dir);
  const std::vector<double> intensities = parse_intensity_list(f.intensities);
  Split split = Split::Test;
  if (f.split == "train") split = Split::Train;
  else if (f.split == "val") split = Split::Val;
  else if (f.split != "test") throw OdError::config("--split must be train, val or test");

  // Generator closures borrow these; they must outlive the protocol run.
  std::optional<Stage2Model> s2;
  std::optional<Stage3Model> s3;
  GravityParams gravity;
  FlowGenerator gen;
  if (f.generator == "diffusion") {
    if (f.model.empty())
      throw OdError::config("the diffusion generator needs --model");
    const Checkpoint ck = load_checkpoint(f.model);
    if (ck.stage != 3)
      throw OdError::input(f.model + " is not a stage-3 checkpoint");
    s2.emplace(Stage2Model::build(ck.config.model, 0));
    s3.emplace(Stage3Model::build(ck.config.model, 0));
    nn::AdamW opt;
    Stage3History history;
    restore_stage3(ck, *s2, *s3, opt, history);
    gen = diffusion_generator(*s2, *s3, f.tau_steps);
  } else if (f.generator == "gravity-power" || f.generator == "gravity-exp") {
    const DecayForm form = f.generator == "gravity-power" ? DecayForm::Power
                                                          : DecayForm::Exponential;
    gravity = gravity_fit(corpus, Split::Train, form);
    gen = gravity_generator(gravity);
  } else {
    throw OdError::config("--generator must be diffusion, gravity-power or gravity-exp");
  }

  const RobustnessTable table =
      perm_robustness(gen, corpus, split, intensities, f.seeds, f.seed);

  json rows = json::array();
  std::printf("intensity  mean_jsd_odflow\n");
  for (const RobustnessRow& row : table.rows) {
    rows.push_back({{"intensity", row.intensity},
                    {"mean_jsd_odflow", row.mean_jsd_odflow}});
    std::printf("%9.2f  %.6f\n", row.intensity, row.mean_jsd_odflow);
  }
  std::printf("drift %.6f\n", table.drift());
  const json out = {{"version", 1},
                    {"generator", f.generator},
                    {"seeds", f.seeds},
                    {"rows", rows},
                    {"drift", table.drift()}};
  if (!f.out.empty()) write_text_atomic(f.out, out.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"origin-destination flow generator"};
  app.require_subcommand(1);

  GenCorpusFlags gc;
  CLI::App* gen_corpus = app.add_subcommand("gen-corpus", "write a synthetic corpus");
  gen_corpus->add_option("--out", gc.out, "output directory")->required();
  gen_corpus->add_option("--cities", gc.cities, "number of cities");
  gen_corpus->add_option("--n-min", gc.n_min, "smallest city size");
  gen_corpus->add_option("--n-max", gc.n_max, "largest city size");
  gen_corpus->add_option("--feat-dim", gc.feat_dim, "region feature width");
  gen_corpus->add_option("--noise", gc.noise, "flow noise level");
  gen_corpus->add_option("--rho", gc.rho, "distance decay length");
  gen_corpus->add_option("--seed", gc.seed, "corpus seed");
  gen_corpus->add_option("--import", gc.import_dir,
                         "re-emit an existing corpus directory instead of generating");
  gen_corpus->add_flag("--force", gc.force, "overwrite a non-empty output directory");

  TrainFlags tv;
  CLI::App* train_vae = app.add_subcommand("train-vae", "train the flow autoencoder");
  add_train_flags(train_vae, tv);

  TrainFlags td;
  std::string vae_path;
  CLI::App* train_diff = app.add_subcommand("train-diff", "train the latent diffusion stage");
  add_train_flags(train_diff, td);
  train_diff->add_option("--vae", vae_path, "stage-2 checkpoint to build on");

  SampleFlags sf;
  CLI::App* sample = app.add_subcommand("sample", "generate one city's flows");
  sample->add_option("--model", sf.model, "stage-3 checkpoint")->required();
  sample->add_option("--corpus", sf.corpus_dir, "corpus directory")->required();
  sample->add_option("--city", sf.city, "city id")->required();
  sample->add_option("--out", sf.out, "output od.csv path")->required();
  sample->add_option("--perm-seed", sf.perm_seed, "permutation draw seed");
  sample->add_option("--perm-intensity", sf.perm_intensity, "fraction of indices displaced");
  sample->add_option("--tau-steps", sf.tau_steps, "DDIM steps");
  sample->add_option("--seed", sf.seed, "generation seed");

  std::string pred_path, truth_path, report_path;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a prediction against ground truth");
  eval_cmd->add_option("--pred", pred_path, "predicted od.csv")->required();
  eval_cmd->add_option("--truth", truth_path, "ground-truth od.csv")->required();
  eval_cmd->add_option("--report", report_path, "JSON report path");

  PermTestFlags pf;
  CLI::App* perm_test = app.add_subcommand("perm-test", "progressive permutation robustness table");
  perm_test->add_option("--model", pf.model, "stage-3 checkpoint (diffusion generator)");
  perm_test->add_option("--corpus", pf.corpus_dir, "corpus directory")->required();
  perm_test->add_option("--out", pf.out, "JSON table path");
  perm_test->add_option("--intensities", pf.intensities, "comma-separated intensities");
  perm_test->add_option("--seeds", pf.seeds, "seed repeats per intensity");
  perm_test->add_option("--tau-steps", pf.tau_steps, "DDIM steps");
  perm_test->add_option("--generator", pf.generator, "diffusion | gravity-power | gravity-exp");
  perm_test->add_option("--split", pf.split, "corpus split to score");
  perm_test->add_option("--seed", pf.seed, "protocol seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_corpus->parsed()) run_gen_corpus(gc);
    if (train_vae->parsed()) run_train_vae(tv);
    if (train_diff->parsed()) run_train_diff(td, vae_path);
    if (sample->parsed()) run_sample(sf);
    if (eval_cmd->parsed()) run_eval(pred_path, truth_path, report_path);
    if (perm_test->parsed()) run_perm_test(pf);
  } catch (const OdError& e) {
    std::fprintf(stderr, "error[%s]: %s\n", error_kind_name(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", e.what());
    return 1;
  }
  return 0;
}
