#include "odgen/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace odgen {

namespace fs = std::filesystem;
using nlohmann::json;

// ===== text matrices =====

void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& m) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw OdError::io("cannot open " + path.string() + " for writing");
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j) std::fputc(',', f);
      std::fputs(buf, f);
    }
    std::fputc('\n', f);
  }
  if (std::fclose(f) != 0)
    throw OdError::io("failed writing " + path.string());
}

Eigen::MatrixXd read_matrix_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw OdError::io("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    const char* p = line.c_str();
    while (true) {
      char* end = nullptr;
      const double v = std::strtod(p, &end);
      if (end == p)
        throw OdError::io("bad number in " + path.string() + " row " +
                          std::to_string(rows.size() + 1));
      row.push_back(v);
      p = end;
      if (*p == ',') {
        ++p;
        continue;
      }
      if (*p == '\0' || *p == '\r') break;
      throw OdError::io("unexpected character in " + path.string() + " row " +
                        std::to_string(rows.size() + 1));
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw OdError::io("ragged rows in " + path.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw OdError::io("empty matrix file " + path.string());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows.front().size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

// ===== experiment configuration =====

void ExperimentConfig::validate() const {
  corpus.validate();
  model.validate();
  train_vae.validate();
  train_diff.validate();
  if (model.feat_dim != corpus.feat_dim)
    throw OdError::config("model feat_dim does not match the corpus feature width");
  if (model.n_max < corpus.n_max)
    throw OdError::config("model n_max is below the corpus city size bound");
}

namespace {

json corpus_to_json(const CorpusConfig& c) {
  return {{"n_cities", c.n_cities},   {"n_min", c.n_min},
          {"n_max", c.n_max},         {"feat_dim", c.feat_dim},
          {"latent_factor_dim", c.latent_factor_dim},
          {"noise_level", c.noise_level},
          {"rho", c.rho},             {"seed", c.seed}};
}

CorpusConfig corpus_from_json(const json& j) {
  CorpusConfig c;
  c.n_cities = j.value("n_cities", c.n_cities);
  c.n_min = j.value("n_min", c.n_min);
  c.n_max = j.value("n_max", c.n_max);
  c.feat_dim = j.value("feat_dim", c.feat_dim);
  c.latent_factor_dim = j.value("latent_factor_dim", c.latent_factor_dim);
  c.noise_level = j.value("noise_level", c.noise_level);
  c.rho = j.value("rho", c.rho);
  c.seed = j.value("seed", c.seed);
  return c;
}

json model_to_json(const ModelConfig& m) {
  return {{"feat_dim", m.feat_dim},
          {"n_kernels", m.n_kernels},
          {"kernel_dim", m.kernel_dim},
          {"enc_c1", m.enc_c1},
          {"enc_c2", m.enc_c2},
          {"enc_c3", m.enc_c3},
          {"latent_channels", m.latent_channels},
          {"proj_dim", m.proj_dim},
          {"alpha", m.alpha},
          {"beta", m.beta},
          {"tau_temp", m.tau_temp},
          {"T", m.T},
          {"lambda_pre", m.lambda_pre},
          {"n_p", m.n_p},
          {"d_e", m.d_e},
          {"d_c", m.d_c},
          {"n_max", m.n_max},
          {"pinet_base", m.pinet_base},
          {"t_embed_dim", m.t_embed_dim},
          {"perm_aug_intensity", m.perm_aug_intensity}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.feat_dim = j.value("feat_dim", m.feat_dim);
  m.n_kernels = j.value("n_kernels", m.n_kernels);
  m.kernel_dim = j.value("kernel_dim", m.kernel_dim);
  m.enc_c1 = j.value("enc_c1", m.enc_c1);
  m.enc_c2 = j.value("enc_c2", m.enc_c2);
  m.enc_c3 = j.value("enc_c3", m.enc_c3);
  m.latent_channels = j.value("latent_channels", m.latent_channels);
  m.proj_dim = j.value("proj_dim", m.proj_dim);
  m.alpha = j.value("alpha", m.alpha);
  m.beta = j.value("beta", m.beta);
  m.tau_temp = j.value("tau_temp", m.tau_temp);
  m.T = j.value("T", m.T);
  m.lambda_pre = j.value("lambda_pre", m.lambda_pre);
  m.n_p = j.value("n_p", m.n_p);
  m.d_e = j.value("d_e", m.d_e);
  m.d_c = j.value("d_c", m.d_c);
  m.n_max = j.value("n_max", m.n_max);
  m.pinet_base = j.value("pinet_base", m.pinet_base);
  m.t_embed_dim = j.value("t_embed_dim", m.t_embed_dim);
  m.perm_aug_intensity = j.value("perm_aug_intensity", m.perm_aug_intensity);
  return m;
}

json train_to_json(const TrainConfig& t) {
  return {{"max_epochs", t.max_epochs}, {"min_epochs", t.min_epochs},
          {"patience", t.patience},     {"batch_size", t.batch_size},
          {"lr", t.lr},                 {"weight_decay", t.weight_decay},
          {"seed", t.seed}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.min_epochs = j.value("min_epochs", t.min_epochs);
  t.patience = j.value("patience", t.patience);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.seed = j.value("seed", t.seed);
  return t;
}

json experiment_to_json_obj(const ExperimentConfig& ec) {
  return {{"version", 1},
          {"seed", ec.seed},
          {"corpus", corpus_to_json(ec.corpus)},
          {"model", model_to_json(ec.model)},
          {"train_vae", train_to_json(ec.train_vae)},
          {"train_diff", train_to_json(ec.train_diff)}};
}

json parse_json(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw OdError::io("malformed JSON in " + what);
  return j;
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw OdError::io("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw OdError::io("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw OdError::io("failed writing " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string experiment_to_json(const ExperimentConfig& ec) {
  return experiment_to_json_obj(ec).dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  const json j = parse_json(text, "experiment config");
  ExperimentConfig ec;
  ec.seed = j.value("seed", ec.seed);
  if (j.contains("corpus")) ec.corpus = corpus_from_json(j.at("corpus"));
  if (j.contains("model")) ec.model = model_from_json(j.at("model"));
  if (j.contains("train_vae")) ec.train_vae = train_from_json(j.at("train_vae"));
  if (j.contains("train_diff")) ec.train_diff = train_from_json(j.at("train_diff"));
  return ec;
}

uint64_t config_hash(const ExperimentConfig& ec) {
  ExperimentConfig keyed = ec;
  keyed.train_vae.max_epochs = 0;
  keyed.train_diff.max_epochs = 0;
  return fnv1a(experiment_to_json_obj(keyed).dump());
}

// ===== corpus directory =====

namespace {

Split split_from_name(const std::string& s, const fs::path& where) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw OdError::io("unknown split '" + s + "' in " + where.string());
}

CityBundle read_city_dir(const fs::path& dir, Split* split_out) {
  const fs::path mpath = dir / "manifest.json";
  const json m = parse_json(read_text_file(mpath), mpath.string());
  CityBundle city;
  city.city_id = m.value("city_id", dir.filename().string());
  const int n = m.value("n", 0);
  const int d = m.value("d", 0);
  if (n < 1 || d < 1)
    throw OdError::io("manifest " + mpath.string() + " lacks valid n/d");
  if (split_out) *split_out = split_from_name(m.value("split", "train"), mpath);

  city.features.vectors = read_matrix_csv(dir / "features.csv");
  city.regions.centroids = read_matrix_csv(dir / "centroids.csv");
  city.od.values = read_matrix_csv(dir / "od.csv");
  city.od.scale = Scale::Raw;
  for (int i = 0; i < n; ++i)
    city.regions.ids.push_back("r" + std::to_string(i));

  auto expect = [&](const Eigen::MatrixXd& got, int rows, int cols, const char* file) {
    if (got.rows() != rows || got.cols() != cols)
      throw OdError::io(std::string(file) + " in " + dir.string() + " is " +
                        std::to_string(got.rows()) + "x" + std::to_string(got.cols()) +
                        ", manifest says " + std::to_string(rows) + "x" +
                        std::to_string(cols));
  };
  expect(city.features.vectors, n, d, "features.csv");
  expect(city.regions.centroids, n, 2, "centroids.csv");
  expect(city.od.values, n, n, "od.csv");
  city.validate();
  return city;
}

}  // namespace

void write_corpus(const fs::path& dir, const Corpus& corpus, bool force) {
  if (corpus.cities.size() != corpus.splits.size())
    throw OdError::input("corpus split list out of step with its cities");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw OdError::io("corpus directory " + dir.string() +
                        " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);

  json listing = json::array();
  for (size_t k = 0; k < corpus.cities.size(); ++k) {
    const CityBundle& city = corpus.cities[k];
    const fs::path cdir = dir / city.city_id;
    if (fs::exists(cdir))
      throw OdError::input("duplicate city id " + city.city_id);
    fs::create_directories(cdir);

    json manifest = {{"city_id", city.city_id},
                     {"n", city.n()},
                     {"d", city.features.d()},
                     {"split", split_name(corpus.splits[k])}};
    write_text_atomic(cdir / "manifest.json", manifest.dump(2) + "\n");
    write_matrix_csv(cdir / "features.csv", city.features.vectors);
    write_matrix_csv(cdir / "centroids.csv", city.regions.centroids);
    write_matrix_csv(cdir / "od.csv", city.od.values);
    listing.push_back(manifest);
  }
  const json top = {{"version", 1},
                    {"config", corpus_to_json(corpus.config)},
                    {"cities", listing}};
  write_text_atomic(dir / "corpus.json", top.dump(2) + "\n");
}

Corpus read_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw OdError::io("no corpus directory at " + dir.string());
  Corpus corpus;
  const fs::path top = dir / "corpus.json";

  if (fs::exists(top)) {
    const json j = parse_json(read_text_file(top), top.string());
    if (j.value("version", 0) != 1)
      throw OdError::io("unsupported corpus version in " + top.string());
    if (j.contains("config")) corpus.config = corpus_from_json(j.at("config"));
    for (const json& entry : j.at("cities")) {
      const std::string id = entry.at("city_id").get<std::string>();
      Split split = Split::Train;
      corpus.cities.push_back(read_city_dir(dir / id, &split));
      corpus.splits.push_back(split);
    }
    return corpus;
  }

  // External import layout: bare city directories, sorted for determinism.
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
      subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty())
    throw OdError::io("no corpus.json and no city manifests under " + dir.string());
  for (const fs::path& cdir : subdirs) {
    Split split = Split::Train;
    corpus.cities.push_back(read_city_dir(cdir, &split));
    corpus.splits.push_back(split);
  }
  corpus.config.n_cities = static_cast<int>(corpus.cities.size());
  corpus.config.feat_dim = corpus.cities.front().features.d();
  int lo = corpus.cities.front().n(), hi = lo;
  for (const CityBundle& c : corpus.cities) {
    lo = std::min(lo, c.n());
    hi = std::max(hi, c.n());
  }
  corpus.config.n_min = lo;
  corpus.config.n_max = hi;
  return corpus;
}

// ===== checkpoints =====

namespace {

constexpr char kMagic[4] = {'O', 'D', 'C', 'K'};
constexpr char kTrailer[4] = {'K', 'C', 'D', 'O'};
constexpr uint32_t kVersion = 1;

struct BinWriter {
  std::ofstream out;
  explicit BinWriter(const fs::path& p) : out(p, std::ios::binary | std::ios::trunc) {}
  void bytes(const void* p, size_t len) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
  }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) {
    bytes(v.data(), v.size() * sizeof(double));
  }
};

struct BinReader {
  std::ifstream in;
  std::string path;
  BinReader(const fs::path& p) : in(p, std::ios::binary), path(p.string()) {}
  void bytes(void* p, size_t len) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
    if (in.gcount() != static_cast<std::streamsize>(len))
      throw OdError::io("truncated checkpoint " + path);
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const uint64_t len = u64();
    if (len > (1u << 26)) throw OdError::io("corrupt string length in " + path);
    std::string s(len, '\0');
    bytes(s.data(), len);
    return s;
  }
  std::vector<double> doubles(size_t count) {
    std::vector<double> v(count);
    bytes(v.data(), count * sizeof(double));
    return v;
  }
};

void write_blobs(BinWriter& w, const std::vector<ParamBlob>& blobs) {
  w.u32(static_cast<uint32_t>(blobs.size()));
  for (const ParamBlob& b : blobs) {
    w.str(b.name);
    w.u32(static_cast<uint32_t>(b.dims.size()));
    for (int d : b.dims) w.u32(static_cast<uint32_t>(d));
    const uint8_t has_adam = b.adam_m.empty() ? 0 : 1;
    w.bytes(&has_adam, 1);
    w.doubles(b.value);
    if (has_adam) {
      w.doubles(b.adam_m);
      w.doubles(b.adam_v);
    }
  }
}

std::vector<ParamBlob> read_blobs(BinReader& r) {
  std::vector<ParamBlob> blobs(r.u32());
  for (ParamBlob& b : blobs) {
    b.name = r.str();
    b.dims.resize(r.u32());
    size_t count = 1;
    for (int& d : b.dims) {
      d = static_cast<int>(r.u32());
      if (d < 1 || count > (1u << 28))
        throw OdError::io("corrupt tensor shape in " + r.path);
      count *= static_cast<size_t>(d);
    }
    uint8_t has_adam = 0;
    r.bytes(&has_adam, 1);
    b.value = r.doubles(count);
    if (has_adam) {
      b.adam_m = r.doubles(count);
      b.adam_v = r.doubles(count);
    }
  }
  return blobs;
}

json sidecar_json(const Checkpoint& ck) {
  char hash_hex[17];
  std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                static_cast<unsigned long long>(config_hash(ck.config)));
  json history = json::array();
  if (ck.stage == 2)
    for (const Stage2Epoch& e : ck.history2)
      history.push_back({{"total", e.total},
                         {"recon", e.recon},
                         {"contrastive", e.contrastive},
                         {"kl", e.kl},
                         {"val_recon", e.val_recon}});
  else
    for (const Stage3Epoch& e : ck.history3)
      history.push_back({{"total", e.total},
                         {"ldm", e.ldm},
                         {"pre", e.pre},
                         {"val_ldm", e.val_ldm}});
  return {{"version", 1},
          {"stage", ck.stage},
          {"config_hash", hash_hex},
          {"epoch", history.size()},
          {"loss_history", history}};
}

std::vector<ParamBlob> dump_params(const nn::ParamStore& ps) {
  std::vector<ParamBlob> blobs;
  blobs.reserve(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    const nn::Param& p = ps[i];
    ParamBlob b;
    b.name = p.name;
    b.dims = p.value.dims();
    b.value.assign(p.value.data(), p.value.data() + p.value.size());
    if (!p.adam_m.empty()) {
      b.adam_m.assign(p.adam_m.data(), p.adam_m.data() + p.adam_m.size());
      b.adam_v.assign(p.adam_v.data(), p.adam_v.data() + p.adam_v.size());
    }
    blobs.push_back(std::move(b));
  }
  return blobs;
}

void load_params(const std::vector<ParamBlob>& blobs, nn::ParamStore& ps,
                 const char* what) {
  if (blobs.size() != ps.size())
    throw OdError::io(std::string("checkpoint ") + what +
                      " parameter count does not match the model");
  for (size_t i = 0; i < ps.size(); ++i) {
    nn::Param& p = ps[i];
    const ParamBlob& b = blobs[i];
    if (b.name != p.name || b.dims != p.value.dims())
      throw OdError::io(std::string("checkpoint ") + what + " parameter '" +
                        b.name + "' does not match model parameter '" + p.name + "'");
    std::copy(b.value.begin(), b.value.end(), p.value.data());
    if (!b.adam_m.empty()) {
      p.adam_m = nn::Tensor::zeros(p.value.dims());
      p.adam_v = nn::Tensor::zeros(p.value.dims());
      std::copy(b.adam_m.begin(), b.adam_m.end(), p.adam_m.data());
      std::copy(b.adam_v.begin(), b.adam_v.end(), p.adam_v.data());
    } else {
      p.adam_m = nn::Tensor();
      p.adam_v = nn::Tensor();
    }
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  if (ck.stage != 2 && ck.stage != 3)
    throw OdError::config("checkpoint stage must be 2 or 3");
  const fs::path tmp = path.string() + ".tmp";
  try {
    BinWriter w(tmp);
    if (!w.out)
      throw OdError::io("cannot open " + tmp.string() + " for writing");
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<uint32_t>(ck.stage));
    const std::string cfg = experiment_to_json(ck.config);
    w.u64(config_hash(ck.config));
    w.str(cfg);
    w.u64(static_cast<uint64_t>(ck.adam_t));
    w.f64(ck.latent_scale);
    w.u32(static_cast<uint32_t>(ck.history2.size()));
    for (const Stage2Epoch& e : ck.history2) {
      w.f64(e.total);
      w.f64(e.recon);
      w.f64(e.contrastive);
      w.f64(e.kl);
      w.f64(e.val_recon);
    }
    w.u32(static_cast<uint32_t>(ck.history3.size()));
    for (const Stage3Epoch& e : ck.history3) {
      w.f64(e.total);
      w.f64(e.ldm);
      w.f64(e.pre);
      w.f64(e.val_ldm);
    }
    write_blobs(w, ck.s2_params);
    write_blobs(w, ck.s3_params);
    w.bytes(kTrailer, 4);
    w.out.close();
    if (!w.out) throw OdError::io("failed writing " + tmp.string());
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
  fs::rename(tmp, path);
  write_text_atomic(fs::path(path.string() + ".json"),
                    sidecar_json(ck).dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& path) {
  BinReader r(path);
  if (!r.in) throw OdError::io("cannot open checkpoint " + path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw OdError::io(path.string() + " is not a checkpoint file");
  if (r.u32() != kVersion)
    throw OdError::io("unsupported checkpoint version in " + path.string());

  Checkpoint ck;
  ck.stage = static_cast<int>(r.u32());
  if (ck.stage != 2 && ck.stage != 3)
    throw OdError::io("corrupt stage tag in " + path.string());
  const uint64_t stored_hash = r.u64();
  ck.config = experiment_from_json(r.str());
  if (config_hash(ck.config) != stored_hash)
    throw OdError::io("config hash mismatch inside " + path.string() +
                      " (file is corrupt)");
  ck.adam_t = static_cast<int64_t>(r.u64());
  ck.latent_scale = r.f64();
  ck.history2.resize(r.u32());
  for (Stage2Epoch& e : ck.history2) {
    e.total = r.f64();
    e.recon = r.f64();
    e.contrastive = r.f64();
    e.kl = r.f64();
    e.val_recon = r.f64();
  }
  ck.history3.resize(r.u32());
  for (Stage3Epoch& e : ck.history3) {
    e.total = r.f64();
    e.ldm = r.f64();
    e.pre = r.f64();
    e.val_ldm = r.f64();
  }
  ck.s2_params = read_blobs(r);
  ck.s3_params = read_blobs(r);
  char trailer[4];
  r.bytes(trailer, 4);
  if (std::memcmp(trailer, kTrailer, 4) != 0)
    throw OdError::io("missing end marker in " + path.string());
  return ck;
}

Checkpoint snapshot_stage2(const Stage2Model& s2, const nn::AdamW& opt,
                           const Stage2History& history, const ExperimentConfig& ec) {
  Checkpoint ck;
  ck.stage = 2;
  ck.config = ec;
  ck.adam_t = opt.t;
  ck.history2 = history;
  ck.s2_params = dump_params(s2.params);
  return ck;
}

Checkpoint snapshot_stage3(const Stage2Model& s2, const Stage3Model& s3,
                           const nn::AdamW& opt, const Stage3History& history,
                           const ExperimentConfig& ec) {
  Checkpoint ck;
  ck.stage = 3;
  ck.config = ec;
  ck.adam_t = opt.t;
  ck.latent_scale = s3.latent_scale;
  ck.history3 = history;
  ck.s2_params = dump_params(s2.params);
  ck.s3_params = dump_params(s3.params);
  return ck;
}

void restore_stage2(const Checkpoint& ck, Stage2Model& s2, nn::AdamW& opt,
                    Stage2History& history) {
  if (ck.stage != 2)
    throw OdError::input("checkpoint is stage " + std::to_string(ck.stage) +
                         ", expected stage 2");
  load_params(ck.s2_params, s2.params, "stage-2");
  opt.t = ck.adam_t;
  history = ck.history2;
}

void restore_stage3(const Checkpoint& ck, Stage2Model& s2, Stage3Model& s3,
                    nn::AdamW& opt, Stage3History& history) {
  if (ck.stage != 3)
    throw OdError::input("checkpoint is stage " + std::to_string(ck.stage) +
                         ", expected stage 3");
  load_params(ck.s2_params, s2.params, "stage-2");
  load_params(ck.s3_params, s3.params, "stage-3");
  opt.t = ck.adam_t;
  s3.latent_scale = ck.latent_scale;
  history = ck.history3;
}

}  // namespace odgen
