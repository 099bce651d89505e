#include "gaq/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gaq/bench.hpp"
#include "gaq/codebook.hpp"
#include "gaq/dataset.hpp"
#include "gaq/dynamics.hpp"
#include "gaq/error.hpp"
#include "gaq/trainer.hpp"

namespace fs = std::filesystem;

namespace gaq {

// ---- configuration -------------------------------------------------------

namespace {

struct KeySpec {
  const char* key;
  const char* value;
  const char* help;
};

// Sorted by key.
constexpr KeySpec kKeys[] = {
    {"atoms", "6", "atoms per synthetic frame (2..10)"},
    {"batch_size", "8", "frames per optimizer step"},
    {"bench_cols", "0", "GEMV columns (0: size from the cache estimate)"},
    {"bench_rows", "0", "GEMV rows (0: size from the cache estimate)"},
    {"cache_bytes", "0", "last-level cache estimate in bytes (0: detect)"},
    {"checkpoint", "", "model checkpoint (default checkpoints/model.eqmd)"},
    {"codebook", "fibonacci:256", "direction codebook: octahedron | icosahedron | fibonacci:N | kmeans:N:SEED"},
    {"codebook_samples", "1000000", "samples for the covering-radius estimate"},
    {"cutoff", "4", "neighbour cutoff in Angstrom"},
    {"dataset", "", "dataset XYZ (default dataset.xyz)"},
    {"dt", "0.5", "MD time step in fs"},
    {"epochs", "80", "training epochs"},
    {"f0", "32", "scalar channels"},
    {"f1", "8", "vector channels"},
    {"force_weight", "10", "force term weight in the training loss"},
    {"frames", "64", "number of synthetic frames"},
    {"from_checkpoint", "", "initial weights for training (FP32 checkpoint)"},
    {"identity_only", "false", "eval-lee with identity rotations only (debug)"},
    {"labels", "", "dataset label CSV (default labels.csv)"},
    {"layers", "2", "interaction layers"},
    {"lee_rotations", "1", "rotations per sample for the equivariance penalty"},
    {"lee_weight", "0.01", "weight of the equivariance penalty"},
    {"lr", "0.002", "Adam learning rate"},
    {"lr_decay", "0.97", "learning-rate decay per epoch"},
    {"mode", "fp32", "fp32 | naive-int8 | gaq-w4a8"},
    {"n_warm", "10", "warm-up epochs with the vector branch unquantized"},
    {"out", "", "output path for quantize (default checkpoints/model-<mode>.eqmd)"},
    {"perturbation", "0.1", "per-coordinate perturbation in Angstrom"},
    {"potential", "morse-plus-angular", "morse-pairwise | morse-plus-angular"},
    {"provider", "model", "md force provider: model | analytic"},
    {"rbf_count", "16", "radial basis size"},
    {"report_every", "100", "MD sampling interval in steps"},
    {"rotations", "10", "rotations per frame for eval-lee"},
    {"seed", "0", "global seed"},
    {"species", "4", "species vocabulary of the synthetic molecule"},
    {"steps", "100000", "MD steps"},
    {"tau", "10", "attention inverse temperature"},
    {"temperature", "300", "initial MD temperature in K"},
    {"threads", "1", "worker threads for training"},
    {"trials", "30", "benchmark trials"},
    {"warmup", "5", "benchmark warm-up runs"},
};

const KeySpec* find_key(const std::string& key) {
  for (const KeySpec& k : kKeys)
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const KeySpec& k : kKeys) values_[k.key] = k.value;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> v;
    for (const KeySpec& k : kKeys) v.emplace_back(k.key);
    return v;
  }();
  return all;
}

std::string RunConfig::default_value(const std::string& key) {
  const KeySpec* k = find_key(key);
  if (!k) throw Error(ErrorCode::UsageError, "unknown config key '" + key + "'");
  return k->value;
}

std::string RunConfig::describe(const std::string& key) {
  const KeySpec* k = find_key(key);
  if (!k) throw Error(ErrorCode::UsageError, "unknown config key '" + key + "'");
  return k->help;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw Error(ErrorCode::UsageError, "unknown config key '" + key + "'");
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::UsageError, "unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  try {
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::UsageError, "config key '" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  try {
    if (!v.empty() && v[0] != '-') {
      const unsigned long long x = std::stoull(v, &used);
      if (used == v.size()) return x;
    }
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::UsageError, "config key '" + key + "' expects a non-negative integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  try {
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::UsageError, "config key '" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::UsageError, "config key '" + key + "' expects true/false, got '" + v + "'");
}

void RunConfig::load(std::istream& is) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::UsageError, "config line " + std::to_string(lineno) + " is not key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::UsageError, "cannot read config file " + path);
  load(in);
}

void RunConfig::write(std::ostream& os) const {
  for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.layers = static_cast<int>(get_int("layers"));
  c.f0 = static_cast<int>(get_int("f0"));
  c.f1 = static_cast<int>(get_int("f1"));
  c.rbf_count = static_cast<int>(get_int("rbf_count"));
  c.cutoff = get_double("cutoff");
  c.tau = get_double("tau");
  c.n_species = std::max<int>(4, static_cast<int>(get_int("species")));
  c.quant_mode = parse_quant_mode(get("mode"));
  c.codebook = CodebookSpec::parse(get("codebook"));
  c.seed = get_u64("seed");
  c.validate();
  return c;
}

// ---- LEE evaluation ------------------------------------------------------

LeeStats eval_lee(const Model& model, std::span<const MolecularFrame> frames, int n_rotations, std::uint64_t seed,
                  bool identity_only) {
  if (n_rotations < 10) throw Error(ErrorCode::UsageError, "eval-lee needs at least 10 rotations");
  if (frames.empty()) throw Error(ErrorCode::UsageError, "no frames to evaluate");
  RotationSampler sampler(seed);
  LeeStats st;
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (int k = 0; k < n_rotations; ++k) {
      const Rotation r = identity_only ? Rotation::identity() : sampler.next();
      st.samples.push_back({static_cast<int>(f), k, frame_lee(model, frames[f], r)});
    }
  double sum = 0.0;
  for (const LeeSample& s : st.samples) {
    sum += s.lee;
    st.max = std::max(st.max, s.lee);
  }
  const double n = static_cast<double>(st.samples.size());
  st.mean = sum / n;
  double var = 0.0;
  for (const LeeSample& s : st.samples) var += (s.lee - st.mean) * (s.lee - st.mean);
  st.std = std::sqrt(var / n);
  return st;
}

// ---- commands ------------------------------------------------------------

namespace {

struct Context {
  RunConfig cfg;
  fs::path run_dir;
  std::ostream* out = nullptr;

  fs::path resolve(const std::string& key, const fs::path& fallback) const {
    const std::string& v = cfg.get(key);
    const fs::path p = v.empty() ? fallback : fs::path(v);
    return p.is_absolute() ? p : run_dir / p;
  }
  fs::path dataset_path() const { return resolve("dataset", "dataset.xyz"); }
  fs::path labels_path() const { return resolve("labels", "labels.csv"); }
  fs::path checkpoint_path() const { return resolve("checkpoint", fs::path("checkpoints") / "model.eqmd"); }
};

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error(ErrorCode::FormatError, "cannot write " + p.string());
  return os;
}

std::vector<MolecularFrame> load_dataset(const Context& ctx, bool need_labels) {
  const fs::path xyz = ctx.dataset_path();
  if (!fs::exists(xyz)) throw Error(ErrorCode::UsageError, "dataset not found: " + xyz.string());
  std::ifstream gx(xyz);
  if (!need_labels) return read_dataset(gx, nullptr);
  const fs::path lab = ctx.labels_path();
  if (!fs::exists(lab)) throw Error(ErrorCode::UsageError, "dataset labels not found: " + lab.string());
  std::ifstream gl(lab);
  return read_dataset(gx, &gl);
}

Model load_model(const Context& ctx) {
  const fs::path p = ctx.checkpoint_path();
  if (!fs::exists(p)) throw Error(ErrorCode::CheckpointLoadError, "checkpoint not found: " + p.string());
  return Model::load_file(p.string());
}

AnalyticPotential potential_from(const RunConfig& cfg) {
  AnalyticPotential pot;
  pot.kind = parse_potential(cfg.get("potential"));
  return pot;
}

void cmd_gen_data(Context& ctx) {
  SyntheticDatasetSpec spec;
  spec.n_frames = static_cast<int>(ctx.cfg.get_int("frames"));
  spec.atoms_per_frame = static_cast<int>(ctx.cfg.get_int("atoms"));
  spec.n_species = static_cast<int>(ctx.cfg.get_int("species"));
  spec.potential = parse_potential(ctx.cfg.get("potential"));
  spec.perturbation = ctx.cfg.get_double("perturbation");
  spec.seed = ctx.cfg.get_u64("seed");
  AnalyticPotential pot;
  pot.kind = spec.potential;
  const SyntheticDataset ds = generate_dataset(spec, pot);
  {
    auto os = open_out(ctx.dataset_path());
    write_dataset_xyz(os, ds.frames);
  }
  {
    auto os = open_out(ctx.labels_path());
    write_dataset_labels(os, ds.frames);
  }
  {
    MolecularFrame t;
    t.species = ds.species;
    t.positions = ds.template_positions;
    auto os = open_out(ctx.run_dir / "template.xyz");
    write_dataset_xyz(os, std::span<const MolecularFrame>(&t, 1));
  }
  *ctx.out << "gen-data: " << ds.frames.size() << " frames of " << ds.species.size() << " atoms -> "
           << ctx.dataset_path().string() << '\n';
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.epochs = static_cast<int>(cfg.get_int("epochs"));
  tc.n_warm = static_cast<int>(cfg.get_int("n_warm"));
  tc.lr = cfg.get_double("lr");
  tc.lr_decay = cfg.get_double("lr_decay");
  tc.lee_weight = cfg.get_double("lee_weight");
  tc.lee_rotations_per_sample = static_cast<int>(cfg.get_int("lee_rotations"));
  tc.batch_size = static_cast<int>(cfg.get_int("batch_size"));
  tc.force_weight = cfg.get_double("force_weight");
  tc.seed = cfg.get_u64("seed");
  tc.threads = static_cast<int>(cfg.get_int("threads"));
  // Fewer warm-up epochs than requested when the run is shorter.
  tc.n_warm = std::min(tc.n_warm, tc.epochs);
  return tc;
}

void cmd_train(Context& ctx) {
  const std::vector<MolecularFrame> frames = load_dataset(ctx, true);
  const TrainConfig tc = train_config(ctx.cfg);
  const ModelConfig mc = ctx.cfg.model_config();
  Model model(mc);
  if (!ctx.cfg.get("from_checkpoint").empty()) {
    const fs::path p = ctx.resolve("from_checkpoint", "");
    if (!fs::exists(p)) throw Error(ErrorCode::CheckpointLoadError, "checkpoint not found: " + p.string());
    Model init = Model::load_file(p.string());
    init.set_mode(QuantMode::Fp32);
    if (init.params().size() != model.params().size())
      throw Error(ErrorCode::CheckpointLoadError, "initial checkpoint has a different architecture");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      if (init.params()[i].data.size() != model.params()[i].data.size())
        throw Error(ErrorCode::CheckpointLoadError, "initial checkpoint has a different architecture");
      model.params()[i].data = init.params()[i].data;
    }
  }
  const fs::path ckpt = ctx.resolve("checkpoint", fs::path("checkpoints") / "model.eqmd");
  TrainResult res;
  try {
    res = train(model, frames, tc);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DivergedLoss) {
      if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
      model.save_file(ckpt.string());
    }
    throw;
  }
  {
    auto os = open_out(ctx.run_dir / "metrics.csv");
    write_metrics_csv(os, res.history);
  }
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  model.save_file(ckpt.string());
  const EpochMetrics last = res.history.empty() ? EpochMetrics{} : res.history.back();
  *ctx.out << "train: " << res.history.size() << " epochs, e_mae " << last.e_mae << " f_mae " << last.f_mae
           << " lee " << last.lee << " -> " << ckpt.string() << '\n';
}

void cmd_quantize(Context& ctx) {
  const QuantMode mode = parse_quant_mode(ctx.cfg.get("mode"));
  if (mode == QuantMode::Fp32) throw Error(ErrorCode::UsageError, "quantize needs mode naive-int8 or gaq-w4a8");
  Model model = load_model(ctx);
  const std::vector<MolecularFrame> frames = load_dataset(ctx, false);
  model.set_mode(mode);
  model.quant() = calibrate(model, frames);
  model.pack_weights();
  const fs::path outp =
      ctx.resolve("out", fs::path("checkpoints") / ("model-" + std::string(quant_mode_name(mode)) + ".eqmd"));
  if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
  model.save_file(outp.string());
  *ctx.out << "quantize: " << quant_mode_name(mode) << " -> " << outp.string() << '\n';
}

void cmd_eval(Context& ctx) {
  const Model model = load_model(ctx);
  const std::vector<MolecularFrame> frames = load_dataset(ctx, true);
  double e_mae = 0.0, f_mae = 0.0;
  for (const MolecularFrame& f : frames) {
    const Prediction p = predict(model, f);
    e_mae += std::abs(p.energy - *f.energy);
    double fe = 0.0;
    for (std::size_t i = 0; i < f.atom_count(); ++i)
      for (int c = 0; c < 3; ++c) fe += std::abs(p.forces[i][c] - (*f.forces)[i][c]);
    f_mae += fe / (3.0 * static_cast<double>(f.atom_count()));
  }
  e_mae /= static_cast<double>(frames.size());
  f_mae /= static_cast<double>(frames.size());
  auto os = open_out(ctx.run_dir / "eval.csv");
  char buf[128];
  std::snprintf(buf, sizeof buf, "metric,value\ne_mae,%.9g\nf_mae,%.9g\n", e_mae, f_mae);
  os << buf;
  *ctx.out << "eval: e_mae " << e_mae << " eV, f_mae " << f_mae << " eV/A\n";
}

void cmd_eval_lee(Context& ctx) {
  const Model model = load_model(ctx);
  const std::vector<MolecularFrame> frames = load_dataset(ctx, false);
  const LeeStats st = eval_lee(model, frames, static_cast<int>(ctx.cfg.get_int("rotations")),
                               ctx.cfg.get_u64("seed"), ctx.cfg.get_bool("identity_only"));
  auto os = open_out(ctx.run_dir / "lee.csv");
  os << "frame,rotation,lee\n";
  char buf[128];
  for (const LeeSample& s : st.samples) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", s.frame, s.rotation, s.lee);
    os << buf;
  }
  auto ss = open_out(ctx.run_dir / "lee_summary.csv");
  std::snprintf(buf, sizeof buf, "mean,max,std\n%.9g,%.9g,%.9g\n", st.mean, st.max, st.std);
  ss << buf;
  *ctx.out << "eval-lee: mean " << st.mean << " max " << st.max << " std " << st.std << '\n';
}

void cmd_md(Context& ctx) {
  std::ifstream tin(ctx.run_dir / "template.xyz");
  if (!tin) throw Error(ErrorCode::UsageError, "template.xyz not found; run gen-data first");
  const std::vector<MolecularFrame> tmpl = read_dataset(tin, nullptr);
  if (tmpl.empty()) throw Error(ErrorCode::FormatError, "empty template");
  const std::vector<int> species = tmpl[0].species;

  ForceProvider provider;
  Model model;
  const std::string kind = ctx.cfg.get("provider");
  if (kind == "model") {
    model = load_model(ctx);
    provider = model_provider(model, species);
  } else if (kind == "analytic") {
    const AnalyticPotential pot = potential_from(ctx.cfg);
    provider = [pot, species](std::span<const Vec3> pos) {
      ForceEval fe;
      fe.energy = pot.evaluate(species, pos, fe.forces);
      return fe;
    };
  } else {
    throw Error(ErrorCode::UsageError, "provider must be model or analytic");
  }

  MDState s;
  s.positions = tmpl[0].positions;
  for (int sp : species) s.masses.push_back(species_mass(sp));
  s.dt = ctx.cfg.get_double("dt");
  maxwell_boltzmann(s, ctx.cfg.get_double("temperature"), ctx.cfg.get_u64("seed"));

  auto traj = open_out(ctx.run_dir / "trajectory.xyz");
  const NveResult res = run_nve(std::move(s), provider, ctx.cfg.get_int("steps"), ctx.cfg.get_int("report_every"),
                                [&](const MDState& st, const EnergySample& e) { write_xyz_frame(traj, species, st, e); });
  {
    auto os = open_out(ctx.run_dir / "energy.csv");
    write_energy_csv(os, res.energies);
  }
  auto os = open_out(ctx.run_dir / "drift.csv");
  char buf[256];
  std::snprintf(buf, sizeof buf, "drift_rate,max_excursion,exploded,halted_step\n%.9g,%.9g,%d,%lld\n",
                res.report.drift_rate, res.report.max_excursion, res.report.exploded ? 1 : 0,
                static_cast<long long>(res.report.halted_step));
  os << buf;
  *ctx.out << "md: drift " << res.report.drift_rate << " meV/atom/ps, max excursion " << res.report.max_excursion
           << " meV/atom" << (res.report.exploded ? ", exploded" : "") << '\n';
}

void cmd_bench(Context& ctx) {
  BenchOptions opts;
  opts.trials = static_cast<int>(ctx.cfg.get_int("trials"));
  opts.warmup = static_cast<int>(ctx.cfg.get_int("warmup"));
  opts.cache_bytes = ctx.cfg.get_int("cache_bytes");
  opts.seed = ctx.cfg.get_u64("seed");
  std::int64_t rows = ctx.cfg.get_int("bench_rows"), cols = ctx.cfg.get_int("bench_cols");
  if (rows <= 0 || cols <= 0) {
    const auto shape = memory_bound_shape(opts.cache_bytes > 0 ? opts.cache_bytes : detect_cache_bytes());
    rows = shape.first;
    cols = shape.second;
  }
  std::vector<BenchReport> reports;
  for (int bits : {32, 8, 4}) reports.push_back(bench_gemv(rows, cols, bits, opts));
  fill_speedups(reports);

  const fs::path ckpt = ctx.checkpoint_path();
  if (fs::exists(ckpt)) {
    std::ifstream tin(ctx.run_dir / "template.xyz");
    const std::vector<MolecularFrame> tmpl = tin ? read_dataset(tin, nullptr) : std::vector<MolecularFrame>{};
    if (!tmpl.empty()) {
      const Model model = Model::load_file(ckpt.string());
      Model fp = model;
      fp.set_mode(QuantMode::Fp32);
      auto base = bench_model_breakdown(fp, tmpl[0], opts.trials, opts.warmup);
      auto quant = model.config().quant_mode == QuantMode::Fp32
                       ? std::vector<BenchReport>{}
                       : bench_model_breakdown(model, tmpl[0], opts.trials, opts.warmup);
      for (std::size_t i = 0; i < base.size(); ++i) {
        base[i].speedup_vs_fp32 = 1.0;
        if (i < quant.size() && quant[i].us_median > 0.0) quant[i].speedup_vs_fp32 = base[i].us_median / quant[i].us_median;
      }
      reports.insert(reports.end(), base.begin(), base.end());
      reports.insert(reports.end(), quant.begin(), quant.end());
    }
  }
  {
    auto os = open_out(ctx.run_dir / "bench.csv");
    write_bench_csv(os, reports);
  }
  const std::vector<ComplexityConfig> configs = {
      {"painn", 1, 32, 20, 12, 32},     {"spookynet", 2, 32, 20, 12, 32}, {"nequip", 3, 32, 20, 12, 32},
      {"so3krates", 1, 32, 20, 12, 32}, {"painn", 1, 32, 20, 12, 8},      {"spookynet", 2, 32, 20, 12, 8},
      {"nequip", 3, 32, 20, 12, 8},     {"so3krates", 1, 32, 20, 12, 8},  {"so3krates", 1, 32, 20, 12, 4},
  };
  auto cs = open_out(ctx.run_dir / "complexity.csv");
  write_complexity_csv(cs, complexity_table(configs));
  for (const BenchReport& r : reports)
    *ctx.out << "bench: " << r.op << " bits=" << r.bits << " median " << r.us_median << " us, speedup "
             << r.speedup_vs_fp32 << (r.compute_bound ? " (compute-bound size)" : "") << '\n';
}

void cmd_codebook(Context& ctx) {
  SphericalCodebook cb = SphericalCodebook::build(CodebookSpec::parse(ctx.cfg.get("codebook")));
  const double delta =
      cb.estimate_covering_radius(static_cast<int>(ctx.cfg.get_int("codebook_samples")), ctx.cfg.get_u64("seed"));
  auto os = open_out(ctx.run_dir / "codebook.txt");
  cb.write_text(os);
  char buf[160];
  std::snprintf(buf, sizeof buf, "codebook: %s, %d codewords, covering radius %.6f rad, min angle %.6f rad\n",
                cb.spec().tag().c_str(), cb.size(), delta, cb.min_pairwise_angle());
  *ctx.out << buf;
}

struct Command {
  const char* name;
  const char* help;
  void (*run)(Context&);
  std::vector<std::string> keys;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> all = {
      {"gen-data", "generate a synthetic dataset from the analytic potential", cmd_gen_data,
       {"seed", "frames", "atoms", "species", "potential", "perturbation", "dataset", "labels"}},
      {"train", "train (or quantization-aware train) a model", cmd_train,
       {"seed", "threads", "dataset", "labels", "checkpoint", "from_checkpoint", "mode", "layers", "f0", "f1",
        "rbf_count", "cutoff", "tau", "codebook", "species", "epochs", "n_warm", "lr", "lr_decay", "lee_weight",
        "lee_rotations", "batch_size", "force_weight"}},
      {"quantize", "calibrate and pack a trained checkpoint", cmd_quantize,
       {"seed", "dataset", "checkpoint", "mode", "out"}},
      {"eval", "energy and force errors of a checkpoint", cmd_eval, {"dataset", "labels", "checkpoint"}},
      {"eval-lee", "local equivariance error of a checkpoint", cmd_eval_lee,
       {"seed", "dataset", "checkpoint", "rotations", "identity_only"}},
      {"md", "NVE molecular dynamics from the template geometry", cmd_md,
       {"seed", "checkpoint", "provider", "potential", "steps", "dt", "temperature", "report_every"}},
      {"bench", "GEMV bandwidth and model latency benchmarks", cmd_bench,
       {"seed", "checkpoint", "trials", "warmup", "bench_rows", "bench_cols", "cache_bytes"}},
      {"codebook", "build a codebook and estimate its covering radius", cmd_codebook,
       {"seed", "codebook", "codebook_samples"}},
  };
  return all;
}

fs::path run_directory(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative())
    if (const char* root = std::getenv(kRunRootEnv); root && *root) p = fs::path(root) / p;
  return p;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Symmetry-preserving quantization toolkit for equivariant force fields", "gaq"};
  app.require_subcommand(1);
  std::string config_path, run_dir = "run";
  std::map<std::string, std::map<std::string, std::string>> overrides;
  std::map<std::string, std::vector<CLI::Option*>> options;
  for (const Command& c : commands()) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "key = value configuration file");
    sub->add_option("--run-dir", run_dir, "run directory (relative paths resolve under $GAQ_RUN_ROOT)");
    for (const std::string& k : c.keys) {
      auto& slot = overrides[c.name][k];
      options[c.name].push_back(
          sub->add_option("--" + k, slot, RunConfig::describe(k) + " [" + RunConfig::default_value(k) + "]"));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: UsageError: " << e.what() << '\n';
    return 2;
  }

  try {
    for (const Command& c : commands()) {
      CLI::App* sub = app.get_subcommand(c.name);
      if (!sub->parsed()) continue;
      Context ctx;
      ctx.out = &out;
      if (!config_path.empty()) ctx.cfg.load_file(config_path);
      for (std::size_t i = 0; i < c.keys.size(); ++i)
        if (options[c.name][i]->count() > 0) ctx.cfg.set(c.keys[i], overrides[c.name][c.keys[i]]);
      ctx.run_dir = run_directory(run_dir);
      fs::create_directories(ctx.run_dir);
      {
        std::ofstream echo(ctx.run_dir / "config.echo");
        ctx.cfg.write(echo);
      }
      c.run(ctx);
      return 0;
    }
    err << "error: UsageError: no subcommand\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace gaq
