#include "gaq/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "gaq/binary_io.hpp"
#include "gaq/error.hpp"

namespace gaq {

using ad::NodeId;
using ad::Tape;

std::string_view quant_mode_name(QuantMode m) {
  switch (m) {
    case QuantMode::Fp32: return "fp32";
    case QuantMode::NaiveInt8: return "naive-int8";
    case QuantMode::GaqW4A8: return "gaq-w4a8";
  }
  return "?";
}

QuantMode parse_quant_mode(std::string_view s) {
  if (s == "fp32") return QuantMode::Fp32;
  if (s == "naive-int8") return QuantMode::NaiveInt8;
  if (s == "gaq-w4a8") return QuantMode::GaqW4A8;
  throw Error(ErrorCode::UsageError, "unknown quant mode '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (layers < 1) throw Error(ErrorCode::InvalidSize, "layers must be >= 1");
  if (f0 < 1 || f1 < 1 || rbf_count < 1) throw Error(ErrorCode::InvalidSize, "feature widths must be positive");
  if (!(cutoff > 0.0)) throw Error(ErrorCode::InvalidSize, "cutoff must be positive");
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidSize, "tau must be positive");
  if (n_species < 1 || n_species > 8) throw Error(ErrorCode::InvalidSize, "species vocabulary must be 1..8");
}

int ModelConfig::weight_bits() const {
  switch (quant_mode) {
    case QuantMode::Fp32: return 32;
    case QuantMode::NaiveInt8: return 8;
    case QuantMode::GaqW4A8: return 4;
  }
  return 32;
}

void MolecularFrame::validate() const {
  if (species.size() != positions.size()) throw Error(ErrorCode::ShapeMismatch, "species/positions length mismatch");
  for (const Vec3& p : positions)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw Error(ErrorCode::ShapeMismatch, "non-finite position");
  if (energy.has_value() != forces.has_value()) throw Error(ErrorCode::ShapeMismatch, "labels must come together");
  if (forces && forces->size() != positions.size()) throw Error(ErrorCode::ShapeMismatch, "force label count mismatch");
}

MolecularFrame rotate_frame(const MolecularFrame& f, const Rotation& r) {
  MolecularFrame out = f;
  out.positions = rotate_all(r, f.positions);
  if (f.forces) out.forces = rotate_all(r, *f.forces);
  return out;
}

MolecularFrame translate_frame(const MolecularFrame& f, Vec3 shift) {
  MolecularFrame out = f;
  for (Vec3& p : out.positions) p += shift;
  return out;
}

std::vector<Edge> neighbor_list(const MolecularFrame& frame, double cutoff) {
  std::vector<Edge> edges;
  const int n = static_cast<int>(frame.positions.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const Vec3 r = frame.positions[j] - frame.positions[i];
      const double d = norm(r);
      if (d <= cutoff) edges.push_back({i, j, r, d});
    }
  return edges;
}

double cosine_cutoff(double d, double cutoff) {
  return d < cutoff ? 0.5 * (std::cos(std::numbers::pi * d / cutoff) + 1.0) : 0.0;
}

std::vector<double> radial_basis(double d, int rbf_count, double cutoff) {
  const double width = cutoff / rbf_count;
  const double env = cosine_cutoff(d, cutoff);
  std::vector<double> out(rbf_count);
  for (int k = 0; k < rbf_count; ++k) {
    const double mu = cutoff * (k + 1) / rbf_count;
    const double z = (d - mu) / width;
    out[k] = std::exp(-0.5 * z * z) * env;
  }
  return out;
}

std::vector<double> attention_weights(std::span<const std::vector<double>> queries,
                                      std::span<const std::vector<double>> keys, std::span<const int> dst,
                                      std::span<const int> src, double tau) {
  if (queries.size() != keys.size() || queries.empty()) throw Error(ErrorCode::ShapeMismatch, "query/key count");
  const int n = static_cast<int>(queries.size());
  const int d = static_cast<int>(queries[0].size());
  std::vector<double> q, k;
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(queries[i].size()) != d || static_cast<int>(keys[i].size()) != d)
      throw Error(ErrorCode::ShapeMismatch, "query/key widths differ");
    q.insert(q.end(), queries[i].begin(), queries[i].end());
    k.insert(k.end(), keys[i].begin(), keys[i].end());
  }
  Tape t(false);
  const NodeId qn = t.constant(n, d, std::move(q));
  const NodeId kn = t.constant(n, d, std::move(k));
  const NodeId a = ad::cosine_attention(t, qn, kn, dst, src, tau);
  return {t.value(a).begin(), t.value(a).end()};
}

Vec3 IrrepFeatures::vector(int atom, int channel) const {
  const double* p = vectors.data() + static_cast<std::size_t>(atom) * 3 * f1 + 3 * channel;
  return {p[0], p[1], p[2]};
}

// ---- parameters ----------------------------------------------------------

namespace {

struct LayerIdx {
  int wq, wk, wv, wr, m1w, m1b, m2w, m2b, g1w, g1b, g2w, g2b;
};

struct Layout {
  int embed;
  std::vector<LayerIdx> layers;
  int e1w, e1b, e2w, e2b, fw, fb;
};

constexpr int kParamsPerLayer = 12;

Layout layout_for(const ModelConfig& c) {
  Layout l{};
  int p = 0;
  l.embed = p++;
  for (int k = 0; k < c.layers; ++k) {
    LayerIdx li{};
    int* fields[] = {&li.wq, &li.wk, &li.wv, &li.wr, &li.m1w, &li.m1b, &li.m2w, &li.m2b, &li.g1w, &li.g1b, &li.g2w, &li.g2b};
    for (int* f : fields) *f = p++;
    l.layers.push_back(li);
  }
  l.e1w = p++;
  l.e1b = p++;
  l.e2w = p++;
  l.e2b = p++;
  l.fw = p++;
  l.fb = p++;
  return l;
}

}  // namespace

Model::Model(ModelConfig cfg) : config_(std::move(cfg)) {
  config_.validate();
  codebook_ = SphericalCodebook::build(config_.codebook);
  quant_.mode = config_.quant_mode;
  init_params();
}

void Model::init_params() {
  const ModelConfig& c = config_;
  const int x = c.f0 + c.f1;            // attention / value input width
  const int gate_in = 2 * x + c.rbf_count;
  const int hidden = c.f0;
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto weight = [&](std::string name, int rows, int cols) {
    Tensor t{std::move(name), rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols), true};
    const double gain = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& v : t.data) v = gain * normal(rng);
    params_.push_back(std::move(t));
  };
  auto bias = [&](std::string name, int cols) {
    params_.push_back(Tensor{std::move(name), 1, cols, std::vector<double>(cols, 0.0), false});
  };

  params_.clear();
  weight("embed", c.n_species, c.f0);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    weight(p + "query", x, c.f0);
    weight(p + "key", x, c.f0);
    weight(p + "value", x, c.f0);
    weight(p + "rbf_gate", c.rbf_count, c.f0);
    weight(p + "mlp1.w", c.f0, c.f0);
    bias(p + "mlp1.b", c.f0);
    weight(p + "mlp2.w", c.f0, c.f0);
    bias(p + "mlp2.b", c.f0);
    weight(p + "gate1.w", gate_in, hidden);
    bias(p + "gate1.b", hidden);
    weight(p + "gate2.w", hidden, 2 * c.f1);
    bias(p + "gate2.b", 2 * c.f1);
  }
  weight("energy1.w", c.f0, c.f0);
  bias("energy1.b", c.f0);
  weight("energy2.w", c.f0, 1);
  bias("energy2.b", 1);
  weight("force.w", c.f0, c.f1);
  bias("force.b", c.f1);
}

void Model::set_mode(QuantMode m) {
  if (m == config_.quant_mode) return;
  config_.quant_mode = m;
  quant_ = QuantState{};
  quant_.mode = m;
  packed_ = {};
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params_) n += t.data.size();
  return n;
}

std::size_t Model::weight_element_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params_)
    if (t.is_weight) n += t.data.size();
  return n;
}

void Model::pack_weights() {
  packed_ = {};
  const int bits = config_.weight_bits();
  if (bits == 32) return;
  const bool per_tensor = config_.quant_mode == QuantMode::NaiveInt8;
  for (const Tensor& t : params_) {
    if (!t.is_weight) continue;
    const auto scales = ad::weight_column_scales(t.data, t.rows, t.cols, bits, per_tensor);
    std::vector<std::uint32_t> codes(t.data.size());
    for (int r = 0; r < t.rows; ++r)
      for (int c = 0; c < t.cols; ++c)
        codes[r * t.cols + c] =
            to_unsigned_code(linear_code(t.data[r * t.cols + c], QuantScheme::linear(bits, scales[c])), bits);
    PackedTensor p = pack(codes, bits);
    p.shape = {static_cast<std::uint32_t>(t.rows), static_cast<std::uint32_t>(t.cols)};
    const int n_schemes = per_tensor ? 1 : t.cols;
    for (int c = 0; c < n_schemes; ++c) p.schemes.push_back(QuantScheme::linear(bits, scales[c]));
    packed_.blocks.push_back(std::move(p));
  }
}

// ---- forward -------------------------------------------------------------

ParamNodes register_params(Tape& tape, const Model& model, const ForwardOptions& opts) {
  ScopedPhase phase(opts.profiler, Phase::WeightIO);
  const ModelConfig& c = model.config();
  ParamNodes out;
  const bool quantized = c.quant_mode != QuantMode::Fp32;
  const bool use_packed = quantized && !opts.record_params && !model.packed().empty();
  std::size_t block = 0;
  for (const Tensor& t : model.params()) {
    if (use_packed && t.is_weight) {
      // Dequantize straight from the packed codes.
      const PackedTensor& p = model.packed().blocks.at(block++);
      const auto codes = unpack(p);
      std::vector<double> w(codes.size());
      for (int r = 0; r < t.rows; ++r)
        for (int col = 0; col < t.cols; ++col) {
          const QuantScheme& s = p.schemes.size() == 1 ? p.schemes[0] : p.schemes[col];
          w[r * t.cols + col] = to_signed_code(codes[r * t.cols + col], p.bits) * s.scale;
        }
      const NodeId id = tape.constant(t.rows, t.cols, std::move(w));
      out.leaves.push_back(id);
      out.effective.push_back(id);
      continue;
    }
    const NodeId leaf = tape.leaf(t.rows, t.cols, t.data, opts.record_params);
    out.leaves.push_back(leaf);
    if (quantized && t.is_weight)
      out.effective.push_back(ad::fake_quant_weight(tape, leaf, c.weight_bits(), c.quant_mode == QuantMode::NaiveInt8));
    else
      out.effective.push_back(leaf);
  }
  return out;
}

namespace {

struct Geometry {
  int n_atoms = 0;
  std::vector<int> dst, src;
  NodeId rbf = -1;   // E x R
  NodeId env = -1;   // E x 1
  NodeId unit = -1;  // E x 3
  int n_edges() const { return static_cast<int>(dst.size()); }
};

Geometry record_geometry(Tape& t, const ModelConfig& c, const MolecularFrame& frame) {
  Geometry g;
  g.n_atoms = static_cast<int>(frame.atom_count());
  const auto edges = neighbor_list(frame, c.cutoff);
  std::vector<double> rbf, env, unit;
  for (const Edge& e : edges) {
    if (e.dij <= 0.0) throw Error(ErrorCode::ShapeMismatch, "coincident atoms");
    g.dst.push_back(e.i);
    g.src.push_back(e.j);
    const auto b = radial_basis(e.dij, c.rbf_count, c.cutoff);
    rbf.insert(rbf.end(), b.begin(), b.end());
    env.push_back(cosine_cutoff(e.dij, c.cutoff));
    const Vec3 u = e.rij / e.dij;
    unit.insert(unit.end(), {u.x, u.y, u.z});
  }
  const int ne = g.n_edges();
  g.rbf = t.constant(ne, c.rbf_count, std::move(rbf));
  g.env = t.constant(ne, 1, std::move(env));
  g.unit = t.constant(ne, 3, std::move(unit));
  return g;
}

struct Features {
  NodeId s;  // n x f0
  NodeId v;  // n x 3 f1
};

Features quantize_layer_input(Tape& t, const Model& model, int layer, Features in, const ForwardOptions& opts) {
  const ModelConfig& c = model.config();
  if (c.quant_mode == QuantMode::Fp32) return in;
  const QuantState& qs = model.quant();
  if (qs.mode != c.quant_mode || static_cast<int>(qs.layers.size()) != c.layers)
    throw Error(ErrorCode::ShapeMismatch, "quantized forward without a matching calibration");
  const LayerQuant& lq = qs.layers[layer];
  ScopedPhase phase(opts.profiler, Phase::QuantOverhead);
  const bool frozen = opts.equivariant_frozen || qs.equivariant_branch_frozen;
  if (c.quant_mode == QuantMode::GaqW4A8) {
    in.s = ad::fake_quant_linear(t, in.s, lq.scalar);
    if (!frozen) in.v = ad::fake_quant_mddq(t, in.v, lq.magnitude, model.codebook(), opts.direction_grad, opts.direction_calls);
  } else {
    const std::span<const QuantScheme> one(&lq.tensor, 1);
    in.s = ad::fake_quant_linear(t, in.s, one);
    if (!frozen) in.v = ad::fake_quant_linear(t, in.v, one);
  }
  return in;
}

IrrepFeatures read_features(const Tape& t, const ModelConfig& c, Features f) {
  IrrepFeatures out;
  out.f0 = c.f0;
  out.f1 = c.f1;
  out.scalars.assign(t.value(f.s).begin(), t.value(f.s).end());
  out.vectors.assign(t.value(f.v).begin(), t.value(f.v).end());
  return out;
}

Features record_layer(Tape& t, const Model& model, const ParamNodes& pn, int layer, Features in, const Geometry& g,
                      const ForwardOptions& opts) {
  const ModelConfig& c = model.config();
  const LayerIdx li = layout_for(c).layers[layer];
  auto W = [&](int idx) { return pn.effective[idx]; };
  const int n = g.n_atoms;

  if (opts.trace) opts.trace->layer_inputs.push_back(read_features(t, c, in));
  in = quantize_layer_input(t, model, layer, in, opts);
  if (g.n_edges() == 0) return in;

  NodeId x, alpha;
  {
    ScopedPhase phase(opts.profiler, Phase::Attention);
    const NodeId norms = ad::channel_norms(t, in.v);
    const NodeId parts[] = {in.s, norms};
    x = ad::concat_cols(t, parts);
    const NodeId q = ad::matmul(t, x, W(li.wq));
    const NodeId k = ad::matmul(t, x, W(li.wk));
    alpha = ad::cosine_attention(t, q, k, g.dst, g.src, c.tau);
  }

  ScopedPhase phase(opts.profiler, Phase::Gemm);
  // scalar branch: s_i += MLP(sum_j alpha_ij (W_v x_j) * (W_r rbf_ij))
  const NodeId value = ad::gather_rows(t, ad::matmul(t, x, W(li.wv)), g.src);
  const NodeId radial = ad::matmul(t, g.rbf, W(li.wr));
  const NodeId msg_s = ad::mul_rows(t, ad::mul(t, value, radial), alpha);
  const NodeId agg_s = ad::scatter_add_rows(t, msg_s, g.dst, n);
  const NodeId h1 = ad::silu(t, ad::add_row_bias(t, ad::matmul(t, agg_s, W(li.m1w)), W(li.m1b)));
  const NodeId ds = ad::add_row_bias(t, ad::matmul(t, h1, W(li.m2w)), W(li.m2b));
  const NodeId s_out = ad::add(t, in.s, ds);

  // vector branch: V_i += sum_j alpha_ij (g1 u_ij + g2 V_j), gates vanish at the cutoff
  const NodeId gate_parts[] = {ad::gather_rows(t, x, g.dst), ad::gather_rows(t, x, g.src), g.rbf};
  const NodeId z = ad::concat_cols(t, gate_parts);
  const NodeId hz = ad::silu(t, ad::add_row_bias(t, ad::matmul(t, z, W(li.g1w)), W(li.g1b)));
  const NodeId gates = ad::mul_rows(t, ad::add_row_bias(t, ad::matmul(t, hz, W(li.g2w)), W(li.g2b)), g.env);
  const NodeId g1 = ad::slice_cols(t, gates, 0, c.f1);
  const NodeId g2 = ad::slice_cols(t, gates, c.f1, c.f1);
  const NodeId msg_v = ad::add(t, ad::outer_dir(t, g1, g.unit), ad::channel_gate(t, ad::gather_rows(t, in.v, g.src), g2));
  const NodeId agg_v = ad::scatter_add_rows(t, ad::mul_rows(t, msg_v, alpha), g.dst, n);
  const NodeId v_out = ad::add(t, in.v, agg_v);
  return {s_out, v_out};
}

Features embed(Tape& t, const Model& model, const ParamNodes& pn, const MolecularFrame& frame) {
  const ModelConfig& c = model.config();
  for (int s : frame.species)
    if (s < 0 || s >= c.n_species) throw Error(ErrorCode::ShapeMismatch, "species index out of range");
  const NodeId s = ad::gather_rows(t, pn.effective[layout_for(c).embed], frame.species);
  const NodeId v = t.constant(static_cast<int>(frame.atom_count()), 3 * c.f1,
                              std::vector<double>(frame.atom_count() * 3 * c.f1, 0.0));
  return {s, v};
}

}  // namespace

ForwardNodes build_forward(Tape& t, const Model& model, const ParamNodes& pn, const MolecularFrame& frame,
                           const ForwardOptions& opts) {
  frame.validate();
  const ModelConfig& c = model.config();
  if (pn.effective.size() != model.params().size()) throw Error(ErrorCode::ShapeMismatch, "parameter count mismatch");
  const Layout lay = layout_for(c);
  Features f;
  Geometry g;
  {
    ScopedPhase phase(opts.profiler, Phase::Gemm);
    g = record_geometry(t, c, frame);
    f = embed(t, model, pn, frame);
  }
  for (int l = 0; l < c.layers; ++l) f = record_layer(t, model, pn, l, f, g, opts);

  ScopedPhase phase(opts.profiler, Phase::Gemm);
  const NodeId he = ad::silu(t, ad::add_row_bias(t, ad::matmul(t, f.s, pn.effective[lay.e1w]), pn.effective[lay.e1b]));
  const NodeId atom_e = ad::add_row_bias(t, ad::matmul(t, he, pn.effective[lay.e2w]), pn.effective[lay.e2b]);
  const NodeId energy = ad::sum_all(t, atom_e);
  const NodeId w = ad::add_row_bias(t, ad::matmul(t, f.s, pn.effective[lay.fw]), pn.effective[lay.fb]);
  const NodeId forces = ad::channel_sum(t, ad::channel_gate(t, f.v, w));
  return {energy, forces};
}

Prediction predict(const Model& model, const MolecularFrame& frame, const ForwardOptions& opts_in) {
  ForwardOptions opts = opts_in;
  opts.record_params = false;
  Tape t(false);
  const ParamNodes pn = register_params(t, model, opts);
  const ForwardNodes out = build_forward(t, model, pn, frame, opts);
  Prediction p;
  p.energy = t.scalar_value(out.energy);
  const auto fv = t.value(out.forces);
  for (std::size_t i = 0; i < frame.atom_count(); ++i) p.forces.push_back({fv[3 * i], fv[3 * i + 1], fv[3 * i + 2]});
  return p;
}

IrrepFeatures layer_forward(const Model& model, int layer, const IrrepFeatures& input, const MolecularFrame& frame,
                            const ForwardOptions& opts_in) {
  const ModelConfig& c = model.config();
  if (layer < 0 || layer >= c.layers) throw Error(ErrorCode::ShapeMismatch, "layer index out of range");
  const int n = static_cast<int>(frame.atom_count());
  if (input.f0 != c.f0 || input.f1 != c.f1 || static_cast<int>(input.scalars.size()) != n * c.f0 ||
      static_cast<int>(input.vectors.size()) != n * 3 * c.f1)
    throw Error(ErrorCode::ShapeMismatch, "feature shape does not match model/frame");
  ForwardOptions opts = opts_in;
  opts.record_params = false;
  Tape t(false);
  const ParamNodes pn = register_params(t, model, opts);
  const Geometry g = record_geometry(t, c, frame);
  Features f{t.constant(n, c.f0, input.scalars), t.constant(n, 3 * c.f1, input.vectors)};
  f = record_layer(t, model, pn, layer, f, g, opts);
  return read_features(t, c, f);
}

double frame_lee(const Model& model, const MolecularFrame& frame, const Rotation& r, const ForwardOptions& opts) {
  const Prediction base = predict(model, frame, opts);
  const Prediction rotated = predict(model, rotate_frame(frame, r), opts);
  double acc = 0.0;
  for (std::size_t i = 0; i < base.forces.size(); ++i) {
    const Vec3 d = rotated.forces[i] - r.apply(base.forces[i]);
    acc += dot(d, d);
  }
  return std::sqrt(acc);
}

// ---- checkpoint ----------------------------------------------------------

namespace {

void write_schemes_block(std::ostream& os, const std::vector<QuantScheme>& schemes, int bits) {
  PackedTensor p;
  p.bits = bits;
  p.shape = {0};
  p.schemes = schemes;
  p.write(os);
}

std::vector<QuantScheme> read_schemes_block(std::istream& is, QuantKind expected) {
  PackedTensor p = PackedTensor::read(is);
  for (const QuantScheme& s : p.schemes)
    if (s.kind != expected) throw Error(ErrorCode::CheckpointLoadError, "unexpected scheme kind");
  return p.schemes;
}

}  // namespace

void Model::save(std::ostream& os) const {
  const ModelConfig& c = config_;
  bin::write_magic(os, "EQMD");
  bin::write_u16(os, 1);
  bin::write_u32(os, static_cast<std::uint32_t>(c.layers));
  bin::write_u32(os, static_cast<std::uint32_t>(c.f0));
  bin::write_u32(os, static_cast<std::uint32_t>(c.f1));
  bin::write_u32(os, static_cast<std::uint32_t>(c.rbf_count));
  bin::write_u32(os, static_cast<std::uint32_t>(c.n_species));
  bin::write_f64(os, c.cutoff);
  bin::write_f64(os, c.tau);
  bin::write_u8(os, static_cast<std::uint8_t>(c.quant_mode));
  bin::write_string(os, c.codebook.tag());
  bin::write_u64(os, c.seed);
  bin::write_u32(os, static_cast<std::uint32_t>(params_.size()));
  for (const Tensor& t : params_) {
    bin::write_u32(os, static_cast<std::uint32_t>(t.rows));
    bin::write_u32(os, static_cast<std::uint32_t>(t.cols));
    for (double v : t.data) bin::write_f64(os, v);
  }
  const bool quantized = c.quant_mode != QuantMode::Fp32 && quant_.calibrated();
  bin::write_u8(os, quantized ? 1 : 0);
  if (!quantized) return;
  bin::write_u32(os, codebook_.spec().id());
  bin::write_u32(os, static_cast<std::uint32_t>(packed_.blocks.size()));
  for (const PackedTensor& p : packed_.blocks) p.write(os);
  bin::write_u32(os, static_cast<std::uint32_t>(quant_.layers.size()));
  for (const LayerQuant& lq : quant_.layers) {
    write_schemes_block(os, lq.scalar, 8);
    write_schemes_block(os, lq.magnitude, 8);
    write_schemes_block(os, {lq.tensor}, 8);
  }
  bin::write_u8(os, quant_.equivariant_branch_frozen ? 1 : 0);
}

Model Model::load(std::istream& is) {
  try {
    bin::expect_magic(is, "EQMD");
    if (bin::read_u16(is) != 1) throw Error(ErrorCode::CheckpointLoadError, "unsupported EQMD version");
    ModelConfig c;
    c.layers = static_cast<int>(bin::read_u32(is));
    c.f0 = static_cast<int>(bin::read_u32(is));
    c.f1 = static_cast<int>(bin::read_u32(is));
    c.rbf_count = static_cast<int>(bin::read_u32(is));
    c.n_species = static_cast<int>(bin::read_u32(is));
    c.cutoff = bin::read_f64(is);
    c.tau = bin::read_f64(is);
    const std::uint8_t mode = bin::read_u8(is);
    if (mode > 2) throw Error(ErrorCode::CheckpointLoadError, "bad quant mode");
    c.quant_mode = static_cast<QuantMode>(mode);
    c.codebook = CodebookSpec::parse(bin::read_string(is));
    c.seed = bin::read_u64(is);
    Model m(c);
    if (bin::read_u32(is) != m.params_.size()) throw Error(ErrorCode::CheckpointLoadError, "parameter count mismatch");
    for (Tensor& t : m.params_) {
      if (static_cast<int>(bin::read_u32(is)) != t.rows || static_cast<int>(bin::read_u32(is)) != t.cols)
        throw Error(ErrorCode::CheckpointLoadError, "tensor shape mismatch for " + t.name);
      for (double& v : t.data) v = bin::read_f64(is);
    }
    if (bin::read_u8(is) == 0) return m;
    if (bin::read_u32(is) != m.codebook_.spec().id()) throw Error(ErrorCode::CheckpointLoadError, "codebook id mismatch");
    const std::uint32_t n_blocks = bin::read_u32(is);
    for (std::uint32_t b = 0; b < n_blocks; ++b) m.packed_.blocks.push_back(PackedTensor::read(is));
    const std::uint32_t n_layers = bin::read_u32(is);
    if (static_cast<int>(n_layers) != c.layers) throw Error(ErrorCode::CheckpointLoadError, "layer count mismatch");
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      LayerQuant lq;
      lq.scalar = read_schemes_block(is, QuantKind::LinearSymmetric);
      lq.magnitude = read_schemes_block(is, QuantKind::MagnitudeLog);
      const auto tensor = read_schemes_block(is, QuantKind::LinearSymmetric);
      if (tensor.size() != 1) throw Error(ErrorCode::CheckpointLoadError, "bad tensor scheme block");
      lq.tensor = tensor[0];
      m.quant_.layers.push_back(std::move(lq));
    }
    m.quant_.equivariant_branch_frozen = bin::read_u8(is) != 0;
    return m;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CheckpointLoadError) throw;
    throw Error(ErrorCode::CheckpointLoadError, e.what());
  }
}

void Model::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::CheckpointLoadError, "cannot write " + path);
  save(os);
}

Model Model::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::CheckpointLoadError, "cannot open " + path);
  return load(is);
}

}  // namespace gaq
