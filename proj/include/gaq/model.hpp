#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gaq/codebook.hpp"
#include "gaq/geom.hpp"
#include "gaq/profiler.hpp"
#include "gaq/quantizers.hpp"
#include "gaq/tape.hpp"

namespace gaq {

enum class QuantMode : std::uint8_t { Fp32 = 0, NaiveInt8 = 1, GaqW4A8 = 2 };

std::string_view quant_mode_name(QuantMode m);
QuantMode parse_quant_mode(std::string_view s);

struct ModelConfig {
  int layers = 2;
  int f0 = 32;         // scalar (l = 0) channels
  int f1 = 8;          // vector (l = 1) channels
  int rbf_count = 16;
  double cutoff = 4.0;  // Angstrom
  double tau = 10.0;
  int n_species = 4;
  QuantMode quant_mode = QuantMode::Fp32;
  CodebookSpec codebook = CodebookSpec::fibonacci(256);
  std::uint64_t seed = 0;

  void validate() const;
  int weight_bits() const;  // 32 for fp32
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One training/evaluation record; labels are present together or not at all.
struct MolecularFrame {
  std::vector<int> species;
  std::vector<Vec3> positions;  // Angstrom
  std::optional<double> energy;  // eV
  std::optional<std::vector<Vec3>> forces;  // eV / Angstrom

  std::size_t atom_count() const { return positions.size(); }
  bool labeled() const { return energy.has_value() && forces.has_value(); }
  void validate() const;
};

/// Rotates positions (and force labels) about the origin.
MolecularFrame rotate_frame(const MolecularFrame& f, const Rotation& r);
MolecularFrame translate_frame(const MolecularFrame& f, Vec3 shift);

struct Edge {
  int i;  // receiver
  int j;  // sender
  Vec3 rij;  // r_j - r_i
  double dij;
};

/// All ordered pairs i != j with |r_j - r_i| <= cutoff, sorted by (i, j).
std::vector<Edge> neighbor_list(const MolecularFrame& frame, double cutoff);

double cosine_cutoff(double d, double cutoff);
/// Gaussian basis with centres cutoff*(k+1)/K and width cutoff/K, multiplied
/// by the cosine envelope.
std::vector<double> radial_basis(double d, int rbf_count, double cutoff);

/// Softmax over each receiver's edges of tau * cos(q_i, k_j).
std::vector<double> attention_weights(std::span<const std::vector<double>> queries,
                                      std::span<const std::vector<double>> keys, std::span<const int> dst,
                                      std::span<const int> src, double tau);

struct Tensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  bool is_weight = false;  // weight matrices are quantized, biases are not
};

/// Per-channel scalar features and per-channel 3-vectors for every atom.
struct IrrepFeatures {
  int f0 = 0;
  int f1 = 0;
  std::vector<double> scalars;  // n x f0
  std::vector<double> vectors;  // n x 3 f1, channel c at columns 3c..3c+2

  int atom_count() const { return f0 > 0 ? static_cast<int>(scalars.size()) / f0 : 0; }
  Vec3 vector(int atom, int channel) const;
};

/// Quantizer settings for the input of one interaction layer.
struct LayerQuant {
  std::vector<QuantScheme> scalar;     // gaq: per scalar channel
  std::vector<QuantScheme> magnitude;  // gaq: per vector channel
  QuantScheme tensor;                  // naive: one scale for all features
};

struct QuantState {
  QuantMode mode = QuantMode::Fp32;
  std::vector<LayerQuant> layers;
  bool equivariant_branch_frozen = false;
  bool calibrated() const { return !layers.empty(); }
};

/// Packed low-bit copy of every weight matrix (declaration order).
struct PackedWeights {
  std::vector<PackedTensor> blocks;
  bool empty() const { return blocks.empty(); }
};

struct ForwardTrace {
  std::vector<IrrepFeatures> layer_inputs;
};

struct ForwardOptions {
  ad::DirectionGrad direction_grad = ad::DirectionGrad::Geometric;
  bool equivariant_frozen = false;          // warm-up: vector activations bypass quantization
  std::uint64_t* direction_calls = nullptr;  // direction lookups on the vector path
  PhaseProfiler* profiler = nullptr;
  ForwardTrace* trace = nullptr;
  bool record_params = true;  // create parameter leaves that require grad
};

struct Prediction {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return config_; }
  /// Switches the forward mode; clears the calibration when it changes.
  void set_mode(QuantMode m);

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::size_t param_count() const;
  std::size_t weight_element_count() const;

  QuantState& quant() { return quant_; }
  const QuantState& quant() const { return quant_; }
  const SphericalCodebook& codebook() const { return codebook_; }

  PackedWeights& packed() { return packed_; }
  const PackedWeights& packed() const { return packed_; }
  /// Packs every weight matrix at the mode's weight width.
  void pack_weights();

  void save(std::ostream& os) const;
  static Model load(std::istream& is);
  void save_file(const std::string& path) const;
  static Model load_file(const std::string& path);

 private:
  void init_params();

  ModelConfig config_;
  std::vector<Tensor> params_;
  QuantState quant_;
  SphericalCodebook codebook_ = SphericalCodebook::build(CodebookSpec::octahedron());
  PackedWeights packed_;
};

/// Tape handles for the parameters, created once per tape so several
/// forwards (e.g. rotated copies for the equivariance penalty) share them.
struct ParamNodes {
  std::vector<ad::NodeId> leaves;     // raw parameters (gradients land here)
  std::vector<ad::NodeId> effective;  // after weight quantization
};

ParamNodes register_params(ad::Tape& tape, const Model& model, const ForwardOptions& opts);

struct ForwardNodes {
  ad::NodeId energy;  // 1 x 1
  ad::NodeId forces;  // n x 3
};

/// Records one full forward pass on `tape`. Throws ShapeMismatch for
/// inconsistent inputs or a quantized mode without calibration.
ForwardNodes build_forward(ad::Tape& tape, const Model& model, const ParamNodes& params, const MolecularFrame& frame,
                           const ForwardOptions& opts);

/// Inference without gradient recording.
Prediction predict(const Model& model, const MolecularFrame& frame, const ForwardOptions& opts = {});

/// Runs one interaction layer on explicit features (unquantized inputs
/// except as configured by the model's mode); used by tests.
IrrepFeatures layer_forward(const Model& model, int layer, const IrrepFeatures& input, const MolecularFrame& frame,
                            const ForwardOptions& opts = {});

/// ||F(R G) - R F(G)|| over all force components of one frame.
double frame_lee(const Model& model, const MolecularFrame& frame, const Rotation& r, const ForwardOptions& opts = {});

}  // namespace gaq
