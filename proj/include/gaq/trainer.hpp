#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "gaq/geom.hpp"
#include "gaq/model.hpp"

namespace gaq {

struct TrainConfig {
  int epochs = 80;
  int n_warm = 10;
  double lr = 2e-3;
  double lr_decay = 0.97;
  double lee_weight = 0.01;
  int lee_rotations_per_sample = 1;
  int batch_size = 8;
  double force_weight = 10.0;
  std::uint64_t seed = 0;
  int threads = 1;
  ad::DirectionGrad direction_grad = ad::DirectionGrad::Geometric;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double e_mae = 0.0;
  double f_mae = 0.0;
  double lee = 0.0;
};

struct TrainStats {
  std::uint64_t steps = 0;
  std::uint64_t warm_direction_calls = 0;  // direction lookups while the vector branch was frozen
  std::uint64_t direction_calls = 0;
  std::uint64_t projections = 0;
  std::vector<double> step_max_radial;  // max |<u, dL/du>| per optimizer step
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  TrainStats stats;
};

/// Source of rotations for the equivariance penalty.
using RotationSource = std::function<Rotation()>;

/// Quantizer settings for the model's current mode from an FP32 pass over
/// `frames`. Needs at least 16 frames (EmptyCalibrationSet otherwise).
QuantState calibrate(const Model& model, std::span<const MolecularFrame> frames);

/// Mean over n_rot rotations of ||F(R G) - R F(G)||.
double lee_loss(const Model& model, const MolecularFrame& frame, int n_rot, const RotationSource& rotations,
                const ForwardOptions& opts = {});
double lee_loss(const Model& model, const MolecularFrame& frame, int n_rot, RotationSampler& sampler,
                const ForwardOptions& opts = {});

/// Records the penalty on `tape` so it is differentiable with respect to the
/// parameter leaves in `params`. `forces` is the unrotated prediction.
ad::NodeId record_lee(ad::Tape& tape, const Model& model, const ParamNodes& params, const MolecularFrame& frame,
                      ad::NodeId forces, std::span<const Rotation> rotations, const ForwardOptions& opts);

/// Quantization-aware training (plain training in fp32 mode). Quantized modes
/// recalibrate at the start of every epoch and pack the weights at the end.
/// Throws DivergedLoss with the parameters restored to the last finite epoch.
TrainResult train(Model& model, std::span<const MolecularFrame> dataset, const TrainConfig& tc);

void write_metrics_csv(std::ostream& os, std::span<const EpochMetrics> history);

}  // namespace gaq
