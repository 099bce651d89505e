#include "gaq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "gaq/error.hpp"

namespace gaq {

using ad::NodeId;
using ad::Tape;

void TrainConfig::validate() const {
  if (epochs < 0 || n_warm < 0 || n_warm > epochs) throw Error(ErrorCode::UsageError, "need 0 <= n_warm <= epochs");
  if (!(lee_weight >= 0.0)) throw Error(ErrorCode::UsageError, "lee_weight must be >= 0");
  if (lee_rotations_per_sample < 1) throw Error(ErrorCode::UsageError, "lee_rotations_per_sample must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::UsageError, "batch_size must be >= 1");
  if (!(lr > 0.0) || !(lr_decay > 0.0)) throw Error(ErrorCode::UsageError, "lr and lr_decay must be positive");
  if (threads < 1) throw Error(ErrorCode::UsageError, "threads must be >= 1");
}

// ---- calibration ---------------------------------------------------------

QuantState calibrate(const Model& model, std::span<const MolecularFrame> frames) {
  constexpr std::size_t kMinFrames = 16;
  if (frames.size() < kMinFrames)
    throw Error(ErrorCode::EmptyCalibrationSet,
                "calibration needs at least 16 frames, got " + std::to_string(frames.size()));
  const ModelConfig& c = model.config();
  QuantState qs;
  qs.mode = c.quant_mode;
  if (c.quant_mode == QuantMode::Fp32) return qs;

  Model fp = model;
  fp.set_mode(QuantMode::Fp32);
  std::vector<std::vector<double>> s_max(c.layers, std::vector<double>(c.f0, 0.0));
  std::vector<std::vector<double>> m_lo(c.layers, std::vector<double>(c.f1, INFINITY));
  std::vector<std::vector<double>> m_hi(c.layers, std::vector<double>(c.f1, 0.0));
  std::vector<double> t_max(c.layers, 0.0);
  for (const MolecularFrame& f : frames) {
    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    predict(fp, f, opts);
    for (int l = 0; l < c.layers; ++l) {
      const IrrepFeatures& in = trace.layer_inputs[l];
      for (int a = 0; a < in.atom_count(); ++a) {
        for (int ch = 0; ch < c.f0; ++ch) {
          const double v = std::abs(in.scalars[a * c.f0 + ch]);
          s_max[l][ch] = std::max(s_max[l][ch], v);
          t_max[l] = std::max(t_max[l], v);
        }
        for (int ch = 0; ch < c.f1; ++ch) {
          const Vec3 v = in.vector(a, ch);
          t_max[l] = std::max({t_max[l], std::abs(v.x), std::abs(v.y), std::abs(v.z)});
          const double m = norm(v);
          if (m == 0.0) continue;
          m_lo[l][ch] = std::min(m_lo[l][ch], m);
          m_hi[l][ch] = std::max(m_hi[l][ch], m);
        }
      }
    }
  }
  for (int l = 0; l < c.layers; ++l) {
    LayerQuant lq;
    for (int ch = 0; ch < c.f0; ++ch) {
      const double mx = s_max[l][ch] > 0.0 ? s_max[l][ch] : 1.0;
      lq.scalar.push_back(QuantScheme::linear(8, mx / 127.0));
    }
    for (int ch = 0; ch < c.f1; ++ch) {
      const bool seen = m_hi[l][ch] > 0.0;
      lq.magnitude.push_back(QuantScheme::magnitude_for_range(8, seen ? m_lo[l][ch] : 1e-6, seen ? m_hi[l][ch] : 1.0));
    }
    lq.tensor = QuantScheme::linear(8, (t_max[l] > 0.0 ? t_max[l] : 1.0) / 127.0);
    qs.layers.push_back(std::move(lq));
  }
  return qs;
}

// ---- equivariance penalty ------------------------------------------------

namespace {

std::vector<double> transposed(const Rotation& r) {
  std::vector<double> m(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i * 3 + j] = r(j, i);
  return m;
}

std::vector<double> flatten(std::span<const Vec3> vs) {
  std::vector<double> out;
  out.reserve(vs.size() * 3);
  for (const Vec3& v : vs) out.insert(out.end(), {v.x, v.y, v.z});
  return out;
}

}  // namespace

NodeId record_lee(Tape& t, const Model& model, const ParamNodes& params, const MolecularFrame& frame, NodeId forces,
                  std::span<const Rotation> rotations, const ForwardOptions& opts) {
  if (rotations.empty()) throw Error(ErrorCode::UsageError, "need at least one rotation");
  NodeId total = -1;
  for (const Rotation& r : rotations) {
    const ForwardNodes rotated = build_forward(t, model, params, rotate_frame(frame, r), opts);
    // Row f of F R^T is (R f)^T.
    const NodeId expected = ad::matmul(t, forces, t.constant(3, 3, transposed(r)));
    const NodeId err = ad::l2_norm(t, ad::sub(t, rotated.forces, expected));
    total = total < 0 ? err : ad::add(t, total, err);
  }
  return ad::scale(t, total, 1.0 / static_cast<double>(rotations.size()));
}

double lee_loss(const Model& model, const MolecularFrame& frame, int n_rot, const RotationSource& rotations,
                const ForwardOptions& opts) {
  if (n_rot < 1) throw Error(ErrorCode::UsageError, "n_rot must be >= 1");
  double acc = 0.0;
  for (int k = 0; k < n_rot; ++k) acc += frame_lee(model, frame, rotations(), opts);
  return acc / n_rot;
}

double lee_loss(const Model& model, const MolecularFrame& frame, int n_rot, RotationSampler& sampler,
                const ForwardOptions& opts) {
  return lee_loss(model, frame, n_rot, [&] { return sampler.next(); }, opts);
}

// ---- training ------------------------------------------------------------

namespace {

struct FrameResult {
  std::vector<std::vector<double>> grads;  // per parameter tensor
  double loss = 0.0;
  double e_abs = 0.0;
  double f_mae = 0.0;
  double lee = 0.0;
  std::uint64_t direction_calls = 0;
  double max_radial = 0.0;
  std::uint64_t projections = 0;
};

FrameResult frame_step(const Model& model, const MolecularFrame& frame, std::span<const Rotation> rotations,
                       const TrainConfig& tc, ForwardOptions opts) {
  FrameResult fr;
  opts.direction_calls = &fr.direction_calls;
  opts.record_params = true;
  Tape t;
  const ParamNodes pn = register_params(t, model, opts);
  const ForwardNodes out = build_forward(t, model, pn, frame, opts);
  const NodeId e_err = ad::mean_abs(t, ad::sub(t, out.energy, t.scalar(*frame.energy)));
  const int n = static_cast<int>(frame.atom_count());
  const NodeId f_err = ad::mean_abs(t, ad::sub(t, out.forces, t.constant(n, 3, flatten(*frame.forces))));
  NodeId loss = ad::add(t, e_err, ad::scale(t, f_err, tc.force_weight));
  if (tc.lee_weight > 0.0) {
    const NodeId lee = record_lee(t, model, pn, frame, out.forces, rotations, opts);
    fr.lee = t.scalar_value(lee);
    loss = ad::add(t, loss, ad::scale(t, lee, tc.lee_weight));
  } else {
    ForwardOptions inference = opts;
    inference.direction_calls = nullptr;
    double acc = 0.0;
    for (const Rotation& r : rotations) acc += frame_lee(model, frame, r, inference);
    fr.lee = acc / static_cast<double>(rotations.size());
  }
  fr.loss = t.scalar_value(loss);
  fr.e_abs = t.scalar_value(e_err);
  fr.f_mae = t.scalar_value(f_err);
  t.backward(loss);
  fr.max_radial = t.ste_stats().max_radial;
  fr.projections = t.ste_stats().projections;
  fr.grads.reserve(pn.leaves.size());
  for (std::size_t p = 0; p < pn.leaves.size(); ++p) {
    const auto g = t.grad(pn.leaves[p]);
    if (g.empty())
      fr.grads.emplace_back(model.params()[p].data.size(), 0.0);
    else
      fr.grads.emplace_back(g.begin(), g.end());
  }
  return fr;
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, double lr) {
    if (m.empty())
      for (const Tensor& p : params) {
        m.emplace_back(p.data.size(), 0.0);
        v.emplace_back(p.data.size(), 0.0);
      }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t i = 0; i < params[p].data.size(); ++i) {
        const double g = grads[p][i];
        m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * g;
        v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * g * g;
        params[p].data[i] -= lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + eps);
      }
  }
};

}  // namespace

TrainResult train(Model& model, std::span<const MolecularFrame> dataset, const TrainConfig& tc) {
  tc.validate();
  if (dataset.empty()) throw Error(ErrorCode::UsageError, "empty training set");
  for (const MolecularFrame& f : dataset) {
    f.validate();
    if (!f.labeled()) throw Error(ErrorCode::UsageError, "training frames must carry energy and force labels");
  }
  const bool quantized = model.config().quant_mode != QuantMode::Fp32;
  // Stale packed codes would shadow the weights being trained.
  model.packed() = {};
  TrainResult result;
  Adam adam;
  std::mt19937_64 shuffle_rng(tc.seed);
  RotationSampler rotations(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const bool frozen = epoch < tc.n_warm;
    if (quantized) {
      model.quant() = calibrate(model, dataset);
      model.quant().equivariant_branch_frozen = frozen;
    }
    const std::vector<Tensor> snapshot = model.params();
    const double lr = tc.lr * std::pow(tc.lr_decay, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    ForwardOptions opts;
    opts.direction_grad = tc.direction_grad;
    opts.equivariant_frozen = frozen;

    EpochMetrics em;
    em.epoch = epoch;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + tc.batch_size);
      const std::size_t nb = b1 - b0;
      std::vector<std::vector<Rotation>> rots(nb);
      for (auto& r : rots)
        for (int k = 0; k < tc.lee_rotations_per_sample; ++k) r.push_back(rotations.next());

      std::vector<FrameResult> results(nb);
      const int workers = std::min<int>(tc.threads, static_cast<int>(nb));
      auto work = [&](int w) {
        for (std::size_t i = w; i < nb; i += workers) results[i] = frame_step(model, dataset[order[b0 + i]], rots[i], tc, opts);
      };
      if (workers <= 1) {
        work(0);
      } else {
        std::vector<std::jthread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
      }

      // Fixed-order reduction keeps results independent of the thread count.
      std::vector<std::vector<double>> grads = results[0].grads;
      for (std::size_t i = 1; i < nb; ++i)
        for (std::size_t p = 0; p < grads.size(); ++p)
          for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p][k] += results[i].grads[p][k];
      double max_radial = 0.0, batch_loss = 0.0;
      for (const FrameResult& fr : results) {
        batch_loss += fr.loss;
        em.loss += fr.loss;
        em.e_mae += fr.e_abs;
        em.f_mae += fr.f_mae;
        em.lee += fr.lee;
        max_radial = std::max(max_radial, fr.max_radial);
        result.stats.projections += fr.projections;
        result.stats.direction_calls += fr.direction_calls;
        if (frozen) result.stats.warm_direction_calls += fr.direction_calls;
      }
      if (!std::isfinite(batch_loss)) {
        model.params() = snapshot;
        throw Error(ErrorCode::DivergedLoss, "non-finite loss in epoch " + std::to_string(epoch));
      }
      for (auto& g : grads)
        for (double& x : g) x /= static_cast<double>(nb);
      adam.step(model.params(), grads, lr);
      result.stats.step_max_radial.push_back(max_radial);
      ++result.stats.steps;
    }
    const double n = static_cast<double>(dataset.size());
    em.loss /= n;
    em.e_mae /= n;
    em.f_mae /= n;
    em.lee /= n;
    result.history.push_back(em);
  }

  if (quantized) {
    const bool never_unfrozen = tc.n_warm >= tc.epochs;
    model.quant() = calibrate(model, dataset);
    model.quant().equivariant_branch_frozen = never_unfrozen;
    model.pack_weights();
  }
  return result;
}

void write_metrics_csv(std::ostream& os, std::span<const EpochMetrics> history) {
  os << "epoch,loss,e_mae,f_mae,lee\n";
  char buf[256];
  for (const EpochMetrics& m : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", m.epoch, m.loss, m.e_mae, m.f_mae, m.lee);
    os << buf;
  }
}

}  // namespace gaq
