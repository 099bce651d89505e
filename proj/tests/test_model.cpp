#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "gaq/dataset.hpp"
#include "gaq/error.hpp"
#include "gaq/model.hpp"
#include "gaq/trainer.hpp"

using namespace gaq;

namespace {

MolecularFrame random_frame(int n, std::uint64_t seed, int n_species = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.6, 1.6);
  MolecularFrame f;
  while (static_cast<int>(f.positions.size()) < n) {
    const Vec3 p{u(rng), u(rng), u(rng)};
    bool ok = true;
    for (const Vec3& q : f.positions) ok = ok && norm(p - q) > 0.8;
    if (ok) f.positions.push_back(p);
  }
  for (int i = 0; i < n; ++i) f.species.push_back(static_cast<int>(rng() % n_species));
  return f;
}

double max_diff(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, norm(a[i] - b[i]));
  return m;
}

std::vector<MolecularFrame> calibration_frames() {
  SyntheticDatasetSpec spec;
  spec.n_frames = 16;
  spec.seed = 3;
  return generate_dataset(spec, AnalyticPotential{}).frames;
}

Model quantized_model(QuantMode mode) {
  ModelConfig c;
  c.quant_mode = mode;
  Model m(c);
  const auto frames = calibration_frames();
  m.quant() = calibrate(m, frames);
  m.pack_weights();
  return m;
}

}  // namespace

TEST_CASE("quant mode names round trip") {
  for (QuantMode m : {QuantMode::Fp32, QuantMode::NaiveInt8, QuantMode::GaqW4A8})
    CHECK(parse_quant_mode(quant_mode_name(m)) == m);
  CHECK(quant_mode_name(QuantMode::GaqW4A8) == "gaq-w4a8");
  CHECK_THROWS_AS(parse_quant_mode("int2"), Error);
}

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.cutoff = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(ModelConfig{}.weight_bits() == 32);
}

TEST_CASE("frame validation: labels together, finite positions") {
  MolecularFrame f = random_frame(3, 1);
  CHECK_NOTHROW(f.validate());
  f.energy = 1.0;
  CHECK_THROWS_AS(f.validate(), Error);
  f.forces = std::vector<Vec3>(3);
  CHECK_NOTHROW(f.validate());
  f.positions[1].y = std::nan("");
  CHECK_THROWS_AS(f.validate(), Error);
}

TEST_CASE("neighbor_list: worked cases and brute-force oracle") {
  MolecularFrame two;
  two.species = {0, 1};
  two.positions = {{0, 0, 0}, {1, 0, 0}};
  auto e = neighbor_list(two, 2.0);
  REQUIRE(e.size() == 2);
  CHECK((e[0].i == 0 && e[0].j == 1 && e[1].i == 1 && e[1].j == 0));
  CHECK(e[0].dij == 1.0);
  two.positions[1].x = 3.0;
  CHECK(neighbor_list(two, 2.0).empty());

  const MolecularFrame f = random_frame(8, 2);
  const double cutoff = 2.2;
  std::vector<std::pair<int, int>> oracle;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      if (i == j) continue;
      const double dx = f.positions[j].x - f.positions[i].x, dy = f.positions[j].y - f.positions[i].y,
                   dz = f.positions[j].z - f.positions[i].z;
      if (std::sqrt(dx * dx + dy * dy + dz * dz) <= cutoff) oracle.emplace_back(i, j);
    }
  std::vector<std::pair<int, int>> got;
  for (const Edge& ed : neighbor_list(f, cutoff)) got.emplace_back(ed.i, ed.j);
  CHECK(got == oracle);
}

TEST_CASE("radial basis: zero at the cutoff, peak at a centre, formula") {
  for (double v : radial_basis(4.0, 16, 4.0)) CHECK(v == 0.0);
  const auto at = radial_basis(1.25, 16, 4.0);  // centre k = 4 at 4 * 5 / 16
  CHECK(std::max_element(at.begin(), at.end()) - at.begin() == 4);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 4.5);
  for (int k = 0; k < 100; ++k) {
    const double d = u(rng);
    const auto got = radial_basis(d, 16, 4.0);
    const double env = d < 4.0 ? 0.5 * (std::cos(std::numbers::pi * d / 4.0) + 1.0) : 0.0;
    for (int c = 0; c < 16; ++c) {
      const double mu = 0.25 * (c + 1), z = (d - mu) / 0.25;
      CHECK(got[c] == doctest::Approx(std::exp(-z * z / 2) * env).epsilon(1e-14).scale(1e-300));
    }
  }
}

TEST_CASE("attention_weights: one neighbour, equal keys, scale invariance, bounded logits") {
  const std::vector<std::vector<double>> q{{0.3, 1.0}, {2.0, -1.0}, {0.5, 0.5}};
  const std::vector<std::vector<double>> k{{1.0, 0.0}, {0.4, 0.2}, {0.4, 0.2}};
  CHECK(attention_weights(q, k, std::vector<int>{0}, std::vector<int>{1}, 10.0)[0] == 1.0);
  const auto half = attention_weights(q, k, std::vector<int>{0, 0}, std::vector<int>{1, 2}, 10.0);
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  std::vector<std::vector<double>> q1000 = q;
  for (auto& row : q1000)
    for (double& x : row) x *= 1000.0;
  const std::vector<int> dst{0, 0, 1, 1, 2}, src{1, 2, 0, 2, 0};
  const auto a = attention_weights(q, k, dst, src, 10.0);
  const auto b = attention_weights(q1000, k, dst, src, 10.0);
  for (std::size_t e = 0; e < a.size(); ++e) CHECK(std::abs(a[e] - b[e]) <= 1e-10);
  // Logits lie in [-tau, tau], so no weight can be below exp(-2 tau) / deg.
  for (double x : a) CHECK(x >= std::exp(-20.0) / 2.0);
}

TEST_CASE("layer_forward: two-atom frame only produces vectors along the bond") {
  Model m{ModelConfig{}};
  MolecularFrame f;
  f.species = {1, 1};
  f.positions = {{0.2, -0.1, 0.3}, {1.0, 0.5, -0.4}};
  IrrepFeatures in;
  in.f0 = 32;
  in.f1 = 8;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < 2 * 32; ++i) in.scalars.push_back(nd(rng));
  in.vectors.assign(2 * 24, 0.0);
  const IrrepFeatures out = layer_forward(m, 0, in, f);
  const Vec3 u = normalized(f.positions[1] - f.positions[0]);
  bool nonzero = false;
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 8; ++c) {
      const Vec3 v = out.vector(a, c);
      CHECK(norm(cross(v, u)) <= 1e-14 * std::max(1.0, norm(v)));
      nonzero = nonzero || norm(v) > 0.0;
    }
  CHECK(nonzero);
}

TEST_CASE("layer_forward is equivariant in fp32") {
  Model m{ModelConfig{}};
  const MolecularFrame f = random_frame(6, 5);
  IrrepFeatures in;
  in.f0 = 32;
  in.f1 = 8;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < 6 * 32; ++i) in.scalars.push_back(nd(rng));
  for (int i = 0; i < 6 * 24; ++i) in.vectors.push_back(nd(rng));
  RotationSampler rs(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Rotation r = rs.next();
    IrrepFeatures rin = in;
    for (int a = 0; a < 6; ++a)
      for (int c = 0; c < 8; ++c) {
        const Vec3 v = r.apply(in.vector(a, c));
        for (int k = 0; k < 3; ++k) rin.vectors[a * 24 + 3 * c + k] = v[k];
      }
    const IrrepFeatures out = layer_forward(m, 1, in, f);
    const IrrepFeatures rout = layer_forward(m, 1, rin, rotate_frame(f, r));
    for (std::size_t i = 0; i < out.scalars.size(); ++i) CHECK(std::abs(out.scalars[i] - rout.scalars[i]) <= 1e-10);
    for (int a = 0; a < 6; ++a)
      for (int c = 0; c < 8; ++c) CHECK(norm(rout.vector(a, c) - r.apply(out.vector(a, c))) <= 1e-10);
  }
}

TEST_CASE("model forward: isolated atom, translation, rotation, permutation") {
  Model m{ModelConfig{}};
  MolecularFrame lone;
  lone.species = {2};
  lone.positions = {{0.5, 0.5, 0.5}};
  const Prediction p0 = predict(m, lone);
  CHECK(p0.forces[0] == Vec3{0, 0, 0});

  const MolecularFrame f = random_frame(7, 8);
  const Prediction base = predict(m, f);
  const Prediction moved = predict(m, translate_frame(f, {3.25, -1.5, 0.75}));
  CHECK(std::abs(moved.energy - base.energy) <= 1e-10);
  CHECK(max_diff(moved.forces, base.forces) <= 1e-10);

  RotationSampler rs(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Rotation r = rs.next();
    const Prediction rot = predict(m, rotate_frame(f, r));
    CHECK(std::abs(rot.energy - base.energy) <= 1e-10);
    CHECK(max_diff(rot.forces, rotate_all(r, base.forces)) <= 1e-10);
  }

  const std::vector<int> perm{3, 0, 6, 1, 5, 2, 4};
  MolecularFrame pf;
  for (int i : perm) {
    pf.species.push_back(f.species[i]);
    pf.positions.push_back(f.positions[i]);
  }
  const Prediction pp = predict(m, pf);
  CHECK(std::abs(pp.energy - base.energy) <= 1e-10);
  for (std::size_t k = 0; k < perm.size(); ++k) CHECK(norm(pp.forces[k] - base.forces[perm[k]]) <= 1e-10);
}

TEST_CASE("forward is deterministic and seed dependent") {
  const MolecularFrame f = random_frame(5, 10);
  ModelConfig c;
  c.seed = 1;
  const Prediction a = predict(Model(c), f), b = predict(Model(c), f);
  CHECK(a.energy == b.energy);
  CHECK(a.forces == b.forces);
  c.seed = 2;
  CHECK(predict(Model(c), f).energy != a.energy);
}

TEST_CASE("quantized forward without calibration is rejected") {
  ModelConfig c;
  c.quant_mode = QuantMode::GaqW4A8;
  Model m(c);
  try {
    predict(m, random_frame(4, 11));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("gaq-w4a8: energy invariant under rotation, forces bounded off") {
  const Model m = quantized_model(QuantMode::GaqW4A8);
  const auto frames = calibration_frames();
  RotationSampler rs(12);
  for (int k = 0; k < 4; ++k) {
    const Prediction base = predict(m, frames[k]);
    for (int t = 0; t < 5; ++t) {
      const Rotation r = rs.next();
      const Prediction rot = predict(m, rotate_frame(frames[k], r));
      CHECK(std::abs(rot.energy - base.energy) <= 1e-6);
      CHECK(std::isfinite(max_diff(rot.forces, rotate_all(r, base.forces))));
    }
  }
}

TEST_CASE("naive-int8 breaks force equivariance on a generic frame") {
  const Model m = quantized_model(QuantMode::NaiveInt8);
  const auto frames = calibration_frames();
  RotationSampler rs(13);
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) worst = std::max(worst, frame_lee(m, frames[0], rs.next()));
  CHECK(worst > 0.0);
  CHECK(frame_lee(m, frames[0], Rotation::identity()) == 0.0);
}

TEST_CASE("packed weights: per-column W4 for gaq, W8 per tensor for naive") {
  const Model g = quantized_model(QuantMode::GaqW4A8);
  std::size_t weights = 0, blocks = 0;
  for (const Tensor& t : g.params())
    if (t.is_weight) {
      const PackedTensor& p = g.packed().blocks[blocks++];
      CHECK(p.bits == 4);
      CHECK(p.schemes.size() == static_cast<std::size_t>(t.cols));
      CHECK(p.payload.size() == (static_cast<std::size_t>(t.rows) * t.cols * 4 + 7) / 8);
      // Dequantized codes reproduce the fake-quantized weights.
      const auto codes = unpack(p);
      const auto scales = ad::weight_column_scales(t.data, t.rows, t.cols, 4);
      for (int r = 0; r < t.rows; ++r)
        for (int c = 0; c < t.cols; ++c) {
          const double deq = to_signed_code(codes[r * t.cols + c], 4) * p.schemes[c].scale;
          CHECK(deq == quantize_linear(t.data[r * t.cols + c], QuantScheme::linear(4, scales[c])));
        }
      weights += t.data.size();
    }
  CHECK(weights == g.weight_element_count());
  CHECK(blocks == g.packed().blocks.size());

  const Model n = quantized_model(QuantMode::NaiveInt8);
  for (const PackedTensor& p : n.packed().blocks) {
    CHECK(p.bits == 8);
    CHECK(p.schemes.size() == 1);
  }
}

TEST_CASE("checkpoint round trip is byte-identical and preserves predictions") {
  for (QuantMode mode : {QuantMode::Fp32, QuantMode::NaiveInt8, QuantMode::GaqW4A8}) {
    CAPTURE(quant_mode_name(mode));
    const Model m = mode == QuantMode::Fp32 ? Model(ModelConfig{}) : quantized_model(mode);
    std::stringstream a;
    m.save(a);
    const std::string bytes = a.str();
    CHECK(bytes.substr(0, 4) == "EQMD");
    const Model back = Model::load(a);
    std::stringstream b;
    back.save(b);
    CHECK(b.str() == bytes);
    CHECK(back.config() == m.config());
    const MolecularFrame f = random_frame(5, 14);
    const Prediction p = predict(m, f), q = predict(back, f);
    CHECK(p.energy == q.energy);
    CHECK(p.forces == q.forces);
  }
}

TEST_CASE("corrupt checkpoints raise CheckpointLoadError") {
  std::stringstream a;
  Model(ModelConfig{}).save(a);
  const std::string bytes = a.str();
  for (const std::string& bad : {std::string("EQMX") + bytes.substr(4), bytes.substr(0, bytes.size() / 2), std::string()}) {
    std::istringstream in(bad);
    try {
      Model::load(in);
      FAIL("expected CheckpointLoadError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::CheckpointLoadError);
    }
  }
  CHECK_THROWS_AS(Model::load_file("/nonexistent/model.eqmd"), Error);
}

TEST_CASE("profiled forward: fp32 has no quantization overhead") {
  Model m{ModelConfig{}};
  PhaseProfiler prof;
  ForwardOptions o;
  o.profiler = &prof;
  predict(m, random_frame(6, 15), o);
  CHECK(prof.microseconds(Phase::QuantOverhead) == 0.0);
  CHECK(prof.microseconds(Phase::Gemm) > 0.0);
  CHECK(prof.microseconds(Phase::Attention) > 0.0);
}
