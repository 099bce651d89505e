#include "gaq/dynamics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "gaq/error.hpp"

namespace gaq {

namespace {

bool finite(Vec3 v) { return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z); }

struct Element {
  const char* symbol;
  double mass;
};

constexpr std::array<Element, 8> kElements{{
    {"C", 12.011}, {"N", 14.007}, {"O", 15.999}, {"H", 1.008},
    {"S", 32.06}, {"F", 18.998}, {"P", 30.974}, {"Cl", 35.45},
}};

}  // namespace

std::string species_symbol(int species) {
  if (species < 0 || species >= static_cast<int>(kElements.size()))
    throw Error(ErrorCode::ShapeMismatch, "species index out of range");
  return kElements[species].symbol;
}

double species_mass(int species) {
  if (species < 0 || species >= static_cast<int>(kElements.size()))
    throw Error(ErrorCode::ShapeMismatch, "species index out of range");
  return kElements[species].mass;
}

void MDState::validate() const {
  if (!(dt > 0.0)) throw Error(ErrorCode::UsageError, "dt must be positive");
  if (velocities.size() != positions.size() || masses.size() != positions.size())
    throw Error(ErrorCode::ShapeMismatch, "state lists differ in length");
  for (double m : masses)
    if (!(m > 0.0)) throw Error(ErrorCode::ShapeMismatch, "masses must be positive");
}

void refresh_forces(MDState& s, const ForceProvider& provider) {
  ForceEval fe = provider(s.positions);
  if (fe.forces.size() != s.positions.size()) throw Error(ErrorCode::ShapeMismatch, "force count mismatch");
  if (!std::isfinite(fe.energy)) throw Error(ErrorCode::NonFiniteForce, "non-finite potential energy");
  for (const Vec3& f : fe.forces)
    if (!finite(f)) throw Error(ErrorCode::NonFiniteForce, "non-finite force at step " + std::to_string(s.step));
  s.forces = std::move(fe.forces);
  s.potential = fe.energy;
}

double kinetic_energy(const MDState& s) {
  double ke = 0.0;
  for (std::size_t i = 0; i < s.positions.size(); ++i) ke += 0.5 * s.masses[i] * dot(s.velocities[i], s.velocities[i]);
  return ke * kKineticUnit;
}

Vec3 total_momentum(const MDState& s) {
  Vec3 p{};
  for (std::size_t i = 0; i < s.positions.size(); ++i) p += s.masses[i] * s.velocities[i];
  return p;
}

void maxwell_boltzmann(MDState& s, double kelvin, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = s.positions.size();
  s.velocities.assign(n, Vec3{});
  double total_mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // <m v^2 / 2> per component = kT / 2, in amu A^2/fs^2.
    const double sigma = std::sqrt(kBoltzmann * kelvin / (s.masses[i] * kKineticUnit));
    s.velocities[i] = {sigma * normal(rng), sigma * normal(rng), sigma * normal(rng)};
    total_mass += s.masses[i];
  }
  const Vec3 vcm = total_momentum(s) / total_mass;
  for (Vec3& v : s.velocities) v -= vcm;
}

MDState step_verlet(const MDState& s, const ForceProvider& provider) {
  if (s.forces.size() != s.positions.size()) throw Error(ErrorCode::ShapeMismatch, "state carries no forces");
  MDState next = s;
  const double dt = s.dt;
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    const double k = 0.5 * dt * kAccelerationUnit / s.masses[i];
    next.velocities[i] = s.velocities[i] + k * s.forces[i];
    next.positions[i] = s.positions[i] + dt * next.velocities[i];
    if (!finite(next.positions[i])) throw Error(ErrorCode::NonFiniteForce, "non-finite coordinate");
  }
  ++next.step;
  refresh_forces(next, provider);
  for (std::size_t i = 0; i < s.positions.size(); ++i)
    next.velocities[i] += (0.5 * dt * kAccelerationUnit / s.masses[i]) * next.forces[i];
  return next;
}

double fit_drift_rate(std::span<const EnergySample> samples, double dt_fs, std::size_t n_atoms) {
  if (samples.size() < 2 || n_atoms == 0) return 0.0;
  double mt = 0.0, me = 0.0;
  for (const EnergySample& s : samples) {
    mt += static_cast<double>(s.step) * dt_fs;
    me += s.total();
  }
  mt /= static_cast<double>(samples.size());
  me /= static_cast<double>(samples.size());
  double num = 0.0, den = 0.0;
  for (const EnergySample& s : samples) {
    const double t = static_cast<double>(s.step) * dt_fs - mt;
    num += t * (s.total() - me);
    den += t * t;
  }
  if (den == 0.0) return 0.0;
  const double ev_per_fs = num / den;
  return ev_per_fs * 1e3 /* meV */ * 1e3 /* per ps */ / static_cast<double>(n_atoms);
}

NveResult run_nve(MDState initial, const ForceProvider& provider, std::int64_t n_steps, std::int64_t report_every,
                  const FrameSink& sink) {
  if (n_steps < 1 || report_every < 1) throw Error(ErrorCode::UsageError, "n_steps and report_every must be >= 1");
  initial.validate();
  NveResult res;
  MDState s = std::move(initial);
  const std::size_t n = s.positions.size();
  if (s.forces.size() != n) refresh_forces(s, provider);
  const double threshold = kExplosionEvPerAtom * static_cast<double>(n);

  auto sample = [&](const MDState& st) {
    const EnergySample e{st.step, kinetic_energy(st), st.potential};
    res.energies.push_back(e);
    if (sink) sink(st, e);
    return e;
  };
  const double e0 = sample(s).total();
  double excursion = 0.0;

  for (std::int64_t k = 0; k < n_steps; ++k) {
    try {
      s = step_verlet(s, provider);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::NonFiniteForce) throw;
      res.report.exploded = true;
      res.report.halted_step = s.step + 1;
      break;
    }
    const double de = std::abs(kinetic_energy(s) + s.potential - e0);
    excursion = std::max(excursion, de);
    if (!(de <= threshold)) {
      sample(s);
      res.report.exploded = true;
      res.report.halted_step = s.step;
      break;
    }
    if (s.step % report_every == 0) sample(s);
  }
  res.report.drift_rate = fit_drift_rate(res.energies, s.dt, n);
  res.report.max_excursion = excursion * 1e3 / static_cast<double>(n);
  res.final_state = std::move(s);
  return res;
}

namespace {

// Pseudo-inverse of a symmetric 3x3 matrix by cyclic Jacobi rotations.
// Eigenvalues below 1e-10 of the largest are treated as zero (linear molecules).
std::array<std::array<double, 3>, 3> symmetric_pinv(std::array<std::array<double, 3>, 3> a) {
  std::array<std::array<double, 3>, 3> v{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  for (int sweep = 0; sweep < 50; ++sweep) {
    const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if (off < 1e-30) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = 0.5 * std::atan2(2.0 * a[p][q], a[q][q] - a[p][p]);
        const double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < 3; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  const double top = std::max({std::abs(a[0][0]), std::abs(a[1][1]), std::abs(a[2][2])});
  std::array<std::array<double, 3>, 3> out{};
  for (int e = 0; e < 3; ++e) {
    const double lam = a[e][e];
    if (std::abs(lam) <= 1e-10 * top || lam == 0.0) continue;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out[r][c] += v[r][e] * v[c][e] / lam;
  }
  return out;
}

}  // namespace

void remove_rigid_body_forces(std::span<const Vec3> positions, std::span<const double> masses,
                              std::vector<Vec3>& forces) {
  const std::size_t n = positions.size();
  if (masses.size() != n || forces.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "positions/masses/forces length mismatch");
  if (n == 0) return;
  double total_mass = 0.0;
  Vec3 com{}, net{};
  for (std::size_t i = 0; i < n; ++i) {
    total_mass += masses[i];
    com += masses[i] * positions[i];
    net += forces[i];
  }
  com = com / total_mass;
  const Vec3 accel = net / total_mass;
  for (std::size_t i = 0; i < n; ++i) forces[i] -= masses[i] * accel;

  Vec3 torque{};
  std::array<std::array<double, 3>, 3> inertia{};
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 r = positions[i] - com;
    torque += cross(r, forces[i]);
    const double r2 = dot(r, r);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) inertia[a][b] += masses[i] * ((a == b ? r2 : 0.0) - r[a] * r[b]);
  }
  const auto inv = symmetric_pinv(inertia);
  Vec3 alpha{};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) alpha[a] += inv[a][b] * torque[b];
  for (std::size_t i = 0; i < n; ++i) forces[i] -= masses[i] * cross(alpha, positions[i] - com);
}

ForceProvider model_provider(const Model& model, std::vector<int> species, bool rigid_body_projection) {
  std::vector<double> masses;
  for (int s : species) masses.push_back(species_mass(s));
  return [&model, species = std::move(species), masses = std::move(masses),
          rigid_body_projection](std::span<const Vec3> positions) {
    MolecularFrame f;
    f.species = species;
    f.positions.assign(positions.begin(), positions.end());
    Prediction p = predict(model, f);
    if (rigid_body_projection) remove_rigid_body_forces(positions, masses, p.forces);
    return ForceEval{p.energy, std::move(p.forces)};
  };
}

void write_xyz_frame(std::ostream& os, std::span<const int> species, const MDState& s, const EnergySample& e) {
  char buf[256];
  os << s.positions.size() << '\n';
  std::snprintf(buf, sizeof buf, "step=%lld etot=%.10f epot=%.10f ekin=%.10f\n", static_cast<long long>(e.step),
                e.total(), e.potential, e.kinetic);
  os << buf;
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    const Vec3& p = s.positions[i];
    std::snprintf(buf, sizeof buf, "%s %.10f %.10f %.10f\n", species_symbol(species[i]).c_str(), p.x, p.y, p.z);
    os << buf;
  }
}

void write_energy_csv(std::ostream& os, std::span<const EnergySample> samples) {
  os << "step,e_kin,e_pot,e_tot\n";
  char buf[256];
  for (const EnergySample& e : samples) {
    std::snprintf(buf, sizeof buf, "%lld,%.12g,%.12g,%.12g\n", static_cast<long long>(e.step), e.kinetic, e.potential,
                  e.total());
    os << buf;
  }
}

}  // namespace gaq
