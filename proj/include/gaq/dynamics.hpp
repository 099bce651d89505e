#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gaq/geom.hpp"
#include "gaq/model.hpp"

namespace gaq {

/// 1 eV / (Angstrom amu) expressed in Angstrom / fs^2.
inline constexpr double kAccelerationUnit = 9.648533212e-3;
/// 1 amu Angstrom^2 / fs^2 expressed in eV.
inline constexpr double kKineticUnit = 103.6426965;
inline constexpr double kBoltzmann = 8.617333262e-5;  // eV / K

struct ForceEval {
  double energy = 0.0;        // eV
  std::vector<Vec3> forces;   // eV / Angstrom
};

using ForceProvider = std::function<ForceEval(std::span<const Vec3> positions)>;

struct MDState {
  std::vector<Vec3> positions;   // Angstrom
  std::vector<Vec3> velocities;  // Angstrom / fs
  std::vector<double> masses;    // amu
  std::int64_t step = 0;
  double dt = 0.5;  // fs
  // Forces and potential at the current positions.
  std::vector<Vec3> forces;
  double potential = 0.0;

  void validate() const;
};

/// Evaluates the provider at the current positions (throws NonFiniteForce).
void refresh_forces(MDState& s, const ForceProvider& provider);

double kinetic_energy(const MDState& s);
Vec3 total_momentum(const MDState& s);

/// Maxwell-Boltzmann velocities at `kelvin` with centre-of-mass motion removed.
void maxwell_boltzmann(MDState& s, double kelvin, std::uint64_t seed);

/// Half-kick, drift, force evaluation, half-kick. `s` must carry forces for
/// its positions. Throws NonFiniteForce.
MDState step_verlet(const MDState& s, const ForceProvider& provider);

struct EnergySample {
  std::int64_t step = 0;
  double kinetic = 0.0;
  double potential = 0.0;
  double total() const { return kinetic + potential; }
};

struct DriftReport {
  double drift_rate = 0.0;     // meV / atom / ps, least-squares slope of the total energy
  double max_excursion = 0.0;  // meV / atom, max |E(t) - E(0)|
  bool exploded = false;
  std::int64_t halted_step = -1;  // set when exploded
};

struct NveResult {
  DriftReport report;
  std::vector<EnergySample> energies;
  MDState final_state;
};

/// Called with every sampled state.
using FrameSink = std::function<void(const MDState&, const EnergySample&)>;

inline constexpr double kExplosionEvPerAtom = 1.0;

/// Integrates n_steps (or until explosion), sampling every `report_every`
/// steps. Forces are evaluated for `initial` if it carries none.
NveResult run_nve(MDState initial, const ForceProvider& provider, std::int64_t n_steps, std::int64_t report_every,
                  const FrameSink& sink = {});

/// Slope of E(t) in meV/atom/ps from a least-squares fit.
double fit_drift_rate(std::span<const EnergySample> samples, double dt_fs, std::size_t n_atoms);

/// Removes the mass-weighted rigid-body part of `forces`: afterwards the net
/// force and the net torque about the centre of mass are zero. Forces of a
/// translation- and rotation-invariant potential are left unchanged.
void remove_rigid_body_forces(std::span<const Vec3> positions, std::span<const double> masses,
                              std::vector<Vec3>& forces);

/// Force provider backed by a model; species are fixed. Head-predicted
/// forces need not sum to zero, so by default their rigid-body part is
/// projected out to keep momentum and angular momentum conserved.
ForceProvider model_provider(const Model& model, std::vector<int> species, bool rigid_body_projection = true);

std::string species_symbol(int species);
double species_mass(int species);

/// XYZ frame with the comment `step=<n> etot=<e> epot=<e> ekin=<e>`.
void write_xyz_frame(std::ostream& os, std::span<const int> species, const MDState& s, const EnergySample& e);
void write_energy_csv(std::ostream& os, std::span<const EnergySample> samples);

}  // namespace gaq
