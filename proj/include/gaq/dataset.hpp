#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gaq/geom.hpp"
#include "gaq/model.hpp"

namespace gaq {

enum class PotentialKind { MorsePairwise, MorsePlusAngular };

std::string_view potential_name(PotentialKind k);
PotentialKind parse_potential(std::string_view s);

/// Morse pairs plus an optional cutoff-weighted harmonic-in-cosine angular
/// term. Smooth, conservative and rotation invariant.
struct AnalyticPotential {
  PotentialKind kind = PotentialKind::MorsePairwise;
  double depth = 1.0;        // eV
  double stiffness = 1.5;    // 1/Angstrom
  double angle_k = 0.5;      // eV
  double angle_cos0 = -0.5;  // preferred cos(theta) at the central atom
  double angle_cutoff = 2.5;  // Angstrom

  /// Equilibrium Morse distance for a species pair.
  static double equilibrium(int si, int sj);

  double energy(std::span<const int> species, std::span<const Vec3> positions) const;
  /// Energy and analytic forces -dE/dr.
  double evaluate(std::span<const int> species, std::span<const Vec3> positions, std::vector<Vec3>& forces) const;
};

/// Largest |F_analytic - F_central| over all components divided by
/// max(1, max |F|), with central differences of step h.
double force_check_error(const AnalyticPotential& pot, std::span<const int> species, std::span<const Vec3> positions,
                         double h = 1e-5);

struct SyntheticDatasetSpec {
  int n_frames = 64;
  int atoms_per_frame = 6;
  int n_species = 4;
  PotentialKind potential = PotentialKind::MorsePlusAngular;
  double perturbation = 0.1;  // Angstrom, per-coordinate standard deviation
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  std::vector<int> species;
  std::vector<Vec3> template_positions;  // relaxed reference geometry
  std::vector<MolecularFrame> frames;
};

/// Randomly perturbed and rotated copies of a relaxed random cluster,
/// labelled by the analytic potential. Throws SelfCheckFailed when a frame's
/// forces disagree with central differences by more than 1e-6.
SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec, const AnalyticPotential& pot);

/// XYZ geometry (comment `frame=<k>`) and the companion label CSV.
void write_dataset_xyz(std::ostream& os, std::span<const MolecularFrame> frames);
void write_dataset_labels(std::ostream& os, std::span<const MolecularFrame> frames);
/// Reads the XYZ geometry and, when `labels` is non-null, attaches the labels.
std::vector<MolecularFrame> read_dataset(std::istream& xyz, std::istream* labels);

}  // namespace gaq
