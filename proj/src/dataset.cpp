#include "gaq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

#include "gaq/dynamics.hpp"
#include "gaq/error.hpp"

namespace gaq {

std::string_view potential_name(PotentialKind k) {
  return k == PotentialKind::MorsePairwise ? "morse-pairwise" : "morse-plus-angular";
}

PotentialKind parse_potential(std::string_view s) {
  if (s == "morse-pairwise") return PotentialKind::MorsePairwise;
  if (s == "morse-plus-angular") return PotentialKind::MorsePlusAngular;
  throw Error(ErrorCode::UsageError, "unknown potential '" + std::string(s) + "'");
}

double AnalyticPotential::equilibrium(int si, int sj) {
  static constexpr double radius[8] = {0.76, 0.71, 0.66, 0.45, 1.05, 0.57, 1.07, 1.02};
  return radius[si & 7] + radius[sj & 7];
}

namespace {

struct Weight {
  double w, dw;
};

Weight cutoff_weight(double r, double rc) {
  if (r >= rc) return {0.0, 0.0};
  const double x = std::numbers::pi * r / rc;
  return {0.5 * (std::cos(x) + 1.0), -0.5 * std::numbers::pi / rc * std::sin(x)};
}

}  // namespace

double AnalyticPotential::evaluate(std::span<const int> species, std::span<const Vec3> pos,
                                   std::vector<Vec3>& forces) const {
  const std::size_t n = pos.size();
  if (species.size() != n) throw Error(ErrorCode::ShapeMismatch, "species/positions length mismatch");
  forces.assign(n, Vec3{});
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const Vec3 d = pos[j] - pos[i];
      const double r = norm(d);
      const double x = std::exp(-stiffness * (r - equilibrium(species[i], species[j])));
      e += depth * ((1.0 - x) * (1.0 - x) - 1.0);
      const double de_dr = 2.0 * depth * stiffness * x * (1.0 - x);
      const Vec3 g = (de_dr / r) * d;  // dE/dr_j
      forces[j] -= g;
      forces[i] += g;
    }
  if (kind != PotentialKind::MorsePlusAngular) return e;

  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      if (i == c) continue;
      for (std::size_t k = i + 1; k < n; ++k) {
        if (k == c) continue;
        const Vec3 a = pos[i] - pos[c];
        const Vec3 b = pos[k] - pos[c];
        const double ra = norm(a), rb = norm(b);
        const Weight wa = cutoff_weight(ra, angle_cutoff), wb = cutoff_weight(rb, angle_cutoff);
        if (wa.w == 0.0 || wb.w == 0.0) continue;
        const double cs = dot(a, b) / (ra * rb);
        const double dc = cs - angle_cos0;
        e += angle_k * wa.w * wb.w * dc * dc;
        const Vec3 dcs_da = b / (ra * rb) - (cs / (ra * ra)) * a;
        const Vec3 dcs_db = a / (ra * rb) - (cs / (rb * rb)) * b;
        const Vec3 ga = angle_k * (wa.dw * wb.w * dc * dc / ra) * a + (angle_k * wa.w * wb.w * 2.0 * dc) * dcs_da;
        const Vec3 gb = angle_k * (wb.dw * wa.w * dc * dc / rb) * b + (angle_k * wa.w * wb.w * 2.0 * dc) * dcs_db;
        forces[i] -= ga;
        forces[k] -= gb;
        forces[c] += ga + gb;
      }
    }
  return e;
}

double AnalyticPotential::energy(std::span<const int> species, std::span<const Vec3> positions) const {
  std::vector<Vec3> unused;
  return evaluate(species, positions, unused);
}

double force_check_error(const AnalyticPotential& pot, std::span<const int> species, std::span<const Vec3> positions,
                         double h) {
  std::vector<Vec3> forces;
  pot.evaluate(species, positions, forces);
  std::vector<Vec3> p(positions.begin(), positions.end());
  double worst = 0.0, scale = 1.0;
  for (const Vec3& f : forces) scale = std::max({scale, std::abs(f.x), std::abs(f.y), std::abs(f.z)});
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      const double x0 = p[i][c];
      p[i][c] = x0 + h;
      const double ep = pot.energy(species, p);
      p[i][c] = x0 - h;
      const double em = pot.energy(species, p);
      p[i][c] = x0;
      const double fd = -(ep - em) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - forces[i][c]));
    }
  return worst / scale;
}

void SyntheticDatasetSpec::validate() const {
  if (n_frames < 1) throw Error(ErrorCode::UsageError, "n_frames must be >= 1");
  if (atoms_per_frame < 2 || atoms_per_frame > 10) throw Error(ErrorCode::UsageError, "atoms_per_frame must be in [2, 10]");
  if (n_species < 1 || n_species > 8) throw Error(ErrorCode::UsageError, "n_species must be in [1, 8]");
  if (!(perturbation >= 0.0)) throw Error(ErrorCode::UsageError, "perturbation must be >= 0");
}

namespace {

std::vector<Vec3> relaxed_cluster(const AnalyticPotential& pot, std::span<const int> species, std::mt19937_64& rng,
                                  RotationSampler& dirs) {
  std::uniform_int_distribution<std::size_t> pick;
  std::vector<Vec3> pos{Vec3{}};
  while (pos.size() < species.size()) {
    const std::size_t k = pos.size();
    const std::size_t anchor = pick(rng) % k;
    const Vec3 cand = pos[anchor] + AnalyticPotential::equilibrium(species[anchor], species[k]) * dirs.next_direction();
    bool clear = true;
    for (std::size_t j = 0; j < k; ++j)
      if (norm(cand - pos[j]) < 0.85 * AnalyticPotential::equilibrium(species[j], species[k])) clear = false;
    if (clear) pos.push_back(cand);
  }
  // Steepest descent with a capped displacement.
  std::vector<Vec3> f;
  for (int it = 0; it < 20000; ++it) {
    pot.evaluate(species, pos, f);
    double fmax = 0.0;
    for (const Vec3& v : f) fmax = std::max(fmax, norm(v));
    if (fmax < 1e-10) break;
    const double step = std::min(0.02, 0.05 / fmax);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] += step * f[i];
  }
  Vec3 centre{};
  for (const Vec3& p : pos) centre += p;
  centre = centre / static_cast<double>(pos.size());
  for (Vec3& p : pos) p -= centre;
  return pos;
}

}  // namespace

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec, const AnalyticPotential& pot) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  RotationSampler rotations(spec.seed + 1);
  SyntheticDataset ds;
  std::uniform_int_distribution<int> species(0, spec.n_species - 1);
  for (int i = 0; i < spec.atoms_per_frame; ++i) ds.species.push_back(species(rng));
  ds.template_positions = relaxed_cluster(pot, ds.species, rng, rotations);

  std::normal_distribution<double> normal(0.0, spec.perturbation);
  for (int k = 0; k < spec.n_frames; ++k) {
    MolecularFrame f;
    f.species = ds.species;
    const Rotation r = rotations.next();
    for (const Vec3& p : ds.template_positions) {
      const Vec3 jitter{normal(rng), normal(rng), normal(rng)};
      f.positions.push_back(r.apply(p + jitter));
    }
    std::vector<Vec3> forces;
    f.energy = pot.evaluate(f.species, f.positions, forces);
    f.forces = std::move(forces);
    const double err = force_check_error(pot, f.species, f.positions);
    if (!(err <= 1e-6))
      throw Error(ErrorCode::SelfCheckFailed, "frame " + std::to_string(k) + " force check error " + std::to_string(err));
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

// ---- files ---------------------------------------------------------------

namespace {

int species_from_symbol(const std::string& sym) {
  for (int s = 0; s < 8; ++s)
    if (species_symbol(s) == sym) return s;
  throw Error(ErrorCode::FormatError, "unknown element symbol '" + sym + "'");
}

}  // namespace

void write_dataset_xyz(std::ostream& os, std::span<const MolecularFrame> frames) {
  char buf[256];
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const MolecularFrame& f = frames[k];
    os << f.atom_count() << "\nframe=" << k << '\n';
    for (std::size_t i = 0; i < f.atom_count(); ++i) {
      const Vec3& p = f.positions[i];
      std::snprintf(buf, sizeof buf, "%s %.17g %.17g %.17g\n", species_symbol(f.species[i]).c_str(), p.x, p.y, p.z);
      os << buf;
    }
  }
}

void write_dataset_labels(std::ostream& os, std::span<const MolecularFrame> frames) {
  const std::size_t n = frames.empty() ? 0 : frames[0].atom_count();
  os << "frame,energy";
  for (std::size_t i = 0; i < n; ++i) os << ",fx_" << i << ",fy_" << i << ",fz_" << i;
  os << '\n';
  char buf[64];
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const MolecularFrame& f = frames[k];
    if (!f.labeled() || f.atom_count() != n) throw Error(ErrorCode::FormatError, "labels need equal-size labelled frames");
    std::snprintf(buf, sizeof buf, "%.17g", *f.energy);
    os << k << ',' << buf;
    for (const Vec3& v : *f.forces)
      for (int c = 0; c < 3; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", v[c]);
        os << ',' << buf;
      }
    os << '\n';
  }
}

std::vector<MolecularFrame> read_dataset(std::istream& xyz, std::istream* labels) {
  std::vector<MolecularFrame> frames;
  std::string line;
  while (std::getline(xyz, line)) {
    if (line.empty()) continue;
    std::size_t n = 0;
    try {
      n = std::stoul(line);
    } catch (const std::exception&) {
      throw Error(ErrorCode::FormatError, "expected an atom count, got '" + line + "'");
    }
    if (!std::getline(xyz, line)) throw Error(ErrorCode::FormatError, "truncated XYZ frame");
    MolecularFrame f;
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(xyz, line)) throw Error(ErrorCode::FormatError, "truncated XYZ frame");
      std::istringstream ls(line);
      std::string sym;
      Vec3 p;
      if (!(ls >> sym >> p.x >> p.y >> p.z)) throw Error(ErrorCode::FormatError, "bad XYZ atom line");
      f.species.push_back(species_from_symbol(sym));
      f.positions.push_back(p);
    }
    frames.push_back(std::move(f));
  }
  if (!labels) return frames;
  if (!std::getline(*labels, line)) throw Error(ErrorCode::FormatError, "empty label file");
  for (MolecularFrame& f : frames) {
    if (!std::getline(*labels, line)) throw Error(ErrorCode::FormatError, "fewer label rows than frames");
    std::vector<double> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(ErrorCode::FormatError, "bad label cell '" + cell + "'");
      }
    }
    if (cells.size() != 2 + 3 * f.atom_count()) throw Error(ErrorCode::FormatError, "label row width mismatch");
    f.energy = cells[1];
    std::vector<Vec3> forces;
    for (std::size_t i = 0; i < f.atom_count(); ++i) forces.push_back({cells[2 + 3 * i], cells[3 + 3 * i], cells[4 + 3 * i]});
    f.forces = std::move(forces);
  }
  return frames;
}

}  // namespace gaq
