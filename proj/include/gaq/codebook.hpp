#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gaq/geom.hpp"

namespace gaq {

enum class CodebookKind : std::uint8_t { Octahedron = 0, Icosahedron = 1, Fibonacci = 2, KMeans = 3 };

/// How a codebook was (or will be) built. Text form: "octahedron",
/// "icosahedron", "fibonacci:<n>", "kmeans:<n>:<seed>".
struct CodebookSpec {
  CodebookKind kind = CodebookKind::Fibonacci;
  int size = 256;
  std::uint64_t seed = 0;

  static CodebookSpec octahedron() { return {CodebookKind::Octahedron, 6, 0}; }
  static CodebookSpec icosahedron() { return {CodebookKind::Icosahedron, 12, 0}; }
  static CodebookSpec fibonacci(int n) { return {CodebookKind::Fibonacci, n, 0}; }
  static CodebookSpec kmeans(int n, std::uint64_t seed) { return {CodebookKind::KMeans, n, seed}; }

  static CodebookSpec parse(const std::string& tag);
  std::string tag() const;
  /// Compact identifier stored alongside direction schemes: kind in the top
  /// byte, size in the low 24 bits.
  std::uint32_t id() const;

  friend bool operator==(const CodebookSpec&, const CodebookSpec&) = default;
};

struct NearestCodeword {
  int index;
  Vec3 codeword;
};

/// Finite set of unit directions on S^2. Immutable after construction apart
/// from the cached covering-radius estimate.
class SphericalCodebook {
 public:
  static SphericalCodebook build(const CodebookSpec& spec);
  /// Wraps an explicit codeword list (each normalised); used for rotated
  /// codebooks and deserialisation.
  static SphericalCodebook from_codewords(std::vector<Vec3> codewords, CodebookSpec spec);

  const std::vector<Vec3>& codewords() const { return codewords_; }
  int size() const { return static_cast<int>(codewords_.size()); }
  const CodebookSpec& spec() const { return spec_; }

  /// Largest cosine wins; exact ties go to the lowest index. Throws NotUnit
  /// when |u| deviates from 1 by more than 1e-9.
  NearestCodeword nearest(Vec3 u) const;
  int nearest_index(Vec3 u) const;

  /// Monte-Carlo max over Haar-uniform directions of the nearest-codeword
  /// angle. Approaches the true covering radius from below.
  double estimate_covering_radius(int n_samples, std::uint64_t seed);
  double covering_radius_est() const { return covering_radius_est_; }

  double min_pairwise_angle() const;

  void write_text(std::ostream& os) const;
  static SphericalCodebook read_text(std::istream& is);

 private:
  SphericalCodebook(std::vector<Vec3> cw, CodebookSpec spec);

  std::vector<Vec3> codewords_;
  CodebookSpec spec_;
  double covering_radius_est_ = 0.0;
};

}  // namespace gaq
