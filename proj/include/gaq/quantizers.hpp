#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "gaq/codebook.hpp"
#include "gaq/geom.hpp"

namespace gaq {

enum class QuantKind : std::uint8_t { LinearSymmetric = 0, MagnitudeLog = 1, Direction = 2 };

/// One quantizer instance. `scale` is the step of the symmetric integer grid
/// (for MagnitudeLog the step lives in log space); `codebook_id` names the
/// spherical codebook of a Direction scheme.
struct QuantScheme {
  int bits = 8;
  QuantKind kind = QuantKind::LinearSymmetric;
  double scale = 1.0;
  std::uint32_t codebook_id = 0;

  static QuantScheme linear(int bits, double scale);
  static QuantScheme magnitude(int bits, double log_scale);
  /// Log-grid scheme whose symmetric range covers [lo, hi] after clamping the
  /// range to [1e-6, 1e3].
  static QuantScheme magnitude_for_range(int bits, double lo, double hi);
  static QuantScheme direction(int bits, const SphericalCodebook& cb);

  int qmax() const { return (1 << (bits - 1)) - 1; }

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

inline constexpr double kMagnitudeFloor = 1e-6;
inline constexpr double kMagnitudeCeil = 1e3;

/// Signed integer code in [-qmax, qmax] (saturating).
int linear_code(double x, const QuantScheme& s);
/// True when x lies inside the unsaturated range (the clipped-STE region).
bool linear_in_range(double x, const QuantScheme& s);
double quantize_linear(double x, const QuantScheme& s);

/// 0 for m == 0; otherwise exp(quantize_linear(log m)).
double quantize_magnitude(double m, const QuantScheme& s);
int magnitude_code(double m, const QuantScheme& s);
bool magnitude_in_range(double m, const QuantScheme& s);

Vec3 quantize_direction(Vec3 u, const SphericalCodebook& cb);
Vec3 quantize_direction(Vec3 u, const QuantScheme& s, const SphericalCodebook& cb);

/// Magnitude-direction decoupled quantizer: Q_m(|v|) * Q_d(v/|v|); the zero
/// vector maps to zero.
Vec3 mddq(Vec3 v, const QuantScheme& magnitude, const SphericalCodebook& cb);

/// The factored form of mddq(): the quantized magnitude and the selected
/// codeword. Its norm is `magnitude` exactly; vector() rounds once per axis.
struct MddqValue {
  double magnitude = 0.0;
  int direction_index = -1;  // -1 for the zero vector
  Vec3 direction;
  Vec3 vector() const { return magnitude * direction; }
};
MddqValue mddq_factored(Vec3 v, const QuantScheme& magnitude, const SphericalCodebook& cb);

/// ||Q_d(R u) - R Q_d(u)|| for u = v/|v|. Throws ZeroVector for v == 0.
double commutation_error(Vec3 v, const Rotation& r, const SphericalCodebook& cb);

/// Per-axis symmetric linear quantization of a vector (the geometry-agnostic
/// baseline).
Vec3 quantize_per_axis(Vec3 v, const QuantScheme& s);

/// Bit-packed integer codes, LSB-first within each byte.
struct PackedTensor {
  int bits = 8;
  std::vector<std::uint8_t> payload;
  std::vector<std::uint32_t> shape;
  std::vector<QuantScheme> schemes;

  std::size_t element_count() const;

  void write(std::ostream& os) const;
  static PackedTensor read(std::istream& is);

  friend bool operator==(const PackedTensor&, const PackedTensor&) = default;
};

/// Throws CodeOutOfRange if any code needs more than `bits` bits.
PackedTensor pack(std::span<const std::uint32_t> codes, int bits);
std::vector<std::uint32_t> unpack(const PackedTensor& p);

/// Offset-binary mapping for signed linear codes: code + 2^(bits-1).
inline std::uint32_t to_unsigned_code(int code, int bits) {
  return static_cast<std::uint32_t>(code + (1 << (bits - 1)));
}
inline int to_signed_code(std::uint32_t code, int bits) { return static_cast<int>(code) - (1 << (bits - 1)); }

}  // namespace gaq
