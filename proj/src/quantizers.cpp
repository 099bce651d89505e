#include "gaq/quantizers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "gaq/error.hpp"
#include "gaq/binary_io.hpp"

namespace gaq {

QuantScheme QuantScheme::linear(int bits, double scale) {
  if (bits < 2 || bits > 16 || !(scale > 0.0)) throw Error(ErrorCode::InvalidSize, "bad linear scheme");
  return {bits, QuantKind::LinearSymmetric, scale, 0};
}

QuantScheme QuantScheme::magnitude(int bits, double log_scale) {
  if (bits < 2 || bits > 16 || !(log_scale > 0.0)) throw Error(ErrorCode::InvalidSize, "bad magnitude scheme");
  return {bits, QuantKind::MagnitudeLog, log_scale, 0};
}

QuantScheme QuantScheme::magnitude_for_range(int bits, double lo, double hi) {
  lo = std::clamp(lo, kMagnitudeFloor, kMagnitudeCeil);
  hi = std::clamp(hi, kMagnitudeFloor, kMagnitudeCeil);
  const double extent = std::max(std::abs(std::log(lo)), std::abs(std::log(hi)));
  const int qmax = (1 << (bits - 1)) - 1;
  // A range collapsing onto m == 1 still needs a positive step.
  return magnitude(bits, std::max(extent, 1e-6) / qmax);
}

QuantScheme QuantScheme::direction(int bits, const SphericalCodebook& cb) {
  if (cb.size() > (1 << bits)) throw Error(ErrorCode::InvalidSize, "codebook does not fit in the index width");
  return {bits, QuantKind::Direction, 1.0, cb.spec().id()};
}

int linear_code(double x, const QuantScheme& s) {
  const int qmax = s.qmax();
  const double r = std::round(x / s.scale);
  return static_cast<int>(std::clamp(r, static_cast<double>(-qmax), static_cast<double>(qmax)));
}

bool linear_in_range(double x, const QuantScheme& s) {
  return std::abs(x / s.scale) <= s.qmax() + 0.5;
}

double quantize_linear(double x, const QuantScheme& s) { return linear_code(x, s) * s.scale; }

int magnitude_code(double m, const QuantScheme& s) { return linear_code(std::log(m), s); }

bool magnitude_in_range(double m, const QuantScheme& s) { return m > 0.0 && linear_in_range(std::log(m), s); }

double quantize_magnitude(double m, const QuantScheme& s) {
  if (m == 0.0) return 0.0;
  return std::exp(magnitude_code(m, s) * s.scale);
}

Vec3 quantize_direction(Vec3 u, const SphericalCodebook& cb) { return cb.nearest(u).codeword; }

Vec3 quantize_direction(Vec3 u, const QuantScheme& s, const SphericalCodebook& cb) {
  if (s.kind != QuantKind::Direction || s.codebook_id != cb.spec().id())
    throw Error(ErrorCode::ShapeMismatch, "scheme does not reference this codebook");
  return quantize_direction(u, cb);
}

Vec3 mddq(Vec3 v, const QuantScheme& magnitude, const SphericalCodebook& cb) {
  return mddq_factored(v, magnitude, cb).vector();
}

MddqValue mddq_factored(Vec3 v, const QuantScheme& magnitude, const SphericalCodebook& cb) {
  const double m = norm(v);
  if (m == 0.0) return {};
  const NearestCodeword n = cb.nearest(v / m);
  return {quantize_magnitude(m, magnitude), n.index, n.codeword};
}

double commutation_error(Vec3 v, const Rotation& r, const SphericalCodebook& cb) {
  const double m = norm(v);
  if (m == 0.0) throw Error(ErrorCode::ZeroVector, "commutation error of the zero vector");
  const Vec3 u = v / m;
  return norm(quantize_direction(r.apply(u), cb) - r.apply(quantize_direction(u, cb)));
}

Vec3 quantize_per_axis(Vec3 v, const QuantScheme& s) {
  return {quantize_linear(v.x, s), quantize_linear(v.y, s), quantize_linear(v.z, s)};
}

std::size_t PackedTensor::element_count() const {
  std::size_t n = 1;
  for (std::uint32_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

PackedTensor pack(std::span<const std::uint32_t> codes, int bits) {
  if (bits < 1 || bits > 32) throw Error(ErrorCode::InvalidSize, "bit width out of range");
  PackedTensor p;
  p.bits = bits;
  p.shape = {static_cast<std::uint32_t>(codes.size())};
  p.payload.assign((codes.size() * bits + 7) / 8, 0);
  const std::uint64_t limit = std::uint64_t{1} << bits;
  std::size_t bitpos = 0;
  for (std::uint32_t c : codes) {
    if (c >= limit) throw Error(ErrorCode::CodeOutOfRange, "code " + std::to_string(c) + " needs more bits");
    for (int b = 0; b < bits; ++b, ++bitpos)
      if ((c >> b) & 1u) p.payload[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
  }
  return p;
}

std::vector<std::uint32_t> unpack(const PackedTensor& p) {
  const std::size_t n = p.element_count();
  if (p.payload.size() != (n * p.bits + 7) / 8) throw Error(ErrorCode::ShapeMismatch, "payload length mismatch");
  std::vector<std::uint32_t> out(n, 0);
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (int b = 0; b < p.bits; ++b, ++bitpos)
      if ((p.payload[bitpos / 8] >> (bitpos % 8)) & 1u) out[i] |= 1u << b;
  return out;
}

void PackedTensor::write(std::ostream& os) const {
  bin::write_magic(os, "EQPK");
  bin::write_u16(os, 1);
  bin::write_u8(os, static_cast<std::uint8_t>(bits));
  bin::write_u8(os, static_cast<std::uint8_t>(shape.size()));
  for (std::uint32_t d : shape) bin::write_u32(os, d);
  bin::write_u32(os, static_cast<std::uint32_t>(schemes.size()));
  for (const QuantScheme& s : schemes) {
    bin::write_u8(os, static_cast<std::uint8_t>(s.kind));
    bin::write_f64(os, s.scale);
    bin::write_u32(os, s.codebook_id);
  }
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

PackedTensor PackedTensor::read(std::istream& is) {
  bin::expect_magic(is, "EQPK");
  if (bin::read_u16(is) != 1) throw Error(ErrorCode::FormatError, "unsupported EQPK version");
  PackedTensor p;
  p.bits = bin::read_u8(is);
  const int rank = bin::read_u8(is);
  p.shape.resize(rank);
  for (auto& d : p.shape) d = bin::read_u32(is);
  const std::uint32_t n_schemes = bin::read_u32(is);
  p.schemes.resize(n_schemes);
  for (QuantScheme& s : p.schemes) {
    const std::uint8_t kind = bin::read_u8(is);
    if (kind > 2) throw Error(ErrorCode::FormatError, "bad scheme kind");
    s.kind = static_cast<QuantKind>(kind);
    s.bits = p.bits;
    s.scale = bin::read_f64(is);
    s.codebook_id = bin::read_u32(is);
  }
  p.payload.resize((p.element_count() * p.bits + 7) / 8);
  is.read(reinterpret_cast<char*>(p.payload.data()), static_cast<std::streamsize>(p.payload.size()));
  if (!is) throw Error(ErrorCode::FormatError, "truncated EQPK payload");
  return p;
}

}  // namespace gaq
