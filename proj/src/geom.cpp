#include "gaq/geom.hpp"

#include <string>

#include "gaq/error.hpp"

namespace gaq {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidSize: return "InvalidSize";
    case ErrorCode::NotUnit: return "NotUnit";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::CodeOutOfRange: return "CodeOutOfRange";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyCalibrationSet: return "EmptyCalibrationSet";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::NonFiniteForce: return "NonFiniteForce";
    case ErrorCode::InsufficientSize: return "InsufficientSize";
    case ErrorCode::SelfCheckFailed: return "SelfCheckFailed";
    case ErrorCode::CheckpointLoadError: return "CheckpointLoadError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

Rotation::Rotation(const Matrix& m) : m_(m) {
  if (orthogonality_defect() > 1e-12 || std::abs(determinant() - 1.0) > 1e-12) {
    throw Error(ErrorCode::InvalidSize, "matrix is not a proper rotation");
  }
}

Rotation Rotation::about_z(double radians) {
  const double c = std::cos(radians);
  const double s = std::sin(radians);
  return Rotation(Matrix{{{c, -s, 0.0}, {s, c, 0.0}, {0.0, 0.0, 1.0}}}, Unchecked{});
}

Rotation Rotation::about_axis(Vec3 axis, double radians) {
  const Vec3 a = normalized(axis);
  const double h = 0.5 * radians;
  const double s = std::sin(h);
  return from_quaternion(std::cos(h), s * a.x, s * a.y, s * a.z);
}

Rotation Rotation::from_quaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Matrix m{{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
            {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
            {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
  return Rotation(m, Unchecked{});
}

Rotation Rotation::transpose() const {
  Matrix t{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t[r][c] = m_[c][r];
  return Rotation(t, Unchecked{});
}

Rotation Rotation::operator*(const Rotation& other) const {
  Matrix p{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += m_[r][k] * other.m_[k][c];
      p[r][c] = acc;
    }
  return Rotation(p, Unchecked{});
}

double Rotation::orthogonality_defect() const {
  double acc = 0.0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double g = 0.0;
      for (int k = 0; k < 3; ++k) g += m_[k][r] * m_[k][c];
      const double d = g - (r == c ? 1.0 : 0.0);
      acc += d * d;
    }
  return std::sqrt(acc);
}

double Rotation::determinant() const {
  const auto& m = m_;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

std::vector<Vec3> rotate_all(const Rotation& r, std::span<const Vec3> vs) {
  std::vector<Vec3> out;
  out.reserve(vs.size());
  for (const Vec3& v : vs) out.push_back(r.apply(v));
  return out;
}

Rotation RotationSampler::next() {
  // Normalised 4D Gaussian is uniform on S^3, i.e. Haar on SO(3).
  const double w = normal_(engine_);
  const double x = normal_(engine_);
  const double y = normal_(engine_);
  const double z = normal_(engine_);
  ++counter_;
  return Rotation::from_quaternion(w, x, y, z);
}

Vec3 RotationSampler::next_direction() {
  Vec3 v;
  double n = 0.0;
  do {
    v = {normal_(engine_), normal_(engine_), normal_(engine_)};
    n = norm(v);
  } while (n < 1e-12);
  return v / n;
}

std::pair<std::vector<double>, std::vector<Vec3>> apply_output_rep(const Rotation& r,
                                                                  std::span<const double> energies,
                                                                  std::span<const Vec3> forces) {
  return {std::vector<double>(energies.begin(), energies.end()), rotate_all(r, forces)};
}

}  // namespace gaq
