#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace gaq {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  friend constexpr Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Vec3 operator-(Vec3 a) { return {-a.x, -a.y, -a.z}; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return s * a; }
  friend constexpr Vec3 operator/(Vec3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
  constexpr Vec3& operator+=(Vec3 b) {
    x += b.x;
    y += b.y;
    z += b.z;
    return *this;
  }
  constexpr Vec3& operator-=(Vec3 b) {
    x -= b.x;
    y -= b.y;
    z -= b.z;
    return *this;
  }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
// hypot keeps the norm finite for large components.
inline double norm(Vec3 a) { return std::hypot(a.x, a.y, a.z); }
inline Vec3 normalized(Vec3 a) { return a / norm(a); }

/// Angle between two unit vectors, accurate near 0 and pi.
inline double angle_between(Vec3 a, Vec3 b) { return std::atan2(norm(cross(a, b)), dot(a, b)); }

/// Proper rotation stored as a row-major 3x3 matrix. D^(1)(R) is the matrix
/// itself; scalars transform trivially.
class Rotation {
 public:
  using Matrix = std::array<std::array<double, 3>, 3>;

  Rotation() : m_{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}} {}
  /// Throws if m is not orthogonal with unit determinant (1e-12 tolerance).
  explicit Rotation(const Matrix& m);

  static Rotation identity() { return {}; }
  static Rotation about_z(double radians);
  static Rotation about_axis(Vec3 axis, double radians);
  /// Unit quaternion (w, x, y, z); normalised internally.
  static Rotation from_quaternion(double w, double x, double y, double z);

  const Matrix& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_[r][c]; }

  Vec3 apply(Vec3 v) const {
    return {m_[0][0] * v.x + m_[0][1] * v.y + m_[0][2] * v.z,
            m_[1][0] * v.x + m_[1][1] * v.y + m_[1][2] * v.z,
            m_[2][0] * v.x + m_[2][1] * v.y + m_[2][2] * v.z};
  }
  Rotation transpose() const;
  Rotation operator*(const Rotation& other) const;

  double orthogonality_defect() const;  // ||m^T m - I||_F
  double determinant() const;

 private:
  struct Unchecked {};
  Rotation(const Matrix& m, Unchecked) : m_(m) {}
  Matrix m_;
};

inline Vec3 rotate(const Rotation& r, Vec3 v) { return r.apply(v); }

std::vector<Vec3> rotate_all(const Rotation& r, std::span<const Vec3> vs);

/// Seeded Haar sampler. The same seed replays the same sequence; `counter`
/// is the number of rotations drawn so far.
class RotationSampler {
 public:
  explicit RotationSampler(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  Rotation next();
  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  /// Uniform direction on S^2 drawn from the same stream.
  Vec3 next_direction();

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline Rotation sample_haar(RotationSampler& s) { return s.next(); }

/// Output representation for (energy, forces) pairs: scalars untouched,
/// every force rotated.
std::pair<std::vector<double>, std::vector<Vec3>> apply_output_rep(const Rotation& r,
                                                                  std::span<const double> energies,
                                                                  std::span<const Vec3> forces);

}  // namespace gaq
