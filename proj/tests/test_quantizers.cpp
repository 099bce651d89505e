#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "gaq/error.hpp"
#include "gaq/quantizers.hpp"

using namespace gaq;

namespace {

// All 2*127+1 log-grid levels, nearest in log space by exhaustive scan.
double grid_scan_magnitude(double m, double log_scale) {
  double best = 0.0, best_d = std::numeric_limits<double>::infinity();
  for (int k = -127; k <= 127; ++k) {
    const double d = std::abs(std::log(m) - k * log_scale);
    if (d < best_d) {
      best_d = d;
      best = std::exp(k * log_scale);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("quantize_linear: worked values") {
  const auto s = QuantScheme::linear(8, 0.1);
  CHECK(quantize_linear(0.0, s) == 0.0);
  CHECK(quantize_linear(0.0, QuantScheme::linear(4, 3.7)) == 0.0);
  CHECK(linear_code(0.26, s) == 3);
  CHECK(quantize_linear(0.26, s) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(linear_code(1e9, s) == 127);
  CHECK(quantize_linear(1e9, s) == doctest::Approx(12.7).epsilon(1e-15));
  CHECK(quantize_linear(-1e9, s) == doctest::Approx(-12.7).epsilon(1e-15));
  CHECK(linear_code(1e9, QuantScheme::linear(4, 0.1)) == 7);
}

TEST_CASE("quantize_linear is idempotent") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-20, 20);
  for (int bits : {4, 8}) {
    const auto s = QuantScheme::linear(bits, 0.137);
    for (int k = 0; k < 1000; ++k) {
      const double q = quantize_linear(u(rng), s);
      CHECK(quantize_linear(q, s) == q);
    }
  }
}

TEST_CASE("scheme validation") {
  CHECK_THROWS_AS(QuantScheme::linear(8, 0.0), Error);
  CHECK_THROWS_AS(QuantScheme::magnitude(8, -1.0), Error);
  const auto fib = SphericalCodebook::build(CodebookSpec::fibonacci(256));
  CHECK_NOTHROW(QuantScheme::direction(8, fib));
  CHECK_THROWS_AS(QuantScheme::direction(4, fib), Error);
}

TEST_CASE("quantize_magnitude: zero, grid points, exhaustive grid scan") {
  const auto s = QuantScheme::magnitude_for_range(8, 1e-3, 1e2);
  CHECK(quantize_magnitude(0.0, s) == 0.0);
  for (int k : {-100, -3, 0, 5, 90}) {
    const double m = std::exp(k * s.scale);
    CHECK(std::abs(quantize_magnitude(m, s) - m) <= 1e-12 * m);
  }
  CHECK(quantize_magnitude(2.0, s) == grid_scan_magnitude(2.0, s.scale));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> lg(std::log(1e-3), std::log(1e2));
  for (int k = 0; k < 2000; ++k) {
    const double m = std::exp(lg(rng));
    const double q = quantize_magnitude(m, s);
    CHECK(q == doctest::Approx(grid_scan_magnitude(m, s.scale)).epsilon(1e-14));
    CHECK(q > 0.0);
    CHECK(quantize_magnitude(q, s) == doctest::Approx(q).epsilon(1e-14));
  }
}

TEST_CASE("magnitude_for_range covers the clamped range") {
  const auto s = QuantScheme::magnitude_for_range(8, 1e-9, 1e9);
  CHECK(s.scale == doctest::Approx(std::log(1e6) / 127).epsilon(1e-15));
  CHECK(magnitude_in_range(1e-6 * 1.0001, s));
  CHECK_FALSE(magnitude_in_range(0.0, s));
}

TEST_CASE("quantize_direction delegates to the codebook") {
  const auto oct = SphericalCodebook::build(CodebookSpec::octahedron());
  CHECK(quantize_direction({0, 0, 1}, oct) == Vec3{0, 0, 1});
  CHECK(quantize_direction(normalized({1, 1, 0}), oct) == Vec3{1, 0, 0});
  const auto fib = SphericalCodebook::build(CodebookSpec::fibonacci(256));
  const auto sd = QuantScheme::direction(8, fib);
  RotationSampler rs(4);
  for (int k = 0; k < 500; ++k) {
    const Vec3 u = rs.next_direction();
    int best = 0;
    for (int i = 1; i < fib.size(); ++i)
      if (dot(fib.codewords()[i], u) > dot(fib.codewords()[best], u)) best = i;
    CHECK(quantize_direction(u, sd, fib) == fib.codewords()[best]);
  }
  CHECK_THROWS_AS(quantize_direction(Vec3{2, 0, 0}, oct), Error);
}

TEST_CASE("mddq: zero vector, double fixed point, componentwise oracle") {
  const auto fib = SphericalCodebook::build(CodebookSpec::fibonacci(256));
  const auto sm = QuantScheme::magnitude_for_range(8, 1e-3, 1e2);
  CHECK(mddq({0, 0, 0}, sm, fib) == Vec3{0, 0, 0});
  CHECK(mddq_factored({0, 0, 0}, sm, fib).direction_index == -1);

  const Vec3 fixed = std::exp(17 * sm.scale) * fib.codewords()[42];
  CHECK(mddq(fixed, sm, fib) == fixed);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int k = 0; k < 2000; ++k) {
    const Vec3 v{n(rng), n(rng), n(rng)};
    const MddqValue q = mddq_factored(v, sm, fib);
    CHECK(q.magnitude == quantize_magnitude(norm(v), sm));
    CHECK(q.direction == quantize_direction(v / norm(v), fib));
    CHECK(mddq(v, sm, fib) == q.vector());
    // The assembled vector carries the magnitude up to per-axis rounding.
    CHECK(std::abs(norm(q.vector()) - q.magnitude) <= 4 * std::numeric_limits<double>::epsilon() * q.magnitude);
    CHECK(mddq(q.vector(), sm, fib) == q.vector());
  }
}

TEST_CASE("mddq magnitude is rotation invariant; per-axis quantization is not") {
  const auto fib = SphericalCodebook::build(CodebookSpec::fibonacci(256));
  const auto sm = QuantScheme::magnitude_for_range(8, 1e-3, 1e2);
  RotationSampler rs(6);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const Vec3 v{n(rng), n(rng), n(rng)};
    const Rotation r = rs.next();
    CHECK(mddq_factored(r.apply(v), sm, fib).magnitude == mddq_factored(v, sm, fib).magnitude);
  }
  // Witness: a non-axis-aligned vector rotated 45 degrees about z.
  const auto s = QuantScheme::linear(8, 0.01);
  const Vec3 v{0.3, 0.7, 0.2};
  const Vec3 rv = Rotation::about_z(std::numbers::pi / 4).apply(v);
  CHECK(norm(quantize_per_axis(rv, s)) != norm(quantize_per_axis(v, s)));
}

TEST_CASE("commutation error: identity, octahedral symmetry, covering bound") {
  const auto oct = SphericalCodebook::build(CodebookSpec::octahedron());
  CHECK(commutation_error({0.3, -0.2, 0.9}, Rotation::identity(), oct) == 0.0);
  CHECK(commutation_error({1, 0, 0}, Rotation::about_z(std::numbers::pi / 2), oct) <= 1e-15);
  CHECK_THROWS_AS(commutation_error({0, 0, 0}, Rotation::identity(), oct), Error);

  auto fib = SphericalCodebook::build(CodebookSpec::fibonacci(256));
  const double delta = fib.estimate_covering_radius(200000, 8);
  const double bound = 4.0 * std::sin(delta / 2.0);
  RotationSampler rs(8);
  double worst = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Rotation r = rs.next();
    worst = std::max(worst, commutation_error(rs.next_direction(), r, fib));
  }
  CHECK(worst > 0.0);
  CHECK(worst <= bound);
}

TEST_CASE("pack/unpack: sizes, LSB-first order and round trip") {
  const PackedTensor empty = pack(std::span<const std::uint32_t>{}, 4);
  CHECK(empty.payload.empty());
  CHECK(unpack(empty).empty());

  const std::vector<std::uint32_t> eight{1, 2, 3, 4, 5, 6, 7, 15};
  const PackedTensor p4 = pack(eight, 4);
  CHECK(p4.payload.size() == 4);
  CHECK(p4.payload[0] == 0x21);
  CHECK(p4.payload[3] == 0xF7);
  CHECK(unpack(p4) == eight);

  std::mt19937_64 rng(7);
  std::vector<std::uint32_t> codes(1000);
  for (auto& c : codes) c = rng() & 0xF;
  const PackedTensor p = pack(codes, 4);
  CHECK(p.payload.size() == 500);
  CHECK(unpack(p) == codes);
  CHECK(pack(unpack(p), 4).payload == p.payload);

  std::vector<std::uint32_t> odd(7);
  for (auto& c : odd) c = rng() & 0x7;
  CHECK(pack(odd, 3).payload.size() == 3);
  CHECK(unpack(pack(odd, 3)) == odd);

  const std::vector<std::uint32_t> too_big{16};
  try {
    pack(too_big, 4);
    FAIL("expected CodeOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CodeOutOfRange);
  }
}

TEST_CASE("offset-binary mapping of signed codes") {
  for (int bits : {4, 8})
    for (int c = -((1 << (bits - 1)) - 1); c < (1 << (bits - 1)); ++c) {
      CHECK(to_unsigned_code(c, bits) < (1u << bits));
      CHECK(to_signed_code(to_unsigned_code(c, bits), bits) == c);
    }
}

TEST_CASE("EQPK serialization round trip and header layout") {
  std::vector<std::uint32_t> codes{0, 255, 17, 128, 3};
  PackedTensor p = pack(codes, 8);
  p.shape = {5, 1};
  p.schemes = {QuantScheme::linear(8, 0.25)};
  std::stringstream ss;
  p.write(ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "EQPK");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version, little-endian
  CHECK(static_cast<unsigned char>(bytes[6]) == 8);  // bits
  CHECK(static_cast<unsigned char>(bytes[7]) == 2);  // rank
  // header 8 + dims 8 + scheme count 4 + scheme 13 + payload 5
  CHECK(bytes.size() == 38);
  const PackedTensor back = PackedTensor::read(ss);
  CHECK(back == p);
  std::stringstream again;
  back.write(again);
  CHECK(again.str() == bytes);

  std::istringstream truncated(bytes.substr(0, 30));
  CHECK_THROWS_AS(PackedTensor::read(truncated), Error);
  std::istringstream bad_magic("XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(PackedTensor::read(bad_magic), Error);
}
