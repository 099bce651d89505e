#include "gaq/codebook.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include "gaq/error.hpp"

namespace gaq {

namespace {

std::vector<Vec3> octahedron_vertices() {
  return {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
}

std::vector<Vec3> icosahedron_vertices() {
  const double phi = std::numbers::phi;
  std::vector<Vec3> v;
  for (double a : {1.0, -1.0})
    for (double b : {phi, -phi}) {
      v.push_back({0.0, a, b});
      v.push_back({a, b, 0.0});
      v.push_back({b, 0.0, a});
    }
  for (Vec3& p : v) p = normalized(p);
  return v;
}

std::vector<Vec3> fibonacci_points(int n) {
  // Golden-angle spiral with points at the centres of equal-area z bands.
  const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden_angle * i;
    pts.push_back(normalized({r * std::cos(phi), r * std::sin(phi), z}));
  }
  return pts;
}

int argmax_cosine(const std::vector<Vec3>& centers, Vec3 u) {
  int best = 0;
  double best_dot = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(centers.size()); ++i) {
    const double d = dot(centers[i], u);
    if (d > best_dot) {
      best_dot = d;
      best = i;
    }
  }
  return best;
}

std::vector<Vec3> spherical_kmeans(int n, std::uint64_t seed) {
  RotationSampler sampler(seed);
  std::vector<Vec3> data(static_cast<std::size_t>(100) * n);
  for (Vec3& d : data) d = sampler.next_direction();

  std::vector<Vec3> centers(data.begin(), data.begin() + n);
  std::vector<int> assign(data.size(), -1);
  for (int iter = 0; iter < 200; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const int a = argmax_cosine(centers, data[i]);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;

    std::vector<Vec3> sums(n);
    std::vector<int> counts(n, 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      sums[assign[i]] += data[i];
      ++counts[assign[i]];
    }
    for (int c = 0; c < n; ++c) {
      if (counts[c] > 0 && norm(sums[c]) > 1e-12) {
        centers[c] = normalized(sums[c]);
        continue;
      }
      // Empty cluster: reseed from the point worst served by its centre.
      std::size_t far = 0;
      double worst = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double d = dot(data[i], centers[assign[i]]);
        if (d < worst) {
          worst = d;
          far = i;
        }
      }
      centers[c] = data[far];
      assign[far] = c;
    }
  }
  return centers;
}

}  // namespace

CodebookSpec CodebookSpec::parse(const std::string& tag) {
  std::vector<std::string> parts;
  std::stringstream ss(tag);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error(ErrorCode::FormatError, "bad codebook tag '" + tag + "'");
    }
  };
  if (parts.size() == 1 && parts[0] == "octahedron") return octahedron();
  if (parts.size() == 1 && parts[0] == "icosahedron") return icosahedron();
  if (parts.size() == 2 && parts[0] == "fibonacci") return fibonacci(static_cast<int>(to_int(parts[1])));
  if (parts.size() == 3 && parts[0] == "kmeans")
    return kmeans(static_cast<int>(to_int(parts[1])), static_cast<std::uint64_t>(to_int(parts[2])));
  throw Error(ErrorCode::FormatError, "unknown codebook tag '" + tag + "'");
}

std::string CodebookSpec::tag() const {
  switch (kind) {
    case CodebookKind::Octahedron: return "octahedron";
    case CodebookKind::Icosahedron: return "icosahedron";
    case CodebookKind::Fibonacci: return "fibonacci:" + std::to_string(size);
    case CodebookKind::KMeans: return "kmeans:" + std::to_string(size) + ":" + std::to_string(seed);
  }
  return "unknown";
}

std::uint32_t CodebookSpec::id() const {
  return (static_cast<std::uint32_t>(kind) << 24) | (static_cast<std::uint32_t>(size) & 0xFFFFFFu);
}

SphericalCodebook::SphericalCodebook(std::vector<Vec3> cw, CodebookSpec spec)
    : codewords_(std::move(cw)), spec_(spec) {
  spec_.size = static_cast<int>(codewords_.size());
  if (codewords_.empty()) throw Error(ErrorCode::InvalidSize, "codebook is empty");
  if (codewords_.size() > 1 && min_pairwise_angle() <= 1e-6)
    throw Error(ErrorCode::InvalidSize, "codebook has coincident codewords");
}

SphericalCodebook SphericalCodebook::build(const CodebookSpec& spec) {
  switch (spec.kind) {
    case CodebookKind::Octahedron: return SphericalCodebook(octahedron_vertices(), spec);
    case CodebookKind::Icosahedron: return SphericalCodebook(icosahedron_vertices(), spec);
    case CodebookKind::Fibonacci:
    case CodebookKind::KMeans:
      if (spec.size < 4) throw Error(ErrorCode::InvalidSize, "codebook size must be >= 4");
      if (spec.kind == CodebookKind::Fibonacci) return SphericalCodebook(fibonacci_points(spec.size), spec);
      return SphericalCodebook(spherical_kmeans(spec.size, spec.seed), spec);
  }
  throw Error(ErrorCode::InvalidSize, "unknown codebook kind");
}

SphericalCodebook SphericalCodebook::from_codewords(std::vector<Vec3> codewords, CodebookSpec spec) {
  for (Vec3& c : codewords) c = normalized(c);
  return SphericalCodebook(std::move(codewords), spec);
}

NearestCodeword SphericalCodebook::nearest(Vec3 u) const {
  const int i = nearest_index(u);
  return {i, codewords_[i]};
}

int SphericalCodebook::nearest_index(Vec3 u) const {
  if (!(std::abs(norm(u) - 1.0) <= 1e-9)) throw Error(ErrorCode::NotUnit, "direction is not unit-norm");
  return argmax_cosine(codewords_, u);
}

double SphericalCodebook::estimate_covering_radius(int n_samples, std::uint64_t seed) {
  RotationSampler sampler(seed);
  double worst = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const Vec3 u = sampler.next_direction();
    worst = std::max(worst, angle_between(u, codewords_[argmax_cosine(codewords_, u)]));
  }
  covering_radius_est_ = worst;
  return worst;
}

double SphericalCodebook::min_pairwise_angle() const {
  double best = std::numbers::pi;
  for (std::size_t i = 0; i < codewords_.size(); ++i)
    for (std::size_t j = i + 1; j < codewords_.size(); ++j)
      best = std::min(best, angle_between(codewords_[i], codewords_[j]));
  return best;
}

void SphericalCodebook::write_text(std::ostream& os) const {
  os << "codebook " << spec_.tag() << ' ' << codewords_.size() << '\n';
  char buf[128];
  for (const Vec3& c : codewords_) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", c.x, c.y, c.z);
    os << buf;
  }
}

SphericalCodebook SphericalCodebook::read_text(std::istream& is) {
  std::string word, tag;
  std::size_t count = 0;
  if (!(is >> word >> tag >> count) || word != "codebook")
    throw Error(ErrorCode::FormatError, "missing codebook header");
  std::vector<Vec3> cw(count);
  for (Vec3& c : cw)
    if (!(is >> c.x >> c.y >> c.z)) throw Error(ErrorCode::FormatError, "truncated codebook");
  SphericalCodebook cb(std::move(cw), CodebookSpec::parse(tag));
  for (const Vec3& c : cb.codewords_)
    if (std::abs(norm(c) - 1.0) > 1e-12) throw Error(ErrorCode::NotUnit, "codeword is not unit-norm");
  return cb;
}

}  // namespace gaq
