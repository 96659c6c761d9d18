#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "decalign/analysis.hpp"

namespace decalign {

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::kInvalidArgument, "pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 3) throw Error(ErrorKind::kInvalidArgument, "pearson needs at least 3 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorKind::kUndefinedCorrelation, "undefined correlation: zero variance");
  Correlation c;
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double dof = static_cast<double>(n - 2);
  if (std::abs(c.r) >= 1.0) {
    c.p_value = 0.0;
    return c;
  }
  const double t = c.r * std::sqrt(dof / (1.0 - c.r * c.r));
  boost::math::students_t dist(dof);
  c.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
  return c;
}

double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::kInvalidArgument, "kendall: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw Error(ErrorKind::kInvalidArgument, "kendall needs at least 2 points");
  long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0) ++tie_x;
      if (dy == 0.0) ++tie_y;
      if (dx == 0.0 || dy == 0.0) continue;
      if ((dx > 0) == (dy > 0)) ++concordant;
      else ++discordant;
    }
  }
  const double n0 = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const double denom = std::sqrt((n0 - static_cast<double>(tie_x)) * (n0 - static_cast<double>(tie_y)));
  if (denom == 0.0) throw Error(ErrorKind::kUndefinedCorrelation, "undefined correlation: a vector is all tied");
  return static_cast<double>(concordant - discordant) / denom;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry).r;
}

MeanCI bootstrap_mean_ci(std::span<const double> values, int resamples, std::uint64_t seed, double level) {
  if (values.empty()) throw Error(ErrorKind::kInvalidArgument, "bootstrap of an empty sample");
  if (resamples < 1) throw Error(ErrorKind::kInvalidArgument, "bootstrap needs at least one resample");
  const std::size_t n = values.size();
  MeanCI ci;
  ci.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  Rng rng(mix_seed(seed, 0xB007));
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[static_cast<std::size_t>(rng.below(n))];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double tail = (1.0 - level) / 2.0;
  ci.low = quantile(tail);
  ci.high = quantile(1.0 - tail);
  if (n == 1) ci.low = ci.high = ci.mean;
  return ci;
}

// ---------------------------------------------------------------------------
// Hexbin

namespace {
constexpr double kSqrt3 = 1.7320508075688772;
}

HexGrid::HexGrid(double xmin, double xmax, double ymin, double ymax, int nx) : xmin_(xmin), ymin_(ymin), nx_(nx) {
  if (nx < 1) throw Error(ErrorKind::kInvalidArgument, "hexbin needs nx >= 1");
  sx_ = xmax > xmin ? (xmax - xmin) / nx : 1.0;
  sy_ = ymax > ymin ? (ymax - ymin) / nx : 1.0;
}

std::pair<int, int> HexGrid::cell_of(double x, double y) const {
  // Unit-width pointy-top hexagons: center(q, r) = (q + r/2, r * sqrt(3)/2).
  const double u = (x - xmin_) / sx_;
  const double v = (y - ymin_) / sy_;
  const double rf = v * 2.0 / kSqrt3;
  const double qf = u - rf / 2.0;
  const double sf = -qf - rf;
  double q = std::round(qf), r = std::round(rf), s = std::round(sf);
  const double dq = std::abs(q - qf), dr = std::abs(r - rf), ds = std::abs(s - sf);
  if (dq > dr && dq > ds) q = -r - s;
  else if (dr > ds) r = -q - s;
  return {static_cast<int>(q), static_cast<int>(r)};
}

std::pair<double, double> HexGrid::center(int q, int r) const {
  const double u = q + r / 2.0;
  const double v = r * kSqrt3 / 2.0;
  return {xmin_ + u * sx_, ymin_ + v * sy_};
}

double HexGrid::scaled_distance2(double x, double y, int q, int r) const {
  const double du = (x - xmin_) / sx_ - (q + r / 2.0);
  const double dv = (y - ymin_) / sy_ - r * kSqrt3 / 2.0;
  return du * du + dv * dv;
}

HexGrid hexbin(std::span<const HexPoint> points, int nx) {
  if (points.empty()) throw Error(ErrorKind::kInvalidArgument, "hexbin needs at least one point");
  double xmin = points[0].x, xmax = points[0].x, ymin = points[0].y, ymax = points[0].y;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  HexGrid grid(xmin, xmax, ymin, ymax, nx);
  std::map<std::pair<int, int>, std::pair<std::size_t, double>> acc;
  for (const auto& p : points) {
    auto& [count, sum] = acc[grid.cell_of(p.x, p.y)];
    ++count;
    sum += p.z;
  }
  for (const auto& [key, cs] : acc) {
    HexCell cell;
    cell.q = key.first;
    cell.r = key.second;
    std::tie(cell.cx, cell.cy) = grid.center(cell.q, cell.r);
    cell.count = cs.first;
    cell.mean = cs.second / static_cast<double>(cs.first);
    grid.cells.push_back(cell);
  }
  return grid;
}

}  // namespace decalign
