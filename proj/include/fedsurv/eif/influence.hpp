#pragma once

// Per-observation influence values of the target-only, site-specific transported,
// common-conditional-outcome and pooled estimators, on the whole time grid.
//
// Every slice stores, for its active rows, a raw anchor term and a raw
// augmentation term together with a per-row scale (an inverse site share), so
//   phi_i(t) = scale_i * (anchor_i(t) - aug_i(t)),   theta(t) = sum_i phi_i(t) / n.
// Centering is done within sites: phi*_i = phi_i - mean of phi over i's site.
// Each site block then has mean zero, and mean(phi*^2) is the usual plug-in
// variance of a sum of independent site means.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fedsurv/eif/h_functional.hpp"
#include "fedsurv/nuisance/bundle.hpp"
#include "fedsurv/survcore/csv.hpp"

namespace fedsurv {

enum class EstimatorKind { TGT, SITE, OWN, CCOD, POOL };

struct EstimatorId {
  EstimatorKind kind = EstimatorKind::TGT;
  int site = 0;  // SITE(k) / OWN(k)

  friend bool operator==(const EstimatorId&, const EstimatorId&) = default;
  friend auto operator<=>(const EstimatorId&, const EstimatorId&) = default;
};

inline std::string to_string(const EstimatorId& e) {
  switch (e.kind) {
    case EstimatorKind::TGT: return "TGT";
    case EstimatorKind::SITE: return "SITE" + std::to_string(e.site);
    case EstimatorKind::OWN: return "OWN" + std::to_string(e.site);
    case EstimatorKind::CCOD: return "CCOD";
    case EstimatorKind::POOL: return "POOL";
  }
  return "?";
}

/// One estimator and one arm over the full grid.
struct InfluenceSlice {
  EstimatorId id;
  int a = 0;
  std::size_t grid_size = 0;
  std::size_t n = 0;                    // total sample size (denominator of theta)
  std::vector<std::size_t> rows;        // active global rows, sorted
  std::vector<int> row_site;
  std::vector<int> group;               // centering group of each row (its site, except for POOL)
  std::vector<double> scale;            // per active row
  std::vector<double> anchor, aug;      // [g * rows.size() + r]
  std::vector<double> theta;            // per grid index
  std::map<int, std::vector<double>> site_mean;  // group -> per grid index mean of phi over the group's rows
  std::map<int, std::size_t> site_rows;
  bool degenerate = false;              // augmentation identically zero (e.g. no rows in the arm)

  std::size_t width() const { return rows.size(); }
  double phi(std::size_t g, std::size_t r) const {
    const std::size_t k = g * rows.size() + r;
    return scale[r] * (anchor[k] - aug[k]);
  }
  double phi_centered(std::size_t g, std::size_t r) const { return phi(g, r) - site_mean.at(group[r])[g]; }
};

struct EstimateWithCI {
  double theta = 0.0;
  double se = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;
  std::size_t n_effective = 0;
  bool ci_available = true;  // false when se is numerically zero
};

inline EstimateWithCI wald_interval(double theta, double se, std::size_t n_eff) {
  EstimateWithCI e;
  e.theta = theta;
  e.se = se;
  e.n_effective = n_eff;
  if (!(se > 1e-15)) {
    e.se = 0.0;
    e.ci_available = false;
    e.ci_lo = e.ci_hi = theta;
    return e;
  }
  e.ci_lo = std::clamp(theta - 1.959963984540054 * se, 0.0, 1.0);
  e.ci_hi = std::clamp(theta + 1.959963984540054 * se, 0.0, 1.0);
  e.ci_lo = std::min(e.ci_lo, theta);
  e.ci_hi = std::max(e.ci_hi, theta);
  return e;
}

class InfluenceTable {
 public:
  InfluenceTable() = default;
  InfluenceTable(TimeGrid grid, std::size_t n) : grid_(std::move(grid)), n_(n) {}

  const TimeGrid& grid() const { return grid_; }
  std::size_t n() const { return n_; }

  void insert(InfluenceSlice s) {
    const auto key = std::make_pair(s.id, s.a);
    slices_.insert_or_assign(key, std::move(s));
  }
  bool has(const EstimatorId& e, int a) const { return slices_.count({e, a}) > 0; }
  const InfluenceSlice& slice(const EstimatorId& e, int a) const {
    auto it = slices_.find({e, a});
    if (it == slices_.end()) fail(ErrorKind::EmptyTable, "no influence values for " + to_string(e));
    return it->second;
  }
  std::vector<EstimatorId> estimators() const {
    std::vector<EstimatorId> out;
    for (const auto& [k, v] : slices_)
      if (k.second == 0) out.push_back(k.first);
    return out;
  }
  double theta(const EstimatorId& e, double t, int a) const { return slice(e, a).theta[grid_.index_of(t)]; }

 private:
  TimeGrid grid_;
  std::size_t n_ = 0;
  std::map<std::pair<EstimatorId, int>, InfluenceSlice> slices_;
};

namespace detail {

/// out[g] = I(A = a) / pi_a * H(t_g; S, G) * S(t_g); zero when A != a.
inline std::size_t augmentation_curve(const Observation& o, int a, double pi_a, const TimeGrid& grid,
                                      std::span<const double> s, std::span<const double> g, std::span<double> out) {
  if (o.a != a) {
    std::fill(out.begin(), out.end(), 0.0);
    return 0;
  }
  const std::size_t floors = h_curve(observed_index(grid, o.y), o.delta, s, g, out);
  for (std::size_t u = 0; u < out.size(); ++u) out[u] *= s[u] / pi_a;
  return floors;
}

inline InfluenceSlice make_slice(EstimatorId id, int a, const TimeGrid& grid, const Dataset& data,
                                 std::vector<std::size_t> rows, const std::vector<double>& site_scale) {
  InfluenceSlice s;
  s.id = id;
  s.a = a;
  s.grid_size = grid.size();
  s.n = data.size();
  s.rows = std::move(rows);
  std::sort(s.rows.begin(), s.rows.end());
  for (std::size_t i : s.rows) {
    s.row_site.push_back(data[i].r);
    s.group.push_back(data[i].r);
    s.scale.push_back(site_scale[static_cast<std::size_t>(data[i].r)]);
  }
  s.anchor.assign(s.grid_size * s.rows.size(), 0.0);
  s.aug.assign(s.grid_size * s.rows.size(), 0.0);
  return s;
}

inline void put_column(std::vector<double>& dst, std::size_t width, std::size_t r, std::span<const double> col,
                       double factor = 1.0) {
  for (std::size_t g = 0; g < col.size(); ++g) dst[g * width + r] = factor * col[g];
}

inline void finalize_slice(InfluenceSlice& s) {
  const std::size_t w = s.width();
  s.theta.assign(s.grid_size, 0.0);
  s.site_mean.clear();
  s.site_rows.clear();
  for (int site : s.group) ++s.site_rows[site];
  for (const auto& [site, cnt] : s.site_rows) s.site_mean[site].assign(s.grid_size, 0.0);
  bool any_aug = false;
  for (double v : s.aug)
    if (v != 0.0) {
      any_aug = true;
      break;
    }
  s.degenerate = !any_aug;
  for (std::size_t g = 0; g < s.grid_size; ++g) {
    double total = 0.0;
    for (std::size_t r = 0; r < w; ++r) {
      const double v = s.phi(g, r);
      total += v;
      s.site_mean[s.group[r]][g] += v;
    }
    s.theta[g] = total / static_cast<double>(s.n);
  }
  for (auto& [site, m] : s.site_mean)
    for (double& v : m) v /= static_cast<double>(s.site_rows[site]);
}

inline std::vector<double> site_scales(const Dataset& data, int K) {
  std::vector<double> cnt(static_cast<std::size_t>(K), 0.0);
  for (const auto& o : data) cnt[static_cast<std::size_t>(o.r)] += 1.0;
  std::vector<double> out(cnt.size(), 0.0);
  for (std::size_t k = 0; k < cnt.size(); ++k)
    out[k] = cnt[k] > 0 ? static_cast<double>(data.size()) / cnt[k] : 0.0;
  return out;
}

inline std::vector<std::size_t> site_rows(const Dataset& data, int k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].r == k) out.push_back(i);
  return out;
}

}  // namespace detail

/// Target-only estimator: phi = I(R=0)/p0 * [S0(t) - I(A=a)/pi0 * H * S0(t)].
inline InfluenceSlice eif_target(const Dataset& data, const NuisanceBundle& b, int a) {
  require(b.federated, ErrorKind::WrongBundleMode, "target estimator needs federated-mode nuisances");
  auto rows = detail::site_rows(data, 0);
  require(!rows.empty(), ErrorKind::EmptyTarget, "no target-site observations");
  auto s = detail::make_slice({EstimatorKind::TGT, 0}, a, b.grid, data, rows, detail::site_scales(data, b.num_sites));
  std::vector<double> col(b.grid.size());
  for (std::size_t r = 0; r < s.width(); ++r) {
    const std::size_t i = s.rows[r];
    detail::put_column(s.anchor, s.width(), r, b.s_target.at(i, a));
    detail::augmentation_curve(data[i], a, b.pi(i, a), b.grid, b.s_target.at(i, a), b.g_own.at(i, a), col);
    detail::put_column(s.aug, s.width(), r, col);
  }
  detail::finalize_slice(s);
  return s;
}

/// Unadjusted estimator of site k's own survival curve (no transport), from own-site nuisances.
inline InfluenceSlice eif_own(const Dataset& data, const NuisanceBundle& b, int k, int a) {
  require(b.federated && !b.s_own.empty(), ErrorKind::WrongBundleMode, "own-site estimator needs own-site survival");
  auto rows = detail::site_rows(data, k);
  require(!rows.empty(), ErrorKind::EmptySite, "site " + std::to_string(k) + " has no observations");
  auto s = detail::make_slice({EstimatorKind::OWN, k}, a, b.grid, data, rows, detail::site_scales(data, b.num_sites));
  std::vector<double> col(b.grid.size());
  for (std::size_t r = 0; r < s.width(); ++r) {
    const std::size_t i = s.rows[r];
    detail::put_column(s.anchor, s.width(), r, b.s_own.at(i, a));
    detail::augmentation_curve(data[i], a, b.pi(i, a), b.grid, b.s_own.at(i, a), b.g_own.at(i, a), col);
    detail::put_column(s.aug, s.width(), r, col);
  }
  detail::finalize_slice(s);
  return s;
}

/// Site-specific transported estimator:
/// phi = I(R=0)/p0 * S0(t) - I(R=k)/pk * omega * I(A=a)/pik * H(Sk, Gk) * Sk(t).
inline InfluenceSlice eif_site(const Dataset& data, const NuisanceBundle& b, int k, int a) {
  require(b.federated, ErrorKind::WrongBundleMode, "site estimator needs federated-mode nuisances");
  require(k >= 1 && k < b.num_sites, ErrorKind::InvalidInput, "site estimator needs 1 <= k < K");
  auto target = detail::site_rows(data, 0);
  auto own = detail::site_rows(data, k);
  require(!target.empty(), ErrorKind::EmptyTarget, "no target-site observations");
  require(!own.empty(), ErrorKind::EmptySite, "site " + std::to_string(k) + " has no observations");
  target.insert(target.end(), own.begin(), own.end());
  auto s = detail::make_slice({EstimatorKind::SITE, k}, a, b.grid, data, target, detail::site_scales(data, b.num_sites));
  std::vector<double> col(b.grid.size());
  for (std::size_t r = 0; r < s.width(); ++r) {
    const std::size_t i = s.rows[r];
    if (data[i].r == 0) {
      detail::put_column(s.anchor, s.width(), r, b.s_target.at(i, a));
    } else {
      detail::augmentation_curve(data[i], a, b.pi(i, a), b.grid, b.s_target.at(i, a), b.g_own.at(i, a), col);
      detail::put_column(s.aug, s.width(), r, col, b.omega.empty() ? 1.0 : b.omega[i]);
    }
  }
  detail::finalize_slice(s);
  return s;
}

/// Common-conditional-outcome estimator: anchor on target rows, augmentation on all rows,
/// phi = [I(R=0) S(t) - q0(X) I(A=a)/pi * H(S, G) * S(t)] / p0 with pooled nuisances.
inline InfluenceSlice eif_ccod(const Dataset& data, const NuisanceBundle& b, int a) {
  require(b.pooled, ErrorKind::WrongBundleMode, "CCOD estimator needs pooled nuisances");
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const auto p = detail::site_scales(data, b.num_sites);
  require(p[0] > 0.0, ErrorKind::EmptyTarget, "no target-site observations");
  std::vector<double> scale(p.size(), p[0]);
  auto s = detail::make_slice({EstimatorKind::CCOD, 0}, a, b.grid, data, all, scale);
  std::vector<double> col(b.grid.size());
  for (std::size_t r = 0; r < s.width(); ++r) {
    const std::size_t i = s.rows[r];
    if (data[i].r == 0) detail::put_column(s.anchor, s.width(), r, b.s_bar.at(i, a));
    detail::augmentation_curve(data[i], a, b.pi(i, a, true), b.grid, b.s_bar.at(i, a), b.g_bar.at(i, a), col);
    detail::put_column(s.aug, s.width(), r, col, b.q0.empty() ? 1.0 : b.q0[i]);
  }
  detail::finalize_slice(s);
  return s;
}

/// Naive pooling: the target-only estimator with every row treated as target,
/// using the pooled nuisances.
inline InfluenceSlice eif_pool(const Dataset& data, const NuisanceBundle& b, int a) {
  require(b.pooled, ErrorKind::WrongBundleMode, "pooled estimator needs pooled nuisances");
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> scale(static_cast<std::size_t>(b.num_sites), 1.0);
  auto s = detail::make_slice({EstimatorKind::POOL, 0}, a, b.grid, data, all, scale);
  std::vector<double> col(b.grid.size());
  for (std::size_t r = 0; r < s.width(); ++r) {
    const std::size_t i = s.rows[r];
    detail::put_column(s.anchor, s.width(), r, b.s_bar.at(i, a));
    detail::augmentation_curve(data[i], a, b.pi(i, a, true), b.grid, b.s_bar.at(i, a), b.g_bar.at(i, a), col);
    detail::put_column(s.aug, s.width(), r, col);
  }
  // pooled rows are centered as one sample
  std::fill(s.group.begin(), s.group.end(), 0);
  detail::finalize_slice(s);
  return s;
}

/// All estimators the bundle supports, both arms.
inline InfluenceTable build_influence_table(const Dataset& data, const NuisanceBundle& b, bool with_own = true) {
  InfluenceTable table(b.grid, data.size());
  for (int a = 0; a < 2; ++a) {
    if (b.federated) {
      table.insert(eif_target(data, b, a));
      for (int k = 1; k < b.num_sites; ++k) table.insert(eif_site(data, b, k, a));
      if (with_own && !b.s_own.empty())
        for (int k = 0; k < b.num_sites; ++k) table.insert(eif_own(data, b, k, a));
    }
    if (b.pooled) {
      table.insert(eif_ccod(data, b, a));
      table.insert(eif_pool(data, b, a));
    }
  }
  return table;
}

/// Plug-in variance mean(phi*^2) with se = sqrt(V / n) and a clamped Wald interval.
inline EstimateWithCI estimator_variance(const InfluenceTable& table, const EstimatorId& e, double t, int a) {
  require(table.n() > 0, ErrorKind::EmptyTable, "influence table is empty");
  const auto& s = table.slice(e, a);
  const std::size_t g = table.grid().index_of(t);
  double v = 0.0;
  for (std::size_t r = 0; r < s.width(); ++r) {
    const double c = s.phi_centered(g, r);
    v += c * c;
  }
  v /= static_cast<double>(table.n());
  return wald_interval(s.theta[g], std::sqrt(v / static_cast<double>(table.n())), s.width());
}

/// chi = theta^{k,0} - theta^0.
inline double discrepancy(const InfluenceTable& table, int k, double t, int a) {
  return table.theta({EstimatorKind::SITE, k}, t, a) - table.theta({EstimatorKind::TGT, 0}, t, a);
}

/// Columnar export: i, site, estimator, t, a, phi_uncentered, phi_centered (rows outside a
/// slice have zero influence and are omitted).
inline void write_influence_csv(std::ostream& out, const InfluenceTable& table) {
  out << "i,site,estimator,t,a,phi_uncentered,phi_centered\n";
  for (const auto& e : table.estimators())
    for (int a = 0; a < 2; ++a) {
      if (!table.has(e, a)) continue;
      const auto& s = table.slice(e, a);
      for (std::size_t g = 0; g < s.grid_size; ++g)
        for (std::size_t r = 0; r < s.width(); ++r)
          out << s.rows[r] << ',' << s.row_site[r] << ',' << to_string(e) << ',' << format_double(table.grid()[g]) << ','
              << a << ',' << format_double(s.phi(g, r)) << ',' << format_double(s.phi_centered(g, r)) << '\n';
    }
}

}  // namespace fedsurv
