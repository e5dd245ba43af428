#pragma once

// Discrete Kantorovich problem: transportation simplex and log-domain Sinkhorn.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/measures.hpp"

namespace ctrlot {

struct TransportPlan {
  Mat coupling;
  double value = 0.0;

  double row_error(const Vec& a) const { return (coupling.rowwise().sum() - a).cwiseAbs().maxCoeff(); }
  double col_error(const Vec& b) const {
    return (coupling.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
  }
  double marginal_error(const Vec& a, const Vec& b) const { return std::max(row_error(a), col_error(b)); }
};

/// Feasible when phi_i - psi_j <= C_ij; dual objective sum a phi - sum b psi.
struct DualPotentials {
  Vec phi;
  Vec psi;

  double objective(const Vec& a, const Vec& b) const { return a.dot(phi) - b.dot(psi); }
  double max_violation(const Mat& C) const {
    double v = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < C.rows(); ++i)
      for (Eigen::Index j = 0; j < C.cols(); ++j) v = std::max(v, phi(i) - psi(j) - C(i, j));
    return v;
  }
  bool feasible(const Mat& C, double tol = 1e-8) const { return max_violation(C) <= tol; }
};

inline double plan_value(const Mat& C, const Mat& coupling) { return (C.array() * coupling.array()).sum(); }

namespace detail {

inline void check_instance(const Mat& C, const Vec& a, const Vec& b, double tol) {
  if (C.rows() != a.size() || C.cols() != b.size())
    throw InvalidArgument("kantorovich: cost matrix is " + std::to_string(C.rows()) + "x" +
                          std::to_string(C.cols()) + " but marginals have sizes " +
                          std::to_string(a.size()) + ", " + std::to_string(b.size()));
  if (a.size() == 0 || b.size() == 0) throw InvalidMeasure("kantorovich: empty marginal");
  if ((a.array() < 0.0).any() || (b.array() < 0.0).any()) throw InvalidMeasure("kantorovich: negative weight");
  if (std::abs(a.sum() - 1.0) > tol || std::abs(b.sum() - 1.0) > tol)
    throw InvalidMeasure("kantorovich: marginals must both sum to 1");
  if (!C.allFinite()) throw InfeasibleCost("kantorovich: cost matrix has non-finite entries");
}

}  // namespace detail

struct ExactResult {
  TransportPlan plan;
  DualPotentials duals;
  int pivots = 0;
  double duality_gap = 0.0;
};

/// Transportation simplex on the bipartite network from a northwest-corner basis.
/// Bland's rule: the entering arc is the first row-major cell with negative reduced
/// cost, the leaving arc the lowest-indexed blocking cell.
inline ExactResult solve_exact(const Mat& C, const Vec& a_in, const Vec& b_in, int max_pivots = 10000000) {
  detail::check_instance(C, a_in, b_in, 1e-9);
  const int m = static_cast<int>(C.rows()), n = static_cast<int>(C.cols());
  const Vec a = a_in;
  Vec b = b_in * (a.sum() / b_in.sum());
  const double scale = 1.0 + C.cwiseAbs().maxCoeff();
  const double rtol = 1e-12 * scale;

  // basis: cell index i*n + j
  std::vector<int> basis;
  std::vector<double> flow(static_cast<std::size_t>(m) * n, 0.0);
  std::vector<char> in_basis(static_cast<std::size_t>(m) * n, 0);
  {
    Vec ra = a, rb = b;
    int i = 0, j = 0;
    while (i < m && j < n) {
      const double x = std::max(0.0, std::min(ra(i), rb(j)));
      const int cell = i * n + j;
      basis.push_back(cell);
      in_basis[cell] = 1;
      flow[cell] = x;
      ra(i) -= x;
      rb(j) -= x;
      if (i == m - 1) ++j;
      else if (j == n - 1) ++i;
      else if (ra(i) <= rb(j)) ++i;
      else ++j;
    }
  }

  // tree adjacency over nodes 0..m-1 (rows), m..m+n-1 (columns)
  std::vector<std::vector<int>> adj(m + n);
  auto rebuild = [&] {
    for (auto& v : adj) v.clear();
    for (int cell : basis) {
      const int i = cell / n, j = cell % n;
      adj[i].push_back(cell);
      adj[m + j].push_back(cell);
    }
  };
  std::vector<double> pot(m + n);
  std::vector<int> parent_cell(m + n), order;
  auto potentials = [&] {
    std::fill(parent_cell.begin(), parent_cell.end(), -2);
    order.clear();
    parent_cell[0] = -1;
    pot[0] = 0.0;
    order.push_back(0);
    for (std::size_t q = 0; q < order.size(); ++q) {
      const int v = order[q];
      for (int cell : adj[v]) {
        const int i = cell / n, j = cell % n;
        const int w = v < m ? m + j : i;
        if (parent_cell[w] != -2) continue;
        parent_cell[w] = cell;
        pot[w] = C(i, j) - pot[v];
        order.push_back(w);
      }
    }
  };

  ExactResult res;
  rebuild();
  int pivots = 0;
  std::vector<int> depth(m + n);
  for (; pivots < max_pivots; ++pivots) {
    potentials();
    int enter = -1;
    for (int i = 0; i < m && enter < 0; ++i)
      for (int j = 0; j < n; ++j) {
        const int cell = i * n + j;
        if (!in_basis[cell] && C(i, j) - pot[i] - pot[m + j] < -rtol) {
          enter = cell;
          break;
        }
      }
    if (enter < 0) break;

    // cycle: tree path from row ei to column ej, closed by the entering cell
    const int ei = enter / n, ej = enter % n;
    depth[0] = 0;
    for (std::size_t q = 1; q < order.size(); ++q) {
      const int v = order[q];
      const int cell = parent_cell[v];
      const int i = cell / n, j = cell % n;
      const int par = v < m ? m + j : i;
      depth[v] = depth[par] + 1;
    }
    auto up = [&](int v) {
      const int cell = parent_cell[v];
      const int i = cell / n, j = cell % n;
      return v < m ? m + j : i;
    };
    std::vector<int> path_a, path_b;  // cells from row side / column side up to the meeting node
    int va = ei, vb = m + ej;
    while (depth[va] > depth[vb]) {
      path_a.push_back(parent_cell[va]);
      va = up(va);
    }
    while (depth[vb] > depth[va]) {
      path_b.push_back(parent_cell[vb]);
      vb = up(vb);
    }
    while (va != vb) {
      path_a.push_back(parent_cell[va]);
      va = up(va);
      path_b.push_back(parent_cell[vb]);
      vb = up(vb);
    }
    // cycle order: enter (+), then from column ej back along path_b toward the
    // meeting node, then down path_a to row ei
    std::vector<int> cycle{enter};
    for (int cell : path_b) cycle.push_back(cell);
    for (auto it = path_a.rbegin(); it != path_a.rend(); ++it) cycle.push_back(*it);
    int leave = -1;
    double theta = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < cycle.size(); k += 2) {
      const int cell = cycle[k];
      if (flow[cell] < theta - 1e-15) {
        theta = flow[cell];
        leave = cell;
      } else if (flow[cell] <= theta + 1e-15 && cell < leave) {
        leave = cell;
      }
    }
    theta = flow[leave];
    for (std::size_t k = 0; k < cycle.size(); ++k) flow[cycle[k]] += (k % 2 == 0 ? theta : -theta);
    flow[leave] = 0.0;
    in_basis[leave] = 0;
    in_basis[enter] = 1;
    *std::find(basis.begin(), basis.end(), leave) = enter;
    rebuild();
  }
  if (pivots >= max_pivots) throw Error("solve_exact: pivot limit reached");
  potentials();

  res.pivots = pivots;
  res.plan.coupling = Mat::Zero(m, n);
  for (int cell : basis) res.plan.coupling(cell / n, cell % n) = std::max(0.0, flow[cell]);
  res.plan.value = plan_value(C, res.plan.coupling);
  res.duals.phi.resize(m);
  res.duals.psi.resize(n);
  for (int i = 0; i < m; ++i) res.duals.phi(i) = pot[i];
  for (int j = 0; j < n; ++j) res.duals.psi(j) = -pot[m + j];
  res.duality_gap = std::abs(res.plan.value - res.duals.objective(a_in, b_in));
  return res;
}

inline ExactResult solve_exact(const Mat& C, const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  return solve_exact(C, mu.weights, nu.weights);
}

struct EntropicResult {
  TransportPlan plan;
  DualPotentials duals;
  int iterations = 0;
  double marginal_error = 0.0;
  bool converged = false;
  std::vector<std::string> warnings;
};

/// Log-domain Sinkhorn for plan_ij = exp((f_i + g_j - C_ij) / eps). The returned
/// value is sum C * plan; duals are phi = f with psi its c-transform, so they are feasible.
inline EntropicResult solve_entropic(const Mat& C, const Vec& a, const Vec& b, double eps,
                                     int max_iters = 100000, double tol = 1e-9) {
  detail::check_instance(C, a, b, 1e-9);
  if (!(eps > 0.0)) throw InvalidArgument("solve_entropic: eps must be positive");
  const Eigen::Index m = C.rows(), n = C.cols();
  Vec f = Vec::Zero(m), g = Vec::Zero(n);
  const Vec la = a.array().log(), lb = b.array().log();
  auto lse = [](const Vec& v) {
    const double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
  };
  EntropicResult res;
  Vec tmp_n(n), tmp_m(m);
  int it = 0;
  double err = std::numeric_limits<double>::infinity();
  for (; it < max_iters; ++it) {
    for (Eigen::Index i = 0; i < m; ++i) {
      if (a(i) == 0.0) {
        f(i) = -std::numeric_limits<double>::infinity();
        continue;
      }
      for (Eigen::Index j = 0; j < n; ++j) tmp_n(j) = (g(j) - C(i, j)) / eps;
      f(i) = eps * (la(i) - lse(tmp_n));
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      if (b(j) == 0.0) {
        g(j) = -std::numeric_limits<double>::infinity();
        continue;
      }
      for (Eigen::Index i = 0; i < m; ++i) tmp_m(i) = (f(i) - C(i, j)) / eps;
      g(j) = eps * (lb(j) - lse(tmp_m));
    }
    // columns are exact after the g update; measure the row marginal
    err = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      double s = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) s += std::exp((f(i) + g(j) - C(i, j)) / eps);
      err += std::abs(s - a(i));
    }
    if (err <= tol) {
      ++it;
      break;
    }
  }
  res.iterations = it;
  res.marginal_error = err;
  res.converged = err <= tol;
  if (!res.converged)
    res.warnings.push_back("sinkhorn: iteration cap reached with marginal error " + std::to_string(err));
  res.plan.coupling.resize(m, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) res.plan.coupling(i, j) = std::exp((f(i) + g(j) - C(i, j)) / eps);
  res.plan.value = plan_value(C, res.plan.coupling);
  res.duals.phi = f;
  for (Eigen::Index i = 0; i < m; ++i)
    if (!std::isfinite(res.duals.phi(i))) res.duals.phi(i) = 0.0;
  res.duals.psi.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double v = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < m; ++i) v = std::max(v, res.duals.phi(i) - C(i, j));
    res.duals.psi(j) = v;
  }
  return res;
}

inline EntropicResult solve_entropic(const Mat& C, const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                                     double eps, int max_iters = 100000, double tol = 1e-9) {
  return solve_entropic(C, mu.weights, nu.weights, eps, max_iters, tol);
}

inline TransportPlan product_coupling(const Vec& a, const Vec& b, const Mat& C) {
  detail::check_instance(C, a, b, 1e-9);
  TransportPlan p;
  p.coupling = a * b.transpose();
  p.value = plan_value(C, p.coupling);
  return p;
}

inline TransportPlan product_coupling(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const Mat& C) {
  return product_coupling(mu.weights, nu.weights, C);
}

}  // namespace ctrlot
