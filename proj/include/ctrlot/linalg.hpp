#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "ctrlot/errors.hpp"

namespace ctrlot {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Singular values below this fraction of the largest one count as zero.
inline constexpr double kRankRelTol = 1e-9;

inline int numerical_rank(const Mat& M, double rel_tol = kRankRelTol) {
  if (M.size() == 0) return 0;
  Eigen::JacobiSVD<Mat> svd(M);
  const Vec& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * s(0)) ++r;
  return r;
}

inline double smallest_singular_value(const Mat& M) {
  if (M.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(M);
  const Vec& s = svd.singularValues();
  return s(s.size() - 1);
}

inline Mat symmetrize(const Mat& M) { return 0.5 * (M + M.transpose()); }

inline double min_eigenvalue(const Mat& S) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(S), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline double max_abs_entry(const Mat& M) { return M.size() ? M.cwiseAbs().maxCoeff() : 0.0; }

inline bool is_symmetric(const Mat& M, double tol = 1e-12) {
  if (M.rows() != M.cols()) return false;
  return (M - M.transpose()).cwiseAbs().maxCoeff() <= tol * (1.0 + max_abs_entry(M));
}

inline bool is_psd(const Mat& M, double tol = 1e-10) {
  if (!is_symmetric(M)) return false;
  if (M.size() == 0) return true;
  return min_eigenvalue(M) >= -tol * (1.0 + max_abs_entry(M));
}

inline bool is_pd(const Mat& M) {
  if (!is_symmetric(M) || M.size() == 0) return false;
  return min_eigenvalue(M) > 0.0;
}

inline double condition_number(const Mat& M) {
  Eigen::JacobiSVD<Mat> svd(M);
  const Vec& s = svd.singularValues();
  if (s(s.size() - 1) == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(s.size() - 1);
}

/// Gauss–Legendre nodes and weights on [a, b] (Golub–Welsch).
struct Quadrature {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline Quadrature gauss_legendre(int n, double a = -1.0, double b = 1.0) {
  if (n < 1) throw InvalidArgument("gauss_legendre: need at least one node");
  Mat J = Mat::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double beta = k / std::sqrt(4.0 * k * k - 1.0);
    J(k, k - 1) = beta;
    J(k - 1, k) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  Quadrature q;
  q.nodes.resize(n);
  q.weights.resize(n);
  const double half = 0.5 * (b - a);
  for (int k = 0; k < n; ++k) {
    q.nodes[k] = a + half * (es.eigenvalues()(k) + 1.0);
    const double v0 = es.eigenvectors()(0, k);
    q.weights[k] = 2.0 * v0 * v0 * half;
  }
  return q;
}

/// 64-bit FNV-1a, stable across platforms; used for config hashes and seeds.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t buf[3] = {base, a, b};
  return fnv1a(buf, sizeof(buf));
}

}  // namespace ctrlot
