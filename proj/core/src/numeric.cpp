#include "tiered/numeric.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tiered {

std::string Rational::str() const {
  if (den == 1) return std::to_string(num);
  return fmt::format("{}/{}", num, den);
}

std::optional<Rational> snap_rational(double x, int max_den, double tol) {
  if (!std::isfinite(x)) return std::nullopt;
  for (int q = 1; q <= max_den; ++q) {
    const double p = std::round(x * q);
    if (std::abs(x - p / q) <= tol) {
      auto num = static_cast<std::int64_t>(p);
      std::int64_t g = std::gcd(num < 0 ? -num : num, static_cast<std::int64_t>(q));
      if (g == 0) g = 1;
      return Rational{num / g, q / g};
    }
  }
  return std::nullopt;
}

std::string format_number(double x, int max_den, double tol) {
  if (auto r = snap_rational(x, max_den, tol)) return r->str();
  return fmt::format("{:.6g}", x);
}

double max_abs(const Mat& m) {
  if (m.size() == 0) return 0.0;
  return m.cwiseAbs().maxCoeff();
}

Mat sym_pinv(const Mat& a, double rel_tol) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  const Vec& ev = es.eigenvalues();
  const double big = ev.cwiseAbs().maxCoeff();
  Vec inv = Vec::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (big > 0 && std::abs(ev(i)) > rel_tol * big) inv(i) = 1.0 / ev(i);
  }
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

int singular_value_rank(const Mat& a, double thr) {
  Eigen::JacobiSVD<Mat> svd(a);
  const Vec& s = svd.singularValues();
  int r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > thr) ++r;
  return r;
}

Mat orthonormal_range(const Mat& p, double thr) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (p + p.transpose()));
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    if (es.eigenvalues()(i) > thr) keep.push_back(i);
  Mat out(p.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = es.eigenvectors().col(keep[j]);
  return out;
}

Mat projector_basis(const Mat& p, int rank) {
  if (rank <= 0) return Mat::Zero(p.rows(), 0);
  Eigen::ColPivHouseholderQR<Mat> qr(p);
  return qr.householderQ() * Mat::Identity(p.rows(), rank);
}

Mat orthogonal_complement(const Mat& k, int dim) {
  if (k.cols() == 0) return Mat::Identity(dim, dim);
  Eigen::HouseholderQR<Mat> qr(k);
  const Mat q = qr.householderQ() * Mat::Identity(dim, dim);
  return q.rightCols(dim - k.cols());
}

double max_principal_angle(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) return M_PI / 2;
  if (a.cols() == 0) return 0.0;
  // Sine from the residual of b off a, cosine from a'b; atan2 stays accurate for small angles.
  const Mat ab = a.transpose() * b;
  const double cosine = Eigen::JacobiSVD<Mat>(ab).singularValues().minCoeff();
  const double sine = Eigen::JacobiSVD<Mat>(b - a * ab).singularValues().maxCoeff();
  return std::atan2(sine, cosine);
}

Mat design_matrix(const std::vector<int>& assign, int m) {
  Mat x = Mat::Zero(static_cast<Eigen::Index>(assign.size()), m);
  for (std::size_t u = 0; u < assign.size(); ++u) x(static_cast<Eigen::Index>(u), assign[u]) = 1.0;
  return x;
}

Mat right_aggregate(const Mat& u, const std::vector<int>& assign, int m) {
  Mat out = Mat::Zero(u.rows(), m);
  for (std::size_t c = 0; c < assign.size(); ++c) out.col(assign[c]) += u.col(static_cast<Eigen::Index>(c));
  return out;
}

Mat sandwich(const Mat& u, const std::vector<int>& assign, int m) {
  const Mat ux = right_aggregate(u, assign, m);
  Mat out = Mat::Zero(m, m);
  for (std::size_t r = 0; r < assign.size(); ++r) out.row(assign[r]) += ux.row(static_cast<Eigen::Index>(r));
  return out;
}

Mat expand(const Mat& b, const std::vector<int>& assign) {
  const auto n = static_cast<Eigen::Index>(assign.size());
  Mat out(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) out(i, j) = b(assign[i], assign[j]);
  return out;
}

Mat expand_rows(const Mat& e, const std::vector<int>& assign) {
  Mat out(static_cast<Eigen::Index>(assign.size()), e.cols());
  for (std::size_t u = 0; u < assign.size(); ++u) out.row(static_cast<Eigen::Index>(u)) = e.row(assign[u]);
  return out;
}

Mat aggregate_rows(const Mat& v, const std::vector<int>& assign, int m) {
  Mat out = Mat::Zero(m, v.cols());
  for (std::size_t u = 0; u < assign.size(); ++u) out.row(assign[u]) += v.row(static_cast<Eigen::Index>(u));
  return out;
}

std::vector<int> compose(const std::vector<int>& first, const std::vector<int>& second) {
  std::vector<int> out(first.size());
  for (std::size_t i = 0; i < first.size(); ++i) out[i] = second[first[i]];
  return out;
}

}  // namespace tiered
