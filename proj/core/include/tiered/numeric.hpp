#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tiered {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const;
  bool operator==(const Rational&) const = default;
};

// Nearest fraction p/q with q <= max_den lying within tol of x; smallest q wins.
std::optional<Rational> snap_rational(double x, int max_den = 64, double tol = 1e-9);

// Rational text when snapping succeeds, otherwise a short decimal.
std::string format_number(double x, int max_den = 64, double tol = 1e-9);

double max_abs(const Mat& m);

// Pseudo-inverse of a symmetric matrix through its eigendecomposition; eigenvalues
// below rel_tol times the largest magnitude are treated as zero.
Mat sym_pinv(const Mat& a, double rel_tol = 1e-9);

// Number of singular values above thr.
int singular_value_rank(const Mat& a, double thr = 1e-7);

// Orthonormal basis of the range of a symmetric matrix (eigenvalues above thr).
Mat orthonormal_range(const Mat& p, double thr = 0.5);

// Orthonormal basis (n x rank) for the range of a projector, by pivoted QR.
Mat projector_basis(const Mat& p, int rank);

// Orthonormal basis for the complement of the span of the orthonormal columns of k in R^dim.
Mat orthogonal_complement(const Mat& k, int dim);

// Largest principal angle (radians) between the column spaces of two orthonormal bases.
double max_principal_angle(const Mat& a, const Mat& b);

// Helpers for 0/1 design matrices X stored as an assignment vector (row u has its 1 in
// column assign[u]).
Mat design_matrix(const std::vector<int>& assign, int m);
Mat right_aggregate(const Mat& u, const std::vector<int>& assign, int m);  // U X
Mat sandwich(const Mat& u, const std::vector<int>& assign, int m);         // X' U X
Mat expand(const Mat& b, const std::vector<int>& assign);                  // X B X'
Mat expand_rows(const Mat& e, const std::vector<int>& assign);             // X E
Mat aggregate_rows(const Mat& v, const std::vector<int>& assign, int m);   // X' V
std::vector<int> compose(const std::vector<int>& first, const std::vector<int>& second);

}  // namespace tiered
