#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "kspu/errors.hpp"

// Kendall pre-shape geometry for planar (m = 2) landmark configurations:
// centering/scaling projection onto the pre-shape sphere, the Helmert
// sub-matrix, the identification psi with the unit hypersphere, orientation
// standardization and the Procrustes shape distance.
namespace kspu::shape {

using Matrix2X = Eigen::Matrix<double, 2, Eigen::Dynamic>;

// k landmarks in the plane; column j holds landmark j.
struct LandmarkConfig {
    Matrix2X points;
};

// Centered, unit-Frobenius-norm configuration. Row sums vanish within 1e-12
// and the Frobenius norm is 1 within 1e-12.
struct PreShape {
    Matrix2X points;

    int landmark_count() const { return static_cast<int>(points.cols()); }
};

// Unit vector of length (k-1)*m, the image of a pre-shape under psi.
struct SphericalPoint {
    Eigen::VectorXd coords;
};

// Element of SO(2), stored as an angle in (-pi, pi].
struct Rotation2 {
    double angle = 0.0;

    static Rotation2 from_angle(double a) {
        double w = std::remainder(a, 2.0 * M_PI);  // (-pi, pi] up to the -pi edge
        if (w <= -M_PI) w = M_PI;
        return Rotation2{w};
    }

    Eigen::Matrix2d matrix() const {
        const double c = std::cos(angle), s = std::sin(angle);
        Eigen::Matrix2d r;
        r << c, -s, s, c;
        return r;
    }

    Rotation2 inverse() const { return from_angle(-angle); }
};

// compose(a, b): rotation whose matrix is a.matrix() * b.matrix().
inline Rotation2 compose(const Rotation2& a, const Rotation2& b) {
    return Rotation2::from_angle(a.angle + b.angle);
}

// Center at the origin and scale to unit Frobenius norm.
inline PreShape project_to_preshape(const LandmarkConfig& config) {
    if (config.points.cols() < 3) throw DimensionMismatch("project_to_preshape: need k >= 3 landmarks");
    if (!config.points.allFinite()) throw InvalidConfig("project_to_preshape: non-finite landmark");
    Matrix2X centered = config.points.colwise() - config.points.rowwise().mean();
    const double norm = centered.norm();
    if (norm < 1e-9) throw DegenerateConfiguration("project_to_preshape: configuration collapses to a point");
    return PreShape{centered / norm};
}

// (k-1) x k Helmert sub-matrix: orthonormal rows, each summing to zero.
// Row j (1-indexed) is (1/sqrt(j(j+1)), ... j copies ..., -j/sqrt(j(j+1)), 0, ...).
inline Eigen::MatrixXd helmert_submatrix(int k) {
    if (k < 2) throw DimensionMismatch("helmert_submatrix: need k >= 2");
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(k - 1, k);
    for (int j = 1; j < k; ++j) {
        const double denom = 1.0 / std::sqrt(static_cast<double>(j) * (j + 1));
        for (int i = 0; i < j; ++i) h(j - 1, i) = denom;
        h(j - 1, j) = -static_cast<double>(j) * denom;
    }
    return h;
}

// psi(X) = vec(X H^T) / ||X H^T||, mapping the pre-shape sphere to
// S^{(k-1)m - 1}. vec stacks X H^T column-by-column. For an exact pre-shape
// the norm is already 1, so the division only absorbs rounding.
inline SphericalPoint psi(const PreShape& x) {
    const int k = x.landmark_count();
    const Eigen::MatrixXd h = helmert_submatrix(k);
    Eigen::MatrixXd y = x.points * h.transpose();  // 2 x (k-1)
    Eigen::VectorXd v = Eigen::Map<Eigen::VectorXd>(y.data(), y.size());
    return SphericalPoint{v / v.norm()};
}

// Inverse of psi on the centered subspace: un-vectorize to m x (k-1) and
// right-multiply by H.
inline PreShape psi_inverse(const SphericalPoint& p, int k, int m = 2) {
    if (m != 2) throw DimensionMismatch("psi_inverse: only m = 2 is supported");
    if (p.coords.size() != static_cast<Eigen::Index>((k - 1) * m))
        throw DimensionMismatch("psi_inverse: coordinate length does not equal (k-1)*m");
    Eigen::MatrixXd y = Eigen::Map<const Eigen::MatrixXd>(p.coords.data(), m, k - 1);
    const Eigen::MatrixXd h = helmert_submatrix(k);
    return PreShape{y * h};
}

// Apply a rotation to the coordinate rows: g . M.
inline PreShape rotate(const PreShape& m, const Rotation2& g) {
    return PreShape{g.matrix() * m.points};
}

// M0 = R^{-1} M; removes the predicted orientation so the result represents
// the underlying shape in a fixed frame.
inline PreShape standardize_orientation(const PreShape& m, const Rotation2& r) {
    return PreShape{r.matrix().transpose() * m.points};
}

// Procrustes distance on the pre-shape sphere: arccos of the optimal
// alignment score over SO(2). In the plane the optimum is closed-form.
inline double procrustes_distance(const PreShape& a, const PreShape& b) {
    if (a.points.cols() != b.points.cols())
        throw DimensionMismatch("procrustes_distance: landmark counts differ");
    const double s1 = a.points.cwiseProduct(b.points).sum();
    // Inner product of b against a rotated by +90 degrees.
    Eigen::Matrix2d j;
    j << 0, -1, 1, 0;
    const double s2 = (j * a.points).cwiseProduct(b.points).sum();
    const double score = std::min(1.0, std::max(-1.0, std::hypot(s1, s2)));
    return std::acos(score);
}

}  // namespace kspu::shape
