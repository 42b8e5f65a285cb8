#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "kspu/errors.hpp"
#include "kspu/rng.hpp"

// von Mises-Fisher distributions on S^{d-1}: density, Wood-style rejection
// sampling, a computable KL upper bound (with even-dimension padding) and a
// Monte-Carlo KL estimator.
namespace kspu::vmf {

inline constexpr double kKappaMin = 1e-3;
inline constexpr double kKappaMax = 1e4;

// Mean direction mu on S^{d-1} plus concentration kappa.
struct VmfParams {
    Eigen::VectorXd mu;
    double kappa;

    VmfParams(Eigen::VectorXd mu_in, double kappa_in) : mu(std::move(mu_in)), kappa(kappa_in) {
        if (mu.size() < 2) throw DimensionMismatch("VmfParams: dimension must be >= 2");
        if (!(kappa >= kKappaMin && kappa <= kKappaMax))
            throw OutOfRange("VmfParams: kappa outside [1e-3, 1e4]");
        const double n = mu.norm();
        if (std::abs(n - 1.0) > 1e-8) throw InvalidConfig("VmfParams: mu is not a unit vector");
        mu /= n;
    }

    int dim() const { return static_cast<int>(mu.size()); }
};

// log I_alpha(z) for alpha >= 0, z > 0. The power series (in log-sum-exp
// form) is used up to z = 50; beyond that the exponentially scaled
// asymptotic expansion takes over. The two branches agree within 1e-8 at
// the switch for the dimensions used here.
inline double log_bessel_i(double alpha, double z) {
    if (z <= 0.0) throw OutOfRange("log_bessel_i: z must be positive");
    if (z <= 50.0) {
        const double log_half_z = std::log(0.5 * z);
        std::vector<double> terms;
        double peak = -std::numeric_limits<double>::infinity();
        for (int m = 0; m < 2000; ++m) {
            const double t = (2.0 * m + alpha) * log_half_z - std::lgamma(m + 1.0) -
                             std::lgamma(m + alpha + 1.0);
            terms.push_back(t);
            if (t > peak) peak = t;
            // Past the peak the terms decay super-geometrically.
            if (t < peak - 45.0 && (m + 1.0) * (m + alpha + 1.0) > 0.25 * z * z) break;
        }
        double s = 0.0;
        for (double t : terms) s += std::exp(t - peak);
        return peak + std::log(s);
    }
    // I_alpha(z) ~ e^z/sqrt(2 pi z) * sum_k (-1)^k a_k(alpha)/z^k, truncated
    // at the smallest term.
    const double mu4 = 4.0 * alpha * alpha;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k <= 30; ++k) {
        const double odd = 2.0 * k - 1.0;
        const double next = term * -(mu4 - odd * odd) / (8.0 * k * z);
        if (std::abs(next) >= std::abs(term)) break;  // divergence onset
        sum += next;
        term = next;
        if (std::abs(next) < 1e-18 * std::abs(sum)) break;
    }
    return z - 0.5 * std::log(2.0 * M_PI * z) + std::log(sum);
}

namespace detail {
inline void check_kappa(double kappa) {
    if (!(kappa >= kKappaMin && kappa <= kKappaMax))
        throw OutOfRange("kappa outside [1e-3, 1e4]");
}
}  // namespace detail

// log of the vMF normalizing constant:
// log[ kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa)) ].
inline double log_normalizer(int d, double kappa) {
    if (d < 2) throw DimensionMismatch("log_normalizer: d must be >= 2");
    detail::check_kappa(kappa);
    const double half = 0.5 * d;
    return (half - 1.0) * std::log(kappa) - half * std::log(2.0 * M_PI) -
           log_bessel_i(half - 1.0, kappa);
}

inline double log_density(const VmfParams& params, const Eigen::VectorXd& x) {
    if (x.size() != params.mu.size()) throw DimensionMismatch("log_density: dimension mismatch");
    return log_normalizer(params.dim(), params.kappa) + params.kappa * params.mu.dot(x);
}

// Mean resultant length A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa);
// the expected projection of a sample onto the mean direction.
inline double mean_resultant_length(int d, double kappa) {
    if (d < 2) throw DimensionMismatch("mean_resultant_length: d must be >= 2");
    detail::check_kappa(kappa);
    return std::exp(log_bessel_i(0.5 * d, kappa) - log_bessel_i(0.5 * d - 1.0, kappa));
}

// Axial coordinate w = mu^T x of a vMF sample, drawn by Wood's rejection
// scheme. Bounded at 1000 proposals per draw.
inline double sample_axial(int d, double kappa, Rng& rng) {
    detail::check_kappa(kappa);
    const double pm1 = d - 1.0;
    const double b = pm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + pm1 * pm1));
    const double x0 = (1.0 - b) / (1.0 + b);
    const double c = kappa * x0 + pm1 * std::log(1.0 - x0 * x0);
    for (int it = 0; it < 1000; ++it) {
        const double z = rng.beta(0.5 * pm1, 0.5 * pm1);
        const double w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        const double u = rng.uniform_pos();
        if (kappa * w + pm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) return w;
    }
    throw SamplerStall("sample_axial: rejection cap of 1000 exceeded");
}

// Uniform direction on S^{d-2} (the tangential part of a sample).
inline Eigen::VectorXd sample_unit_tangent(int d, Rng& rng) {
    Eigen::VectorXd v(d - 1);
    for (;;) {
        for (int i = 0; i < d - 1; ++i) v[i] = rng.normal();
        const double n = v.norm();
        if (n > 1e-12) return v / n;
    }
}

// Reflect the north-pole frame onto mu: maps (w, sqrt(1-w^2) * tangent)
// written in the e1 frame to a point whose axial coordinate along mu is w.
inline Eigen::VectorXd householder_to_mu(const Eigen::VectorXd& mu, double w,
                                         const Eigen::VectorXd& tangent) {
    const int d = static_cast<int>(mu.size());
    Eigen::VectorXd z(d);
    z[0] = w;
    const double r = std::sqrt(std::max(0.0, 1.0 - w * w));
    z.tail(d - 1) = r * tangent;
    Eigen::VectorXd u = Eigen::VectorXd::Unit(d, 0) - mu;
    const double un2 = u.squaredNorm();
    if (un2 < 1e-24) return z;  // mu is (numerically) the north pole
    return z - (2.0 * u.dot(z) / un2) * u;
}

// n draws from vMF(mu, kappa). Each result is renormalized, so the unit-norm
// invariant holds to machine precision.
inline std::vector<Eigen::VectorXd> sample(const VmfParams& params, int n, Rng& rng) {
    if (n < 1) throw InvalidConfig("sample: n must be >= 1");
    std::vector<Eigen::VectorXd> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double w = sample_axial(params.dim(), params.kappa, rng);
        const Eigen::VectorXd t = sample_unit_tangent(params.dim(), rng);
        Eigen::VectorXd z = householder_to_mu(params.mu, w, t);
        out.push_back(z / z.norm());
    }
    return out;
}

// Upper bound on KL(q || p) between two vMF distributions. For even d both
// means are embedded with a null coordinate appended and the odd dimension
// d+1 is used. With d* = (d'-1)/2 and dd = d* - 1 the bound reads
//   k0 - k1 mu1.mu0 + d* log k0 + sum_{i=0}^{dd} k0^i/i! - d* log k1
//   + d* dd log dd - dd^2 + 1,
// with the convention 0 log 0 = 0 when dd = 0. The power sum is evaluated in
// log-sum-exp form. Only applied with padding inside this function; sampling
// and densities stay in the native dimension.
inline double kl_upper_bound(const VmfParams& q, const VmfParams& p) {
    if (q.dim() != p.dim()) throw DimensionMismatch("kl_upper_bound: dimension mismatch");
    const int d_work = (q.dim() % 2 == 1) ? q.dim() : q.dim() + 1;
    const double dstar = 0.5 * (d_work - 1);
    const double dd = dstar - 1.0;
    const double t = p.mu.dot(q.mu);  // unchanged by zero padding
    const double k0 = q.kappa, k1 = p.kappa;

    const double log_k0 = std::log(k0);
    double peak = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    for (int i = 0; i <= static_cast<int>(dd); ++i) {
        const double lt = i * log_k0 - std::lgamma(i + 1.0);
        terms.push_back(lt);
        if (lt > peak) peak = lt;
    }
    double s = 0.0;
    for (double lt : terms) s += std::exp(lt - peak);
    const double power_sum = std::exp(peak + std::log(s));

    const double tail = (dd > 0.0) ? dstar * dd * std::log(dd) - dd * dd : 0.0;
    return k0 - k1 * t + dstar * (log_k0 - std::log(k1)) + power_sum + tail + 1.0;
}

struct McEstimate {
    double value;
    double std_error;
};

// Sample estimate of KL(q || p): mean of log q(x) - log p(x) over n draws
// x ~ q, with its standard error.
inline McEstimate kl_monte_carlo_stats(const VmfParams& q, const VmfParams& p, int n, Rng& rng) {
    if (q.dim() != p.dim()) throw DimensionMismatch("kl_monte_carlo: dimension mismatch");
    const double log_cq = log_normalizer(q.dim(), q.kappa);
    const double log_cp = log_normalizer(p.dim(), p.kappa);
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double w = sample_axial(q.dim(), q.kappa, rng);
        const Eigen::VectorXd tang = sample_unit_tangent(q.dim(), rng);
        Eigen::VectorXd x = householder_to_mu(q.mu, w, tang);
        x /= x.norm();
        const double term = (log_cq + q.kappa * q.mu.dot(x)) - (log_cp + p.kappa * p.mu.dot(x));
        const double delta = term - mean;
        mean += delta / (i + 1);
        m2 += delta * (term - mean);
    }
    const double variance = (n > 1) ? m2 / (n - 1) : 0.0;
    return McEstimate{mean, std::sqrt(variance / n)};
}

inline double kl_monte_carlo(const VmfParams& q, const VmfParams& p, int n, Rng& rng) {
    return kl_monte_carlo_stats(q, p, n, rng).value;
}

}  // namespace kspu::vmf
