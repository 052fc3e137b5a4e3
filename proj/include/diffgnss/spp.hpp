#ifndef DIFFGNSS_SPP_HPP
#define DIFFGNSS_SPP_HPP

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffgnss/geo.hpp"
#include "diffgnss/observations.hpp"

namespace diffgnss {

struct SppError : std::runtime_error {
    explicit SppError(const std::string& what) : std::runtime_error(what) {}
};
struct InsufficientSatellites : SppError {
    explicit InsufficientSatellites(std::size_t n)
        : SppError("SPP needs >= 4 satellites, got " + std::to_string(n)) {}
};
struct SingularGeometry : SppError {
    SingularGeometry() : SppError("SPP design matrix is numerically singular") {}
};
struct NonConvergence : SppError {
    NonConvergence() : SppError("SPP did not converge within the iteration cap") {}
};

struct ReceiverSolution {
    Vec3 position;
    double clock_bias_m = 0;
    std::vector<double> residuals;  // measured minus modeled, per satellite
    int iterations = 0;
    bool converged = false;
};

struct SppOptions {
    int max_iterations = 20;
    double step_tol_m = 1e-6;
    double condition_limit = 1e12;
    std::optional<Vec3> initial_position;  // defaults to Earth center
};

namespace detail {

// Solve the 4x4 normal equations in place; returns the solution and an
// estimate of the condition number (Frobenius based).
inline std::array<double, 4> solve4(std::array<std::array<double, 4>, 4> a,
                                    std::array<double, 4> b, double* cond_out) {
    // Invert via Gauss-Jordan with partial pivoting so the conditioning
    // estimate comes for free.
    std::array<std::array<double, 4>, 4> inv{};
    for (int i = 0; i < 4; ++i) inv[i][i] = 1.0;
    double norm_a = 0;
    for (const auto& row : a)
        for (double v : row) norm_a += v * v;

    std::array<std::array<double, 4>, 4> m = a;
    for (int col = 0; col < 4; ++col) {
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        if (std::abs(m[piv][col]) < 1e-300) {
            if (cond_out) *cond_out = std::numeric_limits<double>::infinity();
            return {};
        }
        std::swap(m[col], m[piv]);
        std::swap(inv[col], inv[piv]);
        double d = 1.0 / m[col][col];
        for (int c = 0; c < 4; ++c) {
            m[col][c] *= d;
            inv[col][c] *= d;
        }
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            double f = m[r][col];
            if (f == 0) continue;
            for (int c = 0; c < 4; ++c) {
                m[r][c] -= f * m[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    double norm_inv = 0;
    for (const auto& row : inv)
        for (double v : row) norm_inv += v * v;
    if (cond_out) *cond_out = std::sqrt(norm_a) * std::sqrt(norm_inv);

    std::array<double, 4> x{};
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) x[r] += inv[r][c] * b[c];
    return x;
}

}  // namespace detail

// Epoch-wise single point positioning: Gauss-Newton on (x, y, z, clock) with
// unweighted pseudoranges. Inputs are assumed corrected for atmosphere and
// satellite clock, so the model is range + receiver clock.
inline ReceiverSolution solve_spp(const EpochObservation& epoch, const SppOptions& opt = {}) {
    const std::size_t n = epoch.sats.size();
    if (n < 4) throw InsufficientSatellites(n);

    Vec3 pos = opt.initial_position.value_or(Vec3{0, 0, 0});
    double clk = 0;

    ReceiverSolution sol;
    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        std::array<std::array<double, 4>, 4> ata{};
        std::array<double, 4> atb{};
        for (const auto& s : epoch.sats) {
            Vec3 d = s.sat_pos - pos;
            double rho = d.norm();
            double pred = rho + clk;
            double res = s.pr_corr_m - pred;
            std::array<double, 4> h{-d.x / rho, -d.y / rho, -d.z / rho, 1.0};
            for (int r = 0; r < 4; ++r) {
                for (int c = 0; c < 4; ++c) ata[r][c] += h[r] * h[c];
                atb[r] += h[r] * res;
            }
        }
        double cond = 0;
        auto dx = detail::solve4(ata, atb, &cond);
        if (!std::isfinite(cond) || cond > opt.condition_limit) throw SingularGeometry();

        pos.x += dx[0];
        pos.y += dx[1];
        pos.z += dx[2];
        clk += dx[3];
        sol.iterations = iter + 1;
        double step = std::sqrt(dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]);
        if (step < opt.step_tol_m) {
            sol.converged = true;
            break;
        }
    }
    if (!sol.converged) throw NonConvergence();

    sol.position = pos;
    sol.clock_bias_m = clk;
    sol.residuals.reserve(n);
    for (const auto& s : epoch.sats) {
        double rho = (s.sat_pos - pos).norm();
        sol.residuals.push_back(s.pr_corr_m - rho - clk);
    }
    return sol;
}

// Least-squares pseudorange error per satellite: measured minus geometric
// range at the SPP solution, with the estimated receiver clock removed so the
// value reflects geometry-referenced error.
inline std::vector<double> compute_ls_error(const EpochObservation& epoch,
                                            const ReceiverSolution& sol) {
    if (!sol.converged) throw SppError("compute_ls_error requires a converged solution");
    std::vector<double> out;
    out.reserve(epoch.sats.size());
    for (const auto& s : epoch.sats) {
        double rho = (s.sat_pos - sol.position).norm();
        out.push_back(s.pr_corr_m - rho - sol.clock_bias_m);
    }
    return out;
}

// Root-sum-of-squares of an epoch's least-squares errors; the same scalar is
// attached to every satellite of the epoch.
inline double compute_rss(const std::vector<double>& ls_errors) {
    if (ls_errors.empty()) throw SppError("compute_rss needs at least one value");
    double acc = 0;
    for (double e : ls_errors) acc += e * e;
    return std::sqrt(acc);
}

}  // namespace diffgnss

#endif  // DIFFGNSS_SPP_HPP
