#pragma once

#include <vector>

#include "semilin/pde.hpp"
#include "semilin/rng.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

// Gamma(u, lambda) law for the randomized horizon tau. u = 1 (exponential) is
// the case used throughout; density/cdf stay general.
struct TimeSamplerSpec {
    double u = 1.0;
    double lambda = 0.5;

    double density(double x) const;   // rho(x)
    double cdf(double x) const;       // F(x)
    double survival(double x) const;  // 1 - F(x), in (0,1]
};

// Antithetic pair (X, X_hat) simulated from (t, x) to min(t + tau, T).
// times has K+1 entries; x_path / x_hat_path are (K+1) x d, w_increments K x d.
// The first increment row is the one entering the Malliavin weight.
struct PathPair {
    std::vector<double> times;
    Tensor x_path;
    Tensor x_hat_path;
    Tensor w_increments;
    double tau = 0.0;
    bool crossed = false;  // tau >= T - t, so the pair ends exactly at T
};

// Euler-Maruyama on a fixed grid: X_{i+1} = X_i + mu(t_i,X_i) dt + sigma(t_i,X_i) dW_i.
// noise is (len(grid)-1) x d of Brownian increments. Returns len(grid) x d.
Tensor euler_path(const PdeProblem& problem, const std::vector<double>& x0, double t0,
                  const std::vector<double>& grid, const Tensor& noise);

// Closed-formula geometric step from time s to time t; only for problems with
// exact geometric dynamics (step_mode == exact_gbm).
std::vector<double> exact_step(const PdeProblem& problem, const std::vector<double>& x,
                               double s, double t, const std::vector<double>& w_increment);

// Inverse-CDF draw; uniform must lie in (0,1).
double sample_tau(const TimeSamplerSpec& sampler, double uniform);

// Number of substeps a pair from (t, x) to min(t + tau, T) takes: 1 for
// exactly simulable dynamics or tau < dt, else the dt grid with a possible
// short final step.
int pair_step_count(const PdeProblem& problem, double t, double T, double dt, double tau);

// Deterministic pair construction from given draws. unit_normals must have at
// least pair_step_count rows (extra rows are ignored) and d columns; row k is
// scaled by the square root of the k-th substep duration. sample_path_pair is
// this plus the draws; the frozen inner-sample banks replay through it.
PathPair pair_from_draws(const PdeProblem& problem, const std::vector<double>& x, double t,
                         double T, double dt, double tau, const Tensor& unit_normals);

// Draws tau and the antithetic pair from (t, x). Constant-coefficient and
// exactly simulable problems use a single step over tau ^ (T - t) with the
// sign of the Brownian term flipped on the antithetic branch; Euler problems
// use dt substeps where only the first increment is flipped and the remaining
// increments are shared. If tau < dt the pair degenerates to a single local
// step. t < T required.
PathPair sample_path_pair(const PdeProblem& problem, const std::vector<double>& x, double t,
                          double T, double dt, const TimeSamplerSpec& sampler, Rng& rng);

// Batch of forward paths on a fixed grid, stored per time index: x[i] and
// dw[i] are (batch x d); x has len(times) entries, dw one fewer. Steps follow
// the problem's declared mode (exact geometric formula, or Euler, which is
// exact for constant coefficients). Draw order: step-major, then row, then
// component, from the caller's stream.
struct PathBatch {
    std::vector<double> times;
    std::vector<Tensor> x;
    std::vector<Tensor> dw;
};
PathBatch sample_grid_paths(const PdeProblem& problem, int batch,
                            const std::vector<double>& times, Rng& rng);

// Gradient weight sigma^{-T} dW_first / (tau ^ (T-t) ^ dt) with diagonal sigma
// evaluated at the pair's starting point. For exactly simulable dynamics the
// caller passes dt = tau. All three denominators must be positive and sigma
// must be invertible.
std::vector<double> malliavin_weight(const std::vector<double>& sigma_diag_at_start,
                                     const std::vector<double>& w_increment_first, double tau,
                                     double T_minus_t, double dt);

}  // namespace semilin
