#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "semilin/tape.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

enum class ProblemId {
    bs_default,
    bs_barenblatt,
    hjb,
    osc_square,
    nonlip,
    cir_osc,
    osc_inverse,
};

ProblemId problem_from_string(const std::string& name);
std::string to_string(ProblemId id);

// How X is propagated between grid times.
enum class StepMode {
    const_coeff,  // constant mu and sigma: exact Gaussian increment
    exact_gbm,    // geometric Brownian motion closed formula
    euler,        // Euler-Maruyama substeps
};

struct BaselineResult {
    double Y0 = 0.0, Y0_se = 0.0;
    std::vector<double> Z0, Z0_se;
    long long n_samples = 0;
    uint64_t seed = 0;
};

// One semilinear test problem: coefficients, driver, terminal condition, and
// whatever reference machinery (closed formula or conditional Monte-Carlo) it
// admits. Instances are immutable; every evaluation is pure.
class PdeProblem {
  public:
    ProblemId id;
    int d = 1;
    double T = 1.0;
    std::vector<double> X0;
    StepMode step_mode = StepMode::const_coeff;
    // Floor Euler states at zero (square-root diffusions): keeps the discrete
    // scheme inside the domain where the continuous process lives.
    bool clamp_state = false;
    std::map<std::string, double> params;
    bool has_exact = false;     // closed-form u, Du
    bool has_baseline = false;  // conditional MC formula (hjb, nonlip)

    double p(const std::string& name) const { return params.at(name); }

    void mu_vec(double t, const double* x, double* out) const;
    // sigma is diagonal for every problem; out receives the d diagonal entries.
    void sigma_diag(double t, const double* x, double* out) const;

    double g(const double* x) const;
    void dg(const double* x, double* out) const;

    double exact_u(double t, const double* x) const;
    void exact_Du(double t, const double* x, double* out) const;

    // Driver in the implementation convention f~(t, x, y, Du), recorded on the
    // tape so solvers can differentiate through it. t is (R,1) or (1,1); x is
    // (R,d); y and du are tape nodes of shape (R,1) and (R,d).
    int f_tilde_node(Tape& tape, const Tensor& t, const Tensor& x, int y, int du) const;
    // Scalar convenience wrapper (single row through a scratch tape).
    double f_tilde(double t, const double* x, double y, const double* du) const;

    // Source term phi(t,x) for the oscillating problems; zero elsewhere.
    double phi(double t, const double* x) const;
};

// Builds one of the seven problems with optional parameter overrides
// (including "T"). Unknown ids or parameter names error.
PdeProblem make_problem(ProblemId id, int d,
                        const std::map<std::string, double>& overrides = {});
PdeProblem make_problem(const std::string& id, int d,
                        const std::map<std::string, double>& overrides = {});

// Monte-Carlo baselines for the two problems with conditional closed formulas,
// evaluated at (t, x) over horizon T-t. Deterministic for fixed seed at any
// thread count (fixed-block log-sum-exp merges).
BaselineResult mc_baseline_at(const PdeProblem& problem, double t, const double* x,
                              long long n_samples, uint64_t seed);
BaselineResult mc_baseline(const PdeProblem& problem, long long n_samples, uint64_t seed);
// JSON-backed cache keyed by (problem, d, params, n_samples, seed).
BaselineResult mc_baseline_cached(const PdeProblem& problem, long long n_samples, uint64_t seed,
                                  const std::string& cache_path);

// Reference u and Du along a trajectory: closed formulas where available,
// otherwise the conditional MC formulas with n_inner realizations per point.
// X_path is (N+1) x d. Returns Y_ref (N+1) and Z_ref (N+1) x d.
struct ReferencePath {
    std::vector<double> Y;
    Tensor Z;
};
ReferencePath reference_trajectory(const PdeProblem& problem, const Tensor& X_path,
                                   const std::vector<double>& times, long long n_inner = 50000,
                                   uint64_t seed = 0);

}  // namespace semilin
