#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "semilin/dbsde.hpp"
#include "semilin/networks.hpp"
#include "semilin/optim.hpp"
#include "semilin/pde.hpp"
#include "semilin/rng.hpp"
#include "semilin/sde.hpp"
#include "semilin/tape.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

// Randomized Feynman-Kac payoff: for s <= t,
//   phi(s,t,x,y,z) = 1_{t>=T} g(x) / survival(T-s) + 1_{t<T} f~(t,x,y,z) / rho(t-s).
// The driver branch needs rho(t-s) > 0; with the exponential law (u=1) the
// density at zero delay is lambda, other shapes are rejected there.
double phi_value(const PdeProblem& problem, const TimeSamplerSpec& sampler, double s, double t,
                 const double* x, double y, const double* z);

// Frozen randomness of the discretized operator: n_inner draws of (tau, unit
// normals), sampled once and immutable. Sample i regenerates from
// Rng(seed, inner_bank, stream=i) (one u01 for tau, then normals), so the
// contents depend only on (seed, n_inner) and each sample's normal sequence
// covers the longest horizon min(tau, T) it can ever be replayed over.
// Samples are kept sorted by tau: for an outer time t the samples whose paths
// stay interior (tau < T - t) form a prefix.
class InnerSampleBank {
  public:
    InnerSampleBank(const PdeProblem& problem, const TimeSamplerSpec& sampler, int n_inner,
                    double dt, uint64_t seed);

    int size() const { return static_cast<int>(taus_.size()); }
    double dt() const { return dt_; }
    uint64_t seed() const { return seed_; }
    const TimeSamplerSpec& sampler() const { return sampler_; }
    double tau(int i) const { return taus_.at(i); }
    const std::vector<double>& taus() const { return taus_; }    // ascending
    const Tensor& normals(int i) const { return normals_.at(i); }  // (K_i, d)
    int stream_id(int i) const { return stream_ids_.at(i); }       // pre-sort index
    // Number of samples with tau < horizon.
    int interior_count(double horizon) const;

  private:
    TimeSamplerSpec sampler_;
    double dt_;
    uint64_t seed_;
    std::vector<double> taus_;
    std::vector<int> stream_ids_;
    std::vector<Tensor> normals_;
};

// Loss support point: a uniform time zeta in (0, T) and the state X_zeta
// simulated from X0 with the problem's step mode (dt substeps when Euler).
struct OuterPoint {
    double zeta = 0.0;
    std::vector<double> x;
};
std::vector<OuterPoint> sample_outer_points(const PdeProblem& problem, int n, double dt,
                                            Rng& rng);

// One (u_bar, v_bar) estimate. u_bar_single averages the X branch alone (no
// antithetic pairing); u_bar_se is the standard error of the per-sample
// antithetic terms. n_interior counts the samples that feed the driver branch.
struct PointEstimate {
    double u_bar = 0.0;
    std::vector<double> v_bar;
    double u_bar_single = 0.0;
    double u_bar_se = 0.0;
    long long n_interior = 0;
};

// Batched (u, v) evaluation at raw times/states: fill u (one entry per row)
// and v (rows x d). Lets tests drive the estimators with closed-form
// solutions instead of networks.
using UvBatchFn =
    std::function<void(const std::vector<double>& t, const Tensor& x, std::vector<double>& u,
                       Tensor& v)>;

// Discretized operator T at one point (t, x) over the bank, with (u, v)
// supplied by the functor. Interior samples are evaluated in chunks of
// `chunk` pairs so the accumulation order is fixed.
PointEstimate tbar_with(const PdeProblem& problem, const InnerSampleBank& bank, double t,
                        const std::vector<double>& x, const UvBatchFn& uv, bool with_v,
                        int chunk = 8192);

// First scheme (archs A and B): the network supplies both u and v.
PointEstimate tbar_first_scheme(const PdeProblem& problem, NetworkParams& params,
                                const InputScaler& scaler, double t,
                                const std::vector<double>& x, const InnerSampleBank& bank,
                                int chunk = 8192);
// Second scheme (arch C): v is the input gradient of u. with_v false skips
// the Malliavin part and leaves v_bar empty.
PointEstimate tbar_second_scheme(const PdeProblem& problem, NetworkParams& params,
                                 const InputScaler& scaler, double t,
                                 const std::vector<double>& x, const InnerSampleBank& bank,
                                 bool with_v, int chunk = 8192);

// mean over outer points of (u_bar - u)^2 + sum_j (v_bar_j - v_j)^2, archs
// A/B. Terminal samples contribute data-only constants; interior phi rows go
// through one stacked network evaluation and per-point segment sums.
int loss_first_scheme_node(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                           const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                           const InnerSampleBank& bank);
// Arch C: v slots filled by the differentiated network. u_only drops the
// v_bar matching term (the C-bis loss); v_bar is then not assembled at all.
int loss_second_scheme_node(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                            const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                            const InnerSampleBank& bank, bool u_only);

// Loss value at fixed parameters, dispatched on the arch, evaluated in slabs
// of outer_chunk outer points (fixed slab layout keeps repeat evaluations
// bit-identical).
double fixedpoint_loss(const PdeProblem& problem, NetworkParams& params,
                       const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                       const InnerSampleBank& bank, bool u_only, int outer_chunk = 100);

struct FixedPointConfig {
    double lambda = 0.5;  // exponential tau rate (u = 1)
    int n_inner = 10000;
    int n_steps = 100;  // Euler substep grid: dt = T / n_steps
    int batch_size = 300;
    int iterations = 16000;
    int test_every = 100;
    int test_size = 1000;
    int scaler_paths = 10000;
    double eta0 = 1e-2;
    double lr_threshold = 0.05;
    int lr_evals_per_period = 10;
    bool u_only_loss = false;  // C-bis: arch C scored on u alone
    uint64_t seed = 0;
    int outer_chunk = 100;  // outer points per tape slab
    int eval_chunk = 8192;  // interior pairs per evaluation slab
};

struct FixedPointResult {
    NetworkParams params;  // lowest-test-loss snapshot
    InputScaler scaler;
    FixedPointConfig config;  // bank and test set regenerate from this
    double best_test_loss = 0.0;
    int best_iteration = -1;
    std::vector<TrainRecord> history;
};

// Standard training procedure on the fixed-point loss: frozen inner bank,
// fresh outer batch per iteration, frozen outer test set, Adam with the
// halving eta schedule, best-test-loss snapshot. Same history and error
// conventions as train_dbsde.
FixedPointResult train_fixed_point(const PdeProblem& problem, const NetworkSpec& spec,
                                   const FixedPointConfig& cfg);

// Post-processing: the tbar estimator with n_eval fresh samples drawn from
// Rng(seed, inner_bank, stream=i). With the training bank's seed and
// n_eval = n_inner this reproduces tbar_* on the bank exactly.
PointEstimate postprocess_eval(const PdeProblem& problem, NetworkParams& params,
                               const InputScaler& scaler, const TimeSamplerSpec& sampler,
                               double t, const std::vector<double>& x, long long n_eval,
                               double dt, uint64_t seed, bool with_v = true, int chunk = 8192);

struct FpEvalConfig {
    long long n_eval_point = 1000000;  // u_bar, v_bar at (0, X0)
    long long n_eval_traj = 100000;    // per grid point along trajectories
    int traj_count = 10;
    int n_steps = 100;                  // trajectory grid for the integral errors
    long long reference_inner = 50000;  // MC realizations per reference point
    uint64_t eval_seed = 1;             // base seed of the fresh evaluation draws
};

// Trajectory errors from postprocessed (u_bar, v_bar) along traj_count
// simulated paths, pointwise errors from the n_eval_point estimate at (0, X0),
// final test loss on the regenerated bank and test outer set.
ErrorReport evaluate_fixed_point(const PdeProblem& problem, const FixedPointResult& result,
                                 const FpEvalConfig& eval_cfg,
                                 const BaselineResult* baseline = nullptr);

}  // namespace semilin
