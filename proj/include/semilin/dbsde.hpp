#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "semilin/networks.hpp"
#include "semilin/optim.hpp"
#include "semilin/pde.hpp"
#include "semilin/sde.hpp"
#include "semilin/tape.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

// t_i = T i / N, so the last entry is exactly T.
std::vector<double> uniform_times(double T, int n_steps);

// One Euler rollout of Y recorded on a tape. y_nodes[i] is (R,1) at times[i],
// kappa_nodes[i] is (R,d). kappa_nodes[N] does not enter the recursion; it is
// kept for trajectory evaluation (shared nets evaluate at t_N, per-step nets
// repeat the node of step N-1). The caller owns the PathBatch.
struct RolloutBatch {
    std::vector<double> times;
    std::vector<int> y_nodes;
    std::vector<int> kappa_nodes;
};

// kappa provider for a step: (tape, step index i in 0..N, y node at t_i) ->
// (R,d) node. rollout_core keeps the recursion in one place; tests drive it
// with closed-form kappas, training with forward_kappa.
using KappaFn = std::function<int(Tape&, int, int)>;

// Hard-constraint scheme: Y_{i+1} = Y_i - f~(t_i,X_i,Y_i,kappa_i) dt
// + kappa_i . sigma(t_i,X_i) dW_i. y0_node is (1,1) (broadcast) or (R,1).
RolloutBatch rollout_core(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                          int y0_node, const KappaFn& kappa);

// Rollout with kappas produced by the bound network: trainable kappa0 and the
// per-step subnets for archs a-c, the shared net (including kappa at t_0) for
// the merged and recurrent archs. Inputs are scaled per the standard
// procedure; the Y fed back into merged/recurrent nets is the live rollout
// value, so gradients flow through time.
RolloutBatch rollout_network(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                             const InputScaler& scaler, const PathBatch& paths);

// mean over rows of (Y_T - g(X_T))^2.
int terminal_loss(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                  const RolloutBatch& ro);

// Soft-constraint objective: mean over rows of
//   sum_i (Y_{i+1} - Y_i + f~_i dt - z_i . sigma dW_i)^2 + (g(X_T) - Y_N)^2
// with caller-supplied y (N+1 nodes, (R,1)) and z (>= N nodes, (R,d)).
int soft_residual_loss(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                       const std::vector<int>& y_nodes, const std::vector<int>& z_nodes);

// Same, with Y_i = u(t_i, X_i) and z_i the input gradient of u, both from the
// differentiated network (arch C only).
int soft_constraint_loss(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                         const InputScaler& scaler, const PathBatch& paths);

struct DbsdeConfig {
    int n_steps = 100;
    int batch_size = 300;
    int iterations = 16000;
    int test_every = 100;   // test-loss cadence
    int test_size = 1000;
    int final_test_size = 1500;
    int scaler_paths = 10000;  // M: scaler statistics and the Y0 initializer
    double eta0 = 1e-2;
    double lr_threshold = 0.05;
    int lr_evals_per_period = 10;  // 10 test evals = one 1000-iteration period
    bool soft_constraint = false;  // Eq-style soft objective, arch C
    uint64_t seed = 0;
    long long reference_inner = 50000;  // MC realizations per reference point
    int integral_paths = 0;             // 0: integral errors over every path
    int eval_chunk = 250;               // rows per evaluation tape
};

struct DbsdeResult {
    NetworkParams params;  // lowest-test-loss snapshot
    InputScaler scaler;
    double best_test_loss = 0.0;
    int best_iteration = -1;
    double y0_initial = 0.0;  // E[g(X_T)] over the scaler sample
    std::vector<TrainRecord> history;
};

// Standard training procedure: Adam on batches of 300, test loss every 100
// iterations on a frozen test set of 1000 paths, halve eta when a period's
// mean test loss improves by less than 5%, keep the best-test-loss snapshot.
// A final test evaluation is appended after the last iteration (it does not
// feed the schedule). Non-finite losses abort with the iteration in the
// message.
DbsdeResult train_dbsde(const PdeProblem& problem, const NetworkSpec& spec,
                        const DbsdeConfig& cfg);

// Test loss of the given parameters on a path batch, batch-norm in inference
// mode, evaluated in row chunks (exact: eval-mode rows are independent).
double dbsde_test_loss(const PdeProblem& problem, NetworkParams& params,
                       const InputScaler& scaler, const PathBatch& paths, bool soft_constraint,
                       int chunk);

// Y and Z = kappa along every path of a batch, plus the test loss.
struct PathValues {
    std::vector<double> times;
    std::vector<Tensor> x;  // N+1 tensors (R,d)
    Tensor Y;               // (R, N+1)
    std::vector<Tensor> Z;  // N+1 tensors (R,d)
    double test_loss = 0.0;
};
PathValues dbsde_path_values(const PdeProblem& problem, NetworkParams& params,
                             const InputScaler& scaler, const PathBatch& paths,
                             bool soft_constraint, int chunk);

struct ErrorReport {
    double Y0 = 0.0, Y0_ref = 0.0;
    std::vector<double> Z0, Z0_ref;
    double rel_err_Y0 = 0.0;     // |Y0 - ref| / |ref|
    double rel_err_Z0 = 0.0;     // ||Z0 - ref||^2 / ||ref||^2 (verbatim ratio of squares)
    double integral_err_Y = 0.0; // E[dt (|e_0|/2 + |e_N|/2 + sum mid |e_i|)]
    double integral_err_Z = 0.0; // same with squared 2-norms
    double final_test_loss = 0.0;
    int n_integral_paths = 0;
};

// References: closed formulas where the problem has them, otherwise the
// caller-supplied baseline for (Y0, Z0) and conditional MC trajectories with
// reference_inner realizations per point for the integrals.
ErrorReport error_measures(const PdeProblem& problem, const PathValues& pv,
                           const BaselineResult* baseline, long long reference_inner,
                           uint64_t reference_seed, int integral_paths);

// Final test set of cfg.final_test_size paths -> PathValues -> error report.
ErrorReport evaluate_dbsde(const PdeProblem& problem, DbsdeResult& result,
                           const DbsdeConfig& cfg, const BaselineResult* baseline = nullptr);

}  // namespace semilin
