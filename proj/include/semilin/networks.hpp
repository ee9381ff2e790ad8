#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semilin/pde.hpp"
#include "semilin/rng.hpp"
#include "semilin/tape.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

// Letters a-j are the Deep BSDE zoo; A/B/C are the fixed-point nets (C-bis
// reuses arch C with a different loss, so it is not a separate arch).
enum class Arch {
    fc_dbsde,             // a
    fc_elu,               // b
    fc_residual,          // c
    fc_merged,            // d
    fc_merged_shortcut,   // e
    fc_merged_residual,   // f
    lstm,                 // g
    augmented_lstm,       // h
    hybrid_lstm,          // i
    residual_lstm,        // j
    fp_separated,         // A
    fp_shared,            // B
    fp_autodiff,          // C
};

Arch arch_from_string(const std::string& name);
std::string to_string(Arch arch);
bool is_per_step(Arch arch);   // a, b, c
bool is_recurrent(Arch arch);  // g, h, i, j
bool is_fixed_point(Arch arch);

struct NetworkSpec {
    Arch arch = Arch::fc_merged;
    int d = 1;
    int h = 2;        // hidden layers
    int w = 2;        // hidden width
    int n_steps = 100;  // time grid size N (per-step archs build N-1 subnets)
    bool use_batchnorm = false;  // only supported (and required) by arch a
};

// h=2, w=2d for the Deep BSDE archs; h=3, w=2d for the fixed-point ones.
NetworkSpec default_spec(Arch arch, int d, int n_steps = 100);

// Closed-form trainable parameter count (the Table 1 formulas, generalized to
// arbitrary h and w).
long long param_count(const NetworkSpec& spec);

struct ParamEntry {
    std::string name;
    Tensor value;
};

struct NetworkParams {
    NetworkSpec spec;
    std::vector<ParamEntry> entries;
    // Moving statistics of batch-normalized layers, keyed by layer prefix.
    // Buffers, not trainable parameters; excluded from count().
    std::vector<std::pair<std::string, BatchNormState>> bn;

    long long count() const;
    int index(const std::string& name) const;  // -1 if absent
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
};

// Xavier-uniform weights, N(0, 0.1^2) biases (forget-gate biases set to 1),
// batch-norm gamma 1 / beta N(0, 0.1^2), Y0 and kappa0 zero. Draws come from
// Rng(seed, param_init) in entry order.
NetworkParams build(const NetworkSpec& spec, uint64_t seed);

// Parameters registered on a tape for one forward/backward pass. nodes is
// parallel to params->entries; training toggles batch-norm statistics updates.
struct BoundParams {
    NetworkParams* params = nullptr;
    std::vector<int> nodes;
    bool training = false;

    int node(const std::string& name) const;
};
BoundParams bind_params(Tape& tape, NetworkParams& params, bool training);

// Hidden and cell tape nodes per LSTM layer; empty vectors mean the zero
// initial state (constants are created on first use).
struct LstmState {
    std::vector<int> m, c;
};

// Scaled tape nodes fed to forward_kappa; -1 where an arch does not use one.
struct KappaInputs {
    int t = -1;  // (R,1)
    int x = -1;  // (R,d)
    int y = -1;  // (R,1)
    int g = -1;  // (R,1)
};

// One network evaluation at a time step: kappa (R,d). Per-step archs select
// the subnet by step_index (1..N-1; kappa at t_0 is the trainable kappa0
// entry, not a network output). Recurrent archs advance *state.
int forward_kappa(Tape& tape, BoundParams& bp, int step_index, const KappaInputs& in,
                  LstmState* state);

// Input scaling of the standard training procedure. Statistics are taken over
// all grid times i=0..N and M simulated paths.
struct InputScaler {
    double T = 1.0;
    double dt = 0.01;  // delta_t = T/N
    std::vector<double> X_mean, X_std;
    double Y_mean = 0.0;
    bool y_degenerate = false;  // Y_mean == 0: divide by 1 instead
    double y0_init = 0.0;       // mean of g(X_T): the Y0 initializer

    double y_div() const { return y_degenerate ? 1.0 : std::abs(Y_mean); }
    double scale_t(double t) const { return (t - (T - dt) / 2.0) / ((T - dt) / 2.0); }
    double scale_y(double y) const { return (y - Y_mean) / y_div(); }
    Tensor scale_x(const Tensor& x) const;           // (R,d) -> (R,d)
    int scale_x_node(Tape& tape, int x_raw) const;   // same, recorded on tape
};

InputScaler fit_scaler(const PdeProblem& problem, int n_steps, int n_paths, uint64_t seed);

// u and (for A/B, or C when want_v) v at raw inputs t, x. The scaling happens
// on the tape, so arch C's grad_wrt_input differentiates through it; x_raw
// must be a flagged input node in that case.
struct UvNodes {
    int u = -1;
    int v = -1;
};
UvNodes forward_uv(Tape& tape, BoundParams& bp, const InputScaler& scaler, const Tensor& t,
                   int x_raw, bool want_v);

// Flat binary of doubles in entry order plus a JSON sidecar with shapes,
// offsets and batch-norm statistics. Writes <base>.bin and <base>.json.
void save_params(const NetworkParams& params, const std::string& base_path);
NetworkParams load_params(const std::string& base_path);

}  // namespace semilin
