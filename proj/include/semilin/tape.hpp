#pragma once

#include <string>
#include <vector>

#include "semilin/tensor.hpp"

namespace semilin {

enum class Op : uint8_t {
    var,
    matmul,
    add,
    sub,
    mul,
    div,
    concat,
    affine,
    relu,
    elu,
    tanh_fn,
    sigmoid,
    sin_fn,
    cos_fn,
    exp_fn,
    log_fn,
    sqrt_fn,
    square,
    clamp,
    reduce_sum,
    reduce_mean,
    batchnorm,
    // Helper kinds used by solvers and by the symbolic input-gradient pass.
    transpose,
    slice_cols,
    segment_sum,
    heaviside,
    elu_grad,
    clamp_mask,
    signed_floor,
};

const char* op_name(Op op);

enum class Axis : uint8_t {
    all,     // collapse to 1x1
    rows,    // collapse rows, result 1 x cols
    cols,    // collapse cols, result rows x 1
};

// Running batch-normalization statistics. gamma/beta live in the parameter set;
// the moving statistics are updated as a forward side effect in training mode
// and drive the output in inference mode.
struct BatchNormState {
    std::vector<double> moving_mean;
    std::vector<double> moving_var;
    double momentum = 0.99;
    double epsilon = 1e-6;
    bool initialized = false;

    explicit BatchNormState(int features = 0)
        : moving_mean(features, 0.0), moving_var(features, 1.0) {}
};

// Reverse-mode tape. Define-by-run: rebuilt every iteration. Nodes are appended
// in topological order; backward() walks them once in reverse.
class Tape {
  public:
    struct Node {
        Op op = Op::var;
        std::vector<int> inputs;
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        // Op-specific extras.
        Axis axis = Axis::all;
        double a0 = 0.0, a1 = 0.0;          // clamp scalar bounds, signed_floor eps
        int i0 = 0, i1 = 0;                 // slice column range
        std::vector<int> segments;          // segment_sum offsets (size n_groups+1)
        BatchNormState* bn = nullptr;
        bool bn_training = false;
        // Batch statistics cached by the batchnorm forward for its backward.
        std::vector<double> bn_mean, bn_inv_std;
    };

    int var(Tensor value, bool requires_grad);
    int constant(Tensor value) { return var(std::move(value), false); }
    int scalar(double v) { return constant(Tensor::scalar(v)); }

    int matmul(int a, int b);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int div(int a, int b);
    int concat(const std::vector<int>& parts);
    int affine(int x, int w, int b);  // x*w + b, b broadcast down rows
    int relu(int x);
    int elu(int x);
    int tanh(int x);
    int sigmoid(int x);
    int sin(int x);
    int cos(int x);
    int exp(int x);
    int log(int x);
    int sqrt(int x);
    int square(int x);
    // lo/hi may be scalar nodes or tensors matching x's shape.
    int clamp(int x, int lo, int hi);
    int clamp(int x, double lo, double hi);
    int reduce_sum(int x, Axis axis);
    int reduce_mean(int x, Axis axis);
    int batchnorm(int x, int gamma, int beta, BatchNormState* state, bool training);

    int transpose(int x);
    int slice_cols(int x, int c0, int c1);
    // x has groups of consecutive rows; offsets[g]..offsets[g+1] delimit group g.
    // Result: one row per group holding the within-group column sums.
    int segment_sum(int x, std::vector<int> offsets);
    int heaviside(int x);
    int elu_grad_op(int x);
    int clamp_mask(int x, int lo, int hi);
    int signed_floor(int x, double eps);

    const Tensor& val(int id) const { return nodes_[id].val; }
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }
    size_t node_count() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss node. Errors if the loss is not 1x1 or
    // if called twice without re-recording.
    void backward(int loss);

    // Emits the gradient of a per-row scalar output w.r.t. a flagged input as
    // new tape nodes. The returned node has the input's shape and participates
    // in later backward() calls, so losses built from it can still be
    // differentiated w.r.t. parameters.
    int grad_wrt_input(int output, int input);

    void clear();

  private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;

    int push(Node n);
    void check_finite(int id) const;
    void backward_node(int id);
    [[noreturn]] void fail(const std::string& msg) const;
};

}  // namespace semilin
