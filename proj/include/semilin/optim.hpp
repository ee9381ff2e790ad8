#pragma once

#include <vector>

#include "semilin/networks.hpp"
#include "semilin/tape.hpp"
#include "semilin/tensor.hpp"

namespace semilin {

// Adam with the recommended moments. State is lazily sized to the first
// gradient set and keyed by position, so entry order must not change.
class Adam {
  public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void step(NetworkParams& params, const std::vector<Tensor>& grads, double eta);
    long long iterations() const { return t_; }

  private:
    long long t_ = 0;
    std::vector<Tensor> m_, v_;
};

// One line of training history, shared by both solvers. test_loss is NaN off
// the evaluation cadence; the final bookkeeping record has NaN train_loss.
struct TrainRecord {
    int iteration = 0;
    double train_loss = 0.0;
    double test_loss = 0.0;
    double eta = 0.0;
};

// Decreasing learning-rate strategy: group the periodic test losses into
// windows of evals_per_period values; when a window mean improves on the
// previous one by less than `threshold` (relative), halve eta.
class LrSchedule {
  public:
    LrSchedule(double eta0, int evals_per_period = 10, double threshold = 0.05);

    void record(double test_loss);
    double eta() const { return eta_; }
    int halvings() const { return halvings_; }

  private:
    double eta_;
    double threshold_;
    int per_;
    int halvings_ = 0;
    bool has_prev_ = false;
    double prev_mean_ = 0.0;
    double acc_ = 0.0;
    int in_window_ = 0;
};

// Gradients of every bound parameter after tape.backward, zeros where a
// parameter did not reach the loss.
std::vector<Tensor> collect_grads(const Tape& tape, const BoundParams& bp);

}  // namespace semilin
