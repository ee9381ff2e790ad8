#include "semilin/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace semilin {

void Adam::step(NetworkParams& params, const std::vector<Tensor>& grads, double eta) {
    auto& entries = params.entries;
    if (grads.size() != entries.size()) {
        throw std::invalid_argument("Adam::step: gradient count does not match parameter count");
    }
    if (m_.empty()) {
        m_.reserve(entries.size());
        v_.reserve(entries.size());
        for (const auto& e : entries) {
            m_.emplace_back(e.value.rows, e.value.cols);
            v_.emplace_back(e.value.rows, e.value.cols);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < entries.size(); ++i) {
        auto& p = entries[i].value;
        const auto& g = grads[i];
        if (!p.same_shape(g)) {
            throw std::invalid_argument("Adam::step: gradient shape mismatch at " + entries[i].name);
        }
        for (size_t k = 0; k < p.data.size(); ++k) {
            double gk = g.data[k];
            double& mk = m_[i].data[k];
            double& vk = v_[i].data[k];
            mk = beta1 * mk + (1.0 - beta1) * gk;
            vk = beta2 * vk + (1.0 - beta2) * gk * gk;
            p.data[k] -= eta * (mk / bc1) / (std::sqrt(vk / bc2) + epsilon);
        }
    }
}

LrSchedule::LrSchedule(double eta0, int evals_per_period, double threshold)
    : eta_(eta0), threshold_(threshold), per_(evals_per_period) {
    if (eta0 <= 0.0 || evals_per_period < 1) {
        throw std::invalid_argument("LrSchedule: eta0 must be positive, evals_per_period >= 1");
    }
}

void LrSchedule::record(double test_loss) {
    acc_ += test_loss;
    if (++in_window_ < per_) return;
    double mean = acc_ / per_;
    acc_ = 0.0;
    in_window_ = 0;
    if (has_prev_) {
        // Halve when the relative improvement over the previous window falls
        // below the threshold. Worsening counts as insufficient improvement.
        if (prev_mean_ - mean < threshold_ * prev_mean_) {
            eta_ *= 0.5;
            ++halvings_;
        }
    }
    prev_mean_ = mean;
    has_prev_ = true;
}

std::vector<Tensor> collect_grads(const Tape& tape, const BoundParams& bp) {
    std::vector<Tensor> out;
    out.reserve(bp.nodes.size());
    for (size_t i = 0; i < bp.nodes.size(); ++i) {
        int id = bp.nodes[i];
        if (tape.has_grad(id)) {
            out.push_back(tape.grad(id));
        } else {
            const Tensor& v = tape.val(id);
            out.emplace_back(v.rows, v.cols);
        }
    }
    return out;
}

}  // namespace semilin
