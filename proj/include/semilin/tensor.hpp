#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace semilin {

// Dense row-major 2-D array of doubles. Scalars are 1x1, row vectors 1xn,
// column vectors nx1. Everything the solvers need is rank <= 2 (batch rows x
// feature columns).
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
        assert(static_cast<size_t>(rows) * cols == data.size());
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }
    static Tensor full(int r, int c, double v) {
        Tensor t(r, c);
        for (auto& x : t.data) x = v;
        return t;
    }

    size_t size() const { return data.size(); }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }
};

}  // namespace semilin
