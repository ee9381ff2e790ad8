#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "semilin/rng.hpp"
#include "semilin/tape.hpp"
#include "semilin/threading.hpp"

using namespace semilin;

namespace {

Tensor random_tensor(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (auto& v : t.data) v = lo + (hi - lo) * rng.u01();
    return t;
}

// Builds the graph from the given leaf values and returns the loss node.
using Builder = std::function<int(Tape&, const std::vector<int>&)>;

double eval_loss(const std::vector<Tensor>& leaves, const Builder& build) {
    Tape tape;
    std::vector<int> ids;
    for (const auto& t : leaves) ids.push_back(tape.var(t, true));
    return tape.val(build(tape, ids)).data[0];
}

// Compares backward() against central finite differences on every element of
// every leaf.
void gradcheck(const std::vector<Tensor>& leaves, const Builder& build,
               const std::string& label, double rel = 1e-4, double abs = 1e-7) {
    Tape tape;
    std::vector<int> ids;
    for (const auto& t : leaves) ids.push_back(tape.var(t, true));
    tape.backward(build(tape, ids));
    const double h = 1e-5;
    for (size_t k = 0; k < leaves.size(); ++k) {
        const Tensor& analytic = tape.grad(ids[k]);
        for (size_t i = 0; i < leaves[k].size(); ++i) {
            auto shifted = leaves;
            shifted[k].data[i] += h;
            double up = eval_loss(shifted, build);
            shifted[k].data[i] -= 2 * h;
            double dn = eval_loss(shifted, build);
            double fd = (up - dn) / (2 * h);
            double a = analytic.data[i];
            double tol = abs + rel * std::max(std::fabs(a), std::fabs(fd));
            INFO(label << " leaf " << k << " element " << i << " analytic " << a << " fd " << fd);
            CHECK(std::fabs(a - fd) <= tol);
        }
    }
}

int msq(Tape& t, int x) { return t.reduce_mean(t.square(x), Axis::all); }

}  // namespace

TEST_CASE("elementwise and matmul ops match finite differences") {
    Rng rng(7, StreamTag::generic, 0);
    struct Case {
        std::string name;
        std::function<void(Rng&)> run;
    };
    auto unary_case = [&](const std::string& name, double lo, double hi,
                          std::function<int(Tape&, int)> op) {
        return Case{name, [&, lo, hi, op, name](Rng& r) {
                        Tensor x = random_tensor(1 + static_cast<int>(r.u01() * 6),
                                                 1 + static_cast<int>(r.u01() * 5), r, lo, hi);
                        gradcheck({x},
                                  [&](Tape& t, const std::vector<int>& v) {
                                      return msq(t, op(t, v[0]));
                                  },
                                  name);
                    }};
    };
    std::vector<Case> cases = {
        unary_case("relu", -1, 1, [](Tape& t, int x) { return t.relu(x); }),
        unary_case("elu", -1, 1, [](Tape& t, int x) { return t.elu(x); }),
        unary_case("tanh", -2, 2, [](Tape& t, int x) { return t.tanh(x); }),
        unary_case("sigmoid", -2, 2, [](Tape& t, int x) { return t.sigmoid(x); }),
        unary_case("sin", -3, 3, [](Tape& t, int x) { return t.sin(x); }),
        unary_case("cos", -3, 3, [](Tape& t, int x) { return t.cos(x); }),
        unary_case("exp", -1, 1, [](Tape& t, int x) { return t.exp(x); }),
        unary_case("log", 0.5, 2.5, [](Tape& t, int x) { return t.log(x); }),
        unary_case("sqrt", 0.5, 2.5, [](Tape& t, int x) { return t.sqrt(x); }),
        unary_case("square", -2, 2, [](Tape& t, int x) { return t.square(x); }),
        unary_case("elu_grad", -2, 2, [](Tape& t, int x) { return t.elu_grad_op(x); }),
        unary_case("heaviside", 0.1, 2, [](Tape& t, int x) { return t.heaviside(x); }),
        unary_case("signed_floor", 0.5, 2, [](Tape& t, int x) { return t.signed_floor(x, 1e-2); }),
        {"matmul", [&](Rng& r) {
             int m = 1 + static_cast<int>(r.u01() * 4), k = 1 + static_cast<int>(r.u01() * 4),
                 n = 1 + static_cast<int>(r.u01() * 4);
             gradcheck({random_tensor(m, k, r), random_tensor(k, n, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.matmul(v[0], v[1]));
                       },
                       "matmul");
         }},
        {"affine", [&](Rng& r) {
             int m = 2 + static_cast<int>(r.u01() * 4), k = 1 + static_cast<int>(r.u01() * 4),
                 n = 1 + static_cast<int>(r.u01() * 4);
             gradcheck({random_tensor(m, k, r), random_tensor(k, n, r), random_tensor(1, n, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.affine(v[0], v[1], v[2]));
                       },
                       "affine");
         }},
        {"concat", [&](Rng& r) {
             int m = 2 + static_cast<int>(r.u01() * 3);
             gradcheck({random_tensor(m, 2, r), random_tensor(m, 1, r), random_tensor(m, 3, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.tanh(t.concat({v[0], v[1], v[2]})));
                       },
                       "concat");
         }},
        {"transpose", [&](Rng& r) {
             gradcheck({random_tensor(3, 5, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.matmul(v[0], t.transpose(v[0])));
                       },
                       "transpose");
         }},
        {"slice_cols", [&](Rng& r) {
             gradcheck({random_tensor(4, 6, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.mul(t.slice_cols(v[0], 1, 4), t.slice_cols(v[0], 3, 6)));
                       },
                       "slice_cols");
         }},
        {"segment_sum", [&](Rng& r) {
             gradcheck({random_tensor(7, 3, r)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.segment_sum(t.square(v[0]), {0, 2, 2, 5, 7}));
                       },
                       "segment_sum");
         }},
        {"clamp", [&](Rng& r) {
             gradcheck({random_tensor(5, 4, r, -2, 2)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.clamp(v[0], -0.6, 0.9));
                       },
                       "clamp scalar bounds");
             // Trainable scalar bounds.
             gradcheck({random_tensor(5, 4, r, -2, 2), Tensor::scalar(-0.55), Tensor::scalar(0.85)},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.clamp(v[0], v[1], v[2]));
                       },
                       "clamp trainable bounds");
             // Tensor bounds of the same shape as x.
             Tensor x = random_tensor(4, 3, r, -2, 2);
             Tensor lo = random_tensor(4, 3, r, -1.5, -0.5);
             Tensor hi = random_tensor(4, 3, r, 0.5, 1.5);
             gradcheck({x, lo, hi},
                       [](Tape& t, const std::vector<int>& v) {
                           return msq(t, t.clamp(v[0], v[1], v[2]));
                       },
                       "clamp tensor bounds");
         }},
    };
    // Binary ops across every broadcast pattern.
    for (auto op : {Op::add, Op::sub, Op::mul, Op::div}) {
        cases.push_back({std::string("binary ") + op_name(op), [&, op](Rng& r) {
            int m = 2 + static_cast<int>(r.u01() * 4), n = 2 + static_cast<int>(r.u01() * 3);
            std::vector<std::pair<int, int>> shapes = {{m, n}, {1, 1}, {1, n}, {m, 1}};
            for (auto [br, bc] : shapes) {
                // Keep divisors away from zero.
                Tensor a = random_tensor(m, n, r, 0.5, 2.0);
                Tensor b = random_tensor(br, bc, r, 0.5, 2.0);
                auto build = [op](Tape& t, const std::vector<int>& v) {
                    int z = op == Op::add   ? t.add(v[0], v[1])
                            : op == Op::sub ? t.sub(v[0], v[1])
                            : op == Op::mul ? t.mul(v[0], v[1])
                                            : t.div(v[0], v[1]);
                    return msq(t, z);
                };
                gradcheck({a, b}, build, std::string(op_name(op)) + " broadcast");
                gradcheck({b, a}, build, std::string(op_name(op)) + " broadcast flipped");
            }
        }});
    }
    for (auto& c : cases)
        for (int rep = 0; rep < 3; ++rep) c.run(rng);
}

TEST_CASE("reductions match finite differences on every axis") {
    Rng rng(11, StreamTag::generic, 1);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor x = random_tensor(4, 3, rng);
        for (Axis ax : {Axis::all, Axis::rows, Axis::cols}) {
            gradcheck({x},
                      [ax](Tape& t, const std::vector<int>& v) {
                          return msq(t, t.reduce_sum(t.tanh(v[0]), ax));
                      },
                      "reduce_sum");
            gradcheck({x},
                      [ax](Tape& t, const std::vector<int>& v) {
                          return msq(t, t.reduce_mean(t.tanh(v[0]), ax));
                      },
                      "reduce_mean");
        }
    }
}

TEST_CASE("batchnorm gradients match finite differences") {
    Rng rng(13, StreamTag::generic, 2);
    for (bool training : {true, false}) {
        BatchNormState ref_state(3);
        if (!training) {
            // Give the moving statistics a non-trivial value first.
            Tape warm;
            BatchNormState* s = &ref_state;
            Tensor x = random_tensor(16, 3, rng, -2, 2);
            warm.batchnorm(warm.constant(x), warm.constant(Tensor::full(1, 3, 1.0)),
                           warm.constant(Tensor(1, 3)), s, true);
        }
        Tensor x = random_tensor(6, 3, rng, -2, 2);
        Tensor gamma = random_tensor(1, 3, rng, 0.5, 1.5);
        Tensor beta = random_tensor(1, 3, rng);
        auto build = [&ref_state, training](Tape& t, const std::vector<int>& v) {
            // Fresh copy per evaluation: the forward mutates the moving stats.
            // The tape only reads the state inside the batchnorm call itself.
            BatchNormState state = ref_state;
            return msq(t, t.batchnorm(v[0], v[1], v[2], &state, training));
        };
        gradcheck({x, gamma, beta}, build,
                  training ? "batchnorm training" : "batchnorm inference", 2e-4);
    }
}

TEST_CASE("batchnorm normalizes per feature and tracks moving statistics") {
    Rng rng(17, StreamTag::generic, 3);
    Tensor x = random_tensor(64, 4, rng, -3, 5);
    BatchNormState state(4);
    Tape tape;
    int out = tape.batchnorm(tape.constant(x), tape.constant(Tensor::full(1, 4, 1.0)),
                             tape.constant(Tensor(1, 4)), &state, true);
    const Tensor& y = tape.val(out);
    for (int c = 0; c < 4; ++c) {
        double m = 0, v = 0;
        for (int r = 0; r < 64; ++r) m += y.at(r, c);
        m /= 64;
        for (int r = 0; r < 64; ++r) v += (y.at(r, c) - m) * (y.at(r, c) - m);
        v /= 64;
        CHECK(std::fabs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-3));  // epsilon in the denominator
        // Moving stats blended from (0, 1) with momentum 0.99.
        double bm = 0, bv = 0;
        for (int r = 0; r < 64; ++r) bm += x.at(r, c);
        bm /= 64;
        for (int r = 0; r < 64; ++r) bv += (x.at(r, c) - bm) * (x.at(r, c) - bm);
        bv /= 64;
        CHECK(state.moving_mean[c] == doctest::Approx(0.01 * bm).epsilon(1e-12));
        CHECK(state.moving_var[c] == doctest::Approx(0.99 * 1.0 + 0.01 * bv).epsilon(1e-12));
    }
    // Inference mode reproduces the moving statistics exactly.
    Tape inf;
    int out2 = inf.batchnorm(inf.constant(x), inf.constant(Tensor::full(1, 4, 1.0)),
                             inf.constant(Tensor(1, 4)), &state, false);
    double expect = (x.at(0, 0) - state.moving_mean[0]) /
                    std::sqrt(state.moving_var[0] + state.epsilon);
    CHECK(inf.val(out2).at(0, 0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("documented point values") {
    Tape t;
    // Identity matmul.
    int a = t.constant(Tensor(2, 2, {1, 2, 3, 4}));
    int eye = t.constant(Tensor(2, 2, {1, 0, 0, 1}));
    const Tensor& prod = t.val(t.matmul(a, eye));
    CHECK(prod.data == std::vector<double>({1, 2, 3, 4}));
    // elu(-1) = exp(-1) - 1.
    CHECK(t.val(t.elu(t.scalar(-1.0))).data[0] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
    // clamp(5, -2, 2) = 2 with zero gradient.
    int x = t.var(Tensor::scalar(5.0), true);
    int c = t.clamp(x, -2.0, 2.0);
    CHECK(t.val(c).data[0] == 2.0);
    t.backward(c);
    CHECK(t.grad(x).data[0] == 0.0);
    // loss = x^2 at x = 3 gives gradient 6.
    Tape t2;
    int x2 = t2.var(Tensor::scalar(3.0), true);
    t2.backward(t2.square(x2));
    CHECK(t2.grad(x2).data[0] == 6.0);
    // Clamp at the kink keeps the interior-side subgradient.
    Tape t3;
    int x3 = t3.var(Tensor::scalar(2.0), true);
    t3.backward(t3.clamp(x3, -2.0, 2.0));
    CHECK(t3.grad(x3).data[0] == 1.0);
}

TEST_CASE("grad_wrt_input emits exact input gradients") {
    // u(x) = |x|^2 rowwise, so du/dx = 2x.
    Tape t;
    Tensor xv(3, 2, {1.0, 0.5, -0.3, 2.0, 0.0, -1.0});
    int x = t.var(xv, true);
    int u = t.reduce_sum(t.square(x), Axis::cols);
    int du = t.grad_wrt_input(u, x);
    const Tensor& g = t.val(du);
    REQUIRE(g.rows == 3);
    REQUIRE(g.cols == 2);
    for (size_t i = 0; i < xv.size(); ++i) CHECK(g.data[i] == doctest::Approx(2 * xv.data[i]).epsilon(1e-14));

    // u(x) = cos(sum x) has zero gradient at the origin.
    Tape t2;
    int x2 = t2.var(Tensor(2, 3), true);
    int u2 = t2.cos(t2.reduce_sum(x2, Axis::cols));
    const Tensor& g2 = t2.val(t2.grad_wrt_input(u2, x2));
    for (double v : g2.data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("grad_wrt_input matches finite differences through a small network") {
    Rng rng(23, StreamTag::generic, 4);
    const int d = 3, width = 5, batch = 4;
    Tensor xv = random_tensor(batch, d, rng);
    Tensor w1 = random_tensor(d, width, rng), b1 = random_tensor(1, width, rng);
    Tensor w2 = random_tensor(width, 1, rng), b2 = random_tensor(1, 1, rng);
    auto forward = [&](const Tensor& xin, Tape& t, int& x_id) {
        x_id = t.var(xin, true);
        int h = t.tanh(t.affine(x_id, t.constant(w1), t.constant(b1)));
        return t.affine(h, t.constant(w2), t.constant(b2));
    };
    Tape t;
    int x_id;
    int u = forward(xv, t, x_id);
    const Tensor& du = t.val(t.grad_wrt_input(u, x_id));
    const double h = 1e-6;
    for (int r = 0; r < batch; ++r)
        for (int c = 0; c < d; ++c) {
            Tensor up = xv, dn = xv;
            up.at(r, c) += h;
            dn.at(r, c) -= h;
            Tape tu, td;
            int dummy;
            double fd = (tu.val(forward(up, tu, dummy)).at(r, 0) -
                         td.val(forward(dn, td, dummy)).at(r, 0)) /
                        (2 * h);
            CHECK(du.at(r, c) == doctest::Approx(fd).epsilon(1e-5));
        }
}

TEST_CASE("parameter gradients flow through an emitted input gradient") {
    Rng rng(29, StreamTag::generic, 5);
    const int d = 2, width = 4, batch = 3;
    Tensor xv = random_tensor(batch, d, rng);
    std::vector<Tensor> leaves = {random_tensor(d, width, rng), random_tensor(1, width, rng),
                                  random_tensor(width, 1, rng), random_tensor(1, 1, rng)};
    auto build = [&xv](Tape& t, const std::vector<int>& v) {
        int x = t.var(xv, true);
        int hmid = t.tanh(t.affine(x, v[0], v[1]));
        int u = t.affine(hmid, v[2], v[3]);
        int du = t.grad_wrt_input(u, x);
        return t.reduce_mean(t.square(du), Axis::all);
    };
    gradcheck(leaves, build, "loss on emitted gradient", 1e-4, 1e-7);
}

TEST_CASE("gradients and sums are identical across thread counts") {
    Rng rng(31, StreamTag::generic, 6);
    Tensor x = random_tensor(600, 16, rng);
    Tensor w = random_tensor(16, 32, rng), b = random_tensor(1, 32, rng);
    auto run = [&](int threads) {
        ThreadPool::instance().set_thread_count(threads);
        Tape t;
        int xi = t.constant(x);
        int wi = t.var(w, true), bi = t.var(b, true);
        int loss = t.reduce_mean(t.square(t.tanh(t.affine(xi, wi, bi))), Axis::all);
        t.backward(loss);
        std::vector<double> out = t.grad(wi).data;
        out.push_back(t.val(loss).data[0]);
        auto gb = t.grad(bi).data;
        out.insert(out.end(), gb.begin(), gb.end());
        return out;
    };
    int original = ThreadPool::instance().thread_count();
    auto one = run(1);
    auto four = run(4);
    ThreadPool::instance().set_thread_count(original);
    REQUIRE(one.size() == four.size());
    CHECK(std::memcmp(one.data(), four.data(), one.size() * sizeof(double)) == 0);
}

TEST_CASE("error contracts") {
    // backward twice
    {
        Tape t;
        int x = t.var(Tensor::scalar(1.0), true);
        int l = t.square(x);
        t.backward(l);
        CHECK_THROWS_WITH_AS(t.backward(l), doctest::Contains("twice"), std::runtime_error);
    }
    // non-scalar loss
    {
        Tape t;
        int x = t.var(Tensor(2, 2), true);
        CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("scalar"), std::runtime_error);
    }
    // non-finite forward values name the op
    {
        Tape t;
        CHECK_THROWS_WITH_AS(t.log(t.scalar(-1.0)), doctest::Contains("log"), std::runtime_error);
    }
    // grad_wrt_input demands a flagged input
    {
        Tape t;
        int x = t.constant(Tensor(2, 2));
        int u = t.reduce_sum(t.square(x), Axis::cols);
        CHECK_THROWS_WITH_AS(t.grad_wrt_input(u, x), doctest::Contains("flagged"),
                             std::runtime_error);
    }
    // grad_wrt_input refuses batchnorm on the path
    {
        Tape t;
        BatchNormState state(2);
        int x = t.var(Tensor::full(3, 2, 0.5), true);
        int bn = t.batchnorm(x, t.constant(Tensor::full(1, 2, 1.0)), t.constant(Tensor(1, 2)),
                             &state, true);
        int u = t.reduce_sum(bn, Axis::cols);
        CHECK_THROWS_WITH_AS(t.grad_wrt_input(u, x), doctest::Contains("batchnorm"),
                             std::runtime_error);
    }
    // clamp rejects crossed bounds
    {
        Tape t;
        CHECK_THROWS_WITH_AS(t.clamp(t.scalar(0.0), 1.0, -1.0), doctest::Contains("lo <= hi"),
                             std::runtime_error);
    }
}
