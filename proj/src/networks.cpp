#include "semilin/networks.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "semilin/sde.hpp"

namespace semilin {

namespace {

constexpr double kBiasStd = 0.1;
constexpr double kStdFloor = 1e-12;

struct ArchName {
    Arch arch;
    const char* letter;
    const char* word;
};
const ArchName kArchNames[] = {
    {Arch::fc_dbsde, "a", "fc_dbsde"},
    {Arch::fc_elu, "b", "fc_elu"},
    {Arch::fc_residual, "c", "fc_residual"},
    {Arch::fc_merged, "d", "fc_merged"},
    {Arch::fc_merged_shortcut, "e", "fc_merged_shortcut"},
    {Arch::fc_merged_residual, "f", "fc_merged_residual"},
    {Arch::lstm, "g", "lstm"},
    {Arch::augmented_lstm, "h", "augmented_lstm"},
    {Arch::hybrid_lstm, "i", "hybrid_lstm"},
    {Arch::residual_lstm, "j", "residual_lstm"},
    {Arch::fp_separated, "A", "fp_separated"},
    {Arch::fp_shared, "B", "fp_shared"},
    {Arch::fp_autodiff, "C", "fp_autodiff"},
};

}  // namespace

Arch arch_from_string(const std::string& name) {
    if (name == "C-bis" || name == "C_bis" || name == "Cbis") return Arch::fp_autodiff;
    for (const auto& an : kArchNames)
        if (name == an.letter || name == an.word) return an.arch;
    throw std::invalid_argument("unknown architecture: " + name);
}

std::string to_string(Arch arch) {
    for (const auto& an : kArchNames)
        if (an.arch == arch) return an.letter;
    return "?";
}

bool is_per_step(Arch a) {
    return a == Arch::fc_dbsde || a == Arch::fc_elu || a == Arch::fc_residual;
}

bool is_recurrent(Arch a) {
    return a == Arch::lstm || a == Arch::augmented_lstm || a == Arch::hybrid_lstm ||
           a == Arch::residual_lstm;
}

bool is_fixed_point(Arch a) {
    return a == Arch::fp_separated || a == Arch::fp_shared || a == Arch::fp_autodiff;
}

NetworkSpec default_spec(Arch arch, int d, int n_steps) {
    NetworkSpec s;
    s.arch = arch;
    s.d = d;
    s.h = is_fixed_point(arch) ? 3 : 2;
    s.w = 2 * d;
    s.n_steps = n_steps;
    s.use_batchnorm = arch == Arch::fc_dbsde;
    return s;
}

long long param_count(const NetworkSpec& s) {
    const long long d = s.d, h = s.h, w = s.w, N = s.n_steps;
    const long long fc_out = w * d + d;
    switch (s.arch) {
        case Arch::fc_dbsde:
            return 1 + d + (N - 1) * (d * w + 2 * w + (h - 1) * (w * w + 2 * w) + fc_out);
        case Arch::fc_elu:
            return 1 + d + (N - 1) * (d * w + w + (h - 1) * (w * w + w) + fc_out);
        case Arch::fc_residual:
            return 1 + d + (N - 1) * ((d + 1) * w + w + (h - 1) * (w * w + w) + fc_out);
        case Arch::fc_merged:
        case Arch::fc_merged_residual:
            return 1 + (d + 3) * w + w + (h - 1) * (w * w + w) + fc_out;
        case Arch::fc_merged_shortcut:
            return 1 + (d + 3) * w + w + (h - 1) * ((w + d + 3) * w + w) + (w + d + 3) * d + d;
        case Arch::lstm:
            return 1 + 4 * ((d + 1) * w + w) + 4 * w + (h - 1) * (4 * (w * w + w) + 4 * w) +
                   fc_out;
        case Arch::augmented_lstm:
        case Arch::residual_lstm:
            return 1 + 4 * ((d + 3) * w + w) + 4 * w + (h - 1) * (4 * (w * w + w) + 4 * w) +
                   fc_out;
        case Arch::hybrid_lstm:
            return 1 + 4 * ((d + 3) * w + w) + 4 * w + (h - 1) * (w * w + w) + fc_out;
        case Arch::fp_separated:
            return 2 * ((d + 1) * w + w + (h - 1) * (w * w + w)) + (w + 1) + fc_out;
        case Arch::fp_shared:
            return (d + 1) * w + w + (h - 1) * (w * w + w) + w * (d + 1) + (d + 1);
        case Arch::fp_autodiff:
            return (d + 1) * w + w + (h - 1) * (w * w + w) + w + 1;
    }
    throw std::logic_error("param_count: unhandled arch");
}

long long NetworkParams::count() const {
    long long n = 0;
    for (const auto& e : entries) n += static_cast<long long>(e.value.size());
    return n;
}

int NetworkParams::index(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return static_cast<int>(i);
    return -1;
}

Tensor& NetworkParams::at(const std::string& name) {
    int i = index(name);
    if (i < 0) throw std::out_of_range("no parameter named " + name);
    return entries[i].value;
}

const Tensor& NetworkParams::at(const std::string& name) const {
    int i = index(name);
    if (i < 0) throw std::out_of_range("no parameter named " + name);
    return entries[i].value;
}

namespace {

// Network input widths: per-step archs see X (a, b) or X,g (c); merged and
// augmented/hybrid LSTMs see t,X,Y,g; plain LSTM sees t,X; fixed-point nets
// see t,X.
int input_width(Arch arch, int d) {
    switch (arch) {
        case Arch::fc_dbsde:
        case Arch::fc_elu: return d;
        case Arch::fc_residual: return d + 1;
        case Arch::lstm: return d + 1;
        case Arch::fc_merged:
        case Arch::fc_merged_shortcut:
        case Arch::fc_merged_residual:
        case Arch::augmented_lstm:
        case Arch::hybrid_lstm:
        case Arch::residual_lstm: return d + 3;
        case Arch::fp_separated:
        case Arch::fp_shared:
        case Arch::fp_autodiff: return d + 1;
    }
    throw std::logic_error("input_width: unhandled arch");
}

struct Builder {
    NetworkParams& p;
    Rng& rng;

    void weight(const std::string& name, int in, int out) {
        Tensor t(in, out);
        const double bound = std::sqrt(6.0 / (in + out));
        for (auto& v : t.data) v = (2.0 * rng.u01() - 1.0) * bound;
        p.entries.push_back({name, std::move(t)});
    }
    // Diagonal recurrence vector: Xavier with fan_in = fan_out = w.
    void diag(const std::string& name, int w) {
        Tensor t(1, w);
        const double bound = std::sqrt(6.0 / (2.0 * w));
        for (auto& v : t.data) v = (2.0 * rng.u01() - 1.0) * bound;
        p.entries.push_back({name, std::move(t)});
    }
    void bias(const std::string& name, int n, double offset = 0.0) {
        Tensor t(1, n);
        for (auto& v : t.data) v = offset + kBiasStd * rng.normal();
        p.entries.push_back({name, std::move(t)});
    }
    void constant(const std::string& name, int rows, int cols, double v) {
        p.entries.push_back({name, Tensor::full(rows, cols, v)});
    }

    void fc_layer(const std::string& prefix, int in, int out, bool bn) {
        weight(prefix + "/W", in, out);
        if (bn) {
            constant(prefix + "/gamma", 1, out, 1.0);
            bias(prefix + "/beta", out);
            p.bn.push_back({prefix, BatchNormState(out)});
        } else {
            bias(prefix + "/b", out);
        }
    }
    void lstm_layer(const std::string& prefix, int in, int w) {
        weight(prefix + "/Wi", in, w);
        weight(prefix + "/Wf", in, w);
        weight(prefix + "/Wo", in, w);
        weight(prefix + "/Wc", in, w);
        diag(prefix + "/ui", w);
        diag(prefix + "/uf", w);
        diag(prefix + "/uo", w);
        diag(prefix + "/uc", w);
        bias(prefix + "/bi", w);
        // Forget gates start open: standard stabilization.
        constant(prefix + "/bf", 1, w, 1.0);
        bias(prefix + "/bo", w);
        bias(prefix + "/bc", w);
    }
    // Plain FC stack with output head.
    void fc_net(const std::string& prefix, int in, int h, int w, int out, bool bn,
                bool shortcut = false) {
        fc_layer(prefix + "l0", in, w, bn);
        for (int k = 1; k < h; ++k) fc_layer(prefix + "l" + std::to_string(k),
                                             shortcut ? w + in : w, w, bn);
        weight(prefix + "out/W", shortcut ? w + in : w, out);
        bias(prefix + "out/b", out);
    }
};

}  // namespace

NetworkParams build(const NetworkSpec& spec, uint64_t seed) {
    if (spec.h < 1 || spec.w < 1) throw std::invalid_argument("build: h and w must be >= 1");
    if (spec.use_batchnorm && spec.arch != Arch::fc_dbsde)
        throw std::invalid_argument("build: batch normalization is only supported by arch a");
    if (spec.arch == Arch::fc_dbsde && !spec.use_batchnorm)
        throw std::invalid_argument("build: arch a requires batch normalization");
    if (is_per_step(spec.arch) && spec.n_steps < 2)
        throw std::invalid_argument("build: per-step archs need n_steps >= 2");

    NetworkParams p;
    p.spec = spec;
    Rng rng(seed, StreamTag::param_init);
    Builder b{p, rng};
    const int d = spec.d, h = spec.h, w = spec.w;
    const int in = input_width(spec.arch, d);

    if (!is_fixed_point(spec.arch)) b.constant("Y0", 1, 1, 0.0);
    if (is_per_step(spec.arch)) b.constant("kappa0", 1, d, 0.0);

    switch (spec.arch) {
        case Arch::fc_dbsde:
        case Arch::fc_elu:
        case Arch::fc_residual:
            for (int i = 1; i < spec.n_steps; ++i)
                b.fc_net("step" + std::to_string(i) + "/", in, h, w, d, spec.use_batchnorm);
            break;
        case Arch::fc_merged:
        case Arch::fc_merged_residual:
            b.fc_net("", in, h, w, d, false);
            break;
        case Arch::fc_merged_shortcut:
            b.fc_net("", in, h, w, d, false, true);
            break;
        case Arch::lstm:
        case Arch::augmented_lstm:
        case Arch::residual_lstm:
            for (int k = 0; k < h; ++k)
                b.lstm_layer("lstm" + std::to_string(k), k == 0 ? in : w, w);
            b.weight("out/W", w, d);
            b.bias("out/b", d);
            break;
        case Arch::hybrid_lstm:
            b.lstm_layer("lstm0", in, w);
            for (int k = 1; k < h; ++k) b.fc_layer("l" + std::to_string(k), w, w, false);
            b.weight("out/W", w, d);
            b.bias("out/b", d);
            break;
        case Arch::fp_separated:
            for (int k = 0; k < h; ++k)
                b.fc_layer("u/l" + std::to_string(k), k == 0 ? in : w, w, false);
            b.weight("u/out/W", w, 1);
            b.bias("u/out/b", 1);
            for (int k = 0; k < h; ++k)
                b.fc_layer("v/l" + std::to_string(k), k == 0 ? in : w, w, false);
            b.weight("v/out/W", w, d);
            b.bias("v/out/b", d);
            break;
        case Arch::fp_shared:
            for (int k = 0; k < h; ++k)
                b.fc_layer("l" + std::to_string(k), k == 0 ? in : w, w, false);
            b.weight("out/W", w, d + 1);
            b.bias("out/b", d + 1);
            break;
        case Arch::fp_autodiff:
            for (int k = 0; k < h; ++k)
                b.fc_layer("l" + std::to_string(k), k == 0 ? in : w, w, false);
            b.weight("out/W", w, 1);
            b.bias("out/b", 1);
            break;
    }

    if (p.count() != param_count(spec))
        throw std::logic_error("build: entry sizes disagree with the closed-form count");
    return p;
}

int BoundParams::node(const std::string& name) const {
    int i = params->index(name);
    if (i < 0) throw std::out_of_range("no parameter named " + name);
    return nodes[i];
}

BoundParams bind_params(Tape& tape, NetworkParams& params, bool training) {
    BoundParams bp;
    bp.params = &params;
    bp.training = training;
    bp.nodes.reserve(params.entries.size());
    for (auto& e : params.entries) bp.nodes.push_back(tape.var(e.value, true));
    return bp;
}

namespace {

BatchNormState* bn_state(BoundParams& bp, const std::string& prefix) {
    for (auto& kv : bp.params->bn)
        if (kv.first == prefix) return &kv.second;
    throw std::out_of_range("no batch-norm state for " + prefix);
}

int fc_apply(Tape& t, BoundParams& bp, const std::string& prefix, int x, bool bn, bool use_relu) {
    int z;
    if (bn) {
        z = t.matmul(x, bp.node(prefix + "/W"));
        z = t.batchnorm(z, bp.node(prefix + "/gamma"), bp.node(prefix + "/beta"),
                        bn_state(bp, prefix), bp.training);
    } else {
        z = t.affine(x, bp.node(prefix + "/W"), bp.node(prefix + "/b"));
    }
    return use_relu ? t.relu(z) : t.elu(z);
}

int out_apply(Tape& t, BoundParams& bp, const std::string& prefix, int x) {
    return t.affine(x, bp.node(prefix + "out/W"), bp.node(prefix + "out/b"));
}

// Hidden layers start..h-1 in residual blocks of two (a trailing single-layer
// block when the remaining count is odd), each block output added to its
// input, anchored at the first hidden layer's output.
int residual_chain(Tape& t, BoundParams& bp, const std::string& prefix, int anchor, int start,
                   int h) {
    int cur = anchor;
    int k = start;
    while (k < h) {
        const int span = h - k >= 2 ? 2 : 1;
        for (int s = 0; s < span; ++s, ++k)
            cur = fc_apply(t, bp, prefix + "l" + std::to_string(k), cur, false, false);
        cur = t.add(cur, anchor);
        anchor = cur;
    }
    return cur;
}

int zeros_node(Tape& t, int rows, int cols) { return t.constant(Tensor(rows, cols)); }

// One diagonal-recurrence LSTM step: full input weights, elementwise
// recurrent vectors, standard gate wiring.
int lstm_apply(Tape& t, BoundParams& bp, const std::string& p, int x, int& m, int& c) {
    auto gate = [&](const char* g) {
        int z = t.affine(x, bp.node(p + "/W" + g), bp.node(p + "/b" + g));
        return t.add(z, t.mul(bp.node(p + "/u" + g), m));
    };
    int i = t.sigmoid(gate("i"));
    int f = t.sigmoid(gate("f"));
    int o = t.sigmoid(gate("o"));
    int cd = t.tanh(gate("c"));
    c = t.add(t.mul(f, c), t.mul(i, cd));
    m = t.mul(o, t.tanh(c));
    return m;
}

void warn_unscaled(Tape& t, std::initializer_list<int> nodes) {
    static bool warned = false;
    if (warned) return;
    for (int id : nodes) {
        if (id < 0) continue;
        for (double v : t.val(id).data)
            if (std::abs(v) > 10.0) {
                std::fprintf(stderr,
                             "warning: network input magnitude %.3g outside [-10,10]; "
                             "inputs are expected to be scaled\n",
                             v);
                warned = true;
                return;
            }
    }
}

int require(int node, const char* what) {
    if (node < 0) throw std::invalid_argument(std::string("forward_kappa: missing input ") + what);
    return node;
}

}  // namespace

int forward_kappa(Tape& tape, BoundParams& bp, int step_index, const KappaInputs& in,
                  LstmState* state) {
    const NetworkSpec& spec = bp.params->spec;
    const int h = spec.h;
    warn_unscaled(tape, {in.t, in.x, in.y, in.g});

    if (is_per_step(spec.arch)) {
        if (step_index < 1 || step_index >= spec.n_steps)
            throw std::invalid_argument("forward_kappa: per-step index must be in [1, N-1]");
        const std::string p = "step" + std::to_string(step_index) + "/";
        const bool bn = spec.use_batchnorm;
        int x = require(in.x, "x");
        if (spec.arch == Arch::fc_residual) {
            x = tape.concat({x, require(in.g, "g")});
            int anchor = fc_apply(tape, bp, p + "l0", x, false, false);
            return out_apply(tape, bp, p, residual_chain(tape, bp, p, anchor, 1, h));
        }
        int cur = x;
        for (int k = 0; k < h; ++k)
            cur = fc_apply(tape, bp, p + "l" + std::to_string(k), cur, bn,
                           spec.arch == Arch::fc_dbsde);
        return out_apply(tape, bp, p, cur);
    }

    if (is_recurrent(spec.arch)) {
        if (state == nullptr)
            throw std::invalid_argument("forward_kappa: recurrent archs need a carried state");
        int input = spec.arch == Arch::lstm
                        ? tape.concat({require(in.t, "t"), require(in.x, "x")})
                        : tape.concat({require(in.t, "t"), require(in.x, "x"),
                                       require(in.y, "y"), require(in.g, "g")});
        const int rows = tape.val(input).rows;
        const int n_lstm = spec.arch == Arch::hybrid_lstm ? 1 : h;
        if (state->m.empty()) {
            state->m.assign(n_lstm, -1);
            state->c.assign(n_lstm, -1);
            for (int k = 0; k < n_lstm; ++k) {
                state->m[k] = zeros_node(tape, rows, spec.w);
                state->c[k] = zeros_node(tape, rows, spec.w);
            }
        }
        int cur = input;
        int anchor = -1;
        for (int k = 0; k < n_lstm; ++k) {
            cur = lstm_apply(tape, bp, "lstm" + std::to_string(k), cur, state->m[k],
                             state->c[k]);
            if (spec.arch == Arch::residual_lstm) {
                if (k == 0) {
                    anchor = cur;
                } else if (k % 2 == 0 || k == n_lstm - 1) {
                    cur = tape.add(cur, anchor);
                    anchor = cur;
                }
            }
        }
        if (spec.arch == Arch::hybrid_lstm) cur = residual_chain(tape, bp, "", cur, 1, h);
        return out_apply(tape, bp, "", cur);
    }

    // merged nets d, e, f
    int input = tape.concat(
        {require(in.t, "t"), require(in.x, "x"), require(in.y, "y"), require(in.g, "g")});
    if (spec.arch == Arch::fc_merged_shortcut) {
        int cur = fc_apply(tape, bp, "l0", input, false, false);
        for (int k = 1; k < h; ++k)
            cur = fc_apply(tape, bp, "l" + std::to_string(k), tape.concat({cur, input}), false,
                           false);
        return out_apply(tape, bp, "", tape.concat({cur, input}));
    }
    int anchor = fc_apply(tape, bp, "l0", input, false, false);
    if (spec.arch == Arch::fc_merged_residual)
        return out_apply(tape, bp, "", residual_chain(tape, bp, "", anchor, 1, h));
    int cur = anchor;
    for (int k = 1; k < h; ++k) cur = fc_apply(tape, bp, "l" + std::to_string(k), cur, false, false);
    return out_apply(tape, bp, "", cur);
}

Tensor InputScaler::scale_x(const Tensor& x) const {
    Tensor out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        for (int j = 0; j < x.cols; ++j) out.at(r, j) = (x.at(r, j) - X_mean[j]) / X_std[j];
    return out;
}

int InputScaler::scale_x_node(Tape& tape, int x_raw) const {
    const int d = static_cast<int>(X_mean.size());
    Tensor mean(1, d), inv(1, d);
    for (int j = 0; j < d; ++j) {
        mean.at(0, j) = X_mean[j];
        inv.at(0, j) = 1.0 / X_std[j];
    }
    return tape.mul(tape.sub(x_raw, tape.constant(mean)), tape.constant(inv));
}

InputScaler fit_scaler(const PdeProblem& problem, int n_steps, int n_paths, uint64_t seed) {
    if (n_steps < 2) throw std::invalid_argument("fit_scaler: need n_steps >= 2");
    const int d = problem.d;
    std::vector<double> times(n_steps + 1);
    for (int i = 0; i <= n_steps; ++i) times[i] = problem.T * i / n_steps;

    InputScaler sc;
    sc.T = problem.T;
    sc.dt = problem.T / n_steps;
    sc.X_mean.assign(d, 0.0);
    sc.X_std.assign(d, 0.0);

    std::vector<double> sum(d, 0.0), sumsq(d, 0.0);
    double g_sum = 0.0, gT_sum = 0.0;
    Rng rng(seed, StreamTag::scaler_paths);
    const int chunk = 100;
    for (int done = 0; done < n_paths; done += chunk) {
        const int b = std::min(chunk, n_paths - done);
        PathBatch pb = sample_grid_paths(problem, b, times, rng);
        for (int i = 0; i <= n_steps; ++i) {
            for (int r = 0; r < b; ++r) {
                const double* x = pb.x[i].row(r);
                for (int j = 0; j < d; ++j) {
                    sum[j] += x[j];
                    sumsq[j] += x[j] * x[j];
                }
                const double g = problem.g(x);
                g_sum += g;
                if (i == n_steps) gT_sum += g;
            }
        }
    }
    const double n_states = static_cast<double>(n_paths) * (n_steps + 1);
    for (int j = 0; j < d; ++j) {
        sc.X_mean[j] = sum[j] / n_states;
        double var = sumsq[j] / n_states - sc.X_mean[j] * sc.X_mean[j];
        sc.X_std[j] = std::max(std::sqrt(std::max(var, 0.0)), kStdFloor);
    }
    sc.Y_mean = g_sum / n_states;
    if (sc.Y_mean == 0.0) {
        sc.y_degenerate = true;
        std::fprintf(stderr, "warning: Y_mean is exactly zero; scaling Y and g by 1\n");
    }
    sc.y0_init = gT_sum / n_paths;
    return sc;
}

UvNodes forward_uv(Tape& tape, BoundParams& bp, const InputScaler& scaler, const Tensor& t,
                   int x_raw, bool want_v) {
    const NetworkSpec& spec = bp.params->spec;
    if (!is_fixed_point(spec.arch))
        throw std::invalid_argument("forward_uv: arch is not a fixed-point network");
    const int rows = tape.val(x_raw).rows;
    if (!(t.rows == rows || t.is_scalar()) || t.cols != 1)
        throw std::invalid_argument("forward_uv: t must be (R,1) or scalar");

    Tensor ts(rows, 1);
    for (int r = 0; r < rows; ++r)
        ts.at(r, 0) = scaler.scale_t(t.is_scalar() ? t.data[0] : t.at(r, 0));
    int input = tape.concat({tape.constant(ts), scaler.scale_x_node(tape, x_raw)});
    warn_unscaled(tape, {input});

    auto trunk = [&](const std::string& prefix) {
        int cur = input;
        for (int k = 0; k < spec.h; ++k) {
            cur = tape.affine(cur, bp.node(prefix + "l" + std::to_string(k) + "/W"),
                              bp.node(prefix + "l" + std::to_string(k) + "/b"));
            cur = tape.tanh(cur);
        }
        return cur;
    };

    UvNodes out;
    switch (spec.arch) {
        case Arch::fp_separated:
            out.u = out_apply(tape, bp, "u/", trunk("u/"));
            out.v = out_apply(tape, bp, "v/", trunk("v/"));
            break;
        case Arch::fp_shared: {
            int head = out_apply(tape, bp, "", trunk(""));
            out.u = tape.slice_cols(head, 0, 1);
            out.v = tape.slice_cols(head, 1, spec.d + 1);
            break;
        }
        case Arch::fp_autodiff:
            out.u = out_apply(tape, bp, "", trunk(""));
            if (want_v) out.v = tape.grad_wrt_input(out.u, x_raw);
            break;
        default: break;
    }
    return out;
}

void save_params(const NetworkParams& params, const std::string& base_path) {
    nlohmann::json meta;
    meta["version"] = 1;
    meta["arch"] = to_string(params.spec.arch);
    meta["d"] = params.spec.d;
    meta["h"] = params.spec.h;
    meta["w"] = params.spec.w;
    meta["n_steps"] = params.spec.n_steps;
    meta["use_batchnorm"] = params.spec.use_batchnorm;
    meta["entries"] = nlohmann::json::array();
    long long offset = 0;
    for (const auto& e : params.entries) {
        meta["entries"].push_back({{"name", e.name},
                                   {"rows", e.value.rows},
                                   {"cols", e.value.cols},
                                   {"offset", offset}});
        offset += static_cast<long long>(e.value.size());
    }
    meta["bn"] = nlohmann::json::array();
    for (const auto& kv : params.bn) {
        meta["bn"].push_back({{"name", kv.first},
                              {"momentum", kv.second.momentum},
                              {"epsilon", kv.second.epsilon},
                              {"initialized", kv.second.initialized},
                              {"moving_mean", kv.second.moving_mean},
                              {"moving_var", kv.second.moving_var}});
    }

    std::ofstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_params: cannot open " + base_path + ".bin");
    for (const auto& e : params.entries)
        bin.write(reinterpret_cast<const char*>(e.value.data.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("save_params: write failed");
    std::ofstream js(base_path + ".json");
    js << meta.dump(2) << "\n";
    if (!js) throw std::runtime_error("save_params: sidecar write failed");
}

NetworkParams load_params(const std::string& base_path) {
    std::ifstream js(base_path + ".json");
    if (!js) throw std::runtime_error("load_params: cannot open " + base_path + ".json");
    nlohmann::json meta = nlohmann::json::parse(js);
    if (meta.at("version").get<int>() != 1)
        throw std::runtime_error("load_params: unsupported checkpoint version");

    NetworkSpec spec;
    spec.arch = arch_from_string(meta.at("arch").get<std::string>());
    spec.d = meta.at("d").get<int>();
    spec.h = meta.at("h").get<int>();
    spec.w = meta.at("w").get<int>();
    spec.n_steps = meta.at("n_steps").get<int>();
    spec.use_batchnorm = meta.at("use_batchnorm").get<bool>();

    NetworkParams p;
    p.spec = spec;
    std::ifstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_params: cannot open " + base_path + ".bin");
    for (const auto& ent : meta.at("entries")) {
        Tensor t(ent.at("rows").get<int>(), ent.at("cols").get<int>());
        bin.seekg(ent.at("offset").get<long long>() * static_cast<long long>(sizeof(double)));
        bin.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!bin) throw std::runtime_error("load_params: truncated checkpoint");
        p.entries.push_back({ent.at("name").get<std::string>(), std::move(t)});
    }
    for (const auto& ent : meta.at("bn")) {
        BatchNormState st;
        st.momentum = ent.at("momentum").get<double>();
        st.epsilon = ent.at("epsilon").get<double>();
        st.initialized = ent.at("initialized").get<bool>();
        st.moving_mean = ent.at("moving_mean").get<std::vector<double>>();
        st.moving_var = ent.at("moving_var").get<std::vector<double>>();
        p.bn.push_back({ent.at("name").get<std::string>(), std::move(st)});
    }
    if (p.count() != param_count(spec))
        throw std::runtime_error("load_params: parameter count mismatch");
    return p;
}

}  // namespace semilin
