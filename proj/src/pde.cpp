#include "semilin/pde.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "semilin/rng.hpp"
#include "semilin/threading.hpp"

namespace semilin {

namespace {

double sum(const double* x, int d) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += x[i];
    return s;
}

double norm2(const double* x, int d) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += x[i] * x[i];
    return s;
}

// X0 pattern (1.0, 0.5, 1.0, 0.5, ...).
std::vector<double> alternating(int d) {
    std::vector<double> x(d);
    for (int i = 0; i < d; ++i) x[i] = i % 2 == 0 ? 1.0 : 0.5;
    return x;
}

}  // namespace

ProblemId problem_from_string(const std::string& name) {
    if (name == "bs_default") return ProblemId::bs_default;
    if (name == "bs_barenblatt") return ProblemId::bs_barenblatt;
    if (name == "hjb") return ProblemId::hjb;
    if (name == "osc_square") return ProblemId::osc_square;
    if (name == "nonlip") return ProblemId::nonlip;
    if (name == "cir_osc") return ProblemId::cir_osc;
    if (name == "osc_inverse") return ProblemId::osc_inverse;
    throw std::runtime_error("unknown problem id: " + name);
}

std::string to_string(ProblemId id) {
    switch (id) {
        case ProblemId::bs_default: return "bs_default";
        case ProblemId::bs_barenblatt: return "bs_barenblatt";
        case ProblemId::hjb: return "hjb";
        case ProblemId::osc_square: return "osc_square";
        case ProblemId::nonlip: return "nonlip";
        case ProblemId::cir_osc: return "cir_osc";
        case ProblemId::osc_inverse: return "osc_inverse";
    }
    return "?";
}

PdeProblem make_problem(ProblemId id, int d, const std::map<std::string, double>& overrides) {
    if (d < 1) throw std::runtime_error("make_problem: d must be >= 1");
    PdeProblem pb;
    pb.id = id;
    pb.d = d;
    pb.T = 1.0;
    switch (id) {
        case ProblemId::bs_default:
            pb.params = {{"mu_bar", 0.02}, {"sigma_bar", 0.2}, {"delta", 2.0 / 3.0},
                         {"R", 0.02},      {"gamma_h", 0.2},   {"gamma_l", 0.02},
                         {"v_h", 50.0},    {"v_l", 70.0}};
            pb.X0.assign(d, 100.0);
            pb.step_mode = StepMode::exact_gbm;
            break;
        case ProblemId::bs_barenblatt:
            pb.params = {{"sigma_bar", 0.4}, {"r", 0.05}};
            pb.X0 = alternating(d);
            pb.step_mode = StepMode::exact_gbm;
            pb.has_exact = true;
            break;
        case ProblemId::hjb:
            pb.params = {{"lambda", 1.0}};
            pb.X0.assign(d, 0.0);
            pb.step_mode = StepMode::const_coeff;
            pb.has_baseline = true;
            break;
        case ProblemId::osc_square:
            pb.params = {{"mu0", 0.2}, {"sigma0", 1.0}, {"a", 0.5}, {"r", 0.1}};
            pb.X0 = alternating(d);
            pb.step_mode = StepMode::const_coeff;
            pb.has_exact = true;
            break;
        case ProblemId::nonlip:
            pb.params = {{"alpha", 0.5}};
            pb.X0.assign(d, 0.0);
            pb.step_mode = StepMode::const_coeff;
            pb.has_baseline = true;
            break;
        case ProblemId::cir_osc:
            pb.params = {{"a", 0.1},     {"alpha", 0.2}, {"k_hat", 0.1},
                         {"m_hat", 0.3}, {"sigma_hat", 0.2}};
            pb.X0.assign(d, 0.3);
            pb.step_mode = StepMode::euler;
            pb.clamp_state = true;
            pb.has_exact = true;
            break;
        case ProblemId::osc_inverse:
            pb.params = {{"mu0", 0.2}, {"sigma0", 1.0}, {"a", 0.5}, {"r", 0.1}};
            pb.X0 = alternating(d);
            pb.step_mode = StepMode::const_coeff;
            pb.has_exact = true;
            break;
    }
    for (const auto& [k, v] : overrides) {
        if (k == "T") {
            pb.T = v;
        } else if (pb.params.count(k)) {
            pb.params[k] = v;
        } else {
            throw std::runtime_error("make_problem: unknown parameter '" + k + "' for " +
                                     to_string(id));
        }
    }
    if (id == ProblemId::cir_osc &&
        !(2.0 * pb.p("k_hat") * pb.p("m_hat") > pb.p("sigma_hat") * pb.p("sigma_hat")))
        throw std::runtime_error("cir_osc requires 2*k_hat*m_hat > sigma_hat^2");
    return pb;
}

PdeProblem make_problem(const std::string& id, int d,
                        const std::map<std::string, double>& overrides) {
    return make_problem(problem_from_string(id), d, overrides);
}

void PdeProblem::mu_vec(double, const double* x, double* out) const {
    switch (id) {
        case ProblemId::bs_default:
            for (int i = 0; i < d; ++i) out[i] = p("mu_bar") * x[i];
            break;
        case ProblemId::bs_barenblatt:
        case ProblemId::hjb:
        case ProblemId::nonlip:
            std::fill(out, out + d, 0.0);
            break;
        case ProblemId::osc_square:
        case ProblemId::osc_inverse:
            std::fill(out, out + d, p("mu0") / d);
            break;
        case ProblemId::cir_osc:
            for (int i = 0; i < d; ++i) out[i] = p("k_hat") * (p("m_hat") - x[i]);
            break;
    }
}

void PdeProblem::sigma_diag(double, const double* x, double* out) const {
    switch (id) {
        case ProblemId::bs_default:
        case ProblemId::bs_barenblatt:
            for (int i = 0; i < d; ++i) out[i] = p("sigma_bar") * x[i];
            break;
        case ProblemId::hjb:
            std::fill(out, out + d, std::sqrt(2.0));
            break;
        case ProblemId::osc_square:
            std::fill(out, out + d, p("sigma0") / std::sqrt(static_cast<double>(d)));
            break;
        case ProblemId::nonlip:
            std::fill(out, out + d, 1.0);
            break;
        case ProblemId::cir_osc:
            for (int i = 0; i < d; ++i) out[i] = p("sigma_hat") * std::sqrt(std::max(x[i], 0.0));
            break;
        case ProblemId::osc_inverse:
            std::fill(out, out + d, p("sigma0"));
            break;
    }
}

double PdeProblem::g(const double* x) const {
    switch (id) {
        case ProblemId::bs_default:
            return *std::min_element(x, x + d);
        case ProblemId::bs_barenblatt:
            return norm2(x, d);
        case ProblemId::hjb:
            return std::log(0.5 * (1.0 + norm2(x, d)));
        case ProblemId::osc_square:
        case ProblemId::cir_osc:
            return std::cos(sum(x, d));
        case ProblemId::nonlip: {
            double a = p("alpha"), s = 0;
            for (int i = 0; i < d; ++i) s += std::pow(std::clamp(x[i], 0.0, 1.0), a);
            return s;
        }
        case ProblemId::osc_inverse: {
            double s = sum(x, d);
            return 2.0 * s + std::cos(s);
        }
    }
    return 0;
}

void PdeProblem::dg(const double* x, double* out) const {
    switch (id) {
        case ProblemId::bs_default: {
            std::fill(out, out + d, 0.0);
            out[std::min_element(x, x + d) - x] = 1.0;
            break;
        }
        case ProblemId::bs_barenblatt:
            for (int i = 0; i < d; ++i) out[i] = 2.0 * x[i];
            break;
        case ProblemId::hjb: {
            double den = 1.0 + norm2(x, d);
            for (int i = 0; i < d; ++i) out[i] = 2.0 * x[i] / den;
            break;
        }
        case ProblemId::osc_square:
        case ProblemId::cir_osc: {
            double s = -std::sin(sum(x, d));
            std::fill(out, out + d, s);
            break;
        }
        case ProblemId::nonlip: {
            double a = p("alpha");
            for (int i = 0; i < d; ++i)
                out[i] = (x[i] > 0.0 && x[i] < 1.0) ? a * std::pow(x[i], a - 1.0) : 0.0;
            break;
        }
        case ProblemId::osc_inverse: {
            double v = 2.0 - std::sin(sum(x, d));
            std::fill(out, out + d, v);
            break;
        }
    }
}

double PdeProblem::exact_u(double t, const double* x) const {
    switch (id) {
        case ProblemId::bs_barenblatt:
            return std::exp((p("r") + p("sigma_bar") * p("sigma_bar")) * (T - t)) * norm2(x, d);
        case ProblemId::osc_square:
            return std::cos(sum(x, d)) * std::exp(p("a") * (T - t));
        case ProblemId::cir_osc:
            return std::cos(sum(x, d)) * std::exp(-p("alpha") * (T - t));
        case ProblemId::osc_inverse: {
            double s = sum(x, d);
            return (2.0 * s + std::cos(s)) * std::exp(p("a") * (T - t));
        }
        default:
            throw std::runtime_error("exact_u not available for " + to_string(id));
    }
}

void PdeProblem::exact_Du(double t, const double* x, double* out) const {
    switch (id) {
        case ProblemId::bs_barenblatt: {
            double e = std::exp((p("r") + p("sigma_bar") * p("sigma_bar")) * (T - t));
            for (int i = 0; i < d; ++i) out[i] = 2.0 * e * x[i];
            break;
        }
        case ProblemId::osc_square: {
            double v = -std::sin(sum(x, d)) * std::exp(p("a") * (T - t));
            std::fill(out, out + d, v);
            break;
        }
        case ProblemId::cir_osc: {
            double v = -std::sin(sum(x, d)) * std::exp(-p("alpha") * (T - t));
            std::fill(out, out + d, v);
            break;
        }
        case ProblemId::osc_inverse: {
            double v = (2.0 - std::sin(sum(x, d))) * std::exp(p("a") * (T - t));
            std::fill(out, out + d, v);
            break;
        }
        default:
            throw std::runtime_error("exact_Du not available for " + to_string(id));
    }
}

double PdeProblem::phi(double t, const double* x) const {
    switch (id) {
        case ProblemId::osc_square: {
            double S = sum(x, d);
            double e = std::exp(p("a") * (T - t));
            double s0 = p("sigma0");
            double q = std::cos(S) * std::sin(S) * e * e;
            return std::cos(S) * (p("a") + 0.5 * s0 * s0) * e + std::sin(S) * p("mu0") * e -
                   p("r") * q * q;
        }
        case ProblemId::cir_osc: {
            double S = sum(x, d);
            double e = std::exp(-p("alpha") * (T - t));
            double sh = p("sigma_hat");
            double drift = 0, root = 0;
            for (int i = 0; i < d; ++i) {
                drift += p("k_hat") * (p("m_hat") - x[i]);
                root += std::sqrt(std::max(x[i], 0.0));
            }
            return std::cos(S) * (-p("alpha") + 0.5 * sh * sh * S) * e + std::sin(S) * e * drift +
                   p("a") * std::cos(S) * std::sin(S) * e * e * sh * root;
        }
        case ProblemId::osc_inverse: {
            double S = sum(x, d);
            double e = std::exp(p("a") * (T - t));
            double s0 = p("sigma0");
            return 2.0 * p("a") * S * e + std::cos(S) * (p("a") + 0.5 * d * s0 * s0) * e -
                   p("mu0") * (2.0 - std::sin(S)) * e -
                   p("r") * (2.0 * S + std::cos(S)) / (s0 * (2.0 - std::sin(S)));
        }
        default:
            return 0.0;
    }
}

int PdeProblem::f_tilde_node(Tape& tape, const Tensor& t, const Tensor& x, int y, int du) const {
    const int R = tape.val(y).rows;
    if (x.rows != R || x.cols != d)
        throw std::runtime_error("f_tilde_node: x must be batch x d");
    if (t.cols != 1 || (t.rows != 1 && t.rows != R))
        throw std::runtime_error("f_tilde_node: t must be (R,1) or (1,1)");
    auto t_at = [&](int r) { return t.rows == 1 ? t.data[0] : t.data[r]; };
    auto phi_const = [&] {
        Tensor c(R, 1);
        for (int r = 0; r < R; ++r) c.data[r] = phi(t_at(r), x.row(r));
        return tape.constant(std::move(c));
    };
    switch (id) {
        case ProblemId::bs_default: {
            double gh = p("gamma_h"), gl = p("gamma_l");
            double slope = (gh - gl) / (p("v_h") - p("v_l"));
            int expr = tape.add(tape.mul(tape.sub(y, tape.scalar(p("v_h"))), tape.scalar(slope)),
                                tape.scalar(gh));
            int q = tape.clamp(expr, gl, gh);
            return tape.sub(tape.mul(tape.mul(q, y), tape.scalar(-(1.0 - p("delta")))),
                            tape.mul(y, tape.scalar(p("R"))));
        }
        case ProblemId::bs_barenblatt: {
            int xdu = tape.reduce_sum(tape.mul(tape.constant(x), du), Axis::cols);
            return tape.mul(tape.scalar(-p("r")), tape.sub(y, xdu));
        }
        case ProblemId::hjb:
            return tape.mul(tape.scalar(-p("lambda")),
                            tape.reduce_sum(tape.square(du), Axis::cols));
        case ProblemId::osc_square: {
            // Clamp bounds depend only on t, so they enter as constants.
            Tensor bound(t.rows, 1);
            for (int r = 0; r < t.rows; ++r)
                bound.data[r] = std::exp(2.0 * p("a") * (T - t_at(r)));
            Tensor nbound = bound;
            for (auto& v : nbound.data) v = -v;
            int q = tape.div(tape.mul(y, tape.reduce_sum(du, Axis::cols)),
                             tape.scalar(static_cast<double>(d)));
            int clamped =
                tape.clamp(q, tape.constant(std::move(nbound)), tape.constant(std::move(bound)));
            return tape.add(phi_const(), tape.mul(tape.scalar(p("r")), tape.square(clamped)));
        }
        case ProblemId::nonlip:
            // +0.5|Du|^2: the sign that pairs with the log-expectation reference
            // solution u = log E[exp g].
            return tape.mul(tape.scalar(0.5), tape.reduce_sum(tape.square(du), Axis::cols));
        case ProblemId::cir_osc: {
            Tensor rootx(R, d);
            for (int r = 0; r < R; ++r)
                for (int i = 0; i < d; ++i) rootx.at(r, i) = std::sqrt(std::max(x.at(r, i), 0.0));
            int sdz = tape.mul(
                tape.reduce_sum(tape.mul(tape.constant(std::move(rootx)), du), Axis::cols),
                tape.scalar(p("sigma_hat")));
            return tape.add(phi_const(), tape.mul(tape.scalar(p("a")), tape.mul(y, sdz)));
        }
        case ProblemId::osc_inverse: {
            int denom = tape.signed_floor(
                tape.mul(tape.reduce_sum(du, Axis::cols), tape.scalar(p("sigma0"))), 1e-8);
            return tape.add(phi_const(),
                            tape.div(tape.mul(y, tape.scalar(p("r") * d)), denom));
        }
    }
    throw std::runtime_error("f_tilde_node: unreachable");
}

double PdeProblem::f_tilde(double t, const double* x, double y, const double* du) const {
    Tape tape;
    Tensor xt(1, d, std::vector<double>(x, x + d));
    int yn = tape.constant(Tensor::scalar(y));
    int dn = tape.constant(Tensor(1, d, std::vector<double>(du, du + d)));
    int f = f_tilde_node(tape, Tensor::scalar(t), xt, yn, dn);
    return tape.val(f).data[0];
}

namespace {

// Accumulator for scaled exponential sums: tracks max exponent m and the sums
// A = sum e^{x-m}, B = sum e^{2(x-m)}, and per-component C = sum w e^{x-m},
// D = sum w^2 e^{2(x-m)}, E = sum w e^{2(x-m)}. Merging two accumulators
// rescales to the larger max, so results never overflow and the final ratios
// are independent of the grouping used to build them.
struct ExpAcc {
    double m = -1e308;
    double A = 0, B = 0;
    std::vector<double> C, D, E;

    explicit ExpAcc(int d = 0) : C(d, 0.0), D(d, 0.0), E(d, 0.0) {}

    void add(double x, const double* w, int d) {
        if (x > m) rescale(x);
        double e1 = std::exp(x - m), e2 = e1 * e1;
        A += e1;
        B += e2;
        for (int i = 0; i < d; ++i) {
            C[i] += w[i] * e1;
            D[i] += w[i] * w[i] * e2;
            E[i] += w[i] * e2;
        }
    }

    void rescale(double new_m) {
        double s1 = std::exp(m - new_m), s2 = s1 * s1;
        A *= s1;
        B *= s2;
        for (size_t i = 0; i < C.size(); ++i) {
            C[i] *= s1;
            D[i] *= s2;
            E[i] *= s2;
        }
        m = new_m;
    }

    void merge(const ExpAcc& o) {
        if (o.A == 0) return;
        double nm = std::max(m, o.m);
        if (nm > m) rescale(nm);
        double s1 = std::exp(o.m - nm), s2 = s1 * s1;
        A += o.A * s1;
        B += o.B * s2;
        for (size_t i = 0; i < C.size(); ++i) {
            C[i] += o.C[i] * s1;
            D[i] += o.D[i] * s2;
            E[i] += o.E[i] * s2;
        }
    }
};

constexpr long long kBaselineBlock = 4096;

}  // namespace

BaselineResult mc_baseline_at(const PdeProblem& problem, double t, const double* x,
                              long long n_samples, uint64_t seed) {
    if (!problem.has_baseline)
        throw std::runtime_error("no Monte-Carlo baseline formula for " + to_string(problem.id));
    const int d = problem.d;
    const double h = problem.T - t;
    const bool is_hjb = problem.id == ProblemId::hjb;
    const double lambda = is_hjb ? problem.p("lambda") : 0.0;
    const double scale = is_hjb ? std::sqrt(2.0 * h) : std::sqrt(h);

    long long n_blocks = (n_samples + kBaselineBlock - 1) / kBaselineBlock;
    std::vector<ExpAcc> partial(n_blocks, ExpAcc(d));
    ThreadPool::instance().parallel_for(n_blocks, 1, [&](size_t b0, size_t b1) {
        std::vector<double> xi(d), w(d);
        for (size_t b = b0; b < b1; ++b) {
            ExpAcc& acc = partial[b];
            long long lo = static_cast<long long>(b) * kBaselineBlock;
            long long hi = std::min(lo + kBaselineBlock, n_samples);
            for (long long i = lo; i < hi; ++i) {
                Rng rng(seed, StreamTag::baseline, static_cast<uint64_t>(i));
                for (int j = 0; j < d; ++j) xi[j] = x[j] + scale * rng.normal();
                double gv = problem.g(xi.data());
                problem.dg(xi.data(), w.data());
                acc.add(is_hjb ? -lambda * gv : gv, w.data(), d);
            }
        }
    });
    ExpAcc total(d);
    for (const auto& p : partial) total.merge(p);

    BaselineResult res;
    res.n_samples = n_samples;
    res.seed = seed;
    double n = static_cast<double>(n_samples);
    double log_mean = total.m + std::log(total.A / n);
    res.Y0 = is_hjb ? -log_mean / lambda : log_mean;
    double rel_var = std::max(0.0, n * total.B / (total.A * total.A) - 1.0);
    res.Y0_se = std::sqrt(rel_var / n) / (is_hjb ? lambda : 1.0);
    res.Z0.resize(d);
    res.Z0_se.resize(d);
    for (int j = 0; j < d; ++j) {
        double r = total.C[j] / total.A;
        res.Z0[j] = r;
        double v = std::max(0.0, total.D[j] - 2.0 * r * total.E[j] + r * r * total.B);
        res.Z0_se[j] = std::sqrt(v) / total.A;
    }
    return res;
}

BaselineResult mc_baseline(const PdeProblem& problem, long long n_samples, uint64_t seed) {
    return mc_baseline_at(problem, 0.0, problem.X0.data(), n_samples, seed);
}

BaselineResult mc_baseline_cached(const PdeProblem& problem, long long n_samples, uint64_t seed,
                                  const std::string& cache_path) {
    nlohmann::json params;
    for (const auto& [k, v] : problem.params) params[k] = v;
    params["T"] = problem.T;
    nlohmann::json cache = nlohmann::json::array();
    {
        std::ifstream in(cache_path);
        if (in) {
            try {
                in >> cache;
            } catch (...) {
                cache = nlohmann::json::array();
            }
        }
    }
    for (const auto& rec : cache) {
        if (rec.value("problem", "") == to_string(problem.id) && rec.value("d", -1) == problem.d &&
            rec.value("n_samples", -1LL) == n_samples && rec.value("seed", 0ULL) == seed &&
            rec.value("params", nlohmann::json()) == params) {
            BaselineResult res;
            res.Y0 = rec["Y0"];
            res.Y0_se = rec["Y0_se"];
            res.Z0 = rec["Z0"].get<std::vector<double>>();
            res.Z0_se = rec["Z0_se"].get<std::vector<double>>();
            res.n_samples = n_samples;
            res.seed = seed;
            return res;
        }
    }
    BaselineResult res = mc_baseline(problem, n_samples, seed);
    nlohmann::json rec;
    rec["problem"] = to_string(problem.id);
    rec["d"] = problem.d;
    rec["params"] = params;
    rec["n_samples"] = n_samples;
    rec["seed"] = seed;
    rec["Y0"] = res.Y0;
    rec["Y0_se"] = res.Y0_se;
    rec["Z0"] = res.Z0;
    rec["Z0_se"] = res.Z0_se;
    cache.push_back(rec);
    std::ofstream out(cache_path);
    out << cache.dump(1) << "\n";
    return res;
}

ReferencePath reference_trajectory(const PdeProblem& problem, const Tensor& X_path,
                                   const std::vector<double>& times, long long n_inner,
                                   uint64_t seed) {
    const int n_pts = X_path.rows;
    if (static_cast<int>(times.size()) != n_pts)
        throw std::runtime_error("reference_trajectory: times/path length mismatch");
    ReferencePath ref;
    ref.Y.resize(n_pts);
    ref.Z = Tensor(n_pts, problem.d);
    if (problem.has_exact) {
        for (int i = 0; i < n_pts; ++i) {
            ref.Y[i] = problem.exact_u(times[i], X_path.row(i));
            problem.exact_Du(times[i], X_path.row(i), ref.Z.row(i));
        }
        return ref;
    }
    if (!problem.has_baseline)
        throw std::runtime_error("no reference trajectory available for " + to_string(problem.id));
    for (int i = 0; i < n_pts; ++i) {
        // Independent sub-seed per grid point.
        uint64_t sub = seed ^ (0x517CC1B727220A95ULL * static_cast<uint64_t>(i + 1));
        BaselineResult b = mc_baseline_at(problem, times[i], X_path.row(i), n_inner, sub);
        ref.Y[i] = b.Y0;
        for (int j = 0; j < problem.d; ++j) ref.Z.at(i, j) = b.Z0[j];
    }
    return ref;
}

}  // namespace semilin
