#include "semilin/fixedpoint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace semilin {

namespace {

// Reusable buffers for one antithetic pair (endpoints and Malliavin weight).
struct PairScratch {
    std::vector<double> mu, sig, xe, xh, w, w_first;

    explicit PairScratch(int d) : mu(d), sig(d), xe(d), xh(d), w(d), w_first(d) {}
};

// Replays one pair from (t, x) out of frozen unit normals and fills
// s.xe / s.xh (endpoints) and, when want_weight, s.w. Returns the evaluation
// time min(t + tau, T). Constant-coefficient dynamics take an allocation-free
// single step that matches pair_from_draws + malliavin_weight bit for bit;
// the other modes go through pair_from_draws.
double replay_pair(const PdeProblem& problem, double t, const std::vector<double>& x, double dt,
                   double tau, const Tensor& unit_normals, bool want_weight, PairScratch& s) {
    const int d = problem.d;
    const double T = problem.T;
    if (problem.step_mode == StepMode::const_coeff) {
        const bool crossed = tau >= T - t;
        const double t_end = crossed ? T : t + tau;
        const double span = t_end - t;
        const double root = std::sqrt(span);
        problem.mu_vec(t, x.data(), s.mu.data());
        problem.sigma_diag(t, x.data(), s.sig.data());
        const double denom = std::min(tau, std::min(T - t, tau));
        for (int j = 0; j < d; ++j) {
            const double dw = root * unit_normals.at(0, j);
            const double vf = x[j] + s.mu[j] * span + s.sig[j] * dw;
            const double vh = x[j] + s.mu[j] * span - s.sig[j] * dw;
            s.xe[j] = problem.clamp_state ? std::max(vf, 0.0) : vf;
            s.xh[j] = problem.clamp_state ? std::max(vh, 0.0) : vh;
            if (want_weight) {
                if (s.sig[j] == 0.0)
                    throw std::invalid_argument("malliavin_weight: singular sigma");
                s.w[j] = dw / (s.sig[j] * denom);
            }
        }
        return t_end;
    }

    PathPair pp = pair_from_draws(problem, x, t, T, dt, tau, unit_normals);
    const int last = static_cast<int>(pp.times.size()) - 1;
    std::copy(pp.x_path.row(last), pp.x_path.row(last) + d, s.xe.begin());
    std::copy(pp.x_hat_path.row(last), pp.x_hat_path.row(last) + d, s.xh.begin());
    if (want_weight) {
        problem.sigma_diag(t, x.data(), s.sig.data());
        std::copy(pp.w_increments.row(0), pp.w_increments.row(0) + d, s.w_first.begin());
        const double dt_w = problem.step_mode == StepMode::euler ? dt : tau;
        s.w = malliavin_weight(s.sig, s.w_first, tau, T - t, dt_w);
    }
    return pp.times.back();
}

// (u, v) from a fixed-point network at raw (t, x) rows. v is always computed:
// even the u-only loss needs it as the driver's gradient argument.
UvBatchFn network_uv(NetworkParams& params, const InputScaler& scaler) {
    if (!is_fixed_point(params.spec.arch))
        throw std::invalid_argument("network_uv: needs a fixed-point arch (A, B or C)");
    return [&params, &scaler](const std::vector<double>& t, const Tensor& x,
                              std::vector<double>& u, Tensor& v) {
        const int rows = x.rows;
        Tensor tcol(rows, 1);
        for (int r = 0; r < rows; ++r) tcol.at(r, 0) = t[r];
        Tape tape;
        BoundParams bp = bind_params(tape, params, false);
        const bool autodiff = params.spec.arch == Arch::fp_autodiff;
        int xn = tape.var(x, autodiff);
        UvNodes uv = forward_uv(tape, bp, scaler, tcol, xn, true);
        const Tensor& uval = tape.val(uv.u);
        u.assign(uval.data.begin(), uval.data.end());
        v = tape.val(uv.v);
    };
}

using NormalsFn = std::function<const Tensor&(long long)>;

// Shared accumulation core of tbar_* and postprocess_eval: sorted taus,
// normals fetched per sorted index. The interior prefix is evaluated in
// chunks of `chunk` pairs (both branches in one batched (u,v) call), the
// terminal tail sample by sample, so the floating-point order is a function
// of (taus, chunk) alone.
PointEstimate accumulate_point(const PdeProblem& problem, const TimeSamplerSpec& sampler,
                               double dt, double t, const std::vector<double>& x,
                               const std::vector<double>& taus, const NormalsFn& normals,
                               const UvBatchFn& uv, bool with_v, int chunk) {
    const int d = problem.d;
    const double T = problem.T;
    if (static_cast<int>(x.size()) != d)
        throw std::invalid_argument("tbar: x size != d");
    if (!(t >= 0.0) || !(t < T))
        throw std::invalid_argument("tbar: t must lie in [0, T)");
    if (chunk < 1) throw std::invalid_argument("tbar: chunk must be positive");
    const long long n = static_cast<long long>(taus.size());
    if (n < 1) throw std::invalid_argument("tbar: empty sample set");

    const double h = T - t;
    const double inv_surv = 1.0 / sampler.survival(h);
    const long long n_int = std::lower_bound(taus.begin(), taus.end(), h) - taus.begin();

    PointEstimate est;
    est.n_interior = n_int;
    if (with_v) est.v_bar.assign(d, 0.0);
    double sum_pair = 0.0, sum_sq = 0.0, sum_single = 0.0;
    std::vector<double> vsum(with_v ? d : 0, 0.0);
    PairScratch s(d);
    std::vector<double> trows, ubuf;
    Tensor vbuf;

    for (long long start = 0; start < n_int; start += chunk) {
        const int m = static_cast<int>(std::min<long long>(chunk, n_int - start));
        Tensor xrows(2 * m, d);
        Tensor wrows(with_v ? m : 0, d);
        trows.assign(2 * m, 0.0);
        std::vector<double> inv_rho(m);
        for (int k = 0; k < m; ++k) {
            const long long i = start + k;
            const double tau = taus[i];
            const double te = replay_pair(problem, t, x, dt, tau, normals(i), with_v, s);
            std::copy(s.xe.begin(), s.xe.end(), xrows.row(k));
            std::copy(s.xh.begin(), s.xh.end(), xrows.row(m + k));
            trows[k] = te;
            trows[m + k] = te;
            inv_rho[k] = 1.0 / sampler.density(tau);
            if (with_v) std::copy(s.w.begin(), s.w.end(), wrows.row(k));
        }
        uv(trows, xrows, ubuf, vbuf);
        Tape tape;
        Tensor tcol(2 * m, 1, trows);
        int y = tape.constant(Tensor(2 * m, 1, ubuf));
        int dv = tape.constant(vbuf);
        int f = problem.f_tilde_node(tape, tcol, xrows, y, dv);
        const Tensor& fv = tape.val(f);
        for (int k = 0; k < m; ++k) {
            const double phi_x = fv.data[k] * inv_rho[k];
            const double phi_h = fv.data[m + k] * inv_rho[k];
            const double pair = 0.5 * (phi_x + phi_h);
            sum_pair += pair;
            sum_sq += pair * pair;
            sum_single += phi_x;
            if (with_v) {
                const double diff = 0.5 * (phi_x - phi_h);
                for (int j = 0; j < d; ++j) vsum[j] += wrows.at(k, j) * diff;
            }
        }
    }

    for (long long i = n_int; i < n; ++i) {
        replay_pair(problem, t, x, dt, taus[i], normals(i), with_v, s);
        const double phi_x = problem.g(s.xe.data()) * inv_surv;
        const double phi_h = problem.g(s.xh.data()) * inv_surv;
        const double pair = 0.5 * (phi_x + phi_h);
        sum_pair += pair;
        sum_sq += pair * pair;
        sum_single += phi_x;
        if (with_v) {
            const double diff = 0.5 * (phi_x - phi_h);
            for (int j = 0; j < d; ++j) vsum[j] += s.w[j] * diff;
        }
    }

    est.u_bar = sum_pair / n;
    est.u_bar_single = sum_single / n;
    const double mean = sum_pair / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    est.u_bar_se = std::sqrt(var / n);
    if (with_v)
        for (int j = 0; j < d; ++j) est.v_bar[j] = vsum[j] / n;
    return est;
}

// Interior rows and terminal constants of the discretized operator at one
// outer point. Interior samples occupy the bank's sorted prefix; terminal
// samples are network-independent, so they collapse into the (1/2n)-weighted
// constants of u_bar and v_bar.
struct PointRows {
    double u_const = 0.0;
    std::vector<double> v_const;
    int n_int = 0;
    Tensor x_end, x_hat_end, weight;
    std::vector<double> t_end, inv_rho;
};

PointRows gather_rows(const PdeProblem& problem, const InnerSampleBank& bank, double t,
                      const std::vector<double>& x, bool with_v, PairScratch& s) {
    const int d = problem.d;
    const double h = problem.T - t;
    const int n = bank.size();
    const int n_int = bank.interior_count(h);
    const double inv_surv = 1.0 / bank.sampler().survival(h);

    PointRows pr;
    pr.n_int = n_int;
    pr.x_end = Tensor(n_int, d);
    pr.x_hat_end = Tensor(n_int, d);
    if (with_v) pr.weight = Tensor(n_int, d);
    pr.t_end.resize(n_int);
    pr.inv_rho.resize(n_int);
    double uc = 0.0;
    std::vector<double> vc(with_v ? d : 0, 0.0);

    for (int i = 0; i < n; ++i) {
        const double tau = bank.tau(i);
        const double te = replay_pair(problem, t, x, bank.dt(), tau, bank.normals(i), with_v, s);
        if (i < n_int) {
            std::copy(s.xe.begin(), s.xe.end(), pr.x_end.row(i));
            std::copy(s.xh.begin(), s.xh.end(), pr.x_hat_end.row(i));
            if (with_v) std::copy(s.w.begin(), s.w.end(), pr.weight.row(i));
            pr.t_end[i] = te;
            pr.inv_rho[i] = 1.0 / bank.sampler().density(tau);
        } else {
            const double phi_x = problem.g(s.xe.data()) * inv_surv;
            const double phi_h = problem.g(s.xh.data()) * inv_surv;
            uc += phi_x + phi_h;
            if (with_v) {
                const double diff = phi_x - phi_h;
                for (int j = 0; j < d; ++j) vc[j] += s.w[j] * diff;
            }
        }
    }
    const double norm = 1.0 / (2.0 * n);
    pr.u_const = uc * norm;
    if (with_v) {
        pr.v_const.resize(d);
        for (int j = 0; j < d; ++j) pr.v_const[j] = vc[j] * norm;
    }
    return pr;
}

// One slab of outer points flattened for a single stacked network pass.
// Group b covers rows [offsets[b], offsets[b+1]): first its X branch rows,
// then its X_hat rows; w_signed carries +weight / -weight so that
// sum_rows phi * w_signed = sum_i weight_i (phi_i(X) - phi_i(X_hat)).
struct StackedRows {
    int B = 0;
    long long R = 0;
    Tensor t0, x0;
    Tensor u_const, v_const;
    Tensor t_rows, x_rows, inv_rho, w_signed;
    std::vector<int> offsets;
};

StackedRows stack_outer(const PdeProblem& problem, const InnerSampleBank& bank,
                        const std::vector<OuterPoint>& outer, bool with_v) {
    const int d = problem.d;
    const int B = static_cast<int>(outer.size());
    PairScratch s(d);
    std::vector<PointRows> rows;
    rows.reserve(B);
    long long total = 0;
    for (const OuterPoint& op : outer) {
        if (static_cast<int>(op.x.size()) != d)
            throw std::invalid_argument("stack_outer: outer point size != d");
        if (!(op.zeta >= 0.0) || !(op.zeta < problem.T))
            throw std::invalid_argument("stack_outer: outer time must lie in [0, T)");
        rows.push_back(gather_rows(problem, bank, op.zeta, op.x, with_v, s));
        total += 2 * rows.back().n_int;
    }

    StackedRows st;
    st.B = B;
    st.R = total;
    st.t0 = Tensor(B, 1);
    st.x0 = Tensor(B, d);
    st.u_const = Tensor(B, 1);
    if (with_v) st.v_const = Tensor(B, d);
    const int R = static_cast<int>(total);
    st.t_rows = Tensor(R, 1);
    st.x_rows = Tensor(R, d);
    st.inv_rho = Tensor(R, 1);
    if (with_v) st.w_signed = Tensor(R, d);
    st.offsets.resize(B + 1);
    st.offsets[0] = 0;

    int off = 0;
    for (int b = 0; b < B; ++b) {
        const PointRows& pr = rows[b];
        st.t0.at(b, 0) = outer[b].zeta;
        std::copy(outer[b].x.begin(), outer[b].x.end(), st.x0.row(b));
        st.u_const.at(b, 0) = pr.u_const;
        if (with_v) std::copy(pr.v_const.begin(), pr.v_const.end(), st.v_const.row(b));
        const int m = pr.n_int;
        for (int k = 0; k < m; ++k) {
            std::copy(pr.x_end.row(k), pr.x_end.row(k) + d, st.x_rows.row(off + k));
            std::copy(pr.x_hat_end.row(k), pr.x_hat_end.row(k) + d, st.x_rows.row(off + m + k));
            st.t_rows.at(off + k, 0) = pr.t_end[k];
            st.t_rows.at(off + m + k, 0) = pr.t_end[k];
            st.inv_rho.at(off + k, 0) = pr.inv_rho[k];
            st.inv_rho.at(off + m + k, 0) = pr.inv_rho[k];
            if (with_v) {
                for (int j = 0; j < d; ++j) {
                    const double w = pr.weight.at(k, j);
                    st.w_signed.at(off + k, j) = w;
                    st.w_signed.at(off + m + k, j) = -w;
                }
            }
        }
        off += 2 * m;
        st.offsets[b + 1] = off;
    }
    return st;
}

// Loss graph shared by both schemes: assemble (u_bar, v_bar) per outer point
// from the stacked interior rows plus the terminal constants, then score the
// network's (u, v) at the outer points against them.
int fp_loss_node(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                 const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                 const InnerSampleBank& bank, bool second_scheme, bool u_only) {
    if (bp.params == nullptr || !is_fixed_point(bp.params->spec.arch))
        throw std::invalid_argument("fixed-point loss: needs a fixed-point arch (A, B or C)");
    if (bp.params->spec.d != problem.d)
        throw std::invalid_argument("fixed-point loss: network dimension does not match the problem");
    if (outer.empty()) throw std::invalid_argument("fixed-point loss: empty outer batch");

    const int d = problem.d;
    const bool with_v = !u_only;
    StackedRows st = stack_outer(problem, bank, outer, with_v);
    const double inv2n = 1.0 / (2.0 * bank.size());

    int ubar, vbar = -1;
    if (st.R > 0) {
        int x_in = second_scheme ? tape.var(st.x_rows, true) : tape.constant(st.x_rows);
        UvNodes uv = forward_uv(tape, bp, scaler, st.t_rows, x_in, true);
        int f = problem.f_tilde_node(tape, st.t_rows, st.x_rows, uv.u, uv.v);
        int phi = tape.mul(f, tape.constant(st.inv_rho));
        int seg_u = tape.segment_sum(phi, st.offsets);
        ubar = tape.add(tape.mul(seg_u, tape.scalar(inv2n)), tape.constant(st.u_const));
        if (with_v) {
            int phid = tape.matmul(phi, tape.constant(Tensor::full(1, d, 1.0)));
            int seg_v = tape.segment_sum(tape.mul(phid, tape.constant(st.w_signed)), st.offsets);
            vbar = tape.add(tape.mul(seg_v, tape.scalar(inv2n)), tape.constant(st.v_const));
        }
    } else {
        ubar = tape.constant(st.u_const);
        if (with_v) vbar = tape.constant(st.v_const);
    }

    int x0 = second_scheme && with_v ? tape.var(st.x0, true) : tape.constant(st.x0);
    UvNodes uv0 = forward_uv(tape, bp, scaler, st.t0, x0, with_v);
    int term = tape.square(tape.sub(ubar, uv0.u));
    if (with_v) {
        int dv = tape.square(tape.sub(vbar, uv0.v));
        term = tape.add(term, tape.reduce_sum(dv, Axis::cols));
    }
    return tape.reduce_mean(term, Axis::all);
}

}  // namespace

double phi_value(const PdeProblem& problem, const TimeSamplerSpec& sampler, double s, double t,
                 const double* x, double y, const double* z) {
    if (!(s <= t)) throw std::invalid_argument("phi_value: needs s <= t");
    if (t >= problem.T) return problem.g(x) / sampler.survival(problem.T - s);
    const double rho = sampler.density(t - s);
    if (!(rho > 0.0) || !std::isfinite(rho))
        throw std::invalid_argument("phi_value: tau density vanishes or is singular at t - s");
    return problem.f_tilde(t, x, y, z) / rho;
}

InnerSampleBank::InnerSampleBank(const PdeProblem& problem, const TimeSamplerSpec& sampler,
                                 int n_inner, double dt, uint64_t seed)
    : sampler_(sampler), dt_(dt), seed_(seed) {
    if (n_inner < 1) throw std::invalid_argument("InnerSampleBank: n_inner must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("InnerSampleBank: dt must be positive");
    const int d = problem.d;
    std::vector<std::pair<double, int>> draws(n_inner);
    std::vector<Tensor> raw(n_inner);
    for (int i = 0; i < n_inner; ++i) {
        Rng rng(seed, StreamTag::inner_bank, static_cast<uint64_t>(i));
        const double tau = sample_tau(sampler_, rng.u01());
        // Enough normals for the longest replay horizon min(tau, T), i.e. an
        // outer time of zero; later outer times use a prefix of the rows.
        const int steps = pair_step_count(problem, 0.0, problem.T, dt, tau);
        Tensor xi(steps, d);
        rng.fill_normal(xi.data.data(), static_cast<size_t>(steps) * d);
        draws[i] = {tau, i};
        raw[i] = std::move(xi);
    }
    std::sort(draws.begin(), draws.end());
    taus_.resize(n_inner);
    stream_ids_.resize(n_inner);
    normals_.resize(n_inner);
    for (int k = 0; k < n_inner; ++k) {
        taus_[k] = draws[k].first;
        stream_ids_[k] = draws[k].second;
        normals_[k] = std::move(raw[draws[k].second]);
    }
}

int InnerSampleBank::interior_count(double horizon) const {
    return static_cast<int>(std::lower_bound(taus_.begin(), taus_.end(), horizon) -
                            taus_.begin());
}

std::vector<OuterPoint> sample_outer_points(const PdeProblem& problem, int n, double dt,
                                            Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_outer_points: n must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("sample_outer_points: dt must be positive");
    const int d = problem.d;
    const double T = problem.T;
    std::vector<OuterPoint> out(n);
    std::vector<double> xi(d), mu(d), sig(d);
    for (int k = 0; k < n; ++k) {
        OuterPoint& op = out[k];
        op.zeta = T * rng.u01();
        op.x.assign(problem.X0.begin(), problem.X0.end());
        switch (problem.step_mode) {
            case StepMode::const_coeff: {
                rng.fill_normal(xi.data(), d);
                problem.mu_vec(0.0, problem.X0.data(), mu.data());
                problem.sigma_diag(0.0, problem.X0.data(), sig.data());
                const double root = std::sqrt(op.zeta);
                for (int j = 0; j < d; ++j) {
                    const double v = problem.X0[j] + mu[j] * op.zeta + sig[j] * (root * xi[j]);
                    op.x[j] = problem.clamp_state ? std::max(v, 0.0) : v;
                }
                break;
            }
            case StepMode::exact_gbm: {
                rng.fill_normal(xi.data(), d);
                const double root = std::sqrt(op.zeta);
                std::vector<double> w(d);
                for (int j = 0; j < d; ++j) w[j] = root * xi[j];
                op.x = exact_step(problem, problem.X0, 0.0, op.zeta, w);
                break;
            }
            case StepMode::euler: {
                // dt grid to zeta with the same short-final-step convention
                // as the pair construction.
                std::vector<double> grid;
                if (op.zeta < dt) {
                    grid = {0.0, op.zeta};
                } else {
                    const int full = static_cast<int>(std::floor(op.zeta / dt));
                    grid.resize(full + 1);
                    for (int i = 0; i <= full; ++i) grid[i] = i * dt;
                    if (grid.back() < op.zeta &&
                        op.zeta - grid.back() > 1e-12 * std::max(1.0, op.zeta))
                        grid.push_back(op.zeta);
                    else
                        grid.back() = op.zeta;
                }
                const int steps = static_cast<int>(grid.size()) - 1;
                Tensor noise(steps, d);
                for (int i = 0; i < steps; ++i) {
                    rng.fill_normal(xi.data(), d);
                    const double root = std::sqrt(grid[i + 1] - grid[i]);
                    for (int j = 0; j < d; ++j) noise.at(i, j) = root * xi[j];
                }
                Tensor path = euler_path(problem, problem.X0, 0.0, grid, noise);
                op.x.assign(path.row(steps), path.row(steps) + d);
                break;
            }
        }
    }
    return out;
}

PointEstimate tbar_with(const PdeProblem& problem, const InnerSampleBank& bank, double t,
                        const std::vector<double>& x, const UvBatchFn& uv, bool with_v,
                        int chunk) {
    NormalsFn normals = [&bank](long long i) -> const Tensor& {
        return bank.normals(static_cast<int>(i));
    };
    return accumulate_point(problem, bank.sampler(), bank.dt(), t, x, bank.taus(), normals, uv,
                            with_v, chunk);
}

PointEstimate tbar_first_scheme(const PdeProblem& problem, NetworkParams& params,
                                const InputScaler& scaler, double t,
                                const std::vector<double>& x, const InnerSampleBank& bank,
                                int chunk) {
    const Arch arch = params.spec.arch;
    if (arch != Arch::fp_separated && arch != Arch::fp_shared)
        throw std::invalid_argument("tbar_first_scheme: needs an arch with a v head (A or B)");
    return tbar_with(problem, bank, t, x, network_uv(params, scaler), true, chunk);
}

PointEstimate tbar_second_scheme(const PdeProblem& problem, NetworkParams& params,
                                 const InputScaler& scaler, double t,
                                 const std::vector<double>& x, const InnerSampleBank& bank,
                                 bool with_v, int chunk) {
    if (params.spec.arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "tbar_second_scheme: needs the input-differentiated arch (C)");
    return tbar_with(problem, bank, t, x, network_uv(params, scaler), with_v, chunk);
}

int loss_first_scheme_node(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                           const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                           const InnerSampleBank& bank) {
    const Arch arch = bp.params != nullptr ? bp.params->spec.arch : Arch::fc_merged;
    if (arch != Arch::fp_separated && arch != Arch::fp_shared)
        throw std::invalid_argument("loss_first_scheme: needs an arch with a v head (A or B)");
    return fp_loss_node(tape, problem, bp, scaler, outer, bank, false, false);
}

int loss_second_scheme_node(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                            const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                            const InnerSampleBank& bank, bool u_only) {
    if (bp.params == nullptr || bp.params->spec.arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "loss_second_scheme: needs the input-differentiated arch (C)");
    return fp_loss_node(tape, problem, bp, scaler, outer, bank, true, u_only);
}

double fixedpoint_loss(const PdeProblem& problem, NetworkParams& params,
                       const InputScaler& scaler, const std::vector<OuterPoint>& outer,
                       const InnerSampleBank& bank, bool u_only, int outer_chunk) {
    if (outer.empty()) throw std::invalid_argument("fixedpoint_loss: empty outer batch");
    if (outer_chunk < 1)
        throw std::invalid_argument("fixedpoint_loss: outer_chunk must be positive");
    const Arch arch = params.spec.arch;
    if (!is_fixed_point(arch))
        throw std::invalid_argument("fixedpoint_loss: needs a fixed-point arch (A, B or C)");
    if (u_only && arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "fixedpoint_loss: the u-only loss needs the input-differentiated arch (C)");
    const int B = static_cast<int>(outer.size());
    double acc = 0.0;
    for (int start = 0; start < B; start += outer_chunk) {
        const int m = std::min(outer_chunk, B - start);
        std::vector<OuterPoint> slab(outer.begin() + start, outer.begin() + start + m);
        Tape tape;
        BoundParams bp = bind_params(tape, params, false);
        int loss = arch == Arch::fp_autodiff
                       ? loss_second_scheme_node(tape, problem, bp, scaler, slab, bank, u_only)
                       : loss_first_scheme_node(tape, problem, bp, scaler, slab, bank);
        acc += (static_cast<double>(m) / B) * tape.val(loss).data[0];
    }
    return acc;
}

FixedPointResult train_fixed_point(const PdeProblem& problem, const NetworkSpec& spec,
                                   const FixedPointConfig& cfg) {
    if (spec.d != problem.d)
        throw std::invalid_argument("train_fixed_point: spec dimension does not match the problem");
    if (!is_fixed_point(spec.arch))
        throw std::invalid_argument("train_fixed_point: needs a fixed-point arch (A, B or C)");
    if (cfg.u_only_loss && spec.arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "train_fixed_point: the u-only loss needs the input-differentiated arch (C)");
    if (!(cfg.lambda > 0.0))
        throw std::invalid_argument("train_fixed_point: lambda must be positive");
    if (cfg.n_inner < 1 || cfg.n_steps < 1 || cfg.batch_size < 1 || cfg.test_size < 1 ||
        cfg.test_every < 1 || cfg.iterations < 0 || cfg.scaler_paths < 1 ||
        cfg.outer_chunk < 1 || cfg.eval_chunk < 1)
        throw std::invalid_argument("train_fixed_point: bad config");

    const TimeSamplerSpec sampler{1.0, cfg.lambda};
    const double dt = problem.T / cfg.n_steps;
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();

    FixedPointResult out;
    out.config = cfg;
    out.scaler = fit_scaler(problem, cfg.n_steps, cfg.scaler_paths, cfg.seed);

    NetworkParams params = build(spec, cfg.seed);

    const InnerSampleBank bank(problem, sampler, cfg.n_inner, dt, cfg.seed);
    Rng rng_test(cfg.seed, StreamTag::test_paths);
    const std::vector<OuterPoint> test_set =
        sample_outer_points(problem, cfg.test_size, dt, rng_test);
    Rng rng_outer(cfg.seed, StreamTag::outer_points);

    Adam opt;
    LrSchedule sched(cfg.eta0, cfg.lr_evals_per_period, cfg.lr_threshold);
    NetworkParams best = params;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_iter = -1;
    out.history.reserve(cfg.iterations + 1);

    auto eval_test = [&](int it) {
        double tl;
        try {
            tl = fixedpoint_loss(problem, params, out.scaler, test_set, bank, cfg.u_only_loss,
                                 cfg.outer_chunk);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train_fixed_point: test evaluation failed at iteration " +
                                     std::to_string(it) + ": " + e.what());
        }
        if (!std::isfinite(tl))
            throw std::runtime_error("train_fixed_point: non-finite test loss at iteration " +
                                     std::to_string(it));
        if (tl < best_loss) {
            best_loss = tl;
            best = params;
            best_iter = it;
        }
        return tl;
    };

    const bool second = spec.arch == Arch::fp_autodiff;
    for (int it = 0; it < cfg.iterations; ++it) {
        double test = nan;
        if (it % cfg.test_every == 0) {
            test = eval_test(it);
            sched.record(test);
        }
        double train = 0.0;
        try {
            const std::vector<OuterPoint> batch =
                sample_outer_points(problem, cfg.batch_size, dt, rng_outer);
            std::vector<Tensor> grads;
            for (int start = 0; start < cfg.batch_size; start += cfg.outer_chunk) {
                const int m = std::min(cfg.outer_chunk, cfg.batch_size - start);
                std::vector<OuterPoint> slab(batch.begin() + start, batch.begin() + start + m);
                Tape tape;
                BoundParams bp = bind_params(tape, params, true);
                int loss = second ? loss_second_scheme_node(tape, problem, bp, out.scaler, slab,
                                                            bank, cfg.u_only_loss)
                                  : loss_first_scheme_node(tape, problem, bp, out.scaler, slab,
                                                           bank);
                const double w = static_cast<double>(m) / cfg.batch_size;
                train += w * tape.val(loss).data[0];
                tape.backward(loss);
                std::vector<Tensor> gs = collect_grads(tape, bp);
                if (grads.empty()) {
                    grads = std::move(gs);
                    for (Tensor& g : grads)
                        for (double& v : g.data) v *= w;
                } else {
                    for (size_t p = 0; p < grads.size(); ++p)
                        for (size_t q = 0; q < grads[p].data.size(); ++q)
                            grads[p].data[q] += w * gs[p].data[q];
                }
            }
            opt.step(params, grads, sched.eta());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train_fixed_point: training step failed at iteration " +
                                     std::to_string(it) + ": " + e.what());
        }
        out.history.push_back({it, train, test, sched.eta()});
    }

    // Bookkeeping evaluation after the last update; it does not feed the
    // schedule, so period boundaries stay aligned with the iteration count.
    double final_test = eval_test(cfg.iterations);
    out.history.push_back({cfg.iterations, nan, final_test, sched.eta()});

    out.params = std::move(best);
    out.best_test_loss = best_loss;
    out.best_iteration = best_iter;
    return out;
}

PointEstimate postprocess_eval(const PdeProblem& problem, NetworkParams& params,
                               const InputScaler& scaler, const TimeSamplerSpec& sampler,
                               double t, const std::vector<double>& x, long long n_eval,
                               double dt, uint64_t seed, bool with_v, int chunk) {
    if (n_eval < 1) throw std::invalid_argument("postprocess_eval: n_eval must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("postprocess_eval: dt must be positive");
    std::vector<std::pair<double, long long>> draws(n_eval);
    for (long long i = 0; i < n_eval; ++i) {
        Rng rng(seed, StreamTag::inner_bank, static_cast<uint64_t>(i));
        draws[i] = {sample_tau(sampler, rng.u01()), i};
    }
    std::sort(draws.begin(), draws.end());
    std::vector<double> taus(n_eval);
    for (long long i = 0; i < n_eval; ++i) taus[i] = draws[i].first;

    // Normals are regenerated on demand: the same stream as the bank's, so
    // with the bank's seed and n_eval = size the replay is bit-identical.
    Tensor scratch;
    NormalsFn normals = [&](long long k) -> const Tensor& {
        Rng rng(seed, StreamTag::inner_bank, static_cast<uint64_t>(draws[k].second));
        (void)rng.u01();
        const int steps = pair_step_count(problem, t, problem.T, dt, taus[k]);
        scratch = Tensor(steps, problem.d);
        rng.fill_normal(scratch.data.data(), static_cast<size_t>(steps) * problem.d);
        return scratch;
    };
    return accumulate_point(problem, sampler, dt, t, x, taus, normals,
                            network_uv(params, scaler), with_v, chunk);
}

ErrorReport evaluate_fixed_point(const PdeProblem& problem, const FixedPointResult& result,
                                 const FpEvalConfig& eval_cfg, const BaselineResult* baseline) {
    if (eval_cfg.n_eval_point < 1 || eval_cfg.n_eval_traj < 1 || eval_cfg.traj_count < 1 ||
        eval_cfg.n_steps < 1)
        throw std::invalid_argument("evaluate_fixed_point: bad eval config");
    const FixedPointConfig& cfg = result.config;
    const TimeSamplerSpec sampler{1.0, cfg.lambda};
    const double dt = problem.T / cfg.n_steps;
    const int d = problem.d;
    NetworkParams params = result.params;

    // Final test loss on the bank and outer test set regenerated from the
    // training config.
    const InnerSampleBank bank(problem, sampler, cfg.n_inner, dt, cfg.seed);
    Rng rng_test(cfg.seed, StreamTag::test_paths);
    const std::vector<OuterPoint> test_set =
        sample_outer_points(problem, cfg.test_size, dt, rng_test);
    const double final_loss = fixedpoint_loss(problem, params, result.scaler, test_set, bank,
                                              cfg.u_only_loss, cfg.outer_chunk);

    const std::vector<double> times = uniform_times(problem.T, eval_cfg.n_steps);
    const int N = eval_cfg.n_steps;
    const int R = eval_cfg.traj_count;
    Rng rng_paths(cfg.seed, StreamTag::final_test_paths);
    PathBatch paths = sample_grid_paths(problem, R, times, rng_paths);

    PathValues pv;
    pv.times = times;
    pv.x = paths.x;
    pv.Y = Tensor(R, N + 1);
    pv.Z.assign(N + 1, Tensor(R, d));
    pv.test_loss = final_loss;
    std::vector<double> xr(d), dgx(d);
    for (int r = 0; r < R; ++r) {
        for (int i = 0; i <= N; ++i) {
            xr.assign(paths.x[i].row(r), paths.x[i].row(r) + d);
            if (i == N) {
                // At t = T every tau crosses the horizon: the estimator is g
                // exactly and the weight denominator vanishes, so take the
                // limits g and Dg directly.
                pv.Y.at(r, N) = problem.g(xr.data());
                problem.dg(xr.data(), dgx.data());
                for (int j = 0; j < d; ++j) pv.Z[N].at(r, j) = dgx[j];
            } else {
                const uint64_t seed =
                    eval_cfg.eval_seed + 1 + static_cast<uint64_t>(r) * (N + 1) + i;
                PointEstimate est =
                    postprocess_eval(problem, params, result.scaler, sampler, times[i], xr,
                                     eval_cfg.n_eval_traj, dt, seed, true, cfg.eval_chunk);
                pv.Y.at(r, i) = est.u_bar;
                for (int j = 0; j < d; ++j) pv.Z[i].at(r, j) = est.v_bar[j];
            }
        }
    }
    ErrorReport rep =
        error_measures(problem, pv, baseline, eval_cfg.reference_inner, cfg.seed, 0);

    // Pointwise errors come from the larger fresh estimate at (0, X0), not
    // from the first trajectory point.
    PointEstimate p0 = postprocess_eval(problem, params, result.scaler, sampler, 0.0, problem.X0,
                                        eval_cfg.n_eval_point, dt, eval_cfg.eval_seed, true,
                                        cfg.eval_chunk);
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    rep.Y0 = p0.u_bar;
    rep.Z0 = p0.v_bar;
    rep.rel_err_Y0 =
        rep.Y0_ref != 0.0 ? std::abs(rep.Y0 - rep.Y0_ref) / std::abs(rep.Y0_ref) : nan;
    double num = 0.0, den = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = rep.Z0[j] - rep.Z0_ref[j];
        num += diff * diff;
        den += rep.Z0_ref[j] * rep.Z0_ref[j];
    }
    rep.rel_err_Z0 = den > 0.0 ? num / den : nan;
    return rep;
}

}  // namespace semilin
