#include "semilin/dbsde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

#include "semilin/rng.hpp"

namespace semilin {

namespace {

Tensor g_column(const PdeProblem& problem, const Tensor& x) {
    Tensor out(x.rows, 1);
    for (int r = 0; r < x.rows; ++r) out.at(r, 0) = problem.g(x.row(r));
    return out;
}

// sigma(t,x) dW, elementwise over the diagonal, as plain data.
Tensor sigma_dw(const PdeProblem& problem, double t, const Tensor& x, const Tensor& dw) {
    Tensor out(x.rows, x.cols);
    std::vector<double> sig(x.cols);
    for (int r = 0; r < x.rows; ++r) {
        problem.sigma_diag(t, x.row(r), sig.data());
        for (int j = 0; j < x.cols; ++j) out.at(r, j) = sig[j] * dw.at(r, j);
    }
    return out;
}

int scaled_y_node(Tape& tape, const InputScaler& scaler, int y) {
    int centered = tape.sub(y, tape.scalar(scaler.Y_mean));
    return tape.mul(centered, tape.scalar(1.0 / scaler.y_div()));
}

int scaled_g_node(Tape& tape, const PdeProblem& problem, const InputScaler& scaler,
                  const Tensor& x) {
    Tensor out(x.rows, 1);
    for (int r = 0; r < x.rows; ++r) out.at(r, 0) = scaler.scale_y(problem.g(x.row(r)));
    return tape.constant(std::move(out));
}

PathBatch slice_rows(const PathBatch& pb, int r0, int r1) {
    PathBatch out;
    out.times = pb.times;
    out.x.reserve(pb.x.size());
    out.dw.reserve(pb.dw.size());
    auto take = [&](const Tensor& t) {
        Tensor s(r1 - r0, t.cols);
        std::copy(t.row(r0), t.row(r0) + static_cast<size_t>(r1 - r0) * t.cols,
                  s.data.begin());
        return s;
    };
    for (const auto& t : pb.x) out.x.push_back(take(t));
    for (const auto& t : pb.dw) out.dw.push_back(take(t));
    return out;
}

void check_paths(const PdeProblem& problem, const PathBatch& paths) {
    if (paths.times.size() < 2 || paths.x.size() != paths.times.size() ||
        paths.dw.size() + 1 != paths.times.size())
        throw std::invalid_argument("dbsde: malformed path batch");
    if (paths.x[0].cols != problem.d)
        throw std::invalid_argument("dbsde: path dimension does not match the problem");
}

}  // namespace

std::vector<double> uniform_times(double T, int n_steps) {
    if (!(T > 0.0) || n_steps < 1)
        throw std::invalid_argument("uniform_times: need T > 0 and n_steps >= 1");
    std::vector<double> t(n_steps + 1);
    for (int i = 0; i <= n_steps; ++i) t[i] = T * i / n_steps;
    return t;
}

RolloutBatch rollout_core(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                          int y0_node, const KappaFn& kappa) {
    check_paths(problem, paths);
    const int N = static_cast<int>(paths.times.size()) - 1;
    const int R = paths.x[0].rows;
    const int d = problem.d;

    RolloutBatch ro;
    ro.times = paths.times;
    ro.y_nodes.reserve(N + 1);
    ro.kappa_nodes.reserve(N + 1);

    int y = y0_node;
    const Tensor& y0v = tape.val(y0_node);
    if (y0v.is_scalar() && R != 1) {
        y = tape.matmul(tape.constant(Tensor::full(R, 1, 1.0)), y0_node);
    } else if (y0v.rows != R || y0v.cols != 1) {
        throw std::invalid_argument("rollout_core: y0 must be (1,1) or (batch,1)");
    }
    ro.y_nodes.push_back(y);

    for (int i = 0; i < N; ++i) {
        const double ti = paths.times[i];
        const double dt = paths.times[i + 1] - ti;
        int k = kappa(tape, i, y);
        const Tensor& kv = tape.val(k);
        if (kv.rows != R || kv.cols != d)
            throw std::invalid_argument("rollout_core: kappa node must be (batch,d)");
        ro.kappa_nodes.push_back(k);

        int f = problem.f_tilde_node(tape, Tensor::scalar(ti), paths.x[i], y, k);
        int inc = tape.reduce_sum(
            tape.mul(k, tape.constant(sigma_dw(problem, ti, paths.x[i], paths.dw[i]))),
            Axis::cols);
        y = tape.add(tape.sub(y, tape.mul(f, tape.scalar(dt))), inc);
        ro.y_nodes.push_back(y);
    }
    ro.kappa_nodes.push_back(kappa(tape, N, ro.y_nodes.back()));
    return ro;
}

RolloutBatch rollout_network(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                             const InputScaler& scaler, const PathBatch& paths) {
    check_paths(problem, paths);
    const NetworkSpec& spec = bp.params->spec;
    if (is_fixed_point(spec.arch))
        throw std::invalid_argument("rollout_network: fixed-point archs have no kappa head");
    const int N = static_cast<int>(paths.times.size()) - 1;
    const int R = paths.x[0].rows;
    const bool per_step = is_per_step(spec.arch);
    if (per_step && spec.n_steps != N)
        throw std::invalid_argument("rollout_network: per-step net built for a different N");

    const bool wants_y = !per_step && spec.arch != Arch::lstm;
    const bool wants_g = wants_y || spec.arch == Arch::fc_residual;
    LstmState state;
    int last_kappa = -1;

    KappaFn fn = [&](Tape& tp, int i, int y) -> int {
        if (per_step) {
            if (i == 0)
                return tp.matmul(tp.constant(Tensor::full(R, 1, 1.0)), bp.node("kappa0"));
            if (i == N) return last_kappa;  // evaluation slot: repeat step N-1
        }
        KappaInputs in;
        in.x = tp.constant(scaler.scale_x(paths.x[i]));
        if (!per_step)
            in.t = tp.constant(Tensor::full(R, 1, scaler.scale_t(paths.times[i])));
        if (wants_y) in.y = scaled_y_node(tp, scaler, y);
        if (wants_g) in.g = scaled_g_node(tp, problem, scaler, paths.x[i]);
        last_kappa = forward_kappa(tp, bp, i, in, is_recurrent(spec.arch) ? &state : nullptr);
        return last_kappa;
    };
    return rollout_core(tape, problem, paths, bp.node("Y0"), fn);
}

int terminal_loss(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                  const RolloutBatch& ro) {
    check_paths(problem, paths);
    const int N = static_cast<int>(paths.times.size()) - 1;
    if (static_cast<int>(ro.y_nodes.size()) != N + 1)
        throw std::invalid_argument("terminal_loss: rollout does not match the path batch");
    int g = tape.constant(g_column(problem, paths.x[N]));
    return tape.reduce_mean(tape.square(tape.sub(ro.y_nodes[N], g)), Axis::all);
}

int soft_residual_loss(Tape& tape, const PdeProblem& problem, const PathBatch& paths,
                       const std::vector<int>& y_nodes, const std::vector<int>& z_nodes) {
    check_paths(problem, paths);
    const int N = static_cast<int>(paths.times.size()) - 1;
    if (static_cast<int>(y_nodes.size()) != N + 1)
        throw std::invalid_argument("soft_residual_loss: need N+1 y nodes");
    if (static_cast<int>(z_nodes.size()) < N)
        throw std::invalid_argument("soft_residual_loss: need N z nodes");

    int acc = -1;
    for (int i = 0; i < N; ++i) {
        const double ti = paths.times[i];
        const double dt = paths.times[i + 1] - ti;
        int f = problem.f_tilde_node(tape, Tensor::scalar(ti), paths.x[i], y_nodes[i],
                                     z_nodes[i]);
        int inc = tape.reduce_sum(
            tape.mul(z_nodes[i],
                     tape.constant(sigma_dw(problem, ti, paths.x[i], paths.dw[i]))),
            Axis::cols);
        int resid = tape.sub(
            tape.add(tape.sub(y_nodes[i + 1], y_nodes[i]), tape.mul(f, tape.scalar(dt))), inc);
        int phi = tape.square(resid);
        acc = acc < 0 ? phi : tape.add(acc, phi);
    }
    int g = tape.constant(g_column(problem, paths.x[N]));
    int term = tape.square(tape.sub(g, y_nodes[N]));
    return tape.reduce_mean(tape.add(acc, term), Axis::all);
}

int soft_constraint_loss(Tape& tape, const PdeProblem& problem, BoundParams& bp,
                         const InputScaler& scaler, const PathBatch& paths) {
    check_paths(problem, paths);
    if (bp.params->spec.arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "soft_constraint_loss: needs the input-differentiated arch (C)");
    const int N = static_cast<int>(paths.times.size()) - 1;
    const int R = paths.x[0].rows;

    std::vector<int> y(N + 1), z(N);
    for (int i = 0; i <= N; ++i) {
        int x = tape.var(paths.x[i], true);
        UvNodes uv = forward_uv(tape, bp, scaler, Tensor::full(R, 1, paths.times[i]), x, i < N);
        y[i] = uv.u;
        if (i < N) z[i] = uv.v;
    }
    return soft_residual_loss(tape, problem, paths, y, z);
}

double dbsde_test_loss(const PdeProblem& problem, NetworkParams& params,
                       const InputScaler& scaler, const PathBatch& paths, bool soft_constraint,
                       int chunk) {
    check_paths(problem, paths);
    const int R = paths.x[0].rows;
    if (chunk <= 0 || chunk > R) chunk = R;
    double acc = 0.0;
    for (int r0 = 0; r0 < R; r0 += chunk) {
        const int b = std::min(chunk, R - r0);
        PathBatch sub = slice_rows(paths, r0, r0 + b);
        Tape tape;
        BoundParams bp = bind_params(tape, params, false);
        int loss;
        if (soft_constraint) {
            loss = soft_constraint_loss(tape, problem, bp, scaler, sub);
        } else {
            RolloutBatch ro = rollout_network(tape, problem, bp, scaler, sub);
            loss = terminal_loss(tape, problem, sub, ro);
        }
        acc += tape.val(loss).data[0] * b;
    }
    return acc / R;
}

PathValues dbsde_path_values(const PdeProblem& problem, NetworkParams& params,
                             const InputScaler& scaler, const PathBatch& paths,
                             bool soft_constraint, int chunk) {
    check_paths(problem, paths);
    const int N = static_cast<int>(paths.times.size()) - 1;
    const int R = paths.x[0].rows;
    const int d = problem.d;
    if (chunk <= 0 || chunk > R) chunk = R;

    PathValues pv;
    pv.times = paths.times;
    pv.x = paths.x;
    pv.Y = Tensor(R, N + 1);
    pv.Z.assign(N + 1, Tensor(R, d));

    double acc = 0.0;
    for (int r0 = 0; r0 < R; r0 += chunk) {
        const int b = std::min(chunk, R - r0);
        PathBatch sub = slice_rows(paths, r0, r0 + b);
        Tape tape;
        BoundParams bp = bind_params(tape, params, false);
        std::vector<int> y(N + 1), z(N + 1);
        int loss;
        if (soft_constraint) {
            if (params.spec.arch != Arch::fp_autodiff)
                throw std::invalid_argument(
                    "dbsde_path_values: soft mode needs the input-differentiated arch (C)");
            for (int i = 0; i <= N; ++i) {
                int x = tape.var(sub.x[i], true);
                UvNodes uv =
                    forward_uv(tape, bp, scaler, Tensor::full(b, 1, sub.times[i]), x, true);
                y[i] = uv.u;
                z[i] = uv.v;
            }
            loss = soft_residual_loss(tape, problem, sub, y, z);
        } else {
            RolloutBatch ro = rollout_network(tape, problem, bp, scaler, sub);
            loss = terminal_loss(tape, problem, sub, ro);
            y = ro.y_nodes;
            z = ro.kappa_nodes;
        }
        for (int i = 0; i <= N; ++i) {
            const Tensor& yv = tape.val(y[i]);
            const Tensor& zv = tape.val(z[i]);
            for (int r = 0; r < b; ++r) {
                pv.Y.at(r0 + r, i) = yv.at(r, 0);
                std::copy(zv.row(r), zv.row(r) + d, pv.Z[i].row(r0 + r));
            }
        }
        acc += tape.val(loss).data[0] * b;
    }
    pv.test_loss = acc / R;
    return pv;
}

DbsdeResult train_dbsde(const PdeProblem& problem, const NetworkSpec& spec,
                        const DbsdeConfig& cfg) {
    if (spec.d != problem.d)
        throw std::invalid_argument("train_dbsde: spec dimension does not match the problem");
    if (cfg.soft_constraint && spec.arch != Arch::fp_autodiff)
        throw std::invalid_argument(
            "train_dbsde: the soft-constraint objective needs the input-differentiated arch (C)");
    if (!cfg.soft_constraint && is_fixed_point(spec.arch))
        throw std::invalid_argument("train_dbsde: fixed-point archs train with soft_constraint");
    if (cfg.n_steps < 2 || cfg.batch_size < 1 || cfg.test_size < 1 || cfg.final_test_size < 1 ||
        cfg.test_every < 1 || cfg.iterations < 0 || cfg.scaler_paths < 1)
        throw std::invalid_argument("train_dbsde: bad config");
    if (is_per_step(spec.arch) && spec.n_steps != cfg.n_steps)
        throw std::invalid_argument("train_dbsde: per-step spec.n_steps must equal cfg.n_steps");

    const std::vector<double> times = uniform_times(problem.T, cfg.n_steps);
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();

    DbsdeResult out;
    out.scaler = fit_scaler(problem, cfg.n_steps, cfg.scaler_paths, cfg.seed);
    out.y0_initial = out.scaler.y0_init;

    NetworkParams params = build(spec, cfg.seed);
    if (!cfg.soft_constraint) params.at("Y0").data[0] = out.scaler.y0_init;

    Rng rng_test(cfg.seed, StreamTag::test_paths);
    const PathBatch test_set = sample_grid_paths(problem, cfg.test_size, times, rng_test);
    Rng rng_train(cfg.seed, StreamTag::train_paths);

    Adam opt;
    LrSchedule sched(cfg.eta0, cfg.lr_evals_per_period, cfg.lr_threshold);
    NetworkParams best = params;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_iter = -1;
    out.history.reserve(cfg.iterations + 1);

    auto eval_test = [&](int it) {
        double tl;
        try {
            tl = dbsde_test_loss(problem, params, out.scaler, test_set, cfg.soft_constraint,
                                 cfg.eval_chunk);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train_dbsde: test evaluation failed at iteration " +
                                     std::to_string(it) + ": " + e.what());
        }
        if (!std::isfinite(tl))
            throw std::runtime_error("train_dbsde: non-finite test loss at iteration " +
                                     std::to_string(it));
        if (tl < best_loss) {
            best_loss = tl;
            best = params;
            best_iter = it;
        }
        return tl;
    };

    for (int it = 0; it < cfg.iterations; ++it) {
        double test = nan;
        if (it % cfg.test_every == 0) {
            test = eval_test(it);
            sched.record(test);
        }
        double train;
        try {
            PathBatch batch = sample_grid_paths(problem, cfg.batch_size, times, rng_train);
            Tape tape;
            BoundParams bp = bind_params(tape, params, true);
            int loss;
            if (cfg.soft_constraint) {
                loss = soft_constraint_loss(tape, problem, bp, out.scaler, batch);
            } else {
                RolloutBatch ro = rollout_network(tape, problem, bp, out.scaler, batch);
                loss = terminal_loss(tape, problem, batch, ro);
            }
            train = tape.val(loss).data[0];
            tape.backward(loss);
            opt.step(params, collect_grads(tape, bp), sched.eta());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train_dbsde: training step failed at iteration " +
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

ErrorReport error_measures(const PdeProblem& problem, const PathValues& pv,
                           const BaselineResult* baseline, long long reference_inner,
                           uint64_t reference_seed, int integral_paths) {
    const int N = static_cast<int>(pv.times.size()) - 1;
    const int R = pv.Y.rows;
    const int d = problem.d;
    if (N < 1 || R < 1 || static_cast<int>(pv.Z.size()) != N + 1)
        throw std::invalid_argument("error_measures: malformed path values");

    ErrorReport rep;
    rep.Y0 = pv.Y.at(0, 0);
    rep.Z0.assign(pv.Z[0].row(0), pv.Z[0].row(0) + d);
    rep.Z0_ref.assign(d, 0.0);
    if (problem.has_exact) {
        rep.Y0_ref = problem.exact_u(0.0, problem.X0.data());
        problem.exact_Du(0.0, problem.X0.data(), rep.Z0_ref.data());
    } else if (baseline != nullptr) {
        rep.Y0_ref = baseline->Y0;
        rep.Z0_ref = baseline->Z0;
    } else {
        throw std::runtime_error("error_measures: no reference (closed formula or baseline)");
    }

    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    rep.rel_err_Y0 =
        rep.Y0_ref != 0.0 ? std::abs(rep.Y0 - rep.Y0_ref) / std::abs(rep.Y0_ref) : nan;
    double num = 0.0, den = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = rep.Z0[j] - rep.Z0_ref[j];
        num += diff * diff;
        den += rep.Z0_ref[j] * rep.Z0_ref[j];
    }
    rep.rel_err_Z0 = den > 0.0 ? num / den : nan;

    const int P = integral_paths <= 0 ? R : std::min(integral_paths, R);
    const double dt = pv.times[1] - pv.times[0];
    double acc_y = 0.0, acc_z = 0.0;
    Tensor xp(N + 1, d);
    for (int r = 0; r < P; ++r) {
        for (int i = 0; i <= N; ++i) std::copy(pv.x[i].row(r), pv.x[i].row(r) + d, xp.row(i));
        ReferencePath ref =
            reference_trajectory(problem, xp, pv.times, reference_inner, reference_seed + r);
        double s_y = 0.0, s_z = 0.0;
        for (int i = 0; i <= N; ++i) {
            const double w = (i == 0 || i == N) ? 0.5 : 1.0;
            s_y += w * std::abs(pv.Y.at(r, i) - ref.Y[i]);
            double q = 0.0;
            for (int j = 0; j < d; ++j) {
                const double diff = pv.Z[i].at(r, j) - ref.Z.at(i, j);
                q += diff * diff;
            }
            s_z += w * q;
        }
        acc_y += dt * s_y;
        acc_z += dt * s_z;
    }
    rep.integral_err_Y = acc_y / P;
    rep.integral_err_Z = acc_z / P;
    rep.final_test_loss = pv.test_loss;
    rep.n_integral_paths = P;
    return rep;
}

ErrorReport evaluate_dbsde(const PdeProblem& problem, DbsdeResult& result,
                           const DbsdeConfig& cfg, const BaselineResult* baseline) {
    const std::vector<double> times = uniform_times(problem.T, cfg.n_steps);
    Rng rng(cfg.seed, StreamTag::final_test_paths);
    PathBatch paths = sample_grid_paths(problem, cfg.final_test_size, times, rng);
    PathValues pv = dbsde_path_values(problem, result.params, result.scaler, paths,
                                      cfg.soft_constraint, cfg.eval_chunk);
    return error_measures(problem, pv, baseline, cfg.reference_inner, cfg.seed,
                          cfg.integral_paths);
}

}  // namespace semilin
