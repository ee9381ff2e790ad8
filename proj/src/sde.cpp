#include "semilin/sde.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <stdexcept>

namespace semilin {

namespace {

void check_sampler(const TimeSamplerSpec& s) {
    if (!(s.u > 0.0) || !(s.lambda > 0.0))
        throw std::invalid_argument("TimeSamplerSpec: u and lambda must be positive");
}

void check_finite_states(const Tensor& x, const char* what) {
    for (double v : x.data)
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite state in ") + what);
}

}  // namespace

double TimeSamplerSpec::density(double x) const {
    check_sampler(*this);
    if (x < 0.0) return 0.0;
    return std::pow(lambda, u) * std::pow(x, u - 1.0) * std::exp(-lambda * x) / std::tgamma(u);
}

double TimeSamplerSpec::cdf(double x) const {
    check_sampler(*this);
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p(u, lambda * x);
}

double TimeSamplerSpec::survival(double x) const {
    check_sampler(*this);
    if (x <= 0.0) return 1.0;
    return boost::math::gamma_q(u, lambda * x);
}

Tensor euler_path(const PdeProblem& problem, const std::vector<double>& x0, double t0,
                  const std::vector<double>& grid, const Tensor& noise) {
    const int d = problem.d;
    const int n_steps = static_cast<int>(grid.size()) - 1;
    if (static_cast<int>(x0.size()) != d) throw std::invalid_argument("euler_path: x0 size != d");
    if (grid.empty() || grid.front() != t0)
        throw std::invalid_argument("euler_path: grid must start at t0");
    for (int i = 0; i < n_steps; ++i)
        if (!(grid[i + 1] > grid[i])) throw std::invalid_argument("euler_path: grid not increasing");
    if (noise.rows != n_steps || noise.cols != d)
        throw std::invalid_argument("euler_path: noise must be (len(grid)-1) x d");

    Tensor path(static_cast<int>(grid.size()), d);
    for (int j = 0; j < d; ++j) path.at(0, j) = x0[j];
    std::vector<double> mu(d), sig(d);
    for (int i = 0; i < n_steps; ++i) {
        const double h = grid[i + 1] - grid[i];
        const double* xi = &path.at(i, 0);
        problem.mu_vec(grid[i], xi, mu.data());
        problem.sigma_diag(grid[i], xi, sig.data());
        for (int j = 0; j < d; ++j) {
            double v = xi[j] + mu[j] * h + sig[j] * noise.at(i, j);
            path.at(i + 1, j) = problem.clamp_state ? std::max(v, 0.0) : v;
        }
    }
    check_finite_states(path, "euler_path");
    return path;
}

std::vector<double> exact_step(const PdeProblem& problem, const std::vector<double>& x, double s,
                               double t, const std::vector<double>& w_increment) {
    if (problem.step_mode != StepMode::exact_gbm)
        throw std::invalid_argument("exact_step: problem has no exact sampler");
    if (!(t >= s)) throw std::invalid_argument("exact_step: t < s");
    const int d = problem.d;
    if (static_cast<int>(x.size()) != d || static_cast<int>(w_increment.size()) != d)
        throw std::invalid_argument("exact_step: dimension mismatch");
    const double mu_bar = problem.params.count("mu_bar") ? problem.p("mu_bar") : 0.0;
    const double sigma_bar = problem.p("sigma_bar");
    const double drift = (mu_bar - 0.5 * sigma_bar * sigma_bar) * (t - s);
    std::vector<double> out(d);
    for (int j = 0; j < d; ++j) out[j] = x[j] * std::exp(drift + sigma_bar * w_increment[j]);
    return out;
}

double sample_tau(const TimeSamplerSpec& sampler, double uniform) {
    check_sampler(sampler);
    if (!(uniform > 0.0 && uniform < 1.0))
        throw std::invalid_argument("sample_tau: uniform must lie in (0,1)");
    if (sampler.u == 1.0) return -std::log1p(-uniform) / sampler.lambda;
    return boost::math::gamma_p_inv(sampler.u, uniform) / sampler.lambda;
}

namespace {

// Substep grid from t to min(t + tau, T): a single span for exactly simulable
// dynamics or tau < dt, else dt steps with a possible short final one.
std::vector<double> pair_times(const PdeProblem& problem, double t, double T, double dt,
                               double tau) {
    if (!(t < T)) throw std::invalid_argument("pair_times: requires t < T");
    if (!(dt > 0.0) || !(tau > 0.0))
        throw std::invalid_argument("pair_times: dt and tau must be positive");
    const bool crossed = tau >= T - t;
    const double s = crossed ? T - t : tau;
    const double t_end = crossed ? T : t + tau;
    if (problem.step_mode != StepMode::euler || s < dt) return {t, t_end};
    const int full = static_cast<int>(std::floor(s / dt));
    std::vector<double> times(full + 1);
    for (int i = 0; i <= full; ++i) times[i] = t + i * dt;
    if (times.back() < t_end && t_end - times.back() > 1e-12 * std::max(1.0, t_end))
        times.push_back(t_end);
    else
        times.back() = t_end;
    return times;
}

}  // namespace

int pair_step_count(const PdeProblem& problem, double t, double T, double dt, double tau) {
    return static_cast<int>(pair_times(problem, t, T, dt, tau).size()) - 1;
}

PathPair pair_from_draws(const PdeProblem& problem, const std::vector<double>& x, double t,
                         double T, double dt, double tau, const Tensor& unit_normals) {
    const int d = problem.d;
    if (static_cast<int>(x.size()) != d)
        throw std::invalid_argument("pair_from_draws: x size != d");

    PathPair pp;
    pp.tau = tau;
    pp.crossed = tau >= T - t;
    pp.times = pair_times(problem, t, T, dt, tau);
    const int n_steps = static_cast<int>(pp.times.size()) - 1;
    if (unit_normals.rows < n_steps || unit_normals.cols != d)
        throw std::invalid_argument("pair_from_draws: not enough unit normals");

    pp.w_increments = Tensor(n_steps, d);
    for (int i = 0; i < n_steps; ++i) {
        const double root = std::sqrt(pp.times[i + 1] - pp.times[i]);
        for (int j = 0; j < d; ++j) pp.w_increments.at(i, j) = root * unit_normals.at(i, j);
    }
    pp.x_path = Tensor(n_steps + 1, d);
    pp.x_hat_path = Tensor(n_steps + 1, d);
    for (int j = 0; j < d; ++j) {
        pp.x_path.at(0, j) = x[j];
        pp.x_hat_path.at(0, j) = x[j];
    }

    if (n_steps == 1) {
        const double s = pp.times[1] - pp.times[0];
        const double t_end = pp.times[1];
        if (problem.step_mode == StepMode::exact_gbm) {
            std::vector<double> w(d), w_neg(d);
            for (int j = 0; j < d; ++j) {
                w[j] = pp.w_increments.at(0, j);
                w_neg[j] = -w[j];
            }
            auto xe = exact_step(problem, x, t, t_end, w);
            auto xh = exact_step(problem, x, t, t_end, w_neg);
            for (int j = 0; j < d; ++j) {
                pp.x_path.at(1, j) = xe[j];
                pp.x_hat_path.at(1, j) = xh[j];
            }
        } else {
            std::vector<double> mu(d), sig(d);
            problem.mu_vec(t, x.data(), mu.data());
            problem.sigma_diag(t, x.data(), sig.data());
            for (int j = 0; j < d; ++j) {
                const double dw = pp.w_increments.at(0, j);
                double vf = x[j] + mu[j] * s + sig[j] * dw;
                double vh = x[j] + mu[j] * s - sig[j] * dw;
                pp.x_path.at(1, j) = problem.clamp_state ? std::max(vf, 0.0) : vf;
                pp.x_hat_path.at(1, j) = problem.clamp_state ? std::max(vh, 0.0) : vh;
            }
        }
    } else {
        // dt substeps over [t, t_end]; only the first increment is flipped on
        // the antithetic branch, later increments are shared.
        std::vector<double> mu(d), sig(d);
        for (int i = 0; i < n_steps; ++i) {
            const double ti = pp.times[i];
            const double h = pp.times[i + 1] - ti;
            const double flip = i == 0 ? -1.0 : 1.0;
            const double* xi = &pp.x_path.at(i, 0);
            problem.mu_vec(ti, xi, mu.data());
            problem.sigma_diag(ti, xi, sig.data());
            for (int j = 0; j < d; ++j) {
                double v = xi[j] + mu[j] * h + sig[j] * pp.w_increments.at(i, j);
                pp.x_path.at(i + 1, j) = problem.clamp_state ? std::max(v, 0.0) : v;
            }
            const double* xhi = &pp.x_hat_path.at(i, 0);
            problem.mu_vec(ti, xhi, mu.data());
            problem.sigma_diag(ti, xhi, sig.data());
            for (int j = 0; j < d; ++j) {
                double v = xhi[j] + mu[j] * h + flip * sig[j] * pp.w_increments.at(i, j);
                pp.x_hat_path.at(i + 1, j) = problem.clamp_state ? std::max(v, 0.0) : v;
            }
        }
    }
    check_finite_states(pp.x_path, "pair_from_draws");
    check_finite_states(pp.x_hat_path, "pair_from_draws");
    return pp;
}

PathPair sample_path_pair(const PdeProblem& problem, const std::vector<double>& x, double t,
                          double T, double dt, const TimeSamplerSpec& sampler, Rng& rng) {
    if (!(t < T)) throw std::invalid_argument("sample_path_pair: requires t < T");
    const int d = problem.d;
    if (static_cast<int>(x.size()) != d)
        throw std::invalid_argument("sample_path_pair: x size != d");
    const double tau = sample_tau(sampler, rng.u01());
    const int n_steps = pair_step_count(problem, t, T, dt, tau);
    Tensor xi(n_steps, d);
    for (int i = 0; i < n_steps; ++i)
        for (int j = 0; j < d; ++j) xi.at(i, j) = rng.normal();
    return pair_from_draws(problem, x, t, T, dt, tau, xi);
}

PathBatch sample_grid_paths(const PdeProblem& problem, int batch,
                            const std::vector<double>& times, Rng& rng) {
    const int d = problem.d;
    const int n_steps = static_cast<int>(times.size()) - 1;
    if (n_steps < 1) throw std::invalid_argument("sample_grid_paths: need at least two times");
    for (int i = 0; i < n_steps; ++i)
        if (!(times[i + 1] > times[i]))
            throw std::invalid_argument("sample_grid_paths: times not increasing");

    PathBatch pb;
    pb.times = times;
    pb.x.assign(times.size(), Tensor(batch, d));
    pb.dw.assign(n_steps, Tensor(batch, d));
    for (int r = 0; r < batch; ++r)
        for (int j = 0; j < d; ++j) pb.x[0].at(r, j) = problem.X0[j];

    const bool exact = problem.step_mode == StepMode::exact_gbm;
    const double mu_bar = problem.params.count("mu_bar") ? problem.p("mu_bar") : 0.0;
    const double sigma_bar = exact ? problem.p("sigma_bar") : 0.0;
    std::vector<double> mu(d), sig(d);
    for (int i = 0; i < n_steps; ++i) {
        const double h = times[i + 1] - times[i];
        const double root = std::sqrt(h);
        for (int r = 0; r < batch; ++r)
            for (int j = 0; j < d; ++j) pb.dw[i].at(r, j) = root * rng.normal();
        if (exact) {
            const double drift = (mu_bar - 0.5 * sigma_bar * sigma_bar) * h;
            for (int r = 0; r < batch; ++r)
                for (int j = 0; j < d; ++j)
                    pb.x[i + 1].at(r, j) =
                        pb.x[i].at(r, j) * std::exp(drift + sigma_bar * pb.dw[i].at(r, j));
        } else {
            for (int r = 0; r < batch; ++r) {
                const double* xi = &pb.x[i].at(r, 0);
                problem.mu_vec(times[i], xi, mu.data());
                problem.sigma_diag(times[i], xi, sig.data());
                for (int j = 0; j < d; ++j) {
                    double v = xi[j] + mu[j] * h + sig[j] * pb.dw[i].at(r, j);
                    pb.x[i + 1].at(r, j) = problem.clamp_state ? std::max(v, 0.0) : v;
                }
            }
        }
        check_finite_states(pb.x[i + 1], "sample_grid_paths");
    }
    return pb;
}

std::vector<double> malliavin_weight(const std::vector<double>& sigma_diag_at_start,
                                     const std::vector<double>& w_increment_first, double tau,
                                     double T_minus_t, double dt) {
    if (!(tau > 0.0) || !(T_minus_t > 0.0) || !(dt > 0.0))
        throw std::invalid_argument("malliavin_weight: denominators must be positive");
    if (sigma_diag_at_start.size() != w_increment_first.size())
        throw std::invalid_argument("malliavin_weight: dimension mismatch");
    const double denom = std::min(tau, std::min(T_minus_t, dt));
    std::vector<double> out(sigma_diag_at_start.size());
    for (size_t j = 0; j < out.size(); ++j) {
        if (sigma_diag_at_start[j] == 0.0)
            throw std::invalid_argument("malliavin_weight: singular sigma");
        out[j] = w_increment_first[j] / (sigma_diag_at_start[j] * denom);
    }
    return out;
}

}  // namespace semilin
