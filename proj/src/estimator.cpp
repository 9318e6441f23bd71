#include "psid/estimator.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "psid/errors.hpp"

namespace psid::est {

namespace {

using EvalFn = std::function<const std::vector<double>&(const Eigen::VectorXd&)>;

std::string key_of(const Eigen::VectorXd& p) {
    return {reinterpret_cast<const char*>(p.data()),
            static_cast<std::size_t>(p.size()) * sizeof(double)};
}

Eigen::VectorXd residual_of(const std::vector<double>& z, const std::vector<double>& y) {
    if (z.size() != y.size())
        throw config_error("record and model output length mismatch (" +
                           std::to_string(z.size()) + " vs " + std::to_string(y.size()) + ")");
    Eigen::VectorXd r(static_cast<Eigen::Index>(z.size()));
    for (std::size_t i = 0; i < z.size(); ++i)
        r(static_cast<Eigen::Index>(i)) = z[i] - y[i];
    return r;
}

Eigen::MatrixXd jacobian_impl(const EvalFn& eval, const Eigen::VectorXd& p,
                              const FitOptions& opt, const std::vector<double>& y_base) {
    const auto n = static_cast<Eigen::Index>(y_base.size());
    Eigen::MatrixXd jac(n, p.size());
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        double h = opt.fd_rel_step * std::max(std::abs(p(k)), opt.scale_floor);
        if (opt.upper.size() == p.size() && p(k) + h > opt.upper(k)) h = -h;
        Eigen::VectorXd q = p;
        q(k) += h;
        const auto& y = eval(q);
        for (Eigen::Index i = 0; i < n; ++i)
            jac(i, k) = (y[static_cast<std::size_t>(i)] - y_base[static_cast<std::size_t>(i)]) / h;
    }
    return jac;
}

} // namespace

Eigen::VectorXd residuals(const SimFn& simfn, const std::vector<double>& z,
                          const Eigen::VectorXd& p) {
    return residual_of(z, simfn(p));
}

Eigen::MatrixXd jacobian_fd(const SimFn& simfn, const Eigen::VectorXd& p,
                            const FitOptions& opt) {
    std::vector<double> store;
    EvalFn eval = [&](const Eigen::VectorXd& q) -> const std::vector<double>& {
        store = simfn(q);
        return store;
    };
    const std::vector<double> y_base = simfn(p);
    return jacobian_impl(eval, p, opt, y_base);
}

FitResult fit(const SimFn& simfn, const std::vector<double>& z,
              const Eigen::VectorXd& p0, const FitOptions& opt) {
    const Eigen::Index np = p0.size();
    if (np == 0) throw config_error("fit needs at least one parameter");
    if (opt.lower.size() != np || opt.upper.size() != np)
        throw config_error("fit bounds must match the parameter count");
    for (Eigen::Index k = 0; k < np; ++k) {
        if (!(opt.lower(k) < opt.upper(k)))
            throw config_error("fit bounds inverted for parameter index " + std::to_string(k));
        if (p0(k) < opt.lower(k) || p0(k) > opt.upper(k))
            throw config_error("initial guess outside its bounds for parameter index " +
                               std::to_string(k));
    }

    std::unordered_map<std::string, std::vector<double>> cache;
    int n_sim = 0;
    EvalFn eval = [&](const Eigen::VectorXd& q) -> const std::vector<double>& {
        auto it = cache.find(key_of(q));
        if (it == cache.end()) {
            ++n_sim;
            it = cache.emplace(key_of(q), simfn(q)).first;
        }
        return it->second;
    };

    FitResult res;
    res.p = p0;

    Eigen::VectorXd scale(np);  // maps parameters onto an O(1) working space
    for (Eigen::Index k = 0; k < np; ++k)
        scale(k) = std::max(std::abs(res.p(k)), opt.scale_floor);

    std::vector<double> y_base = eval(res.p);
    Eigen::VectorXd r = residual_of(z, y_base);
    res.sse = r.squaredNorm();
    res.sse_history.push_back(res.sse);

    double mu = -1.0;
    const double tiny = std::numeric_limits<double>::min();
    while (res.iterations < opt.max_iter) {
        const Eigen::MatrixXd jac = jacobian_impl(eval, res.p, opt, y_base);
        const Eigen::MatrixXd jq = jac * scale.asDiagonal();
        const Eigen::MatrixXd a = jq.transpose() * jq;
        const Eigen::VectorXd g = jq.transpose() * r;
        if (mu < 0.0) mu = opt.mu0_scale * a.trace() / static_cast<double>(np);

        bool accepted = false;
        while (!accepted) {
            Eigen::MatrixXd damped = a;
            damped.diagonal().array() += mu;
            const Eigen::VectorXd dq = damped.ldlt().solve(g);
            const Eigen::VectorXd p_new =
                (res.p + scale.asDiagonal() * dq).cwiseMax(opt.lower).cwiseMin(opt.upper);
            const double step_len =
                ((p_new - res.p).cwiseQuotient(scale)).norm();
            if (step_len <= opt.step_tol) {
                res.converged = true;
                res.stop_reason = "step below tolerance";
                res.n_sim = n_sim;
                return res;
            }

            double sse_new = std::numeric_limits<double>::infinity();
            const std::vector<double>* y_new = nullptr;
            try {
                y_new = &eval(p_new);
                sse_new = residual_of(z, *y_new).squaredNorm();
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::Numeric) throw;
            }

            if (sse_new < res.sse) {
                const double rel = (res.sse - sse_new) / std::max(res.sse, tiny);
                res.p = p_new;
                y_base = *y_new;
                r = residual_of(z, y_base);
                res.sse = sse_new;
                res.sse_history.push_back(res.sse);
                ++res.iterations;
                mu = std::max(mu / opt.mu_growth, 1e-15);
                accepted = true;
                if (rel <= opt.rel_sse_tol) {
                    res.converged = true;
                    res.stop_reason = "relative SSE change below tolerance";
                    res.n_sim = n_sim;
                    return res;
                }
            } else {
                mu *= opt.mu_growth;
                if (mu > 1e30) {
                    res.stop_reason = "damping overflow";
                    res.n_sim = n_sim;
                    return res;
                }
            }
        }
    }
    res.stop_reason = "iteration limit";
    res.n_sim = n_sim;
    return res;
}

void write_fit_log_csv(const FitResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write fit log '" + path + "'");
    out << "iter,sse\n";
    for (std::size_t i = 0; i < r.sse_history.size(); ++i) {
        char buf[32];
        const auto res = std::to_chars(buf, buf + sizeof(buf), r.sse_history[i]);
        out << i << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
    }
    if (!out) throw io_error("write failed for fit log '" + path + "'");
}

} // namespace psid::est
