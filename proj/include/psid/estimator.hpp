#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace psid::est {

/// Noiseless model output for a parameter vector, on a fixed time grid.
using SimFn = std::function<std::vector<double>(const Eigen::VectorXd&)>;

struct FitOptions {
    Eigen::VectorXd lower;       // elementwise box bounds, sized like p0
    Eigen::VectorXd upper;
    int max_iter = 100;
    double rel_sse_tol = 1e-6;   // stop when the accepted SSE improves less than this
    double step_tol = 1e-6;      // stop when the scaled step is shorter than this
    double fd_rel_step = 1e-4;   // forward-difference Jacobian step, relative
    double mu0_scale = 1e-3;     // initial damping relative to trace(JtJ)/P
    double mu_growth = 10.0;
    double scale_floor = 1e-8;   // guards scaling of near-zero parameters
};

struct FitResult {
    Eigen::VectorXd p;
    double sse = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string stop_reason;
    std::vector<double> sse_history;  // SSE after each accepted step, starting at p0
    int n_sim = 0;                    // model evaluations spent (cache misses)
};

/// Residual vector z - y(p).
Eigen::VectorXd residuals(const SimFn& simfn, const std::vector<double>& z,
                          const Eigen::VectorXd& p);

/// Forward-difference Jacobian of the model output (steps backward when a
/// forward step would leave the upper bound).
Eigen::MatrixXd jacobian_fd(const SimFn& simfn, const Eigen::VectorXd& p,
                            const FitOptions& opt);

/// Damped least squares with box projection. Candidate evaluations that throw
/// Numeric count as rejected steps rather than aborting the fit.
FitResult fit(const SimFn& simfn, const std::vector<double>& z,
              const Eigen::VectorXd& p0, const FitOptions& opt);

void write_fit_log_csv(const FitResult& r, const std::string& path);

} // namespace psid::est
