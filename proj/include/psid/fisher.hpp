#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

namespace psid::fim {

/// Noiseless model output for a parameter vector, on a fixed time grid.
using SimFn = std::function<std::vector<double>(const Eigen::VectorXd&)>;

/// Geometric grid of candidate relative perturbation sizes.
struct AlphaGrid {
    double lo = 1e-3;
    double hi = 1.0;
    int points = 50;

    std::vector<double> values() const;
};

/// Result of sizing one parameter's perturbation against the noise floor.
struct AlphaChoice {
    double alpha = 0.0;    // first feasible grid value
    double sigma_d = 0.0;  // RMS output deviation at that alpha
};

/// Numerical Fisher information of one channel at one evaluation point.
/// Rank-deficient estimates (fewer records than parameters) are legal: the
/// rank field drops below the parameter count and the bound and volume
/// entries that stop being defined are reported as +infinity.
struct FimReport {
    std::vector<std::string> paths;
    Eigen::VectorXd p;
    Eigen::VectorXd alpha;
    Eigen::VectorXd sigma_d;      // RMS output deviation per perturbation
    Eigen::MatrixXd nfim;
    Eigen::VectorXd ncrlb;        // diagonal of the inverse
    Eigen::VectorXd eigenvalues;  // ascending
    int rank = 0;
    double ellipsoid_volume = 0.0;
    double sigma_n = 0.0;
    int realizations = 0;
    std::string channel;
};

/// Single-parameter likelihood score from squared-error differences:
/// [sse(z, y_pert) - sse(z, y_base)] / (2 sigma_n^2 alpha p).
double score(const std::vector<double>& z, const std::vector<double>& y_base,
             const std::vector<double>& y_pert, double sigma_n, double alpha, double p);

/// Score vector across all parameters for one record.
Eigen::VectorXd score_vector(const std::vector<double>& z, const std::vector<double>& y_base,
                             const std::vector<std::vector<double>>& y_perts,
                             double sigma_n, const Eigen::VectorXd& alpha,
                             const Eigen::VectorXd& p);

/// Average outer product of score vectors.
Eigen::MatrixXd nfim_from_scores(const std::vector<Eigen::VectorXd>& scores);

/// RMS deviation between the perturbed and base outputs.
double output_deviation(const std::vector<double>& y_base, const std::vector<double>& y_pert);

/// Smallest grid perturbation whose output deviation clears the noise floor
/// by the margin: sigma_d > c_margin * sigma_n. Throws Study if none does.
AlphaChoice calibrate_alpha(const SimFn& simfn, const Eigen::VectorXd& p, int k,
                            double sigma_n, double c_margin = 1.05,
                            const AlphaGrid& grid = {});

/// Perturbed copy of p with entry k scaled by (1 + alpha).
Eigen::VectorXd perturbed(const Eigen::VectorXd& p, int k, double alpha);

/// Numerical rank: eigenvalues below 1e-13 of the largest count as zero. The
/// loose cutoff keeps heavily bias-dominated information matrices (eigenvalue
/// spreads of 1e11 and more are routine) distinct from the exact zeros of a
/// single-record outer product, which land near machine epsilon of the top.
int information_rank(const Eigen::VectorXd& eigenvalues);

/// Diagonal of the inverse information matrix. A singular matrix carries no
/// finite bound, so every entry is reported as +infinity instead.
Eigen::VectorXd ncrlb(const Eigen::MatrixXd& nfim);

/// Volume of the confidence ellipsoid implied by an information matrix:
/// 2 pi^(P/2) / (P Gamma(P/2)) * prod_i sqrt(1/lambda_i).
/// +infinity when the matrix is rank deficient (unbounded ellipsoid).
double ellipsoid_volume(const Eigen::MatrixXd& nfim);
double ellipsoid_volume(const Eigen::VectorXd& eigenvalues);

/// Monte-Carlo information estimate at p: synthetic noisy records around the
/// base output, one score vector each, averaged as an outer product.
FimReport empirical_nfim(const SimFn& simfn, const Eigen::VectorXd& p,
                         const std::vector<std::string>& paths,
                         const Eigen::VectorXd& alpha, double sigma_n,
                         int realizations, std::uint64_t seed);

/// Information estimate from a single given record (no synthetic noise).
FimReport record_nfim(const SimFn& simfn, const Eigen::VectorXd& p,
                      const std::vector<std::string>& paths,
                      const Eigen::VectorXd& alpha, double sigma_n,
                      const std::vector<double>& z);

nlohmann::json fim_report_to_json(const FimReport& r);
FimReport fim_report_from_json(const nlohmann::json& j);

} // namespace psid::fim
