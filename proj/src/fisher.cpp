#include "psid/fisher.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"
#include "psid/measure.hpp"
#include "psid/rng.hpp"

namespace psid::fim {

std::vector<double> AlphaGrid::values() const {
    if (points < 2 || lo <= 0.0 || hi <= lo)
        throw config_error("perturbation grid needs 0 < lo < hi and at least two points");
    std::vector<double> out(static_cast<std::size_t>(points));
    const double ratio = std::log(hi / lo) / static_cast<double>(points - 1);
    for (int i = 0; i < points; ++i)
        out[static_cast<std::size_t>(i)] = lo * std::exp(ratio * i);
    out.back() = hi;
    return out;
}

double score(const std::vector<double>& z, const std::vector<double>& y_base,
             const std::vector<double>& y_pert, double sigma_n, double alpha, double p) {
    if (sigma_n <= 0.0) throw config_error("score needs a positive noise level");
    const double denom = 2.0 * sigma_n * sigma_n * alpha * p;
    if (denom == 0.0) throw config_error("score perturbation alpha*p must be nonzero");
    return (meas::sse(z, y_pert) - meas::sse(z, y_base)) / denom;
}

Eigen::VectorXd score_vector(const std::vector<double>& z, const std::vector<double>& y_base,
                             const std::vector<std::vector<double>>& y_perts,
                             double sigma_n, const Eigen::VectorXd& alpha,
                             const Eigen::VectorXd& p) {
    const auto np = static_cast<Eigen::Index>(y_perts.size());
    if (alpha.size() != np || p.size() != np)
        throw config_error("score vector inputs disagree on parameter count");
    Eigen::VectorXd s(np);
    for (Eigen::Index k = 0; k < np; ++k)
        s(k) = score(z, y_base, y_perts[static_cast<std::size_t>(k)], sigma_n, alpha(k), p(k));
    return s;
}

Eigen::MatrixXd nfim_from_scores(const std::vector<Eigen::VectorXd>& scores) {
    if (scores.empty()) throw config_error("cannot average an empty score set");
    const Eigen::Index np = scores.front().size();
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(np, np);
    for (const auto& s : scores) {
        if (s.size() != np) throw config_error("score vectors disagree on parameter count");
        acc.noalias() += s * s.transpose();
    }
    return acc / static_cast<double>(scores.size());
}

double output_deviation(const std::vector<double>& y_base, const std::vector<double>& y_pert) {
    if (y_base.size() != y_pert.size() || y_base.empty())
        throw config_error("deviation needs two equal-length non-empty outputs");
    double acc = 0.0;
    for (std::size_t k = 0; k < y_base.size(); ++k) {
        const double d = y_pert[k] - y_base[k];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(y_base.size()));
}

Eigen::VectorXd perturbed(const Eigen::VectorXd& p, int k, double alpha) {
    Eigen::VectorXd q = p;
    q(k) *= (1.0 + alpha);
    return q;
}

AlphaChoice calibrate_alpha(const SimFn& simfn, const Eigen::VectorXd& p, int k,
                            double sigma_n, double c_margin, const AlphaGrid& grid) {
    if (k < 0 || k >= p.size()) throw config_error("perturbation index out of range");
    if (p(k) == 0.0)
        throw study_error("relative perturbation of a zero-valued parameter is undefined");
    const std::vector<double> y_base = simfn(p);
    for (const double alpha : grid.values()) {
        const std::vector<double> y_pert = simfn(perturbed(p, k, alpha));
        const double sd = output_deviation(y_base, y_pert);
        if (sd > c_margin * sigma_n) return {alpha, sd};
    }
    throw study_error("no perturbation in the grid lifts the output above the noise floor "
                      "for parameter index " + std::to_string(k));
}

int information_rank(const Eigen::VectorXd& eigenvalues) {
    const double lmax = eigenvalues.size() ? eigenvalues.maxCoeff() : 0.0;
    const double floor = 1e-13 * lmax;
    int rank = 0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
        if (eigenvalues(i) > floor && eigenvalues(i) > 0.0) ++rank;
    return rank;
}

Eigen::VectorXd ncrlb(const Eigen::MatrixXd& nfim) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(nfim);
    if (!lu.isInvertible())
        return Eigen::VectorXd::Constant(nfim.rows(),
                                         std::numeric_limits<double>::infinity());
    const Eigen::MatrixXd inv = lu.inverse();
    return inv.diagonal();
}

double ellipsoid_volume(const Eigen::VectorXd& eigenvalues) {
    const auto np = static_cast<double>(eigenvalues.size());
    if (eigenvalues.size() == 0) throw config_error("ellipsoid volume of an empty matrix");
    if (information_rank(eigenvalues) < eigenvalues.size())
        return std::numeric_limits<double>::infinity();
    double prod = 1.0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
        prod *= std::sqrt(1.0 / eigenvalues(i));
    const double half = np / 2.0;
    return 2.0 * std::pow(std::numbers::pi, half) / (np * std::tgamma(half)) * prod;
}

double ellipsoid_volume(const Eigen::MatrixXd& nfim) {
    if (nfim.size() == 0) throw config_error("ellipsoid volume of an empty matrix");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(nfim);
    if (es.info() != Eigen::Success)
        throw numeric_error("eigendecomposition of the information matrix failed");
    return ellipsoid_volume(Eigen::VectorXd(es.eigenvalues()));
}

namespace {

FimReport finish_report(const Eigen::VectorXd& p, const std::vector<std::string>& paths,
                        const Eigen::VectorXd& alpha, double sigma_n,
                        const std::vector<double>& y_base,
                        const std::vector<std::vector<double>>& y_perts,
                        Eigen::MatrixXd nfim, int realizations) {
    FimReport r;
    r.paths = paths;
    r.p = p;
    r.alpha = alpha;
    r.sigma_d.resize(static_cast<Eigen::Index>(y_perts.size()));
    for (std::size_t k = 0; k < y_perts.size(); ++k)
        r.sigma_d(static_cast<Eigen::Index>(k)) = output_deviation(y_base, y_perts[k]);
    r.nfim = std::move(nfim);
    r.sigma_n = sigma_n;
    r.realizations = realizations;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.nfim);
    if (es.info() != Eigen::Success)
        throw numeric_error("eigendecomposition of the information matrix failed");
    r.eigenvalues = es.eigenvalues();
    r.rank = information_rank(r.eigenvalues);
    r.ellipsoid_volume = ellipsoid_volume(r.eigenvalues);
    r.ncrlb = ncrlb(r.nfim);
    return r;
}

std::vector<std::vector<double>> perturbed_outputs(const SimFn& simfn, const Eigen::VectorXd& p,
                                                   const Eigen::VectorXd& alpha) {
    std::vector<std::vector<double>> y_perts;
    y_perts.reserve(static_cast<std::size_t>(p.size()));
    for (Eigen::Index k = 0; k < p.size(); ++k)
        y_perts.push_back(simfn(perturbed(p, static_cast<int>(k), alpha(k))));
    return y_perts;
}

} // namespace

FimReport empirical_nfim(const SimFn& simfn, const Eigen::VectorXd& p,
                         const std::vector<std::string>& paths,
                         const Eigen::VectorXd& alpha, double sigma_n,
                         int realizations, std::uint64_t seed) {
    if (realizations < 1) throw config_error("at least one noise realization is required");
    if (sigma_n <= 0.0) throw config_error("noise level must be positive");
    const std::vector<double> y_base = simfn(p);
    const auto y_perts = perturbed_outputs(simfn, p, alpha);

    std::vector<Eigen::VectorXd> scores;
    scores.reserve(static_cast<std::size_t>(realizations));
    std::vector<double> z(y_base.size());
    for (int j = 0; j < realizations; ++j) {
        GaussianRng rng(derive_seed(seed, static_cast<std::uint64_t>(j)));
        for (std::size_t i = 0; i < y_base.size(); ++i)
            z[i] = y_base[i] + sigma_n * rng.normal();
        scores.push_back(score_vector(z, y_base, y_perts, sigma_n, alpha, p));
    }
    return finish_report(p, paths, alpha, sigma_n, y_base, y_perts, nfim_from_scores(scores),
                         realizations);
}

FimReport record_nfim(const SimFn& simfn, const Eigen::VectorXd& p,
                      const std::vector<std::string>& paths,
                      const Eigen::VectorXd& alpha, double sigma_n,
                      const std::vector<double>& z) {
    const std::vector<double> y_base = simfn(p);
    const auto y_perts = perturbed_outputs(simfn, p, alpha);
    std::vector<Eigen::VectorXd> scores{score_vector(z, y_base, y_perts, sigma_n, alpha, p)};
    return finish_report(p, paths, alpha, sigma_n, y_base, y_perts, nfim_from_scores(scores), 1);
}

using nlohmann::json;

namespace {

// JSON has no literal for infinities; nlohmann prints them as null, which
// would not survive a round trip. Non-finite entries are written as null
// deliberately and read back as +infinity (the only non-finite value the
// reports produce).
json num_to_json(double v) {
    if (std::isfinite(v)) return json(v);
    return json(nullptr);
}

double num_from_json(const json& x) {
    if (x.is_null()) return std::numeric_limits<double>::infinity();
    return x.get<double>();
}

json vec_to_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num_to_json(v(i)));
    return a;
}

Eigen::VectorXd vec_from_json(const json& a) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
    Eigen::Index i = 0;
    for (const auto& x : a) v(i++) = num_from_json(x);
    return v;
}

} // namespace

json fim_report_to_json(const FimReport& r) {
    json j;
    j["channel"] = r.channel;
    j["paths"] = r.paths;
    j["p"] = vec_to_json(r.p);
    j["alpha"] = vec_to_json(r.alpha);
    j["sigma_d"] = vec_to_json(r.sigma_d);
    j["sigma_n"] = r.sigma_n;
    j["realizations"] = r.realizations;
    json rows = json::array();
    for (Eigen::Index i = 0; i < r.nfim.rows(); ++i)
        rows.push_back(vec_to_json(r.nfim.row(i).transpose()));
    j["nfim"] = rows;
    j["ncrlb"] = vec_to_json(r.ncrlb);
    j["eigenvalues"] = vec_to_json(r.eigenvalues);
    j["rank"] = r.rank;
    j["ellipsoid_volume"] = num_to_json(r.ellipsoid_volume);
    return j;
}

FimReport fim_report_from_json(const json& j) {
    FimReport r;
    try {
        r.channel = j.value("channel", std::string{});
        r.paths = j.at("paths").get<std::vector<std::string>>();
        r.p = vec_from_json(j.at("p"));
        r.alpha = vec_from_json(j.at("alpha"));
        r.sigma_d = vec_from_json(j.at("sigma_d"));
        r.sigma_n = j.at("sigma_n").get<double>();
        r.realizations = j.at("realizations").get<int>();
        const auto& rows = j.at("nfim");
        r.nfim.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows.size()));
        Eigen::Index i = 0;
        for (const auto& row : rows) r.nfim.row(i++) = vec_from_json(row).transpose();
        r.ncrlb = vec_from_json(j.at("ncrlb"));
        r.eigenvalues = vec_from_json(j.at("eigenvalues"));
        r.rank = j.at("rank").get<int>();
        r.ellipsoid_volume = num_from_json(j.at("ellipsoid_volume"));
    } catch (const json::exception& e) {
        throw io_error(std::string("malformed information report: ") + e.what());
    }
    return r;
}

} // namespace psid::fim
