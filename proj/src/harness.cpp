#include "psid/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"
#include "psid/rng.hpp"

namespace psid::hrn {

using nlohmann::json;

namespace {

Eigen::VectorXd vec_from_json(const json& a) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
    Eigen::Index i = 0;
    for (const auto& x : a) v(i++) = x.get<double>();
    return v;
}

Eigen::VectorXd vec1(double x) {
    Eigen::VectorXd v(1);
    v(0) = x;
    return v;
}

void append_double(std::string& out, double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

} // namespace

StudyConfig study_config_from_json(const json& j) {
    StudyConfig cfg;
    try {
        if (j.contains("system")) {
            if (j["system"].is_string())
                cfg.system = model::load_system(j["system"].get<std::string>());
            else
                cfg.system = model::system_from_json(j["system"]);
        } else {
            cfg.system = model::ieee9_preset();
        }
        cfg.scenario = j.contains("scenario")
                           ? sim::scenario_from_json(j["scenario"], cfg.system)
                           : sim::Scenario::from_model(cfg.system);

        if (j.contains("channels"))
            cfg.channels = j["channels"].get<std::vector<std::string>>();
        else if (j.contains("channel"))
            cfg.channels = {j["channel"].get<std::string>()};
        for (const auto& c : cfg.channels) sim::ChannelSpec::parse(c);

        if (j.contains("params")) cfg.params = j["params"].get<std::vector<std::string>>();
        const auto np = static_cast<Eigen::Index>(cfg.params.size());
        cfg.p_true.resize(np);
        for (Eigen::Index k = 0; k < np; ++k)
            cfg.p_true(k) = model::get_parameter(cfg.system, cfg.params[static_cast<std::size_t>(k)]);
        if (j.contains("p_true")) {
            if (j["p_true"].size() != cfg.params.size())
                throw config_error("p_true length does not match params");
            cfg.p_true = vec_from_json(j["p_true"]);
        }
        cfg.p0 = j.contains("p0") ? vec_from_json(j["p0"]) : cfg.p_true;
        if (cfg.p0.size() != np) throw config_error("p0 length does not match params");

        double scale_lo = 0.5, scale_hi = 1.5;
        if (j.contains("bounds")) {
            const auto& jb = j["bounds"];
            if (jb.contains("lower") || jb.contains("upper")) {
                cfg.lower = vec_from_json(jb.at("lower"));
                cfg.upper = vec_from_json(jb.at("upper"));
            } else {
                scale_lo = jb.value("scale_lo", scale_lo);
                scale_hi = jb.value("scale_hi", scale_hi);
            }
        }
        if (cfg.lower.size() != np) {
            cfg.lower = (scale_lo * cfg.p0).cwiseMin(scale_hi * cfg.p0);
            cfg.upper = (scale_lo * cfg.p0).cwiseMax(scale_hi * cfg.p0);
        }
        if (cfg.upper.size() != np) throw config_error("bounds length does not match params");

        const std::string mode = j.value("mode", std::string("single"));
        if (mode == "joint")
            cfg.joint = true;
        else if (mode != "single")
            throw config_error("study mode must be 'single' or 'joint'");
        cfg.snr_db = j.value("snr_db", cfg.snr_db);
        cfg.trials = j.value("trials", cfg.trials);
        cfg.nfim_realizations = j.value("nfim_realizations", cfg.nfim_realizations);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.workers = j.value("workers", cfg.workers);
        cfg.measurement = j.value("measurement", cfg.measurement);

        if (j.contains("alpha")) {
            const auto& ja = j["alpha"];
            cfg.alpha.auto_size = ja.value("auto", cfg.alpha.auto_size);
            if (ja.contains("value")) {
                cfg.alpha.value = ja["value"].get<double>();
                cfg.alpha.auto_size = ja.value("auto", false);
            }
            cfg.alpha.c_margin = ja.value("c_margin", cfg.alpha.c_margin);
            if (ja.contains("grid")) {
                const auto& jg = ja["grid"];
                cfg.alpha.grid.lo = jg.value("lo", cfg.alpha.grid.lo);
                cfg.alpha.grid.hi = jg.value("hi", cfg.alpha.grid.hi);
                cfg.alpha.grid.points = jg.value("points", cfg.alpha.grid.points);
            }
            if (ja.contains("fallback"))
                for (const auto& [key, val] : ja["fallback"].items()) {
                    const double a = val.get<double>();
                    if (!(a > 0.0))
                        throw config_error("alpha fallback for '" + key + "' must be positive");
                    cfg.alpha.fallback[key] = a;
                }
        }
        if (j.contains("fit")) {
            const auto& jf = j["fit"];
            cfg.fit.max_iter = jf.value("max_iter", cfg.fit.max_iter);
            cfg.fit.rel_sse_tol = jf.value("rel_sse_tol", cfg.fit.rel_sse_tol);
            cfg.fit.step_tol = jf.value("step_tol", cfg.fit.step_tol);
            cfg.fit.fd_rel_step = jf.value("fd_rel_step", cfg.fit.fd_rel_step);
        }
        if (j.contains("pu_base"))
            for (const auto& [key, val] : j["pu_base"].items())
                cfg.pu_base[key] = val.get<double>();
    } catch (const json::exception& e) {
        throw config_error(std::string("malformed study config: ") + e.what());
    }
    if (cfg.trials < 1) throw config_error("trials must be at least 1");
    if (cfg.workers < 1) throw config_error("workers must be at least 1");
    if (cfg.nfim_realizations < 1) throw config_error("nfim_realizations must be at least 1");
    return cfg;
}

StudyConfig load_study_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open study config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw config_error("study config '" + path + "' is not valid JSON: " + e.what());
    }
    return study_config_from_json(j);
}

fim::SimFn make_simfn(const model::SystemModel& system, const sim::Scenario& scenario,
                      const std::string& channel, const std::vector<std::string>& paths) {
    const sim::ChannelSpec spec = sim::ChannelSpec::parse(channel);
    sim::Scenario sc = scenario;
    sc.record = {spec};
    sc.record_internal = false;
    for (const auto& path : paths) model::get_parameter(system, path);  // validate early
    return [base = system, sc, paths, col = spec.str()](const Eigen::VectorXd& p) {
        if (static_cast<std::size_t>(p.size()) != paths.size())
            throw config_error("parameter vector length does not match the path list");
        model::SystemModel m = base;
        for (std::size_t k = 0; k < paths.size(); ++k)
            model::set_parameter(m, paths[k], p(static_cast<Eigen::Index>(k)));
        return sim::simulate(m, sc).column(col);
    };
}

fim::SimFn memoize(fim::SimFn inner) {
    struct Shared {
        std::mutex mtx;
        std::unordered_map<std::string, std::shared_ptr<const std::vector<double>>> map;
    };
    auto shared = std::make_shared<Shared>();
    return [inner = std::move(inner), shared](const Eigen::VectorXd& p) {
        std::string key(reinterpret_cast<const char*>(p.data()),
                        static_cast<std::size_t>(p.size()) * sizeof(double));
        {
            std::lock_guard lk(shared->mtx);
            if (auto it = shared->map.find(key); it != shared->map.end()) return *it->second;
        }
        auto value = std::make_shared<const std::vector<double>>(inner(p));
        std::lock_guard lk(shared->mtx);
        return *shared->map.emplace(std::move(key), std::move(value)).first->second;
    };
}

void parallel_for(int n, int workers, const std::function<void(int)>& body) {
    if (n <= 0) return;
    workers = std::clamp(workers, 1, n);
    if (workers == 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    body(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& err : errors)
        if (err) std::rethrow_exception(err);
}

fim::AlphaChoice choose_alpha(const fim::SimFn& simfn, const Eigen::VectorXd& p0, int k,
                              const std::string& path, double sigma_n,
                              const AlphaPolicy& policy) {
    if (policy.auto_size) {
        try {
            return fim::calibrate_alpha(simfn, p0, k, sigma_n, policy.c_margin, policy.grid);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Study || !policy.fallback.count(path)) throw;
        }
    }
    fim::AlphaChoice choice;
    choice.alpha = policy.auto_size ? policy.fallback.at(path) : policy.value;
    choice.sigma_d = fim::output_deviation(simfn(p0), simfn(fim::perturbed(p0, k, choice.alpha)));
    return choice;
}

// --- one-shot -----------------------------------------------------------------

namespace {

OneShotResult one_shot_core(const StudyConfig& cfg, const std::string& channel,
                            const fim::SimFn& simfn, const std::vector<double>& z,
                            double sigma_n) {
    if (cfg.params.empty()) throw config_error("no parameters listed for the fit");
    OneShotResult r;
    r.channel = channel;
    r.params = cfg.params;
    r.p_true = cfg.p_true;
    r.p0 = cfg.p0;
    r.sigma_n = sigma_n;

    const Eigen::Index np = cfg.p0.size();
    r.alpha.resize(np);
    for (Eigen::Index k = 0; k < np; ++k)
        r.alpha(k) = choose_alpha(simfn, cfg.p0, static_cast<int>(k),
                                  cfg.params[static_cast<std::size_t>(k)], sigma_n, cfg.alpha)
                         .alpha;

    est::FitOptions fo = cfg.fit;
    fo.lower = cfg.lower;
    fo.upper = cfg.upper;
    r.fit = est::fit(simfn, z, cfg.p0, fo);
    r.fim = fim::record_nfim(simfn, r.fit.p, cfg.params, r.alpha, sigma_n, z);
    r.fim.channel = channel;
    return r;
}

} // namespace

OneShotResult one_shot(const StudyConfig& cfg, std::uint64_t seed) {
    if (cfg.channels.empty()) throw config_error("no channel listed");
    const std::string channel = cfg.channels.front();
    const auto simfn = memoize(make_simfn(cfg.system, cfg.scenario, channel, cfg.params));
    const auto y_true = simfn(cfg.p_true);
    const double sigma_n = meas::noise_sigma_from_snr(y_true, cfg.snr_db);
    std::vector<double> z(y_true.size());
    GaussianRng rng(seed);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = y_true[i] + sigma_n * rng.normal();
    return one_shot_core(cfg, channel, simfn, z, sigma_n);
}

OneShotResult one_shot_from_record(const StudyConfig& cfg, const meas::MeasurementSet& record) {
    const std::string channel = record.channel.str();
    const auto simfn = memoize(make_simfn(cfg.system, cfg.scenario, channel, cfg.params));
    return one_shot_core(cfg, channel, simfn, record.z, record.sigma_n);
}

json one_shot_to_json(const OneShotResult& r) {
    json j;
    j["channel"] = r.channel;
    j["params"] = r.params;
    json jt = json::array(), j0 = json::array(), jh = json::array(), ja = json::array();
    for (Eigen::Index k = 0; k < r.p_true.size(); ++k) {
        jt.push_back(r.p_true(k));
        j0.push_back(r.p0(k));
        jh.push_back(r.fit.p(k));
        ja.push_back(r.alpha(k));
    }
    j["p_true"] = jt;
    j["p0"] = j0;
    j["p_hat"] = jh;
    j["alpha"] = ja;
    j["sigma_n"] = r.sigma_n;
    j["sse"] = r.fit.sse;
    j["iterations"] = r.fit.iterations;
    j["converged"] = r.fit.converged;
    j["stop_reason"] = r.fit.stop_reason;
    j["sse_history"] = r.fit.sse_history;
    j["fim"] = fim::fim_report_to_json(r.fim);
    return j;
}

// --- selection ------------------------------------------------------------------

SelectionReport select_channels(const StudyConfig& cfg) {
    if (cfg.channels.empty()) throw config_error("no channels listed for selection");
    if (cfg.params.empty()) throw config_error("no parameters listed for selection");
    SelectionReport rep;
    rep.params = cfg.params;
    for (std::size_t ci = 0; ci < cfg.channels.size(); ++ci) {
        const auto& channel = cfg.channels[ci];
        SelectionEntry entry;
        entry.channel = channel;
        try {
            const auto simfn = memoize(make_simfn(cfg.system, cfg.scenario, channel, cfg.params));
            const auto y0 = simfn(cfg.p0);
            const double sigma_n = meas::noise_sigma_from_snr(y0, cfg.snr_db);
            Eigen::VectorXd alpha(cfg.p0.size());
            for (Eigen::Index k = 0; k < cfg.p0.size(); ++k)
                alpha(k) = choose_alpha(simfn, cfg.p0, static_cast<int>(k),
                                        cfg.params[static_cast<std::size_t>(k)], sigma_n,
                                        cfg.alpha)
                               .alpha;
            fim::FimReport fr = fim::empirical_nfim(simfn, cfg.p0, cfg.params, alpha, sigma_n,
                                                    cfg.nfim_realizations,
                                                    derive_seed(cfg.seed, ci));
            fr.channel = channel;
            entry.ellipsoid_volume = fr.ellipsoid_volume;
            entry.min_eigenvalue = fr.eigenvalues(0);
            entry.report = std::move(fr);
        } catch (const Error& e) {
            // a parameter this channel cannot see: rank it last, keep the message
            if (e.kind() != ErrorKind::Study) throw;
            entry.ellipsoid_volume = std::numeric_limits<double>::infinity();
            entry.min_eigenvalue = 0.0;
            entry.report.channel = channel;
            entry.report.paths = cfg.params;
        }
        rep.ranked.push_back(std::move(entry));
    }
    std::stable_sort(rep.ranked.begin(), rep.ranked.end(),
                     [](const SelectionEntry& a, const SelectionEntry& b) {
                         return a.ellipsoid_volume < b.ellipsoid_volume;
                     });
    if (!std::isfinite(rep.ranked.front().ellipsoid_volume))
        throw study_error("no candidate channel carries information on all parameters "
                          "at this noise level");
    return rep;
}

json selection_to_json(const SelectionReport& r) {
    json j;
    j["params"] = r.params;
    j["ranked"] = json::array();
    for (const auto& e : r.ranked) {
        json je;
        je["channel"] = e.channel;
        je["ellipsoid_volume"] = std::isfinite(e.ellipsoid_volume)
                                     ? json(e.ellipsoid_volume)
                                     : json(nullptr);
        je["feasible"] = std::isfinite(e.ellipsoid_volume);
        je["min_eigenvalue"] = e.min_eigenvalue;
        je["fim"] = fim::fim_report_to_json(e.report);
        j["ranked"].push_back(std::move(je));
    }
    return j;
}

Algorithm1Result run_algorithm1(const StudyConfig& cfg) {
    Algorithm1Result r;
    r.selection = select_channels(cfg);
    r.selected = r.selection.ranked.front().channel;
    StudyConfig sub = cfg;
    sub.channels = {r.selected};
    r.fit = one_shot(sub, derive_seed(cfg.seed, cfg.channels.size()));
    return r;
}

json algorithm1_to_json(const Algorithm1Result& r) {
    json j;
    j["selected"] = r.selected;
    j["selection"] = selection_to_json(r.selection);
    j["fit"] = one_shot_to_json(r.fit);
    return j;
}

// --- perturbation sweep -----------------------------------------------------------

SweepReport perturbation_sweep(const StudyConfig& cfg) {
    if (cfg.channels.empty()) throw config_error("no channel listed for the sweep");
    if (cfg.params.empty()) throw config_error("no parameters listed for the sweep");
    SweepReport rep;
    rep.channel = cfg.channels.front();
    rep.c_margin = cfg.alpha.c_margin;
    const auto simfn = memoize(make_simfn(cfg.system, cfg.scenario, rep.channel, cfg.params));
    const auto y_base = simfn(cfg.p0);
    const double sigma_n = meas::noise_sigma_from_snr(y_base, cfg.snr_db);
    const auto alphas = cfg.alpha.grid.values();

    std::size_t row_index = 0;
    for (std::size_t k = 0; k < cfg.params.size(); ++k) {
        const std::size_t first_row = rep.rows.size();
        for (const double alpha : alphas) {
            const auto y_pert = simfn(fim::perturbed(cfg.p0, static_cast<int>(k), alpha));
            SweepRow row;
            row.param = cfg.params[k];
            row.alpha = alpha;
            row.sigma_d = fim::output_deviation(y_base, y_pert);
            row.sigma_n = sigma_n;
            row.feasible = row.sigma_d > cfg.alpha.c_margin * sigma_n;

            double acc = 0.0;
            std::vector<double> z(y_base.size());
            const std::uint64_t row_seed = derive_seed(cfg.seed, row_index);
            for (int j = 0; j < cfg.nfim_realizations; ++j) {
                GaussianRng rng(derive_seed(row_seed, static_cast<std::uint64_t>(j)));
                for (std::size_t i = 0; i < z.size(); ++i)
                    z[i] = y_base[i] + sigma_n * rng.normal();
                const double s = fim::score(z, y_base, y_pert, sigma_n, alpha,
                                            cfg.p0(static_cast<Eigen::Index>(k)));
                acc += s * s;
            }
            row.nfim = acc / static_cast<double>(cfg.nfim_realizations);
            rep.rows.push_back(row);
            ++row_index;
        }
        // normalize the block by its row nearest a 100% perturbation
        std::size_t ref_i = first_row;
        for (std::size_t i = first_row; i < rep.rows.size(); ++i)
            if (std::abs(std::log(rep.rows[i].alpha)) < std::abs(std::log(rep.rows[ref_i].alpha)))
                ref_i = i;
        const double ref = rep.rows[ref_i].nfim;
        for (std::size_t i = first_row; i < rep.rows.size(); ++i)
            rep.rows[i].nfim_norm = ref != 0.0 ? rep.rows[i].nfim / ref : 0.0;
    }
    return rep;
}

void write_sweep_csv(const SweepReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write sweep file '" + path + "'");
    out << "param,alpha,sigma_d,sigma_n,feasible,nfim,nfim_norm\n";
    std::string line;
    for (const auto& row : r.rows) {
        line.clear();
        line += row.param;
        line += ',';
        append_double(line, row.alpha);
        line += ',';
        append_double(line, row.sigma_d);
        line += ',';
        append_double(line, row.sigma_n);
        line += ',';
        line += row.feasible ? '1' : '0';
        line += ',';
        append_double(line, row.nfim);
        line += ',';
        append_double(line, row.nfim_norm);
        line += '\n';
        out << line;
    }
    if (!out) throw io_error("write failed for sweep file '" + path + "'");
}

// --- Monte-Carlo study --------------------------------------------------------------

namespace {

double resolve_pu_base(const StudyConfig& cfg, const std::string& param, double p_true) {
    const auto it = cfg.pu_base.find(param);
    const double base = it != cfg.pu_base.end() ? it->second : std::abs(p_true);
    if (base <= 0.0) throw config_error("per-unit base for " + param + " must be positive");
    return base;
}

/// Mean, bias, relative error and sample variance over the successful trials.
void aggregate_cell(CellResult& cell, int trials) {
    double sum = 0.0;
    int n_ok = 0;
    for (const auto& tr : cell.trials) {
        if (!tr.ok) continue;
        sum += tr.p_hat;
        ++n_ok;
    }
    cell.failed = trials - n_ok;
    if (cell.failed * 10 > trials)
        throw study_error("more than 10% of trials failed for " + cell.param + " on " +
                          cell.channel + " (" + std::to_string(cell.failed) + " of " +
                          std::to_string(trials) + ")");
    const double n = static_cast<double>(n_ok);
    cell.mean_est = sum / n;
    cell.bias = cell.mean_est - cell.p_true;
    double ss = 0.0, rel = 0.0;
    for (const auto& tr : cell.trials) {
        if (!tr.ok) continue;
        const double d = tr.p_hat - cell.mean_est;
        ss += d * d;
        rel += std::abs(tr.p_hat - cell.p_true) / std::abs(cell.p_true);
    }
    cell.avg_rel_err_pct = 100.0 * rel / n;
    cell.variance_defined = n_ok > 1;
    cell.variance = cell.variance_defined ? ss / (n - 1.0)
                                          : std::numeric_limits<double>::quiet_NaN();
    cell.variance_pu = cell.variance / (cell.pu_base * cell.pu_base);
}

/// 1-based per-channel ranks of ellipsoid volume and per-unit variance.
void rank_cells(StudyReport& rep) {
    for (const auto& channel : rep.channels) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < rep.cells.size(); ++i)
            if (rep.cells[i].channel == channel) idx.push_back(i);

        std::vector<std::size_t> by_ve = idx;
        std::stable_sort(by_ve.begin(), by_ve.end(), [&](std::size_t a, std::size_t b) {
            return rep.cells[a].avg_ve < rep.cells[b].avg_ve;
        });
        for (std::size_t r = 0; r < by_ve.size(); ++r)
            rep.cells[by_ve[r]].rank_ve = static_cast<int>(r) + 1;

        std::vector<std::size_t> by_var;
        for (const std::size_t i : idx)
            if (rep.cells[i].variance_defined) by_var.push_back(i);
        std::stable_sort(by_var.begin(), by_var.end(), [&](std::size_t a, std::size_t b) {
            return rep.cells[a].variance < rep.cells[b].variance;
        });
        for (std::size_t r = 0; r < by_var.size(); ++r)
            rep.cells[by_var[r]].rank_var = static_cast<int>(r) + 1;
    }
}

std::string bytes_of(const Eigen::VectorXd& p) {
    return {reinterpret_cast<const char*>(p.data()),
            static_cast<std::size_t>(p.size()) * sizeof(double)};
}

struct JointTrial {
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    Eigen::VectorXd p_hat;
    double sse = 0.0;
    int iterations = 0;
    bool converged = false;
    Eigen::MatrixXd nfim;
};

void run_single_study(const StudyConfig& cfg, StudyReport& rep) {
    std::uint64_t cell_index = 0;
    for (const auto& channel : cfg.channels) {
        for (std::size_t pi = 0; pi < cfg.params.size(); ++pi, ++cell_index) {
            const auto& param = cfg.params[pi];
            const double p_true = cfg.p_true(static_cast<Eigen::Index>(pi));
            const double p0 = cfg.p0(static_cast<Eigen::Index>(pi));

            const auto inner = make_simfn(cfg.system, cfg.scenario, channel, {param});
            const auto warm = memoize(inner);
            const auto y_true = warm(vec1(p_true));
            const double sigma_n = meas::noise_sigma_from_snr(y_true, cfg.snr_db);

            CellResult cell;
            cell.channel = channel;
            cell.param = param;
            cell.p_true = p_true;
            cell.p0 = p0;
            cell.sigma_n = sigma_n;
            cell.pu_base = resolve_pu_base(cfg, param, p_true);
            const auto choice = choose_alpha(warm, vec1(p0), 0, param, sigma_n, cfg.alpha);
            cell.alpha = choice.alpha;
            cell.sigma_d = choice.sigma_d;

            est::FitOptions fo = cfg.fit;
            fo.lower = vec1(cfg.lower(static_cast<Eigen::Index>(pi)));
            fo.upper = vec1(cfg.upper(static_cast<Eigen::Index>(pi)));

            // read-only cache shared by all trials of this cell: the truth, the
            // start point, and the first-iteration difference point of the fit,
            // which is the same in every trial
            auto y_true_ptr = std::make_shared<const std::vector<double>>(y_true);
            auto y_p0_ptr = std::make_shared<const std::vector<double>>(warm(vec1(p0)));
            const std::string key_true(reinterpret_cast<const char*>(&p_true), sizeof(double));
            const std::string key_p0(reinterpret_cast<const char*>(&p0), sizeof(double));
            double h0 = fo.fd_rel_step * std::max(std::abs(p0), fo.scale_floor);
            if (p0 + h0 > fo.upper(0)) h0 = -h0;
            const double p0_fd = p0 + h0;
            auto y_fd_ptr = std::make_shared<const std::vector<double>>(warm(vec1(p0_fd)));
            const std::string key_fd(reinterpret_cast<const char*>(&p0_fd), sizeof(double));

            const std::uint64_t cell_seed = derive_seed(cfg.seed, cell_index);
            cell.trials.resize(static_cast<std::size_t>(cfg.trials));
            parallel_for(cfg.trials, cfg.workers, [&](int i) {
                TrialResult& tr = cell.trials[static_cast<std::size_t>(i)];
                const std::uint64_t seed_i = derive_seed(cell_seed, static_cast<std::uint64_t>(i));
                tr.seed = seed_i;
                try {
                    fim::SimFn local = [&](const Eigen::VectorXd& p) {
                        const std::string key = bytes_of(p);
                        if (key == key_true) return *y_true_ptr;
                        if (key == key_p0) return *y_p0_ptr;
                        if (key == key_fd) return *y_fd_ptr;
                        return inner(p);
                    };
                    const auto trial_fn = memoize(std::move(local));

                    std::vector<double> z(y_true.size());
                    GaussianRng rng(seed_i);
                    for (std::size_t s = 0; s < z.size(); ++s)
                        z[s] = y_true[s] + sigma_n * rng.normal();

                    const est::FitResult fr = est::fit(trial_fn, z, vec1(p0), fo);
                    // information at the optimum, taken as an expectation over
                    // the noise distribution rather than from the single fitted
                    // record: the fit drives the record's residual out of the
                    // sensitivity direction, which would leave only the
                    // deterministic bias term
                    const fim::FimReport fim_i =
                        fim::empirical_nfim(trial_fn, fr.p, {param}, vec1(cell.alpha), sigma_n,
                                            cfg.nfim_realizations, derive_seed(seed_i, 1));
                    tr.p_hat = fr.p(0);
                    tr.sse = fr.sse;
                    tr.iterations = fr.iterations;
                    tr.converged = fr.converged;
                    tr.nfim = fim_i.nfim(0, 0);
                } catch (const Error& e) {
                    const double nan = std::numeric_limits<double>::quiet_NaN();
                    tr.ok = false;
                    tr.error = e.what();
                    tr.p_hat = tr.sse = tr.nfim = nan;
                }
            });

            aggregate_cell(cell, cfg.trials);
            double nfim_sum = 0.0;
            int n_ok = 0;
            for (const auto& tr : cell.trials) {
                if (!tr.ok) continue;
                nfim_sum += tr.nfim;
                ++n_ok;
            }
            cell.avg_nfim = nfim_sum / static_cast<double>(n_ok);
            cell.avg_ncrlb = 1.0 / cell.avg_nfim;
            cell.avg_ve = fim::ellipsoid_volume(vec1(cell.avg_nfim));
            rep.cells.push_back(std::move(cell));
        }
    }
}

void run_joint_study(const StudyConfig& cfg, StudyReport& rep) {
    const auto np = static_cast<Eigen::Index>(cfg.params.size());
    for (std::size_t ci = 0; ci < cfg.channels.size(); ++ci) {
        const auto& channel = cfg.channels[ci];
        const auto inner = make_simfn(cfg.system, cfg.scenario, channel, cfg.params);
        const auto warm = memoize(inner);
        const auto y_true = warm(cfg.p_true);
        const double sigma_n = meas::noise_sigma_from_snr(y_true, cfg.snr_db);

        Eigen::VectorXd alpha(np), sigma_d(np);
        for (Eigen::Index k = 0; k < np; ++k) {
            const auto choice = choose_alpha(warm, cfg.p0, static_cast<int>(k),
                                             cfg.params[static_cast<std::size_t>(k)], sigma_n,
                                             cfg.alpha);
            alpha(k) = choice.alpha;
            sigma_d(k) = choice.sigma_d;
        }

        est::FitOptions fo = cfg.fit;
        fo.lower = cfg.lower;
        fo.upper = cfg.upper;

        // shared read-only cache: truth, start point, and the start point's
        // finite-difference column points, identical across trials
        auto y_true_ptr = std::make_shared<const std::vector<double>>(y_true);
        auto y_p0_ptr = std::make_shared<const std::vector<double>>(warm(cfg.p0));
        const std::string key_true = bytes_of(cfg.p_true);
        const std::string key_p0 = bytes_of(cfg.p0);
        std::vector<std::pair<std::string, std::shared_ptr<const std::vector<double>>>> fd_cache;
        for (Eigen::Index k = 0; k < np; ++k) {
            double h = fo.fd_rel_step * std::max(std::abs(cfg.p0(k)), fo.scale_floor);
            if (cfg.p0(k) + h > fo.upper(k)) h = -h;
            Eigen::VectorXd q = cfg.p0;
            q(k) += h;
            fd_cache.emplace_back(bytes_of(q),
                                  std::make_shared<const std::vector<double>>(warm(q)));
        }

        const std::uint64_t channel_seed = derive_seed(cfg.seed, ci);
        std::vector<JointTrial> jt(static_cast<std::size_t>(cfg.trials));
        parallel_for(cfg.trials, cfg.workers, [&](int i) {
            JointTrial& tr = jt[static_cast<std::size_t>(i)];
            const std::uint64_t seed_i = derive_seed(channel_seed, static_cast<std::uint64_t>(i));
            tr.seed = seed_i;
            try {
                fim::SimFn local = [&](const Eigen::VectorXd& p) {
                    const std::string key = bytes_of(p);
                    if (key == key_true) return *y_true_ptr;
                    if (key == key_p0) return *y_p0_ptr;
                    for (const auto& [fd_key, fd_val] : fd_cache)
                        if (key == fd_key) return *fd_val;
                    return inner(p);
                };
                const auto trial_fn = memoize(std::move(local));

                std::vector<double> z(y_true.size());
                GaussianRng rng(seed_i);
                for (std::size_t s = 0; s < z.size(); ++s)
                    z[s] = y_true[s] + sigma_n * rng.normal();

                const est::FitResult fr = est::fit(trial_fn, z, cfg.p0, fo);
                // expectation over the noise distribution at the optimum; the
                // fitted record itself is useless here because its residual is
                // orthogonal to the sensitivity directions, leaving a rank-one
                // bias outer product
                const fim::FimReport fim_i =
                    fim::empirical_nfim(trial_fn, fr.p, cfg.params, alpha, sigma_n,
                                        cfg.nfim_realizations, derive_seed(seed_i, 1));
                tr.p_hat = fr.p;
                tr.sse = fr.sse;
                tr.iterations = fr.iterations;
                tr.converged = fr.converged;
                tr.nfim = fim_i.nfim;
            } catch (const Error& e) {
                tr.ok = false;
                tr.error = e.what();
            }
        });

        Eigen::MatrixXd avg_nfim = Eigen::MatrixXd::Zero(np, np);
        int n_ok = 0;
        for (const auto& tr : jt) {
            if (!tr.ok) continue;
            avg_nfim += tr.nfim;
            ++n_ok;
        }
        if (n_ok > 0) avg_nfim /= static_cast<double>(n_ok);
        const Eigen::VectorXd joint_ncrlb =
            n_ok > 0 ? fim::ncrlb(avg_nfim)
                     : Eigen::VectorXd::Constant(np, std::numeric_limits<double>::infinity());
        const double joint_ve =
            n_ok > 0 ? fim::ellipsoid_volume(avg_nfim) : std::numeric_limits<double>::infinity();

        for (Eigen::Index k = 0; k < np; ++k) {
            const auto& param = cfg.params[static_cast<std::size_t>(k)];
            CellResult cell;
            cell.channel = channel;
            cell.param = param;
            cell.p_true = cfg.p_true(k);
            cell.p0 = cfg.p0(k);
            cell.alpha = alpha(k);
            cell.sigma_d = sigma_d(k);
            cell.sigma_n = sigma_n;
            cell.pu_base = resolve_pu_base(cfg, param, cell.p_true);
            cell.trials.resize(jt.size());
            for (std::size_t i = 0; i < jt.size(); ++i) {
                const JointTrial& src = jt[i];
                TrialResult& tr = cell.trials[i];
                tr.seed = src.seed;
                tr.ok = src.ok;
                tr.error = src.error;
                if (src.ok) {
                    tr.p_hat = src.p_hat(k);
                    tr.sse = src.sse;
                    tr.iterations = src.iterations;
                    tr.converged = src.converged;
                    tr.nfim = src.nfim(k, k);
                } else {
                    const double nan = std::numeric_limits<double>::quiet_NaN();
                    tr.p_hat = tr.sse = tr.nfim = nan;
                }
            }
            aggregate_cell(cell, cfg.trials);
            cell.avg_nfim = avg_nfim(k, k);
            cell.avg_ncrlb = joint_ncrlb(k);
            cell.avg_ve = joint_ve;
            rep.cells.push_back(std::move(cell));
        }
    }
}

} // namespace

StudyReport monte_carlo_study(const StudyConfig& cfg) {
    if (cfg.channels.empty()) throw config_error("no channels listed for the study");
    if (cfg.params.empty()) throw config_error("no parameters listed for the study");
    const auto np = static_cast<Eigen::Index>(cfg.params.size());
    if (cfg.p0.size() != np || cfg.lower.size() != np || cfg.upper.size() != np)
        throw config_error("p0/bounds length does not match params");

    StudyReport rep;
    rep.channels = cfg.channels;
    rep.params = cfg.params;
    rep.joint = cfg.joint;
    rep.trials = cfg.trials;
    rep.snr_db = cfg.snr_db;
    rep.seed = cfg.seed;

    if (cfg.joint)
        run_joint_study(cfg, rep);
    else
        run_single_study(cfg, rep);
    rank_cells(rep);
    return rep;
}

json study_report_to_json(const StudyReport& r) {
    json j;
    j["channels"] = r.channels;
    j["params"] = r.params;
    j["mode"] = r.joint ? "joint" : "single";
    j["trials"] = r.trials;
    j["snr_db"] = r.snr_db;
    j["seed"] = r.seed;
    j["cells"] = json::array();
    for (const auto& c : r.cells) {
        json jc;
        jc["channel"] = c.channel;
        jc["param"] = c.param;
        jc["p_true"] = c.p_true;
        jc["p0"] = c.p0;
        jc["alpha"] = c.alpha;
        jc["sigma_d"] = c.sigma_d;
        jc["sigma_n"] = c.sigma_n;
        jc["pu_base"] = c.pu_base;
        jc["failed"] = c.failed;
        jc["mean_est"] = c.mean_est;
        jc["bias"] = c.bias;
        jc["avg_rel_err_pct"] = c.avg_rel_err_pct;
        jc["variance_defined"] = c.variance_defined;
        jc["variance"] = c.variance_defined ? json(c.variance) : json(nullptr);
        jc["variance_pu"] = c.variance_defined ? json(c.variance_pu) : json(nullptr);
        jc["avg_nfim"] = c.avg_nfim;
        jc["avg_ncrlb"] = c.avg_ncrlb;
        jc["avg_ve"] = std::isfinite(c.avg_ve) ? json(c.avg_ve) : json(nullptr);
        jc["rank_ve"] = c.rank_ve;
        jc["rank_var"] = c.rank_var;
        jc["trials"] = json::array();
        for (const auto& t : c.trials) {
            json jt;
            jt["seed"] = t.seed;
            jt["ok"] = t.ok;
            if (!t.ok) jt["error"] = t.error;
            jt["p_hat"] = t.ok ? json(t.p_hat) : json(nullptr);
            jt["sse"] = t.ok ? json(t.sse) : json(nullptr);
            jt["iterations"] = t.iterations;
            jt["converged"] = t.converged;
            jt["nfim"] = t.ok ? json(t.nfim) : json(nullptr);
            jc["trials"].push_back(std::move(jt));
        }
        j["cells"].push_back(std::move(jc));
    }
    return j;
}

void export_study(const StudyReport& r, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create study output directory '" + dir + "'");
    const std::filesystem::path base(dir);

    {
        std::ofstream out(base / "summary.json");
        if (!out) throw io_error("cannot write study summary");
        out << study_report_to_json(r).dump(2) << '\n';
    }
    {
        std::ofstream out(base / "cells.csv");
        if (!out) throw io_error("cannot write cells.csv");
        out << "channel,param,p_true,p0,alpha,sigma_d,sigma_n,pu_base,failed,mean_est,bias,"
               "avg_rel_err_pct,variance,variance_pu,avg_nfim,avg_ncrlb,avg_ve,rank_ve,"
               "rank_var\n";
        std::string line;
        for (const auto& c : r.cells) {
            line.clear();
            line += c.channel;
            line += ',';
            line += c.param;
            for (const double v : {c.p_true, c.p0, c.alpha, c.sigma_d, c.sigma_n, c.pu_base}) {
                line += ',';
                append_double(line, v);
            }
            line += ',';
            line += std::to_string(c.failed);
            for (const double v : {c.mean_est, c.bias, c.avg_rel_err_pct, c.variance,
                                   c.variance_pu, c.avg_nfim, c.avg_ncrlb, c.avg_ve}) {
                line += ',';
                append_double(line, v);
            }
            line += ',';
            line += std::to_string(c.rank_ve);
            line += ',';
            line += std::to_string(c.rank_var);
            line += '\n';
            out << line;
        }
    }
    {
        std::ofstream out(base / "channel_summary.csv");
        if (!out) throw io_error("cannot write channel_summary.csv");
        out << "channel,n_params,avg_variance_pu,avg_ve_mean\n";
        for (const auto& channel : r.channels) {
            double var_acc = 0.0, ve_acc = 0.0;
            int count = 0, var_count = 0;
            for (const auto& c : r.cells) {
                if (c.channel != channel) continue;
                if (c.variance_defined) {
                    var_acc += c.variance_pu;
                    ++var_count;
                }
                ve_acc += c.avg_ve;
                ++count;
            }
            std::string line = channel;
            line += ',';
            line += std::to_string(count);
            line += ',';
            append_double(line, var_count ? var_acc / var_count
                                          : std::numeric_limits<double>::quiet_NaN());
            line += ',';
            append_double(line, count ? ve_acc / count : 0.0);
            line += '\n';
            out << line;
        }
    }
    {
        std::ofstream out(base / "trials.csv");
        if (!out) throw io_error("cannot write trials.csv");
        out << "channel,param,trial,seed,ok,p_hat,sse,iterations,converged,nfim\n";
        std::string line;
        for (const auto& c : r.cells) {
            for (std::size_t i = 0; i < c.trials.size(); ++i) {
                const auto& t = c.trials[i];
                line.clear();
                line += c.channel;
                line += ',';
                line += c.param;
                line += ',';
                line += std::to_string(i);
                line += ',';
                line += std::to_string(t.seed);
                line += ',';
                line += t.ok ? '1' : '0';
                line += ',';
                append_double(line, t.p_hat);
                line += ',';
                append_double(line, t.sse);
                line += ',';
                line += std::to_string(t.iterations);
                line += ',';
                line += t.converged ? '1' : '0';
                line += ',';
                append_double(line, t.nfim);
                line += '\n';
                out << line;
            }
        }
    }
}

} // namespace psid::hrn
