#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"
#include "psid/harness.hpp"
#include "psid/rng.hpp"

using namespace psid;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

Eigen::VectorXd vec1(double v) {
    Eigen::VectorXd x(1);
    x << v;
    return x;
}

// the turbine-gain deviation on the speed channel builds over tens of
// seconds, so the window cannot be shortened below the event horizon
json smoke_json() {
    return json{
        {"system", "ieee9"},
        {"scenario", {{"dt", 0.005}, {"t_end", 20.0}}},
        {"channel", "omega_m@SM1"},
        {"params", {"SM1.governor.k_t"}},
        {"p0", {1.3}},
        {"snr_db", 70.0},
        {"trials", 6},
        {"nfim_realizations", 5},
        {"seed", 11},
        {"workers", 1},
    };
}

} // namespace

TEST_CASE("seed derivation is a fixed decorrelated mapping") {
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) != derive_seed(2, 2));

    GaussianRng a(42);
    double sum = 0.0, sq = 0.0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
        const double v = a.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double stddev = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 0.02);
    CHECK(stddev == doctest::Approx(1.0).epsilon(0.01));

    GaussianRng b(42), c(42), d(43);
    bool same = true, differ = false;
    for (int k = 0; k < 100; ++k) {
        const double vb = b.normal();
        same = same && (vb == c.normal());
        differ = differ || (vb != d.normal());
    }
    CHECK(same);
    CHECK(differ);

    GaussianRng u7(7);
    for (int k = 0; k < 1000; ++k) {
        const double u = u7.uniform();
        CHECK(u > 0.0);
        CHECK(u <= 1.0);
    }
}

TEST_CASE("study config defaults come from the model") {
    const hrn::StudyConfig cfg = hrn::study_config_from_json(json{
        {"system", "ieee9"},
        {"scenario", {{"dt", 0.01}, {"t_end", 2.0}}},
        {"channel", "omega_m@SM1"},
        {"params", {"SM1.avr.k", "SM1.governor.sigma", "SM1.governor.delta",
                    "SM1.governor.k_t", "SM1.governor.t_d"}},
    });
    REQUIRE(cfg.channels.size() == 1);
    CHECK(cfg.channels[0] == "omega_m@SM1");
    REQUIRE(cfg.p_true.size() == 5);
    CHECK(cfg.p_true(0) == 20.0);
    CHECK(cfg.p_true(1) == 0.04);
    CHECK(cfg.p_true(2) == 0.8);
    CHECK(cfg.p_true(3) == 1.5);
    CHECK(cfg.p_true(4) == 2.4);
    CHECK(cfg.p0.isApprox(cfg.p_true, 0.0));
    CHECK(cfg.lower.isApprox(0.5 * cfg.p0, 1e-15));
    CHECK(cfg.upper.isApprox(1.5 * cfg.p0, 1e-15));
    CHECK(cfg.snr_db == 80.0);
    CHECK(cfg.workers == 1);
    CHECK_FALSE(cfg.joint);

    // scaled default bounds must straddle a negative parameter too
    const hrn::StudyConfig neg = hrn::study_config_from_json(json{
        {"system", "ieee9"},
        {"scenario", {{"dt", 0.01}, {"t_end", 2.0}}},
        {"channel", "omega_m@SM1"},
        {"params", {"SM1.governor.t_n"}},
    });
    CHECK(neg.p0(0) == doctest::Approx(-1.7067));
    CHECK(neg.lower(0) < neg.p0(0));
    CHECK(neg.upper(0) > neg.p0(0));

    try {
        (void)hrn::study_config_from_json(json{
            {"system", "ieee9"},
            {"scenario", {{"dt", 0.01}, {"t_end", 2.0}}},
            {"channel", "omega_m@SM1"},
            {"params", {"SM1.governor.k_t"}},
            {"mode", "triple"},
        });
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
        CHECK(std::string(e.what()).find("study mode") != std::string::npos);
    }

    try {
        (void)hrn::study_config_from_json(json{
            {"system", "ieee9"},
            {"scenario", {{"dt", 0.01}, {"t_end", 2.0}}},
            {"channel", "omega_m@SM1"},
            {"params", {"SM1.governor.k_t"}},
            {"alpha", {{"fallback", {{"SM1.governor.k_t", -0.5}}}}},
        });
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
        CHECK(std::string(e.what()).find("must be positive") != std::string::npos);
    }

    CHECK_THROWS_AS((void)hrn::study_config_from_json(json{
                        {"system", "ieee9"},
                        {"scenario", {{"dt", 0.01}, {"t_end", 2.0}}},
                        {"channel", "omega_m@SM1"},
                        {"params", {"SM1.governor.k_t"}},
                        {"trials", 0},
                    }),
                    Error);
}

TEST_CASE("channel simulation as a function of selected parameters") {
    const auto m = model::ieee9_preset();
    sim::Scenario sc = sim::Scenario::from_model(m);
    sc.dt = 0.01;
    sc.t_end = 1.0;

    const auto f = hrn::make_simfn(m, sc, "omega_m@SM1", {"SM1.governor.k_t"});
    const std::vector<double> base = f(vec1(1.5));
    const sim::Trace tr = sim::simulate(m, sc);
    CHECK(base == tr.column("omega_m@SM1"));

    auto m2 = m;
    model::set_parameter(m2, "SM1.governor.k_t", 1.2);
    const sim::Trace tr2 = sim::simulate(m2, sc);
    CHECK(f(vec1(1.2)) == tr2.column("omega_m@SM1"));

    try {
        Eigen::VectorXd two(2);
        two << 1.5, 1.0;
        (void)f(two);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
        CHECK(std::string(e.what()).find("length") != std::string::npos);
    }

    CHECK_THROWS_AS((void)hrn::make_simfn(m, sc, "omega_m@SM1", {"SM1.governor.nope"}),
                    Error);
    // a bad channel surfaces when the function is evaluated
    const auto bad = hrn::make_simfn(m, sc, "omega_m@SM9", {"SM1.governor.k_t"});
    CHECK_THROWS_AS((void)bad(vec1(1.5)), Error);
}

TEST_CASE("memoization spends one evaluation per distinct point") {
    std::atomic<int> calls{0};
    const fim::SimFn inner = [&calls](const Eigen::VectorXd& p) {
        ++calls;
        return std::vector<double>{p(0), 2.0 * p(0)};
    };
    const fim::SimFn f = hrn::memoize(inner);
    const auto a = f(vec1(1.0));
    const auto b = f(vec1(1.0));
    CHECK(a == b);
    CHECK(calls.load() == 1);
    (void)f(vec1(2.0));
    CHECK(calls.load() == 2);
    (void)f(vec1(1.0));
    CHECK(calls.load() == 2);
}

TEST_CASE("parallel loop covers the range and keeps the lowest failure") {
    std::vector<std::atomic<int>> hits(100);
    hrn::parallel_for(100, 4, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
    for (const auto& h : hits) CHECK(h.load() == 1);

    hrn::parallel_for(3, 16, [](int) {}); // workers clamp to the range

    try {
        hrn::parallel_for(100, 4, [](int i) {
            if (i == 50 || i == 5) throw config_error(std::to_string(i));
        });
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()) == "5");
    }
}

TEST_CASE("perturbation sizing policy") {
    // simple ramp: deviation at alpha is alpha * p * rms(t)
    const fim::SimFn f = [](const Eigen::VectorXd& p) {
        std::vector<double> y(10);
        for (int t = 1; t <= 10; ++t) y[static_cast<std::size_t>(t - 1)] = p(0) * t;
        return y;
    };
    const Eigen::VectorXd p0 = vec1(2.0);
    const double rms_t = std::sqrt(38.5);

    hrn::AlphaPolicy pol;
    pol.grid = {1e-3, 1.0, 13};
    const fim::AlphaChoice scan = hrn::choose_alpha(f, p0, 0, "p", 0.05, pol);
    CHECK(scan.alpha == fim::calibrate_alpha(f, p0, 0, 0.05, pol.c_margin, pol.grid).alpha);

    // scan failure without a fallback propagates as a study error
    try {
        (void)hrn::choose_alpha(f, p0, 0, "p", 1e6, pol);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Study);
    }

    // a fallback entry rescues the scan and reports its own deviation
    pol.fallback["p"] = 0.5;
    const fim::AlphaChoice fb = hrn::choose_alpha(f, p0, 0, "p", 1e6, pol);
    CHECK(fb.alpha == 0.5);
    CHECK(fb.sigma_d == doctest::Approx(0.5 * 2.0 * rms_t).epsilon(1e-9));

    // fixed sizing bypasses the scan entirely
    pol.auto_size = false;
    pol.value = 0.25;
    const fim::AlphaChoice fixed = hrn::choose_alpha(f, p0, 0, "p", 1e6, pol);
    CHECK(fixed.alpha == 0.25);
    CHECK(fixed.sigma_d == doctest::Approx(0.25 * 2.0 * rms_t).epsilon(1e-9));
}

TEST_CASE("one-shot identification recovers a governor gain") {
    json j = smoke_json();
    j["seed"] = 9;
    const hrn::StudyConfig cfg = hrn::study_config_from_json(j);
    const hrn::OneShotResult r = hrn::one_shot(cfg, cfg.seed);

    CHECK(r.channel == "omega_m@SM1");
    CHECK(r.fit.converged);
    CHECK(std::abs(r.fit.p(0) - 1.5) / 1.5 < 0.05);
    CHECK(r.sigma_n > 0.0);
    CHECK(r.fim.rank == 1);
    CHECK(std::isfinite(r.fim.ellipsoid_volume));
    CHECK(r.fim.ellipsoid_volume > 0.0);

    const json out = hrn::one_shot_to_json(r);
    for (const char* key : {"channel", "params", "p_true", "p0", "p_hat", "alpha",
                            "sigma_n", "sse", "iterations", "converged", "stop_reason",
                            "sse_history", "fim"})
        CHECK(out.contains(key));
    CHECK(out["p_hat"][0].get<double>() == r.fit.p(0));
}

TEST_CASE("channel selection ranks by ellipsoid volume") {
    json j = smoke_json();
    j["channels"] = {"v_rms@SM1", "omega_m@SM1"};
    j.erase("channel");
    const hrn::StudyConfig cfg = hrn::study_config_from_json(j);

    const hrn::SelectionReport rep = hrn::select_channels(cfg);
    REQUIRE(rep.ranked.size() == 2);
    CHECK(rep.ranked[0].ellipsoid_volume <= rep.ranked[1].ellipsoid_volume);
    CHECK(std::isfinite(rep.ranked[0].ellipsoid_volume));
    // the speed channel sees the turbine gain far better than the voltage
    CHECK(rep.ranked[0].channel == "omega_m@SM1");

    const hrn::Algorithm1Result a1 = hrn::run_algorithm1(cfg);
    CHECK(a1.selected == "omega_m@SM1");
    CHECK(a1.fit.fit.converged);
    const json aj = hrn::algorithm1_to_json(a1);
    CHECK(aj.contains("selected"));
    CHECK(aj.contains("selection"));
    CHECK(aj.contains("fit"));

    // drown every channel in noise: no feasible candidate remains
    json jbad = j;
    jbad["snr_db"] = 10.0;
    const hrn::StudyConfig bad = hrn::study_config_from_json(jbad);
    try {
        (void)hrn::select_channels(bad);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Study);
        CHECK(std::string(e.what()).find("no candidate channel") != std::string::npos);
    }
}

TEST_CASE("perturbation sweep normalizes at unit size") {
    json j = smoke_json();
    j["alpha"] = {{"grid", {{"lo", 0.05}, {"hi", 1.0}, {"points", 5}}}};
    const hrn::StudyConfig cfg = hrn::study_config_from_json(j);

    const hrn::SweepReport rep = hrn::perturbation_sweep(cfg);
    CHECK(rep.channel == "omega_m@SM1");
    REQUIRE(rep.rows.size() == 5);
    const std::vector<double> grid = cfg.alpha.grid.values();
    for (std::size_t k = 0; k < rep.rows.size(); ++k) {
        CHECK(rep.rows[k].param == "SM1.governor.k_t");
        CHECK(rep.rows[k].alpha == grid[k]);
        CHECK(rep.rows[k].nfim > 0.0);
        CHECK(rep.rows[k].sigma_d > 0.0);
    }
    CHECK(rep.rows.back().nfim_norm == 1.0);

    const fs::path path = fs::temp_directory_path() / "psid_test_sweep.csv";
    hrn::write_sweep_csv(rep, path.string());
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header.find("alpha") != std::string::npos);
    CHECK(header.find("nfim") != std::string::npos);
    in.close();
    std::remove(path.string().c_str());
}

TEST_CASE("monte-carlo study aggregates trials per cell") {
    const hrn::StudyConfig cfg = hrn::study_config_from_json(smoke_json());
    const hrn::StudyReport rep = hrn::monte_carlo_study(cfg);

    CHECK_FALSE(rep.joint);
    CHECK(rep.trials == 6);
    REQUIRE(rep.cells.size() == 1);
    const hrn::CellResult& cell = rep.cells[0];
    CHECK(cell.channel == "omega_m@SM1");
    CHECK(cell.param == "SM1.governor.k_t");
    CHECK(cell.p_true == 1.5);
    CHECK(cell.p0 == doctest::Approx(1.3));
    REQUIRE(cell.trials.size() == 6);
    CHECK(cell.failed == 0);

    const std::uint64_t cell_seed = derive_seed(cfg.seed, 0);
    for (std::size_t i = 0; i < cell.trials.size(); ++i) {
        const auto& t = cell.trials[i];
        CHECK(t.seed == derive_seed(cell_seed, i));
        CHECK(t.ok);
        CHECK(t.converged);
        CHECK(t.nfim > 0.0);
    }

    CHECK(std::abs(cell.mean_est - 1.5) / 1.5 < 0.03);
    CHECK(cell.variance_defined);
    CHECK(cell.variance > 0.0);
    CHECK(cell.variance_pu == doctest::Approx(cell.variance / (1.5 * 1.5)).epsilon(1e-12));
    CHECK(cell.avg_nfim > 0.0);
    CHECK(cell.avg_ncrlb == doctest::Approx(1.0 / cell.avg_nfim).epsilon(1e-12));
    CHECK(std::isfinite(cell.avg_ve));
    CHECK(cell.avg_ve > 0.0);
    CHECK(cell.rank_ve == 1);
    CHECK(cell.rank_var == 1);

    // a single trial leaves the variance undefined
    json j1 = smoke_json();
    j1["trials"] = 1;
    const hrn::StudyReport one = hrn::monte_carlo_study(hrn::study_config_from_json(j1));
    CHECK_FALSE(one.cells[0].variance_defined);
    const json oj = hrn::study_report_to_json(one);
    CHECK(oj["cells"][0]["variance"].is_null());
}

TEST_CASE("study results are identical under any worker count") {
    json j = smoke_json();
    const hrn::StudyReport serial = hrn::monte_carlo_study(hrn::study_config_from_json(j));
    j["workers"] = 4;
    const hrn::StudyReport wide = hrn::monte_carlo_study(hrn::study_config_from_json(j));
    CHECK(hrn::study_report_to_json(serial).dump(2) ==
          hrn::study_report_to_json(wide).dump(2));
}

TEST_CASE("joint study shares the fit and volume across a channel's cells") {
    json j = smoke_json();
    j["params"] = {"SM1.governor.k_t", "SM1.governor.t_d"};
    j["p0"] = {1.3, 2.6};
    j["mode"] = "joint";
    j["trials"] = 4;
    const hrn::StudyConfig cfg = hrn::study_config_from_json(j);
    CHECK(cfg.joint);

    const hrn::StudyReport rep = hrn::monte_carlo_study(cfg);
    CHECK(rep.joint);
    REQUIRE(rep.cells.size() == 2);
    CHECK(rep.cells[0].avg_ve == rep.cells[1].avg_ve);
    CHECK(std::isfinite(rep.cells[0].avg_ve));
    CHECK(rep.cells[0].avg_nfim != rep.cells[1].avg_nfim);
    for (const auto& cell : rep.cells) {
        CHECK(cell.failed == 0);
        CHECK(cell.trials.size() == 4);
        CHECK(cell.avg_ncrlb > 0.0);
    }
    const json rj = hrn::study_report_to_json(rep);
    CHECK(rj["mode"] == "joint");
}

TEST_CASE("study export writes the four artifacts") {
    const hrn::StudyConfig cfg = hrn::study_config_from_json(smoke_json());
    const hrn::StudyReport rep = hrn::monte_carlo_study(cfg);

    const fs::path dir = fs::temp_directory_path() / "psid_test_export";
    fs::remove_all(dir);
    hrn::export_study(rep, dir.string());

    REQUIRE(fs::exists(dir / "summary.json"));
    REQUIRE(fs::exists(dir / "cells.csv"));
    REQUIRE(fs::exists(dir / "channel_summary.csv"));
    REQUIRE(fs::exists(dir / "trials.csv"));

    {
        std::ifstream in(dir / "cells.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header ==
              "channel,param,p_true,p0,alpha,sigma_d,sigma_n,pu_base,failed,mean_est,"
              "bias,avg_rel_err_pct,variance,variance_pu,avg_nfim,avg_ncrlb,avg_ve,"
              "rank_ve,rank_var");
    }
    {
        std::ifstream in(dir / "channel_summary.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "channel,n_params,avg_variance_pu,avg_ve_mean");
    }
    {
        std::ifstream in(dir / "trials.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "channel,param,trial,seed,ok,p_hat,sse,iterations,converged,nfim");
        std::size_t rows = 0;
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) ++rows;
        CHECK(rows == 6);
    }
    {
        std::ifstream in(dir / "summary.json");
        const json js = json::parse(in);
        CHECK(js["mode"] == "single");
        CHECK(js["trials"] == 6);
        CHECK(js["cells"].size() == 1);
    }
    fs::remove_all(dir);
}

TEST_CASE("mismatched vector lengths fail before any simulation") {
    hrn::StudyConfig cfg = hrn::study_config_from_json(smoke_json());
    cfg.p0 = Eigen::VectorXd::Ones(2);
    try {
        (void)hrn::monte_carlo_study(cfg);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
        CHECK(std::string(e.what()).find("length") != std::string::npos);
    }
}
