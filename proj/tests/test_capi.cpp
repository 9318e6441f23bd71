// Exercises the shared library through its C header only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "psid.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cfg_path(const char* name) {
    return std::string(PSID_CONFIG_DIR) + "/" + name;
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

} // namespace

TEST_CASE("version and error plumbing") {
    REQUIRE(psid_version() != nullptr);
    CHECK(std::strcmp(psid_version(), "1.0.0") == 0);
    CHECK(psid_last_error() != nullptr);

    psid_system* sys = nullptr;
    CHECK(psid_system_load(nullptr, &sys) == PSID_ERR_INVALID);
    CHECK(psid_system_load("ieee9", nullptr) == PSID_ERR_INVALID);
    CHECK(std::strlen(psid_last_error()) > 0);
}

TEST_CASE("system handles") {
    psid_system* sys = nullptr;
    REQUIRE(psid_system_load("ieee9", &sys) == PSID_OK);
    REQUIRE(sys != nullptr);

    double v = 0.0;
    CHECK(psid_system_get_param(sys, "SM1.governor.k_t", &v) == PSID_OK);
    CHECK(v == 1.5);
    CHECK(psid_system_set_param(sys, "SM1.governor.k_t", 1.25) == PSID_OK);
    CHECK(psid_system_get_param(sys, "SM1.governor.k_t", &v) == PSID_OK);
    CHECK(v == 1.25);

    CHECK(psid_system_get_param(sys, "SM1.governor.bogus", &v) == PSID_ERR_CONFIG);
    CHECK(std::string(psid_last_error()).find("bogus") != std::string::npos);
    CHECK(psid_system_get_param(nullptr, "SM1.governor.k_t", &v) == PSID_ERR_INVALID);

    const fs::path saved = fs::temp_directory_path() / "psid_capi_sys.json";
    CHECK(psid_system_save(sys, saved.string().c_str()) == PSID_OK);
    psid_system* rt = nullptr;
    CHECK(psid_system_load(saved.string().c_str(), &rt) == PSID_OK);
    CHECK(psid_system_get_param(rt, "SM1.governor.k_t", &v) == PSID_OK);
    CHECK(v == 1.25);
    psid_system_free(rt);
    fs::remove(saved);

    psid_system* bad = nullptr;
    CHECK(psid_system_load("/nonexistent/system.json", &bad) == PSID_ERR_IO);
    CHECK(psid_system_from_json("{not json", &bad) != PSID_OK);
    CHECK(psid_system_from_json("{}", &bad) == PSID_ERR_CONFIG);

    psid_system_free(sys);
    psid_system_free(nullptr); // must be a no-op
}

TEST_CASE("simulation traces through the C surface") {
    psid_system* sys = nullptr;
    REQUIRE(psid_system_load("ieee9", &sys) == PSID_OK);

    double res = 0.0;
    CHECK(psid_equilibrium_residual(sys, &res) == PSID_OK);
    CHECK(res < 1e-9);

    psid_traces* tr = nullptr;
    REQUIRE(psid_simulate(sys, nullptr, &tr) == PSID_OK);
    size_t rows = 0, cols = 0;
    CHECK(psid_traces_rows(tr, &rows) == PSID_OK);
    CHECK(psid_traces_cols(tr, &cols) == PSID_OK);
    CHECK(rows == 20001); // default 20 s at 1 ms
    CHECK(cols == 15);    // five quantities, three machines

    const char* name = nullptr;
    const char* unit = nullptr;
    CHECK(psid_traces_name(tr, 0, &name) == PSID_OK);
    CHECK(std::strcmp(name, "omega_m@SM1") == 0);
    CHECK(psid_traces_unit(tr, 0, &unit) == PSID_OK);
    CHECK(std::strcmp(unit, "rad/s") == 0);
    CHECK(psid_traces_name(tr, 99, &name) == PSID_ERR_INVALID);

    const double* t = nullptr;
    const double* col = nullptr;
    CHECK(psid_traces_time(tr, &t) == PSID_OK);
    CHECK(psid_traces_column(tr, 0, &col) == PSID_OK);
    CHECK(t[0] == 0.0);
    CHECK(std::abs(col[0] - 62.831853071795855) < 1e-9);

    const fs::path csv = fs::temp_directory_path() / "psid_capi_trace.csv";
    CHECK(psid_traces_write_csv(tr, csv.string().c_str()) == PSID_OK);
    CHECK(fs::exists(csv));
    fs::remove(csv);
    psid_traces_free(tr);

    // a shorter scenario via json
    psid_traces* tr2 = nullptr;
    REQUIRE(psid_simulate(sys, R"({"dt": 0.01, "t_end": 1.0})", &tr2) == PSID_OK);
    CHECK(psid_traces_rows(tr2, &rows) == PSID_OK);
    CHECK(rows == 101);
    psid_traces_free(tr2);

    CHECK(psid_simulate(sys, "{\"integrator\": \"leapfrog\"}", &tr2) == PSID_ERR_CONFIG);
    psid_system_free(sys);
}

TEST_CASE("measurement file with sidecar") {
    psid_system* sys = nullptr;
    REQUIRE(psid_system_load("ieee9", &sys) == PSID_OK);

    const fs::path csv = fs::temp_directory_path() / "psid_capi_meas.csv";
    REQUIRE(psid_measure_file(sys, R"({"dt": 0.01, "t_end": 1.0})", "omega_m@SM1", 60.0,
                              7, csv.string().c_str()) == PSID_OK);
    REQUIRE(fs::exists(csv));
    REQUIRE(fs::exists(csv.string() + ".meta.json"));

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "t,z");
    in.close();

    const json meta = json::parse(slurp(csv.string() + ".meta.json"));
    CHECK(meta["channel"] == "omega_m@SM1");
    CHECK(meta["snr_db"] == 60.0);
    CHECK(meta["seed"] == 7);
    CHECK(meta["sigma_n"].get<double>() > 0.0);
    CHECK(meta["samples"] == 101);

    fs::remove(csv);
    fs::remove(csv.string() + ".meta.json");

    CHECK(psid_measure_file(sys, nullptr, "bogus@SM1", 60.0, 7,
                            csv.string().c_str()) == PSID_ERR_CONFIG);
    psid_system_free(sys);
}

TEST_CASE("config-driven runners") {
    const fs::path dir = fresh_dir("psid_capi_runs");

    const fs::path sim_csv = dir / "sim.csv";
    REQUIRE(psid_simulate_run(cfg_path("study_smoke.json").c_str(), nullptr,
                              sim_csv.string().c_str()) == PSID_OK);
    CHECK(fs::exists(sim_csv));

    const fs::path meas_csv = dir / "meas.csv";
    REQUIRE(psid_measure_run(cfg_path("study_smoke.json").c_str(), "{\"seed\": 3}",
                             meas_csv.string().c_str()) == PSID_OK);
    CHECK(fs::exists(meas_csv));
    CHECK(fs::exists(meas_csv.string() + ".meta.json"));

    const fs::path fit_json = dir / "fit.json";
    REQUIRE(psid_fit_run(cfg_path("fit_sm1_k.json").c_str(),
                         R"({"scenario": {"t_end": 8.0}})",
                         fit_json.string().c_str()) == PSID_OK);
    const json fit = json::parse(slurp(fit_json));
    CHECK(fit["converged"].get<bool>());
    CHECK(fit["p_hat"].size() == 1);

    const fs::path fim_json = dir / "fim.json";
    REQUIRE(psid_fim_run(cfg_path("study_smoke.json").c_str(), nullptr,
                         fim_json.string().c_str()) == PSID_OK);
    const json fim = json::parse(slurp(fim_json));
    CHECK(fim["rank"].get<int>() == 1);
    CHECK(fim["nfim"].size() == 1);

    // noise floor that no grid perturbation clears: study-level failure
    CHECK(psid_fim_run(cfg_path("study_smoke.json").c_str(), "{\"snr_db\": 0}",
                       fim_json.string().c_str()) == PSID_ERR_STUDY);
    CHECK(std::string(psid_last_error()).find("noise floor") != std::string::npos);

    const fs::path sweep_csv = dir / "sweep.csv";
    REQUIRE(psid_sweep_run(cfg_path("study_smoke.json").c_str(),
                           R"({"alpha": {"grid": {"lo": 0.05, "hi": 1.0, "points": 4}},
                               "nfim_realizations": 5})",
                           sweep_csv.string().c_str()) == PSID_OK);
    std::ifstream sw(sweep_csv);
    std::string sw_header;
    std::getline(sw, sw_header);
    CHECK(sw_header.find("alpha") != std::string::npos);

    const fs::path sel_json = dir / "select.json";
    REQUIRE(psid_select_run(cfg_path("study_smoke.json").c_str(),
                            R"({"channels": ["omega_m@SM1", "p_m@SM1"],
                                "nfim_realizations": 5})",
                            sel_json.string().c_str()) == PSID_OK);
    const json sel = json::parse(slurp(sel_json));
    CHECK(sel.contains("selected"));
    CHECK(sel["selection"]["ranked"].size() == 2);

    fs::remove_all(dir);
}

TEST_CASE("study runner writes identical artifacts on any schedule") {
    const fs::path d1 = fresh_dir("psid_capi_study1");
    const fs::path d2 = fresh_dir("psid_capi_study2");
    const char* overrides = "{\"trials\": 6, \"nfim_realizations\": 5, \"workers\": 1}";
    const char* overrides_wide = "{\"trials\": 6, \"nfim_realizations\": 5, \"workers\": 4}";

    REQUIRE(psid_study_run(cfg_path("study_smoke.json").c_str(), overrides,
                           d1.string().c_str()) == PSID_OK);
    REQUIRE(psid_study_run(cfg_path("study_smoke.json").c_str(), overrides_wide,
                           d2.string().c_str()) == PSID_OK);

    for (const char* f : {"summary.json", "cells.csv", "channel_summary.csv", "trials.csv"}) {
        CHECK(fs::exists(d1 / f));
        CHECK(fs::exists(d2 / f));
    }
    CHECK(slurp(d1 / "summary.json") == slurp(d2 / "summary.json"));
    CHECK(slurp(d1 / "trials.csv") == slurp(d2 / "trials.csv"));

    fs::remove_all(d1);
    fs::remove_all(d2);

    CHECK(psid_study_run("/nonexistent/config.json", nullptr, "/tmp/psid_nope") ==
          PSID_ERR_IO);
    CHECK(std::string(psid_last_error()).find("cannot open") != std::string::npos);
}
