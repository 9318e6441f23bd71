#include "psid.h"

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "psid/dynsim.hpp"
#include "psid/errors.hpp"
#include "psid/harness.hpp"
#include "psid/measure.hpp"
#include "psid/model.hpp"

using nlohmann::json;

struct psid_system {
    psid::model::SystemModel m;
};

struct psid_traces {
    psid::sim::Trace t;
};

namespace {

thread_local std::string g_last_error;

psid_status status_of(const psid::Error& e) {
    switch (e.kind()) {
    case psid::ErrorKind::Config: return PSID_ERR_CONFIG;
    case psid::ErrorKind::Numeric: return PSID_ERR_NUMERIC;
    case psid::ErrorKind::Study: return PSID_ERR_STUDY;
    case psid::ErrorKind::Io: return PSID_ERR_IO;
    }
    return PSID_ERR_INVALID;
}

template <typename Fn>
psid_status guarded(Fn&& fn) {
    try {
        fn();
        return PSID_OK;
    } catch (const psid::Error& e) {
        g_last_error = e.what();
        return status_of(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return PSID_ERR_INVALID;
    } catch (...) {
        g_last_error = "unknown failure";
        return PSID_ERR_INVALID;
    }
}

psid_status invalid(const char* message) {
    g_last_error = message;
    return PSID_ERR_INVALID;
}

json parse_json_text(const char* text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw psid::config_error(std::string(what) + " is not valid JSON: " + e.what());
    }
}

json load_merged_config(const char* config_path, const char* overrides_json) {
    json j = json::object();
    if (config_path != nullptr) {
        std::ifstream in(config_path);
        if (!in) throw psid::io_error(std::string("cannot open config '") + config_path + "'");
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw psid::config_error(std::string("config '") + config_path +
                                     "' is not valid JSON: " + e.what());
        }
    }
    if (overrides_json != nullptr && overrides_json[0] != '\0')
        j.merge_patch(parse_json_text(overrides_json, "overrides"));
    return j;
}

psid::sim::Scenario scenario_for(const psid::model::SystemModel& m, const char* scenario_json) {
    if (scenario_json == nullptr || scenario_json[0] == '\0')
        return psid::sim::Scenario::from_model(m);
    return psid::sim::scenario_from_json(parse_json_text(scenario_json, "scenario"), m);
}

void write_json_file(const json& j, const char* path) {
    std::ofstream out(path);
    if (!out) throw psid::io_error(std::string("cannot write '") + path + "'");
    out << j.dump(2) << '\n';
    if (!out) throw psid::io_error(std::string("write failed for '") + path + "'");
}

} // namespace

extern "C" {

const char* psid_version(void) { return "1.0.0"; }

const char* psid_last_error(void) { return g_last_error.c_str(); }

psid_status psid_system_load(const char* path_or_builtin, psid_system** out) {
    if (path_or_builtin == nullptr || out == nullptr)
        return invalid("psid_system_load requires a name and an output handle");
    *out = nullptr;
    return guarded([&] { *out = new psid_system{psid::model::load_system(path_or_builtin)}; });
}

psid_status psid_system_from_json(const char* json_text, psid_system** out) {
    if (json_text == nullptr || out == nullptr)
        return invalid("psid_system_from_json requires JSON text and an output handle");
    *out = nullptr;
    return guarded([&] {
        *out = new psid_system{
            psid::model::system_from_json(parse_json_text(json_text, "system"))};
    });
}

void psid_system_free(psid_system* sys) { delete sys; }

psid_status psid_system_save(const psid_system* sys, const char* path) {
    if (sys == nullptr || path == nullptr)
        return invalid("psid_system_save requires a system and a path");
    return guarded([&] { psid::model::save_system(sys->m, path); });
}

psid_status psid_system_get_param(const psid_system* sys, const char* path, double* out) {
    if (sys == nullptr || path == nullptr || out == nullptr)
        return invalid("psid_system_get_param requires a system, a path and an output");
    return guarded([&] { *out = psid::model::get_parameter(sys->m, path); });
}

psid_status psid_system_set_param(psid_system* sys, const char* path, double value) {
    if (sys == nullptr || path == nullptr)
        return invalid("psid_system_set_param requires a system and a path");
    return guarded([&] { psid::model::set_parameter(sys->m, path, value); });
}

psid_status psid_simulate(const psid_system* sys, const char* scenario_json, psid_traces** out) {
    if (sys == nullptr || out == nullptr)
        return invalid("psid_simulate requires a system and an output handle");
    *out = nullptr;
    return guarded([&] {
        const auto sc = scenario_for(sys->m, scenario_json);
        *out = new psid_traces{psid::sim::simulate(sys->m, sc)};
    });
}

void psid_traces_free(psid_traces* traces) { delete traces; }

psid_status psid_traces_rows(const psid_traces* traces, size_t* out) {
    if (traces == nullptr || out == nullptr) return invalid("psid_traces_rows requires a handle");
    *out = traces->t.size();
    return PSID_OK;
}

psid_status psid_traces_cols(const psid_traces* traces, size_t* out) {
    if (traces == nullptr || out == nullptr) return invalid("psid_traces_cols requires a handle");
    *out = traces->t.names.size();
    return PSID_OK;
}

psid_status psid_traces_name(const psid_traces* traces, size_t col, const char** out) {
    if (traces == nullptr || out == nullptr) return invalid("psid_traces_name requires a handle");
    if (col >= traces->t.names.size()) return invalid("column index out of range");
    *out = traces->t.names[col].c_str();
    return PSID_OK;
}

psid_status psid_traces_unit(const psid_traces* traces, size_t col, const char** out) {
    if (traces == nullptr || out == nullptr) return invalid("psid_traces_unit requires a handle");
    if (col >= traces->t.units.size()) return invalid("column index out of range");
    *out = traces->t.units[col].c_str();
    return PSID_OK;
}

psid_status psid_traces_time(const psid_traces* traces, const double** out) {
    if (traces == nullptr || out == nullptr) return invalid("psid_traces_time requires a handle");
    *out = traces->t.t.data();
    return PSID_OK;
}

psid_status psid_traces_column(const psid_traces* traces, size_t col, const double** out) {
    if (traces == nullptr || out == nullptr)
        return invalid("psid_traces_column requires a handle");
    if (col >= traces->t.cols.size()) return invalid("column index out of range");
    *out = traces->t.cols[col].data();
    return PSID_OK;
}

psid_status psid_traces_write_csv(const psid_traces* traces, const char* path) {
    if (traces == nullptr || path == nullptr)
        return invalid("psid_traces_write_csv requires a handle and a path");
    return guarded([&] { psid::sim::write_trace_csv(traces->t, path); });
}

psid_status psid_equilibrium_residual(const psid_system* sys, double* out) {
    if (sys == nullptr || out == nullptr)
        return invalid("psid_equilibrium_residual requires a system and an output");
    return guarded([&] { *out = psid::sim::initial_derivative_norm(sys->m); });
}

psid_status psid_measure_file(const psid_system* sys, const char* scenario_json,
                              const char* channel, double snr_db, uint64_t seed,
                              const char* out_csv) {
    if (sys == nullptr || channel == nullptr || out_csv == nullptr)
        return invalid("psid_measure_file requires a system, a channel and a path");
    return guarded([&] {
        const auto spec = psid::sim::ChannelSpec::parse(channel);
        auto sc = scenario_for(sys->m, scenario_json);
        sc.record = {spec};
        sc.record_internal = false;
        const auto trace = psid::sim::simulate(sys->m, sc);
        const auto m = psid::meas::synthesize(trace, spec, snr_db, seed);
        psid::meas::write_measurement_csv(m, out_csv);
    });
}

psid_status psid_simulate_run(const char* config_path, const char* overrides_json,
                              const char* out_csv_path) {
    if (out_csv_path == nullptr) return invalid("psid_simulate_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        const auto trace = psid::sim::simulate(cfg.system, cfg.scenario);
        psid::sim::write_trace_csv(trace, out_csv_path);
    });
}

psid_status psid_measure_run(const char* config_path, const char* overrides_json,
                             const char* out_csv_path) {
    if (out_csv_path == nullptr) return invalid("psid_measure_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        std::string channel;
        if (!cfg.channels.empty())
            channel = cfg.channels.front();
        else
            channel = "omega_m@" + cfg.system.machines.front().name;
        const auto spec = psid::sim::ChannelSpec::parse(channel);
        auto sc = cfg.scenario;
        sc.record = {spec};
        sc.record_internal = false;
        const auto trace = psid::sim::simulate(cfg.system, sc);
        const auto m = psid::meas::synthesize(trace, spec, cfg.snr_db, cfg.seed);
        psid::meas::write_measurement_csv(m, out_csv_path);
    });
}

psid_status psid_fim_run(const char* config_path, const char* overrides_json,
                         const char* out_json_path) {
    if (out_json_path == nullptr) return invalid("psid_fim_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        if (cfg.channels.empty()) throw psid::config_error("config lists no channel");
        if (cfg.params.empty()) throw psid::config_error("config lists no params");
        const auto& channel = cfg.channels.front();
        const auto simfn =
            psid::hrn::memoize(psid::hrn::make_simfn(cfg.system, cfg.scenario, channel, cfg.params));
        const auto y0 = simfn(cfg.p0);
        const double sigma_n = psid::meas::noise_sigma_from_snr(y0, cfg.snr_db);
        Eigen::VectorXd alpha(cfg.p0.size());
        for (Eigen::Index k = 0; k < cfg.p0.size(); ++k)
            alpha(k) = psid::hrn::choose_alpha(simfn, cfg.p0, static_cast<int>(k),
                                               cfg.params[static_cast<std::size_t>(k)], sigma_n,
                                               cfg.alpha)
                           .alpha;
        auto report = psid::fim::empirical_nfim(simfn, cfg.p0, cfg.params, alpha, sigma_n,
                                                cfg.nfim_realizations, cfg.seed);
        report.channel = channel;
        write_json_file(psid::fim::fim_report_to_json(report), out_json_path);
    });
}

psid_status psid_fit_run(const char* config_path, const char* overrides_json,
                         const char* out_json_path) {
    if (out_json_path == nullptr) return invalid("psid_fit_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        psid::hrn::OneShotResult res =
            cfg.measurement.empty()
                ? psid::hrn::one_shot(cfg, cfg.seed)
                : psid::hrn::one_shot_from_record(
                      cfg, psid::meas::read_measurement_csv(cfg.measurement));
        write_json_file(psid::hrn::one_shot_to_json(res), out_json_path);
    });
}

psid_status psid_select_run(const char* config_path, const char* overrides_json,
                            const char* out_json_path) {
    if (out_json_path == nullptr) return invalid("psid_select_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        const auto result = psid::hrn::run_algorithm1(cfg);
        write_json_file(psid::hrn::algorithm1_to_json(result), out_json_path);
    });
}

psid_status psid_study_run(const char* config_path, const char* overrides_json,
                           const char* out_dir) {
    if (out_dir == nullptr) return invalid("psid_study_run requires an output directory");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        const auto report = psid::hrn::monte_carlo_study(cfg);
        psid::hrn::export_study(report, out_dir);
    });
}

psid_status psid_sweep_run(const char* config_path, const char* overrides_json,
                           const char* out_csv_path) {
    if (out_csv_path == nullptr) return invalid("psid_sweep_run requires an output path");
    return guarded([&] {
        const auto cfg = psid::hrn::study_config_from_json(
            load_merged_config(config_path, overrides_json));
        const auto report = psid::hrn::perturbation_sweep(cfg);
        psid::hrn::write_sweep_csv(report, out_csv_path);
    });
}

} // extern "C"
