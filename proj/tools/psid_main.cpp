// Command line front end. Talks to the library through the C API only.

#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "psid.h"

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double snr_db = 0.0;
    bool snr_set = false;
    int trials = 0;
    bool trials_set = false;
    int parallel = 0;
    bool parallel_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
    auto* copt = cmd->add_option("--config", args.config, "study config JSON file");
    if (config_required) copt->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out, "output path")->required();
    cmd->add_option("--seed", args.seed, "master RNG seed")
        ->each([&](const std::string&) { args.seed_set = true; });
    cmd->add_option("--snr-db", args.snr_db, "signal-to-noise ratio in dB")
        ->each([&](const std::string&) { args.snr_set = true; });
}

void add_study_flags(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--trials", args.trials, "Monte-Carlo trial count")
        ->check(CLI::PositiveNumber)
        ->each([&](const std::string&) { args.trials_set = true; });
    cmd->add_option("--parallel", args.parallel, "worker thread count")
        ->check(CLI::PositiveNumber)
        ->each([&](const std::string&) { args.parallel_set = true; });
}

std::string overrides_of(const CommonArgs& args) {
    nlohmann::json j = nlohmann::json::object();
    if (args.seed_set) j["seed"] = args.seed;
    if (args.snr_set) j["snr_db"] = args.snr_db;
    if (args.trials_set) j["trials"] = args.trials;
    if (args.parallel_set) j["workers"] = args.parallel;
    return j.empty() ? std::string{} : j.dump();
}

int exit_code(psid_status status) {
    switch (status) {
    case PSID_OK: return 0;
    case PSID_ERR_NUMERIC: return 2;
    case PSID_ERR_STUDY: return 3;
    default: return 1;  // config, io, invalid
    }
}

int finish(const char* verb, psid_status status, const std::string& out) {
    if (status == PSID_OK) {
        std::printf("%s: wrote %s\n", verb, out.c_str());
        return 0;
    }
    std::fprintf(stderr, "%s failed: %s\n", verb, psid_last_error());
    return exit_code(status);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"governor/AVR parameter identification from transient records"};
    app.require_subcommand(1);

    CommonArgs sim_args, meas_args, fim_args, fit_args, sel_args, study_args, sweep_args;

    auto* sim_cmd = app.add_subcommand("simulate", "integrate the system and write a trace CSV");
    add_common(sim_cmd, sim_args, false);

    auto* meas_cmd =
        app.add_subcommand("measure", "write one noisy channel record (CSV + sidecar)");
    add_common(meas_cmd, meas_args, false);

    auto* fim_cmd = app.add_subcommand(
        "fim", "numerical information matrix at the assumed parameters (JSON)");
    add_common(fim_cmd, fim_args, true);

    auto* fit_cmd =
        app.add_subcommand("fit", "estimate parameters from a record and report the fit (JSON)");
    add_common(fit_cmd, fit_args, true);

    auto* sel_cmd = app.add_subcommand(
        "select", "rank candidate channels by confidence ellipsoid volume (JSON)");
    add_common(sel_cmd, sel_args, true);

    auto* study_cmd = app.add_subcommand(
        "study", "Monte-Carlo identification study; writes summary.json and CSV tables");
    add_common(study_cmd, study_args, true);
    add_study_flags(study_cmd, study_args);

    auto* sweep_cmd =
        app.add_subcommand("sweep", "perturbation size sweep against the noise floor (CSV)");
    add_common(sweep_cmd, sweep_args, true);

    CLI11_PARSE(app, argc, argv);

    auto cpath = [](const CommonArgs& a) { return a.config.empty() ? nullptr : a.config.c_str(); };

    if (sim_cmd->parsed()) {
        const auto ov = overrides_of(sim_args);
        return finish("simulate",
                      psid_simulate_run(cpath(sim_args), ov.empty() ? nullptr : ov.c_str(),
                                        sim_args.out.c_str()),
                      sim_args.out);
    }
    if (meas_cmd->parsed()) {
        const auto ov = overrides_of(meas_args);
        return finish("measure",
                      psid_measure_run(cpath(meas_args), ov.empty() ? nullptr : ov.c_str(),
                                       meas_args.out.c_str()),
                      meas_args.out);
    }
    if (fim_cmd->parsed()) {
        const auto ov = overrides_of(fim_args);
        return finish("fim",
                      psid_fim_run(cpath(fim_args), ov.empty() ? nullptr : ov.c_str(),
                                   fim_args.out.c_str()),
                      fim_args.out);
    }
    if (fit_cmd->parsed()) {
        const auto ov = overrides_of(fit_args);
        return finish("fit",
                      psid_fit_run(cpath(fit_args), ov.empty() ? nullptr : ov.c_str(),
                                   fit_args.out.c_str()),
                      fit_args.out);
    }
    if (sel_cmd->parsed()) {
        const auto ov = overrides_of(sel_args);
        return finish("select",
                      psid_select_run(cpath(sel_args), ov.empty() ? nullptr : ov.c_str(),
                                      sel_args.out.c_str()),
                      sel_args.out);
    }
    if (study_cmd->parsed()) {
        const auto ov = overrides_of(study_args);
        return finish("study",
                      psid_study_run(cpath(study_args), ov.empty() ? nullptr : ov.c_str(),
                                     study_args.out.c_str()),
                      study_args.out);
    }
    if (sweep_cmd->parsed()) {
        const auto ov = overrides_of(sweep_args);
        return finish("sweep",
                      psid_sweep_run(cpath(sweep_args), ov.empty() ? nullptr : ov.c_str(),
                                     sweep_args.out.c_str()),
                      sweep_args.out);
    }
    return 1;
}
