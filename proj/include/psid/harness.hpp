#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "psid/dynsim.hpp"
#include "psid/estimator.hpp"
#include "psid/fisher.hpp"
#include "psid/measure.hpp"
#include "psid/model.hpp"

namespace psid::hrn {

/// How to size the relative perturbation used for information estimates.
struct AlphaPolicy {
    bool auto_size = true;  // scan the grid for the first feasible size
    double value = 1e-3;    // fixed size when auto_size is false
    double c_margin = 1.05;
    fim::AlphaGrid grid;
    // Per-parameter size used when the scan finds nothing. Without an entry the
    // scan failure propagates; with one, a channel that barely sees a parameter
    // can still be studied at an explicitly chosen perturbation.
    std::map<std::string, double> fallback;
};

/// Full description of an identification experiment.
struct StudyConfig {
    model::SystemModel system;
    sim::Scenario scenario;
    std::vector<std::string> channels;
    std::vector<std::string> params;
    Eigen::VectorXd p_true;  // defaults to the model values
    Eigen::VectorXd p0;      // initial guesses, defaults to p_true
    Eigen::VectorXd lower;   // defaults to 0.5 * p0
    Eigen::VectorXd upper;   // defaults to 1.5 * p0
    bool joint = false;      // fit all params at once instead of one study each
    double snr_db = 80.0;
    int trials = 100;
    int nfim_realizations = 100;
    std::uint64_t seed = 1;
    int workers = 1;
    AlphaPolicy alpha;
    est::FitOptions fit;
    std::map<std::string, double> pu_base;  // per-parameter variance base override
    std::string measurement;                // optional record file for one-shot fits
};

StudyConfig study_config_from_json(const nlohmann::json& j);
StudyConfig load_study_config(const std::string& path);

/// Noiseless single-channel output as a function of the listed parameters,
/// with every other aspect of the system and scenario frozen.
fim::SimFn make_simfn(const model::SystemModel& system, const sim::Scenario& scenario,
                      const std::string& channel, const std::vector<std::string>& paths);

/// Thread-safe memoizing wrapper keyed on the exact parameter bytes.
fim::SimFn memoize(fim::SimFn inner);

/// Size the perturbation for parameter k of p0 on the channel behind simfn:
/// grid scan when the policy asks for it (with the per-parameter fallback when
/// the scan finds nothing), fixed value otherwise.
fim::AlphaChoice choose_alpha(const fim::SimFn& simfn, const Eigen::VectorXd& p0, int k,
                              const std::string& path, double sigma_n, const AlphaPolicy& policy);

/// Run body(0..n-1) on up to `workers` threads; exceptions are rethrown
/// (lowest index wins) after all workers finish.
void parallel_for(int n, int workers, const std::function<void(int)>& body);

// --- one-shot identification -------------------------------------------------

struct OneShotResult {
    std::string channel;
    std::vector<std::string> params;
    Eigen::VectorXd p_true;
    Eigen::VectorXd p0;
    Eigen::VectorXd alpha;
    double sigma_n = 0.0;
    est::FitResult fit;
    fim::FimReport fim;  // at the estimate, from the fitted record
};

/// Synthesize one record at the true parameters, fit from p0, then evaluate
/// the information at the estimate.
OneShotResult one_shot(const StudyConfig& cfg, std::uint64_t seed);

/// Same, but against an existing record instead of a synthetic one.
OneShotResult one_shot_from_record(const StudyConfig& cfg, const meas::MeasurementSet& record);

nlohmann::json one_shot_to_json(const OneShotResult& r);

// --- channel selection ---------------------------------------------------------

struct SelectionEntry {
    std::string channel;
    double ellipsoid_volume = 0.0;
    double min_eigenvalue = 0.0;
    fim::FimReport report;
};

struct SelectionReport {
    std::vector<std::string> params;
    std::vector<SelectionEntry> ranked;  // ascending ellipsoid volume
};

/// Rank candidate channels by the confidence-ellipsoid volume of the joint
/// information estimate at the assumed parameters. Smaller is better. A
/// channel on which some parameter never lifts the output above the noise
/// floor ranks last with an infinite volume; only when every candidate is
/// infeasible does the selection fail (Study).
SelectionReport select_channels(const StudyConfig& cfg);

nlohmann::json selection_to_json(const SelectionReport& r);

struct Algorithm1Result {
    SelectionReport selection;
    std::string selected;  // feasible channel with the smallest volume
    OneShotResult fit;     // identification on the selected channel
};

/// Channel selection followed by identification on the winner: rank every
/// candidate channel, take the smallest finite ellipsoid volume, then fit
/// the listed parameters against a record of that channel.
Algorithm1Result run_algorithm1(const StudyConfig& cfg);

nlohmann::json algorithm1_to_json(const Algorithm1Result& r);

// --- perturbation sweep ----------------------------------------------------------

struct SweepRow {
    std::string param;
    double alpha = 0.0;
    double sigma_d = 0.0;
    double sigma_n = 0.0;
    bool feasible = false;
    double nfim = 0.0;       // scalar information estimate using this alpha
    double nfim_norm = 0.0;  // nfim over the value at the grid alpha nearest 1.0
};

struct SweepReport {
    std::string channel;
    double c_margin = 0.0;
    std::vector<SweepRow> rows;
};

/// Evaluate every grid perturbation size for every parameter on one channel.
SweepReport perturbation_sweep(const StudyConfig& cfg);

void write_sweep_csv(const SweepReport& r, const std::string& path);

// --- Monte-Carlo study ------------------------------------------------------------

struct TrialResult {
    std::uint64_t seed = 0;
    bool ok = true;      // failed trials are recorded and excluded from aggregates
    std::string error;   // diagnostic when ok is false
    double p_hat = 0.0;
    double sse = 0.0;
    int iterations = 0;
    bool converged = false;
    double nfim = 0.0;  // noise-ensemble information estimate at this trial's solution
};

struct CellResult {
    std::string channel;
    std::string param;
    double p_true = 0.0, p0 = 0.0;
    double alpha = 0.0, sigma_d = 0.0, sigma_n = 0.0;
    double pu_base = 0.0;
    std::vector<TrialResult> trials;
    int failed = 0;                 // trials excluded from the aggregates below
    bool variance_defined = false;  // needs at least two successful trials
    double mean_est = 0.0, bias = 0.0;
    double avg_rel_err_pct = 0.0;              // mean |p_hat - p_true| / |p_true| * 100
    double variance = 0.0, variance_pu = 0.0;  // NaN when not defined
    double avg_nfim = 0.0, avg_ncrlb = 0.0, avg_ve = 0.0;
    // 1-based ranks among the channel's cells: rank_ve orders the average
    // ellipsoid volumes, rank_var the native-unit variances (the same unit
    // family the volume is built from; the per-unit column is for reading
    // across parameters, not for ranking).
    int rank_ve = 0, rank_var = 0;
};

struct StudyReport {
    std::vector<std::string> channels;
    std::vector<std::string> params;
    bool joint = false;
    int trials = 0;
    double snr_db = 0.0;
    std::uint64_t seed = 0;
    std::vector<CellResult> cells;  // channel-major, then parameter
};

/// One identification experiment per (channel, parameter) pair, or per
/// channel with all parameters fitted jointly when cfg.joint is set.
/// Per trial: a fresh noisy record, a bounded fit from p0, and an
/// information estimate at the trial's own solution; aggregated over trials.
/// In joint mode the per-parameter cells of one channel share the trial fit
/// and the joint information estimate (avg_nfim holds the diagonal entry,
/// avg_ncrlb the matching entry of the inverted averaged matrix, avg_ve the
/// channel-wide volume). Individual trial failures are recorded and
/// excluded; a cell with more than 10% failed trials fails the study (Study).
StudyReport monte_carlo_study(const StudyConfig& cfg);

nlohmann::json study_report_to_json(const StudyReport& r);

/// Write summary.json, cells.csv (one row per cell), channel_summary.csv
/// (per-channel averages) and trials.csv (one row per trial) into dir.
void export_study(const StudyReport& r, const std::string& dir);

} // namespace psid::hrn
