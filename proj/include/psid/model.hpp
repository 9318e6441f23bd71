#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace psid::model {

/// Network bus. Voltages are expressed in per-unit on `base_kv`.
struct Bus {
    std::string id;
    double base_kv = 0.0;
};

/// Series branch (transmission line), pi model. All values in p.u. on the
/// system base; `b` is the total line charging susceptance (split half per end).
struct Branch {
    std::string from;
    std::string to;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;
};

/// Two-winding transformer reduced to a series leakage reactance with an
/// off-nominal tap `ratio` on the `from` side (1.0 = nominal).
struct Transformer {
    std::string from;
    std::string to;
    double x = 0.0;
    double ratio = 1.0;
};

/// Load block. Blocks with `energize_time` set are switched in during the
/// transient; blocks without it are present in the load flow.
struct LoadSpec {
    std::string bus;
    double p_mw = 0.0;
    double q_mvar = 0.0;
    std::optional<double> energize_time; // seconds
};

/// IEEEG3-style governor/turbine: gate servo, integrator with position and
/// rate limits, permanent/transient droop feedback, non-minimum-phase turbine.
struct GovernorIEEEG3 {
    double k_g = 5.0;      ///< gate servo gain
    double t_p = 0.05;     ///< valve time constant [s]
    double k_sigma = 0.04; ///< permanent droop coefficient
    double k_delta = 0.8;  ///< transient droop coefficient
    double t_r = 5.0;      ///< transient droop washout time constant [s]
    double k_t = 1.5;      ///< turbine gain
    double t_n = -1.7067;  ///< turbine numerator time constant [s], may be negative
    double t_d = 2.4;      ///< turbine denominator time constant [s]
    double g_min = 0.0;
    double g_max = 1.0;
    double rate_min = -0.1; ///< gate rate limit [p.u./s]
    double rate_max = 0.1;
    double p_ref = 0.0;     ///< speed/load reference; set from the operating point
};

/// SEXS-style AVR: lead-lag plus limited first-order exciter.
struct AvrSEXS {
    double t_a = 1.0;   ///< lead time constant [s]
    double t_b = 12.0;  ///< lag time constant [s]
    double k = 20.0;    ///< exciter gain
    double t_e = 0.04;  ///< exciter time constant [s]
    double efd_min = 0.0;
    double efd_max = 5.0;
    double v_ref = 0.0; ///< voltage reference; set from the operating point
};

/// Synchronous machine (two-axis model) plus its controllers. Electrical
/// parameters and inertia are expressed on the system MVA base; the rating
/// fields are nameplate metadata.
struct MachineUnit {
    std::string name;
    std::string bus;
    double rating_mva = 0.0;
    double rating_kv = 0.0;
    int pole_count = 2;

    double r_a = 0.0;   ///< stator resistance
    double x_d = 0.0;   ///< d-axis synchronous reactance
    double x_d_t = 0.0; ///< d-axis transient reactance
    double x_q = 0.0;   ///< q-axis synchronous reactance
    double x_q_t = 0.0; ///< q-axis transient reactance
    double t_d0_t = 0.0; ///< d-axis open-circuit transient time constant [s]
    double t_q0_t = 0.0; ///< q-axis open-circuit transient time constant [s]
    double h = 0.0;      ///< inertia constant [s] on system base
    double d = 0.0;      ///< damping torque coefficient

    double p_dispatch_mw = 0.0; ///< scheduled active power (PV buses)
    double v_setpoint_pu = 1.0; ///< scheduled voltage magnitude
    bool slack = false;         ///< angle reference / slack machine

    GovernorIEEEG3 governor;
    AvrSEXS avr;
};

/// Static description of a study grid.
struct SystemModel {
    double base_mva = 100.0;
    double base_freq = 60.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Transformer> transformers;
    std::vector<LoadSpec> loads;
    std::vector<MachineUnit> machines;

    int bus_index(const std::string& id) const; ///< -1 if unknown
    int machine_index(const std::string& name) const;

    /// Throws Error(Config) when an invariant is violated (dangling bus
    /// references, non-positive bases, missing machines, bad machine or
    /// controller constants).
    void validate() const;
};

/// The modified IEEE 9-bus system: three machines with IEEEG3/SEXS
/// controllers, loads at buses 5, 6, 8, and the bus-6 load split into a
/// 75 MW base block plus a switched 15 MW block.
SystemModel ieee9_preset();

/// Same system with every switched block removed (load flow base case only).
SystemModel ieee9_preset_base_only();

// --- parameter paths -------------------------------------------------------
//
// Controller and machine constants are addressable by string path so that
// estimators can perturb them generically:
//   "<machine>.governor.<field>"   e.g. "SM1.governor.k_t"
//   "<machine>.avr.<field>"        e.g. "SM1.avr.k"
//   "<machine>.<field>"            e.g. "SM1.h"

double get_parameter(const SystemModel& model, const std::string& path);
void set_parameter(SystemModel& model, const std::string& path, double value);
void apply_overrides(SystemModel& model,
                     const std::vector<std::pair<std::string, double>>& overrides);
/// All addressable paths of a model, in declaration order.
std::vector<std::string> list_parameters(const SystemModel& model);

// --- serialization ----------------------------------------------------------

nlohmann::json to_json(const SystemModel& model);
SystemModel system_from_json(const nlohmann::json& j);
SystemModel load_system(const std::string& path_or_builtin); ///< "ieee9" is builtin
void save_system(const SystemModel& model, const std::string& path);

} // namespace psid::model
