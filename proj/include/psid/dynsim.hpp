#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "psid/model.hpp"
#include "psid/powerflow.hpp"

namespace psid::sim {

/// Observable quantities at a machine.
enum class Quantity { OmegaM, Pe, Vrms, Efd, Pm };

/// One recordable channel, written "quantity@element", e.g. "omega_m@SM1".
struct ChannelSpec {
    Quantity quantity = Quantity::OmegaM;
    std::string element;

    static ChannelSpec parse(const std::string& text);
    std::string str() const;
    std::string unit() const;
};

/// Discrete change applied at a step boundary. Currently load energization.
struct Event {
    double time = 0.0;
    std::size_t load_index = 0;  // into SystemModel::loads
};

/// Everything that defines one simulation run apart from the system itself.
struct Scenario {
    double dt = 1e-3;
    double t_end = 20.0;
    enum class Integrator { Trapezoidal, Rk4 };
    Integrator integrator = Integrator::Trapezoidal;
    std::vector<Event> events;
    std::vector<ChannelSpec> record;
    bool record_internal = false;

    /// Default scenario for a system: every load with an energize time
    /// becomes an event, and all five quantities of every machine are
    /// recorded. scenario.events is the only event source used by simulate.
    static Scenario from_model(const model::SystemModel& model);
};

nlohmann::json scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j, const model::SystemModel& model);

/// Uniformly sampled multi-channel simulation output.
struct Trace {
    std::vector<double> t;
    std::vector<std::string> names;
    std::vector<std::string> units;
    std::vector<std::vector<double>> cols;  // cols[c][k], aligned with names

    std::size_t size() const { return t.size(); }
    int column_index(const std::string& name) const;
    const std::vector<double>& column(const std::string& name) const;
};

void write_trace_csv(const Trace& trace, const std::string& path);
Trace read_trace_csv(const std::string& path);

/// Rotation taking network [Re, Im] components into machine [d, q] components.
Eigen::Matrix2d dq_transform(double delta);

// --- standalone controller blocks -------------------------------------------

/// Gate servo, dashpot feedback and turbine lag states of one governor.
struct GovernorState {
    double x_v = 0.0;  // pilot servo output
    double g = 0.0;    // gate position
    double x_w = 0.0;  // dashpot washout state
    double x_t = 0.0;  // turbine lag state
};

/// Lead-lag and exciter lag states of one voltage regulator.
struct AvrState {
    double x_ll = 0.0;  // lead-lag internal state
    double x_e = 0.0;   // exciter lag state
};

GovernorState governor_equilibrium(const model::GovernorIEEEG3& gov, double pm_machine_pu);
double governor_p_ref(const model::GovernorIEEEG3& gov, double pm_machine_pu);
/// Mechanical power output in machine per-unit.
double governor_pm(const model::GovernorIEEEG3& gov, const GovernorState& s);
void governor_derivs(const model::GovernorIEEEG3& gov, const GovernorState& s,
                     double domega_e, double p_ref, GovernorState& ds);
/// One fixed-step trapezoidal update with the speed deviation held constant.
GovernorState governor_step(const model::GovernorIEEEG3& gov, const GovernorState& s,
                            double domega_e, double p_ref, double dt);

AvrState avr_equilibrium(const model::AvrSEXS& avr, double efd_ss);
double avr_v_ref(const model::AvrSEXS& avr, double efd_ss, double v_rms_ss);
double avr_efd(const model::AvrSEXS& avr, const AvrState& s);
void avr_derivs(const model::AvrSEXS& avr, const AvrState& s,
                double v_rms, double v_ref, AvrState& ds);
AvrState avr_step(const model::AvrSEXS& avr, const AvrState& s,
                  double v_rms, double v_ref, double dt);

// --- coupled simulation ------------------------------------------------------

/// Simulate the full system from its self-consistent equilibrium. Controller
/// states and references are rederived from the load flow and the effective
/// parameter set at t = 0, so any admissible parameter vector starts at rest.
/// Throws Numeric on singular networks or diverging states.
Trace simulate(const model::SystemModel& model, const Scenario& scenario);

/// Infinity norm of the full state derivative at the initialized equilibrium
/// with the pre-event network. Near zero for a consistent initialization.
double initial_derivative_norm(const model::SystemModel& model);

} // namespace psid::sim
