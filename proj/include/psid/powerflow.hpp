#pragma once

#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "psid/model.hpp"

namespace psid::pf {

/// Equilibrium of one machine extracted from a converged load flow.
struct MachineInit {
    double delta = 0.0;     // rotor angle, rad
    double omega_pu = 1.0;  // electrical speed, pu
    double eq_t = 0.0;      // q-axis transient voltage E'_q, pu
    double ed_t = 0.0;      // d-axis transient voltage E'_d, pu
    double efd_ss = 0.0;    // field voltage holding the equilibrium, pu
    double pm_ss = 0.0;     // mechanical power holding the equilibrium, pu
    double id = 0.0;        // d-axis stator current, pu
    double iq = 0.0;        // q-axis stator current, pu
    double v_rms = 0.0;     // terminal voltage magnitude, pu
    double pe = 0.0;        // electrical power output, pu (system base)
    double te = 0.0;        // electromagnetic torque, pu
};

/// Converged pre-disturbance operating point of the whole system.
struct OperatingPoint {
    std::vector<std::complex<double>> v_bus;  // aligned with model.buses
    std::vector<MachineInit> machines;        // aligned with model.machines
    int iterations = 0;
    double mismatch = 0.0;  // worst power residual at convergence, pu
};

/// Controller references that hold a machine at its operating point.
struct Setpoints {
    double p_ref = 0.0;
    double v_ref = 0.0;
};

/// Network admittance matrix from branches and transformers only (no loads,
/// no machines), in system per-unit. Bus order follows model.buses.
Eigen::MatrixXcd build_ybus(const model::SystemModel& model);

/// Constant shunt admittance that reproduces the load's nominal power draw at
/// the given (load-flow) bus voltage.
std::complex<double> load_admittance(const model::LoadSpec& load,
                                     const std::complex<double>& v_bus,
                                     double base_mva);

/// Two-axis machine equilibrium behind the stator impedance for a given
/// terminal voltage and injected current phasor.
MachineInit machine_equilibrium(const model::MachineUnit& machine,
                                std::complex<double> v_term,
                                std::complex<double> i_inj);

/// Governor and exciter references consistent with a machine equilibrium.
Setpoints compute_setpoints(const MachineInit& init,
                            const model::GovernorIEEEG3& gov,
                            const model::AvrSEXS& avr);

/// Newton-Raphson load flow over the always-energized loads. The flagged
/// machine holds the slack bus, remaining machine buses are PV, the rest PQ.
/// Throws Numeric on divergence, Config on structural problems.
OperatingPoint init_load_flow(const model::SystemModel& model,
                              double tol = 1e-12, int max_iter = 50);

} // namespace psid::pf
