#include "psid/powerflow.hpp"

#include <cmath>

#include "psid/errors.hpp"

namespace psid::pf {

using model::SystemModel;
using std::complex;

Eigen::MatrixXcd build_ybus(const SystemModel& model) {
    const auto n = static_cast<Eigen::Index>(model.buses.size());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const auto& br : model.branches) {
        const auto f = model.bus_index(br.from);
        const auto t = model.bus_index(br.to);
        const complex<double> ys = 1.0 / complex<double>(br.r, br.x);
        const complex<double> ysh(0.0, br.b / 2.0);
        y(f, f) += ys + ysh;
        y(t, t) += ys + ysh;
        y(f, t) -= ys;
        y(t, f) -= ys;
    }
    for (const auto& tr : model.transformers) {
        const auto f = model.bus_index(tr.from);
        const auto t = model.bus_index(tr.to);
        const complex<double> ys = 1.0 / complex<double>(0.0, tr.x);
        const double a = tr.ratio;
        y(f, f) += ys / (a * a);
        y(t, t) += ys;
        y(f, t) -= ys / a;
        y(t, f) -= ys / a;
    }
    return y;
}

std::complex<double> load_admittance(const model::LoadSpec& load,
                                     const std::complex<double>& v_bus,
                                     double base_mva) {
    const complex<double> s(load.p_mw / base_mva, load.q_mvar / base_mva);
    const double v2 = std::norm(v_bus);
    if (v2 <= 0.0) throw numeric_error("load bus voltage is zero, cannot size admittance");
    return std::conj(s) / v2;
}

MachineInit machine_equilibrium(const model::MachineUnit& m,
                                std::complex<double> v, std::complex<double> i) {
    MachineInit out;
    const complex<double> e_behind = v + complex<double>(m.r_a, m.x_q) * i;
    out.delta = std::arg(e_behind);
    const double sn = std::sin(out.delta), cs = std::cos(out.delta);
    const double vd = sn * v.real() - cs * v.imag();
    const double vq = cs * v.real() + sn * v.imag();
    out.id = sn * i.real() - cs * i.imag();
    out.iq = cs * i.real() + sn * i.imag();
    out.eq_t = vq + m.r_a * out.iq + m.x_d_t * out.id;
    out.ed_t = vd + m.r_a * out.id - m.x_q_t * out.iq;
    out.efd_ss = out.eq_t + (m.x_d - m.x_d_t) * out.id;
    out.te = out.ed_t * out.id + out.eq_t * out.iq +
             (m.x_q_t - m.x_d_t) * out.id * out.iq;
    out.pm_ss = out.te;  // omega = 1 pu at equilibrium
    out.pe = (v * std::conj(i)).real();
    out.v_rms = std::abs(v);
    out.omega_pu = 1.0;
    return out;
}

Setpoints compute_setpoints(const MachineInit& init,
                            const model::GovernorIEEEG3& gov,
                            const model::AvrSEXS& avr) {
    Setpoints sp;
    sp.p_ref = gov.k_sigma * init.pm_ss / gov.k_t;
    sp.v_ref = init.efd_ss / avr.k + init.v_rms;
    return sp;
}

OperatingPoint init_load_flow(const SystemModel& model, double tol, int max_iter) {
    model.validate();
    const int n = static_cast<int>(model.buses.size());
    const Eigen::MatrixXcd ybus = build_ybus(model);

    enum class Kind { Slack, Pv, Pq };
    std::vector<Kind> kind(static_cast<std::size_t>(n), Kind::Pq);
    Eigen::VectorXd p_spec = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd q_spec = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd vm = Eigen::VectorXd::Ones(n);
    Eigen::VectorXd va = Eigen::VectorXd::Zero(n);

    for (const auto& m : model.machines) {
        const auto bi = model.bus_index(m.bus);
        kind[static_cast<std::size_t>(bi)] = m.slack ? Kind::Slack : Kind::Pv;
        vm(bi) = m.v_setpoint_pu;
        if (!m.slack) p_spec(bi) += m.p_dispatch_mw / model.base_mva;
    }
    for (const auto& ld : model.loads) {
        if (ld.energize_time) continue;  // switched blocks are not present pre-event
        const auto bi = model.bus_index(ld.bus);
        p_spec(bi) -= ld.p_mw / model.base_mva;
        q_spec(bi) -= ld.q_mvar / model.base_mva;
    }

    std::vector<int> ang_idx, mag_idx;
    for (int i = 0; i < n; ++i) {
        if (kind[static_cast<std::size_t>(i)] != Kind::Slack) ang_idx.push_back(i);
        if (kind[static_cast<std::size_t>(i)] == Kind::Pq) mag_idx.push_back(i);
    }
    const int na = static_cast<int>(ang_idx.size());
    const int nm = static_cast<int>(mag_idx.size());

    auto injections = [&](Eigen::VectorXd& p, Eigen::VectorXd& q) {
        for (int i = 0; i < n; ++i) {
            double pi = 0.0, qi = 0.0;
            for (int k = 0; k < n; ++k) {
                const double g = ybus(i, k).real(), b = ybus(i, k).imag();
                const double th = va(i) - va(k);
                pi += vm(k) * (g * std::cos(th) + b * std::sin(th));
                qi += vm(k) * (g * std::sin(th) - b * std::cos(th));
            }
            p(i) = vm(i) * pi;
            q(i) = vm(i) * qi;
        }
    };

    Eigen::VectorXd p_calc(n), q_calc(n);
    double worst = 0.0;
    int it = 0;
    for (; it < max_iter; ++it) {
        injections(p_calc, q_calc);
        Eigen::VectorXd mis(na + nm);
        for (int r = 0; r < na; ++r) mis(r) = p_spec(ang_idx[r]) - p_calc(ang_idx[r]);
        for (int r = 0; r < nm; ++r) mis(na + r) = q_spec(mag_idx[r]) - q_calc(mag_idx[r]);
        worst = mis.size() ? mis.cwiseAbs().maxCoeff() : 0.0;
        if (worst < tol) break;

        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(na + nm, na + nm);
        for (int r = 0; r < na; ++r) {
            const int i = ang_idx[r];
            for (int c = 0; c < na; ++c) {
                const int k = ang_idx[c];
                if (i == k) {
                    jac(r, c) = -q_calc(i) - ybus(i, i).imag() * vm(i) * vm(i);
                } else {
                    const double g = ybus(i, k).real(), b = ybus(i, k).imag();
                    const double th = va(i) - va(k);
                    jac(r, c) = vm(i) * vm(k) * (g * std::sin(th) - b * std::cos(th));
                }
            }
            for (int c = 0; c < nm; ++c) {
                const int k = mag_idx[c];
                if (i == k) {
                    jac(r, na + c) = p_calc(i) / vm(i) + ybus(i, i).real() * vm(i);
                } else {
                    const double g = ybus(i, k).real(), b = ybus(i, k).imag();
                    const double th = va(i) - va(k);
                    jac(r, na + c) = vm(i) * (g * std::cos(th) + b * std::sin(th));
                }
            }
        }
        for (int r = 0; r < nm; ++r) {
            const int i = mag_idx[r];
            for (int c = 0; c < na; ++c) {
                const int k = ang_idx[c];
                if (i == k) {
                    jac(na + r, c) = p_calc(i) - ybus(i, i).real() * vm(i) * vm(i);
                } else {
                    const double g = ybus(i, k).real(), b = ybus(i, k).imag();
                    const double th = va(i) - va(k);
                    jac(na + r, c) = -vm(i) * vm(k) * (g * std::cos(th) + b * std::sin(th));
                }
            }
            for (int c = 0; c < nm; ++c) {
                const int k = mag_idx[c];
                if (i == k) {
                    jac(na + r, na + c) = q_calc(i) / vm(i) - ybus(i, i).imag() * vm(i);
                } else {
                    const double g = ybus(i, k).real(), b = ybus(i, k).imag();
                    const double th = va(i) - va(k);
                    jac(na + r, na + c) = vm(i) * (g * std::sin(th) - b * std::cos(th));
                }
            }
        }

        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        const Eigen::VectorXd dx = lu.solve(mis);
        if (!dx.allFinite()) throw numeric_error("load flow Jacobian solve produced non-finite step");
        for (int r = 0; r < na; ++r) va(ang_idx[r]) += dx(r);
        for (int r = 0; r < nm; ++r) {
            vm(mag_idx[r]) += dx(na + r);
            if (vm(mag_idx[r]) < 1e-6)
                throw numeric_error("load flow voltage collapsed at bus " +
                                    model.buses[static_cast<std::size_t>(mag_idx[r])].id);
        }
    }
    if (worst >= tol)
        throw numeric_error("load flow failed to converge: residual " + std::to_string(worst));

    OperatingPoint op;
    op.iterations = it;
    op.mismatch = worst;
    op.v_bus.resize(static_cast<std::size_t>(n));
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) {
        v(i) = std::polar(vm(i), va(i));
        op.v_bus[static_cast<std::size_t>(i)] = v(i);
    }

    const Eigen::VectorXcd i_net = ybus * v;
    op.machines.reserve(model.machines.size());
    for (const auto& m : model.machines) {
        const auto bi = model.bus_index(m.bus);
        complex<double> i_load(0.0, 0.0);
        for (const auto& ld : model.loads) {
            if (ld.energize_time) continue;
            if (model.bus_index(ld.bus) != bi) continue;
            const complex<double> s(ld.p_mw / model.base_mva, ld.q_mvar / model.base_mva);
            i_load += std::conj(s / v(bi));
        }
        const complex<double> i_gen = i_net(bi) + i_load;
        op.machines.push_back(machine_equilibrium(m, v(bi), i_gen));
    }
    return op;
}

} // namespace psid::pf
