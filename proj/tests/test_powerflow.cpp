#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>

#include "psid/errors.hpp"
#include "psid/model.hpp"
#include "psid/powerflow.hpp"

using namespace psid;
using std::complex;

TEST_CASE("admittance matrix assembly") {
    const auto s = model::ieee9_preset();
    const Eigen::MatrixXcd y = pf::build_ybus(s);
    REQUIRE(y.rows() == 9);
    REQUIRE(y.cols() == 9);

    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j)
            CHECK(std::abs(y(i, j) - y(j, i)) < 1e-12);

    // branch bus4-bus5 contributes -1/(r+jx) off the diagonal
    const complex<double> y45 = 1.0 / complex<double>(0.0100, 0.0850);
    CHECK(std::abs(y(3, 4) + y45) < 1e-12);
    // transformer bus1-bus4 is a pure series reactance at nominal tap
    const complex<double> yt = 1.0 / complex<double>(0.0, 0.0576);
    CHECK(std::abs(y(0, 3) + yt) < 1e-12);
    CHECK(std::abs(y(0, 0) - yt) < 1e-12);
    // a bus with no attached element would be all zero; none here
    for (int i = 0; i < 9; ++i) CHECK(std::abs(y(i, i)) > 0.0);

    // diagonal of bus4: transformer + two branches + their half charging
    const complex<double> y46 = 1.0 / complex<double>(0.0170, 0.0920);
    const complex<double> d4 = yt + y45 + y46 + complex<double>(0.0, (0.176 + 0.158) / 2.0);
    CHECK(std::abs(y(3, 3) - d4) < 1e-12);
}

TEST_CASE("load admittance reproduces the scheduled draw") {
    model::LoadSpec l;
    l.bus = "bus5";
    l.p_mw = 125.0;
    l.q_mvar = 50.0;
    const complex<double> v1(1.0, 0.0);
    const complex<double> y1 = pf::load_admittance(l, v1, 100.0);
    CHECK(y1.real() == doctest::Approx(1.25).epsilon(1e-12));
    CHECK(y1.imag() == doctest::Approx(-0.50).epsilon(1e-12));

    const complex<double> v2 = std::polar(1.02, 0.3);
    const complex<double> y2 = pf::load_admittance(l, v2, 100.0);
    // the drawn complex power at v2 must equal the schedule
    const complex<double> s2 = v2 * std::conj(y2 * v2) * 100.0;
    CHECK(s2.real() == doctest::Approx(125.0).epsilon(1e-12));
    CHECK(s2.imag() == doctest::Approx(50.0).epsilon(1e-12));
}

TEST_CASE("machine equilibrium at no load") {
    const auto s = model::ieee9_preset();
    const complex<double> v = std::polar(1.03, 0.2);
    const pf::MachineInit eq = pf::machine_equilibrium(s.machines[1], v, {0.0, 0.0});
    CHECK(eq.delta == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(eq.eq_t == doctest::Approx(1.03).epsilon(1e-12));
    CHECK(eq.ed_t == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eq.efd_ss == doctest::Approx(1.03).epsilon(1e-12));
    CHECK(eq.pm_ss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eq.pe == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eq.id == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eq.iq == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eq.v_rms == doctest::Approx(1.03).epsilon(1e-12));
    CHECK(eq.omega_pu == 1.0);
}

TEST_CASE("setpoints hold the operating point") {
    const auto s = model::ieee9_preset();
    pf::MachineInit init;
    init.pm_ss = 0.8;
    init.efd_ss = 2.0;
    init.v_rms = 1.0;
    const pf::Setpoints sp = pf::compute_setpoints(init, s.machines[0].governor,
                                                   s.machines[0].avr);
    CHECK(sp.p_ref == doctest::Approx(0.04 * 0.8 / 1.5).epsilon(1e-12));
    CHECK(sp.v_ref == doctest::Approx(2.0 / 20.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("nine-bus load flow converges to the book operating point") {
    const auto s = model::ieee9_preset_base_only();
    const pf::OperatingPoint op = pf::init_load_flow(s);
    CHECK(op.iterations > 0);
    CHECK(op.iterations < 15);
    CHECK(op.mismatch < 1e-10);

    REQUIRE(op.v_bus.size() == 9);
    CHECK(std::abs(op.v_bus[0]) == doctest::Approx(1.040).epsilon(1e-10));
    CHECK(std::arg(op.v_bus[0]) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(op.v_bus[1]) == doctest::Approx(1.025).epsilon(1e-10));
    CHECK(std::abs(op.v_bus[2]) == doctest::Approx(1.025).epsilon(1e-10));

    REQUIRE(op.machines.size() == 3);
    CHECK(op.machines[1].pe == doctest::Approx(1.63).epsilon(1e-8));
    CHECK(op.machines[2].pe == doctest::Approx(0.85).epsilon(1e-8));
    // slack picks up the remaining load plus losses
    CHECK(op.machines[0].pe > 0.3);
    CHECK(op.machines[0].pe < 0.9);

    for (std::size_t i = 0; i < 3; ++i) {
        const auto& m = op.machines[i];
        CHECK(m.omega_pu == 1.0);
        // lossless stator at equilibrium speed: torque, electrical and
        // mechanical power coincide
        CHECK(m.te == doctest::Approx(m.pe).epsilon(1e-10));
        CHECK(m.pm_ss == doctest::Approx(m.pe).epsilon(1e-10));
        const int bus = s.bus_index(s.machines[i].bus);
        CHECK(m.v_rms == doctest::Approx(std::abs(op.v_bus[static_cast<std::size_t>(bus)]))
                             .epsilon(1e-12));
        CHECK(m.efd_ss > 0.0);
        CHECK(m.efd_ss < 5.0);
    }
}

TEST_CASE("load flow reports divergence") {
    auto s = model::ieee9_preset_base_only();
    s.loads[0].p_mw = 1.0e6;
    try {
        (void)pf::init_load_flow(s);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numeric);
    }
}
