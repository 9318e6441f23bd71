#include "psid/dynsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <system_error>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"

namespace psid::sim {

using model::SystemModel;

// --- channels ----------------------------------------------------------------

namespace {

struct QuantityName {
    Quantity q;
    const char* name;
    const char* unit;
};
constexpr QuantityName kQuantities[] = {
    {Quantity::OmegaM, "omega_m", "rad/s"},
    {Quantity::Pe, "p_e", "MW"},
    {Quantity::Vrms, "v_rms", "pu"},
    {Quantity::Efd, "e_fd", "pu"},
    {Quantity::Pm, "p_m", "pu"},
};

} // namespace

ChannelSpec ChannelSpec::parse(const std::string& text) {
    const auto at = text.find('@');
    if (at == std::string::npos || at == 0 || at + 1 == text.size())
        throw config_error("channel '" + text + "' is not of the form quantity@element");
    const std::string qname = text.substr(0, at);
    ChannelSpec spec;
    spec.element = text.substr(at + 1);
    for (const auto& qn : kQuantities) {
        if (qname == qn.name) {
            spec.quantity = qn.q;
            return spec;
        }
    }
    throw config_error("unknown channel quantity '" + qname + "'");
}

std::string ChannelSpec::str() const {
    for (const auto& qn : kQuantities)
        if (qn.q == quantity) return std::string(qn.name) + "@" + element;
    return "?@" + element;
}

std::string ChannelSpec::unit() const {
    for (const auto& qn : kQuantities)
        if (qn.q == quantity) return qn.unit;
    return "";
}

// --- scenario ----------------------------------------------------------------

Scenario Scenario::from_model(const SystemModel& model) {
    Scenario sc;
    for (std::size_t i = 0; i < model.loads.size(); ++i)
        if (model.loads[i].energize_time)
            sc.events.push_back({*model.loads[i].energize_time, i});
    std::stable_sort(sc.events.begin(), sc.events.end(),
                     [](const Event& a, const Event& b) { return a.time < b.time; });
    for (const auto& m : model.machines)
        for (const auto& qn : kQuantities)
            sc.record.push_back({qn.q, m.name});
    return sc;
}

nlohmann::json scenario_to_json(const Scenario& s) {
    nlohmann::json j;
    j["dt"] = s.dt;
    j["t_end"] = s.t_end;
    j["integrator"] = s.integrator == Scenario::Integrator::Rk4 ? "rk4" : "trapezoidal";
    j["record_internal"] = s.record_internal;
    j["record"] = nlohmann::json::array();
    for (const auto& ch : s.record) j["record"].push_back(ch.str());
    j["events"] = nlohmann::json::array();
    for (const auto& ev : s.events)
        j["events"].push_back({{"time", ev.time}, {"load", ev.load_index}});
    return j;
}

Scenario scenario_from_json(const nlohmann::json& j, const SystemModel& model) {
    Scenario s = Scenario::from_model(model);
    try {
        if (j.contains("dt")) s.dt = j["dt"].get<double>();
        if (j.contains("t_end")) s.t_end = j["t_end"].get<double>();
        if (j.contains("integrator")) {
            const auto name = j["integrator"].get<std::string>();
            if (name == "rk4") s.integrator = Scenario::Integrator::Rk4;
            else if (name == "trapezoidal") s.integrator = Scenario::Integrator::Trapezoidal;
            else throw config_error("unknown integrator '" + name + "'");
        }
        if (j.contains("record_internal")) s.record_internal = j["record_internal"].get<bool>();
        if (j.contains("record")) {
            s.record.clear();
            for (const auto& jc : j["record"]) s.record.push_back(ChannelSpec::parse(jc.get<std::string>()));
        }
        if (j.contains("events")) {
            s.events.clear();
            for (const auto& je : j["events"]) {
                Event ev;
                ev.time = je.at("time").get<double>();
                ev.load_index = je.at("load").get<std::size_t>();
                s.events.push_back(ev);
            }
            std::stable_sort(s.events.begin(), s.events.end(),
                             [](const Event& a, const Event& b) { return a.time < b.time; });
        }
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("malformed scenario config: ") + e.what());
    }
    return s;
}

// --- trace -------------------------------------------------------------------

int Trace::column_index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

const std::vector<double>& Trace::column(const std::string& name) const {
    const int i = column_index(name);
    if (i < 0) throw config_error("trace has no column '" + name + "'");
    return cols[static_cast<std::size_t>(i)];
}

namespace {

void append_double(std::string& out, double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

double parse_double(std::string_view sv, const std::string& path) {
    double v = 0.0;
    const auto res = std::from_chars(sv.data(), sv.data() + sv.size(), v);
    if (res.ec != std::errc{})
        throw io_error("bad numeric field in '" + path + "'");
    return v;
}

} // namespace

void write_trace_csv(const Trace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write trace file '" + path + "'");
    std::string line = "t";
    for (std::size_t c = 0; c < trace.names.size(); ++c) {
        line += ',';
        line += trace.names[c];
        line += '[';
        line += trace.units[c];
        line += ']';
    }
    line += '\n';
    out << line;
    for (std::size_t k = 0; k < trace.t.size(); ++k) {
        line.clear();
        append_double(line, trace.t[k]);
        for (const auto& col : trace.cols) {
            line += ',';
            append_double(line, col[k]);
        }
        line += '\n';
        out << line;
    }
    if (!out) throw io_error("write failed for trace file '" + path + "'");
}

Trace read_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open trace file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw io_error("trace file '" + path + "' is empty");
    Trace tr;
    {
        std::stringstream hdr(line);
        std::string field;
        bool first = true;
        while (std::getline(hdr, field, ',')) {
            if (first) {
                if (field != "t") throw io_error("trace file '" + path + "' lacks a leading t column");
                first = false;
                continue;
            }
            const auto lb = field.find('[');
            if (lb != std::string::npos && field.back() == ']') {
                tr.names.push_back(field.substr(0, lb));
                tr.units.push_back(field.substr(lb + 1, field.size() - lb - 2));
            } else {
                tr.names.push_back(field);
                tr.units.push_back("");
            }
        }
    }
    tr.cols.assign(tr.names.size(), {});
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t pos = 0, col = 0;
        bool first = true;
        while (pos <= line.size()) {
            auto next = line.find(',', pos);
            if (next == std::string::npos) next = line.size();
            const std::string_view sv(line.data() + pos, next - pos);
            if (first) {
                tr.t.push_back(parse_double(sv, path));
                first = false;
            } else {
                if (col >= tr.cols.size()) throw io_error("row width mismatch in '" + path + "'");
                tr.cols[col++].push_back(parse_double(sv, path));
            }
            pos = next + 1;
            if (next == line.size()) break;
        }
        if (col != tr.cols.size()) throw io_error("row width mismatch in '" + path + "'");
    }
    return tr;
}

// --- controller blocks ---------------------------------------------------------

Eigen::Matrix2d dq_transform(double delta) {
    const double s = std::sin(delta), c = std::cos(delta);
    Eigen::Matrix2d t;
    t << s, -c, c, s;
    return t;
}

GovernorState governor_equilibrium(const model::GovernorIEEEG3& gov, double pm_machine_pu) {
    GovernorState s;
    s.g = pm_machine_pu / gov.k_t;
    if (s.g < gov.g_min || s.g > gov.g_max)
        throw config_error("dispatch requires gate " + std::to_string(s.g) +
                           " outside [" + std::to_string(gov.g_min) + ", " +
                           std::to_string(gov.g_max) + "]");
    s.x_v = 0.0;
    s.x_w = s.g;
    s.x_t = s.g;
    return s;
}

double governor_p_ref(const model::GovernorIEEEG3& gov, double pm_machine_pu) {
    return gov.k_sigma * pm_machine_pu / gov.k_t;
}

double governor_pm(const model::GovernorIEEEG3& gov, const GovernorState& s) {
    const double eta = gov.t_n / gov.t_d;
    return gov.k_t * (eta * s.g + (1.0 - eta) * s.x_t);
}

void governor_derivs(const model::GovernorIEEEG3& gov, const GovernorState& s,
                     double domega_e, double p_ref, GovernorState& ds) {
    const double feedback = gov.k_sigma * s.g + gov.k_delta * (s.g - s.x_w);
    const double e = p_ref - domega_e - feedback;
    ds.x_v = (gov.k_g * e - s.x_v) / gov.t_p;
    double rate = std::clamp(s.x_v, gov.rate_min, gov.rate_max);
    if ((s.g >= gov.g_max && rate > 0.0) || (s.g <= gov.g_min && rate < 0.0)) rate = 0.0;
    ds.g = rate;
    ds.x_w = (s.g - s.x_w) / gov.t_r;
    ds.x_t = (s.g - s.x_t) / gov.t_d;
}

GovernorState governor_step(const model::GovernorIEEEG3& gov, const GovernorState& s,
                            double domega_e, double p_ref, double dt) {
    GovernorState f0, fn, n = s;
    governor_derivs(gov, s, domega_e, p_ref, f0);
    auto advance = [&](const GovernorState& f0v, const GovernorState& f1v, double w0, double w1) {
        n.x_v = s.x_v + w0 * f0v.x_v + w1 * f1v.x_v;
        n.g = s.g + w0 * f0v.g + w1 * f1v.g;
        n.x_w = s.x_w + w0 * f0v.x_w + w1 * f1v.x_w;
        n.x_t = s.x_t + w0 * f0v.x_t + w1 * f1v.x_t;
    };
    advance(f0, f0, dt, 0.0);
    for (int it = 0; it < 3; ++it) {
        governor_derivs(gov, n, domega_e, p_ref, fn);
        advance(f0, fn, dt / 2.0, dt / 2.0);
    }
    n.g = std::clamp(n.g, gov.g_min, gov.g_max);
    return n;
}

AvrState avr_equilibrium(const model::AvrSEXS& avr, double efd_ss) {
    if (efd_ss < avr.efd_min || efd_ss > avr.efd_max)
        throw config_error("equilibrium field voltage " + std::to_string(efd_ss) +
                           " outside [" + std::to_string(avr.efd_min) + ", " +
                           std::to_string(avr.efd_max) + "]");
    AvrState s;
    s.x_e = efd_ss;
    s.x_ll = efd_ss / avr.k;
    return s;
}

double avr_v_ref(const model::AvrSEXS& avr, double efd_ss, double v_rms_ss) {
    return efd_ss / avr.k + v_rms_ss;
}

double avr_efd(const model::AvrSEXS& avr, const AvrState& s) {
    return std::clamp(s.x_e, avr.efd_min, avr.efd_max);
}

void avr_derivs(const model::AvrSEXS& avr, const AvrState& s,
                double v_rms, double v_ref, AvrState& ds) {
    const double ev = v_ref - v_rms;
    ds.x_ll = (ev - s.x_ll) / avr.t_b;
    const double ratio = avr.t_a / avr.t_b;
    const double y_ll = ratio * ev + (1.0 - ratio) * s.x_ll;
    double dxe = (avr.k * y_ll - s.x_e) / avr.t_e;
    if ((s.x_e >= avr.efd_max && dxe > 0.0) || (s.x_e <= avr.efd_min && dxe < 0.0)) dxe = 0.0;
    ds.x_e = dxe;
}

AvrState avr_step(const model::AvrSEXS& avr, const AvrState& s,
                  double v_rms, double v_ref, double dt) {
    AvrState f0, fn, n = s;
    avr_derivs(avr, s, v_rms, v_ref, f0);
    n.x_ll = s.x_ll + dt * f0.x_ll;
    n.x_e = s.x_e + dt * f0.x_e;
    for (int it = 0; it < 3; ++it) {
        avr_derivs(avr, n, v_rms, v_ref, fn);
        n.x_ll = s.x_ll + dt / 2.0 * (f0.x_ll + fn.x_ll);
        n.x_e = s.x_e + dt / 2.0 * (f0.x_e + fn.x_e);
    }
    n.x_e = std::clamp(n.x_e, avr.efd_min, avr.efd_max);
    return n;
}

// --- coupled simulation --------------------------------------------------------

namespace {

// State layout per machine, offsets into the global vector.
enum : int { S_DELTA = 0, S_OMEGA, S_EQT, S_EDT, S_XV, S_G, S_XW, S_XT, S_XLL, S_XE, S_COUNT };

struct NetOut {
    double vre = 0.0, vim = 0.0, vrms = 0.0;
    double id = 0.0, iq = 0.0;
    double te = 0.0, pe = 0.0;
};

class Engine {
public:
    Engine(const SystemModel& model, const Scenario& scenario)
        : model_(model), scenario_(scenario) {
        model_.validate();
        if (scenario_.dt <= 0.0) throw config_error("scenario dt must be positive");
        if (scenario_.t_end < 0.0) throw config_error("scenario t_end must be non-negative");
        for (const auto& ev : scenario_.events) {
            if (ev.load_index >= model_.loads.size())
                throw config_error("event references load index " + std::to_string(ev.load_index) +
                                   " beyond the load list");
            if (ev.time < 0.0) throw config_error("event time must be non-negative");
        }

        op_ = pf::init_load_flow(model_);
        nm_ = static_cast<int>(model_.machines.size());
        w0e_ = 2.0 * std::numbers::pi * model_.base_freq;

        zinv_.resize(static_cast<std::size_t>(nm_));
        scale_.resize(static_cast<std::size_t>(nm_));
        w0m_.resize(static_cast<std::size_t>(nm_));
        p_ref_.resize(static_cast<std::size_t>(nm_));
        v_ref_.resize(static_cast<std::size_t>(nm_));
        mach_bus_.resize(static_cast<std::size_t>(nm_));

        x_ = Eigen::VectorXd::Zero(nm_ * S_COUNT);
        for (int i = 0; i < nm_; ++i) {
            const auto& m = model_.machines[static_cast<std::size_t>(i)];
            const auto& eq = op_.machines[static_cast<std::size_t>(i)];
            Eigen::Matrix2d zm;
            zm << m.r_a, -m.x_q_t, m.x_d_t, m.r_a;
            zinv_[static_cast<std::size_t>(i)] = zm.inverse();
            scale_[static_cast<std::size_t>(i)] =
                m.rating_mva > 0.0 ? m.rating_mva / model_.base_mva : 1.0;
            w0m_[static_cast<std::size_t>(i)] = w0e_ / (m.pole_count / 2.0);
            mach_bus_[static_cast<std::size_t>(i)] = model_.bus_index(m.bus);

            const double pm_mach = eq.pm_ss / scale_[static_cast<std::size_t>(i)];
            const GovernorState gs = governor_equilibrium(m.governor, pm_mach);
            const AvrState as = avr_equilibrium(m.avr, eq.efd_ss);
            p_ref_[static_cast<std::size_t>(i)] = governor_p_ref(m.governor, pm_mach);
            v_ref_[static_cast<std::size_t>(i)] = avr_v_ref(m.avr, eq.efd_ss, eq.v_rms);

            double* s = x_.data() + i * S_COUNT;
            s[S_DELTA] = eq.delta;
            s[S_OMEGA] = eq.omega_pu;
            s[S_EQT] = eq.eq_t;
            s[S_EDT] = eq.ed_t;
            s[S_XV] = gs.x_v;
            s[S_G] = gs.g;
            s[S_XW] = gs.x_w;
            s[S_XT] = gs.x_t;
            s[S_XLL] = as.x_ll;
            s[S_XE] = as.x_e;
        }

        load_active_.assign(model_.loads.size(), false);
        for (std::size_t li = 0; li < model_.loads.size(); ++li)
            load_active_[li] = !model_.loads[li].energize_time.has_value();
        rebuild_topology();

        outs_.resize(static_cast<std::size_t>(nm_));
        outs_scratch_.resize(static_cast<std::size_t>(nm_));
        m_work_.resize(2 * nm_, 2 * nm_);
        rhs_work_.resize(2 * nm_);
        ym_.resize(static_cast<std::size_t>(nm_));
        xn_.resize(x_.size());
        fn_.resize(x_.size());
        k2_.resize(x_.size());
        k3_.resize(x_.size());
        k4_.resize(x_.size());
    }

    double derivative_norm_at_start() {
        Eigen::VectorXd dx(x_.size());
        derivs(x_, dx, outs_);
        return dx.cwiseAbs().maxCoeff();
    }

    Trace run() {
        Trace tr;
        setup_columns(tr);
        const auto nsteps = static_cast<std::size_t>(std::llround(scenario_.t_end / scenario_.dt));
        tr.t.reserve(nsteps + 1);
        for (auto& c : tr.cols) c.reserve(nsteps + 1);

        std::vector<Event> events = scenario_.events;
        std::stable_sort(events.begin(), events.end(),
                         [](const Event& a, const Event& b) { return a.time < b.time; });
        std::size_t next_event = 0;

        Eigen::VectorXd dx(x_.size());
        for (std::size_t k = 0; k <= nsteps; ++k) {
            const double t = static_cast<double>(k) * scenario_.dt;
            bool topo_changed = false;
            while (next_event < events.size() &&
                   events[next_event].time <= t + scenario_.dt / 2.0) {
                load_active_[events[next_event].load_index] = true;
                ++next_event;
                topo_changed = true;
            }
            if (topo_changed) rebuild_topology();

            derivs(x_, dx, outs_);
            record(tr, t);
            if (k == nsteps) break;

            if (scenario_.integrator == Scenario::Integrator::Trapezoidal)
                step_trapezoidal(dx);
            else
                step_rk4(dx);

            if (!x_.allFinite())
                throw numeric_error("numerical instability: non-finite state at t = " +
                                    std::to_string(t + scenario_.dt));
            for (int i = 0; i < nm_; ++i) {
                double* s = x_.data() + i * S_COUNT;
                const auto& m = model_.machines[static_cast<std::size_t>(i)];
                s[S_G] = std::clamp(s[S_G], m.governor.g_min, m.governor.g_max);
                s[S_XE] = std::clamp(s[S_XE], m.avr.efd_min, m.avr.efd_max);
                if (std::abs(s[S_OMEGA] - 1.0) > 0.5)
                    throw numeric_error("numerical instability: speed of " + m.name +
                                        " diverged at t = " + std::to_string(t + scenario_.dt));
            }
        }
        return tr;
    }

private:
    void rebuild_topology() {
        const int n = static_cast<int>(model_.buses.size());
        Eigen::MatrixXcd y = pf::build_ybus(model_);
        for (std::size_t li = 0; li < model_.loads.size(); ++li) {
            if (!load_active_[li]) continue;
            const auto& ld = model_.loads[li];
            const auto bi = model_.bus_index(ld.bus);
            y(bi, bi) += pf::load_admittance(ld, op_.v_bus[static_cast<std::size_t>(bi)],
                                             model_.base_mva);
        }
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 2 * n);
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < n; ++k) {
                const double g = y(i, k).real(), b = y(i, k).imag();
                a(2 * i, 2 * k) = g;
                a(2 * i, 2 * k + 1) = -b;
                a(2 * i + 1, 2 * k) = b;
                a(2 * i + 1, 2 * k + 1) = g;
            }
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
        if (!lu.isInvertible())
            throw numeric_error("singular network admittance matrix; check for isolated buses "
                                "or a network with no shunt path");
        Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(2 * n, 2 * nm_);
        for (int j = 0; j < nm_; ++j) {
            cols(2 * mach_bus_[static_cast<std::size_t>(j)], 2 * j) = 1.0;
            cols(2 * mach_bus_[static_cast<std::size_t>(j)] + 1, 2 * j + 1) = 1.0;
        }
        const Eigen::MatrixXd zcols = lu.solve(cols);
        z_mm_.resize(2 * nm_, 2 * nm_);
        for (int j = 0; j < nm_; ++j) {
            z_mm_.row(2 * j) = zcols.row(2 * mach_bus_[static_cast<std::size_t>(j)]);
            z_mm_.row(2 * j + 1) = zcols.row(2 * mach_bus_[static_cast<std::size_t>(j)] + 1);
        }
    }

    void network_solve(const Eigen::VectorXd& x, std::vector<NetOut>& outs) {
        for (int i = 0; i < nm_; ++i) {
            const double* s = x.data() + i * S_COUNT;
            const Eigen::Matrix2d t = dq_transform(s[S_DELTA]);
            const Eigen::Matrix2d tz = t.transpose() * zinv_[static_cast<std::size_t>(i)];
            ym_[static_cast<std::size_t>(i)] = tz * t;
            rhs_work_.segment<2>(2 * i) = tz * Eigen::Vector2d(s[S_EDT], s[S_EQT]);
        }
        m_work_.setIdentity();
        for (int i = 0; i < nm_; ++i)
            m_work_.middleCols(2 * i, 2) +=
                z_mm_.middleCols(2 * i, 2) * ym_[static_cast<std::size_t>(i)];
        const Eigen::VectorXd vm = m_work_.partialPivLu().solve(z_mm_ * rhs_work_);
        if (!vm.allFinite())
            throw numeric_error("network solve produced non-finite bus voltages");

        for (int i = 0; i < nm_; ++i) {
            const double* s = x.data() + i * S_COUNT;
            NetOut& o = outs[static_cast<std::size_t>(i)];
            o.vre = vm(2 * i);
            o.vim = vm(2 * i + 1);
            o.vrms = std::hypot(o.vre, o.vim);
            const Eigen::Matrix2d t = dq_transform(s[S_DELTA]);
            const Eigen::Vector2d vdq = t * Eigen::Vector2d(o.vre, o.vim);
            const Eigen::Vector2d idq = zinv_[static_cast<std::size_t>(i)] *
                                        (Eigen::Vector2d(s[S_EDT], s[S_EQT]) - vdq);
            o.id = idq(0);
            o.iq = idq(1);
            const auto& m = model_.machines[static_cast<std::size_t>(i)];
            o.te = s[S_EDT] * o.id + s[S_EQT] * o.iq + (m.x_q_t - m.x_d_t) * o.id * o.iq;
            const Eigen::Vector2d iri = t.transpose() * idq;
            o.pe = o.vre * iri(0) + o.vim * iri(1);
        }
    }

    void derivs(const Eigen::VectorXd& x, Eigen::VectorXd& dx, std::vector<NetOut>& outs) {
        network_solve(x, outs);
        const double domega_e = x(S_OMEGA) - 1.0;  // first machine sets system frequency
        for (int i = 0; i < nm_; ++i) {
            const double* s = x.data() + i * S_COUNT;
            double* d = dx.data() + i * S_COUNT;
            const auto& m = model_.machines[static_cast<std::size_t>(i)];
            const NetOut& o = outs[static_cast<std::size_t>(i)];

            GovernorState gs{s[S_XV], s[S_G], s[S_XW], s[S_XT]}, gd;
            governor_derivs(m.governor, gs, domega_e, p_ref_[static_cast<std::size_t>(i)], gd);
            AvrState as{s[S_XLL], s[S_XE]}, ad;
            avr_derivs(m.avr, as, o.vrms, v_ref_[static_cast<std::size_t>(i)], ad);

            const double efd = avr_efd(m.avr, as);
            const double pm_sys = scale_[static_cast<std::size_t>(i)] * governor_pm(m.governor, gs);

            d[S_DELTA] = w0e_ * (s[S_OMEGA] - 1.0);
            d[S_OMEGA] = (pm_sys - o.te - m.d * (s[S_OMEGA] - 1.0)) / (2.0 * m.h);
            d[S_EQT] = (-s[S_EQT] - (m.x_d - m.x_d_t) * o.id + efd) / m.t_d0_t;
            d[S_EDT] = (-s[S_EDT] + (m.x_q - m.x_q_t) * o.iq) / m.t_q0_t;
            d[S_XV] = gd.x_v;
            d[S_G] = gd.g;
            d[S_XW] = gd.x_w;
            d[S_XT] = gd.x_t;
            d[S_XLL] = ad.x_ll;
            d[S_XE] = ad.x_e;
        }
    }

    void step_trapezoidal(const Eigen::VectorXd& f0) {
        const double dt = scenario_.dt;
        xn_ = x_ + dt * f0;
        for (int it = 0; it < 3; ++it) {
            derivs(xn_, fn_, outs_scratch_);
            xn_ = x_ + (dt / 2.0) * (f0 + fn_);
        }
        x_.swap(xn_);
    }

    void step_rk4(const Eigen::VectorXd& k1) {
        const double dt = scenario_.dt;
        xn_ = x_ + (dt / 2.0) * k1;
        derivs(xn_, k2_, outs_scratch_);
        xn_ = x_ + (dt / 2.0) * k2_;
        derivs(xn_, k3_, outs_scratch_);
        xn_ = x_ + dt * k3_;
        derivs(xn_, k4_, outs_scratch_);
        x_ += (dt / 6.0) * (k1 + 2.0 * k2_ + 2.0 * k3_ + k4_);
    }

    struct Column {
        enum class Kind { Channel, State, Derived } kind;
        Quantity quantity = Quantity::OmegaM;
        int machine = 0;
        int state_offset = 0;
        int derived_id = 0;
    };

    void setup_columns(Trace& tr) {
        for (const auto& ch : scenario_.record) {
            const int mi = model_.machine_index(ch.element);
            if (mi < 0) throw config_error("channel element '" + ch.element + "' is not a machine");
            columns_.push_back({Column::Kind::Channel, ch.quantity, mi, 0, 0});
            tr.names.push_back(ch.str());
            tr.units.push_back(ch.unit());
        }
        if (scenario_.record_internal) {
            static constexpr struct {
                const char* name;
                const char* unit;
                int offset;
            } kStates[] = {
                {"delta", "rad", S_DELTA}, {"omega_pu", "pu", S_OMEGA},
                {"eq_t", "pu", S_EQT}, {"ed_t", "pu", S_EDT},
                {"gov_x_v", "pu", S_XV}, {"gov_g", "pu", S_G},
                {"gov_x_w", "pu", S_XW}, {"gov_x_t", "pu", S_XT},
                {"avr_x_ll", "pu", S_XLL}, {"avr_x_e", "pu", S_XE},
            };
            static constexpr struct {
                const char* name;
                const char* unit;
                int id;
            } kDerived[] = {
                {"te", "pu", 0}, {"tm", "pu", 1}, {"pe_pu", "pu", 2},
                {"efd", "pu", 3}, {"vrms", "pu", 4}, {"pm_pu", "pu", 5},
            };
            for (int i = 0; i < nm_; ++i) {
                const auto& name = model_.machines[static_cast<std::size_t>(i)].name;
                for (const auto& st : kStates) {
                    columns_.push_back({Column::Kind::State, Quantity::OmegaM, i, st.offset, 0});
                    tr.names.push_back(std::string(st.name) + "@" + name);
                    tr.units.push_back(st.unit);
                }
                for (const auto& dv : kDerived) {
                    columns_.push_back({Column::Kind::Derived, Quantity::OmegaM, i, 0, dv.id});
                    tr.names.push_back(std::string(dv.name) + "@" + name);
                    tr.units.push_back(dv.unit);
                }
            }
        }
        tr.cols.assign(columns_.size(), {});
    }

    double column_value(const Column& col) const {
        const double* s = x_.data() + col.machine * S_COUNT;
        const auto& m = model_.machines[static_cast<std::size_t>(col.machine)];
        const NetOut& o = outs_[static_cast<std::size_t>(col.machine)];
        const GovernorState gs{s[S_XV], s[S_G], s[S_XW], s[S_XT]};
        const AvrState as{s[S_XLL], s[S_XE]};
        switch (col.kind) {
        case Column::Kind::State:
            return s[col.state_offset];
        case Column::Kind::Derived:
            switch (col.derived_id) {
            case 0: return o.te;
            case 1: return scale_[static_cast<std::size_t>(col.machine)] * governor_pm(m.governor, gs);
            case 2: return o.pe;
            case 3: return avr_efd(m.avr, as);
            case 4: return o.vrms;
            case 5:
            default: return governor_pm(m.governor, gs);
            }
        case Column::Kind::Channel:
        default:
            switch (col.quantity) {
            case Quantity::OmegaM: return s[S_OMEGA] * w0m_[static_cast<std::size_t>(col.machine)];
            case Quantity::Pe: return o.pe * model_.base_mva;
            case Quantity::Vrms: return o.vrms;
            case Quantity::Efd: return avr_efd(m.avr, as);
            case Quantity::Pm:
            default: return governor_pm(m.governor, gs);
            }
        }
    }

    void record(Trace& tr, double t) {
        tr.t.push_back(t);
        for (std::size_t c = 0; c < columns_.size(); ++c)
            tr.cols[c].push_back(column_value(columns_[c]));
    }

    SystemModel model_;
    Scenario scenario_;
    pf::OperatingPoint op_;
    int nm_ = 0;
    double w0e_ = 0.0;

    std::vector<Eigen::Matrix2d> zinv_;
    std::vector<double> scale_, w0m_, p_ref_, v_ref_;
    std::vector<int> mach_bus_;
    std::vector<bool> load_active_;
    Eigen::MatrixXd z_mm_;

    Eigen::VectorXd x_, xn_, fn_, k2_, k3_, k4_;
    std::vector<NetOut> outs_, outs_scratch_;
    std::vector<Eigen::Matrix2d> ym_;
    Eigen::MatrixXd m_work_;
    Eigen::VectorXd rhs_work_;
    std::vector<Column> columns_;
};

} // namespace

Trace simulate(const SystemModel& model, const Scenario& scenario) {
    Engine engine(model, scenario);
    return engine.run();
}

double initial_derivative_norm(const model::SystemModel& model) {
    Scenario sc = Scenario::from_model(model);
    sc.events.clear();
    Engine engine(model, sc);
    return engine.derivative_norm_at_start();
}

} // namespace psid::sim
