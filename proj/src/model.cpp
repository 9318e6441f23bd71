#include "psid/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"

namespace psid::model {

int SystemModel::bus_index(const std::string& id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == id) return static_cast<int>(i);
    return -1;
}

int SystemModel::machine_index(const std::string& name) const {
    for (std::size_t i = 0; i < machines.size(); ++i)
        if (machines[i].name == name) return static_cast<int>(i);
    return -1;
}

void SystemModel::validate() const {
    if (base_mva <= 0.0) throw config_error("base_mva must be positive");
    if (base_freq <= 0.0) throw config_error("base_freq must be positive");
    if (machines.empty()) throw config_error("at least one machine is required");

    auto require_bus = [&](const std::string& id, const std::string& what) {
        if (bus_index(id) < 0)
            throw config_error(what + " references unknown bus '" + id + "'");
    };
    for (const auto& br : branches) {
        require_bus(br.from, "branch");
        require_bus(br.to, "branch");
        if (br.r == 0.0 && br.x == 0.0)
            throw config_error("branch " + br.from + "-" + br.to + " has zero impedance");
    }
    for (const auto& tr : transformers) {
        require_bus(tr.from, "transformer");
        require_bus(tr.to, "transformer");
        if (tr.x == 0.0) throw config_error("transformer " + tr.from + "-" + tr.to + " has zero reactance");
        if (tr.ratio <= 0.0) throw config_error("transformer ratio must be positive");
    }
    for (const auto& ld : loads) {
        require_bus(ld.bus, "load");
        if (ld.p_mw < 0.0) throw config_error("load p_nom must be non-negative");
        if (ld.energize_time && *ld.energize_time < 0.0)
            throw config_error("load energize_time must be non-negative");
    }

    int slack_count = 0;
    for (const auto& m : machines) {
        require_bus(m.bus, "machine " + m.name);
        if (m.slack) ++slack_count;
        if (!(m.x_d >= m.x_d_t && m.x_d_t > 0.0))
            throw config_error(m.name + ": require x_d >= x_d' > 0");
        if (!(m.x_q >= m.x_q_t && m.x_q_t > 0.0))
            throw config_error(m.name + ": require x_q >= x_q' > 0");
        if (m.t_d0_t <= 0.0 || m.t_q0_t <= 0.0)
            throw config_error(m.name + ": transient time constants must be positive");
        if (m.h <= 0.0) throw config_error(m.name + ": inertia H must be positive");
        if (m.pole_count < 2 || m.pole_count % 2 != 0)
            throw config_error(m.name + ": pole count must be even and >= 2");

        const auto& g = m.governor;
        if (g.t_p <= 0.0 || g.t_r <= 0.0 || g.t_d <= 0.0)
            throw config_error(m.name + ": governor time constants must be positive");
        if (g.k_sigma <= 0.0) throw config_error(m.name + ": permanent droop must be positive");
        if (!(g.g_min < g.g_max)) throw config_error(m.name + ": governor gate limits inverted");
        if (!(g.rate_min < 0.0 && 0.0 < g.rate_max))
            throw config_error(m.name + ": governor rate limits must straddle zero");

        const auto& a = m.avr;
        if (a.t_b <= 0.0 || a.t_e <= 0.0)
            throw config_error(m.name + ": AVR time constants must be positive");
        if (a.k <= 0.0) throw config_error(m.name + ": AVR gain must be positive");
        if (!(a.efd_min < a.efd_max)) throw config_error(m.name + ": E_fd limits inverted");
    }
    if (slack_count != 1)
        throw config_error("exactly one machine must be flagged slack (found " +
                           std::to_string(slack_count) + ")");
    for (std::size_t i = 0; i < machines.size(); ++i)
        for (std::size_t j = i + 1; j < machines.size(); ++j)
            if (machines[i].bus == machines[j].bus)
                throw config_error("machines " + machines[i].name + " and " +
                                   machines[j].name + " share a bus");
}

namespace {

MachineUnit make_machine(const std::string& name, const std::string& bus,
                         double mva, double kv, int poles, bool slack,
                         double p_mw, double v_pu) {
    MachineUnit m;
    m.name = name;
    m.bus = bus;
    m.rating_mva = mva;
    m.rating_kv = kv;
    m.pole_count = poles;
    m.slack = slack;
    m.p_dispatch_mw = p_mw;
    m.v_setpoint_pu = v_pu;
    return m;
}

} // namespace

SystemModel ieee9_preset() {
    SystemModel s;
    s.base_mva = 100.0;
    s.base_freq = 60.0;
    s.buses = {
        {"bus1", 16.5}, {"bus2", 18.0}, {"bus3", 13.8},
        {"bus4", 230.0}, {"bus5", 230.0}, {"bus6", 230.0},
        {"bus7", 230.0}, {"bus8", 230.0}, {"bus9", 230.0},
    };
    s.branches = {
        {"bus4", "bus5", 0.0100, 0.0850, 0.176},
        {"bus4", "bus6", 0.0170, 0.0920, 0.158},
        {"bus5", "bus7", 0.0320, 0.1610, 0.306},
        {"bus6", "bus9", 0.0390, 0.1700, 0.358},
        {"bus7", "bus8", 0.0085, 0.0720, 0.149},
        {"bus8", "bus9", 0.0119, 0.1008, 0.209},
    };
    s.transformers = {
        {"bus1", "bus4", 0.0576, 1.0},
        {"bus2", "bus7", 0.0625, 1.0},
        {"bus3", "bus9", 0.0586, 1.0},
    };
    // Bus-6 load is split: 75 MW + all reactive power energized from the
    // start, plus a purely active 15 MW block switched in at t = 1 s.
    s.loads = {
        {"bus5", 125.0, 50.0, std::nullopt},
        {"bus6", 75.0, 30.0, std::nullopt},
        {"bus6", 15.0, 0.0, 1.0},
        {"bus8", 100.0, 35.0, std::nullopt},
    };

    // Machine constants are the standard 9-bus study values on the 100 MVA
    // system base. SM1 carries 12 poles so its mechanical speed base is
    // 2*pi*60/6 rad/s.
    MachineUnit sm1 = make_machine("SM1", "bus1", 247.5, 16.5, 12, true, 71.6, 1.040);
    sm1.r_a = 0.0;
    sm1.x_d = 0.1460; sm1.x_d_t = 0.0608;
    sm1.x_q = 0.0969; sm1.x_q_t = 0.0969;
    sm1.t_d0_t = 8.96; sm1.t_q0_t = 0.31;
    sm1.h = 23.64; sm1.d = 0.0;

    MachineUnit sm2 = make_machine("SM2", "bus2", 192.0, 18.0, 2, false, 163.0, 1.025);
    sm2.r_a = 0.0;
    sm2.x_d = 0.8958; sm2.x_d_t = 0.1198;
    sm2.x_q = 0.8645; sm2.x_q_t = 0.1969;
    sm2.t_d0_t = 6.00; sm2.t_q0_t = 0.535;
    sm2.h = 6.40; sm2.d = 0.0;

    MachineUnit sm3 = make_machine("SM3", "bus3", 128.0, 13.8, 2, false, 85.0, 1.025);
    sm3.r_a = 0.0;
    sm3.x_d = 1.3125; sm3.x_d_t = 0.1813;
    sm3.x_q = 1.2578; sm3.x_q_t = 0.2500;
    sm3.t_d0_t = 5.89; sm3.t_q0_t = 0.600;
    sm3.h = 3.01; sm3.d = 0.0;

    // Governor/AVR defaults are identical across machines; SM1 carries the
    // study parameter set (the defaults in the struct definitions).
    s.machines = {sm1, sm2, sm3};
    s.validate();
    return s;
}

SystemModel ieee9_preset_base_only() {
    SystemModel s = ieee9_preset();
    s.loads.erase(std::remove_if(s.loads.begin(), s.loads.end(),
                                 [](const LoadSpec& l) { return l.energize_time.has_value(); }),
                  s.loads.end());
    return s;
}

// --- parameter paths --------------------------------------------------------

namespace {

struct FieldRef {
    const char* name;
    double MachineUnit::* member;
};
struct GovFieldRef {
    const char* name;
    double GovernorIEEEG3::* member;
};
struct AvrFieldRef {
    const char* name;
    double AvrSEXS::* member;
};

constexpr FieldRef kMachineFields[] = {
    {"r_a", &MachineUnit::r_a}, {"x_d", &MachineUnit::x_d},
    {"x_d_t", &MachineUnit::x_d_t}, {"x_q", &MachineUnit::x_q},
    {"x_q_t", &MachineUnit::x_q_t}, {"t_d0_t", &MachineUnit::t_d0_t},
    {"t_q0_t", &MachineUnit::t_q0_t}, {"h", &MachineUnit::h},
    {"d", &MachineUnit::d},
};
constexpr GovFieldRef kGovernorFields[] = {
    {"k_g", &GovernorIEEEG3::k_g}, {"t_p", &GovernorIEEEG3::t_p},
    {"sigma", &GovernorIEEEG3::k_sigma}, {"delta", &GovernorIEEEG3::k_delta},
    {"t_r", &GovernorIEEEG3::t_r}, {"k_t", &GovernorIEEEG3::k_t},
    {"t_n", &GovernorIEEEG3::t_n}, {"t_d", &GovernorIEEEG3::t_d},
    {"g_min", &GovernorIEEEG3::g_min}, {"g_max", &GovernorIEEEG3::g_max},
    {"rate_min", &GovernorIEEEG3::rate_min}, {"rate_max", &GovernorIEEEG3::rate_max},
    {"p_ref", &GovernorIEEEG3::p_ref},
};
constexpr AvrFieldRef kAvrFields[] = {
    {"t_a", &AvrSEXS::t_a}, {"t_b", &AvrSEXS::t_b}, {"k", &AvrSEXS::k},
    {"t_e", &AvrSEXS::t_e}, {"efd_min", &AvrSEXS::efd_min},
    {"efd_max", &AvrSEXS::efd_max}, {"v_ref", &AvrSEXS::v_ref},
};

double* resolve(SystemModel& model, const std::string& path) {
    const auto dot1 = path.find('.');
    if (dot1 == std::string::npos)
        throw config_error("parameter path '" + path + "' has no machine prefix");
    const std::string machine = path.substr(0, dot1);
    const int mi = model.machine_index(machine);
    if (mi < 0) throw config_error("unknown machine '" + machine + "' in parameter path");
    MachineUnit& m = model.machines[static_cast<std::size_t>(mi)];

    const std::string rest = path.substr(dot1 + 1);
    const auto dot2 = rest.find('.');
    if (dot2 == std::string::npos) {
        for (const auto& f : kMachineFields)
            if (rest == f.name) return &(m.*(f.member));
        throw config_error("unknown machine field '" + rest + "' in parameter path");
    }
    const std::string group = rest.substr(0, dot2);
    const std::string field = rest.substr(dot2 + 1);
    if (group == "governor") {
        for (const auto& f : kGovernorFields)
            if (field == f.name) return &(m.governor.*(f.member));
        throw config_error("unknown governor field '" + field + "'");
    }
    if (group == "avr") {
        for (const auto& f : kAvrFields)
            if (field == f.name) return &(m.avr.*(f.member));
        throw config_error("unknown avr field '" + field + "'");
    }
    throw config_error("unknown parameter group '" + group + "'");
}

} // namespace

double get_parameter(const SystemModel& model, const std::string& path) {
    return *resolve(const_cast<SystemModel&>(model), path);
}

void set_parameter(SystemModel& model, const std::string& path, double value) {
    *resolve(model, path) = value;
}

void apply_overrides(SystemModel& model,
                     const std::vector<std::pair<std::string, double>>& overrides) {
    for (const auto& [path, value] : overrides) set_parameter(model, path, value);
}

std::vector<std::string> list_parameters(const SystemModel& model) {
    std::vector<std::string> out;
    for (const auto& m : model.machines) {
        for (const auto& f : kMachineFields) out.push_back(m.name + "." + f.name);
        for (const auto& f : kGovernorFields) out.push_back(m.name + ".governor." + f.name);
        for (const auto& f : kAvrFields) out.push_back(m.name + ".avr." + f.name);
    }
    return out;
}

// --- serialization ----------------------------------------------------------

using nlohmann::json;

nlohmann::json to_json(const SystemModel& s) {
    json j;
    j["base_mva"] = s.base_mva;
    j["base_freq"] = s.base_freq;
    j["buses"] = json::array();
    for (const auto& b : s.buses) j["buses"].push_back({{"id", b.id}, {"base_kv", b.base_kv}});
    j["branches"] = json::array();
    for (const auto& b : s.branches)
        j["branches"].push_back({{"from", b.from}, {"to", b.to}, {"r", b.r}, {"x", b.x}, {"b", b.b}});
    j["transformers"] = json::array();
    for (const auto& t : s.transformers)
        j["transformers"].push_back({{"from", t.from}, {"to", t.to}, {"x", t.x}, {"ratio", t.ratio}});
    j["loads"] = json::array();
    for (const auto& l : s.loads) {
        json jl = {{"bus", l.bus}, {"p_mw", l.p_mw}, {"q_mvar", l.q_mvar}};
        if (l.energize_time) jl["energize_time"] = *l.energize_time;
        j["loads"].push_back(jl);
    }
    j["machines"] = json::array();
    for (const auto& m : s.machines) {
        json jm = {
            {"name", m.name}, {"bus", m.bus},
            {"rating_mva", m.rating_mva}, {"rating_kv", m.rating_kv},
            {"pole_count", m.pole_count},
            {"r_a", m.r_a}, {"x_d", m.x_d}, {"x_d_t", m.x_d_t},
            {"x_q", m.x_q}, {"x_q_t", m.x_q_t},
            {"t_d0_t", m.t_d0_t}, {"t_q0_t", m.t_q0_t},
            {"h", m.h}, {"d", m.d},
            {"p_dispatch_mw", m.p_dispatch_mw}, {"v_setpoint_pu", m.v_setpoint_pu},
            {"slack", m.slack},
        };
        const auto& g = m.governor;
        jm["governor"] = {
            {"k_g", g.k_g}, {"t_p", g.t_p}, {"sigma", g.k_sigma}, {"delta", g.k_delta},
            {"t_r", g.t_r}, {"k_t", g.k_t}, {"t_n", g.t_n}, {"t_d", g.t_d},
            {"g_min", g.g_min}, {"g_max", g.g_max},
            {"rate_min", g.rate_min}, {"rate_max", g.rate_max}, {"p_ref", g.p_ref},
        };
        const auto& a = m.avr;
        jm["avr"] = {
            {"t_a", a.t_a}, {"t_b", a.t_b}, {"k", a.k}, {"t_e", a.t_e},
            {"efd_min", a.efd_min}, {"efd_max", a.efd_max}, {"v_ref", a.v_ref},
        };
        j["machines"].push_back(jm);
    }
    return j;
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (auto it = j.find(key); it != j.end()) return it->get<T>();
    return fallback;
}

template <typename T>
T get_req(const json& j, const char* key, const char* ctx) {
    auto it = j.find(key);
    if (it == j.end())
        throw config_error(std::string(ctx) + ": missing required field '" + key + "'");
    return it->get<T>();
}

} // namespace

SystemModel system_from_json(const json& j) {
    SystemModel s;
    try {
        s.base_mva = get_or(j, "base_mva", 100.0);
        s.base_freq = get_or(j, "base_freq", 60.0);
        for (const auto& jb : j.value("buses", json::array()))
            s.buses.push_back({get_req<std::string>(jb, "id", "bus"), get_or(jb, "base_kv", 1.0)});
        for (const auto& jb : j.value("branches", json::array()))
            s.branches.push_back({get_req<std::string>(jb, "from", "branch"),
                                  get_req<std::string>(jb, "to", "branch"),
                                  get_or(jb, "r", 0.0), get_req<double>(jb, "x", "branch"),
                                  get_or(jb, "b", 0.0)});
        for (const auto& jt : j.value("transformers", json::array()))
            s.transformers.push_back({get_req<std::string>(jt, "from", "transformer"),
                                      get_req<std::string>(jt, "to", "transformer"),
                                      get_req<double>(jt, "x", "transformer"),
                                      get_or(jt, "ratio", 1.0)});
        for (const auto& jl : j.value("loads", json::array())) {
            LoadSpec l;
            l.bus = get_req<std::string>(jl, "bus", "load");
            l.p_mw = get_or(jl, "p_mw", 0.0);
            l.q_mvar = get_or(jl, "q_mvar", 0.0);
            if (jl.contains("energize_time")) l.energize_time = jl["energize_time"].get<double>();
            s.loads.push_back(l);
        }
        for (const auto& jm : j.value("machines", json::array())) {
            MachineUnit m;
            m.name = get_req<std::string>(jm, "name", "machine");
            m.bus = get_req<std::string>(jm, "bus", "machine");
            m.rating_mva = get_or(jm, "rating_mva", 0.0);
            m.rating_kv = get_or(jm, "rating_kv", 0.0);
            m.pole_count = get_or(jm, "pole_count", 2);
            m.r_a = get_or(jm, "r_a", 0.0);
            m.x_d = get_req<double>(jm, "x_d", "machine");
            m.x_d_t = get_req<double>(jm, "x_d_t", "machine");
            m.x_q = get_req<double>(jm, "x_q", "machine");
            m.x_q_t = get_req<double>(jm, "x_q_t", "machine");
            m.t_d0_t = get_req<double>(jm, "t_d0_t", "machine");
            m.t_q0_t = get_req<double>(jm, "t_q0_t", "machine");
            m.h = get_req<double>(jm, "h", "machine");
            m.d = get_or(jm, "d", 0.0);
            m.p_dispatch_mw = get_or(jm, "p_dispatch_mw", 0.0);
            m.v_setpoint_pu = get_or(jm, "v_setpoint_pu", 1.0);
            m.slack = get_or(jm, "slack", false);
            if (jm.contains("governor")) {
                const auto& jg = jm["governor"];
                auto& g = m.governor;
                g.k_g = get_or(jg, "k_g", g.k_g);
                g.t_p = get_or(jg, "t_p", g.t_p);
                g.k_sigma = get_or(jg, "sigma", g.k_sigma);
                g.k_delta = get_or(jg, "delta", g.k_delta);
                g.t_r = get_or(jg, "t_r", g.t_r);
                g.k_t = get_or(jg, "k_t", g.k_t);
                g.t_n = get_or(jg, "t_n", g.t_n);
                g.t_d = get_or(jg, "t_d", g.t_d);
                g.g_min = get_or(jg, "g_min", g.g_min);
                g.g_max = get_or(jg, "g_max", g.g_max);
                g.rate_min = get_or(jg, "rate_min", g.rate_min);
                g.rate_max = get_or(jg, "rate_max", g.rate_max);
                g.p_ref = get_or(jg, "p_ref", g.p_ref);
            }
            if (jm.contains("avr")) {
                const auto& ja = jm["avr"];
                auto& a = m.avr;
                a.t_a = get_or(ja, "t_a", a.t_a);
                a.t_b = get_or(ja, "t_b", a.t_b);
                a.k = get_or(ja, "k", a.k);
                a.t_e = get_or(ja, "t_e", a.t_e);
                a.efd_min = get_or(ja, "efd_min", a.efd_min);
                a.efd_max = get_or(ja, "efd_max", a.efd_max);
                a.v_ref = get_or(ja, "v_ref", a.v_ref);
            }
            s.machines.push_back(m);
        }
    } catch (const json::exception& e) {
        throw config_error(std::string("malformed system config: ") + e.what());
    }
    s.validate();
    return s;
}

SystemModel load_system(const std::string& path_or_builtin) {
    if (path_or_builtin == "ieee9") return ieee9_preset();
    if (path_or_builtin == "ieee9-base") return ieee9_preset_base_only();
    std::ifstream in(path_or_builtin);
    if (!in) throw io_error("cannot open system config '" + path_or_builtin + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw config_error("system config '" + path_or_builtin + "' is not valid JSON: " + e.what());
    }
    return system_from_json(j);
}

void save_system(const SystemModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write system config '" + path + "'");
    out << to_json(model).dump(2) << '\n';
}

} // namespace psid::model
