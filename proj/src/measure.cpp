#include "psid/measure.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "psid/errors.hpp"
#include "psid/rng.hpp"

namespace psid::meas {

double noise_sigma_from_snr(const std::vector<double>& y, double snr_db) {
    if (y.empty()) throw config_error("cannot size noise for an empty signal");
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    const double amp = std::abs(mean);
    if (amp == 0.0)
        throw config_error("signal mean is zero, SNR does not determine a noise level");
    return amp / std::pow(10.0, snr_db / 20.0);
}

MeasurementSet synthesize(const sim::Trace& trace, const sim::ChannelSpec& channel,
                          double snr_db, std::uint64_t seed) {
    const auto& y = trace.column(channel.str());
    MeasurementSet m;
    m.t = trace.t;
    m.sigma_n = noise_sigma_from_snr(y, snr_db);
    m.snr_db = snr_db;
    m.seed = seed;
    m.channel = channel;
    m.z.resize(y.size());
    GaussianRng rng(seed);
    for (std::size_t k = 0; k < y.size(); ++k)
        m.z[k] = y[k] + m.sigma_n * rng.normal();
    return m;
}

double sse(const std::vector<double>& z, const std::vector<double>& y) {
    if (z.size() != y.size())
        throw config_error("residual length mismatch: record has " + std::to_string(z.size()) +
                           " samples, model output has " + std::to_string(y.size()));
    double acc = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        const double r = z[k] - y[k];
        acc += r * r;
    }
    return acc;
}

double log_likelihood(const MeasurementSet& m, const std::vector<double>& y) {
    if (m.sigma_n <= 0.0) throw config_error("measurement noise level must be positive");
    const double n = static_cast<double>(m.z.size());
    const double var = m.sigma_n * m.sigma_n;
    return -n / 2.0 * std::log(2.0 * std::numbers::pi * var) - sse(m.z, y) / (2.0 * var);
}

namespace {

void append_double(std::string& out, double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

} // namespace

void write_measurement_csv(const MeasurementSet& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write measurement file '" + path + "'");
    out << "t,z\n";
    std::string line;
    for (std::size_t k = 0; k < m.t.size(); ++k) {
        line.clear();
        append_double(line, m.t[k]);
        line += ',';
        append_double(line, m.z[k]);
        line += '\n';
        out << line;
    }
    if (!out) throw io_error("write failed for measurement file '" + path + "'");

    nlohmann::json meta;
    meta["channel"] = m.channel.str();
    meta["sigma_n"] = m.sigma_n;
    meta["snr_db"] = m.snr_db;
    meta["seed"] = m.seed;
    meta["samples"] = m.z.size();
    std::ofstream mout(path + ".meta.json");
    if (!mout) throw io_error("cannot write measurement sidecar '" + path + ".meta.json'");
    mout << meta.dump(2) << '\n';
}

MeasurementSet read_measurement_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open measurement file '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "t,z")
        throw io_error("measurement file '" + path + "' lacks the t,z header");
    MeasurementSet m;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw io_error("malformed row in measurement file '" + path + "'");
        double tv = 0.0, zv = 0.0;
        auto r1 = std::from_chars(line.data(), line.data() + comma, tv);
        auto r2 = std::from_chars(line.data() + comma + 1, line.data() + line.size(), zv);
        if (r1.ec != std::errc{} || r2.ec != std::errc{})
            throw io_error("bad numeric field in measurement file '" + path + "'");
        m.t.push_back(tv);
        m.z.push_back(zv);
    }

    std::ifstream min(path + ".meta.json");
    if (!min) throw io_error("missing measurement sidecar '" + path + ".meta.json'");
    nlohmann::json meta;
    try {
        min >> meta;
        m.channel = sim::ChannelSpec::parse(meta.at("channel").get<std::string>());
        m.sigma_n = meta.at("sigma_n").get<double>();
        m.snr_db = meta.value("snr_db", 0.0);
        m.seed = meta.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed measurement sidecar for '" + path + "': " + e.what());
    }
    if (m.sigma_n <= 0.0)
        throw config_error("measurement sidecar for '" + path + "' has non-positive sigma_n");
    return m;
}

} // namespace psid::meas
