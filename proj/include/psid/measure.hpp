#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psid/dynsim.hpp"

namespace psid::meas {

/// One noisy record of a single channel, with the noise level that made it.
struct MeasurementSet {
    std::vector<double> t;
    std::vector<double> z;
    double sigma_n = 0.0;
    double snr_db = 0.0;
    std::uint64_t seed = 0;
    sim::ChannelSpec channel;
};

/// Noise level giving the requested signal-to-noise ratio against the mean
/// signal amplitude: sigma = |mean(y)| / 10^(snr_db/20).
double noise_sigma_from_snr(const std::vector<double>& y, double snr_db);

/// Draw one noisy record of a channel from a noiseless trace.
MeasurementSet synthesize(const sim::Trace& trace, const sim::ChannelSpec& channel,
                          double snr_db, std::uint64_t seed);

/// Sum of squared residuals between a record and a model output.
double sse(const std::vector<double>& z, const std::vector<double>& y);

/// Gaussian log-likelihood of the record given a model output, using the
/// record's own noise level.
double log_likelihood(const MeasurementSet& m, const std::vector<double>& y);

/// CSV with a "t,z" header plus a <path>.meta.json sidecar holding channel,
/// noise level, SNR and seed.
void write_measurement_csv(const MeasurementSet& m, const std::string& path);
MeasurementSet read_measurement_csv(const std::string& path);

} // namespace psid::meas
