#pragma once

#include "propagate/ingest.hpp"

#include <cstddef>
#include <cstdint>

namespace testsupport {

inline constexpr std::size_t kHosts = 200000;
inline constexpr std::size_t kBins = 400;

inline double horizon_days(std::size_t bins)
{
    return static_cast<double>(bins) * 1800.0 / 86400.0;
}

inline propagate::ingest::IntensitySeries synthetic_series(std::uint64_t seed, std::size_t hosts,
                                                           std::size_t bins)
{
    const auto events = propagate::ingest::synth_events(seed, hosts, horizon_days(bins));
    return propagate::ingest::preprocess(events);
}

// The seed-0 Code Red-like series (~400 half-hour bins).
inline const propagate::ingest::IntensitySeries& codered()
{
    static const auto series = synthetic_series(0, kHosts, kBins);
    return series;
}

// Small series for tests that train.
inline const propagate::ingest::IntensitySeries& small()
{
    static const auto series = synthetic_series(3, 20000, 96);
    return series;
}

} // namespace testsupport
