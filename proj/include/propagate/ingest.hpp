#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace propagate::ingest {

inline constexpr double kSecondsPerDay = 86400.0;
inline constexpr std::int64_t kDefaultBinWidth = 1800; // seconds

// One darknet scan record. Only start_time feeds the intensity signal.
struct ScanEvent {
    std::int64_t start_time = 0; // unix seconds
    std::int64_t end_time = 0;
    std::string source_ip;
    std::string tld;
    std::string country;
    double latitude = 0.0;
    double longitude = 0.0;
    std::string as_meta;

    bool operator==(const ScanEvent&) const = default;
};

struct ParseResult {
    std::vector<ScanEvent> events;
    std::size_t malformed = 0;
    std::size_t comments = 0;
};

/// Parses tab-separated scan records with seven fields per line:
/// start, end, source ip, tld, country, "lat,lon", AS metadata.
/// Blank lines and lines whose first non-blank character is '#' are skipped.
/// Lines that do not parse are counted in `malformed`.
///
/// Throws InputError when the stream is unreadable and EmptyDatasetError
/// when no valid record was found.
ParseResult parse_events(std::istream& source);
ParseResult parse_events_file(const std::filesystem::path& path);

void write_events(std::ostream& out, std::span<const ScanEvent> events);

// Uniformly binned intensity. Times are bin centres in days since origin_unix.
struct IntensitySeries {
    std::vector<double> t;
    std::vector<double> raw;
    std::vector<double> smoothed; // empty until smoothed
    std::int64_t origin_unix = 0;
    std::int64_t bin_width_s = kDefaultBinWidth;

    std::size_t size() const noexcept { return t.size(); }
    double spacing() const noexcept { return static_cast<double>(bin_width_s) / kSecondsPerDay; }
    double t_max() const { return t.back(); }

    // Checks the modelling invariants (>= 3 points, uniform spacing,
    // matching lengths, smoothed present). Throws ShapeError.
    void validate() const;

    // First `count` points, preserving origin and bin width.
    IntensitySeries head(std::size_t count) const;
};

/// Counts events per half-open bin [b_k, b_k + width) anchored at the
/// earliest start time. The result has `raw` set and `smoothed` empty.
IntensitySeries bin_events(std::span<const ScanEvent> events,
                           std::int64_t bin_width_s = kDefaultBinWidth);

/// Three-point moving average; endpoints use the two-point mean.
std::vector<double> smooth(std::span<const double> raw);

// bin_events followed by smooth.
IntensitySeries preprocess(std::span<const ScanEvent> events,
                           std::int64_t bin_width_s = kDefaultBinWidth);

/// Piecewise-linear interpolation with constant extension outside the node
/// range. Exact at node times.
class Interpolant {
  public:
    Interpolant() = default;
    Interpolant(std::vector<double> times, std::vector<double> values);

    double operator()(double t) const noexcept;

    // Keeps the first `count` nodes; evaluation past them holds the last value.
    Interpolant truncated(std::size_t count) const;

    std::span<const double> times() const noexcept { return times_; }
    std::span<const double> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return times_.size(); }

  private:
    std::vector<double> times_;
    std::vector<double> values_;
};

Interpolant make_interpolant(const IntensitySeries& series, bool use_smoothed = true);

// Series CSV: header "time_days,raw,smoothed", one row per bin.
void write_series_csv(std::ostream& out, const IntensitySeries& series);
IntensitySeries read_series_csv(std::istream& in);
IntensitySeries read_series_csv_file(const std::filesystem::path& path);

struct SynthOptions {
    double scans_per_host_day = 0.5;
    double growth_rate = 2.5;       // per day
    double midpoint_fraction = 0.3; // logistic midpoint as a fraction of the horizon
    double retained_fraction = 0.6; // share of hosts still scanning long after the peak
    double patch_rate = 1.0;        // per day, decay towards the retained share
    std::int64_t epoch = 995500800; // 2001-07-19T00:00:00Z
};

// Scan rate (events/day) at time t days for the synthetic outbreak.
double synth_rate(double t, std::size_t n_hosts, double horizon_days,
                  const SynthOptions& options = {});

/// Deterministic Code Red-like event stream: an inhomogeneous Poisson
/// process whose rate follows a logistic infected-host curve with a partial
/// post-peak decline. Events come out sorted by start time.
std::vector<ScanEvent> synth_events(std::uint64_t seed, std::size_t n_hosts,
                                    double horizon_days,
                                    const SynthOptions& options = {});

} // namespace propagate::ingest
