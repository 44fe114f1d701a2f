#include "propagate/ingest.hpp"

#include "propagate/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string_view>

namespace propagate::ingest {

namespace {

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

template <typename T>
std::optional<T> parse_number(std::string_view s)
{
    s = trim(s);
    if (!s.empty() && s.front() == '+') {
        s.remove_prefix(1);
    }
    T value{};
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty()) {
        return std::nullopt;
    }
    return value;
}

// "lat,lon"; a slash or a space also separates the pair.
bool parse_coordinates(std::string_view field, double& lat, double& lon)
{
    field = trim(field);
    const auto sep = field.find_first_of(",/ ");
    if (sep == std::string_view::npos) {
        return false;
    }
    const auto a = parse_number<double>(field.substr(0, sep));
    const auto b = parse_number<double>(field.substr(sep + 1));
    if (!a || !b || !std::isfinite(*a) || !std::isfinite(*b)) {
        return false;
    }
    lat = *a;
    lon = *b;
    return true;
}

std::optional<ScanEvent> parse_line(std::string_view line)
{
    std::array<std::string_view, 7> fields;
    std::size_t count = 0;
    std::size_t pos = 0;
    while (true) {
        const auto tab = line.find('\t', pos);
        if (count == fields.size()) {
            return std::nullopt; // too many fields
        }
        fields[count++] = line.substr(pos, tab == std::string_view::npos ? line.npos : tab - pos);
        if (tab == std::string_view::npos) {
            break;
        }
        pos = tab + 1;
    }
    if (count != fields.size()) {
        return std::nullopt;
    }

    ScanEvent ev;
    const auto start = parse_number<std::int64_t>(fields[0]);
    const auto end = parse_number<std::int64_t>(fields[1]);
    if (!start || !end || *start > *end) {
        return std::nullopt;
    }
    ev.start_time = *start;
    ev.end_time = *end;
    if (!parse_coordinates(fields[5], ev.latitude, ev.longitude)) {
        return std::nullopt;
    }
    ev.source_ip = std::string(trim(fields[2]));
    ev.tld = std::string(trim(fields[3]));
    ev.country = std::string(trim(fields[4]));
    ev.as_meta = std::string(trim(fields[6]));
    return ev;
}

double uniform01(std::mt19937_64& gen)
{
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

} // namespace

ParseResult parse_events(std::istream& source)
{
    if (!source) {
        throw InputError("scan event stream is not readable");
    }
    ParseResult result;
    std::string line;
    while (std::getline(source, line)) {
        std::string_view view = line;
        if (!view.empty() && view.back() == '\r') {
            view.remove_suffix(1);
        }
        const auto content = trim(view);
        if (content.empty()) {
            continue;
        }
        if (content.front() == '#') {
            ++result.comments;
            continue;
        }
        if (auto ev = parse_line(view)) {
            result.events.push_back(std::move(*ev));
        } else {
            ++result.malformed;
        }
    }
    if (source.bad()) {
        throw InputError("read error while parsing scan events");
    }
    if (result.events.empty()) {
        throw EmptyDatasetError(
            fmt::format("no valid scan records ({} malformed lines)", result.malformed));
    }
    return result;
}

ParseResult parse_events_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw InputError(fmt::format("cannot open '{}'", path.string()));
    }
    return parse_events(in);
}

void write_events(std::ostream& out, std::span<const ScanEvent> events)
{
    out << "# start_time\tend_time\tsource_ip\ttld\tcountry\tlat,lon\tas\n";
    for (const auto& ev : events) {
        out << fmt::format("{}\t{}\t{}\t{}\t{}\t{:.4f},{:.4f}\t{}\n", ev.start_time, ev.end_time,
                           ev.source_ip, ev.tld, ev.country, ev.latitude, ev.longitude,
                           ev.as_meta);
    }
}

void IntensitySeries::validate() const
{
    const auto n = t.size();
    if (n < 3) {
        throw ShapeError(fmt::format("intensity series needs at least 3 points, got {}", n));
    }
    if (raw.size() != n || smoothed.size() != n) {
        throw ShapeError("intensity series columns differ in length");
    }
    if (bin_width_s <= 0) {
        throw ShapeError("bin width must be positive");
    }
    const double dt = t[1] - t[0];
    if (!(dt > 0.0)) {
        throw ShapeError("series times must be strictly increasing");
    }
    for (std::size_t i = 1; i < n; ++i) {
        const double step = t[i] - t[i - 1];
        if (!(step > 0.0) || std::abs(step - dt) > 1e-12 * std::max(1.0, std::abs(t[i]))) {
            throw ShapeError(fmt::format("non-uniform time spacing at index {}", i));
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(smoothed[i]) || !std::isfinite(raw[i])) {
            throw ShapeError(fmt::format("non-finite value at index {}", i));
        }
    }
}

IntensitySeries IntensitySeries::head(std::size_t count) const
{
    count = std::min(count, t.size());
    IntensitySeries out;
    out.origin_unix = origin_unix;
    out.bin_width_s = bin_width_s;
    out.t.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(count));
    out.raw.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(std::min(count, raw.size())));
    out.smoothed.assign(smoothed.begin(),
                        smoothed.begin() + static_cast<std::ptrdiff_t>(std::min(count, smoothed.size())));
    return out;
}

IntensitySeries bin_events(std::span<const ScanEvent> events, std::int64_t bin_width_s)
{
    if (events.empty()) {
        throw EmptyDatasetError("no events to bin");
    }
    if (bin_width_s <= 0) {
        throw ShapeError("bin width must be positive");
    }
    const auto [lo, hi] = std::minmax_element(
        events.begin(), events.end(),
        [](const ScanEvent& a, const ScanEvent& b) { return a.start_time < b.start_time; });
    const std::int64_t origin = lo->start_time;
    const auto bins = static_cast<std::size_t>((hi->start_time - origin) / bin_width_s) + 1;

    IntensitySeries series;
    series.origin_unix = origin;
    series.bin_width_s = bin_width_s;
    series.raw.assign(bins, 0.0);
    for (const auto& ev : events) {
        series.raw[static_cast<std::size_t>((ev.start_time - origin) / bin_width_s)] += 1.0;
    }
    series.t.resize(bins);
    const double width_days = static_cast<double>(bin_width_s) / kSecondsPerDay;
    for (std::size_t k = 0; k < bins; ++k) {
        series.t[k] = (static_cast<double>(k) + 0.5) * width_days;
    }
    return series;
}

std::vector<double> smooth(std::span<const double> raw)
{
    const auto n = raw.size();
    if (n < 2) {
        throw ShapeError(fmt::format("smoothing needs at least 2 values, got {}", n));
    }
    std::vector<double> out(n);
    out[0] = (raw[0] + raw[1]) / 2.0;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        out[i] = (raw[i - 1] + raw[i] + raw[i + 1]) / 3.0;
    }
    out[n - 1] = (raw[n - 2] + raw[n - 1]) / 2.0;
    return out;
}

IntensitySeries preprocess(std::span<const ScanEvent> events, std::int64_t bin_width_s)
{
    auto series = bin_events(events, bin_width_s);
    series.smoothed = smooth(series.raw);
    return series;
}

Interpolant::Interpolant(std::vector<double> times, std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values))
{
    if (times_.empty() || times_.size() != values_.size()) {
        throw ShapeError("interpolant needs matching, non-empty node arrays");
    }
    for (std::size_t i = 1; i < times_.size(); ++i) {
        if (!(times_[i] > times_[i - 1])) {
            throw ShapeError("interpolant node times must be strictly increasing");
        }
    }
}

double Interpolant::operator()(double t) const noexcept
{
    if (t <= times_.front()) {
        return values_.front();
    }
    if (t >= times_.back()) {
        return values_.back();
    }
    // First node strictly greater than t; t lies in [times_[i-1], times_[i]).
    const auto it = std::upper_bound(times_.begin(), times_.end(), t);
    const auto i = static_cast<std::size_t>(it - times_.begin());
    const double t0 = times_[i - 1];
    const double v0 = values_[i - 1];
    const double w = (t - t0) / (times_[i] - t0);
    return v0 + w * (values_[i] - v0);
}

Interpolant Interpolant::truncated(std::size_t count) const
{
    count = std::clamp<std::size_t>(count, 1, times_.size());
    return Interpolant({times_.begin(), times_.begin() + static_cast<std::ptrdiff_t>(count)},
                       {values_.begin(), values_.begin() + static_cast<std::ptrdiff_t>(count)});
}

Interpolant make_interpolant(const IntensitySeries& series, bool use_smoothed)
{
    const auto& values = use_smoothed ? series.smoothed : series.raw;
    return Interpolant(series.t, values);
}

void write_series_csv(std::ostream& out, const IntensitySeries& series)
{
    out << "time_days,raw,smoothed\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double s = i < series.smoothed.size() ? series.smoothed[i]
                                                    : std::numeric_limits<double>::quiet_NaN();
        out << fmt::format("{},{},{}\n", series.t[i], series.raw[i], s);
    }
}

IntensitySeries read_series_csv(std::istream& in)
{
    if (!in) {
        throw InputError("series stream is not readable");
    }
    IntensitySeries series;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view view = trim(line);
        if (view.empty() || view.front() == '#') {
            continue;
        }
        if (view.starts_with("time_days")) {
            continue;
        }
        const auto c1 = view.find(',');
        const auto c2 = c1 == view.npos ? view.npos : view.find(',', c1 + 1);
        if (c2 == view.npos) {
            throw InputError(fmt::format("series line {}: expected 3 columns", lineno));
        }
        const auto t = parse_number<double>(view.substr(0, c1));
        const auto r = parse_number<double>(view.substr(c1 + 1, c2 - c1 - 1));
        const auto s = parse_number<double>(view.substr(c2 + 1));
        if (!t || !r || !s) {
            throw InputError(fmt::format("series line {}: not numeric", lineno));
        }
        series.t.push_back(*t);
        series.raw.push_back(*r);
        series.smoothed.push_back(*s);
    }
    if (in.bad()) {
        throw InputError("read error while parsing series");
    }
    if (series.t.empty()) {
        throw EmptyDatasetError("series file has no rows");
    }
    if (series.t.size() >= 2) {
        series.bin_width_s =
            static_cast<std::int64_t>(std::llround((series.t[1] - series.t[0]) * kSecondsPerDay));
    }
    return series;
}

IntensitySeries read_series_csv_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw InputError(fmt::format("cannot open '{}'", path.string()));
    }
    return read_series_csv(in);
}

double synth_rate(double t, std::size_t n_hosts, double horizon_days, const SynthOptions& o)
{
    const double mid = o.midpoint_fraction * horizon_days;
    const double infected = static_cast<double>(n_hosts) / (1.0 + std::exp(-o.growth_rate * (t - mid)));
    const double active =
        o.retained_fraction + (1.0 - o.retained_fraction) * std::exp(-o.patch_rate * std::max(0.0, t - mid));
    return o.scans_per_host_day * infected * active;
}

std::vector<ScanEvent> synth_events(std::uint64_t seed, std::size_t n_hosts, double horizon_days,
                                    const SynthOptions& options)
{
    static constexpr std::array<const char*, 6> kTlds{"net", "com", "edu", "org", "jp", "de"};
    static constexpr std::array<const char*, 6> kCountries{"US", "KR", "CN", "TW", "CA", "DE"};

    std::mt19937_64 gen(seed);
    const double peak = options.scans_per_host_day * static_cast<double>(n_hosts);
    std::vector<ScanEvent> events;

    auto emit = [&](double t) {
        ScanEvent ev;
        ev.start_time = options.epoch + static_cast<std::int64_t>(std::floor(t * kSecondsPerDay));
        ev.end_time = ev.start_time + static_cast<std::int64_t>(gen() % 600);
        const auto host = gen() % std::max<std::size_t>(n_hosts, 1);
        // Spread host indices over the address space deterministically.
        const std::uint64_t h = (host + 1) * 0x9E3779B97F4A7C15ULL;
        ev.source_ip = fmt::format("{}.{}.{}.{}", (h >> 56) & 0xFF, (h >> 48) & 0xFF,
                                   (h >> 40) & 0xFF, (h >> 32) & 0xFF);
        ev.tld = kTlds[h % kTlds.size()];
        ev.country = kCountries[(h >> 8) % kCountries.size()];
        ev.latitude = -60.0 + 130.0 * uniform01(gen);
        ev.longitude = -180.0 + 360.0 * uniform01(gen);
        ev.as_meta = fmt::format("AS{}", 1000 + (h >> 16) % 30000);
        events.push_back(std::move(ev));
    };

    // Thinning against the constant bound `peak` >= rate(t).
    double t = 0.0;
    while (peak > 0.0) {
        t += -std::log1p(-uniform01(gen)) / peak;
        if (t >= horizon_days) {
            break;
        }
        if (uniform01(gen) * peak < synth_rate(t, n_hosts, horizon_days, options)) {
            emit(t);
        }
    }
    if (events.empty()) {
        emit(std::min(options.midpoint_fraction * horizon_days, horizon_days));
    }
    return events;
}

} // namespace propagate::ingest
