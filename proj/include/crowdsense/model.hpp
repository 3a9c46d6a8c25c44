#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/timestamp.hpp"

namespace crowdsense::model {

using geo::GeoPoint;

/// One anonymized location sample: who, where, when.
struct Report {
    std::string id;
    GeoPoint pos;
    Timestamp ts;

    friend bool operator==(const Report&, const Report&) = default;
};

/// Build a validated Report; coordinates are snapped to the 1e-7 degree lattice.
inline Report make_report(std::string id, double lat, double lon, Timestamp ts)
{
    if (id.empty()) {
        throw ParseError("empty_id", "id", 0, "report id is empty");
    }
    if (!geo::is_valid_lat(lat)) {
        throw RangeError("lat_out_of_range", "lat", 0, fmt::format("latitude {} out of range [-90, 90]", lat));
    }
    if (!geo::is_valid_lon(lon)) {
        throw RangeError("lon_out_of_range", "lon", 0, fmt::format("longitude {} out of range [-180, 180]", lon));
    }
    return Report{std::move(id), geo::quantize({lat, lon}), ts};
}

namespace detail {

inline std::size_t key_offset(std::string_view line, std::string_view field)
{
    const auto pos = line.find(fmt::format("\"{}\"", field));
    return pos == std::string_view::npos ? 0 : pos;
}

[[noreturn]] inline void field_error(std::string_view line, const std::string& reason, const std::string& field,
                                     const std::string& detail)
{
    const auto off = key_offset(line, field);
    throw ParseError(reason, field, off, fmt::format("field `{}` at byte {}: {}", field, off, detail));
}

} // namespace detail

/// Parse one NDJSON record `{"id":..,"lat":..,"lon":..,"ts":..}`.
///
/// Integer ids are accepted and kept as their decimal text. Throws ParseError
/// (or RangeError for coordinates off the globe) naming field and byte offset.
inline Report parse_report_line(std::string_view line)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        const std::size_t off = e.byte > 0 ? e.byte - 1 : 0;
        throw ParseError("malformed_json", "", off, fmt::format("malformed JSON at byte {}", off));
    }
    if (!j.is_object()) {
        throw ParseError("malformed_json", "", 0, "record is not a JSON object");
    }

    std::string id;
    const auto id_it = j.find("id");
    if (id_it == j.end()) {
        detail::field_error(line, "missing_id", "id", "missing");
    }
    if (id_it->is_string()) {
        id = id_it->get<std::string>();
    } else if (id_it->is_number_unsigned()) {
        id = std::to_string(id_it->get<std::uint64_t>());
    } else if (id_it->is_number_integer()) {
        id = std::to_string(id_it->get<std::int64_t>());
    } else {
        detail::field_error(line, "bad_id", "id", "expected string or integer");
    }
    if (id.empty()) {
        detail::field_error(line, "empty_id", "id", "empty id");
    }

    const auto number = [&](const char* name) {
        const auto it = j.find(name);
        if (it == j.end()) {
            detail::field_error(line, fmt::format("missing_{}", name), name, "missing");
        }
        if (!it->is_number()) {
            detail::field_error(line, fmt::format("bad_{}", name), name, "expected a number");
        }
        return it->get<double>();
    };
    const double lat = number("lat");
    if (!geo::is_valid_lat(lat)) {
        const auto off = detail::key_offset(line, "lat");
        throw RangeError("lat_out_of_range", "lat", off, fmt::format("latitude {} out of range at byte {}", lat, off));
    }
    const double lon = number("lon");
    if (!geo::is_valid_lon(lon)) {
        const auto off = detail::key_offset(line, "lon");
        throw RangeError("lon_out_of_range", "lon", off,
                         fmt::format("longitude {} out of range at byte {}", lon, off));
    }

    const auto ts_it = j.find("ts");
    if (ts_it == j.end()) {
        detail::field_error(line, "missing_ts", "ts", "missing");
    }
    if (!ts_it->is_string()) {
        detail::field_error(line, "bad_ts", "ts", "expected an ISO-8601 string");
    }
    const auto ts = parse_iso8601(ts_it->get_ref<const std::string&>());
    if (!ts) {
        detail::field_error(line, "bad_ts", "ts", fmt::format("not an ISO-8601 UTC timestamp: `{}`",
                                                               ts_it->get_ref<const std::string&>()));
    }
    return make_report(std::move(id), lat, lon, *ts);
}

/// Canonical NDJSON rendering (no trailing newline). Field order id, lat, lon, ts.
inline std::string format_report_line(const Report& r)
{
    return fmt::format("{{\"id\":{},\"lat\":{:.7f},\"lon\":{:.7f},\"ts\":\"{}\"}}", nlohmann::json(r.id).dump(),
                       r.pos.lat, r.pos.lon, format_iso8601(r.ts));
}

/// Reports in non-decreasing timestamp order.
struct Dataset {
    std::vector<Report> reports;

    /// Stable sort by timestamp; reports sharing a timestamp keep their order.
    void normalize()
    {
        std::stable_sort(reports.begin(), reports.end(), [](const Report& a, const Report& b) { return a.ts < b.ts; });
    }

    bool empty() const noexcept { return reports.empty(); }
    std::size_t size() const noexcept { return reports.size(); }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Latest position per device inside [start, end).
///
/// `points` is ordered by (lat, lon, id). Clustering labels depend on input
/// order, and this order does not depend on how ids were tokenised, so the
/// same positions cluster identically whether ids are raw or anonymized.
struct Frame {
    Timestamp start;
    Timestamp end;
    std::vector<Report> points;

    std::vector<GeoPoint> positions() const
    {
        std::vector<GeoPoint> out;
        out.reserve(points.size());
        for (const auto& r : points) {
            out.push_back(r.pos);
        }
        return out;
    }
};

/// Collects reports for one frame with last-write-wins per device.
class FrameBuilder {
public:
    /// A later timestamp replaces the held report; on a tie the later call wins.
    void add(Report r)
    {
        auto [it, inserted] = latest_.try_emplace(r.id, r);
        if (!inserted && it->second.ts <= r.ts) {
            it->second = std::move(r);
        }
    }

    std::size_t size() const noexcept { return latest_.size(); }

    Frame finish(Timestamp start, Timestamp end) &&
    {
        Frame f{start, end, {}};
        f.points.reserve(latest_.size());
        for (auto& [id, r] : latest_) {
            f.points.push_back(std::move(r));
        }
        latest_.clear();
        std::sort(f.points.begin(), f.points.end(), [](const Report& a, const Report& b) {
            if (a.pos.lat != b.pos.lat) {
                return a.pos.lat < b.pos.lat;
            }
            if (a.pos.lon != b.pos.lon) {
                return a.pos.lon < b.pos.lon;
            }
            return a.id < b.id;
        });
        return f;
    }

private:
    std::unordered_map<std::string, Report> latest_;
};

/// Sliding frames [t0 + k*step, t0 + k*step + window) from the first report
/// until the last report is covered. Empty frames are kept.
inline std::vector<Frame> window_frames(const Dataset& ds, Millis window, Millis step)
{
    if (window <= Millis::zero() || step <= Millis::zero()) {
        throw ArgumentError("frame window and step must be positive");
    }
    if (step > window) {
        throw ArgumentError("frame step must not exceed the window");
    }
    std::vector<Frame> frames;
    if (ds.reports.empty()) {
        return frames;
    }
    const auto by_ts = [](const Report& r, Timestamp t) { return r.ts < t; };
    const Timestamp t0 = ds.reports.front().ts;
    const Timestamp last = ds.reports.back().ts;
    for (Timestamp start = t0; start <= last; start += step) {
        const Timestamp end = start + window;
        const auto lo = std::lower_bound(ds.reports.begin(), ds.reports.end(), start, by_ts);
        const auto hi = std::lower_bound(lo, ds.reports.end(), end, by_ts);
        FrameBuilder builder;
        for (auto it = lo; it != hi; ++it) {
            builder.add(*it);
        }
        frames.push_back(std::move(builder).finish(start, end));
    }
    return frames;
}

/// One frame spanning the whole dataset (latest position per device).
inline Frame whole_dataset_frame(const Dataset& ds)
{
    if (ds.reports.empty()) {
        return Frame{Timestamp{}, Timestamp{} + Millis{1}, {}};
    }
    FrameBuilder builder;
    for (const auto& r : ds.reports) {
        builder.add(r);
    }
    return std::move(builder).finish(ds.reports.front().ts, ds.reports.back().ts + Millis{1});
}

enum class Format { Auto, Ndjson, Csv };

inline Format parse_format(std::string_view name)
{
    if (name == "ndjson") {
        return Format::Ndjson;
    }
    if (name == "csv") {
        return Format::Csv;
    }
    if (name == "auto") {
        return Format::Auto;
    }
    throw ArgumentError(fmt::format("unknown dataset format `{}` (expected ndjson or csv)", name));
}

inline Format resolve_format(Format f, std::string_view path)
{
    if (f != Format::Auto) {
        return f;
    }
    return path.size() >= 4 && path.substr(path.size() - 4) == ".csv" ? Format::Csv : Format::Ndjson;
}

inline constexpr std::string_view kCsvHeader = "id,longitude,latitude,timestamp";

namespace detail {

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\r\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::string> split_csv(std::string_view line)
{
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    fields.back() += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                fields.back() += c;
            }
        } else if (c == '"' && fields.back().empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    if (quoted) {
        throw ParseError("malformed_csv", "", line.size(), "unterminated quoted field");
    }
    return fields;
}

inline double parse_degrees(const std::string& s, const char* field)
{
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ParseError(fmt::format("bad_{}", field), field, 0, fmt::format("field `{}`: bad number `{}`", field, s));
    }
    return v;
}

} // namespace detail

inline std::string format_report_csv(const Report& r)
{
    return fmt::format("{},{:.7f},{:.7f},{}", detail::csv_field(r.id), r.pos.lon, r.pos.lat, format_iso8601(r.ts));
}

inline Report parse_report_csv(std::string_view line)
{
    const auto fields = detail::split_csv(line);
    if (fields.size() != 4) {
        throw ParseError("malformed_csv", "", 0, fmt::format("expected 4 columns, got {}", fields.size()));
    }
    const double lon = detail::parse_degrees(fields[1], "longitude");
    const double lat = detail::parse_degrees(fields[2], "latitude");
    const auto ts = parse_iso8601(fields[3]);
    if (!ts) {
        throw ParseError("bad_ts", "timestamp", 0, fmt::format("field `timestamp`: bad value `{}`", fields[3]));
    }
    return make_report(fields[0], lat, lon, *ts);
}

inline void write_dataset(const Dataset& ds, std::ostream& out, Format format)
{
    if (format == Format::Csv) {
        out << kCsvHeader << '\n';
        for (const auto& r : ds.reports) {
            out << format_report_csv(r) << '\n';
        }
    } else {
        for (const auto& r : ds.reports) {
            out << format_report_line(r) << '\n';
        }
    }
}

inline void write_dataset(const Dataset& ds, const std::string& path, Format format = Format::Auto)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot open `{}` for writing", path));
    }
    write_dataset(ds, out, resolve_format(format, path));
    out.flush();
    if (!out) {
        throw IoError(fmt::format("write to `{}` failed", path));
    }
}

struct ReadOptions {
    Format format = Format::Auto;
    /// Strict mode fails on the first bad line; lenient mode skips and counts.
    bool strict = true;
};

struct LoadResult {
    Dataset dataset;
    std::size_t skipped_lines = 0;
    std::vector<std::string> skipped;
};

/// Read from a stream; `source` prefixes error messages (`source:line: ...`).
inline LoadResult load_dataset(std::istream& in, Format format, bool strict, std::string_view source)
{
    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (format == Format::Csv && !header_seen) {
            if (line != kCsvHeader) {
                throw ParseError("missing_header", "", 0,
                                 fmt::format("{}:{}: expected CSV header `{}`", source, line_no, kCsvHeader));
            }
            header_seen = true;
            continue;
        }
        if (line.empty()) {
            continue;
        }
        try {
            result.dataset.reports.push_back(format == Format::Csv ? parse_report_csv(line) : parse_report_line(line));
        } catch (const ParseError& e) {
            if (strict) {
                throw ParseError(e.reason(), e.field(), e.offset(), fmt::format("{}:{}: {}", source, line_no, e.what()));
            }
            ++result.skipped_lines;
            result.skipped.push_back(fmt::format("{}:{}: {}", source, line_no, e.what()));
        }
    }
    if (format == Format::Csv && !header_seen) {
        throw ParseError("missing_header", "", 0, fmt::format("{}: empty CSV, header missing", source));
    }
    result.dataset.normalize();
    return result;
}

inline LoadResult load_dataset(const std::string& path, const ReadOptions& opts = {})
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open dataset `{}`", path));
    }
    auto result = load_dataset(in, resolve_format(opts.format, path), opts.strict, path);
    if (in.bad()) {
        throw IoError(fmt::format("read from `{}` failed", path));
    }
    return result;
}

inline Dataset read_dataset(const std::string& path, Format format = Format::Auto)
{
    return load_dataset(path, ReadOptions{format, true}).dataset;
}

} // namespace crowdsense::model
