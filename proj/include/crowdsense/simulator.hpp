#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/model.hpp"
#include "crowdsense/rng.hpp"
#include "crowdsense/timestamp.hpp"

namespace crowdsense::sim {

using geo::GeoPoint;
using geo::LocalFrame;
using geo::Polygon;

inline constexpr int kHotspotAttempts = 1000;
inline constexpr int kWalkAttempts = 100;

/// Default scenario start: 2024-05-01T14:30:00.000Z.
inline Timestamp default_epoch() { return *parse_iso8601("2024-05-01T14:30:00.000Z"); }

/// A Gaussian crowd injected for ground truth.
struct Hotspot {
    GeoPoint center;
    double sigma_m = 20.0;
    std::size_t count = 0;
    Timestamp start = Timestamp::min();
    Timestamp end = Timestamp::max();

    bool active_at(Timestamp t) const noexcept { return start <= t && t <= end; }
};

struct ScenarioConfig {
    std::uint64_t seed = 42;
    Polygon campus = geo::default_campus();
    std::size_t population = 9000;
    Millis duration{0};
    Millis tick{std::chrono::seconds{60}};
    double walk_step_sigma = 5.0;
    Timestamp epoch = default_epoch();
    std::vector<Hotspot> hotspots;

    void validate() const
    {
        if (duration < Millis::zero()) {
            throw ArgumentError("scenario duration must be >= 0");
        }
        if (tick <= Millis::zero()) {
            throw ArgumentError("scenario tick must be > 0");
        }
        if (!(walk_step_sigma >= 0.0) || !std::isfinite(walk_step_sigma)) {
            throw ArgumentError("walk_step_sigma must be >= 0");
        }
        std::size_t members = 0;
        for (std::size_t i = 0; i < hotspots.size(); ++i) {
            const auto& h = hotspots[i];
            if (!(h.sigma_m > 0.0) || !std::isfinite(h.sigma_m)) {
                throw ArgumentError(fmt::format("hotspot {}: sigma_m must be > 0", i));
            }
            if (h.start > h.end) {
                throw ArgumentError(fmt::format("hotspot {}: start after end", i));
            }
            if (!geo::is_valid(h.center) || !geo::point_in_polygon(campus, h.center)) {
                throw ScenarioError(fmt::format("hotspot {}: center ({}, {}) is outside the campus", i, h.center.lat,
                                                h.center.lon));
            }
            members += h.count;
        }
        if (members > population) {
            throw ScenarioError(
                fmt::format("hotspots claim {} people but the population is only {}", members, population));
        }
    }
};

/// Uniform points inside `poly` by rejection from its bounding box.
inline std::vector<GeoPoint> generate_uniform_in_polygon(std::size_t n, const Polygon& poly, Rng& rng)
{
    const auto box = geo::polygon_bbox(poly);
    std::vector<GeoPoint> out;
    out.reserve(n);
    while (out.size() < n) {
        const double lat = rng.uniform(box.min_lat, box.max_lat);
        const double lon = rng.uniform(box.min_lon, box.max_lon);
        const GeoPoint p = geo::quantize({lat, lon});
        if (geo::point_in_polygon(poly, p)) {
            out.push_back(p);
        }
    }
    return out;
}

/// `h.count` isotropic Gaussian draws around the hotspot centre; draws that
/// leave the campus are re-drawn.
inline std::vector<GeoPoint> sample_hotspot(const Hotspot& h, const LocalFrame& frame, const Polygon& campus, Rng& rng)
{
    std::vector<GeoPoint> out;
    out.reserve(h.count);
    const auto c = frame.project(h.center);
    for (std::size_t i = 0; i < h.count; ++i) {
        int attempt = 0;
        for (; attempt < kHotspotAttempts; ++attempt) {
            const double dx = rng.normal() * h.sigma_m;
            const double dy = rng.normal() * h.sigma_m;
            const GeoPoint p = geo::quantize(frame.unproject({c.x + dx, c.y + dy}));
            if (geo::point_in_polygon(campus, p)) {
                out.push_back(p);
                break;
            }
        }
        if (attempt == kHotspotAttempts) {
            throw ScenarioError(fmt::format("hotspot at ({}, {}): {} consecutive draws fell outside the campus",
                                            h.center.lat, h.center.lon, kHotspotAttempts));
        }
    }
    return out;
}

/// One Gaussian step (sigma_m per axis); steps leaving the campus are re-drawn,
/// and after 100 failures the walker stays put.
inline GeoPoint step_random_walk(const GeoPoint& p, double sigma_m, const Polygon& campus, const LocalFrame& frame,
                                 Rng& rng)
{
    if (sigma_m <= 0.0) {
        return p;
    }
    const auto xy = frame.project(p);
    for (int attempt = 0; attempt < kWalkAttempts; ++attempt) {
        const double dx = rng.normal() * sigma_m;
        const double dy = rng.normal() * sigma_m;
        const GeoPoint q = geo::quantize(frame.unproject({xy.x + dx, xy.y + dy}));
        if (geo::point_in_polygon(campus, q)) {
            return q;
        }
    }
    return p;
}

/// Stable per-person token in creation order.
inline std::string person_id(std::size_t index) { return fmt::format("p{:06d}", index); }

/// Run a scenario to completion.
///
/// Draw order per seed: initial uniform positions for everyone, then per tick
/// each active hotspot (in config order) re-samples its members, then every
/// other person takes one random-walk step (skipped at t = 0). Members of
/// hotspot k are the highest-indexed people not already claimed by hotspots
/// 0..k-1.
inline model::Dataset run_scenario(const ScenarioConfig& cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    const LocalFrame frame = geo::frame_for(cfg.campus);

    std::vector<GeoPoint> pos = generate_uniform_in_polygon(cfg.population, cfg.campus, rng);

    // Membership ranges [first, last) per hotspot.
    std::vector<std::pair<std::size_t, std::size_t>> members;
    std::size_t hi = cfg.population;
    for (const auto& h : cfg.hotspots) {
        members.emplace_back(hi - h.count, hi);
        hi -= h.count;
    }

    std::vector<std::string> ids(cfg.population);
    for (std::size_t i = 0; i < cfg.population; ++i) {
        ids[i] = person_id(i);
    }
    std::vector<std::size_t> order(cfg.population);
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });

    const auto ticks = static_cast<std::size_t>(cfg.duration / cfg.tick) + 1;
    model::Dataset ds;
    ds.reports.reserve(ticks * cfg.population);
    std::vector<char> anchored(cfg.population, 0);
    for (std::size_t k = 0; k < ticks; ++k) {
        const Millis t = cfg.tick * static_cast<Millis::rep>(k);
        const Timestamp ts = cfg.epoch + t;
        std::fill(anchored.begin(), anchored.end(), 0);
        for (std::size_t h = 0; h < cfg.hotspots.size(); ++h) {
            if (!cfg.hotspots[h].active_at(ts)) {
                continue;
            }
            const auto pts = sample_hotspot(cfg.hotspots[h], frame, cfg.campus, rng);
            for (std::size_t m = 0; m < pts.size(); ++m) {
                pos[members[h].first + m] = pts[m];
                anchored[members[h].first + m] = 1;
            }
        }
        if (k > 0) {
            for (std::size_t i = 0; i < cfg.population; ++i) {
                if (!anchored[i]) {
                    pos[i] = step_random_walk(pos[i], cfg.walk_step_sigma, cfg.campus, frame, rng);
                }
            }
        }
        for (const std::size_t i : order) {
            ds.reports.push_back(model::Report{ids[i], pos[i], ts});
        }
    }
    return ds;
}

namespace detail {

inline std::string_view trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline double to_double(std::string_view v, std::string_view key)
{
    v = trim(v);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ArgumentError(fmt::format("`{}`: expected a number, got `{}`", key, v));
    }
    return out;
}

inline std::uint64_t to_u64(std::string_view v, std::string_view key)
{
    v = trim(v);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ArgumentError(fmt::format("`{}`: expected a non-negative integer, got `{}`", key, v));
    }
    return out;
}

inline Millis to_seconds(std::string_view v, std::string_view key)
{
    const double s = to_double(v, key);
    return Millis{static_cast<Millis::rep>(std::llround(s * 1000.0))};
}

/// Hotspot window bound: seconds after the epoch, or an ISO-8601 instant.
inline Timestamp to_instant(std::string_view v, std::string_view key, Timestamp epoch)
{
    v = trim(v);
    if (auto iso = parse_iso8601(v)) {
        return *iso;
    }
    return epoch + to_seconds(v, key);
}

inline GeoPoint to_point(std::string_view v, std::string_view key)
{
    const auto comma = v.find(',');
    if (comma == std::string_view::npos) {
        throw ArgumentError(fmt::format("`{}`: expected `lat, lon`", key));
    }
    return {to_double(v.substr(0, comma), key), to_double(v.substr(comma + 1), key)};
}

} // namespace detail

/// Apply one top-level `key = value` setting (also used for CLI overrides).
/// Relative campus paths resolve against `base_dir`.
inline void apply_setting(ScenarioConfig& cfg, std::string_view key, std::string_view value,
                          const std::filesystem::path& base_dir = {})
{
    value = detail::trim(value);
    if (key == "seed") {
        cfg.seed = detail::to_u64(value, key);
    } else if (key == "population") {
        cfg.population = detail::to_u64(value, key);
    } else if (key == "duration") {
        cfg.duration = detail::to_seconds(value, key);
    } else if (key == "tick") {
        cfg.tick = detail::to_seconds(value, key);
    } else if (key == "walk_step_sigma") {
        cfg.walk_step_sigma = detail::to_double(value, key);
    } else if (key == "epoch") {
        const auto t = parse_iso8601(value);
        if (!t) {
            throw ArgumentError(fmt::format("`epoch`: not an ISO-8601 timestamp: `{}`", value));
        }
        cfg.epoch = *t;
    } else if (key == "campus") {
        std::filesystem::path p{std::string(value)};
        if (p.is_relative() && !base_dir.empty()) {
            p = base_dir / p;
        }
        cfg.campus = geo::read_polygon(p.string());
    } else {
        throw ArgumentError(fmt::format("unknown scenario key `{}`", key));
    }
}

/// Parse the scenario config grammar:
///
///     # comment
///     seed = 42
///     population = 9600
///     duration = 0            # seconds
///     tick = 60               # seconds
///     walk_step_sigma = 5     # meters per tick
///     epoch = 2024-05-01T14:30:00.000Z
///     campus = campus.txt     # relative to the config file
///     hotspot {
///       center = -15.84, -70.02
///       sigma_m = 20
///       count = 200
///       start = 0             # seconds after epoch, or ISO-8601; optional
///       end = 600             # optional
///     }
///
/// Hotspot windows given in seconds are resolved against the final epoch.
inline ScenarioConfig parse_scenario(std::string_view text, std::string_view source = "<scenario>",
                                     const std::filesystem::path& base_dir = {})
{
    ScenarioConfig cfg;
    struct PendingHotspot {
        Hotspot h;
        std::optional<std::string> start, end;
        bool has_center = false;
    };
    std::vector<PendingHotspot> pending;
    bool in_block = false;
    std::size_t line_no = 0;
    try {
        while (!text.empty()) {
            const auto nl = text.find('\n');
            std::string_view line = text.substr(0, nl);
            text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) {
                line = line.substr(0, hash);
            }
            line = detail::trim(line);
            if (line.empty()) {
                continue;
            }
            if (!in_block && (line == "hotspot {" || line == "hotspot{")) {
                in_block = true;
                pending.emplace_back();
                continue;
            }
            if (in_block && line == "}") {
                if (!pending.back().has_center) {
                    throw ArgumentError("hotspot block without `center`");
                }
                in_block = false;
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw ArgumentError(fmt::format("expected `key = value`, got `{}`", line));
            }
            const auto key = detail::trim(line.substr(0, eq));
            const auto value = detail::trim(line.substr(eq + 1));
            if (in_block) {
                auto& ph = pending.back();
                if (key == "center") {
                    ph.h.center = detail::to_point(value, key);
                    ph.has_center = true;
                } else if (key == "sigma_m") {
                    ph.h.sigma_m = detail::to_double(value, key);
                } else if (key == "count") {
                    ph.h.count = detail::to_u64(value, key);
                } else if (key == "start") {
                    ph.start = std::string(value);
                } else if (key == "end") {
                    ph.end = std::string(value);
                } else {
                    throw ArgumentError(fmt::format("unknown hotspot key `{}`", key));
                }
            } else {
                apply_setting(cfg, key, value, base_dir);
            }
        }
        if (in_block) {
            throw ArgumentError("unterminated hotspot block");
        }
        for (auto& ph : pending) {
            if (ph.start) {
                ph.h.start = detail::to_instant(*ph.start, "start", cfg.epoch);
            }
            if (ph.end) {
                ph.h.end = detail::to_instant(*ph.end, "end", cfg.epoch);
            }
            cfg.hotspots.push_back(ph.h);
        }
    } catch (const ArgumentError& e) {
        throw ArgumentError(fmt::format("{}:{}: {}", source, line_no, e.what()));
    }
    return cfg;
}

inline ScenarioConfig read_scenario(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open scenario config `{}`", path));
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_scenario(text, path, std::filesystem::path(path).parent_path());
}

} // namespace crowdsense::sim
