#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "crowdsense/clustering.hpp"
#include "crowdsense/density.hpp"
#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/timestamp.hpp"

namespace crowdsense::alerts {

using geo::GeoPoint;

/// Crowding policy knobs. The defaults are artifact policy, not measured values.
struct AlertThresholds {
    std::size_t min_cluster_count = 50;
    double max_radius_m = 30.0;
    double cell_density_crit = 25.0;
    double exit_ratio = 0.8;

    void validate() const
    {
        if (min_cluster_count < 1) {
            throw ArgumentError("min_cluster_count must be >= 1");
        }
        if (!(max_radius_m > 0.0)) {
            throw ArgumentError("max_radius_m must be > 0");
        }
        if (!(cell_density_crit >= 1.0)) {
            throw ArgumentError("cell_density_crit must be >= 1");
        }
        if (!(exit_ratio > 0.0 && exit_ratio <= 1.0)) {
            throw ArgumentError("exit_ratio must be in (0, 1]");
        }
    }
};

enum class AlertKind { Cluster, Cell };
enum class Severity { Watch, Warning, Critical };
enum class Transition { Raised, Ongoing, Cleared };

inline std::string_view to_string(AlertKind k) { return k == AlertKind::Cluster ? "cluster" : "cell"; }

inline std::string_view to_string(Severity s)
{
    switch (s) {
    case Severity::Watch: return "watch";
    case Severity::Warning: return "warning";
    case Severity::Critical: return "critical";
    }
    return "?";
}

inline std::string_view to_string(Transition t)
{
    switch (t) {
    case Transition::Raised: return "raised";
    case Transition::Ongoing: return "ongoing";
    case Transition::Cleared: return "cleared";
    }
    return "?";
}

/// Watch below 2x the entry threshold, warning below 4x, critical from 4x.
inline Severity severity_of(double population, double entry_threshold)
{
    if (population < entry_threshold) {
        throw ArgumentError(fmt::format("population {} is below the alert threshold {}", population, entry_threshold));
    }
    if (population >= 4.0 * entry_threshold) {
        return Severity::Critical;
    }
    if (population >= 2.0 * entry_threshold) {
        return Severity::Warning;
    }
    return Severity::Watch;
}

inline Severity severity_of(double population, const AlertThresholds& t)
{
    return severity_of(population, static_cast<double>(t.min_cluster_count));
}

struct Alert {
    std::string alert_id;
    Timestamp frame_ts;
    AlertKind kind = AlertKind::Cluster;
    GeoPoint location;
    double population = 0.0;
    Severity severity = Severity::Watch;
    Transition state = Transition::Raised;
    /// Source in the same frame: cluster id, or grid cell (row, col).
    std::optional<std::int32_t> cluster;
    std::optional<std::pair<std::size_t, std::size_t>> cell;
};

/// Alerts still open after a frame, in the order they were raised.
struct AlertBook {
    std::vector<Alert> active;
    std::uint64_t next_serial = 1;
};

/// Cluster summaries of one frame.
struct FrameClusters {
    Timestamp frame_ts;
    std::vector<cluster::ClusterSummary> summaries;
};

struct FrameAlerts {
    std::vector<Alert> events;
    AlertBook next;
};

namespace detail {

// Severity for an alert that is held open below its entry threshold.
inline Severity held_severity(double population, double entry)
{
    return population < entry ? Severity::Watch : severity_of(population, entry);
}

inline std::string next_id(AlertBook& book) { return fmt::format("a{:06d}", book.next_serial++); }

} // namespace detail

/// Advance alert state by one frame.
///
/// Each open alert is matched to the nearest unclaimed candidate within
/// 2 x max_radius_m whose measure is still at or above exit_ratio x entry;
/// matched alerts continue as `ongoing`, unmatched ones emit `cleared` once.
/// Remaining candidates that meet the entry rule raise new alerts. Clusters
/// qualify with count >= min_cluster_count and radius <= max_radius_m; cells
/// with value >= cell_density_crit.
inline FrameAlerts evaluate_frame(const FrameClusters& clusters, const density::DensityGrid& grid,
                                  const AlertThresholds& thresholds, const AlertBook& prev)
{
    thresholds.validate();
    if (grid.frame_ts && *grid.frame_ts != clusters.frame_ts) {
        throw ArgumentError(fmt::format("cluster frame {} does not match grid frame {}",
                                        format_iso8601(clusters.frame_ts), format_iso8601(*grid.frame_ts)));
    }
    const Timestamp ts = clusters.frame_ts;
    const double match_range = 2.0 * thresholds.max_radius_m;
    const double cluster_entry = static_cast<double>(thresholds.min_cluster_count);
    const double cluster_exit = thresholds.exit_ratio * cluster_entry;
    const double cell_entry = thresholds.cell_density_crit;
    const double cell_exit = thresholds.exit_ratio * cell_entry;
    const auto& sums = clusters.summaries;

    FrameAlerts out;
    out.next.next_serial = prev.next_serial;
    std::vector<char> cluster_taken(sums.size(), 0);
    std::unordered_set<std::size_t> cell_taken;

    for (const Alert& open : prev.active) {
        Alert a = open;
        a.frame_ts = ts;
        a.cluster.reset();
        a.cell.reset();
        bool held = false;
        double nearest_population = 0.0;
        if (open.kind == AlertKind::Cluster) {
            std::optional<std::size_t> best, nearest;
            double best_d = std::numeric_limits<double>::infinity();
            double nearest_d = best_d;
            for (std::size_t j = 0; j < sums.size(); ++j) {
                if (cluster_taken[j]) {
                    continue;
                }
                const double d = geo::haversine_distance(open.location, sums[j].centroid);
                if (d > match_range) {
                    continue;
                }
                if (d < nearest_d) {
                    nearest_d = d;
                    nearest = j;
                }
                if (static_cast<double>(sums[j].count) >= cluster_exit && d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            if (best) {
                cluster_taken[*best] = 1;
                a.location = sums[*best].centroid;
                a.population = static_cast<double>(sums[*best].count);
                a.severity = detail::held_severity(a.population, cluster_entry);
                a.cluster = sums[*best].id;
                held = true;
            } else if (nearest) {
                nearest_population = static_cast<double>(sums[*nearest].count);
            }
        } else if (grid.rows > 0 && grid.cols > 0) {
            const auto span = static_cast<std::ptrdiff_t>(std::ceil(match_range / grid.cell_size_m)) + 1;
            const auto home = grid.cell_of(open.location);
            if (home) {
                std::optional<std::pair<std::size_t, std::size_t>> best;
                double best_d = std::numeric_limits<double>::infinity();
                double nearest_d = best_d;
                const auto r0 = static_cast<std::ptrdiff_t>(home->first);
                const auto c0 = static_cast<std::ptrdiff_t>(home->second);
                for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, r0 - span);
                     r <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(grid.rows) - 1, r0 + span); ++r) {
                    for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(0, c0 - span);
                         c <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(grid.cols) - 1, c0 + span); ++c) {
                        const auto ur = static_cast<std::size_t>(r);
                        const auto uc = static_cast<std::size_t>(c);
                        const double v = grid.at(ur, uc);
                        if (v <= 0.0 || cell_taken.count(ur * grid.cols + uc)) {
                            continue;
                        }
                        const double d = geo::haversine_distance(open.location, grid.cell_center(ur, uc));
                        if (d > match_range) {
                            continue;
                        }
                        if (d < nearest_d) {
                            nearest_d = d;
                            nearest_population = v;
                        }
                        if (v >= cell_exit && d < best_d) {
                            best_d = d;
                            best = std::pair{ur, uc};
                        }
                    }
                }
                if (best) {
                    cell_taken.insert(best->first * grid.cols + best->second);
                    a.location = grid.cell_center(best->first, best->second);
                    a.population = grid.at(best->first, best->second);
                    a.severity = detail::held_severity(a.population, cell_entry);
                    a.cell = best;
                    held = true;
                }
            }
        }
        if (held) {
            a.state = Transition::Ongoing;
            out.events.push_back(a);
            out.next.active.push_back(std::move(a));
        } else {
            a.state = Transition::Cleared;
            a.population = nearest_population;
            out.events.push_back(std::move(a));
        }
    }

    for (std::size_t j = 0; j < sums.size(); ++j) {
        const auto& s = sums[j];
        if (cluster_taken[j] || static_cast<double>(s.count) < cluster_entry || s.radius_m > thresholds.max_radius_m) {
            continue;
        }
        Alert a;
        a.alert_id = detail::next_id(out.next);
        a.frame_ts = ts;
        a.kind = AlertKind::Cluster;
        a.location = s.centroid;
        a.population = static_cast<double>(s.count);
        a.severity = severity_of(a.population, cluster_entry);
        a.state = Transition::Raised;
        a.cluster = s.id;
        out.events.push_back(a);
        out.next.active.push_back(std::move(a));
    }
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            const double v = grid.at(r, c);
            if (v < cell_entry || cell_taken.count(r * grid.cols + c)) {
                continue;
            }
            Alert a;
            a.alert_id = detail::next_id(out.next);
            a.frame_ts = ts;
            a.kind = AlertKind::Cell;
            a.location = grid.cell_center(r, c);
            a.population = v;
            a.severity = severity_of(v, cell_entry);
            a.state = Transition::Raised;
            a.cell = std::pair{r, c};
            out.events.push_back(a);
            out.next.active.push_back(std::move(a));
        }
    }
    out.next.next_serial = std::max(out.next.next_serial, prev.next_serial);
    return out;
}

inline nlohmann::ordered_json to_json(const Alert& a)
{
    nlohmann::ordered_json j;
    j["alert_id"] = a.alert_id;
    j["frame_ts"] = format_iso8601(a.frame_ts);
    j["kind"] = to_string(a.kind);
    j["state"] = to_string(a.state);
    j["severity"] = to_string(a.severity);
    j["lat"] = geo::quantize_degrees(a.location.lat);
    j["lon"] = geo::quantize_degrees(a.location.lon);
    j["population"] = a.population;
    if (a.cluster) {
        j["cluster"] = *a.cluster;
    }
    if (a.cell) {
        j["row"] = a.cell->first;
        j["col"] = a.cell->second;
    }
    return j;
}

/// Alert-log NDJSON record (no trailing newline).
inline std::string format_alert_line(const Alert& a) { return to_json(a).dump(); }

} // namespace crowdsense::alerts
