#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/timestamp.hpp"

namespace crowdsense::cluster {

using geo::GeoPoint;

/// Default eps in degree space, as used for the reference heat-map run.
inline constexpr double kDefaultEpsDegrees = 0.0007;
/// Default eps in meters (~0.0007 deg of latitude).
inline constexpr double kDefaultEpsMeters = 75.0;
inline constexpr std::size_t kDefaultMinSamples = 4;

enum class Metric {
    DegreeEuclidean, ///< sqrt(dlat^2 + dlon^2) in degrees
    HaversineMeters, ///< great-circle meters
};

inline Metric parse_metric(std::string_view name)
{
    if (name == "degrees" || name == "degree-euclidean") {
        return Metric::DegreeEuclidean;
    }
    if (name == "haversine" || name == "meters" || name == "haversine-meters") {
        return Metric::HaversineMeters;
    }
    throw ArgumentError(fmt::format("unknown metric `{}` (expected degrees or haversine)", name));
}

inline std::string_view metric_name(Metric m) { return m == Metric::DegreeEuclidean ? "degrees" : "haversine"; }

struct DbscanParams {
    double eps = kDefaultEpsDegrees;
    std::size_t min_samples = kDefaultMinSamples;
    Metric metric = Metric::DegreeEuclidean;

    void validate() const
    {
        if (!(eps > 0.0) || !std::isfinite(eps)) {
            throw ArgumentError("eps must be > 0");
        }
        if (min_samples < 1) {
            throw ArgumentError("min_samples must be >= 1");
        }
    }
};

/// Per-point DBSCAN outcome: Noise or a dense 0-based cluster id.
class ClusterLabel {
public:
    static constexpr ClusterLabel noise() noexcept { return ClusterLabel(-1); }
    static constexpr ClusterLabel cluster(std::int32_t id) noexcept { return ClusterLabel(id); }

    constexpr bool is_noise() const noexcept { return value_ < 0; }
    constexpr std::int32_t id() const noexcept { return value_; }
    /// -1 for noise, the cluster id otherwise.
    constexpr std::int32_t value() const noexcept { return value_; }

    friend constexpr bool operator==(ClusterLabel, ClusterLabel) = default;

private:
    constexpr explicit ClusterLabel(std::int32_t v) noexcept : value_(v) {}
    std::int32_t value_;
};

inline double distance(const GeoPoint& a, const GeoPoint& b, Metric metric) noexcept
{
    if (metric == Metric::HaversineMeters) {
        return geo::haversine_distance(a, b);
    }
    const double dlat = a.lat - b.lat;
    const double dlon = a.lon - b.lon;
    return std::sqrt(dlat * dlat + dlon * dlon);
}

/// Closed-ball membership test shared by every neighbour search.
inline bool within_eps(const GeoPoint& a, const GeoPoint& b, const DbscanParams& p) noexcept
{
    return distance(a, b, p.metric) <= p.eps;
}

/// Uniform hash grid over lat/lon for closed eps-ball queries.
///
/// Cells are sized so that any pair within eps lies in adjacent cells: eps
/// degrees square for the degree metric; for haversine, eps/R in latitude and
/// the widest longitude span an eps chord can cover at the most poleward
/// input latitude. Longitude columns wrap around the antimeridian.
class NeighborIndex {
public:
    NeighborIndex(std::span<const GeoPoint> points, const DbscanParams& params) : points_(points), params_(params)
    {
        params_.validate();
        constexpr double slack = 1.0 + 1e-9;
        if (params_.metric == Metric::DegreeEuclidean) {
            cell_lat_ = params_.eps * slack;
            cell_lon_ = params_.eps * slack;
            wrap_cols_ = 0;
        } else {
            constexpr double deg = 180.0 / std::numbers::pi;
            const double half = params_.eps / (2.0 * geo::kEarthRadiusM);
            cell_lat_ = std::min(180.0, 2.0 * half * deg * slack);
            double max_abs_lat = 0.0;
            for (const auto& p : points_) {
                max_abs_lat = std::max(max_abs_lat, std::abs(p.lat));
            }
            const double c = std::cos(max_abs_lat * std::numbers::pi / 180.0);
            const double s = half >= std::numbers::pi / 2.0 ? 1.0 : std::sin(half);
            std::int64_t cols = 1;
            if (c > 0.0 && s < c) {
                const double min_width = 2.0 * std::asin(s / c) * deg * slack;
                cols = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(360.0 / min_width)));
            }
            wrap_cols_ = cols;
            cell_lon_ = 360.0 / static_cast<double>(cols);
        }
        cells_.reserve(points_.size());
        for (std::size_t i = 0; i < points_.size(); ++i) {
            cells_[key_of(points_[i])].push_back(static_cast<std::uint32_t>(i));
        }
    }

    /// Indices (ascending) of all indexed points within eps of `q`.
    std::vector<std::size_t> query(const GeoPoint& q) const
    {
        std::vector<std::size_t> out;
        const CellKey k = key_of(q);
        std::int64_t cols[3] = {k.col - 1, k.col, k.col + 1};
        std::size_t ncols = 3;
        if (wrap_cols_ > 0) {
            for (auto& c : cols) {
                c = ((c % wrap_cols_) + wrap_cols_) % wrap_cols_;
            }
            std::sort(cols, cols + 3);
            ncols = static_cast<std::size_t>(std::unique(cols, cols + 3) - cols);
        }
        for (std::int64_t dr = -1; dr <= 1; ++dr) {
            for (std::size_t ci = 0; ci < ncols; ++ci) {
                const auto it = cells_.find(CellKey{k.row + dr, cols[ci]});
                if (it == cells_.end()) {
                    continue;
                }
                for (const auto idx : it->second) {
                    if (within_eps(q, points_[idx], params_)) {
                        out.push_back(idx);
                    }
                }
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<std::size_t> query_index(std::size_t i) const { return query(points_[i]); }

private:
    struct CellKey {
        std::int64_t row;
        std::int64_t col;
        friend bool operator==(const CellKey&, const CellKey&) = default;
    };
    struct CellHash {
        std::size_t operator()(const CellKey& k) const noexcept
        {
            const auto h = static_cast<std::uint64_t>(k.row) * 0x9E3779B97F4A7C15ULL ^
                           (static_cast<std::uint64_t>(k.col) + 0x7F4A7C159E3779B9ULL);
            return static_cast<std::size_t>(h ^ (h >> 29));
        }
    };

    CellKey key_of(const GeoPoint& p) const noexcept
    {
        const auto row = static_cast<std::int64_t>(std::floor(p.lat / cell_lat_));
        auto col = static_cast<std::int64_t>(std::floor(wrap_cols_ > 0 ? (p.lon + 180.0) / cell_lon_ : p.lon / cell_lon_));
        if (wrap_cols_ > 0) {
            col = ((col % wrap_cols_) + wrap_cols_) % wrap_cols_;
        }
        return {row, col};
    }

    std::span<const GeoPoint> points_;
    DbscanParams params_;
    double cell_lat_ = 0.0;
    double cell_lon_ = 0.0;
    std::int64_t wrap_cols_ = 0;
    std::unordered_map<CellKey, std::vector<std::uint32_t>, CellHash> cells_;
};

inline NeighborIndex build_grid_index(std::span<const GeoPoint> points, const DbscanParams& params)
{
    return NeighborIndex(points, params);
}

/// Classic DBSCAN over a grid index.
///
/// Core points have at least `min_samples` points (themselves included) in
/// their closed eps-ball. Points are scanned in input order and each new
/// cluster is expanded breadth-first to completion, so a border point
/// reachable from several clusters joins the first one discovered and cluster
/// ids follow discovery order.
inline std::vector<ClusterLabel> dbscan(std::span<const GeoPoint> points, const DbscanParams& params)
{
    params.validate();
    constexpr std::int32_t kUnvisited = -2;
    constexpr std::int32_t kNoise = -1;
    const std::size_t n = points.size();
    std::vector<std::int32_t> label(n, kUnvisited);
    if (n == 0) {
        return {};
    }
    const NeighborIndex index(points, params);
    std::int32_t next_id = 0;
    std::vector<std::size_t> queue;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != kUnvisited) {
            continue;
        }
        const auto seeds = index.query_index(i);
        if (seeds.size() < params.min_samples) {
            label[i] = kNoise;
            continue;
        }
        const std::int32_t id = next_id++;
        label[i] = id;
        queue.assign(seeds.begin(), seeds.end());
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const std::size_t q = queue[head];
            if (label[q] == kNoise) {
                label[q] = id; // border point, already known not to be core
                continue;
            }
            if (label[q] != kUnvisited) {
                continue;
            }
            label[q] = id;
            const auto nb = index.query_index(q);
            if (nb.size() >= params.min_samples) {
                queue.insert(queue.end(), nb.begin(), nb.end());
            }
        }
    }
    std::vector<ClusterLabel> out;
    out.reserve(n);
    for (const auto v : label) {
        out.push_back(v < 0 ? ClusterLabel::noise() : ClusterLabel::cluster(v));
    }
    return out;
}

/// O(n^2) DBSCAN used as a test oracle.
///
/// Computes the full adjacency matrix, takes connected components of core
/// points ordered by their lowest core index, and attaches each non-core point
/// to the lowest-numbered component among its core neighbours. This yields
/// the same labels as the scan-order rule in `dbscan` without sharing its code.
inline std::vector<ClusterLabel> dbscan_reference(std::span<const GeoPoint> points, const DbscanParams& params)
{
    params.validate();
    const std::size_t n = points.size();
    std::vector<char> adj(n * n, 0);
    std::vector<std::size_t> degree(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (within_eps(points[i], points[j], params)) {
                adj[i * n + j] = 1;
                ++degree[i];
            }
        }
    }
    std::vector<char> core(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        core[i] = degree[i] >= params.min_samples;
    }

    std::vector<std::int32_t> comp(n, -1);
    std::int32_t components = 0;
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < n; ++i) {
        if (!core[i] || comp[i] >= 0) {
            continue;
        }
        const std::int32_t c = components++;
        comp[i] = c;
        stack.assign(1, i);
        while (!stack.empty()) {
            const std::size_t u = stack.back();
            stack.pop_back();
            for (std::size_t v = 0; v < n; ++v) {
                if (adj[u * n + v] && core[v] && comp[v] < 0) {
                    comp[v] = c;
                    stack.push_back(v);
                }
            }
        }
    }

    std::vector<ClusterLabel> out(n, ClusterLabel::noise());
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) {
            out[i] = ClusterLabel::cluster(comp[i]);
            continue;
        }
        std::int32_t best = -1;
        for (std::size_t j = 0; j < n; ++j) {
            if (adj[i * n + j] && core[j] && (best < 0 || comp[j] < best)) {
                best = comp[j];
            }
        }
        if (best >= 0) {
            out[i] = ClusterLabel::cluster(best);
        }
    }
    return out;
}

struct ClusterSummary {
    std::int32_t id = 0;
    std::size_t count = 0;
    GeoPoint centroid;
    double radius_m = 0.0;
};

/// Centroid (planar mean in `frame`, unprojected) and max member distance per cluster.
inline std::vector<ClusterSummary> summarize_clusters(std::span<const GeoPoint> points,
                                                      std::span<const ClusterLabel> labels,
                                                      const geo::LocalFrame& frame)
{
    if (points.size() != labels.size()) {
        throw ArgumentError(
            fmt::format("summarize_clusters: {} points but {} labels", points.size(), labels.size()));
    }
    std::int32_t k = 0;
    for (const auto l : labels) {
        k = std::max(k, l.id() + 1);
    }
    struct Acc {
        std::size_t count = 0;
        double sx = 0.0, sy = 0.0;
    };
    std::vector<Acc> acc(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (labels[i].is_noise()) {
            continue;
        }
        auto& a = acc[static_cast<std::size_t>(labels[i].id())];
        const auto xy = frame.project(points[i]);
        ++a.count;
        a.sx += xy.x;
        a.sy += xy.y;
    }
    std::vector<ClusterSummary> out;
    std::vector<std::size_t> slot(acc.size(), 0);
    for (std::size_t c = 0; c < acc.size(); ++c) {
        if (acc[c].count == 0) {
            continue;
        }
        const double n = static_cast<double>(acc[c].count);
        slot[c] = out.size();
        out.push_back({static_cast<std::int32_t>(c), acc[c].count, frame.unproject({acc[c].sx / n, acc[c].sy / n}), 0.0});
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (labels[i].is_noise()) {
            continue;
        }
        auto& s = out[slot[static_cast<std::size_t>(labels[i].id())]];
        s.radius_m = std::max(s.radius_m, geo::haversine_distance(points[i], s.centroid));
    }
    return out;
}

/// One cluster-summary NDJSON record (no trailing newline).
inline std::string format_summary_line(Timestamp frame_ts, const ClusterSummary& s)
{
    return fmt::format(
        "{{\"frame_ts\":\"{}\",\"cluster\":{},\"count\":{},\"centroid_lat\":{:.7f},\"centroid_lon\":{:.7f},"
        "\"radius_m\":{:.3f}}}",
        format_iso8601(frame_ts), s.id, s.count, s.centroid.lat, s.centroid.lon, s.radius_m);
}

} // namespace crowdsense::cluster
