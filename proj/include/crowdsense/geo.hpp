#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/error.hpp"

namespace crowdsense::geo {

/// Mean Earth radius of the spherical model, in meters.
inline constexpr double kEarthRadiusM = 6'371'000.0;

/// Meters per degree of latitude on the sphere (pi * R / 180).
inline constexpr double kMetersPerDegLat = std::numbers::pi * kEarthRadiusM / 180.0;

/// Coordinates are stored and serialized with this many fractional digits.
inline constexpr int kDegreeDigits = 7;

struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;

    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

inline bool is_valid_lat(double lat) noexcept { return std::isfinite(lat) && lat >= -90.0 && lat <= 90.0; }
inline bool is_valid_lon(double lon) noexcept { return std::isfinite(lon) && lon >= -180.0 && lon <= 180.0; }
inline bool is_valid(const GeoPoint& p) noexcept { return is_valid_lat(p.lat) && is_valid_lon(p.lon); }

/// Snap a coordinate onto the 1e-7 degree lattice used by every persisted format.
///
/// The result is the double nearest to k / 1e7 for an integer k, which is
/// exactly what parsing its 7-digit decimal rendering produces, so quantized
/// values survive a text round trip bit-for-bit.
inline double quantize_degrees(double deg) noexcept
{
    return std::round(deg * 1e7) / 1e7;
}

inline GeoPoint quantize(const GeoPoint& p) noexcept { return {quantize_degrees(p.lat), quantize_degrees(p.lon)}; }

struct BoundingBox {
    double min_lat = 0.0;
    double max_lat = 0.0;
    double min_lon = 0.0;
    double max_lon = 0.0;

    bool contains(const GeoPoint& p) const noexcept
    {
        return p.lat >= min_lat && p.lat <= max_lat && p.lon >= min_lon && p.lon <= max_lon;
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Great-circle distance on the R = 6,371 km sphere.
inline double haversine_distance(const GeoPoint& a, const GeoPoint& b) noexcept
{
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (b.lat - a.lat) * rad;
    const double dlon = (b.lon - a.lon) * rad;
    const double s1 = std::sin(dlat / 2.0);
    const double s2 = std::sin(dlon / 2.0);
    const double h = s1 * s1 + std::cos(a.lat * rad) * std::cos(b.lat * rad) * s2 * s2;
    return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(h)));
}

/// Equirectangular tangent frame. Accurate to well under 0.1% over a few km.
class LocalFrame {
public:
    struct Xy {
        double x = 0.0; // meters east
        double y = 0.0; // meters north
    };

    LocalFrame() : LocalFrame(GeoPoint{}) {}

    explicit LocalFrame(const GeoPoint& origin)
        : origin_(origin), m_per_deg_lat_(kMetersPerDegLat),
          m_per_deg_lon_(kMetersPerDegLat * std::cos(origin.lat * std::numbers::pi / 180.0))
    {
        if (!is_valid(origin) || std::abs(origin.lat) >= 90.0) {
            throw ArgumentError(fmt::format("local frame origin ({}, {}) must be a valid non-polar point",
                                            origin.lat, origin.lon));
        }
    }

    const GeoPoint& origin() const noexcept { return origin_; }
    double meters_per_deg_lat() const noexcept { return m_per_deg_lat_; }
    double meters_per_deg_lon() const noexcept { return m_per_deg_lon_; }

    Xy project(const GeoPoint& p) const noexcept
    {
        return {(p.lon - origin_.lon) * m_per_deg_lon_, (p.lat - origin_.lat) * m_per_deg_lat_};
    }

    GeoPoint unproject(const Xy& xy) const noexcept
    {
        return {origin_.lat + xy.y / m_per_deg_lat_, origin_.lon + xy.x / m_per_deg_lon_};
    }

private:
    GeoPoint origin_;
    double m_per_deg_lat_;
    double m_per_deg_lon_;
};

inline LocalFrame::Xy project(const LocalFrame& frame, const GeoPoint& p) noexcept { return frame.project(p); }
inline GeoPoint unproject(const LocalFrame& frame, const LocalFrame::Xy& xy) noexcept { return frame.unproject(xy); }

namespace detail {

// Sign of the cross product (b - a) x (c - a) in the lon/lat plane.
inline double orient(const GeoPoint& a, const GeoPoint& b, const GeoPoint& c) noexcept
{
    return (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon);
}

inline bool within_span(const GeoPoint& a, const GeoPoint& b, const GeoPoint& p) noexcept
{
    return p.lon >= std::min(a.lon, b.lon) && p.lon <= std::max(a.lon, b.lon) && p.lat >= std::min(a.lat, b.lat) &&
           p.lat <= std::max(a.lat, b.lat);
}

inline bool on_segment(const GeoPoint& a, const GeoPoint& b, const GeoPoint& p) noexcept
{
    return orient(a, b, p) == 0.0 && within_span(a, b, p);
}

inline int sign(double v) noexcept { return (v > 0.0) - (v < 0.0); }

inline bool segments_intersect(const GeoPoint& p1, const GeoPoint& p2, const GeoPoint& q1, const GeoPoint& q2) noexcept
{
    const int d1 = sign(orient(q1, q2, p1));
    const int d2 = sign(orient(q1, q2, p2));
    const int d3 = sign(orient(p1, p2, q1));
    const int d4 = sign(orient(p1, p2, q2));
    if (d1 * d2 < 0 && d3 * d4 < 0) {
        return true;
    }
    return (d1 == 0 && within_span(q1, q2, p1)) || (d2 == 0 && within_span(q1, q2, p2)) ||
           (d3 == 0 && within_span(p1, p2, q1)) || (d4 == 0 && within_span(p1, p2, q2));
}

} // namespace detail

/// Simple (non-self-intersecting) polygon in the lon/lat plane, implicitly closed.
class Polygon {
public:
    explicit Polygon(std::vector<GeoPoint> vertices) : vertices_(std::move(vertices)) { validate(); }

    std::span<const GeoPoint> vertices() const noexcept { return vertices_; }
    std::size_t size() const noexcept { return vertices_.size(); }

    /// Signed shoelace area in square degrees (positive when counter-clockwise).
    double signed_area_deg2() const noexcept
    {
        double acc = 0.0;
        for (std::size_t i = 0, j = vertices_.size() - 1; i < vertices_.size(); j = i++) {
            acc += vertices_[j].lon * vertices_[i].lat - vertices_[i].lon * vertices_[j].lat;
        }
        return acc / 2.0;
    }

    /// Area centroid in the lon/lat plane.
    GeoPoint centroid() const noexcept
    {
        // Shift to the first vertex to keep the products well conditioned.
        const GeoPoint o = vertices_.front();
        double a = 0.0, cx = 0.0, cy = 0.0;
        for (std::size_t i = 0, j = vertices_.size() - 1; i < vertices_.size(); j = i++) {
            const double xj = vertices_[j].lon - o.lon, yj = vertices_[j].lat - o.lat;
            const double xi = vertices_[i].lon - o.lon, yi = vertices_[i].lat - o.lat;
            const double cross = xj * yi - xi * yj;
            a += cross;
            cx += (xj + xi) * cross;
            cy += (yj + yi) * cross;
        }
        return {o.lat + cy / (3.0 * a), o.lon + cx / (3.0 * a)};
    }

private:
    void validate() const
    {
        const std::size_t n = vertices_.size();
        if (n < 3) {
            throw ArgumentError(fmt::format("polygon needs at least 3 vertices, got {}", n));
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!is_valid(vertices_[i])) {
                throw ArgumentError(fmt::format("polygon vertex {} ({}, {}) is not a valid coordinate", i,
                                                vertices_[i].lat, vertices_[i].lon));
            }
            if (vertices_[i] == vertices_[(i + 1) % n]) {
                throw ArgumentError(fmt::format("polygon vertices {} and {} are identical", i, (i + 1) % n));
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            const GeoPoint& a = vertices_[i];
            const GeoPoint& b = vertices_[(i + 1) % n];
            // Adjacent edge folding back over this one.
            const GeoPoint& c = vertices_[(i + 2) % n];
            if (detail::orient(a, b, c) == 0.0 &&
                (b.lon - a.lon) * (c.lon - b.lon) + (b.lat - a.lat) * (c.lat - b.lat) < 0.0) {
                throw ArgumentError(fmt::format("polygon edges at vertex {} overlap", (i + 1) % n));
            }
            for (std::size_t k = i + 2; k < n; ++k) {
                if (i == 0 && k == n - 1) {
                    continue; // adjacent through the closing edge
                }
                if (detail::segments_intersect(a, b, vertices_[k], vertices_[(k + 1) % n])) {
                    throw ArgumentError(fmt::format("polygon is self-intersecting (edges {} and {})", i, k));
                }
            }
        }
        if (signed_area_deg2() == 0.0) {
            throw ArgumentError("polygon has zero area");
        }
    }

    std::vector<GeoPoint> vertices_;
};

/// Even-odd containment; points on an edge or vertex count as inside.
inline bool point_in_polygon(const Polygon& poly, const GeoPoint& p) noexcept
{
    const auto v = poly.vertices();
    bool inside = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        if (detail::on_segment(v[j], v[i], p)) {
            return true;
        }
        if ((v[i].lat > p.lat) != (v[j].lat > p.lat) &&
            p.lon < (v[j].lon - v[i].lon) * (p.lat - v[i].lat) / (v[j].lat - v[i].lat) + v[i].lon) {
            inside = !inside;
        }
    }
    return inside;
}

inline BoundingBox polygon_bbox(const Polygon& poly) noexcept
{
    const auto v = poly.vertices();
    BoundingBox box{v[0].lat, v[0].lat, v[0].lon, v[0].lon};
    for (const auto& p : v) {
        box.min_lat = std::min(box.min_lat, p.lat);
        box.max_lat = std::max(box.max_lat, p.lat);
        box.min_lon = std::min(box.min_lon, p.lon);
        box.max_lon = std::max(box.max_lon, p.lon);
    }
    return box;
}

/// Equirectangular frame anchored at the polygon's area centroid.
inline LocalFrame frame_for(const Polygon& poly) { return LocalFrame(poly.centroid()); }

/// Parse a campus boundary: one `lat,lon` pair per line, `#` starts a comment.
inline Polygon parse_polygon(std::string_view text, std::string_view source = "<polygon>")
{
    std::vector<GeoPoint> vertices;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        const auto trim = [](std::string_view s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string_view::npos) {
                return std::string_view{};
            }
            return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
        };
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string_view::npos) {
            throw ArgumentError(fmt::format("{}:{}: expected `lat,lon`", source, line_no));
        }
        const auto parse = [&](std::string_view field, const char* name) {
            field = trim(field);
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (ec != std::errc{} || ptr != field.data() + field.size()) {
                throw ArgumentError(fmt::format("{}:{}: bad {} `{}`", source, line_no, name, field));
            }
            return v;
        };
        vertices.push_back({parse(line.substr(0, comma), "latitude"), parse(line.substr(comma + 1), "longitude")});
    }
    try {
        return Polygon(std::move(vertices));
    } catch (const ArgumentError& e) {
        throw ArgumentError(fmt::format("{}: {}", source, e.what()));
    }
}

inline Polygon read_polygon(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open campus boundary `{}`", path));
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_polygon(text, path);
}

/// Built-in campus fixture: a rectangle with a notch cut from its north-east
/// corner, centred near Puno (-15.84, -70.02). Its extent (~11 x 10 km) is what
/// lets eps = 0.0007 deg separate agglomerations among ~9,000 uniform people.
inline constexpr std::string_view kDefaultCampus = R"(# default campus boundary (lat,lon), counter-clockwise
-15.8850,-70.0720
-15.8850,-69.9690
-15.8120,-69.9690
-15.8120,-69.9880
-15.7950,-69.9880
-15.7950,-70.0720
)";

inline Polygon default_campus() { return parse_polygon(kDefaultCampus, "<default campus>"); }

} // namespace crowdsense::geo
