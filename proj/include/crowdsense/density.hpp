#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/timestamp.hpp"

namespace crowdsense::density {

using geo::BoundingBox;
using geo::GeoPoint;

inline constexpr double kDefaultCellSizeM = 10.0;
inline constexpr unsigned kPgmMaxval = 65535;

/// Row-major cell counts over a bounding box; row 0 is the northern edge.
struct DensityGrid {
    BoundingBox bbox;
    double cell_size_m = kDefaultCellSizeM;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> counts;
    /// Points that fell outside `bbox` and were not counted.
    std::size_t dropped = 0;
    /// Frame this grid was built for, when known.
    std::optional<Timestamp> frame_ts;
    double m_per_deg_lat = geo::kMetersPerDegLat;
    double m_per_deg_lon = geo::kMetersPerDegLat;

    double at(std::size_t r, std::size_t c) const { return counts[r * cols + c]; }
    double& at(std::size_t r, std::size_t c) { return counts[r * cols + c]; }

    double total() const
    {
        double t = 0.0;
        for (const double v : counts) {
            t += v;
        }
        return t;
    }

    /// Geographic centre of a cell.
    GeoPoint cell_center(std::size_t r, std::size_t c) const
    {
        return {bbox.max_lat - (static_cast<double>(r) + 0.5) * cell_size_m / m_per_deg_lat,
                bbox.min_lon + (static_cast<double>(c) + 0.5) * cell_size_m / m_per_deg_lon};
    }

    /// Cell holding `p`, clamped on the southern and eastern edges; nullopt outside bbox.
    std::optional<std::pair<std::size_t, std::size_t>> cell_of(const GeoPoint& p) const
    {
        if (!bbox.contains(p) || rows == 0 || cols == 0) {
            return std::nullopt;
        }
        const double fy = (bbox.max_lat - p.lat) * m_per_deg_lat / cell_size_m;
        const double fx = (p.lon - bbox.min_lon) * m_per_deg_lon / cell_size_m;
        const auto r = std::min(rows - 1, static_cast<std::size_t>(std::max(0.0, std::floor(fy))));
        const auto c = std::min(cols - 1, static_cast<std::size_t>(std::max(0.0, std::floor(fx))));
        return std::pair{r, c};
    }
};

/// Empty grid with the dimensions `build_density_grid` would produce.
inline DensityGrid make_grid(const BoundingBox& bbox, double cell_size_m, const geo::LocalFrame& frame)
{
    if (!(cell_size_m > 0.0) || !std::isfinite(cell_size_m)) {
        throw ArgumentError("cell size must be > 0");
    }
    if (!(bbox.max_lat > bbox.min_lat) || !(bbox.max_lon > bbox.min_lon)) {
        throw ArgumentError("density grid bounding box is degenerate");
    }
    DensityGrid g;
    g.bbox = bbox;
    g.cell_size_m = cell_size_m;
    g.m_per_deg_lat = frame.meters_per_deg_lat();
    g.m_per_deg_lon = frame.meters_per_deg_lon();
    const double height_m = (bbox.max_lat - bbox.min_lat) * g.m_per_deg_lat;
    const double width_m = (bbox.max_lon - bbox.min_lon) * g.m_per_deg_lon;
    g.rows = static_cast<std::size_t>(std::ceil(height_m / cell_size_m));
    g.cols = static_cast<std::size_t>(std::ceil(width_m / cell_size_m));
    g.counts.assign(g.rows * g.cols, 0.0);
    return g;
}

/// Raw per-cell counts. Points outside the bbox are tallied in `dropped`.
inline DensityGrid build_density_grid(std::span<const GeoPoint> points, const BoundingBox& bbox, double cell_size_m,
                                      const geo::LocalFrame& frame)
{
    DensityGrid g = make_grid(bbox, cell_size_m, frame);
    for (const auto& p : points) {
        if (const auto cell = g.cell_of(p)) {
            g.at(cell->first, cell->second) += 1.0;
        } else {
            ++g.dropped;
        }
    }
    return g;
}

namespace detail {

// Half-sample symmetric reflection with period 2n: ... b a | a b c | c b ...
inline std::size_t reflect(std::ptrdiff_t i, std::size_t n)
{
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t m = i % period;
    if (m < 0) {
        m += period;
    }
    return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

inline std::vector<double> gaussian_kernel(double sigma)
{
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : k) {
        v /= sum;
    }
    return k;
}

} // namespace detail

/// Separable Gaussian blur, kernel truncated at 3 sigma and normalised,
/// reflective edges. The reflected operator is symmetric, so total mass is kept.
inline DensityGrid gaussian_smooth(const DensityGrid& grid, double sigma_cells)
{
    if (!(sigma_cells >= 0.0) || !std::isfinite(sigma_cells)) {
        throw ArgumentError("smoothing sigma must be >= 0");
    }
    if (sigma_cells == 0.0 || grid.counts.empty()) {
        return grid;
    }
    const auto kernel = detail::gaussian_kernel(sigma_cells);
    const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    DensityGrid tmp = grid;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
                acc += kernel[static_cast<std::size_t>(k + radius)] *
                       grid.at(r, detail::reflect(static_cast<std::ptrdiff_t>(c) + k, grid.cols));
            }
            tmp.at(r, c) = acc;
        }
    }
    DensityGrid out = tmp;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
                acc += kernel[static_cast<std::size_t>(k + radius)] *
                       tmp.at(detail::reflect(static_cast<std::ptrdiff_t>(r) + k, grid.rows), c);
            }
            out.at(r, c) = acc;
        }
    }
    return out;
}

struct CellMax {
    std::size_t row = 0;
    std::size_t col = 0;
    double value = 0.0;
};

/// First maximal cell in row-major order.
inline CellMax argmax_cell(const DensityGrid& grid)
{
    if (grid.counts.empty()) {
        throw ArgumentError("argmax of an empty grid");
    }
    const auto it = std::max_element(grid.counts.begin(), grid.counts.end());
    const auto idx = static_cast<std::size_t>(it - grid.counts.begin());
    return {idx / grid.cols, idx % grid.cols, *it};
}

enum class ExportFormat { Csv, Pgm };

namespace detail {

inline std::string format_value(double v)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

} // namespace detail

/// Comma-separated rows, row 0 first (north).
inline std::string grid_to_csv(const DensityGrid& grid)
{
    std::string out;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            if (c) {
                out += ',';
            }
            out += detail::format_value(grid.at(r, c));
        }
        out += '\n';
    }
    return out;
}

/// Plain (P2) PGM, maxval 65535, value v -> floor(v * 65535 / max).
inline std::string grid_to_pgm(const DensityGrid& grid)
{
    double max = 0.0;
    for (const double v : grid.counts) {
        max = std::max(max, v);
    }
    std::string out = fmt::format("P2\n{} {}\n{}\n", grid.cols, grid.rows, kPgmMaxval);
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            unsigned level = 0;
            if (max > 0.0) {
                level = static_cast<unsigned>(
                    std::min<double>(kPgmMaxval, std::floor(grid.at(r, c) * kPgmMaxval / max)));
            }
            if (c) {
                out += ' ';
            }
            out += std::to_string(level);
        }
        out += '\n';
    }
    return out;
}

/// Sidecar metadata: bbox, cell size, dimensions, frame timestamp, drop tally.
inline std::string grid_sidecar(const DensityGrid& grid)
{
    return fmt::format("min_lat={:.7f}\nmax_lat={:.7f}\nmin_lon={:.7f}\nmax_lon={:.7f}\ncell_size_m={}\nrows={}\ncols={}\n"
                       "frame_ts={}\ndropped={}\ntotal={}\n",
                       grid.bbox.min_lat, grid.bbox.max_lat, grid.bbox.min_lon, grid.bbox.max_lon,
                       detail::format_value(grid.cell_size_m), grid.rows, grid.cols,
                       grid.frame_ts ? format_iso8601(*grid.frame_ts) : std::string("none"), grid.dropped,
                       detail::format_value(grid.total()));
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot open `{}` for writing", path));
    }
    out << text;
    out.flush();
    if (!out) {
        throw IoError(fmt::format("write to `{}` failed", path));
    }
}

} // namespace detail

inline void export_grid(const DensityGrid& grid, const std::string& path, ExportFormat format)
{
    detail::write_text(path, format == ExportFormat::Csv ? grid_to_csv(grid) : grid_to_pgm(grid));
}

inline void export_sidecar(const DensityGrid& grid, const std::string& path)
{
    detail::write_text(path, grid_sidecar(grid));
}

} // namespace crowdsense::density
