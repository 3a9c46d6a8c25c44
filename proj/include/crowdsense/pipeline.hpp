#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/alerts.hpp"
#include "crowdsense/clustering.hpp"
#include "crowdsense/density.hpp"
#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/model.hpp"
#include "crowdsense/simulator.hpp"

namespace crowdsense::pipeline {

/// Everything needed to turn a frame into clusters, a grid and alert input.
struct AnalysisParams {
    cluster::DbscanParams dbscan;
    double cell_size_m = density::kDefaultCellSizeM;
    /// Smoothing applied to exported grids only; alerts read the raw grid.
    double sigma_cells = 0.0;
    alerts::AlertThresholds thresholds;

    void validate() const
    {
        dbscan.validate();
        if (!(cell_size_m > 0.0)) {
            throw ArgumentError("cell size must be > 0");
        }
        if (!(sigma_cells >= 0.0)) {
            throw ArgumentError("sigma must be >= 0");
        }
        thresholds.validate();
    }
};

struct FrameAnalysis {
    Timestamp start;
    Timestamp end;
    std::vector<model::Report> points;
    std::vector<cluster::ClusterLabel> labels;
    std::vector<cluster::ClusterSummary> summaries;
    density::DensityGrid grid; ///< raw counts over the campus bbox

    alerts::FrameClusters clusters() const { return {start, summaries}; }
};

inline FrameAnalysis analyze_frame(model::Frame frame, const AnalysisParams& params, const geo::Polygon& campus)
{
    const auto positions = frame.positions();
    const auto local = geo::frame_for(campus);
    FrameAnalysis out;
    out.start = frame.start;
    out.end = frame.end;
    out.labels = cluster::dbscan(positions, params.dbscan);
    out.summaries = cluster::summarize_clusters(positions, out.labels, local);
    out.grid = density::build_density_grid(positions, geo::polygon_bbox(campus), params.cell_size_m, local);
    out.grid.frame_ts = frame.start;
    out.points = std::move(frame.points);
    return out;
}

/// Analyze frames on up to `threads` workers; results keep frame order.
inline std::vector<FrameAnalysis> analyze_frames(std::vector<model::Frame> frames, const AnalysisParams& params,
                                                 const geo::Polygon& campus, unsigned threads = 0)
{
    params.validate();
    std::vector<FrameAnalysis> out(frames.size());
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, frames.size())));
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    const auto work = [&](unsigned w) {
        try {
            for (std::size_t i = next++; i < frames.size(); i = next++) {
                out[i] = analyze_frame(std::move(frames[i]), params, campus);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back(work, w);
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

/// Run the alert engine across frames in order.
inline std::vector<alerts::Alert> run_alerts(const std::vector<FrameAnalysis>& frames,
                                             const alerts::AlertThresholds& thresholds)
{
    std::vector<alerts::Alert> log;
    alerts::AlertBook book;
    for (const auto& f : frames) {
        auto step = alerts::evaluate_frame(f.clusters(), f.grid, thresholds, book);
        log.insert(log.end(), step.events.begin(), step.events.end());
        book = std::move(step.next);
    }
    return log;
}

inline void write_summaries(std::ostream& out, const std::vector<FrameAnalysis>& frames)
{
    for (const auto& f : frames) {
        for (const auto& s : f.summaries) {
            out << cluster::format_summary_line(f.start, s) << '\n';
        }
    }
}

/// Per-point labels: the dataset CSV columns plus the frame and a `label`
/// column (-1 for noise).
inline void write_labels(std::ostream& out, const std::vector<FrameAnalysis>& frames)
{
    out << "frame_ts," << model::kCsvHeader << ",label\n";
    for (const auto& f : frames) {
        const auto frame_ts = format_iso8601(f.start);
        for (std::size_t i = 0; i < f.points.size(); ++i) {
            out << frame_ts << ',' << model::format_report_csv(f.points[i]) << ',' << f.labels[i].value() << '\n';
        }
    }
}

inline void write_alerts(std::ostream& out, const std::vector<alerts::Alert>& log)
{
    for (const auto& a : log) {
        out << alerts::format_alert_line(a) << '\n';
    }
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.txt` for a grid.
inline void write_grid_files(const density::DensityGrid& grid, const std::filesystem::path& stem)
{
    density::export_grid(grid, stem.string() + ".csv", density::ExportFormat::Csv);
    density::export_grid(grid, stem.string() + ".pgm", density::ExportFormat::Pgm);
    density::export_sidecar(grid, stem.string() + ".txt");
}

inline void write_heatmaps(const std::vector<FrameAnalysis>& frames, double sigma_cells,
                           const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        write_grid_files(density::gaussian_smooth(frames[i].grid, sigma_cells), dir / fmt::format("frame_{:04d}", i));
    }
}

inline std::ofstream open_output(const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot open `{}` for writing", path.string()));
    }
    return out;
}

struct PipelineRun {
    sim::ScenarioConfig scenario;
    AnalysisParams analysis;
    Millis window{std::chrono::seconds{60}};
    Millis step{std::chrono::seconds{60}};
    std::filesystem::path output_dir;
};

struct PipelineResult {
    std::size_t reports = 0;
    std::size_t frames = 0;
    std::size_t clusters = 0;
    std::size_t alert_events = 0;
};

/// Simulate, cluster, grid and alert in one pass. Outputs in `output_dir`:
/// dataset.ndjson, clusters.ndjson, labels.csv, alerts.ndjson, heatmaps/frame_NNNN.{csv,pgm,txt}.
inline PipelineResult run_pipeline(const PipelineRun& run)
{
    run.analysis.validate();
    std::filesystem::create_directories(run.output_dir);
    const auto ds = sim::run_scenario(run.scenario);
    model::write_dataset(ds, (run.output_dir / "dataset.ndjson").string(), model::Format::Ndjson);

    auto analyses = analyze_frames(model::window_frames(ds, run.window, run.step), run.analysis, run.scenario.campus);
    const auto log = run_alerts(analyses, run.analysis.thresholds);

    auto summaries = open_output(run.output_dir / "clusters.ndjson");
    write_summaries(summaries, analyses);
    auto labels = open_output(run.output_dir / "labels.csv");
    write_labels(labels, analyses);
    auto alert_log = open_output(run.output_dir / "alerts.ndjson");
    write_alerts(alert_log, log);
    write_heatmaps(analyses, run.analysis.sigma_cells, run.output_dir / "heatmaps");

    PipelineResult result;
    result.reports = ds.size();
    result.frames = analyses.size();
    for (const auto& f : analyses) {
        result.clusters += f.summaries.size();
    }
    result.alert_events = log.size();
    return result;
}

} // namespace crowdsense::pipeline
