// crowdsense: simulate, cluster, heatmap, alerts, serve, replay, snapshot, pipeline.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage error.

#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "crowdsense/alerts.hpp"
#include "crowdsense/clustering.hpp"
#include "crowdsense/density.hpp"
#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/ingest.hpp"
#include "crowdsense/model.hpp"
#include "crowdsense/pipeline.hpp"
#include "crowdsense/replay.hpp"
#include "crowdsense/simulator.hpp"

namespace {

using namespace crowdsense;
namespace fs = std::filesystem;

constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

Millis seconds_to_ms(double s) { return Millis{static_cast<Millis::rep>(std::llround(s * 1000.0))}; }

geo::Polygon load_campus(const std::string& path) { return path.empty() ? geo::default_campus() : geo::read_polygon(path); }

// --- shared option groups -------------------------------------------------

struct ScenarioFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> population;
    std::optional<double> duration;
    std::optional<double> tick;
    std::optional<double> walk_sigma;
    std::optional<std::string> epoch;
    std::optional<std::string> campus;
    std::vector<std::string> hotspots;

    void add(CLI::App& app)
    {
        app.add_option("--config", config, "Scenario config file (key = value lines, hotspot { ... } blocks)")
            ->check(CLI::ExistingFile);
        app.add_option("--seed", seed, "RNG seed [artifact default 42]");
        app.add_option("--population", population, "Simulated people [published setting 9000]")
            ->check(CLI::NonNegativeNumber);
        app.add_option("--duration", duration, "Scenario length in seconds [artifact default 0]")
            ->check(CLI::NonNegativeNumber);
        app.add_option("--tick", tick, "Seconds between report rounds [artifact default 60]")
            ->check(CLI::PositiveNumber);
        app.add_option("--walk-sigma", walk_sigma, "Random-walk step std-dev, meters per tick [artifact default 5]")
            ->check(CLI::NonNegativeNumber);
        app.add_option("--epoch", epoch, "Scenario start, ISO-8601 UTC [artifact default 2024-05-01T14:30:00.000Z]");
        app.add_option("--campus", campus, "Campus boundary file, `lat,lon` per line [built-in fixture]");
        app.add_option("--hotspot", hotspots,
                       "Injected crowd `lat,lon,sigma_m,count[,start_s,end_s]` (repeatable)");
    }

    sim::ScenarioConfig build() const
    {
        sim::ScenarioConfig cfg = config.empty() ? sim::ScenarioConfig{} : sim::read_scenario(config);
        if (seed) {
            cfg.seed = *seed;
        }
        if (population) {
            cfg.population = static_cast<std::size_t>(*population);
        }
        if (duration) {
            cfg.duration = seconds_to_ms(*duration);
        }
        if (tick) {
            cfg.tick = seconds_to_ms(*tick);
        }
        if (walk_sigma) {
            cfg.walk_step_sigma = *walk_sigma;
        }
        if (epoch) {
            sim::apply_setting(cfg, "epoch", *epoch);
        }
        if (campus) {
            cfg.campus = geo::read_polygon(*campus);
        }
        for (const auto& spec : hotspots) {
            std::vector<double> v;
            std::size_t pos = 0;
            while (pos <= spec.size()) {
                const auto comma = spec.find(',', pos);
                const auto field = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                v.push_back(std::stod(field));
                if (comma == std::string::npos) {
                    break;
                }
                pos = comma + 1;
            }
            if (v.size() != 4 && v.size() != 6) {
                throw ArgumentError(fmt::format("--hotspot `{}`: expected lat,lon,sigma_m,count[,start_s,end_s]", spec));
            }
            if (v[3] < 0) {
                throw ArgumentError(fmt::format("--hotspot `{}`: negative count", spec));
            }
            sim::Hotspot h;
            h.center = {v[0], v[1]};
            h.sigma_m = v[2];
            h.count = static_cast<std::size_t>(v[3]);
            if (v.size() == 6) {
                h.start = cfg.epoch + seconds_to_ms(v[4]);
                h.end = cfg.epoch + seconds_to_ms(v[5]);
            }
            cfg.hotspots.push_back(h);
        }
        cfg.validate();
        return cfg;
    }
};

struct AnalysisFlags {
    std::optional<double> eps;
    std::size_t min_samples = cluster::kDefaultMinSamples;
    std::string metric = "degrees";
    double cell = density::kDefaultCellSizeM;
    double sigma = 0.0;
    alerts::AlertThresholds thresholds;

    void add_clustering(CLI::App& app)
    {
        app.add_option("--eps", eps,
                       "DBSCAN radius: degrees [published setting 0.0007] or meters with --metric haversine "
                       "[artifact default 75]")
            ->check(CLI::PositiveNumber);
        app.add_option("--min-samples", min_samples, "DBSCAN core threshold, self included [published setting 4]")
            ->check(CLI::Range(std::size_t{1}, std::numeric_limits<std::size_t>::max()));
        app.add_option("--metric", metric, "degrees | haversine [artifact default degrees]")
            ->check(CLI::IsMember({"degrees", "haversine"}));
    }

    void add_grid(CLI::App& app)
    {
        app.add_option("--cell", cell, "Heat-map cell edge in meters [artifact default 10]")->check(CLI::PositiveNumber);
        app.add_option("--sigma", sigma, "Gaussian smoothing in cells, 0 = raw counts [artifact default 0]")
            ->check(CLI::NonNegativeNumber);
    }

    void add_thresholds(CLI::App& app)
    {
        app.add_option("--min-cluster-count", thresholds.min_cluster_count,
                       "People for a cluster alert [artifact default 50]")
            ->check(CLI::Range(std::size_t{1}, std::numeric_limits<std::size_t>::max()));
        app.add_option("--max-radius", thresholds.max_radius_m, "Max cluster radius for an alert, m [artifact default 30]")
            ->check(CLI::PositiveNumber);
        app.add_option("--cell-crit", thresholds.cell_density_crit, "People per cell for a cell alert [artifact default 25]")
            ->check(CLI::Range(1.0, std::numeric_limits<double>::max()));
        app.add_option("--exit-ratio", thresholds.exit_ratio, "Hysteresis release fraction [artifact default 0.8]")
            ->check(CLI::Range(1e-12, 1.0));
    }

    pipeline::AnalysisParams build() const
    {
        pipeline::AnalysisParams p;
        p.dbscan.metric = cluster::parse_metric(metric);
        p.dbscan.eps = eps.value_or(p.dbscan.metric == cluster::Metric::DegreeEuclidean ? cluster::kDefaultEpsDegrees
                                                                                      : cluster::kDefaultEpsMeters);
        p.dbscan.min_samples = min_samples;
        p.cell_size_m = cell;
        p.sigma_cells = sigma;
        p.thresholds = thresholds;
        p.validate();
        return p;
    }
};

struct WindowFlags {
    double window = 60.0;
    std::optional<double> step;

    void add(CLI::App& app, const char* help = "Frame window in seconds [artifact default 60]")
    {
        app.add_option("--window", window, help)->check(CLI::PositiveNumber);
        app.add_option("--step", step, "Frame step in seconds [default: window]")->check(CLI::PositiveNumber);
    }

    std::vector<model::Frame> frames(const model::Dataset& ds) const
    {
        return model::window_frames(ds, seconds_to_ms(window), seconds_to_ms(step.value_or(window)));
    }
};

struct InputFlags {
    std::string path;
    std::string format = "auto";
    bool skip_bad = false;

    void add(CLI::App& app)
    {
        app.add_option("--in", path, "Input dataset (.ndjson or .csv)")->required();
        app.add_option("--format", format, "ndjson | csv | auto [by extension]")
            ->check(CLI::IsMember({"ndjson", "csv", "auto"}));
        app.add_flag("--skip-bad-lines", skip_bad, "Skip and count malformed lines instead of failing");
    }

    model::Dataset load() const
    {
        auto result = model::load_dataset(path, model::ReadOptions{model::parse_format(format), !skip_bad});
        if (result.skipped_lines > 0) {
            std::cerr << fmt::format("skipped {} bad line(s)\n", result.skipped_lines);
            for (const auto& msg : result.skipped) {
                std::cerr << "  " << msg << '\n';
            }
        }
        return std::move(result.dataset);
    }
};

std::ofstream open_out(const std::string& path)
{
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    return pipeline::open_output(path);
}

// --- serve signal handling ------------------------------------------------

sigset_t block_termination_signals()
{
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    return set;
}

std::string read_salt(const std::string& path)
{
    if (path.empty()) {
        std::random_device rd;
        std::string salt;
        for (int i = 0; i < 32; ++i) {
            salt += static_cast<char>(rd() & 0xFF);
        }
        return salt;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open salt file `{}`", path));
    }
    std::string salt((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!salt.empty() && salt.back() == '\n') {
        salt.pop_back();
    }
    if (salt.empty()) {
        throw ArgumentError(fmt::format("salt file `{}` is empty", path));
    }
    return salt;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Crowd detection from mobile location reports: simulation, DBSCAN clustering, heat maps, "
                 "alerts and a streaming ingest server."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic report dataset");
    ScenarioFlags sim_flags;
    sim_flags.add(*simulate);
    std::string sim_out;
    std::string sim_format = "auto";
    simulate->add_option("--out", sim_out, "Output dataset path")->required();
    simulate->add_option("--format", sim_format, "ndjson | csv | auto [by extension]")
        ->check(CLI::IsMember({"ndjson", "csv", "auto"}));

    // cluster
    auto* cluster_cmd = app.add_subcommand("cluster", "DBSCAN each frame and write cluster summaries");
    InputFlags cl_in;
    cl_in.add(*cluster_cmd);
    AnalysisFlags cl_an;
    cl_an.add_clustering(*cluster_cmd);
    WindowFlags cl_win;
    cl_win.add(*cluster_cmd);
    std::string cl_out, cl_labels, cl_campus;
    cluster_cmd->add_option("--out", cl_out, "Cluster summaries (NDJSON)")->required();
    cluster_cmd->add_option("--labels", cl_labels, "Also write per-point labels (CSV)");
    cluster_cmd->add_option("--campus", cl_campus, "Campus boundary file [built-in fixture]");

    // heatmap
    auto* heatmap = app.add_subcommand("heatmap", "Write density grids (CSV, PGM, sidecar) per frame");
    InputFlags hm_in;
    hm_in.add(*heatmap);
    AnalysisFlags hm_an;
    hm_an.add_grid(*heatmap);
    std::optional<double> hm_window;
    std::optional<double> hm_step;
    std::string hm_out, hm_campus;
    heatmap->add_option("--window", hm_window, "Frame window in seconds [default: one frame for the whole dataset]")
        ->check(CLI::PositiveNumber);
    heatmap->add_option("--step", hm_step, "Frame step in seconds [default: window]")->check(CLI::PositiveNumber);
    heatmap->add_option("--out-dir", hm_out, "Directory for frame_NNNN.{csv,pgm,txt}")->required();
    heatmap->add_option("--campus", hm_campus, "Campus boundary file [built-in fixture]");

    // alerts
    auto* alerts_cmd = app.add_subcommand("alerts", "Run the crowding alert engine over every frame");
    InputFlags al_in;
    al_in.add(*alerts_cmd);
    AnalysisFlags al_an;
    al_an.add_clustering(*alerts_cmd);
    al_an.add_grid(*alerts_cmd);
    al_an.add_thresholds(*alerts_cmd);
    WindowFlags al_win;
    al_win.add(*alerts_cmd);
    std::string al_out, al_campus;
    alerts_cmd->add_option("--out", al_out, "Alert log (NDJSON)")->required();
    alerts_cmd->add_option("--campus", al_campus, "Campus boundary file [built-in fixture]");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the ingest and snapshot servers until SIGINT/SIGTERM");
    std::string sv_listen = "127.0.0.1:7400", sv_snapshot = "127.0.0.1:7401", sv_salt, sv_campus;
    std::string sv_summaries, sv_alerts;
    double sv_window = 60.0;
    bool sv_reject = false;
    AnalysisFlags sv_an;
    sv_an.add_clustering(*serve);
    sv_an.add_grid(*serve);
    sv_an.add_thresholds(*serve);
    serve->add_option("--listen", sv_listen, "Ingest address host:port (port 0 = ephemeral)");
    serve->add_option("--snapshot-listen", sv_snapshot, "Snapshot address host:port (port 0 = ephemeral)");
    serve->add_option("--window", sv_window, "Frame window in seconds, server receive clock [artifact default 60]")
        ->check(CLI::PositiveNumber);
    serve->add_option("--salt-file", sv_salt, "Anonymization salt [default: random per process]");
    serve->add_option("--campus", sv_campus, "Campus boundary file [built-in fixture]");
    serve->add_flag("--reject-outside", sv_reject, "Reject reports outside the campus polygon");
    serve->add_option("--summaries-out", sv_summaries, "Append cluster summaries per closed frame (NDJSON)");
    serve->add_option("--alerts-out", sv_alerts, "Append alert events per closed frame (NDJSON)");

    // replay
    auto* replay_cmd = app.add_subcommand("replay", "Stream a dataset to a running ingest server");
    InputFlags rp_in;
    rp_in.add(*replay_cmd);
    replay::ReplayOptions rp_opts;
    std::string rp_stats;
    replay_cmd->add_option("--target", rp_opts.target, "Ingest server host:port");
    replay_cmd->add_option("--speed", rp_opts.speed, "Playback speed multiple; 0 = flat out [artifact default 0]")
        ->check(CLI::NonNegativeNumber);
    replay_cmd->add_option("--connections", rp_opts.connections, "Concurrent connections [artifact default 1]")
        ->check(CLI::Range(std::size_t{1}, std::size_t{4096}));
    replay_cmd->add_option("--batch", rp_opts.batch, "Lines per acknowledgement round trip [artifact default 256]")
        ->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
    replay_cmd->add_option("--stats-json", rp_stats, "Write replay accounting as JSON");

    // snapshot
    auto* snapshot_cmd = app.add_subcommand("snapshot", "Fetch the latest snapshot document from a server");
    std::string sn_target = "127.0.0.1:7401";
    snapshot_cmd->add_option("--target", sn_target, "Snapshot server host:port");

    // pipeline
    auto* pipeline_cmd = app.add_subcommand("pipeline", "Simulate, cluster, grid and alert in one run");
    ScenarioFlags pl_sim;
    pl_sim.add(*pipeline_cmd);
    AnalysisFlags pl_an;
    pl_an.add_clustering(*pipeline_cmd);
    pl_an.add_grid(*pipeline_cmd);
    pl_an.add_thresholds(*pipeline_cmd);
    WindowFlags pl_win;
    pl_win.add(*pipeline_cmd);
    std::string pl_out;
    pipeline_cmd->add_option("--out-dir", pl_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (simulate->parsed()) {
            const auto cfg = sim_flags.build();
            const auto ds = sim::run_scenario(cfg);
            if (const auto parent = fs::path(sim_out).parent_path(); !parent.empty()) {
                fs::create_directories(parent);
            }
            model::write_dataset(ds, sim_out, model::parse_format(sim_format));
            std::cout << fmt::format("wrote {} reports (seed {}) to {}\n", ds.size(), cfg.seed, sim_out);
        } else if (cluster_cmd->parsed()) {
            const auto params = cl_an.build();
            const auto campus = load_campus(cl_campus);
            const auto ds = cl_in.load();
            const auto analyses = pipeline::analyze_frames(cl_win.frames(ds), params, campus);
            auto out = open_out(cl_out);
            pipeline::write_summaries(out, analyses);
            if (!cl_labels.empty()) {
                auto labels = open_out(cl_labels);
                pipeline::write_labels(labels, analyses);
            }
            std::size_t clusters = 0;
            for (const auto& f : analyses) {
                clusters += f.summaries.size();
            }
            std::cout << fmt::format("{} frame(s), {} cluster(s), eps={} min_samples={} metric={}\n", analyses.size(),
                                     clusters, params.dbscan.eps, params.dbscan.min_samples,
                                     cluster::metric_name(params.dbscan.metric));
        } else if (heatmap->parsed()) {
            const auto params = hm_an.build();
            const auto campus = load_campus(hm_campus);
            const auto ds = hm_in.load();
            std::vector<model::Frame> frames;
            if (hm_window) {
                frames = model::window_frames(ds, seconds_to_ms(*hm_window), seconds_to_ms(hm_step.value_or(*hm_window)));
            }
            if (frames.empty()) {
                frames.push_back(model::whole_dataset_frame(ds));
            }
            const auto analyses = pipeline::analyze_frames(std::move(frames), params, campus);
            pipeline::write_heatmaps(analyses, params.sigma_cells, hm_out);
            std::cout << fmt::format("wrote {} grid(s) to {}\n", analyses.size(), hm_out);
        } else if (alerts_cmd->parsed()) {
            const auto params = al_an.build();
            const auto campus = load_campus(al_campus);
            const auto ds = al_in.load();
            const auto analyses = pipeline::analyze_frames(al_win.frames(ds), params, campus);
            const auto log = pipeline::run_alerts(analyses, params.thresholds);
            auto out = open_out(al_out);
            pipeline::write_alerts(out, log);
            std::cout << fmt::format("{} frame(s), {} alert event(s)\n", analyses.size(), log.size());
        } else if (serve->parsed()) {
            const sigset_t signals = block_termination_signals();
            ingest::IngestConfig cfg;
            cfg.listen_address = sv_listen;
            cfg.snapshot_address = sv_snapshot;
            cfg.frame_window = seconds_to_ms(sv_window);
            cfg.anonymization_salt = read_salt(sv_salt);
            cfg.campus = load_campus(sv_campus);
            cfg.reject_outside = sv_reject;
            cfg.analysis = sv_an.build();
            if (!sv_summaries.empty()) {
                cfg.summaries_out = sv_summaries;
            }
            if (!sv_alerts.empty()) {
                cfg.alerts_out = sv_alerts;
            }
            ingest::IngestServer server(std::move(cfg));
            server.start();
            std::cout << fmt::format("ingest listening on port {}\nsnapshot listening on port {}\n",
                                     server.ingest_port(), server.snapshot_port())
                      << std::flush;
            int sig = 0;
            sigwait(&signals, &sig);
            server.stop();
            const auto c = server.counters();
            std::cout << fmt::format("stopped: lines={} accepted={} rejected={} outside_campus={}\n", c.lines,
                                     c.accepted, c.rejected, c.outside_campus);
        } else if (replay_cmd->parsed()) {
            const auto ds = rp_in.load();
            const auto stats = replay::replay_dataset(ds, rp_opts);
            nlohmann::ordered_json j;
            j["sent"] = stats.sent;
            j["ok"] = stats.ok;
            j["err"] = stats.err;
            j["errors"] = stats.errors;
            j["seconds"] = stats.seconds;
            j["accepted_per_second"] = stats.accepted_per_second();
            std::cout << fmt::format("sent={} ok={} err={} seconds={:.3f} accepted_per_second={:.0f}\n", stats.sent,
                                     stats.ok, stats.err, stats.seconds, stats.accepted_per_second());
            if (!rp_stats.empty()) {
                auto out = open_out(rp_stats);
                out << j.dump() << '\n';
            }
        } else if (snapshot_cmd->parsed()) {
            std::cout << replay::query_snapshot(sn_target) << '\n';
        } else if (pipeline_cmd->parsed()) {
            pipeline::PipelineRun run{pl_sim.build(), pl_an.build(), seconds_to_ms(pl_win.window),
                                      seconds_to_ms(pl_win.step.value_or(pl_win.window)), pl_out};
            const auto r = pipeline::run_pipeline(run);
            std::cout << fmt::format("seed {}: {} reports, {} frame(s), {} cluster(s), {} alert event(s) in {}\n",
                                     run.scenario.seed, r.reports, r.frames, r.clusters, r.alert_events, pl_out);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
    return 0;
}
