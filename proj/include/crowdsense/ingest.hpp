#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "crowdsense/alerts.hpp"
#include "crowdsense/anonymize.hpp"
#include "crowdsense/error.hpp"
#include "crowdsense/geo.hpp"
#include "crowdsense/model.hpp"
#include "crowdsense/net.hpp"
#include "crowdsense/pipeline.hpp"

namespace crowdsense::ingest {

/// Longest accepted record, excluding the newline.
inline constexpr std::size_t kMaxLineBytes = 4096;

struct IngestConfig {
    std::string listen_address = "127.0.0.1:7400";
    std::string snapshot_address = "127.0.0.1:7401";
    Millis frame_window{std::chrono::seconds{60}};
    std::string anonymization_salt;
    geo::Polygon campus = geo::default_campus();
    bool reject_outside = false;
    pipeline::AnalysisParams analysis;
    /// Optional NDJSON sinks appended per closed frame.
    std::optional<std::filesystem::path> summaries_out;
    std::optional<std::filesystem::path> alerts_out;

    void validate() const
    {
        if (frame_window <= Millis::zero()) {
            throw ArgumentError("frame window must be > 0");
        }
        if (anonymization_salt.empty()) {
            throw ArgumentError("anonymization salt must not be empty");
        }
        analysis.validate();
    }
};

struct Counters {
    std::uint64_t lines = 0;
    std::uint64_t accepted = 0;
    std::uint64_t rejected = 0;
    std::uint64_t outside_campus = 0;
};

/// Result of analysing one closed frame. Immutable once published.
struct Snapshot {
    bool empty = true;
    std::uint64_t frame_index = 0;
    Timestamp frame_start;
    Timestamp frame_end;
    std::size_t points = 0;
    std::vector<cluster::ClusterSummary> clusters;
    density::DensityGrid grid;
    /// Alerts open after this frame (raised or ongoing).
    std::vector<alerts::Alert> alerts;
    /// Counters as of the moment the snapshot was served.
    Counters counters;
};

/// The snapshot wire document.
inline nlohmann::ordered_json snapshot_to_json(const Snapshot& s)
{
    nlohmann::ordered_json j;
    j["status"] = s.empty ? "empty" : "ok";
    j["counters"] = {{"lines", s.counters.lines},
                     {"accepted", s.counters.accepted},
                     {"rejected", s.counters.rejected},
                     {"outside_campus", s.counters.outside_campus}};
    if (s.empty) {
        j["clusters"] = nlohmann::ordered_json::array();
        j["alerts"] = nlohmann::ordered_json::array();
        return j;
    }
    j["frame_index"] = s.frame_index;
    j["frame_start"] = format_iso8601(s.frame_start);
    j["frame_end"] = format_iso8601(s.frame_end);
    j["points"] = s.points;
    auto clusters = nlohmann::ordered_json::array();
    for (const auto& c : s.clusters) {
        clusters.push_back(nlohmann::ordered_json::parse(cluster::format_summary_line(s.frame_start, c)));
    }
    j["clusters"] = std::move(clusters);
    const auto& g = s.grid;
    nlohmann::ordered_json grid;
    grid["min_lat"] = g.bbox.min_lat;
    grid["max_lat"] = g.bbox.max_lat;
    grid["min_lon"] = g.bbox.min_lon;
    grid["max_lon"] = g.bbox.max_lon;
    grid["cell_size_m"] = g.cell_size_m;
    grid["rows"] = g.rows;
    grid["cols"] = g.cols;
    grid["total"] = g.total();
    grid["dropped"] = g.dropped;
    if (!g.counts.empty()) {
        const auto m = density::argmax_cell(g);
        grid["argmax"] = {{"row", m.row}, {"col", m.col}, {"value", m.value}};
    }
    auto cells = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) {
            if (g.at(r, c) != 0.0) {
                cells.push_back({r, c, g.at(r, c)});
            }
        }
    }
    grid["cells"] = std::move(cells);
    j["grid"] = std::move(grid);
    auto alerts = nlohmann::ordered_json::array();
    for (const auto& a : s.alerts) {
        alerts.push_back(alerts::to_json(a));
    }
    j["alerts"] = std::move(alerts);
    return j;
}

/// Validation, anonymization and frame assembly for the ingest path.
///
/// Safe to call from any number of connection threads. Frames are cut on the
/// server receive clock: the first accepted report opens frame 0 at its
/// receive time, and frame k covers [t0 + k*W, t0 + (k+1)*W). Closed frames
/// queue up for a single analysis consumer.
class FrameAssembler {
public:
    explicit FrameAssembler(IngestConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const IngestConfig& config() const noexcept { return cfg_; }

    /// Handle one wire line received at `recv`; returns the reply without newline.
    std::string handle_line(std::string_view line, Timestamp recv)
    {
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        std::optional<model::Report> report;
        std::string reason;
        bool outside = false;
        if (line.empty()) {
            reason = "empty_line";
        } else if (line.size() > kMaxLineBytes) {
            reason = "line_too_long";
        } else {
            try {
                auto r = model::parse_report_line(line);
                r.id = anonymize_id(r.id, cfg_.anonymization_salt);
                outside = !geo::point_in_polygon(cfg_.campus, r.pos);
                if (outside && cfg_.reject_outside) {
                    reason = "outside_campus";
                } else {
                    report = std::move(r);
                }
            } catch (const ParseError& e) {
                reason = e.reason();
            }
        }

        std::lock_guard lock(mu_);
        ++counters_.lines;
        if (outside) {
            ++counters_.outside_campus;
        }
        if (!report) {
            ++counters_.rejected;
            return "err " + reason;
        }
        ++counters_.accepted;
        rotate_locked(recv);
        if (!frame_start_) {
            frame_start_ = recv;
        }
        current_.add(std::move(*report));
        return "ok";
    }

    /// Close every frame whose end is at or before `now`.
    void advance(Timestamp now)
    {
        std::lock_guard lock(mu_);
        rotate_locked(now);
    }

    /// Close the open frame early (shutdown flush).
    void flush()
    {
        std::lock_guard lock(mu_);
        if (frame_start_) {
            close_locked();
        }
    }

    /// Pop the oldest closed frame, waiting up to `timeout`.
    std::optional<std::pair<std::uint64_t, model::Frame>> next_closed(std::chrono::milliseconds timeout)
    {
        std::unique_lock lock(mu_);
        closed_cv_.wait_for(lock, timeout, [&] { return !closed_.empty(); });
        if (closed_.empty()) {
            return std::nullopt;
        }
        auto f = std::move(closed_.front());
        closed_.pop_front();
        return f;
    }

    Counters counters() const
    {
        std::lock_guard lock(mu_);
        return counters_;
    }

    /// Record a line that never reached `handle_line` (e.g. oversized).
    void count_rejected_line()
    {
        std::lock_guard lock(mu_);
        ++counters_.lines;
        ++counters_.rejected;
    }

private:
    void rotate_locked(Timestamp now)
    {
        if (!frame_start_) {
            return;
        }
        while (now >= *frame_start_ + cfg_.frame_window) {
            close_locked();
        }
    }

    void close_locked()
    {
        const Timestamp start = *frame_start_;
        const Timestamp end = start + cfg_.frame_window;
        closed_.emplace_back(next_index_++, std::move(current_).finish(start, end));
        current_ = model::FrameBuilder{};
        frame_start_ = end;
        closed_cv_.notify_all();
    }

    IngestConfig cfg_;
    mutable std::mutex mu_;
    std::condition_variable closed_cv_;
    Counters counters_;
    std::optional<Timestamp> frame_start_;
    model::FrameBuilder current_;
    std::uint64_t next_index_ = 0;
    std::deque<std::pair<std::uint64_t, model::Frame>> closed_;
};

/// Turns closed frames into snapshots; single consumer, owns the alert state.
class FrameAnalyzer {
public:
    explicit FrameAnalyzer(const IngestConfig& cfg) : cfg_(cfg) {}

    struct Output {
        std::shared_ptr<const Snapshot> snapshot;
        std::vector<alerts::Alert> events;
    };

    Output process(std::uint64_t index, model::Frame frame)
    {
        auto analysis = pipeline::analyze_frame(std::move(frame), cfg_.analysis, cfg_.campus);
        auto step = alerts::evaluate_frame(analysis.clusters(), analysis.grid, cfg_.analysis.thresholds, book_);
        book_ = step.next;
        auto snap = std::make_shared<Snapshot>();
        snap->empty = false;
        snap->frame_index = index;
        snap->frame_start = analysis.start;
        snap->frame_end = analysis.end;
        snap->points = analysis.points.size();
        snap->clusters = std::move(analysis.summaries);
        snap->grid = std::move(analysis.grid);
        snap->alerts = book_.active;
        return {std::move(snap), std::move(step.events)};
    }

private:
    const IngestConfig& cfg_;
    alerts::AlertBook book_;
};

inline Timestamp wall_clock_now()
{
    return std::chrono::time_point_cast<Millis>(std::chrono::system_clock::now());
}

/// TCP front end: an ingest listener (one record per line, `ok`/`err <reason>`
/// per line) and a snapshot listener (`snapshot\n` -> one JSON document, then close).
class IngestServer {
public:
    explicit IngestServer(IngestConfig cfg) : assembler_(std::move(cfg)), analyzer_(assembler_.config()) {}

    IngestServer(const IngestServer&) = delete;
    IngestServer& operator=(const IngestServer&) = delete;

    ~IngestServer() { stop(); }

    void start()
    {
        const auto& cfg = assembler_.config();
        ingest_listener_ = net::listen_on(cfg.listen_address);
        snapshot_listener_ = net::listen_on(cfg.snapshot_address);
        open_sinks();
        running_ = true;
        threads_.emplace_back([this] { accept_loop(ingest_listener_, false); });
        threads_.emplace_back([this] { accept_loop(snapshot_listener_, true); });
        threads_.emplace_back([this] { ticker_loop(); });
        analysis_thread_ = std::thread([this] { analysis_loop(); });
    }

    /// Stop accepting, drop open connections, flush the open frame and wait
    /// for its analysis to be published.
    void stop()
    {
        if (!running_.exchange(false)) {
            return;
        }
        for (auto& t : threads_) {
            t.join();
        }
        threads_.clear();
        {
            std::unique_lock lock(conn_mu_);
            for (const int fd : conn_fds_) {
                ::shutdown(fd, SHUT_RDWR);
            }
            conn_cv_.wait(lock, [&] { return active_connections_ == 0; });
        }
        assembler_.flush();
        draining_ = true;
        analysis_thread_.join();
        ingest_listener_.close();
        snapshot_listener_.close();
    }

    std::uint16_t ingest_port() const { return ingest_listener_.local_port(); }
    std::uint16_t snapshot_port() const { return snapshot_listener_.local_port(); }

    /// Latest published snapshot with live counters.
    Snapshot snapshot() const
    {
        std::shared_ptr<const Snapshot> latest;
        {
            std::lock_guard lock(snap_mu_);
            latest = latest_;
        }
        Snapshot s = latest ? *latest : Snapshot{};
        s.counters = assembler_.counters();
        return s;
    }

    Counters counters() const { return assembler_.counters(); }

    /// Number of frames analysed and published so far.
    std::uint64_t published_frames() const { return published_.load(); }

private:
    void open_sinks()
    {
        const auto& cfg = assembler_.config();
        if (cfg.summaries_out) {
            summaries_.open(*cfg.summaries_out, std::ios::binary | std::ios::app);
            if (!summaries_) {
                throw IoError(fmt::format("cannot open `{}`", cfg.summaries_out->string()));
            }
        }
        if (cfg.alerts_out) {
            alerts_.open(*cfg.alerts_out, std::ios::binary | std::ios::app);
            if (!alerts_) {
                throw IoError(fmt::format("cannot open `{}`", cfg.alerts_out->string()));
            }
        }
    }

    void accept_loop(const net::Socket& listener, bool snapshot_port)
    {
        while (running_) {
            if (!net::wait_readable(listener, 50)) {
                continue;
            }
            net::Socket conn(::accept(listener.fd(), nullptr, nullptr));
            if (!conn.valid()) {
                continue;
            }
            {
                std::lock_guard lock(conn_mu_);
                conn_fds_.insert(conn.fd());
                ++active_connections_;
            }
            std::thread([this, c = std::move(conn), snapshot_port]() mutable {
                try {
                    if (snapshot_port) {
                        serve_snapshot(c);
                    } else {
                        serve_ingest(c);
                    }
                } catch (const std::exception&) {
                    // peer went away; nothing to report on this connection
                }
                std::lock_guard lock(conn_mu_);
                conn_fds_.erase(c.fd());
                c.close();
                --active_connections_;
                conn_cv_.notify_all();
            }).detach();
        }
    }

    void serve_ingest(const net::Socket& conn)
    {
        std::string buffer;
        std::string replies;
        char chunk[65536];
        for (;;) {
            const std::size_t n = conn.recv_some(chunk, sizeof chunk);
            const bool eof = n == 0;
            buffer.append(chunk, n);
            replies.clear();
            std::size_t begin = 0;
            for (;;) {
                const auto nl = buffer.find('\n', begin);
                if (nl == std::string::npos) {
                    break;
                }
                const std::string_view line(buffer.data() + begin, nl - begin);
                begin = nl + 1;
                if (line.size() - (!line.empty() && line.back() == '\r') > kMaxLineBytes) {
                    assembler_.count_rejected_line();
                    conn.send_all(replies + "err line_too_long\n");
                    return;
                }
                replies += assembler_.handle_line(line, wall_clock_now());
                replies += '\n';
            }
            buffer.erase(0, begin);
            if (buffer.size() > kMaxLineBytes + 1) {
                assembler_.count_rejected_line();
                conn.send_all(replies + "err line_too_long\n");
                return;
            }
            if (eof && !buffer.empty()) {
                replies += assembler_.handle_line(buffer, wall_clock_now());
                replies += '\n';
                buffer.clear();
            }
            if (!replies.empty()) {
                conn.send_all(replies);
            }
            if (eof) {
                return;
            }
        }
    }

    void serve_snapshot(const net::Socket& conn)
    {
        std::string request;
        char chunk[512];
        while (request.find('\n') == std::string::npos) {
            if (request.size() > kMaxLineBytes) {
                conn.send_all("err line_too_long\n");
                return;
            }
            const std::size_t n = conn.recv_some(chunk, sizeof chunk);
            if (n == 0) {
                break;
            }
            request.append(chunk, n);
        }
        std::string_view cmd(request);
        cmd = cmd.substr(0, cmd.find('\n'));
        if (!cmd.empty() && cmd.back() == '\r') {
            cmd.remove_suffix(1);
        }
        if (cmd != "snapshot") {
            conn.send_all("err unknown_command\n");
            return;
        }
        conn.send_all(snapshot_to_json(snapshot()).dump() + "\n");
        ::shutdown(conn.fd(), SHUT_WR);
    }

    void ticker_loop()
    {
        while (running_) {
            assembler_.advance(wall_clock_now());
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
    }

    void analysis_loop()
    {
        for (;;) {
            auto next = assembler_.next_closed(std::chrono::milliseconds(50));
            if (!next) {
                if (draining_) {
                    return;
                }
                continue;
            }
            auto out = analyzer_.process(next->first, std::move(next->second));
            if (summaries_.is_open()) {
                for (const auto& c : out.snapshot->clusters) {
                    summaries_ << cluster::format_summary_line(out.snapshot->frame_start, c) << '\n';
                }
                summaries_.flush();
            }
            if (alerts_.is_open()) {
                for (const auto& a : out.events) {
                    alerts_ << alerts::format_alert_line(a) << '\n';
                }
                alerts_.flush();
            }
            {
                std::lock_guard lock(snap_mu_);
                latest_ = std::move(out.snapshot);
            }
            ++published_;
        }
    }

    FrameAssembler assembler_;
    FrameAnalyzer analyzer_;
    net::Socket ingest_listener_;
    net::Socket snapshot_listener_;
    std::atomic<bool> running_{false};
    std::atomic<bool> draining_{false};
    std::vector<std::thread> threads_;
    std::thread analysis_thread_;

    std::mutex conn_mu_;
    std::condition_variable conn_cv_;
    std::set<int> conn_fds_;
    std::size_t active_connections_ = 0;

    mutable std::mutex snap_mu_;
    std::shared_ptr<const Snapshot> latest_;
    std::atomic<std::uint64_t> published_{0};

    std::ofstream summaries_;
    std::ofstream alerts_;
};

} // namespace crowdsense::ingest
