#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "crowdsense/error.hpp"
#include "crowdsense/model.hpp"
#include "crowdsense/net.hpp"

namespace crowdsense::replay {

struct ReplayOptions {
    std::string target = "127.0.0.1:7400";
    /// Playback rate relative to the dataset clock; 0 streams flat out.
    double speed = 0.0;
    std::size_t connections = 1;
    /// Lines written before reading their acknowledgements.
    std::size_t batch = 256;
};

struct ReplayStats {
    std::size_t sent = 0;
    std::size_t ok = 0;
    std::size_t err = 0;
    std::map<std::string, std::size_t> errors;
    double seconds = 0.0;

    double accepted_per_second() const { return seconds > 0.0 ? static_cast<double>(ok) / seconds : 0.0; }
};

namespace detail {

/// Read exactly `n` reply lines from `conn`, tallying them into `stats`.
inline void read_acks(const net::Socket& conn, std::size_t n, std::string& pending, ReplayStats& stats)
{
    char chunk[16384];
    while (n > 0) {
        auto nl = pending.find('\n');
        while (nl != std::string::npos && n > 0) {
            const std::string_view reply(pending.data(), nl);
            if (reply == "ok") {
                ++stats.ok;
            } else {
                ++stats.err;
                ++stats.errors[std::string(reply.starts_with("err ") ? reply.substr(4) : reply)];
            }
            pending.erase(0, nl + 1);
            --n;
            nl = pending.find('\n');
        }
        if (n == 0) {
            break;
        }
        const std::size_t got = conn.recv_some(chunk, sizeof chunk);
        if (got == 0) {
            throw IoError("server closed the connection before acknowledging every line");
        }
        pending.append(chunk, got);
    }
}

} // namespace detail

/// Stream a dataset to an ingest server.
///
/// Reports are dealt round-robin across `connections`; with `speed > 0` each
/// line is held until (ts - ts0) / speed of wall time has passed since the
/// start, preserving the dataset's inter-report timing.
inline ReplayStats replay_dataset(const model::Dataset& ds, const ReplayOptions& opts)
{
    if (opts.speed < 0.0) {
        throw ArgumentError("replay speed must be >= 0");
    }
    if (opts.connections == 0 || opts.batch == 0) {
        throw ArgumentError("replay needs at least one connection and a positive batch");
    }
    std::vector<net::Socket> conns;
    for (std::size_t c = 0; c < opts.connections; ++c) {
        conns.push_back(net::connect_to(opts.target));
    }
    std::vector<std::string> lines;
    lines.reserve(ds.size());
    for (const auto& r : ds.reports) {
        lines.push_back(model::format_report_line(r) + "\n");
    }

    const auto start = std::chrono::steady_clock::now();
    const Timestamp t0 = ds.empty() ? Timestamp{} : ds.reports.front().ts;
    const auto due = [&](std::size_t i) {
        const auto offset = std::chrono::duration<double>(ds.reports[i].ts - t0).count() / opts.speed;
        return start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                           std::chrono::duration<double>(offset));
    };

    std::vector<ReplayStats> per(opts.connections);
    std::vector<std::exception_ptr> errors(opts.connections);
    {
        std::vector<std::jthread> workers;
        for (std::size_t c = 0; c < opts.connections; ++c) {
            workers.emplace_back([&, c] {
                try {
                    const auto& conn = conns[c];
                    auto& stats = per[c];
                    std::string batch;
                    std::string pending;
                    std::size_t i = c;
                    while (i < lines.size()) {
                        if (opts.speed > 0.0) {
                            std::this_thread::sleep_until(due(i));
                        }
                        batch.clear();
                        std::size_t in_batch = 0;
                        const auto now = std::chrono::steady_clock::now();
                        while (i < lines.size() && in_batch < opts.batch && (opts.speed == 0.0 || due(i) <= now)) {
                            batch += lines[i];
                            ++in_batch;
                            i += opts.connections;
                        }
                        conn.send_all(batch);
                        stats.sent += in_batch;
                        detail::read_acks(conn, in_batch, pending, stats);
                    }
                    ::shutdown(conn.fd(), SHUT_WR);
                } catch (...) {
                    errors[c] = std::current_exception();
                }
            });
        }
    }
    ReplayStats total;
    total.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    for (const auto& s : per) {
        total.sent += s.sent;
        total.ok += s.ok;
        total.err += s.err;
        for (const auto& [k, v] : s.errors) {
            total.errors[k] += v;
        }
    }
    return total;
}

/// Fetch one snapshot document from a snapshot listener.
inline std::string query_snapshot(std::string_view target)
{
    auto conn = net::connect_to(target);
    conn.send_all("snapshot\n");
    std::string body;
    char chunk[65536];
    for (;;) {
        const std::size_t n = conn.recv_some(chunk, sizeof chunk);
        if (n == 0) {
            break;
        }
        body.append(chunk, n);
    }
    while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) {
        body.pop_back();
    }
    return body;
}

} // namespace crowdsense::replay
