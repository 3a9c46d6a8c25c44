#pragma once

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include "crowdsense/geo.hpp"
#include "crowdsense/rng.hpp"
#include "crowdsense/simulator.hpp"

extern char** environ;

namespace testing_support {

namespace fs = std::filesystem;
using crowdsense::geo::GeoPoint;

class TempDir {
public:
    TempDir()
    {
        std::string tmpl = (fs::temp_directory_path() / "crowdsense-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) {
            throw std::runtime_error("mkdtemp failed");
        }
        path_ = tmpl;
    }
    ~TempDir()
    {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

inline std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + p.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

inline std::vector<std::string> lines_of(const std::string& text)
{
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        out.push_back(text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos));
        if (nl == std::string::npos) {
            break;
        }
        pos = nl + 1;
    }
    return out;
}

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

namespace detail {

inline std::vector<char*> argv_of(std::vector<std::string>& args)
{
    std::vector<char*> argv;
    for (auto& a : args) {
        argv.push_back(a.data());
    }
    argv.push_back(nullptr);
    return argv;
}

inline int wait_exit(pid_t pid)
{
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0) {
        if (errno != EINTR) {
            return -1;
        }
    }
    if (WIFEXITED(status)) {
        return WEXITSTATUS(status);
    }
    return 128 + WTERMSIG(status);
}

} // namespace detail

/// Run a program to completion, capturing stdout and stderr.
inline RunResult run(std::vector<std::string> args)
{
    TempDir scratch;
    const std::string out_path = scratch / "stdout";
    const std::string err_path = scratch / "stderr";
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_addopen(&fa, 1, out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_addopen(&fa, 2, err_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    auto argv = detail::argv_of(args);
    pid_t pid = 0;
    const int rc = ::posix_spawn(&pid, argv[0], &fa, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    if (rc != 0) {
        throw std::runtime_error("posix_spawn failed for " + args[0]);
    }
    RunResult r;
    r.exit_code = detail::wait_exit(pid);
    r.out = read_file(out_path);
    r.err = read_file(err_path);
    return r;
}

/// A long-running child whose stdout is readable line by line.
class Process {
public:
    explicit Process(std::vector<std::string> args)
    {
        int fds[2];
        if (::pipe(fds) != 0) {
            throw std::runtime_error("pipe failed");
        }
        posix_spawn_file_actions_t fa;
        posix_spawn_file_actions_init(&fa);
        posix_spawn_file_actions_adddup2(&fa, fds[1], 1);
        posix_spawn_file_actions_addclose(&fa, fds[0]);
        posix_spawn_file_actions_addclose(&fa, fds[1]);
        auto argv = detail::argv_of(args);
        const int rc = ::posix_spawn(&pid_, argv[0], &fa, nullptr, argv.data(), environ);
        posix_spawn_file_actions_destroy(&fa);
        ::close(fds[1]);
        if (rc != 0) {
            ::close(fds[0]);
            throw std::runtime_error("posix_spawn failed for " + args[0]);
        }
        out_fd_ = fds[0];
    }

    ~Process()
    {
        if (pid_ > 0) {
            ::kill(pid_, SIGKILL);
            detail::wait_exit(pid_);
        }
        if (out_fd_ >= 0) {
            ::close(out_fd_);
        }
    }

    Process(const Process&) = delete;
    Process& operator=(const Process&) = delete;

    /// Next stdout line, or nullopt on EOF or timeout.
    std::optional<std::string> read_line(std::chrono::milliseconds timeout = std::chrono::seconds(10))
    {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0) {
                return std::nullopt;
            }
            pollfd p{out_fd_, POLLIN, 0};
            if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) {
                continue;
            }
            char chunk[4096];
            const ssize_t n = ::read(out_fd_, chunk, sizeof chunk);
            if (n <= 0) {
                return std::nullopt;
            }
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    /// Send `sig` and wait for exit; returns the exit code.
    int stop(int sig = SIGTERM)
    {
        ::kill(pid_, sig);
        const int code = detail::wait_exit(pid_);
        pid_ = -1;
        return code;
    }

    /// Remaining stdout after the process has exited.
    std::string drain()
    {
        std::string rest = std::move(buffer_);
        buffer_.clear();
        char chunk[4096];
        ssize_t n = 0;
        while ((n = ::read(out_fd_, chunk, sizeof chunk)) > 0) {
            rest.append(chunk, static_cast<std::size_t>(n));
        }
        return rest;
    }

private:
    pid_t pid_ = -1;
    int out_fd_ = -1;
    std::string buffer_;
};

/// Ground-truth crowd scenario: 9,000 uniform background people plus three
/// 200-person, 20 m hotspots with centres at least 300 m apart and 150 m
/// inside the campus edge. Hotspot members are re-anchored background slots,
/// so the population is 9,600.
struct CrowdScenario {
    crowdsense::sim::ScenarioConfig cfg;
    std::vector<GeoPoint> centers;
};

inline bool well_inside(const crowdsense::geo::Polygon& campus, const crowdsense::geo::LocalFrame& frame,
                        const GeoPoint& c, double margin_m)
{
    const auto xy = frame.project(c);
    for (const auto& [dx, dy] : {std::pair{margin_m, 0.0}, {-margin_m, 0.0}, {0.0, margin_m}, {0.0, -margin_m}}) {
        if (!crowdsense::geo::point_in_polygon(campus, frame.unproject({xy.x + dx, xy.y + dy}))) {
            return false;
        }
    }
    return true;
}

inline CrowdScenario crowd_scenario(std::uint64_t seed, std::size_t hotspots = 3, std::size_t per_hotspot = 200,
                                    std::size_t background = 9000)
{
    CrowdScenario s;
    s.cfg.seed = seed;
    s.cfg.population = background + hotspots * per_hotspot;
    const auto frame = crowdsense::geo::frame_for(s.cfg.campus);
    crowdsense::Rng rng(seed ^ 0xC0FFEEULL);
    while (s.centers.size() < hotspots) {
        const auto c = crowdsense::sim::generate_uniform_in_polygon(1, s.cfg.campus, rng).front();
        if (!well_inside(s.cfg.campus, frame, c, 150.0)) {
            continue;
        }
        bool apart = true;
        for (const auto& other : s.centers) {
            apart = apart && crowdsense::geo::haversine_distance(c, other) >= 300.0;
        }
        if (apart) {
            s.centers.push_back(c);
        }
    }
    for (const auto& c : s.centers) {
        crowdsense::sim::Hotspot h;
        h.center = c;
        h.sigma_m = 20.0;
        h.count = per_hotspot;
        s.cfg.hotspots.push_back(h);
    }
    return s;
}

/// `--hotspot` flag values reproducing a scenario's hotspots on the CLI.
inline std::vector<std::string> hotspot_flags(const CrowdScenario& s)
{
    std::vector<std::string> out;
    for (const auto& h : s.cfg.hotspots) {
        out.push_back("--hotspot");
        out.push_back(fmt::format("{:.7f},{:.7f},{},{}", h.center.lat, h.center.lon, h.sigma_m, h.count));
    }
    return out;
}

} // namespace testing_support
