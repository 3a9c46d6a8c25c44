#pragma once

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>

#include <fmt/format.h>

#include "crowdsense/error.hpp"

namespace crowdsense::net {

/// Owning file descriptor for a TCP socket.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) noexcept : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept
    {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket() { close(); }

    int fd() const noexcept { return fd_; }
    bool valid() const noexcept { return fd_ >= 0; }

    void close() noexcept
    {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    /// Write every byte or throw.
    void send_all(std::string_view data) const
    {
        while (!data.empty()) {
            const ssize_t n = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) {
                    continue;
                }
                throw IoError(fmt::format("send failed: {}", std::strerror(errno)));
            }
            data.remove_prefix(static_cast<std::size_t>(n));
        }
    }

    /// Read up to `cap` bytes; 0 on orderly shutdown.
    std::size_t recv_some(char* buf, std::size_t cap) const
    {
        for (;;) {
            const ssize_t n = ::recv(fd_, buf, cap, 0);
            if (n >= 0) {
                return static_cast<std::size_t>(n);
            }
            if (errno != EINTR) {
                throw IoError(fmt::format("recv failed: {}", std::strerror(errno)));
            }
        }
    }

    std::uint16_t local_port() const
    {
        sockaddr_storage addr{};
        socklen_t len = sizeof addr;
        if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
            throw IoError(fmt::format("getsockname failed: {}", std::strerror(errno)));
        }
        if (addr.ss_family == AF_INET6) {
            return ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
        }
        return ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    }

private:
    int fd_ = -1;
};

struct Endpoint {
    std::string host;
    std::string port;
};

/// Split `host:port` (the host may be empty or `*` for all interfaces).
inline Endpoint parse_endpoint(std::string_view text)
{
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon + 1 == text.size()) {
        throw ArgumentError(fmt::format("expected host:port, got `{}`", text));
    }
    Endpoint ep{std::string(text.substr(0, colon)), std::string(text.substr(colon + 1))};
    if (ep.host == "*") {
        ep.host.clear();
    }
    return ep;
}

namespace detail {

struct AddrInfo {
    addrinfo* head = nullptr;
    ~AddrInfo()
    {
        if (head) {
            ::freeaddrinfo(head);
        }
    }
};

inline AddrInfo resolve(const Endpoint& ep, bool passive)
{
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = passive ? AI_PASSIVE : 0;
    AddrInfo info;
    const int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), ep.port.c_str(), &hints, &info.head);
    if (rc != 0) {
        throw IoError(fmt::format("cannot resolve {}:{}: {}", ep.host, ep.port, ::gai_strerror(rc)));
    }
    return info;
}

} // namespace detail

inline Socket listen_on(std::string_view address, int backlog = 256)
{
    const auto ep = parse_endpoint(address);
    const auto info = detail::resolve(ep, true);
    std::string last_error = "no usable address";
    for (auto* ai = info.head; ai; ai = ai->ai_next) {
        Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        if (!s.valid()) {
            last_error = std::strerror(errno);
            continue;
        }
        const int one = 1;
        ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.fd(), backlog) == 0) {
            return s;
        }
        last_error = std::strerror(errno);
    }
    throw IoError(fmt::format("cannot listen on `{}`: {}", address, last_error));
}

inline Socket connect_to(std::string_view address)
{
    const auto ep = parse_endpoint(address);
    const auto info = detail::resolve(ep, false);
    std::string last_error = "no usable address";
    for (auto* ai = info.head; ai; ai = ai->ai_next) {
        Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        if (!s.valid()) {
            last_error = std::strerror(errno);
            continue;
        }
        if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
            const int one = 1;
            ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return s;
        }
        last_error = std::strerror(errno);
    }
    throw IoError(fmt::format("cannot connect to `{}`: {}", address, last_error));
}

/// Wait up to `timeout_ms` for the socket to become readable.
inline bool wait_readable(const Socket& s, int timeout_ms)
{
    pollfd p{s.fd(), POLLIN, 0};
    const int rc = ::poll(&p, 1, timeout_ms);
    return rc > 0;
}

} // namespace crowdsense::net
