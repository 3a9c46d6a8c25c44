#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <fmt/format.h>

namespace crowdsense {

/// UTC instant with millisecond precision.
using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;
using Millis = std::chrono::milliseconds;

inline Timestamp from_epoch_ms(std::int64_t ms) { return Timestamp{Millis{ms}}; }
inline std::int64_t epoch_ms(Timestamp t) { return t.time_since_epoch().count(); }

namespace detail {

inline bool take_digits(std::string_view& s, int n, int& out)
{
    if (s.size() < static_cast<std::size_t>(n)) {
        return false;
    }
    int v = 0;
    for (int i = 0; i < n; ++i) {
        const char c = s[static_cast<std::size_t>(i)];
        if (c < '0' || c > '9') {
            return false;
        }
        v = v * 10 + (c - '0');
    }
    out = v;
    s.remove_prefix(static_cast<std::size_t>(n));
    return true;
}

inline bool take_char(std::string_view& s, char c)
{
    if (s.empty() || s.front() != c) {
        return false;
    }
    s.remove_prefix(1);
    return true;
}

} // namespace detail

/// Parse `YYYY-MM-DDTHH:MM:SS[.fraction](Z|+HH:MM|-HH:MM)` into UTC.
/// Fractions beyond milliseconds are truncated.
inline std::optional<Timestamp> parse_iso8601(std::string_view s)
{
    using namespace std::chrono;
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    if (!detail::take_digits(s, 4, y) || !detail::take_char(s, '-') || !detail::take_digits(s, 2, mo) ||
        !detail::take_char(s, '-') || !detail::take_digits(s, 2, d) || !detail::take_char(s, 'T') ||
        !detail::take_digits(s, 2, h) || !detail::take_char(s, ':') || !detail::take_digits(s, 2, mi) ||
        !detail::take_char(s, ':') || !detail::take_digits(s, 2, sec)) {
        return std::nullopt;
    }
    int ms = 0;
    if (detail::take_char(s, '.')) {
        int digits = 0;
        while (!s.empty() && s.front() >= '0' && s.front() <= '9') {
            if (digits < 3) {
                ms = ms * 10 + (s.front() - '0');
            }
            ++digits;
            s.remove_prefix(1);
        }
        if (digits == 0 || digits > 9) {
            return std::nullopt;
        }
        for (int i = digits; i < 3; ++i) {
            ms *= 10;
        }
    }
    int offset_min = 0;
    if (detail::take_char(s, 'Z')) {
    } else if (!s.empty() && (s.front() == '+' || s.front() == '-')) {
        const int sign = s.front() == '-' ? -1 : 1;
        s.remove_prefix(1);
        int oh = 0, om = 0;
        if (!detail::take_digits(s, 2, oh) || !detail::take_char(s, ':') || !detail::take_digits(s, 2, om) ||
            oh > 23 || om > 59) {
            return std::nullopt;
        }
        offset_min = sign * (oh * 60 + om);
    } else {
        return std::nullopt;
    }
    if (!s.empty()) {
        return std::nullopt;
    }
    const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h > 23 || mi > 59 || sec > 59) {
        return std::nullopt;
    }
    return time_point_cast<milliseconds>(sys_days{ymd}) + hours{h} + minutes{mi} + seconds{sec} + milliseconds{ms} -
           minutes{offset_min};
}

/// Canonical rendering: `2024-05-01T14:30:00.000Z`.
inline std::string format_iso8601(Timestamp t)
{
    using namespace std::chrono;
    const auto day_start = floor<days>(t);
    const year_month_day ymd{day_start};
    const hh_mm_ss<milliseconds> tod{t - day_start};
    return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}.{:03d}Z", static_cast<int>(ymd.year()),
                       static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), tod.hours().count(),
                       tod.minutes().count(), tod.seconds().count(), tod.subseconds().count());
}

} // namespace crowdsense
