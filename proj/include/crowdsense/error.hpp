#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace crowdsense {

/// Invalid argument or parameter passed to a library operation.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Filesystem or socket failure; the message carries the path or endpoint.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A scenario that cannot be realised (e.g. a hotspot that lies outside the campus).
class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Structured record parse failure.
///
/// `reason` is a short machine token (`malformed_json`, `empty_id`, ...) that
/// is sent verbatim on the ingest wire; `field` names the offending field when
/// there is one and `offset` is the byte offset inside the line.
class ParseError : public std::runtime_error {
public:
    ParseError(std::string reason, std::string field, std::size_t offset, const std::string& what)
        : std::runtime_error(what), reason_(std::move(reason)), field_(std::move(field)), offset_(offset) {}

    const std::string& reason() const noexcept { return reason_; }
    const std::string& field() const noexcept { return field_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::string reason_;
    std::string field_;
    std::size_t offset_;
};

/// Latitude or longitude outside the WGS-84 domain.
class RangeError : public ParseError {
public:
    using ParseError::ParseError;
};

} // namespace crowdsense
