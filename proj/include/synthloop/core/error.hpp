#pragma once
// Error types shared by every module. Each carries a machine code from a
// fixed enumeration so the CLI and HTTP layers can map failures uniformly.

#include <stdexcept>
#include <string>
#include <vector>

namespace synthloop {

enum class ErrorCode {
    invalid_argument,
    parse_error,
    validation_failed,
    io_error,
    not_found,
    state_conflict,
    insufficient_samples,
    numerical_error,
    busy,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::parse_error: return "parse_error";
        case ErrorCode::validation_failed: return "validation_failed";
        case ErrorCode::io_error: return "io_error";
        case ErrorCode::not_found: return "not_found";
        case ErrorCode::state_conflict: return "state_conflict";
        case ErrorCode::insufficient_samples: return "insufficient_samples";
        case ErrorCode::numerical_error: return "numerical_error";
        case ErrorCode::busy: return "busy";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg, std::string field = {})
        : std::runtime_error(msg), code_(code), field_(std::move(field)) {}

    ErrorCode code() const noexcept { return code_; }
    // Dotted path of the offending input field, empty when not applicable.
    const std::string& field() const noexcept { return field_; }

private:
    ErrorCode code_;
    std::string field_;
};

class ParseError : public Error {
public:
    ParseError(int line, const std::string& field, const std::string& msg)
        : Error(ErrorCode::parse_error,
                "line " + std::to_string(line) + ", field '" + field + "': " + msg, field),
          line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

// Collects every violation instead of stopping at the first one.
class ValidationError : public Error {
public:
    explicit ValidationError(std::vector<std::string> violations, std::string field = {})
        : Error(ErrorCode::validation_failed, join(violations), std::move(field)),
          violations_(std::move(violations)) {}

    const std::vector<std::string>& violations() const noexcept { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string out = "validation failed";
        for (size_t i = 0; i < v.size(); ++i) out += (i == 0 ? ": " : "; ") + v[i];
        return out;
    }
    std::vector<std::string> violations_;
};

inline void require(bool cond, const std::string& msg, const std::string& field = {}) {
    if (!cond) throw Error(ErrorCode::invalid_argument, msg, field);
}

}  // namespace synthloop
