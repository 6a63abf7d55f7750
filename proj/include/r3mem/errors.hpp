#pragma once

#include <stdexcept>
#include <string>

namespace r3mem {

// shape mismatch between operands
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// API misuse: wrong call order, detached tensors, bad arguments
struct usage_error : std::logic_error {
    using std::logic_error::logic_error;
};

// non-finite value produced by a numeric op
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// malformed binary file (checkpoint)
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// malformed text input; carries the 1-based line number
struct parse_error : std::runtime_error {
    parse_error(const std::string & msg, size_t line)
        : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_no(line) {}
    explicit parse_error(const std::string & msg) : std::runtime_error(msg), line_no(0) {}
    size_t line_no;
};

} // namespace r3mem
