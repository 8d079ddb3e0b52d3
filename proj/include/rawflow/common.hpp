#pragma once

#include <stdexcept>
#include <string>

namespace rawflow {

// Error hierarchy. Everything user-facing derives from rawflow::error so the
// CLI can map categories to exit codes.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
struct dim_error : error {
    using error::error;
};

// Violated operation precondition (bad argument values, empty input, ...).
struct precondition_error : error {
    using error::error;
};

// Malformed file contents.
struct parse_error : error {
    using error::error;
};

// Filesystem / OS failure.
struct io_error : error {
    using error::error;
};

// Feature present in the input but not supported (codec, primitive, ...).
struct capability_error : error {
    using error::error;
};

// NaN/Inf detected where finite values are required.
struct numeric_error : error {
    using error::error;
};

}  // namespace rawflow
