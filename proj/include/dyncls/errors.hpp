#pragma once

#include <stdexcept>
#include <string>

namespace dyncls {

// Error taxonomy; the CLI maps each class to a distinct exit code.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace dyncls
