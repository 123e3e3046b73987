#pragma once

#include <stdexcept>
#include <string>

namespace taalm {

// Configuration / input validation problems. CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures: non-finite values, shape violations mid-compute. Exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Weight vector whose sum fell below the floor; twppl is undefined there. Exit code 3.
struct DegenerateWeightsError : NumericError {
    explicit DegenerateWeightsError(const std::string& msg) : NumericError(msg) {}
};

// A training budget ran out before reaching its gate. Exit code 4.
struct BudgetError : std::runtime_error {
    explicit BudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace taalm
