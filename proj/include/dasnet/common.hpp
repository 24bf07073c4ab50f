#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dasnet {

// Invalid shapes, bad hyperparameters, malformed files.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf escaping a forward operator, diverging training.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bugs (graph cycles, broken invariants) rather than user mistakes.
struct InternalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense rank-4 extent, always (batch, channels, height, width).
struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

}  // namespace dasnet
