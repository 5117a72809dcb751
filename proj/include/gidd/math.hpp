#pragma once

#include <cmath>

namespace gidd {

// Branches on sign so that |x| up to ~1e3 saturates cleanly instead of overflowing.
inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// d/dx sigmoid(x) = sigmoid(x) * sigmoid(-x)
inline double sigmoid_deriv(double x) { return sigmoid(x) * sigmoid(-x); }

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

// log(1 + e^x) without overflow.
inline double softplus(double x) {
    if (x > 0.0) {
        return x + std::log1p(std::exp(-x));
    }
    return std::log1p(std::exp(x));
}

} // namespace gidd
