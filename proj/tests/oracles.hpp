#pragma once

// Independent reference implementations used only by the tests. They work from
// the defining formulas in long double and share no code with the library.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<long double>;

inline long double sig(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

struct Process {
    long double a = 1.0L;
    long double b = 0.0L;
    std::size_t n = 4;     // vocabulary size, mask included
    std::size_t mask = 3;

    Vec pi(long double lam) const {
        const long double s = sig(a * lam + b);
        Vec p(n, s / static_cast<long double>(n - 1));
        p[mask] = 1.0L - s;
        return p;
    }

    // Central difference of pi in lambda.
    Vec dpi(long double lam, long double h = 1e-5L) const {
        const Vec hi = pi(lam + h);
        const Vec lo = pi(lam - h);
        Vec d(n);
        for (std::size_t i = 0; i < n; ++i) {
            d[i] = (hi[i] - lo[i]) / (2.0L * h);
        }
        return d;
    }

    Vec marginal(std::size_t x, long double lam) const {
        Vec q = pi(lam);
        for (auto& v : q) {
            v *= sig(-lam);
        }
        q[x] += sig(lam);
        return q;
    }

    // Mixture of the marginal over a clean-token distribution.
    Vec marginal_of(const Vec& xhat, long double lam) const {
        Vec q = pi(lam);
        for (std::size_t i = 0; i < n; ++i) {
            q[i] = sig(lam) * xhat[i] + sig(-lam) * q[i];
        }
        return q;
    }

    // Transition matrix T[z_s][z_t] between levels lam_s >= lam_t, solved so that
    // marginal(x, lam_s) * T = marginal(x, lam_t) for every x with the
    // "keep or resample from a fixed distribution" structure.
    std::vector<Vec> transition(long double lam_s, long double lam_t) const {
        const long double keep = sig(lam_t) / sig(lam_s);
        const Vec pt = pi(lam_t);
        const Vec ps = pi(lam_s);
        std::vector<Vec> T(n, Vec(n));
        for (std::size_t zs = 0; zs < n; ++zs) {
            for (std::size_t zt = 0; zt < n; ++zt) {
                const long double resample = sig(-lam_t) * pt[zt] - keep * sig(-lam_s) * ps[zt];
                T[zs][zt] = (zs == zt ? keep : 0.0L) + resample;
            }
        }
        return T;
    }

    long double weight(std::size_t x, std::size_t z, long double lam) const {
        const Vec p = pi(lam);
        const Vec d = dpi(lam);
        return sig(-lam) * (p[z] - d[z]) / marginal(x, lam)[z];
    }

    long double pointwise(std::size_t x, std::size_t z, long double lam, const Vec& xhat) const {
        const Vec q = marginal(x, lam);
        const Vec qh = marginal_of(xhat, lam);
        long double kl = 0.0L;
        for (std::size_t i = 0; i < n; ++i) {
            if (q[i] > 0.0L) {
                kl += q[i] * std::log(q[i] / qh[i]);
            }
        }
        const long double r = q[z] / qh[z];
        return weight(x, z, lam) * (kl + r - std::log(r) - 1.0L);
    }
};

inline long double entropy(const Vec& p) {
    long double h = 0.0L;
    for (long double v : p) {
        if (v > 0.0L) {
            h -= v * std::log(v);
        }
    }
    return h;
}

} // namespace oracle
