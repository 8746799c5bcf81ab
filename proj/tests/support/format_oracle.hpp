#pragma once

// Test-side oracles, kept independent of the library code paths they check.
// The mini-float grids are enumerated straight from bit patterns and searched
// exhaustively; ties resolve to the candidate with even position on the local
// uniform grid, which is the ties-to-even rule expressed without mantissa
// arithmetic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// All finite FP8 E4M3 values: 1-4-3, bias 7, exponent field 15 with mantissa
// 111 reserved (NaN), so the magnitude tops out at 448.
inline const std::vector<double>& e4m3_values() {
    static const std::vector<double> vals = [] {
        std::vector<double> v;
        for (int e = 0; e < 16; ++e) {
            for (int m = 0; m < 8; ++m) {
                if (e == 15 && m == 7)
                    continue;
                const double mag = (e == 0) ? (m / 8.0) * std::ldexp(1.0, -6)
                                            : (1.0 + m / 8.0) * std::ldexp(1.0, e - 7);
                v.push_back(mag);
                v.push_back(-mag);
            }
        }
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    }();
    return vals;
}

// All FP6 E3M2 values: 1-3-2, bias 3, no reserved patterns, max 28.
inline const std::vector<double>& e3m2_values() {
    static const std::vector<double> vals = [] {
        std::vector<double> v;
        for (int e = 0; e < 8; ++e) {
            for (int m = 0; m < 4; ++m) {
                const double mag = (e == 0) ? (m / 4.0) * std::ldexp(1.0, -2)
                                            : (1.0 + m / 4.0) * std::ldexp(1.0, e - 3);
                v.push_back(mag);
                v.push_back(-mag);
            }
        }
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    }();
    return vals;
}

inline double nearest_in_grid(double x, const std::vector<double>& grid) {
    auto it = std::lower_bound(grid.begin(), grid.end(), x);
    if (it == grid.begin())
        return grid.front();
    if (it == grid.end())
        return grid.back();
    const double hi = *it;
    const double lo = *(it - 1);
    const double dlo = x - lo;
    const double dhi = hi - x;
    if (dlo < dhi)
        return lo;
    if (dhi < dlo)
        return hi;
    // exact tie: even position on the local uniform grid wins
    const double step = hi - lo;
    const auto klo = static_cast<long long>(std::llround(std::abs(lo) / step));
    return (klo % 2 == 0) ? lo : hi;
}

// Symmetric INT8 grid with -128 dropped.
inline double int8_nearest(double x) {
    double best = -127.0;
    double bestd = std::abs(x - best);
    for (int k = -126; k <= 127; ++k) {
        const double d = std::abs(x - k);
        if (d < bestd || (d == bestd && k % 2 == 0)) {
            best = k;
            bestd = d;
        }
    }
    return best;
}

} // namespace oracle
