#pragma once

// Central finite differences over a scalar loss, entry by entry, in double.
// The loss callable reads the tensor it was handed by reference, so analytic
// backward paths are checked against an oracle that never touches them.

#include <functional>

#include "halo/tensor.hpp"

namespace oracle {

template <typename LossFn>
halo::TensorT<double> fd_gradient(halo::TensorT<double>& param, LossFn&& loss, double h = 1e-5) {
    halo::TensorT<double> g(param.rows(), param.cols());
    for (halo::index_t i = 0; i < param.rows(); ++i) {
        for (halo::index_t j = 0; j < param.cols(); ++j) {
            const double keep = param(i, j);
            param(i, j) = keep + h;
            const double up = loss();
            param(i, j) = keep - h;
            const double down = loss();
            param(i, j) = keep;
            g(i, j) = (up - down) / (2 * h);
        }
    }
    return g;
}

// Max relative mismatch, with a floor so near-zero entries compare absolutely.
inline double max_rel_diff(const halo::TensorT<double>& a, const halo::TensorT<double>& b,
                           double floor = 1e-6) {
    double worst = 0;
    for (halo::index_t k = 0; k < a.size(); ++k) {
        const double denom = std::max({std::abs(a.data()[k]), std::abs(b.data()[k]), floor});
        worst = std::max(worst, std::abs(a.data()[k] - b.data()[k]) / denom);
    }
    return worst;
}

} // namespace oracle
