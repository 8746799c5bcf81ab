#pragma once

// Row-wise RMS normalization f(x) = x/||x|| with the exact Jacobian backward,
// optional elementwise gain, and the rotation-distributivity probe. The
// forward commutes with orthogonal transforms; the backward does not once the
// upstream error stays in the original basis, which is the effect the probe
// quantifies.

#include <cstdint>

#include "hadamard.hpp"
#include "tensor.hpp"

namespace halo {

namespace detail {

template <typename T>
void check_gain(const TensorT<T>* gain, index_t dim) {
    if (gain && (gain->rows() != 1 || gain->cols() != dim))
        throw std::invalid_argument("rmsnorm: gain must be a 1 x dim row");
}

} // namespace detail

// gain, when given, is a 1 x dim row applied after normalization.
template <typename T>
TensorT<T> rmsnorm_forward(const TensorT<T>& x, const TensorT<T>* gain = nullptr) {
    detail::check_gain(gain, x.cols());
    TensorT<T> y(x.rows(), x.cols());
    for (index_t i = 0; i < x.rows(); ++i) {
        double nrm2 = 0;
        for (index_t j = 0; j < x.cols(); ++j)
            nrm2 += double(x(i, j)) * double(x(i, j));
        if (nrm2 == 0.0)
            throw numeric_error("rmsnorm: zero row");
        const double inv = 1.0 / std::sqrt(nrm2);
        for (index_t j = 0; j < x.cols(); ++j) {
            double v = double(x(i, j)) * inv;
            if (gain)
                v *= double((*gain)(0, j));
            y(i, j) = static_cast<T>(v);
        }
    }
    return y;
}

// Jacobian-vector product per row: (e' - x_hat <x_hat, e'>) / ||x||, where
// e' folds the gain in by the chain rule.
template <typename T>
TensorT<T> rmsnorm_backward(const TensorT<T>& x, const TensorT<T>& e, const TensorT<T>* gain = nullptr) {
    if (!x.same_shape(e))
        throw std::invalid_argument("rmsnorm: upstream shape mismatch");
    detail::check_gain(gain, x.cols());
    TensorT<T> out(x.rows(), x.cols());
    std::vector<double> ep(static_cast<size_t>(x.cols()));
    for (index_t i = 0; i < x.rows(); ++i) {
        double nrm2 = 0;
        for (index_t j = 0; j < x.cols(); ++j)
            nrm2 += double(x(i, j)) * double(x(i, j));
        if (nrm2 == 0.0)
            throw numeric_error("rmsnorm: zero row");
        const double nrm = std::sqrt(nrm2);
        double dot = 0;
        for (index_t j = 0; j < x.cols(); ++j) {
            double v = e(i, j);
            if (gain)
                v *= double((*gain)(0, j));
            ep[static_cast<size_t>(j)] = v;
            dot += v * double(x(i, j)) / nrm;
        }
        for (index_t j = 0; j < x.cols(); ++j) {
            const double xh = double(x(i, j)) / nrm;
            out(i, j) = static_cast<T>((ep[static_cast<size_t>(j)] - xh * dot) / nrm);
        }
    }
    return out;
}

// d loss / d gain_j = sum_i e(i,j) * x_hat(i,j), returned as a 1 x dim row.
template <typename T>
TensorT<T> rmsnorm_gain_gradient(const TensorT<T>& x, const TensorT<T>& e) {
    if (!x.same_shape(e))
        throw std::invalid_argument("rmsnorm: upstream shape mismatch");
    std::vector<double> acc(static_cast<size_t>(x.cols()), 0.0);
    for (index_t i = 0; i < x.rows(); ++i) {
        double nrm2 = 0;
        for (index_t j = 0; j < x.cols(); ++j)
            nrm2 += double(x(i, j)) * double(x(i, j));
        if (nrm2 == 0.0)
            throw numeric_error("rmsnorm: zero row");
        const double nrm = std::sqrt(nrm2);
        for (index_t j = 0; j < x.cols(); ++j)
            acc[static_cast<size_t>(j)] += double(e(i, j)) * double(x(i, j)) / nrm;
    }
    TensorT<T> g(1, x.cols());
    for (index_t j = 0; j < x.cols(); ++j)
        g(0, j) = static_cast<T>(acc[static_cast<size_t>(j)]);
    return g;
}

struct DistributivityProbe {
    double forward_gap = 0;
    double backward_gap = 0;
};

// Measures how far the normalization is from commuting with a Hadamard
// rotation Q. Forward: ||f(xQ) - f(x)Q|| vanishes since ||xQ|| = ||x||.
// Backward compares the fused order of operations: the Jacobian is taken at
// the rotated point while the upstream error stays in the original basis, so
// ||e J(xQ) - (e J(x)) Q|| stays O(||e||) for generic x, e. Re-expressing e in
// the rotated basis would cancel the gap exactly; the fused layer has no
// opportunity to do that, which is precisely what blocks pushing rotations
// through the normalization backward.
inline DistributivityProbe distributivity_probe(std::uint64_t seed, index_t dim = 64,
                                                bool identity_q = false) {
    Rng rng(seed);
    const TensorT<double> x = randn<double>(1, dim, rng);
    const TensorT<double> e = randn<double>(1, dim, rng);
    const HadamardSpec spec = build_spec(dim);
    auto rot = [&](const TensorT<double>& t) { return identity_q ? t : transform_right(t, spec); };

    DistributivityProbe p;
    p.forward_gap = frobenius_norm(sub(rmsnorm_forward(rot(x)), rot(rmsnorm_forward(x))));
    p.backward_gap = frobenius_norm(sub(rmsnorm_backward(rot(x), e), rot(rmsnorm_backward(x, e))));
    return p;
}

} // namespace halo
