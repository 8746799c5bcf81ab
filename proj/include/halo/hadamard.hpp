#pragma once

// Randomized-free Hadamard transforms for dimensions d = 2^n * m with
// m in {1, 12, 20}. The power-of-two part runs as an in-place butterfly,
// the base part as a dense +-1 multiply; normalization by 1/sqrt(d) is
// applied once at the end. H_d = H_{2^n} (x) H_m (Kronecker), so H_d is
// orthogonal but not symmetric when m > 1.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace halo {

namespace detail {

// Paley-I matrices (quadratic residues mod 11 / mod 19). Exact +-1 entries,
// H * H^T = m * I in integer arithmetic.
inline constexpr std::array<std::int8_t, 144> kBase12 = {
    +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1,
    -1, +1, +1, -1, +1, +1, +1, -1, -1, -1, +1, -1,
    -1, -1, +1, +1, -1, +1, +1, +1, -1, -1, -1, +1,
    -1, +1, -1, +1, +1, -1, +1, +1, +1, -1, -1, -1,
    -1, -1, +1, -1, +1, +1, -1, +1, +1, +1, -1, -1,
    -1, -1, -1, +1, -1, +1, +1, -1, +1, +1, +1, -1,
    -1, -1, -1, -1, +1, -1, +1, +1, -1, +1, +1, +1,
    -1, +1, -1, -1, -1, +1, -1, +1, +1, -1, +1, +1,
    -1, +1, +1, -1, -1, -1, +1, -1, +1, +1, -1, +1,
    -1, +1, +1, +1, -1, -1, -1, +1, -1, +1, +1, -1,
    -1, -1, +1, +1, +1, -1, -1, -1, +1, -1, +1, +1,
    -1, +1, -1, +1, +1, +1, -1, -1, -1, +1, -1, +1,
};

inline constexpr std::array<std::int8_t, 400> kBase20 = {
    +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1, +1,
    -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1,
    -1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1,
    -1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1,
    -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1,
    -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1,
    -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1,
    -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1,
    -1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1,
    -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1,
    -1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1, +1,
    -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1, -1,
    -1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1, +1,
    -1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1, +1,
    -1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1, +1,
    -1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1, +1,
    -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1, -1,
    -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1, -1,
    -1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1, +1,
    -1, +1, -1, -1, +1, +1, +1, +1, -1, +1, -1, +1, -1, -1, -1, -1, +1, +1, -1, +1,
};

} // namespace detail

struct HadamardSpec {
    index_t dim = 0;
    int pow2_exponent = 0;
    index_t base_dim = 1;
    std::vector<std::int8_t> base; // base_dim x base_dim, +-1, row-major
};

inline bool is_supported_hadamard_dim(index_t d) {
    if (d < 1)
        return false;
    index_t odd = d;
    int twos = 0;
    while (odd % 2 == 0) {
        odd /= 2;
        ++twos;
    }
    if (odd == 1)
        return true;
    if (odd == 3 && twos >= 2)
        return true; // 2^(n+2)*3 = 2^n*12
    if (odd == 5 && twos >= 2)
        return true; // 2^(n+2)*5 = 2^n*20
    return false;
}

inline index_t next_supported_hadamard_dim(index_t d) {
    if (d < 1)
        d = 1;
    while (!is_supported_hadamard_dim(d))
        ++d;
    return d;
}

inline HadamardSpec build_spec(index_t d) {
    if (!is_supported_hadamard_dim(d))
        throw std::invalid_argument("hadamard: dimension " + std::to_string(d) +
                                    " is not 2^n or 2^n*12 or 2^n*20");
    HadamardSpec spec;
    spec.dim = d;
    index_t odd = d;
    int twos = 0;
    while (odd % 2 == 0) {
        odd /= 2;
        ++twos;
    }
    if (odd == 1) {
        spec.pow2_exponent = twos;
        spec.base_dim = 1;
        spec.base = {1};
    } else {
        spec.pow2_exponent = twos - 2;
        spec.base_dim = odd * 4;
        const std::int8_t* src = (odd == 3) ? detail::kBase12.data() : detail::kBase20.data();
        spec.base.assign(src, src + spec.base_dim * spec.base_dim);
    }
    // base * base^T = base_dim * I, checked in exact integer arithmetic
    const index_t m = spec.base_dim;
    for (index_t i = 0; i < m; ++i) {
        for (index_t j = 0; j < m; ++j) {
            int s = 0;
            for (index_t k = 0; k < m; ++k)
                s += int(spec.base[i * m + k]) * int(spec.base[j * m + k]);
            if (s != (i == j ? int(m) : 0))
                throw std::logic_error("hadamard: base matrix is not orthogonal");
        }
    }
    return spec;
}

namespace detail {

// In-place: row <- row * (H_{2^n} (x) base), or with base^T when
// transpose_base is set. The butterfly runs over the 2^n block index with
// stride base_dim; the base multiply is dense per block.
template <typename T>
void transform_row(T* row, const HadamardSpec& spec, bool transpose_base, std::vector<T>& scratch) {
    const index_t m = spec.base_dim;
    const index_t blocks = spec.dim / m;
    for (index_t len = 1; len < blocks; len *= 2) {
        for (index_t i = 0; i < blocks; i += 2 * len) {
            for (index_t b = 0; b < len; ++b) {
                T* u = row + (i + b) * m;
                T* v = row + (i + b + len) * m;
                for (index_t l = 0; l < m; ++l) {
                    const T x = u[l];
                    const T y = v[l];
                    u[l] = x + y;
                    v[l] = x - y;
                }
            }
        }
    }
    if (m > 1) {
        scratch.resize(static_cast<size_t>(m));
        for (index_t k = 0; k < blocks; ++k) {
            T* blk = row + k * m;
            for (index_t j = 0; j < m; ++j) {
                T s = 0;
                if (transpose_base) {
                    const std::int8_t* brow = spec.base.data() + j * m;
                    for (index_t l = 0; l < m; ++l)
                        s += blk[l] * static_cast<T>(brow[l]);
                } else {
                    for (index_t l = 0; l < m; ++l)
                        s += blk[l] * static_cast<T>(spec.base[l * m + j]);
                }
                scratch[static_cast<size_t>(j)] = s;
            }
            for (index_t j = 0; j < m; ++j)
                blk[j] = scratch[static_cast<size_t>(j)];
        }
    }
    const T norm = static_cast<T>(1.0 / std::sqrt(static_cast<double>(spec.dim)));
    for (index_t j = 0; j < spec.dim; ++j)
        row[j] *= norm;
}

template <typename T>
TensorT<T> transform_rows(const TensorT<T>& a, const HadamardSpec& spec, bool transpose_base) {
    if (a.cols() != spec.dim)
        throw std::invalid_argument("hadamard: tensor has " + std::to_string(a.cols()) +
                                    " columns, spec dimension is " + std::to_string(spec.dim));
    TensorT<T> out = a;
    std::vector<T> scratch;
    for (index_t i = 0; i < out.rows(); ++i)
        transform_row(out.row(i), spec, transpose_base, scratch);
    return out;
}

} // namespace detail

// A * H
template <typename T>
TensorT<T> transform_right(const TensorT<T>& a, const HadamardSpec& spec) {
    return detail::transform_rows(a, spec, /*transpose_base=*/false);
}

// A * H^T
template <typename T>
TensorT<T> transform_right_ht(const TensorT<T>& a, const HadamardSpec& spec) {
    return detail::transform_rows(a, spec, /*transpose_base=*/true);
}

// H^T * A == transpose(transform_right(transpose(A))); shares the code path
// with transform_right so left/right pairs cancel exactly.
template <typename T>
TensorT<T> transform_left(const TensorT<T>& a, const HadamardSpec& spec) {
    return transpose(transform_right(transpose(a), spec));
}

// H * A
template <typename T>
TensorT<T> transform_left_h(const TensorT<T>& a, const HadamardSpec& spec) {
    return transpose(transform_right_ht(transpose(a), spec));
}

// Normalized H_d built directly from the Kronecker definition; oracle for the
// fast paths.
template <typename T = float>
TensorT<T> dense_matrix(const HadamardSpec& spec) {
    const index_t p = index_t(1) << spec.pow2_exponent;
    const index_t m = spec.base_dim;
    std::vector<std::int8_t> pow2(static_cast<size_t>(p) * static_cast<size_t>(p), 1);
    for (index_t len = 1; len < p; len *= 2) {
        for (index_t i = 0; i < len; ++i) {
            for (index_t j = 0; j < len; ++j) {
                const std::int8_t v = pow2[static_cast<size_t>(i * p + j)];
                pow2[static_cast<size_t>(i * p + j + len)] = v;
                pow2[static_cast<size_t>((i + len) * p + j)] = v;
                pow2[static_cast<size_t>((i + len) * p + j + len)] = static_cast<std::int8_t>(-v);
            }
        }
    }
    const T norm = static_cast<T>(1.0 / std::sqrt(static_cast<double>(spec.dim)));
    TensorT<T> h(spec.dim, spec.dim);
    for (index_t k = 0; k < p; ++k)
        for (index_t l = 0; l < m; ++l)
            for (index_t i = 0; i < p; ++i)
                for (index_t j = 0; j < m; ++j)
                    h(k * m + l, i * m + j) =
                        static_cast<T>(pow2[static_cast<size_t>(k * p + i)] * spec.base[l * m + j]) * norm;
    return h;
}

} // namespace halo
