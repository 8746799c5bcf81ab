#pragma once

// Dense row-major 2-D tensors and the small numeric toolbox used everywhere
// else: matmul with selectable accumulation width, outlier statistics and
// injection, and a reproducible RNG.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace halo {

using index_t = std::int64_t;

// Raised when a tensor would hold NaN/Inf, or when training blows up.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Axis { Rows, Columns };
enum class Accum { Single, Double };

template <typename T>
class TensorT {
    static_assert(std::is_floating_point_v<T>);

public:
    TensorT() = default;

    TensorT(index_t rows, index_t cols)
        : rows_(rows), cols_(cols), data_(checked_size(rows, cols), T(0)) {}

    TensorT(index_t rows, index_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != checked_size(rows, cols))
            throw std::invalid_argument("tensor: value count does not match shape");
        validate_finite();
    }

    TensorT(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = static_cast<index_t>(init.size());
        cols_ = rows_ > 0 ? static_cast<index_t>(init.begin()->size()) : 0;
        data_.reserve(checked_size(rows_, cols_));
        for (const auto& r : init) {
            if (static_cast<index_t>(r.size()) != cols_)
                throw std::invalid_argument("tensor: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
        validate_finite();
    }

    static TensorT filled(index_t rows, index_t cols, T value) {
        TensorT t(rows, cols);
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    index_t rows() const { return rows_; }
    index_t cols() const { return cols_; }
    index_t size() const { return static_cast<index_t>(data_.size()); }
    bool same_shape(const TensorT& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    T& operator()(index_t i, index_t j) {
        assert(i >= 0 && i < rows_ && j >= 0 && j < cols_);
        return data_[static_cast<size_t>(i * cols_ + j)];
    }
    T operator()(index_t i, index_t j) const {
        assert(i >= 0 && i < rows_ && j >= 0 && j < cols_);
        return data_[static_cast<size_t>(i * cols_ + j)];
    }

    T* row(index_t i) { return data_.data() + i * cols_; }
    const T* row(index_t i) const { return data_.data() + i * cols_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    const std::vector<T>& values() const { return data_; }

    // Scans for NaN/Inf; call after writing through data()/operator().
    void validate_finite() const {
        for (size_t k = 0; k < data_.size(); ++k) {
            if (!std::isfinite(data_[k]))
                throw numeric_error("tensor: non-finite value at flat index " + std::to_string(k));
        }
    }

private:
    static size_t checked_size(index_t rows, index_t cols) {
        if (rows < 0 || cols < 0)
            throw std::invalid_argument("tensor: negative dimension");
        return static_cast<size_t>(rows) * static_cast<size_t>(cols);
    }

    index_t rows_ = 0;
    index_t cols_ = 0;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
void assert_finite(const TensorT<T>& t, const char* what) {
    try {
        t.validate_finite();
    } catch (const numeric_error&) {
        throw numeric_error(std::string(what) + ": non-finite value");
    }
}

namespace detail {

template <typename T>
void require_shape(const TensorT<T>& t, index_t rows, index_t cols, const char* what) {
    if (t.rows() != rows || t.cols() != cols)
        throw std::invalid_argument(std::string(what) + ": shape mismatch, got " +
                                    std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                                    ", want " + std::to_string(rows) + "x" + std::to_string(cols));
}

template <typename T, typename A>
TensorT<T> matmul_acc(const TensorT<T>& a, const TensorT<T>& b) {
    TensorT<T> c(a.rows(), b.cols());
    const index_t n = b.cols();
    std::vector<A> acc(static_cast<size_t>(n));
    for (index_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), A(0));
        for (index_t k = 0; k < a.cols(); ++k) {
            const A aik = static_cast<A>(a(i, k));
            const T* brow = b.row(k);
            for (index_t j = 0; j < n; ++j)
                acc[static_cast<size_t>(j)] += aik * static_cast<A>(brow[j]);
        }
        T* crow = c.row(i);
        for (index_t j = 0; j < n; ++j)
            crow[j] = static_cast<T>(acc[static_cast<size_t>(j)]);
    }
    return c;
}

template <typename T, typename A>
TensorT<T> matmul_nt_acc(const TensorT<T>& a, const TensorT<T>& b) {
    TensorT<T> c(a.rows(), b.rows());
    for (index_t i = 0; i < a.rows(); ++i) {
        const T* arow = a.row(i);
        for (index_t j = 0; j < b.rows(); ++j) {
            const T* brow = b.row(j);
            A s = 0;
            for (index_t k = 0; k < a.cols(); ++k)
                s += static_cast<A>(arow[k]) * static_cast<A>(brow[k]);
            c(i, j) = static_cast<T>(s);
        }
    }
    return c;
}

template <typename T, typename A>
TensorT<T> matmul_tn_acc(const TensorT<T>& a, const TensorT<T>& b) {
    TensorT<T> c(a.cols(), b.cols());
    const index_t n = b.cols();
    std::vector<A> acc(static_cast<size_t>(a.cols()) * static_cast<size_t>(n), A(0));
    for (index_t k = 0; k < a.rows(); ++k) {
        const T* arow = a.row(k);
        const T* brow = b.row(k);
        for (index_t i = 0; i < a.cols(); ++i) {
            const A aki = static_cast<A>(arow[i]);
            A* accrow = acc.data() + static_cast<size_t>(i) * static_cast<size_t>(n);
            for (index_t j = 0; j < n; ++j)
                accrow[j] += aki * static_cast<A>(brow[j]);
        }
    }
    for (index_t i = 0; i < c.rows(); ++i)
        for (index_t j = 0; j < n; ++j)
            c(i, j) = static_cast<T>(acc[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)]);
    return c;
}

} // namespace detail

// C = A * B
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, Accum accum = Accum::Single) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree");
    TensorT<T> c = (accum == Accum::Double) ? detail::matmul_acc<T, double>(a, b)
                                            : detail::matmul_acc<T, T>(a, b);
    c.validate_finite();
    return c;
}

// C = A * B^T
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b, Accum accum = Accum::Single) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    TensorT<T> c = (accum == Accum::Double) ? detail::matmul_nt_acc<T, double>(a, b)
                                            : detail::matmul_nt_acc<T, T>(a, b);
    c.validate_finite();
    return c;
}

// C = A^T * B
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b, Accum accum = Accum::Single) {
    if (a.rows() != b.rows())
        throw std::invalid_argument("matmul_tn: inner dimensions disagree");
    TensorT<T> c = (accum == Accum::Double) ? detail::matmul_tn_acc<T, double>(a, b)
                                            : detail::matmul_tn_acc<T, T>(a, b);
    c.validate_finite();
    return c;
}

// Appends zero rows until the tensor has `rows` rows.
template <typename T>
TensorT<T> pad_rows(const TensorT<T>& a, index_t rows) {
    if (rows < a.rows())
        throw std::invalid_argument("pad_rows: target smaller than tensor");
    if (rows == a.rows())
        return a;
    TensorT<T> out(rows, a.cols());
    std::copy(a.data(), a.data() + a.size(), out.data());
    return out;
}

// First `rows` rows.
template <typename T>
TensorT<T> take_rows(const TensorT<T>& a, index_t rows) {
    if (rows > a.rows())
        throw std::invalid_argument("take_rows: target larger than tensor");
    if (rows == a.rows())
        return a;
    TensorT<T> out(rows, a.cols());
    std::copy(a.data(), a.data() + out.size(), out.data());
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    TensorT<T> t(a.cols(), a.rows());
    for (index_t i = 0; i < a.rows(); ++i)
        for (index_t j = 0; j < a.cols(); ++j)
            t(j, i) = a(i, j);
    return t;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch");
    TensorT<T> c(a.rows(), a.cols());
    for (index_t k = 0; k < a.size(); ++k)
        c.data()[k] = a.data()[k] + b.data()[k];
    return c;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("sub: shape mismatch");
    TensorT<T> c(a.rows(), a.cols());
    for (index_t k = 0; k < a.size(); ++k)
        c.data()[k] = a.data()[k] - b.data()[k];
    return c;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> c(a.rows(), a.cols());
    for (index_t k = 0; k < a.size(); ++k)
        c.data()[k] = a.data()[k] * s;
    return c;
}

template <typename T>
TensorT<T> elementwise_mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("elementwise_mul: shape mismatch");
    TensorT<T> c(a.rows(), a.cols());
    for (index_t k = 0; k < a.size(); ++k)
        c.data()[k] = a.data()[k] * b.data()[k];
    return c;
}

template <typename T>
double dot_flat(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("dot_flat: shape mismatch");
    double s = 0;
    for (index_t k = 0; k < a.size(); ++k)
        s += static_cast<double>(a.data()[k]) * static_cast<double>(b.data()[k]);
    return s;
}

template <typename T>
double frobenius_norm(const TensorT<T>& a) {
    double s = 0;
    for (index_t k = 0; k < a.size(); ++k) {
        const double v = a.data()[k];
        s += v * v;
    }
    return std::sqrt(s);
}

template <typename T>
T max_abs(const TensorT<T>& a) {
    T m = 0;
    for (index_t k = 0; k < a.size(); ++k)
        m = std::max(m, std::abs(a.data()[k]));
    return m;
}

template <typename T>
double mean_abs(const TensorT<T>& a) {
    if (a.size() == 0)
        return 0;
    double s = 0;
    for (index_t k = 0; k < a.size(); ++k)
        s += std::abs(static_cast<double>(a.data()[k]));
    return s / static_cast<double>(a.size());
}

// Cosine of the flattened tensors.
template <typename T>
double cosine_similarity(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("cosine_similarity: shape mismatch");
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine_similarity: zero-norm input");
    return dot_flat(a, b) / (na * nb);
}

// --- outlier statistics and injection ---------------------------------------

struct SliceStats {
    index_t slice_index = 0;
    double max_abs = 0;
    index_t outlier_count = 0;
};

struct OutlierReport {
    Axis axis = Axis::Columns;
    double mean_abs = 0;
    double threshold = 0; // multiplier * mean_abs
    std::vector<SliceStats> slices;
    index_t total_outliers = 0;
};

// An entry is an outlier when |x| >= multiplier * mean(|A|), mean taken over
// the whole tensor.
template <typename T>
OutlierReport outlier_stats(const TensorT<T>& a, Axis axis, double multiplier = 10.0) {
    if (multiplier <= 0)
        throw std::invalid_argument("outlier_stats: multiplier must be positive");
    OutlierReport rep;
    rep.axis = axis;
    rep.mean_abs = mean_abs(a);
    rep.threshold = multiplier * rep.mean_abs;
    const index_t nslices = (axis == Axis::Rows) ? a.rows() : a.cols();
    rep.slices.assign(static_cast<size_t>(nslices), SliceStats{});
    for (index_t s = 0; s < nslices; ++s)
        rep.slices[static_cast<size_t>(s)].slice_index = s;
    for (index_t i = 0; i < a.rows(); ++i) {
        for (index_t j = 0; j < a.cols(); ++j) {
            const double v = std::abs(static_cast<double>(a(i, j)));
            SliceStats& st = rep.slices[static_cast<size_t>(axis == Axis::Rows ? i : j)];
            st.max_abs = std::max(st.max_abs, v);
            if (rep.threshold > 0 && v >= rep.threshold) {
                ++st.outlier_count;
                ++rep.total_outliers;
            }
        }
    }
    return rep;
}

// Which slices get magnified, and by how much. With `channels` empty and
// `random_count` > 0, inject_outliers picks that many distinct slices from
// its seed.
struct OutlierProfile {
    std::vector<index_t> channels;
    double magnification = 1.0;
    Axis axis = Axis::Columns;
    index_t random_count = 0;
};

// --- RNG ---------------------------------------------------------------------

// mt19937_64 supplies the bits (fully specified by the standard); the
// uniform->normal conversion is done by hand because std::normal_distribution
// is implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [lo, hi).
    std::int64_t range(std::int64_t lo, std::int64_t hi) {
        assert(hi > lo);
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo);
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0;
    bool has_spare_ = false;
};

template <typename T = float>
TensorT<T> randn(index_t rows, index_t cols, Rng& rng, double stddev = 1.0) {
    TensorT<T> t(rows, cols);
    for (index_t k = 0; k < t.size(); ++k)
        t.data()[k] = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <typename T = float>
TensorT<T> randn(index_t rows, index_t cols, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return randn<T>(rows, cols, rng, stddev);
}

namespace detail {

inline std::vector<index_t> pick_distinct(index_t count, index_t limit, Rng& rng) {
    assert(count <= limit);
    std::vector<index_t> all(static_cast<size_t>(limit));
    for (index_t i = 0; i < limit; ++i)
        all[static_cast<size_t>(i)] = i;
    for (index_t i = 0; i < count; ++i) {
        const index_t j = rng.range(i, limit);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    all.resize(static_cast<size_t>(count));
    return all;
}

} // namespace detail

template <typename T>
TensorT<T> inject_outliers(const TensorT<T>& a, const OutlierProfile& profile, std::uint64_t seed = 0) {
    if (profile.magnification < 1.0)
        throw std::invalid_argument("inject_outliers: magnification must be >= 1");
    const index_t limit = (profile.axis == Axis::Rows) ? a.rows() : a.cols();
    std::vector<index_t> channels = profile.channels;
    if (channels.empty() && profile.random_count > 0) {
        if (profile.random_count > limit)
            throw std::invalid_argument("inject_outliers: random_count exceeds slice count");
        Rng rng(seed);
        channels = detail::pick_distinct(profile.random_count, limit, rng);
    }
    for (index_t c : channels) {
        if (c < 0 || c >= limit)
            throw std::invalid_argument("inject_outliers: channel index out of range");
    }
    TensorT<T> out = a;
    const T m = static_cast<T>(profile.magnification);
    for (index_t c : channels) {
        if (profile.axis == Axis::Rows) {
            T* r = out.row(c);
            for (index_t j = 0; j < out.cols(); ++j)
                r[j] *= m;
        } else {
            for (index_t i = 0; i < out.rows(); ++i)
                out(i, c) *= m;
        }
    }
    return out;
}

} // namespace halo
