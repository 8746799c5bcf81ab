#pragma once

// Emulated low-precision formats on top of f32/f64 storage: symmetric INT8,
// FP8 E4M3 (saturating, no NaN encoding, max 448), FP6 E3M2 (max 28), MXFP6
// (E3M2 elements, power-of-two scales over 32-wide row blocks), BF16 mantissa
// rounding, and IDENTITY passthrough. Rounding is round-to-nearest with ties
// to even everywhere. Codes are kept as working-precision reals: exact grid
// values for the FP formats, exact integers for INT8.

#include <cfenv>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "tensor_io.hpp"

namespace halo {

enum class NumericFormat : std::uint8_t {
    Int8 = 0,
    Fp8E4M3 = 1,
    Fp6E3M2 = 2,
    MxFp6E3M2 = 3,
    Bf16 = 4,
    Identity = 5,
};

inline const char* to_string(NumericFormat f) {
    switch (f) {
    case NumericFormat::Int8: return "int8";
    case NumericFormat::Fp8E4M3: return "fp8_e4m3";
    case NumericFormat::Fp6E3M2: return "fp6_e3m2";
    case NumericFormat::MxFp6E3M2: return "mxfp6_e3m2";
    case NumericFormat::Bf16: return "bf16";
    case NumericFormat::Identity: return "identity";
    }
    return "?";
}

inline std::optional<NumericFormat> format_from_string(const std::string& s) {
    for (NumericFormat f : {NumericFormat::Int8, NumericFormat::Fp8E4M3, NumericFormat::Fp6E3M2,
                            NumericFormat::MxFp6E3M2, NumericFormat::Bf16, NumericFormat::Identity}) {
        if (s == to_string(f))
            return f;
    }
    return std::nullopt;
}

// Largest representable code magnitude; the absmax of a group maps onto it.
inline double format_max(NumericFormat f) {
    switch (f) {
    case NumericFormat::Int8: return 127.0;
    case NumericFormat::Fp8E4M3: return 448.0;       // 2^8 * 1.75
    case NumericFormat::Fp6E3M2: return 28.0;        // 2^4 * 1.75
    case NumericFormat::MxFp6E3M2: return 28.0;
    case NumericFormat::Bf16: return 0x1.fep127;     // self-scaling, scale stays 1
    case NumericFormat::Identity: return std::numeric_limits<double>::infinity();
    }
    return 0;
}

enum class GranularityKind : std::uint8_t {
    PerTensor = 0,
    PerRow = 1,
    PerColumn = 2,
    Block = 3,
    MxBlock = 4, // 32 consecutive elements along each row
};

struct Granularity {
    GranularityKind kind = GranularityKind::PerTensor;
    index_t block_rows = 0;
    index_t block_cols = 0;

    static Granularity tensor() { return {GranularityKind::PerTensor, 0, 0}; }
    static Granularity row() { return {GranularityKind::PerRow, 0, 0}; }
    static Granularity column() { return {GranularityKind::PerColumn, 0, 0}; }
    static Granularity block(index_t r, index_t c) {
        if (r < 1 || c < 1)
            throw std::invalid_argument("granularity: block dims must be positive");
        return {GranularityKind::Block, r, c};
    }
    static Granularity mx() { return {GranularityKind::MxBlock, 1, 32}; }

    bool operator==(const Granularity& o) const {
        return kind == o.kind && block_rows == o.block_rows && block_cols == o.block_cols;
    }
};

inline std::string to_string(const Granularity& g) {
    switch (g.kind) {
    case GranularityKind::PerTensor: return "tensor";
    case GranularityKind::PerRow: return "row";
    case GranularityKind::PerColumn: return "column";
    case GranularityKind::Block:
        return "block:" + std::to_string(g.block_rows) + "x" + std::to_string(g.block_cols);
    case GranularityKind::MxBlock: return "mx";
    }
    return "?";
}

namespace detail {

inline index_t ceil_div(index_t a, index_t b) { return (a + b - 1) / b; }

// Scale-group geometry. Partial edge blocks are equivalent to zero-padding up
// to the block grid: padding zeros can never raise a group absmax, and an
// all-zero group falls back to scale 1 either way.
inline index_t group_count(const Granularity& g, index_t rows, index_t cols) {
    switch (g.kind) {
    case GranularityKind::PerTensor: return 1;
    case GranularityKind::PerRow: return rows;
    case GranularityKind::PerColumn: return cols;
    case GranularityKind::Block: return ceil_div(rows, g.block_rows) * ceil_div(cols, g.block_cols);
    case GranularityKind::MxBlock: return rows * ceil_div(cols, 32);
    }
    return 0;
}

inline index_t group_of(const Granularity& g, index_t cols, index_t i, index_t j) {
    switch (g.kind) {
    case GranularityKind::PerTensor: return 0;
    case GranularityKind::PerRow: return i;
    case GranularityKind::PerColumn: return j;
    case GranularityKind::Block: return (i / g.block_rows) * ceil_div(cols, g.block_cols) + j / g.block_cols;
    case GranularityKind::MxBlock: return i * ceil_div(cols, 32) + j / 32;
    }
    return 0;
}

// Round-to-nearest-even onto a binary mini-float grid with `mant_bits`
// explicit mantissa bits, smallest normal exponent `min_exp`, saturating at
// max_val. Assumes the default FE_TONEAREST environment (nearbyint
// implements the ties-to-even part).
inline double round_minifloat(double x, int mant_bits, int min_exp, double max_val) {
    if (x == 0.0)
        return 0.0;
    const double a = std::abs(x);
    int e = std::ilogb(a);
    if (e < min_exp)
        e = min_exp;
    const double step = std::ldexp(1.0, e - mant_bits);
    double q = std::nearbyint(a / step) * step;
    if (q > max_val)
        q = max_val;
    return std::copysign(q, x) + 0.0;
}

inline double round_code(double x, NumericFormat f) {
    switch (f) {
    case NumericFormat::Int8: {
        double q = std::nearbyint(x);
        if (q > 127.0)
            q = 127.0;
        if (q < -127.0)
            q = -127.0;
        return q + 0.0;
    }
    case NumericFormat::Fp8E4M3:
        return round_minifloat(x, 3, -6, 448.0);
    case NumericFormat::Fp6E3M2:
    case NumericFormat::MxFp6E3M2:
        return round_minifloat(x, 2, -2, 28.0);
    case NumericFormat::Bf16: {
        const float f32 = static_cast<float>(x);
        const std::uint32_t u = std::bit_cast<std::uint32_t>(f32);
        const std::uint32_t r = (u + 0x7fffu + ((u >> 16) & 1u)) & 0xffff0000u;
        const float out = std::bit_cast<float>(r);
        if (!std::isfinite(out)) // f32 values above the bf16 max saturate
            return std::copysign(0x1.fep127, x);
        return out + 0.0;
    }
    case NumericFormat::Identity:
        return x;
    }
    return x;
}

} // namespace detail

template <typename T>
struct QuantizedTensorT {
    NumericFormat format = NumericFormat::Identity;
    Granularity granularity;
    index_t rows = 0;
    index_t cols = 0;
    std::vector<T> codes;
    std::vector<T> scales;

    index_t size() const { return rows * cols; }
    T code(index_t i, index_t j) const { return codes[static_cast<size_t>(i * cols + j)]; }
    T scale_at(index_t i, index_t j) const {
        return scales[static_cast<size_t>(detail::group_of(granularity, cols, i, j))];
    }
};

using QuantizedTensor = QuantizedTensorT<float>;

template <typename T>
std::vector<T> compute_scales(const TensorT<T>& a, NumericFormat format, const Granularity& gran) {
    const index_t groups = detail::group_count(gran, a.rows(), a.cols());
    if (format == NumericFormat::Bf16 || format == NumericFormat::Identity)
        return std::vector<T>(static_cast<size_t>(groups), T(1));

    std::vector<double> absmax(static_cast<size_t>(groups), 0.0);
    for (index_t i = 0; i < a.rows(); ++i) {
        for (index_t j = 0; j < a.cols(); ++j) {
            const double v = std::abs(static_cast<double>(a(i, j)));
            double& m = absmax[static_cast<size_t>(detail::group_of(gran, a.cols(), i, j))];
            if (v > m)
                m = v;
        }
    }
    const double fmax = format_max(format);
    std::vector<T> scales(static_cast<size_t>(groups));
    for (index_t g = 0; g < groups; ++g) {
        const double m = absmax[static_cast<size_t>(g)];
        double s;
        if (m == 0.0) {
            s = 1.0;
        } else if (format == NumericFormat::MxFp6E3M2) {
            // power-of-two scale, smallest one that keeps the absmax inside
            // the element range
            int e = std::ilogb(m / fmax);
            if (m / std::ldexp(1.0, e) > fmax)
                ++e;
            if (e < -126)
                e = -126; // keep the scale a normal f32
            s = std::ldexp(1.0, e);
        } else {
            s = m / fmax;
        }
        scales[static_cast<size_t>(g)] = static_cast<T>(s);
    }
    return scales;
}

// Rounds A onto the format grid group by group. When `scales` is supplied it
// is used verbatim (the gathered-scale path); otherwise scales come from the
// group absmax, with 1.0 for all-zero groups.
template <typename T>
QuantizedTensorT<T> quantize(const TensorT<T>& a, NumericFormat format, const Granularity& gran,
                             const std::vector<T>* scales = nullptr) {
    if (gran.kind == GranularityKind::MxBlock && format != NumericFormat::MxFp6E3M2)
        throw std::invalid_argument("quantize: mx granularity requires the mxfp6_e3m2 format");
    if (format == NumericFormat::MxFp6E3M2 && gran.kind != GranularityKind::MxBlock)
        throw std::invalid_argument("quantize: mxfp6_e3m2 requires mx granularity");

    QuantizedTensorT<T> q;
    q.format = format;
    q.granularity = gran;
    q.rows = a.rows();
    q.cols = a.cols();

    const index_t groups = detail::group_count(gran, a.rows(), a.cols());
    if (scales) {
        if (static_cast<index_t>(scales->size()) != groups)
            throw std::invalid_argument("quantize: supplied scale count does not match granularity");
        for (T s : *scales) {
            if (!std::isfinite(s) || s <= 0)
                throw std::invalid_argument("quantize: supplied scales must be finite and positive");
        }
        q.scales = *scales;
    } else {
        q.scales = compute_scales(a, format, gran);
    }

    q.codes.resize(static_cast<size_t>(a.size()));
    for (index_t i = 0; i < a.rows(); ++i) {
        for (index_t j = 0; j < a.cols(); ++j) {
            const double s = q.scales[static_cast<size_t>(detail::group_of(gran, a.cols(), i, j))];
            const double c = detail::round_code(static_cast<double>(a(i, j)) / s, format);
            q.codes[static_cast<size_t>(i * a.cols() + j)] = static_cast<T>(c);
        }
    }
    return q;
}

template <typename T>
TensorT<T> dequantize(const QuantizedTensorT<T>& q) {
    TensorT<T> out(q.rows, q.cols);
    for (index_t i = 0; i < q.rows; ++i) {
        const index_t base = i * q.cols;
        for (index_t j = 0; j < q.cols; ++j) {
            const double s = q.scale_at(i, j);
            out.data()[base + j] = static_cast<T>(static_cast<double>(q.codes[static_cast<size_t>(base + j)]) * s);
        }
    }
    out.validate_finite();
    return out;
}

// Transposed view with shared codes/scales; granularity flips accordingly.
template <typename T>
QuantizedTensorT<T> transpose_quantized(const QuantizedTensorT<T>& q) {
    QuantizedTensorT<T> t;
    t.format = q.format;
    t.rows = q.cols;
    t.cols = q.rows;
    t.codes.resize(q.codes.size());
    for (index_t i = 0; i < q.rows; ++i)
        for (index_t j = 0; j < q.cols; ++j)
            t.codes[static_cast<size_t>(j * t.cols + i)] = q.codes[static_cast<size_t>(i * q.cols + j)];
    switch (q.granularity.kind) {
    case GranularityKind::PerTensor:
        t.granularity = q.granularity;
        t.scales = q.scales;
        break;
    case GranularityKind::PerRow:
        t.granularity = Granularity::column();
        t.scales = q.scales;
        break;
    case GranularityKind::PerColumn:
        t.granularity = Granularity::row();
        t.scales = q.scales;
        break;
    case GranularityKind::Block: {
        t.granularity = Granularity::block(q.granularity.block_cols, q.granularity.block_rows);
        const index_t nbr = detail::ceil_div(q.rows, q.granularity.block_rows);
        const index_t nbc = detail::ceil_div(q.cols, q.granularity.block_cols);
        t.scales.resize(q.scales.size());
        for (index_t r = 0; r < nbr; ++r)
            for (index_t c = 0; c < nbc; ++c)
                t.scales[static_cast<size_t>(c * nbr + r)] = q.scales[static_cast<size_t>(r * nbc + c)];
        break;
    }
    case GranularityKind::MxBlock:
        throw std::invalid_argument("transpose_quantized: mx blocks do not transpose");
    }
    return t;
}

// Quantized product A_q * B_q (or A_q * B_q^T). INT8 per-tensor pairs run on
// an integer accumulator with one double rescale at the end; everything else
// multiplies the dequantized operands in double.
template <typename T>
TensorT<T> qmatmul(const QuantizedTensorT<T>& a, const QuantizedTensorT<T>& b, bool transpose_b = false) {
    const index_t ak = a.cols;
    const index_t bk = transpose_b ? b.cols : b.rows;
    const index_t bn = transpose_b ? b.rows : b.cols;
    if (ak != bk)
        throw std::invalid_argument("qmatmul: inner dimensions disagree");

    const bool int_path = a.format == NumericFormat::Int8 && b.format == NumericFormat::Int8 &&
                          a.granularity.kind == GranularityKind::PerTensor &&
                          b.granularity.kind == GranularityKind::PerTensor;
    if (int_path) {
        std::vector<std::int32_t> ia(a.codes.size()), ib(b.codes.size());
        for (size_t k = 0; k < a.codes.size(); ++k)
            ia[k] = static_cast<std::int32_t>(a.codes[k]);
        for (size_t k = 0; k < b.codes.size(); ++k)
            ib[k] = static_cast<std::int32_t>(b.codes[k]);
        const double ss = static_cast<double>(a.scales[0]) * static_cast<double>(b.scales[0]);
        TensorT<T> c(a.rows, bn);
        for (index_t i = 0; i < a.rows; ++i) {
            const std::int32_t* arow = ia.data() + i * ak;
            for (index_t j = 0; j < bn; ++j) {
                std::int64_t acc = 0;
                if (transpose_b) {
                    const std::int32_t* brow = ib.data() + j * b.cols;
                    for (index_t k = 0; k < ak; ++k)
                        acc += static_cast<std::int64_t>(arow[k]) * brow[k];
                } else {
                    for (index_t k = 0; k < ak; ++k)
                        acc += static_cast<std::int64_t>(arow[k]) * ib[static_cast<size_t>(k * b.cols + j)];
                }
                c(i, j) = static_cast<T>(static_cast<double>(acc) * ss);
            }
        }
        c.validate_finite();
        return c;
    }

    const TensorT<T> da = dequantize(a);
    const TensorT<T> db = dequantize(b);
    return transpose_b ? matmul_nt(da, db, Accum::Double) : matmul(da, db, Accum::Double);
}

struct QuantErrorReport {
    double mse = 0;
    double max_abs_err = 0;
    double snr_db = 0; // 10*log10(signal power / noise power)
};

template <typename T>
QuantErrorReport quantization_error_report(const TensorT<T>& a, NumericFormat format, const Granularity& gran) {
    const TensorT<T> rt = dequantize(quantize(a, format, gran));
    QuantErrorReport rep;
    double sig = 0, noise = 0;
    for (index_t k = 0; k < a.size(); ++k) {
        const double v = a.data()[k];
        const double e = v - static_cast<double>(rt.data()[k]);
        sig += v * v;
        noise += e * e;
        rep.max_abs_err = std::max(rep.max_abs_err, std::abs(e));
    }
    rep.mse = a.size() > 0 ? noise / static_cast<double>(a.size()) : 0.0;
    rep.snr_db = noise == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(sig / noise);
    return rep;
}

// --- file round-trip (f32 artifacts only) ------------------------------------

inline void write_quantized_tensor(std::ostream& os, const QuantizedTensor& q) {
    const bool int8 = q.format == NumericFormat::Int8;
    detail::put_header(os, int8 ? FileDtype::QInt8 : FileDtype::QF32, q.rows, q.cols);
    detail::put_u8(os, static_cast<std::uint8_t>(q.format));
    detail::put_u8(os, static_cast<std::uint8_t>(q.granularity.kind));
    detail::put_u32(os, static_cast<std::uint32_t>(q.granularity.block_rows));
    detail::put_u32(os, static_cast<std::uint32_t>(q.granularity.block_cols));
    detail::put_u64(os, q.scales.size());
    for (float s : q.scales)
        detail::put_f32(os, s);
    if (int8) {
        for (float c : q.codes)
            os.put(static_cast<char>(static_cast<std::int8_t>(c)));
    } else {
        for (float c : q.codes)
            detail::put_f32(os, c);
    }
}

inline void write_quantized_tensor(const std::string& path, const QuantizedTensor& q) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw io_error("cannot open " + path + " for writing");
    write_quantized_tensor(os, q);
    if (!os)
        throw io_error("write failed for " + path);
}

inline QuantizedTensor read_quantized_tensor(std::istream& is) {
    const TensorFileHeader h = read_tensor_header(is);
    if (h.dtype != FileDtype::QInt8 && h.dtype != FileDtype::QF32)
        throw io_error("tensor file: not a quantized payload");
    QuantizedTensor q;
    q.rows = h.rows;
    q.cols = h.cols;
    const std::uint8_t fmt = detail::get_u8(is);
    if (fmt > static_cast<std::uint8_t>(NumericFormat::Identity))
        throw io_error("tensor file: unknown format code");
    q.format = static_cast<NumericFormat>(fmt);
    const std::uint8_t kind = detail::get_u8(is);
    if (kind > static_cast<std::uint8_t>(GranularityKind::MxBlock))
        throw io_error("tensor file: unknown granularity code");
    q.granularity.kind = static_cast<GranularityKind>(kind);
    q.granularity.block_rows = detail::get_u32(is);
    q.granularity.block_cols = detail::get_u32(is);
    const std::uint64_t nscales = detail::get_u64(is);
    if (nscales != static_cast<std::uint64_t>(detail::group_count(q.granularity, q.rows, q.cols)))
        throw io_error("tensor file: scale count does not match granularity");
    q.scales.resize(nscales);
    for (auto& s : q.scales)
        s = detail::get_f32(is);
    q.codes.resize(static_cast<size_t>(q.rows) * static_cast<size_t>(q.cols));
    if (h.dtype == FileDtype::QInt8) {
        for (auto& c : q.codes)
            c = static_cast<float>(static_cast<std::int8_t>(detail::get_u8(is)));
    } else {
        for (auto& c : q.codes)
            c = detail::get_f32(is);
    }
    return q;
}

inline QuantizedTensor read_quantized_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw io_error("cannot open " + path);
    return read_quantized_tensor(is);
}

} // namespace halo
