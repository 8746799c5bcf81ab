#pragma once

// Binary tensor container and CSV emission.
//
// Layout (all integers little-endian):
//   magic   "HALT"
//   version u32 = 1
//   dtype   u8   0 = f32, 1 = f64, 2 = int8 codes + f32 scales,
//                3 = f32 codes + f32 scales (FP-emulation formats)
//   rank    u8 = 2
//   rows    u64
//   cols    u64
//   payload (dtype-specific; quantized payloads are defined in quantize.hpp)

#include <bit>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <string>

#include "tensor.hpp"

namespace halo {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr char kTensorMagic[4] = {'H', 'A', 'L', 'T'};

enum class FileDtype : std::uint8_t {
    F32 = 0,
    F64 = 1,
    QInt8 = 2,
    QF32 = 3,
};

namespace detail {

inline void put_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::ostream& os, float v) {
    put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::ostream& os, double v) {
    put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline std::uint8_t get_u8(std::istream& is) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof())
        throw io_error("tensor file: truncated");
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(get_u8(is)) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is) {
    return std::bit_cast<float>(get_u32(is));
}

inline double get_f64(std::istream& is) {
    return std::bit_cast<double>(get_u64(is));
}

inline void put_header(std::ostream& os, FileDtype dtype, index_t rows, index_t cols) {
    os.write(kTensorMagic, 4);
    put_u32(os, kTensorFileVersion);
    put_u8(os, static_cast<std::uint8_t>(dtype));
    put_u8(os, 2); // rank
    put_u64(os, static_cast<std::uint64_t>(rows));
    put_u64(os, static_cast<std::uint64_t>(cols));
}

template <typename T>
constexpr FileDtype dtype_of() {
    if constexpr (std::is_same_v<T, float>)
        return FileDtype::F32;
    else
        return FileDtype::F64;
}

} // namespace detail

struct TensorFileHeader {
    std::uint32_t version = 0;
    FileDtype dtype = FileDtype::F32;
    index_t rows = 0;
    index_t cols = 0;
};

// Reads and checks magic/version/rank; leaves the stream at the payload.
inline TensorFileHeader read_tensor_header(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (is.gcount() != 4 || std::string(magic, 4) != std::string(kTensorMagic, 4))
        throw io_error("tensor file: bad magic");
    TensorFileHeader h;
    h.version = detail::get_u32(is);
    if (h.version != kTensorFileVersion)
        throw io_error("tensor file: unsupported version " + std::to_string(h.version));
    const std::uint8_t dtype = detail::get_u8(is);
    if (dtype > 3)
        throw io_error("tensor file: unknown dtype code " + std::to_string(dtype));
    h.dtype = static_cast<FileDtype>(dtype);
    const std::uint8_t rank = detail::get_u8(is);
    if (rank != 2)
        throw io_error("tensor file: unsupported rank " + std::to_string(rank));
    h.rows = static_cast<index_t>(detail::get_u64(is));
    h.cols = static_cast<index_t>(detail::get_u64(is));
    if (h.rows < 0 || h.cols < 0)
        throw io_error("tensor file: bad shape");
    return h;
}

inline TensorFileHeader probe_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw io_error("cannot open " + path);
    return read_tensor_header(is);
}

template <typename T>
void write_tensor(std::ostream& os, const TensorT<T>& t) {
    detail::put_header(os, detail::dtype_of<T>(), t.rows(), t.cols());
    for (index_t k = 0; k < t.size(); ++k) {
        if constexpr (std::is_same_v<T, float>)
            detail::put_f32(os, t.data()[k]);
        else
            detail::put_f64(os, t.data()[k]);
    }
}

template <typename T>
void write_tensor(const std::string& path, const TensorT<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw io_error("cannot open " + path + " for writing");
    write_tensor(os, t);
    if (!os)
        throw io_error("write failed for " + path);
}

template <typename T>
TensorT<T> read_tensor(std::istream& is) {
    const TensorFileHeader h = read_tensor_header(is);
    if (h.dtype != detail::dtype_of<T>())
        throw io_error("tensor file: dtype does not match requested scalar type");
    TensorT<T> t(h.rows, h.cols);
    for (index_t k = 0; k < t.size(); ++k) {
        if constexpr (std::is_same_v<T, float>)
            t.data()[k] = detail::get_f32(is);
        else
            t.data()[k] = detail::get_f64(is);
    }
    t.validate_finite();
    return t;
}

template <typename T>
TensorT<T> read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw io_error("cannot open " + path);
    return read_tensor<T>(is);
}

// header: slice_index,max_abs,outlier_count
inline void write_outlier_csv(std::ostream& os, const OutlierReport& rep) {
    os << "slice_index,max_abs,outlier_count\n";
    for (const SliceStats& s : rep.slices)
        os << s.slice_index << "," << s.max_abs << "," << s.outlier_count << "\n";
}

inline void write_outlier_csv(const std::string& path, const OutlierReport& rep) {
    std::ofstream os(path);
    if (!os)
        throw io_error("cannot open " + path + " for writing");
    write_outlier_csv(os, rep);
}

} // namespace halo
