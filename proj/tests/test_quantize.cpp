#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "halo/hadamard.hpp"
#include "halo/quantize.hpp"
#include "support/format_oracle.hpp"

using namespace halo;

namespace {

std::vector<double> probe_values(const std::vector<double>& grid, int log2_lo, int log2_hi,
                                 std::uint64_t seed) {
    std::vector<double> xs;
    // every grid value must be a fixpoint
    for (double g : grid)
        xs.push_back(g);
    // every exact midpoint exercises the tie rule
    for (size_t k = 0; k + 1 < grid.size(); ++k)
        xs.push_back(0.5 * (grid[k] + grid[k + 1]));
    // log-uniform random fill across the dynamic range, plus overflow probes
    Rng rng(seed);
    for (int t = 0; t < 4000; ++t) {
        const double mag = std::ldexp(1.0 + rng.uniform(), int(rng.range(log2_lo, log2_hi + 1)));
        xs.push_back(rng.uniform() < 0.5 ? mag : -mag);
    }
    xs.push_back(grid.back() * 3);
    xs.push_back(grid.front() * 3);
    return xs;
}

} // namespace

TEST_CASE("fp8 e4m3 rounding matches the exhaustive grid oracle") {
    const auto& grid = oracle::e4m3_values();
    CHECK(grid.size() == 2 * 126 + 1); // 126 nonzero magnitudes, zero counted once
    CHECK(grid.back() == 448.0);
    for (double x : probe_values(grid, -12, 10, 77))
        REQUIRE(detail::round_code(x, NumericFormat::Fp8E4M3) == oracle::nearest_in_grid(x, grid));
}

TEST_CASE("fp6 e3m2 rounding matches the exhaustive grid oracle") {
    const auto& grid = oracle::e3m2_values();
    CHECK(grid.back() == 28.0);
    for (double x : probe_values(grid, -8, 7, 78)) {
        REQUIRE(detail::round_code(x, NumericFormat::Fp6E3M2) == oracle::nearest_in_grid(x, grid));
        REQUIRE(detail::round_code(x, NumericFormat::MxFp6E3M2) == oracle::nearest_in_grid(x, grid));
    }
}

TEST_CASE("int8 rounding: nearest with ties to even, -128 never appears") {
    Rng rng(79);
    for (int t = 0; t < 1000; ++t) {
        const double x = (rng.uniform() - 0.5) * 400.0;
        REQUIRE(detail::round_code(x, NumericFormat::Int8) == oracle::int8_nearest(x));
    }
    CHECK(detail::round_code(63.5, NumericFormat::Int8) == 64.0);
    CHECK(detail::round_code(62.5, NumericFormat::Int8) == 62.0);
    CHECK(detail::round_code(-127.5, NumericFormat::Int8) == -127.0);
    CHECK(detail::round_code(-1000.0, NumericFormat::Int8) == -127.0);
    CHECK(detail::round_code(-0.25, NumericFormat::Int8) == 0.0);
    CHECK(!std::signbit(detail::round_code(-0.25, NumericFormat::Int8)));
}

TEST_CASE("pinned scalar cases") {
    const Tensor a({{-2.0f, 1.0f}});
    const QuantizedTensor q = quantize(a, NumericFormat::Int8, Granularity::tensor());
    CHECK(q.scales[0] == float(2.0 / 127.0));
    CHECK(q.codes[0] == -127.0f);
    CHECK(q.codes[1] == 64.0f); // 1/scale lands just above 63.5

    std::vector<float> unit{1.0f};
    const QuantizedTensor q250 =
        quantize(Tensor({{250.0f}}), NumericFormat::Fp8E4M3, Granularity::tensor(), &unit);
    CHECK(q250.codes[0] == 256.0f);
    const QuantizedTensor q30 =
        quantize(Tensor({{30.0f}}), NumericFormat::Fp6E3M2, Granularity::tensor(), &unit);
    CHECK(q30.codes[0] == 28.0f);

    const Tensor b({{1.0f, 0.0f}, {0.0f, 448.0f}});
    const QuantizedTensor qb = quantize(b, NumericFormat::Fp8E4M3, Granularity::row());
    REQUIRE(qb.scales.size() == 2);
    CHECK(qb.scales[0] == float(1.0 / 448.0));
    CHECK(qb.scales[1] == 1.0f);
    CHECK(qb.code(1, 1) == 448.0f);
}

TEST_CASE("scale rules") {
    const Tensor z = Tensor::filled(3, 4, 0.0f);
    const QuantizedTensor qz = quantize(z, NumericFormat::Int8, Granularity::row());
    for (float s : qz.scales)
        CHECK(s == 1.0f);
    for (float c : qz.codes)
        CHECK(c == 0.0f);

    // supplied scales are used verbatim
    std::vector<float> s{0.5f};
    const QuantizedTensor q = quantize(Tensor({{3.1f}}), NumericFormat::Int8, Granularity::tensor(), &s);
    CHECK(q.scales[0] == 0.5f);
    CHECK(q.codes[0] == 6.0f);

    std::vector<float> wrong{0.5f, 0.5f};
    CHECK_THROWS_AS(quantize(Tensor({{1.0f}}), NumericFormat::Int8, Granularity::tensor(), &wrong),
                    std::invalid_argument);
    std::vector<float> neg{-1.0f};
    CHECK_THROWS_AS(quantize(Tensor({{1.0f}}), NumericFormat::Int8, Granularity::tensor(), &neg),
                    std::invalid_argument);
    std::vector<float> inf{std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(quantize(Tensor({{1.0f}}), NumericFormat::Int8, Granularity::tensor(), &inf),
                    std::invalid_argument);

    // mx format and mx granularity only pair with each other
    CHECK_THROWS_AS(quantize(Tensor({{1.0f}}), NumericFormat::Int8, Granularity::mx()),
                    std::invalid_argument);
    CHECK_THROWS_AS(quantize(Tensor({{1.0f}}), NumericFormat::MxFp6E3M2, Granularity::tensor()),
                    std::invalid_argument);
    CHECK_THROWS_AS(Granularity::block(0, 4), std::invalid_argument);
}

TEST_CASE("block granularity geometry on a ragged shape") {
    const Tensor a({{1.0f, 1.0f, 8.0f}, {1.0f, 1.0f, 8.0f}, {4.0f, 4.0f, 2.0f}});
    const QuantizedTensor q = quantize(a, NumericFormat::Int8, Granularity::block(2, 2));
    REQUIRE(q.scales.size() == 4);
    CHECK(q.scale_at(0, 0) == float(1.0 / 127.0));
    CHECK(q.scale_at(0, 2) == float(8.0 / 127.0));
    CHECK(q.scale_at(2, 0) == float(4.0 / 127.0));
    CHECK(q.scale_at(2, 2) == float(2.0 / 127.0));
    CHECK(q.code(2, 2) == 127.0f);
}

TEST_CASE("mx scales are powers of two, partial trailing block included") {
    Rng rng(81);
    const Tensor a = randn<float>(3, 40, rng);
    const QuantizedTensor q = quantize(a, NumericFormat::MxFp6E3M2, Granularity::mx());
    REQUIRE(q.scales.size() == 6); // ceil(40/32) = 2 groups per row
    for (float s : q.scales) {
        int e = 0;
        CHECK(std::frexp(s, &e) == 0.5f);
    }
    // the partial block covers columns 32..39 only
    double m = 0;
    for (index_t j = 32; j < 40; ++j)
        m = std::max(m, std::abs(double(a(0, j))));
    CHECK(double(q.scale_at(0, 32)) * 28.0 >= m);
    CHECK(double(q.scale_at(0, 32)) * 28.0 < 4 * m + 1);

    std::vector<float> pinned = {1.0f};
    (void)pinned;
    const QuantizedTensor q1 = quantize(Tensor({{1.0f}}), NumericFormat::MxFp6E3M2, Granularity::mx());
    CHECK(q1.scales[0] == std::ldexp(1.0f, -4)); // 1/2^-5 = 32 > 28, so bump
    const QuantizedTensor q28 = quantize(Tensor({{28.0f}}), NumericFormat::MxFp6E3M2, Granularity::mx());
    CHECK(q28.scales[0] == 1.0f);
    const QuantizedTensor q29 = quantize(Tensor({{29.0f}}), NumericFormat::MxFp6E3M2, Granularity::mx());
    CHECK(q29.scales[0] == 2.0f);
}

TEST_CASE("bf16 spot values") {
    auto r = [](double x) { return detail::round_code(x, NumericFormat::Bf16); };
    CHECK(r(1.0) == 1.0);
    CHECK(r(3.0) == 3.0);
    CHECK(r(1.0 + std::ldexp(1.0, -9)) == 1.0);
    CHECK(r(1.0 + 3 * std::ldexp(1.0, -9)) == 1.0 + std::ldexp(1.0, -7));
    CHECK(r(1.0 + std::ldexp(1.0, -8)) == 1.0); // tie, even mantissa wins
    CHECK(r(-1.5) == -1.5);
    CHECK(r(3.4e38) == 0x1.fep127);
    CHECK(r(-3.4e38) == -0x1.fep127);

    const QuantizedTensor q = quantize(Tensor({{1.7f, -0.33f}}), NumericFormat::Bf16, Granularity::tensor());
    CHECK(q.scales[0] == 1.0f);
    const Tensor d = dequantize(q);
    CHECK(d.data()[0] == q.codes[0]);
    CHECK(d.data()[1] == q.codes[1]);
}

TEST_CASE("identity format is a bit-exact passthrough") {
    Rng rng(82);
    const Tensor a = randn<float>(4, 5, rng);
    const QuantizedTensor q = quantize(a, NumericFormat::Identity, Granularity::tensor());
    const Tensor d = dequantize(q);
    for (index_t k = 0; k < a.size(); ++k)
        REQUIRE(d.data()[k] == a.data()[k]);
}

TEST_CASE("negation symmetry") {
    Rng rng(83);
    const Tensor a = randn<float>(6, 9, rng);
    const Tensor na = scale(a, -1.0f);
    for (NumericFormat f : {NumericFormat::Int8, NumericFormat::Fp8E4M3, NumericFormat::Fp6E3M2}) {
        const QuantizedTensor q = quantize(a, f, Granularity::row());
        const QuantizedTensor qn = quantize(na, f, Granularity::row());
        REQUIRE(q.scales == qn.scales);
        for (size_t k = 0; k < q.codes.size(); ++k)
            REQUIRE(qn.codes[k] == -q.codes[k] + 0.0f);
    }
    const QuantizedTensor q = quantize(a, NumericFormat::MxFp6E3M2, Granularity::mx());
    const QuantizedTensor qn = quantize(na, NumericFormat::MxFp6E3M2, Granularity::mx());
    REQUIRE(q.scales == qn.scales);
}

TEST_CASE("saturation bound holds") {
    std::vector<float> unit{1.0f};
    for (auto [f, mx] : {std::pair{NumericFormat::Int8, 127.0}, {NumericFormat::Fp8E4M3, 448.0},
                         {NumericFormat::Fp6E3M2, 28.0}}) {
        const QuantizedTensor q =
            quantize(Tensor({{1e6f, -1e6f}}), f, Granularity::tensor(), &unit);
        const Tensor d = dequantize(q);
        CHECK(d.data()[0] == float(mx));
        CHECK(d.data()[1] == float(-mx));
    }
}

TEST_CASE("re-quantization is a code-level fixpoint") {
    Rng rng(84);
    const Tensor a = randn<float>(17, 23, rng);
    const std::vector<Granularity> grans = {Granularity::tensor(), Granularity::row(),
                                            Granularity::column(), Granularity::block(3, 5)};
    for (NumericFormat f : {NumericFormat::Int8, NumericFormat::Fp8E4M3, NumericFormat::Fp6E3M2,
                            NumericFormat::Bf16}) {
        for (const Granularity& g : grans) {
            const QuantizedTensor q1 = quantize(a, f, g);
            const Tensor d1 = dequantize(q1);
            const QuantizedTensor q2 = quantize(d1, f, g);
            REQUIRE(q2.codes == q1.codes);
            // scales may legitimately drift by one ulp; values stay put to one ulp
            const Tensor d2 = dequantize(q2);
            for (index_t k = 0; k < d1.size(); ++k)
                REQUIRE(d2.data()[k] == Catch::Approx(d1.data()[k]).epsilon(3e-7).margin(0));
        }
    }
    // mx: the power-of-two scale may drop an exponent once, but reconstructed
    // values are bitwise stable and the second pass is an exact fixpoint
    const QuantizedTensor m1 = quantize(a, NumericFormat::MxFp6E3M2, Granularity::mx());
    const Tensor md1 = dequantize(m1);
    const QuantizedTensor m2 = quantize(md1, NumericFormat::MxFp6E3M2, Granularity::mx());
    const Tensor md2 = dequantize(m2);
    for (index_t k = 0; k < md1.size(); ++k)
        REQUIRE(md2.data()[k] == md1.data()[k]);
    const QuantizedTensor m3 = quantize(md2, NumericFormat::MxFp6E3M2, Granularity::mx());
    REQUIRE(m3.codes == m2.codes);
    REQUIRE(m3.scales == m2.scales);
}

TEST_CASE("grid values reconstruct exactly") {
    Rng rng(85);
    const Tensor a = dequantize(quantize(randn<float>(8, 8, rng), NumericFormat::Fp6E3M2,
                                         Granularity::tensor()));
    const QuantErrorReport rep = quantization_error_report(a, NumericFormat::Fp6E3M2, Granularity::tensor());
    CHECK(rep.mse == 0.0);
    CHECK(rep.max_abs_err == 0.0);
    CHECK(std::isinf(rep.snr_db));
}

TEST_CASE("int8 qmatmul matches the dequantized oracle") {
    Rng rng(86);
    for (int t = 0; t < 20; ++t) {
        const Tensor a = randn<float>(9, 16, rng);
        const Tensor b = randn<float>(16, 11, rng);
        const QuantizedTensor qa = quantize(a, NumericFormat::Int8, Granularity::tensor());
        const QuantizedTensor qb = quantize(b, NumericFormat::Int8, Granularity::tensor());
        const Tensor fast = qmatmul(qa, qb);
        const Tensor ref = matmul(dequantize(qa), dequantize(qb), Accum::Double);
        // the paths differ only in where operand rounding happens; compare
        // normwise (entries near zero see benign cancellation blowup)
        CHECK(frobenius_norm(sub(fast, ref)) / frobenius_norm(ref) < 1e-6);
        // transpose_b against the materialized transpose
        const QuantizedTensor qbt = transpose_quantized(qb);
        const Tensor fast_t = qmatmul(qa, qbt, true);
        for (index_t k = 0; k < fast.size(); ++k)
            REQUIRE(fast_t.data()[k] == fast.data()[k]);
    }
}

TEST_CASE("qmatmul pinned cases") {
    // codes 127 x 127 with scales 1/127 each lands on 1.0 exactly
    const QuantizedTensor one =
        quantize(Tensor({{1.0f}}), NumericFormat::Int8, Granularity::tensor());
    CHECK(one.codes[0] == 127.0f);
    const Tensor p = qmatmul(one, one);
    CHECK(p.data()[0] == 1.0f);

    // identity-format operands reduce to the exact product
    Rng rng(87);
    const Tensor eye = [&] {
        Tensor t = Tensor::filled(5, 5, 0.0f);
        for (index_t i = 0; i < 5; ++i)
            t(i, i) = 1.0f;
        return t;
    }();
    const Tensor b = randn<float>(5, 7, rng);
    const Tensor r = qmatmul(quantize(eye, NumericFormat::Identity, Granularity::tensor()),
                             quantize(b, NumericFormat::Identity, Granularity::tensor()));
    for (index_t k = 0; k < b.size(); ++k)
        REQUIRE(r.data()[k] == b.data()[k]);

    const QuantizedTensor bad = quantize(randn<float>(3, 4, rng), NumericFormat::Int8, Granularity::tensor());
    CHECK_THROWS_AS(qmatmul(bad, bad), std::invalid_argument);
}

TEST_CASE("rotating outlier columns shrinks int8 error") {
    OutlierProfile p;
    p.channels = {3, 40};
    p.magnification = 30.0;
    p.axis = Axis::Columns;
    const Tensor a = inject_outliers(randn<float>(64, 64, 88), p);
    const Tensor ah = transform_right(a, build_spec(64));
    const auto raw = quantization_error_report(a, NumericFormat::Int8, Granularity::tensor());
    const auto rot = quantization_error_report(ah, NumericFormat::Int8, Granularity::tensor());
    CHECK(rot.mse < raw.mse);
    CHECK(rot.snr_db > raw.snr_db);
}

TEST_CASE("transpose_quantized preserves per-element scale and value") {
    Rng rng(89);
    const Tensor a = randn<float>(5, 7, rng);
    for (const Granularity& g : {Granularity::tensor(), Granularity::row(), Granularity::column(),
                                 Granularity::block(2, 3)}) {
        const QuantizedTensor q = quantize(a, NumericFormat::Int8, g);
        const QuantizedTensor t = transpose_quantized(q);
        for (index_t i = 0; i < 5; ++i) {
            for (index_t j = 0; j < 7; ++j) {
                REQUIRE(t.code(j, i) == q.code(i, j));
                REQUIRE(t.scale_at(j, i) == q.scale_at(i, j));
            }
        }
        const Tensor dt = dequantize(t);
        const Tensor d = dequantize(q);
        for (index_t i = 0; i < 5; ++i)
            for (index_t j = 0; j < 7; ++j)
                REQUIRE(dt(j, i) == d(i, j));
    }
    const QuantizedTensor mq = quantize(a, NumericFormat::MxFp6E3M2, Granularity::mx());
    CHECK_THROWS_AS(transpose_quantized(mq), std::invalid_argument);
}

TEST_CASE("quantized tensors round-trip through files") {
    Rng rng(90);
    const Tensor a = randn<float>(6, 10, rng);
    for (auto [f, g] : {std::pair{NumericFormat::Int8, Granularity::tensor()},
                        {NumericFormat::Fp8E4M3, Granularity::block(2, 3)},
                        {NumericFormat::MxFp6E3M2, Granularity::mx()}}) {
        const QuantizedTensor q = quantize(a, f, g);
        std::stringstream ss;
        write_quantized_tensor(ss, q);
        const QuantizedTensor r = read_quantized_tensor(ss);
        CHECK(r.format == q.format);
        CHECK(r.granularity == q.granularity);
        REQUIRE(r.codes == q.codes);
        REQUIRE(r.scales == q.scales);
    }

    // a plain tensor file is not a quantized payload
    std::stringstream plain;
    write_tensor(plain, a);
    CHECK_THROWS_AS(read_quantized_tensor(plain), io_error);
}

TEST_CASE("format and granularity names round-trip") {
    for (NumericFormat f : {NumericFormat::Int8, NumericFormat::Fp8E4M3, NumericFormat::Fp6E3M2,
                            NumericFormat::MxFp6E3M2, NumericFormat::Bf16, NumericFormat::Identity})
        CHECK(format_from_string(to_string(f)) == f);
    CHECK(!format_from_string("int4").has_value());
    CHECK(to_string(Granularity::block(2, 3)) == "block:2x3");
    CHECK(to_string(Granularity::mx()) == "mx");
}
