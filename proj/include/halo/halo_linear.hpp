#pragma once

// Linear layer with Hadamard-assisted quantization of its three matmuls
// (forward F = X W^T, input-error E = E_Y W, weight-gradient G = E_Y^T X).
// A generic placement engine covers any subset of {Left, Middle, Right}
// rotations per matmul; the named levels are:
//
//   halo0:  F = X_Q W_Q^T            E = (E_Y)_Q W_Q                   G = (E_Y^T)_Q X_Q
//   halo1:  F = (XH)_Q (WH)_Q^T      E = (E_Y)_Q (WH)_Q H^T            G = (E_Y^T)_Q (XH)_Q H^T
//   halo2:  F as halo1               E = H_b^T (H_b E_Y)_Q (WH)_Q H^T  G as halo1
//
// plus a low-rank (PEFT) variant that freezes W, adds X U^T V^T in working
// precision, and computes E = H_b (H_b^T E_Y)_Q (WH)_Q H^T. The two error
// orientations coincide for power-of-two batch sizes where H is symmetric.
// Rotated quantized operands are cached in the forward context and reused in
// backward; instrumentation counters record every quantizer invocation.

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>

#include "hadamard.hpp"
#include "quantize.hpp"
#include "tensor.hpp"

namespace halo {

struct Placement {
    bool left = false;
    bool middle = false;
    bool right = false;

    bool none() const { return !left && !middle && !right; }
    bool operator==(const Placement&) const = default;
};

inline std::string to_string(const Placement& p) {
    std::string s;
    if (p.left)
        s += 'L';
    if (p.middle)
        s += 'M';
    if (p.right)
        s += 'R';
    return s.empty() ? "O" : s;
}

inline Placement placement_from_string(const std::string& s) {
    Placement p;
    for (char raw : s) {
        switch (std::toupper(static_cast<unsigned char>(raw))) {
        case 'L': p.left = true; break;
        case 'M': p.middle = true; break;
        case 'R': p.right = true; break;
        case 'O': break; // explicit "none"
        default: throw std::invalid_argument("placement: unknown letter in '" + s + "'");
        }
    }
    return p;
}

struct HaloScheme {
    Placement placement_F, placement_E, placement_G;
    NumericFormat format_X = NumericFormat::Int8;
    NumericFormat format_W = NumericFormat::Int8;
    NumericFormat format_E = NumericFormat::Int8;
    Granularity granularity = Granularity::tensor();
    // Per-matmul on/off switches for the sensitivity probes: a disabled
    // matmul runs in working precision on unquantized operands, rotations
    // skipped (they would only cancel).
    bool quantize_F = true;
    bool quantize_E = true;
    bool quantize_G = true;
    bool peft = false; // frozen W, low-rank U/V updates
    std::string name;  // preset id or empty for custom placements

    void set_formats(NumericFormat f) { format_X = format_W = format_E = f; }
};

inline HaloScheme halo0(NumericFormat f = NumericFormat::Int8,
                        Granularity g = Granularity::tensor()) {
    HaloScheme s;
    s.granularity = g;
    s.set_formats(f);
    s.name = "halo0";
    return s;
}

inline HaloScheme halo1(NumericFormat f = NumericFormat::Int8,
                        Granularity g = Granularity::tensor()) {
    HaloScheme s = halo0(f, g);
    s.placement_F = {false, true, false};
    s.placement_E = {false, false, true};
    s.placement_G = {false, false, true};
    s.name = "halo1";
    return s;
}

inline HaloScheme halo2(NumericFormat f = NumericFormat::Int8,
                        Granularity g = Granularity::tensor()) {
    HaloScheme s = halo1(f, g);
    s.placement_E.left = true;
    s.name = "halo2";
    return s;
}

inline HaloScheme halo_peft(NumericFormat f = NumericFormat::Int8,
                            Granularity g = Granularity::tensor()) {
    HaloScheme s = halo2(f, g);
    s.peft = true;
    s.name = "halo-peft";
    return s;
}

// Accepts a preset name or an explicit placement string "F:M;E:LR;G:O".
inline HaloScheme scheme_from_string(const std::string& id,
                                     NumericFormat f = NumericFormat::Int8,
                                     Granularity g = Granularity::tensor()) {
    if (id == "halo0")
        return halo0(f, g);
    if (id == "halo1")
        return halo1(f, g);
    if (id == "halo2")
        return halo2(f, g);
    if (id == "halo-peft")
        return halo_peft(f, g);

    HaloScheme s = halo0(f, g);
    s.name.clear();
    size_t pos = 0;
    int seen = 0;
    while (pos < id.size()) {
        const size_t semi = id.find(';', pos);
        const std::string part = id.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
        const size_t colon = part.find(':');
        if (colon != 1 || part.empty())
            throw std::invalid_argument("scheme: expected 'F:..;E:..;G:..', got '" + id + "'");
        const Placement p = placement_from_string(part.substr(2));
        switch (std::toupper(static_cast<unsigned char>(part[0]))) {
        case 'F': s.placement_F = p; break;
        case 'E': s.placement_E = p; break;
        case 'G': s.placement_G = p; break;
        default: throw std::invalid_argument("scheme: unknown matmul tag in '" + part + "'");
        }
        ++seen;
        pos = semi == std::string::npos ? id.size() : semi + 1;
    }
    if (seen == 0)
        throw std::invalid_argument("scheme: empty id");
    return s;
}

inline std::string to_string(const HaloScheme& s) {
    if (!s.name.empty())
        return s.name;
    return "F:" + to_string(s.placement_F) + ";E:" + to_string(s.placement_E) +
           ";G:" + to_string(s.placement_G);
}

struct QuantCallCounters {
    std::int64_t x = 0, w = 0, e = 0;
    void reset() { x = w = e = 0; }
};

// Generic placement evaluation of quantize(A)·quantize(B) with rotations
// composed Left -> Middle -> Right:
//   Left:   H_p (H_p^T A)_Q B_Q      Middle: (A H_k)_Q (H_k^T B)_Q
//   Right:  A_Q (B H_n)_Q H_n^T
// Dims touched by a rotation must be Hadamard-supported (no padding here).
template <typename T>
TensorT<T> apply_placement(const TensorT<T>& a, const TensorT<T>& b, const Placement& p,
                           NumericFormat fa, NumericFormat fb, const Granularity& gran,
                           std::int64_t* count_a = nullptr, std::int64_t* count_b = nullptr) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("apply_placement: inner dimensions disagree");
    TensorT<T> ta = a;
    TensorT<T> tb = b;
    std::optional<HadamardSpec> outer_left, outer_right;
    if (p.left) {
        outer_left = build_spec(a.rows());
        ta = transform_left(ta, *outer_left); // H^T A
    }
    if (p.middle) {
        const HadamardSpec mid = build_spec(a.cols());
        ta = transform_right(ta, mid); // A H
        tb = transform_left(tb, mid);  // H^T B
    }
    if (p.right) {
        outer_right = build_spec(b.cols());
        tb = transform_right(tb, *outer_right); // B H
    }
    const QuantizedTensorT<T> qa = quantize(ta, fa, gran);
    if (count_a)
        ++*count_a;
    const QuantizedTensorT<T> qb = quantize(tb, fb, gran);
    if (count_b)
        ++*count_b;
    TensorT<T> y = qmatmul(qa, qb);
    if (outer_left)
        y = transform_left_h(y, *outer_left); // H (..)
    if (outer_right)
        y = transform_right_ht(y, *outer_right); // (..) H^T
    return y;
}

template <typename T>
struct SavedContextT {
    bool valid = false;
    TensorT<T> x;               // working-precision input for exact paths and low-rank grads
    QuantizedTensorT<T> xq;     // X_Q or (XH)_Q as produced by forward
    QuantizedTensorT<T> wq;     // W_Q or (WH)_Q as produced by forward
    bool has_xq = false, xq_rotated = false;
    bool has_wq = false, wq_rotated = false;
    index_t batch_rows = 0;
};

using SavedContext = SavedContextT<float>;

template <typename T>
struct BackwardResultT {
    TensorT<T> e_x;
    TensorT<T> grad_w;          // empty under peft (frozen W)
    TensorT<T> grad_u, grad_v;  // empty unless peft
};

template <typename T>
class HaloLinearLayerT {
public:
    HaloLinearLayerT(TensorT<T> w, HaloScheme scheme) : w_(std::move(w)), scheme_(std::move(scheme)) {
        if (scheme_.peft)
            throw std::invalid_argument("halo layer: peft scheme needs U and V (rank 0 allowed)");
        validate_scheme_dims();
    }

    // PEFT constructor: W is frozen and its rotated quantized form is fixed
    // here, once; U (r x m) and V (n x r) carry the trainable update.
    HaloLinearLayerT(TensorT<T> w, TensorT<T> u, TensorT<T> v, HaloScheme scheme)
        : w_(std::move(w)), u_(std::move(u)), v_(std::move(v)), scheme_(std::move(scheme)) {
        if (!scheme_.peft)
            throw std::invalid_argument("halo layer: U/V constructor requires a peft scheme");
        if (!(scheme_.placement_F == Placement{false, true, false}) ||
            !(scheme_.placement_E == Placement{true, false, true}))
            throw std::invalid_argument("halo layer: peft fixes placements F:M and E:LR");
        if (u_.cols() != w_.cols() || v_.rows() != w_.rows() || u_.rows() != v_.cols())
            throw std::invalid_argument("halo layer: U/V shapes must be r x m and n x r");
        validate_scheme_dims();
        frozen_wq_ = quantize(transform_right(w_, spec_m()), scheme_.format_W, scheme_.granularity);
        ++counters_.w;
    }

    index_t in_features() const { return w_.cols(); }
    index_t out_features() const { return w_.rows(); }
    index_t lora_rank() const { return u_.rows(); }
    const HaloScheme& scheme() const { return scheme_; }

    const TensorT<T>& weight() const { return w_; }
    TensorT<T>& weight() { return w_; }
    const TensorT<T>& lora_u() const { return u_; }
    TensorT<T>& lora_u() { return u_; }
    const TensorT<T>& lora_v() const { return v_; }
    TensorT<T>& lora_v() { return v_; }

    const QuantCallCounters& counters() const { return counters_; }
    void reset_counters() { counters_.reset(); }

    TensorT<T> forward(const TensorT<T>& x, SavedContextT<T>& ctx) const {
        if (x.cols() != w_.cols())
            throw std::invalid_argument("halo layer: input feature dim mismatch");
        ctx = SavedContextT<T>{};
        ctx.x = x;
        ctx.batch_rows = x.rows();
        ctx.valid = true;

        if (scheme_.peft) {
            const QuantizedTensorT<T> xq =
                quantize(transform_right(x, spec_m()), scheme_.format_X, scheme_.granularity);
            ++counters_.x;
            TensorT<T> y = qmatmul(xq, frozen_wq_, true);
            if (lora_rank() > 0)
                y = add(y, matmul_nt(matmul_nt(x, u_, Accum::Double), v_, Accum::Double));
            return y;
        }

        if (!scheme_.quantize_F)
            return matmul_nt(x, w_, Accum::Double);

        const Placement& p = scheme_.placement_F;
        if (p.none() || p == Placement{false, true, false}) {
            // Middle on X W^T rotates the shared feature dim of both operands
            ctx.xq_rotated = ctx.wq_rotated = p.middle;
            ctx.xq = quantize(p.middle ? transform_right(x, spec_m()) : x, scheme_.format_X,
                              scheme_.granularity);
            ++counters_.x;
            ctx.wq = quantize(p.middle ? transform_right(w_, spec_m()) : w_, scheme_.format_W,
                              scheme_.granularity);
            ++counters_.w;
            ctx.has_xq = ctx.has_wq = true;
            return qmatmul(ctx.xq, ctx.wq, true);
        }
        return apply_placement(x, transpose(w_), p, scheme_.format_X, scheme_.format_W,
                               scheme_.granularity, &counters_.x, &counters_.w);
    }

    BackwardResultT<T> backward(const SavedContextT<T>& ctx, const TensorT<T>& e_y) const {
        if (!ctx.valid)
            throw std::invalid_argument("halo layer: backward without forward context");
        if (e_y.rows() != ctx.batch_rows || e_y.cols() != w_.rows())
            throw std::invalid_argument("halo layer: upstream error shape mismatch");

        BackwardResultT<T> out;
        if (scheme_.peft) {
            out.e_x = peft_error_path(ctx, e_y);
            const TensorT<T> ev = matmul(e_y, v_, Accum::Double); // b x r
            if (lora_rank() > 0)
                out.e_x = add(out.e_x, matmul(ev, u_, Accum::Double));
            out.grad_v = matmul_tn(e_y, matmul_nt(ctx.x, u_, Accum::Double), Accum::Double);
            out.grad_u = matmul(transpose(ev), ctx.x, Accum::Double);
            return out;
        }

        // One quantization of the unrotated E_Y serves both products when
        // their orientations allow it (always under halo0/1).
        QuantizedTensorT<T> eq_cache;
        bool has_eq = false;
        out.e_x = error_path(ctx, e_y, eq_cache, has_eq);
        out.grad_w = gradient_path(ctx, e_y, eq_cache, has_eq);
        return out;
    }

    // (W H)_Q for fused inference; the same codes the training forward uses.
    QuantizedTensorT<T> export_inference_weights() const {
        if (scheme_.peft)
            return frozen_wq_;
        if (!scheme_.placement_F.middle)
            throw std::invalid_argument("halo layer: export requires a rotated-forward scheme");
        return quantize(transform_right(w_, spec_m()), scheme_.format_W, scheme_.granularity);
    }

private:
    HadamardSpec spec_m() const { return build_spec(w_.cols()); }

    void validate_scheme_dims() const {
        const bool needs_m = scheme_.placement_F.middle || scheme_.placement_E.right ||
                             scheme_.placement_G.right || scheme_.peft;
        if (needs_m && !is_supported_hadamard_dim(w_.cols()))
            throw std::invalid_argument("halo layer: in_features is not a supported Hadamard dim");
    }

    // Quantized W, rotated on the feature dim or not; reuses the forward
    // context when it holds the matching orientation.
    QuantizedTensorT<T> weight_operand(const SavedContextT<T>& ctx, bool rotated) const {
        if (ctx.has_wq && ctx.wq_rotated == rotated)
            return ctx.wq;
        ++counters_.w;
        return quantize(rotated ? transform_right(w_, spec_m()) : w_, scheme_.format_W,
                        scheme_.granularity);
    }

    QuantizedTensorT<T> input_operand(const SavedContextT<T>& ctx, bool rotated) const {
        if (ctx.has_xq && ctx.xq_rotated == rotated)
            return ctx.xq;
        ++counters_.x;
        return quantize(rotated ? transform_right(ctx.x, spec_m()) : ctx.x, scheme_.format_X,
                        scheme_.granularity);
    }

    const QuantizedTensorT<T>& plain_error_operand(const TensorT<T>& e_y,
                                                   QuantizedTensorT<T>& cache, bool& has) const {
        if (!has) {
            cache = quantize(e_y, scheme_.format_E, scheme_.granularity);
            ++counters_.e;
            has = true;
        }
        return cache;
    }

    // E = E_Y W under placement_E. Subsets of {Left, Right} run here with
    // context reuse; Left follows the H_b^T (H_b E_Y)_Q orientation and pads
    // the batch dim with zero rows, trimmed after the outer transform.
    TensorT<T> error_path(const SavedContextT<T>& ctx, const TensorT<T>& e_y,
                          QuantizedTensorT<T>& eq_cache, bool& has_eq) const {
        if (!scheme_.quantize_E)
            return matmul(e_y, w_, Accum::Double);
        const Placement& p = scheme_.placement_E;
        if (p.middle)
            return apply_placement(e_y, w_, p, scheme_.format_E, scheme_.format_W,
                                   scheme_.granularity, &counters_.e, &counters_.w);

        const QuantizedTensorT<T> wq = weight_operand(ctx, p.right);
        TensorT<T> prod;
        std::optional<HadamardSpec> bspec;
        index_t b = e_y.rows();
        if (p.left) {
            const index_t bp = next_supported_hadamard_dim(b);
            bspec = build_spec(bp);
            const TensorT<T> padded = bp == b ? e_y : pad_rows(e_y, bp);
            const QuantizedTensorT<T> eq =
                quantize(transform_left_h(padded, *bspec), scheme_.format_E, scheme_.granularity);
            ++counters_.e;
            prod = qmatmul(eq, wq);
        } else {
            prod = qmatmul(plain_error_operand(e_y, eq_cache, has_eq), wq);
        }
        if (bspec) {
            prod = transform_left(prod, *bspec);
            if (prod.rows() != b)
                prod = take_rows(prod, b);
        }
        if (p.right)
            prod = transform_right_ht(prod, spec_m());
        return prod;
    }

    // G = E_Y^T X under placement_G; {none, Right} reuse the context, the
    // rest go through the generic engine. E_Y^T shares E_Y's scales whenever
    // the granularity is transpose-stable.
    TensorT<T> gradient_path(const SavedContextT<T>& ctx, const TensorT<T>& e_y,
                             QuantizedTensorT<T>& eq_cache, bool& has_eq) const {
        if (!scheme_.quantize_G)
            return matmul_tn(e_y, ctx.x, Accum::Double);
        const Placement& p = scheme_.placement_G;
        if (p.left || p.middle)
            return apply_placement(transpose(e_y), ctx.x, p, scheme_.format_E, scheme_.format_X,
                                   scheme_.granularity, &counters_.e, &counters_.x);

        QuantizedTensorT<T> etq;
        if (scheme_.granularity.kind == GranularityKind::MxBlock) {
            // MX blocks do not survive a transpose; quantize the transpose itself.
            etq = quantize(transpose(e_y), scheme_.format_E, scheme_.granularity);
            ++counters_.e;
        } else {
            etq = transpose_quantized(plain_error_operand(e_y, eq_cache, has_eq));
        }
        TensorT<T> g = qmatmul(etq, input_operand(ctx, p.right));
        if (p.right)
            g = transform_right_ht(g, spec_m());
        return g;
    }

    // PEFT error path, H_b (H_b^T E_Y)_Q (WH)_Q H_m^T with batch padding.
    TensorT<T> peft_error_path(const SavedContextT<T>& ctx, const TensorT<T>& e_y) const {
        (void)ctx;
        const index_t b = e_y.rows();
        const index_t bp = next_supported_hadamard_dim(b);
        const HadamardSpec bspec = build_spec(bp);
        const TensorT<T> padded = bp == b ? e_y : pad_rows(e_y, bp);
        const QuantizedTensorT<T> eq =
            quantize(transform_left(padded, bspec), scheme_.format_E, scheme_.granularity);
        ++counters_.e;
        TensorT<T> prod = transform_left_h(qmatmul(eq, frozen_wq_), bspec);
        if (prod.rows() != b)
            prod = take_rows(prod, b);
        return transform_right_ht(prod, spec_m());
    }

    TensorT<T> w_;
    TensorT<T> u_, v_;
    QuantizedTensorT<T> frozen_wq_;
    HaloScheme scheme_;
    mutable QuantCallCounters counters_;
};

using HaloLinearLayer = HaloLinearLayerT<float>;

} // namespace halo
