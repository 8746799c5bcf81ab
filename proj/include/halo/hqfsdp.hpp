#pragma once

// In-process simulation of quantized weight sharding. Logical ranks live in
// one process and the collectives run sequentially in rank order, so every
// result is bitwise deterministic; the point is the protocol (row sharding,
// local scales, scale max-reduce, shared-scale quantization, scale reuse in
// backward) and the byte accounting, not transport. The gather result must
// match a single-process quantization of the rotated padded weight bit for
// bit at every world size, which is what makes training traces independent
// of world size.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "halo/hadamard.hpp"
#include "halo/model.hpp"
#include "halo/quantize.hpp"
#include "halo/tensor.hpp"
#include "halo/trainer.hpp"

namespace halo {

struct WorldConfig {
    index_t world_size = 1;
    bool shard_linear = true;  // block linear weights are sharded by row
    bool replicate_norms = true; // norm gains stay whole on every rank
};

// --- byte model ---------------------------------------------------------------
// BF16 2 bytes, INT8/FP8 1 byte, FP6 packs 4 values into 3 bytes, each scale
// 4 bytes. Identity/BF16 payloads carry no scales (nothing was quantized).

inline std::uint64_t code_payload_bytes(NumericFormat f, std::uint64_t elems) {
    switch (f) {
    case NumericFormat::Int8:
    case NumericFormat::Fp8E4M3:
        return elems;
    case NumericFormat::Fp6E3M2:
    case NumericFormat::MxFp6E3M2:
        return (elems + 3) / 4 * 3;
    case NumericFormat::Bf16:
    case NumericFormat::Identity:
        return 2 * elems;
    }
    return 2 * elems;
}

inline bool carries_scales(NumericFormat f) {
    return f != NumericFormat::Bf16 && f != NumericFormat::Identity;
}

constexpr std::uint64_t kScaleBytes = 4;

struct CollectiveStat {
    std::uint64_t payload = 0;     // bytes every rank ends up holding
    std::uint64_t transferred = 0; // bytes on the wire: payload * (w-1)/w
    std::uint64_t count = 0;
};

// Wire bytes follow the ring model: each rank contributes its 1/w of the
// payload and receives the remaining (w-1)/w, so a world of 1 moves nothing.
struct CommLedger {
    CollectiveStat gather;       // quantized weight all-gather (codes + scales)
    CollectiveStat scale_reduce; // max-reduce of local scales, forward only
    CollectiveStat reduce_scatter;
    std::uint64_t bf16_gather_payload = 0; // baseline for the compression ratio
    std::uint64_t backward_gathers = 0;    // regathers during backward
    std::uint64_t backward_consumers = 0;  // matmul passes fed per regather

    void record(CollectiveStat& c, std::uint64_t payload, index_t world) {
        c.payload += payload;
        c.transferred += payload * static_cast<std::uint64_t>(world - 1) /
                         static_cast<std::uint64_t>(world);
        ++c.count;
    }
};

struct CommReport {
    std::uint64_t gather_payload = 0;
    std::uint64_t gather_transferred = 0;
    std::uint64_t scale_reduce_payload = 0;
    std::uint64_t scale_reduce_transferred = 0;
    std::uint64_t reduce_scatter_payload = 0;
    std::uint64_t reduce_scatter_transferred = 0;
    double gather_ratio_vs_bf16 = 1.0; // payload basis, well defined at world 1
};

inline CommReport comm_report(const CommLedger& ledger) {
    CommReport r;
    r.gather_payload = ledger.gather.payload;
    r.gather_transferred = ledger.gather.transferred;
    r.scale_reduce_payload = ledger.scale_reduce.payload;
    r.scale_reduce_transferred = ledger.scale_reduce.transferred;
    r.reduce_scatter_payload = ledger.reduce_scatter.payload;
    r.reduce_scatter_transferred = ledger.reduce_scatter.transferred;
    if (ledger.bf16_gather_payload > 0)
        r.gather_ratio_vs_bf16 =
            double(ledger.gather.payload) / double(ledger.bf16_gather_payload);
    return r;
}

// --- sharding -----------------------------------------------------------------

template <typename T>
struct ShardedParamT {
    TensorT<T> master;   // padded full weight, rows a multiple of world
    index_t full_rows = 0;
    index_t pad_rows = 0;
    index_t world = 1;
    index_t shard_rows = 0;
    NumericFormat format = NumericFormat::Int8;

    // forward-pass scale state, reused by the backward regather
    std::vector<double> local_absmax; // one per rank, over the rotated shard
    std::vector<T> global_scale;      // single shared entry
    bool scales_valid = false;
};

template <typename T>
std::pair<index_t, index_t> row_range(const ShardedParamT<T>& p, index_t rank) {
    return {rank * p.shard_rows, (rank + 1) * p.shard_rows};
}

// Rows pad with zeros to a multiple of world_size so every rank gets the same
// contiguous block count. Padding rows are inert: a right-hand transform
// keeps zero rows zero, a zero row cannot raise an absmax, and gradients for
// them are discarded before the update.
template <typename T>
ShardedParamT<T> shard(const TensorT<T>& w, const WorldConfig& world, NumericFormat format) {
    if (world.world_size < 1)
        throw std::invalid_argument("shard: world_size must be at least 1");
    ShardedParamT<T> p;
    p.full_rows = w.rows();
    p.world = world.world_size;
    const index_t padded =
        (w.rows() + world.world_size - 1) / world.world_size * world.world_size;
    p.pad_rows = padded - w.rows();
    p.shard_rows = padded / world.world_size;
    p.format = format;
    p.master = TensorT<T>(padded, w.cols());
    for (index_t i = 0; i < w.rows(); ++i)
        for (index_t j = 0; j < w.cols(); ++j)
            p.master(i, j) = w(i, j);
    return p;
}

namespace detail {

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, index_t begin, index_t end) {
    TensorT<T> out(end - begin, a.cols());
    for (index_t i = begin; i < end; ++i)
        for (index_t j = 0; j < a.cols(); ++j)
            out(i - begin, j) = a(i, j);
    return out;
}

template <typename T>
double tensor_absmax(const TensorT<T>& a) {
    double m = 0.0;
    for (index_t k = 0; k < a.size(); ++k)
        m = std::max(m, std::abs(static_cast<double>(a.data()[k])));
    return m;
}

// Same absmax-to-scale arithmetic as the per-tensor path in compute_scales,
// applied to the max-reduced global absmax; keeping the formula identical is
// what makes the gather bitwise-equal to single-process quantization.
template <typename T>
T scale_from_absmax(double m, NumericFormat format) {
    if (!carries_scales(format) || m == 0.0)
        return T(1);
    return static_cast<T>(m / format_max(format));
}

// Shared tail of the forward gather and the backward regather: quantize the
// rotated padded weight under the already-agreed global scale and account for
// the gathered bytes. Elementwise rounding makes per-shard quantization with
// a shared scale bitwise identical to quantizing the stitched tensor, so the
// single-process oracle comparison is exact.
template <typename T>
QuantizedTensorT<T> gather_with_scale(const ShardedParamT<T>& p, const TensorT<T>& rotated,
                                      CommLedger& ledger) {
    QuantizedTensorT<T> full =
        quantize(rotated, p.format, Granularity::tensor(), &p.global_scale);
    const auto elems = static_cast<std::uint64_t>(full.size());
    std::uint64_t payload = code_payload_bytes(p.format, elems);
    if (carries_scales(p.format))
        payload += kScaleBytes * full.scales.size();
    ledger.record(ledger.gather, payload, p.world);
    ledger.bf16_gather_payload += 2 * elems;
    return full;
}

} // namespace detail

// Forward gather: (a) each rank rotates its shard (row sharding commutes with
// right multiplication), (b) computes a local absmax scale, (c) the scales
// are max-reduced, (d) every rank quantizes under the shared scale, (e) the
// codes are gathered. Every rank ends up with the same QuantizedTensor.
template <typename T>
QuantizedTensorT<T> quantized_all_gather(ShardedParamT<T>& p, bool apply_hadamard,
                                         CommLedger& ledger) {
    if (apply_hadamard && !is_supported_hadamard_dim(p.master.cols()))
        throw std::invalid_argument("quantized_all_gather: unsupported transform dim " +
                                    std::to_string(p.master.cols()));
    if (p.format == NumericFormat::MxFp6E3M2)
        throw std::invalid_argument("quantized_all_gather: mx blocks have no per-tensor scale");
    const HadamardSpec spec = apply_hadamard ? build_spec(p.master.cols()) : HadamardSpec{};

    TensorT<T> rotated(p.master.rows(), p.master.cols());
    p.local_absmax.assign(static_cast<std::size_t>(p.world), 0.0);
    for (index_t r = 0; r < p.world; ++r) {
        const auto [begin, end] = row_range(p, r);
        TensorT<T> local = detail::slice_rows(p.master, begin, end);
        if (apply_hadamard)
            local = transform_right(local, spec);
        p.local_absmax[static_cast<std::size_t>(r)] = detail::tensor_absmax(local);
        for (index_t i = begin; i < end; ++i)
            for (index_t j = 0; j < p.master.cols(); ++j)
                rotated(i, j) = local(i - begin, j);
    }

    // max is order-insensitive, so this reduction needs no rank ordering
    double global_absmax = 0.0;
    for (double m : p.local_absmax)
        global_absmax = std::max(global_absmax, m);
    p.global_scale.assign(1, detail::scale_from_absmax<T>(global_absmax, p.format));
    p.scales_valid = true;
    if (carries_scales(p.format))
        ledger.record(ledger.scale_reduce, kScaleBytes, p.world);

    return detail::gather_with_scale(p, rotated, ledger);
}

// Backward gather: same rotation and quantization, but under the scales saved
// by the forward pass, so the scale max-reduce disappears from the ledger.
// `check_stale` recomputes the local absmaxes and refuses to proceed if the
// master weights changed since the forward gather.
template <typename T>
QuantizedTensorT<T> backward_regather(ShardedParamT<T>& p, bool apply_hadamard,
                                      CommLedger& ledger, bool check_stale = true) {
    if (!p.scales_valid)
        throw std::logic_error("backward_regather: no saved forward scales");
    const HadamardSpec spec = apply_hadamard ? build_spec(p.master.cols()) : HadamardSpec{};

    TensorT<T> rotated(p.master.rows(), p.master.cols());
    for (index_t r = 0; r < p.world; ++r) {
        const auto [begin, end] = row_range(p, r);
        TensorT<T> local = detail::slice_rows(p.master, begin, end);
        if (apply_hadamard)
            local = transform_right(local, spec);
        if (check_stale &&
            detail::tensor_absmax(local) != p.local_absmax[static_cast<std::size_t>(r)])
            throw std::logic_error("backward_regather: saved scales are stale (weights "
                                   "changed since the forward gather)");
        for (index_t i = begin; i < end; ++i)
            for (index_t j = 0; j < p.master.cols(); ++j)
                rotated(i, j) = local(i - begin, j);
    }
    ++ledger.backward_gathers;
    return detail::gather_with_scale(p, rotated, ledger);
}

// Elementwise mean over workers, accumulated in double in rank order, then
// scattered along the shard row ranges. Gradients arrive for the real rows
// only; dummy rows scatter as zeros and never reach an update.
template <typename T>
std::vector<TensorT<T>> reduce_scatter_grads(const std::vector<TensorT<T>>& per_worker,
                                             const ShardedParamT<T>& p, CommLedger& ledger) {
    if (static_cast<index_t>(per_worker.size()) != p.world)
        throw std::invalid_argument("reduce_scatter_grads: gradient count != world size");
    for (const auto& g : per_worker)
        if (g.rows() != p.full_rows || g.cols() != p.master.cols())
            throw std::invalid_argument("reduce_scatter_grads: gradient shape mismatch");

    std::vector<TensorT<T>> shards;
    shards.reserve(static_cast<std::size_t>(p.world));
    for (index_t r = 0; r < p.world; ++r) {
        const auto [begin, end] = row_range(p, r);
        TensorT<T> shard_grad(p.shard_rows, p.master.cols());
        for (index_t i = begin; i < end; ++i) {
            if (i >= p.full_rows)
                break;
            for (index_t j = 0; j < p.master.cols(); ++j) {
                double acc = 0.0;
                for (index_t w = 0; w < p.world; ++w)
                    acc += per_worker[static_cast<std::size_t>(w)](i, j);
                shard_grad(i - begin, j) = static_cast<T>(acc / double(p.world));
            }
        }
        shards.push_back(std::move(shard_grad));
    }
    ledger.record(ledger.reduce_scatter,
                  2 * static_cast<std::uint64_t>(p.master.size()), p.world);
    return shards;
}

// --- training under the simulator ----------------------------------------------

struct FsdpSimConfig {
    WorldConfig world;
    NumericFormat format = NumericFormat::Int8;
    bool hadamard = true;
    // one backward regather feeds both the recompute-forward and the backward
    // matmuls instead of one regather per consumer
    bool activation_checkpoint = false;
    bool check_stale_scales = true;
};

struct FsdpTrainResult {
    TrainResult train;
    CommLedger ledger;
};

// Drives the toy model with its block linear weights living in sharded
// masters. Each step gathers the quantized rotated weights, installs the
// dequantized (and unrotated) result as the layer weights, runs the usual
// full-batch forward/backward, reduce-scatters the linear gradients, and
// updates masters plus replicated parameters with one AdamW instance.
//
// Every rank sees the same full batch: the simulation is about the weight
// protocol, and identical per-rank gradients make the double-accumulated
// rank-order mean reproduce the gradient exactly (w copies sum to w*g
// without rounding for any world size in range), which is what keeps loss
// traces bitwise identical across world sizes.
template <typename T = float>
FsdpTrainResult train_fsdp(ToyModelT<T>& model, const DatasetT<T>& data, const TrainConfig& cfg,
                           const FsdpSimConfig& sim) {
    if (model.config().scheme.peft)
        throw std::invalid_argument("train_fsdp: sharding covers the full-weight path; "
                                    "adapter training keeps weights frozen");

    FsdpTrainResult out;
    std::vector<ParamRefT<T>> params = model.parameters();

    // sharded masters for the block linears, replicated refs for the rest;
    // the optimizer keeps pointers into `masters`, so no reallocation allowed
    std::vector<ShardedParamT<T>> masters;
    masters.reserve(params.size());
    std::vector<std::size_t> linear_slots;
    std::vector<ParamRefT<T>> opt_params;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const bool linear = sim.world.shard_linear &&
                            params[k].name.find(".fc") != std::string::npos;
        if (linear) {
            linear_slots.push_back(k);
            masters.push_back(shard(*params[k].value, sim.world, sim.format));
            opt_params.push_back({params[k].name + ".master", &masters.back().master});
        } else {
            opt_params.push_back(params[k]);
        }
    }

    AdamWT<T> opt(opt_params, cfg.optimizer);
    out.train.trace.reserve(static_cast<std::size_t>(cfg.steps));

    for (index_t t = 1; t <= cfg.steps; ++t) {
        // install this step's gathered weights
        for (std::size_t m = 0; m < masters.size(); ++m) {
            ShardedParamT<T>& master = masters[m];
            const QuantizedTensorT<T> q =
                quantized_all_gather(master, sim.hadamard, out.ledger);
            TensorT<T> w_hat = dequantize(q);
            if (sim.hadamard)
                w_hat = transform_right_ht(w_hat, build_spec(w_hat.cols()));
            *params[linear_slots[m]].value =
                detail::slice_rows(w_hat, 0, master.full_rows);
        }

        ModelContextT<T> ctx;
        const TensorT<T> y = model.forward(data.inputs, ctx);
        const double loss = loss_value(data, y);
        if (!std::isfinite(loss) || loss > cfg.divergence_threshold)
            throw numeric_error("training diverged at step " + std::to_string(t) + " (loss " +
                                std::to_string(loss) + ")");

        // backward wants the weights again; the regather reuses forward scales
        for (auto& master : masters) {
            backward_regather(master, sim.hadamard, out.ledger, sim.check_stale_scales);
            out.ledger.backward_consumers += sim.activation_checkpoint ? 2 : 1;
        }

        std::vector<TensorT<T>> grads = model.backward(ctx, loss_gradient(data, y));
        double sq = 0;
        for (const auto& g : grads)
            sq += dot_flat(g, g);

        // every rank computed the same gradient; reduce-scatter and stitch the
        // shards back into a padded master gradient
        for (std::size_t m = 0; m < masters.size(); ++m) {
            ShardedParamT<T>& master = masters[m];
            const std::vector<TensorT<T>> worker_grads(
                static_cast<std::size_t>(master.world), grads[linear_slots[m]]);
            const std::vector<TensorT<T>> shards =
                reduce_scatter_grads(worker_grads, master, out.ledger);
            TensorT<T> padded(master.master.rows(), master.master.cols());
            for (index_t r = 0; r < master.world; ++r) {
                const auto [begin, end] = row_range(master, r);
                for (index_t i = begin; i < end; ++i)
                    for (index_t j = 0; j < padded.cols(); ++j)
                        padded(i, j) = shards[static_cast<std::size_t>(r)](i - begin, j);
            }
            grads[linear_slots[m]] = std::move(padded);
        }

        opt.step(grads);
        out.train.trace.push_back({t, loss, std::sqrt(sq), model.total_counters()});
    }
    return out;
}

using ShardedParam = ShardedParamT<float>;

} // namespace halo
