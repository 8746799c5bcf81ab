#pragma once

// Toy block model: a stack of pre-norm residual blocks, each
// x + fc2(silu(fc1(rmsnorm(x)))) over the rotated low-precision layers, with
// a working-precision output head. The residual stream is what lets a
// sample's magnitude persist across blocks (the norm only feeds the branch),
// so heavy rows stay heavy all the way into the backward error, the same way
// token outliers survive depth in a transformer. Small enough to
// finite-difference, big enough that forward quantization error in one block
// reaches the gradients of the others.

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "halo/halo_linear.hpp"
#include "halo/rmsnorm.hpp"
#include "halo/tensor.hpp"

namespace halo {

struct ModelConfig {
    index_t input_dim = 32;
    index_t hidden_dim = 64;
    index_t output_dim = 16;
    index_t blocks = 2;
    bool rmsnorm_gain = false;
    HaloScheme scheme = halo2();
    index_t lora_rank = 4; // used only when scheme.peft
    double init_scale = 1.0;
    std::uint64_t seed = 1;
};

template <typename T>
struct ModelWeightsT {
    std::vector<TensorT<T>> gains; // one per block, empty tensors when disabled
    std::vector<TensorT<T>> fc;    // two per block: fc1 (h x d), fc2 (d x h)
    TensorT<T> head;               // out x d
};

template <typename T>
ModelWeightsT<T> perturbed(const ModelWeightsT<T>& w, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    ModelWeightsT<T> out = w;
    for (auto& t : out.fc) {
        const TensorT<T> noise = randn<T>(t.rows(), t.cols(), rng, stddev);
        t = add(t, noise);
    }
    if (out.head.size() > 0)
        out.head = add(out.head, randn<T>(out.head.rows(), out.head.cols(), rng, stddev));
    return out;
}

template <typename T>
struct BlockContextT {
    TensorT<T> x_in, z1, a1;
    SavedContextT<T> c1, c2;
};

template <typename T>
struct ModelContextT {
    std::vector<BlockContextT<T>> blocks;
    TensorT<T> head_in;
    bool valid = false;
};

template <typename T>
struct ParamRefT {
    std::string name;
    TensorT<T>* value;
};

namespace detail {

template <typename T>
TensorT<T> silu(const TensorT<T>& z) {
    TensorT<T> out(z.rows(), z.cols());
    for (index_t k = 0; k < z.size(); ++k) {
        const double x = z.data()[k];
        out.data()[k] = static_cast<T>(x / (1.0 + std::exp(-x)));
    }
    return out;
}

template <typename T>
TensorT<T> silu_backward(const TensorT<T>& z, const TensorT<T>& e) {
    TensorT<T> out(z.rows(), z.cols());
    for (index_t k = 0; k < z.size(); ++k) {
        const double x = z.data()[k];
        const double s = 1.0 / (1.0 + std::exp(-x));
        out.data()[k] = static_cast<T>(double(e.data()[k]) * (s + x * s * (1.0 - s)));
    }
    return out;
}

} // namespace detail

template <typename T>
class ToyModelT {
  public:
    explicit ToyModelT(const ModelConfig& cfg) : ToyModelT(cfg, default_weights(cfg)) {}

    ToyModelT(const ModelConfig& cfg, const ModelWeightsT<T>& init) : cfg_(cfg) {
        if (cfg.blocks < 1)
            throw std::invalid_argument("model: needs at least one block");
        if (static_cast<index_t>(init.fc.size()) != 2 * cfg.blocks)
            throw std::invalid_argument("model: weight count does not match block count");
        if (init.head.rows() != cfg.output_dim || init.head.cols() != cfg.input_dim)
            throw std::invalid_argument("model: head shape mismatch");

        Rng lora_rng(cfg.seed ^ 0x10a5eedULL);
        blocks_.reserve(cfg.blocks);
        for (index_t b = 0; b < cfg.blocks; ++b) {
            Block blk;
            if (cfg.rmsnorm_gain)
                blk.gain = b < static_cast<index_t>(init.gains.size()) && init.gains[b].size() > 0
                               ? init.gains[b]
                               : TensorT<T>::filled(1, cfg.input_dim, T(1));
            const TensorT<T>& w1 = init.fc[2 * b];
            const TensorT<T>& w2 = init.fc[2 * b + 1];
            if (w1.rows() != cfg.hidden_dim || w1.cols() != cfg.input_dim ||
                w2.rows() != cfg.input_dim || w2.cols() != cfg.hidden_dim)
                throw std::invalid_argument("model: block weight shape mismatch");
            if (cfg.scheme.peft) {
                blk.fc1.emplace_back(w1, lora_init(cfg.lora_rank, cfg.input_dim, lora_rng),
                                     TensorT<T>(cfg.hidden_dim, cfg.lora_rank), cfg.scheme);
                blk.fc2.emplace_back(w2, lora_init(cfg.lora_rank, cfg.hidden_dim, lora_rng),
                                     TensorT<T>(cfg.input_dim, cfg.lora_rank), cfg.scheme);
            } else {
                blk.fc1.emplace_back(w1, cfg.scheme);
                blk.fc2.emplace_back(w2, cfg.scheme);
            }
            blocks_.push_back(std::move(blk));
        }
        head_ = init.head;
    }

    static ModelWeightsT<T> default_weights(const ModelConfig& cfg) {
        Rng rng(cfg.seed);
        ModelWeightsT<T> w;
        for (index_t b = 0; b < cfg.blocks; ++b) {
            if (cfg.rmsnorm_gain)
                w.gains.push_back(TensorT<T>::filled(1, cfg.input_dim, T(1)));
            w.fc.push_back(randn<T>(cfg.hidden_dim, cfg.input_dim, rng,
                                    cfg.init_scale / std::sqrt(double(cfg.input_dim))));
            w.fc.push_back(randn<T>(cfg.input_dim, cfg.hidden_dim, rng,
                                    cfg.init_scale / std::sqrt(double(cfg.hidden_dim))));
        }
        w.head = randn<T>(cfg.output_dim, cfg.input_dim, rng,
                          cfg.init_scale / std::sqrt(double(cfg.input_dim)));
        return w;
    }

    const ModelConfig& config() const { return cfg_; }
    index_t block_count() const { return static_cast<index_t>(blocks_.size()); }

    TensorT<T> forward(const TensorT<T>& x, ModelContextT<T>& ctx) const {
        if (x.cols() != cfg_.input_dim)
            throw std::invalid_argument("model: input dim mismatch");
        ctx.blocks.assign(blocks_.size(), {});
        TensorT<T> h = x;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const Block& blk = blocks_[b];
            BlockContextT<T>& bc = ctx.blocks[b];
            bc.x_in = h;
            const TensorT<T> normed = rmsnorm_forward(h, gain_ptr(blk));
            bc.z1 = blk.fc1.front().forward(normed, bc.c1);
            bc.a1 = detail::silu(bc.z1);
            h = add(h, blk.fc2.front().forward(bc.a1, bc.c2));
        }
        ctx.head_in = h;
        ctx.valid = true;
        return matmul_nt(h, head_, Accum::Double);
    }

    // Gradients come back aligned with parameters(); e_out is dL/dY.
    std::vector<TensorT<T>> backward(const ModelContextT<T>& ctx, const TensorT<T>& e_out) const {
        if (!ctx.valid || ctx.blocks.size() != blocks_.size())
            throw std::invalid_argument("model: backward without forward context");
        if (e_out.rows() != ctx.head_in.rows() || e_out.cols() != cfg_.output_dim)
            throw std::invalid_argument("model: output error shape mismatch");

        std::vector<TensorT<T>> grads(parameter_count());
        std::size_t slot = grads.size();
        grads[--slot] = matmul_tn(e_out, ctx.head_in, Accum::Double);
        TensorT<T> e = matmul(e_out, head_, Accum::Double);

        for (std::size_t b = blocks_.size(); b-- > 0;) {
            const Block& blk = blocks_[b];
            const BlockContextT<T>& bc = ctx.blocks[b];
            const auto back2 = blk.fc2.front().backward(bc.c2, e);
            const TensorT<T> e_z = detail::silu_backward(bc.z1, back2.e_x);
            const auto back1 = blk.fc1.front().backward(bc.c1, e_z);
            if (cfg_.scheme.peft) {
                grads[--slot] = back2.grad_v;
                grads[--slot] = back2.grad_u;
                grads[--slot] = back1.grad_v;
                grads[--slot] = back1.grad_u;
            } else {
                grads[--slot] = back2.grad_w;
                grads[--slot] = back1.grad_w;
            }
            if (cfg_.rmsnorm_gain)
                grads[--slot] = rmsnorm_gain_gradient(bc.x_in, back1.e_x);
            e = add(e, rmsnorm_backward(bc.x_in, back1.e_x, gain_ptr(blk)));
        }
        return grads;
    }

    // Trainable tensors in a fixed order; LoRA mode exposes the adapters and
    // keeps the frozen weights out.
    std::vector<ParamRefT<T>> parameters() {
        std::vector<ParamRefT<T>> out;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            Block& blk = blocks_[b];
            const std::string prefix = "block" + std::to_string(b) + ".";
            if (cfg_.rmsnorm_gain)
                out.push_back({prefix + "gain", &blk.gain});
            if (cfg_.scheme.peft) {
                out.push_back({prefix + "fc1.u", &blk.fc1.front().lora_u()});
                out.push_back({prefix + "fc1.v", &blk.fc1.front().lora_v()});
                out.push_back({prefix + "fc2.u", &blk.fc2.front().lora_u()});
                out.push_back({prefix + "fc2.v", &blk.fc2.front().lora_v()});
            } else {
                out.push_back({prefix + "fc1", &blk.fc1.front().weight()});
                out.push_back({prefix + "fc2", &blk.fc2.front().weight()});
            }
        }
        out.push_back({"head", &head_});
        return out;
    }

    std::size_t parameter_count() const {
        const std::size_t per_block =
            (cfg_.rmsnorm_gain ? 1u : 0u) + (cfg_.scheme.peft ? 4u : 2u);
        return blocks_.size() * per_block + 1;
    }

    ModelWeightsT<T> weights() const {
        ModelWeightsT<T> w;
        for (const Block& blk : blocks_) {
            if (cfg_.rmsnorm_gain)
                w.gains.push_back(blk.gain);
            w.fc.push_back(blk.fc1.front().weight());
            w.fc.push_back(blk.fc2.front().weight());
        }
        w.head = head_;
        return w;
    }

    std::vector<const HaloLinearLayerT<T>*> halo_layers() const {
        std::vector<const HaloLinearLayerT<T>*> out;
        for (const Block& blk : blocks_) {
            out.push_back(&blk.fc1.front());
            out.push_back(&blk.fc2.front());
        }
        return out;
    }
    std::vector<HaloLinearLayerT<T>*> halo_layers() {
        std::vector<HaloLinearLayerT<T>*> out;
        for (Block& blk : blocks_) {
            out.push_back(&blk.fc1.front());
            out.push_back(&blk.fc2.front());
        }
        return out;
    }

    QuantCallCounters total_counters() const {
        QuantCallCounters total;
        for (const auto* layer : halo_layers()) {
            total.x += layer->counters().x;
            total.w += layer->counters().w;
            total.e += layer->counters().e;
        }
        return total;
    }
    void reset_counters() {
        for (auto* layer : halo_layers())
            layer->reset_counters();
    }

  private:
    // single-element vectors dodge the layer's missing default constructor
    struct Block {
        TensorT<T> gain;
        std::vector<HaloLinearLayerT<T>> fc1, fc2;
    };

    static TensorT<T> lora_init(index_t rank, index_t dim, Rng& rng) {
        return randn<T>(rank, dim, rng, 1.0 / std::sqrt(double(dim)));
    }

    const TensorT<T>* gain_ptr(const Block& blk) const {
        return cfg_.rmsnorm_gain ? &blk.gain : nullptr;
    }

    ModelConfig cfg_;
    std::vector<Block> blocks_;
    TensorT<T> head_;
};

using ToyModel = ToyModelT<float>;

} // namespace halo
