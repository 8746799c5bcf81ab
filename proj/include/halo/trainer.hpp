#pragma once

// Training and analysis drivers: losses, the two toy tasks, AdamW with linear
// warm-up, the deterministic train loop, and the gradient-sensitivity and
// placement-ablation studies.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "halo/model.hpp"
#include "halo/parallel.hpp"

namespace halo {

enum class LossKind { Mse, CrossEntropy };

template <typename T>
struct DatasetT {
    TensorT<T> inputs;
    TensorT<T> targets;          // Mse only
    std::vector<index_t> labels; // CrossEntropy only
    LossKind loss = LossKind::Mse;
};

template <typename T>
double loss_value(const DatasetT<T>& data, const TensorT<T>& y) {
    if (data.loss == LossKind::Mse) {
        if (!y.same_shape(data.targets))
            throw std::invalid_argument("loss: target shape mismatch");
        double acc = 0;
        for (index_t k = 0; k < y.size(); ++k) {
            const double d = double(y.data()[k]) - double(data.targets.data()[k]);
            acc += d * d;
        }
        return acc / double(y.size());
    }
    if (static_cast<index_t>(data.labels.size()) != y.rows())
        throw std::invalid_argument("loss: label count mismatch");
    double acc = 0;
    for (index_t i = 0; i < y.rows(); ++i) {
        double zmax = -HUGE_VAL;
        for (index_t j = 0; j < y.cols(); ++j)
            zmax = std::max(zmax, double(y(i, j)));
        double sum = 0;
        for (index_t j = 0; j < y.cols(); ++j)
            sum += std::exp(double(y(i, j)) - zmax);
        const index_t label = data.labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= y.cols())
            throw std::invalid_argument("loss: label out of range");
        acc += std::log(sum) + zmax - double(y(i, label));
    }
    return acc / double(y.rows());
}

template <typename T>
TensorT<T> loss_gradient(const DatasetT<T>& data, const TensorT<T>& y) {
    TensorT<T> e(y.rows(), y.cols());
    if (data.loss == LossKind::Mse) {
        if (!y.same_shape(data.targets))
            throw std::invalid_argument("loss: target shape mismatch");
        const double scale = 2.0 / double(y.size());
        for (index_t k = 0; k < y.size(); ++k)
            e.data()[k] = static_cast<T>(
                scale * (double(y.data()[k]) - double(data.targets.data()[k])));
        return e;
    }
    if (static_cast<index_t>(data.labels.size()) != y.rows())
        throw std::invalid_argument("loss: label count mismatch");
    const double inv_b = 1.0 / double(y.rows());
    for (index_t i = 0; i < y.rows(); ++i) {
        double zmax = -HUGE_VAL;
        for (index_t j = 0; j < y.cols(); ++j)
            zmax = std::max(zmax, double(y(i, j)));
        double sum = 0;
        for (index_t j = 0; j < y.cols(); ++j)
            sum += std::exp(double(y(i, j)) - zmax);
        const index_t label = data.labels[static_cast<std::size_t>(i)];
        for (index_t j = 0; j < y.cols(); ++j) {
            const double p = std::exp(double(y(i, j)) - zmax) / sum;
            e(i, j) = static_cast<T>((p - (j == label ? 1.0 : 0.0)) * inv_b);
        }
    }
    return e;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    index_t warmup_steps = 20;
};

template <typename T>
class AdamWT {
  public:
    AdamWT(std::vector<ParamRefT<T>> params, const AdamWConfig& cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(static_cast<std::size_t>(p.value->size()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(p.value->size()), 0.0);
        }
    }

    index_t step_count() const { return t_; }

    double lr_at(index_t step) const {
        if (cfg_.warmup_steps <= 0)
            return cfg_.lr;
        return cfg_.lr * std::min(1.0, double(step) / double(cfg_.warmup_steps));
    }

    void step(const std::vector<TensorT<T>>& grads) {
        if (grads.size() != params_.size())
            throw std::invalid_argument("adamw: gradient count mismatch");
        ++t_;
        const double lr_t = lr_at(t_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            TensorT<T>& w = *params_[p].value;
            const TensorT<T>& g = grads[p];
            if (!w.same_shape(g))
                throw std::invalid_argument("adamw: gradient shape mismatch for " +
                                            params_[p].name);
            auto& m = m_[p];
            auto& v = v_[p];
            for (index_t k = 0; k < w.size(); ++k) {
                const double gk = g.data()[k];
                m[static_cast<std::size_t>(k)] =
                    cfg_.beta1 * m[static_cast<std::size_t>(k)] + (1.0 - cfg_.beta1) * gk;
                v[static_cast<std::size_t>(k)] =
                    cfg_.beta2 * v[static_cast<std::size_t>(k)] + (1.0 - cfg_.beta2) * gk * gk;
                const double mh = m[static_cast<std::size_t>(k)] / bc1;
                const double vh = v[static_cast<std::size_t>(k)] / bc2;
                const double wk = w.data()[k];
                w.data()[k] = static_cast<T>(
                    wk - lr_t * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * wk));
            }
        }
    }

  private:
    std::vector<ParamRefT<T>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    index_t t_ = 0;
};

// ---------------------------------------------------------------------------
// train loop

struct TrainConfig {
    index_t steps = 200;
    AdamWConfig optimizer;
    double divergence_threshold = 1e6;
};

struct TrainRecord {
    index_t step = 0;
    double loss = 0;
    double grad_norm = 0;
    QuantCallCounters counters; // cumulative across the run
};

struct TrainResult {
    std::vector<TrainRecord> trace;
    double final_loss() const {
        return trace.empty() ? std::nan("") : trace.back().loss;
    }
};

// Full-batch loop; loss is recorded at the pre-step parameters. Aborts with a
// numeric_error once the loss exceeds the divergence threshold or stops being
// finite (non-finite intermediates abort earlier inside the tensor ops).
template <typename T>
TrainResult train(ToyModelT<T>& model, const DatasetT<T>& data, const TrainConfig& cfg) {
    AdamWT<T> opt(model.parameters(), cfg.optimizer);
    TrainResult out;
    out.trace.reserve(static_cast<std::size_t>(cfg.steps));
    for (index_t t = 1; t <= cfg.steps; ++t) {
        ModelContextT<T> ctx;
        const TensorT<T> y = model.forward(data.inputs, ctx);
        const double loss = loss_value(data, y);
        if (!std::isfinite(loss) || loss > cfg.divergence_threshold)
            throw numeric_error("training diverged at step " + std::to_string(t) + " (loss " +
                                std::to_string(loss) + ")");
        const std::vector<TensorT<T>> grads = model.backward(ctx, loss_gradient(data, y));
        double sq = 0;
        for (const auto& g : grads)
            sq += dot_flat(g, g);
        opt.step(grads);
        out.trace.push_back({t, loss, std::sqrt(sq), model.total_counters()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// toy tasks

// All three matmuls exact: placements empty, nothing quantized.
inline HaloScheme exact_scheme() {
    HaloScheme s;
    s.quantize_F = s.quantize_E = s.quantize_G = false;
    s.name = "exact";
    return s;
}

// Teacher-student regression that stresses each quantized matmul through a
// different channel. Magnified input feature columns make the forward product
// sensitive to activation quantization. One duplicated input pair with
// opposite spike targets pins the error-tensor scale: identical inputs give
// identical outputs, so no parameter setting can shrink those two residuals,
// and their weight-gradient contributions cancel exactly. Everything the
// optimizer still has to learn therefore lives in error entries that are tiny
// next to the spikes. The student starts with per-channel errors on the norm
// gains, and a gain gradient is the one consumer of the propagated error that
// never passes through a quantizer, so recovering the gains requires the
// small error rows to survive quantization against spike-dominated scales.
//
// The teacher (and its outlier positions) is the same for every seed; the
// seed varies the input draw, the student's weight perturbation, and the gain
// error. That keeps per-seed difficulty flat, so final-loss spread across
// seeds reflects the quantization scheme rather than task luck.
struct RegressionTaskConfig {
    ModelConfig model;
    index_t batch = 64;
    double input_outlier_mag = 40.0;
    double weight_outlier_mag = 20.0;
    double target_spike_mag = 128.0;
    double student_noise = 0.005;
    double gain_error = 0.40;
    std::uint64_t seed = 1;

    RegressionTaskConfig() { model.rmsnorm_gain = true; }
};

template <typename T>
struct RegressionTaskT {
    DatasetT<T> data;
    ToyModelT<T> student;
};

namespace detail {

// Drops positions that don't exist at the current dimensions, so shrunken
// models in tests still build a valid task.
inline std::vector<index_t> positions_below(std::initializer_list<index_t> want, index_t limit) {
    std::vector<index_t> out;
    for (index_t p : want)
        if (p < limit)
            out.push_back(p);
    return out;
}

} // namespace detail

template <typename T = float>
RegressionTaskT<T> make_regression_task(const RegressionTaskConfig& cfg) {
    ModelConfig teacher_cfg = cfg.model;
    teacher_cfg.scheme = exact_scheme();
    teacher_cfg.seed = 0x7eac8e5ULL;

    ModelWeightsT<T> tw = ToyModelT<T>::default_weights(teacher_cfg);
    OutlierProfile wprof;
    wprof.magnification = cfg.weight_outlier_mag;
    wprof.axis = Axis::Columns;
    for (auto& t : tw.fc) {
        wprof.channels = detail::positions_below({5, 19}, t.cols());
        t = inject_outliers(t, wprof);
    }
    const ToyModelT<T> teacher(teacher_cfg, tw);

    Rng rng(cfg.seed);
    TensorT<T> x = randn<T>(cfg.batch, cfg.model.input_dim, rng);
    OutlierProfile xprof;
    xprof.magnification = cfg.input_outlier_mag;
    xprof.channels = detail::positions_below({2, 9, 16, 27}, x.cols());
    xprof.axis = Axis::Columns;
    x = inject_outliers(x, xprof);

    const index_t pair_a = 3 % cfg.batch;
    const index_t pair_b = 17 % cfg.batch;
    if (pair_b != pair_a)
        for (index_t j = 0; j < x.cols(); ++j)
            x(pair_b, j) = x(pair_a, j);

    ModelContextT<T> ctx;
    TensorT<T> targets = teacher.forward(x, ctx);
    if (pair_b != pair_a)
        for (index_t j : detail::positions_below({4, 11}, targets.cols())) {
            targets(pair_a, j) = static_cast<T>(targets(pair_a, j) + cfg.target_spike_mag);
            targets(pair_b, j) = static_cast<T>(targets(pair_b, j) - cfg.target_spike_mag);
        }

    ModelWeightsT<T> sw = perturbed(tw, cfg.student_noise, cfg.seed ^ 0x57dULL);
    Rng gain_rng(cfg.seed ^ 0x9a17ULL);
    for (auto& g : sw.gains)
        for (index_t j = 0; j < g.cols(); ++j)
            g(0, j) = static_cast<T>(g(0, j) + cfg.gain_error * (2.0 * gain_rng.uniform() - 1.0));

    RegressionTaskT<T> task{DatasetT<T>{std::move(x), std::move(targets), {}, LossKind::Mse},
                            ToyModelT<T>(cfg.model, std::move(sw))};
    return task;
}

// Character classification: one Gaussian prototype per class, noisy copies as
// samples, labels cycling through the classes.
struct CharTaskConfig {
    ModelConfig model; // output_dim is forced to `classes`
    index_t classes = 8;
    index_t samples_per_class = 8;
    double sample_noise = 0.3;
    std::uint64_t seed = 1;
};

template <typename T>
struct CharTaskT {
    DatasetT<T> data;
    ToyModelT<T> student;
};

template <typename T = float>
CharTaskT<T> make_char_task(const CharTaskConfig& cfg) {
    ModelConfig mc = cfg.model;
    mc.output_dim = cfg.classes;
    Rng rng(cfg.seed ^ 0xc1a55ULL);
    const TensorT<T> protos = randn<T>(cfg.classes, mc.input_dim, rng);
    const index_t n = cfg.classes * cfg.samples_per_class;
    TensorT<T> x(n, mc.input_dim);
    std::vector<index_t> labels(static_cast<std::size_t>(n));
    for (index_t i = 0; i < n; ++i) {
        const index_t c = i % cfg.classes;
        labels[static_cast<std::size_t>(i)] = c;
        for (index_t j = 0; j < mc.input_dim; ++j)
            x(i, j) = static_cast<T>(double(protos(c, j)) + cfg.sample_noise * rng.normal());
    }
    return CharTaskT<T>{
        DatasetT<T>{std::move(x), TensorT<T>(0, 0), std::move(labels), LossKind::CrossEntropy},
        ToyModelT<T>(mc)};
}

// ---------------------------------------------------------------------------
// gradient sensitivity

struct LayerCosine {
    std::string layer;
    double cosine = 0;
    std::int64_t param_count = 0;
};

struct SensitivityVariant {
    std::string variant;
    std::vector<LayerCosine> layers;
    double weighted_average = 0;
};

namespace detail {

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> linear_gradients(const ModelConfig& cfg,
                                                                 const ModelWeightsT<T>& weights,
                                                                 const DatasetT<T>& data,
                                                                 const HaloScheme& scheme) {
    ModelConfig c = cfg;
    c.scheme = scheme;
    ToyModelT<T> model(c, weights);
    ModelContextT<T> ctx;
    const TensorT<T> y = model.forward(data.inputs, ctx);
    const std::vector<TensorT<T>> grads = model.backward(ctx, loss_gradient(data, y));
    const std::vector<ParamRefT<T>> params = model.parameters();
    std::vector<std::pair<std::string, TensorT<T>>> out;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].name.find(".fc") != std::string::npos)
            out.emplace_back(params[i].name, grads[i]);
    return out;
}

} // namespace detail

// Compares each variant's linear-layer weight gradients against the exact
// ones. The weighted average weighs layers by parameter count. Variants keep
// the config's formats and granularity; only which matmuls quantize (and the
// forward Hadamard) differ.
template <typename T = float>
std::vector<SensitivityVariant> sensitivity_report(const ModelConfig& cfg,
                                                   const ModelWeightsT<T>& weights,
                                                   const DatasetT<T>& data) {
    auto variant_scheme = [&](bool qf, bool qe, bool qg, bool f_middle, const char* name) {
        HaloScheme s = cfg.scheme;
        s.placement_F = Placement{false, f_middle, false};
        s.placement_E = Placement{};
        s.placement_G = Placement{};
        s.quantize_F = qf;
        s.quantize_E = qe;
        s.quantize_G = qg;
        s.peft = false;
        s.name = name;
        return s;
    };

    const auto exact = detail::linear_gradients(cfg, weights, data, exact_scheme());
    const HaloScheme schemes[3] = {
        variant_scheme(true, false, false, false, "forward_only"),
        variant_scheme(false, true, true, false, "backward_only"),
        variant_scheme(true, false, false, true, "forward_hadamard"),
    };

    std::vector<SensitivityVariant> report;
    for (const HaloScheme& s : schemes) {
        const auto grads = detail::linear_gradients(cfg, weights, data, s);
        SensitivityVariant v;
        v.variant = s.name;
        double weighted = 0;
        double total = 0;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const double cos = cosine_similarity(grads[i].second, exact[i].second);
            const auto count = static_cast<std::int64_t>(grads[i].second.size());
            v.layers.push_back({grads[i].first, cos, count});
            weighted += cos * double(count);
            total += double(count);
        }
        v.weighted_average = total > 0 ? weighted / total : 0.0;
        report.push_back(std::move(v));
    }
    return report;
}

// ---------------------------------------------------------------------------
// placement ablation

struct AblationCell {
    std::string key;
    double loss = 0;
    double weighted_cosine = 0;
};

inline const std::array<const char*, 8>& placement_subsets() {
    static const std::array<const char*, 8> kSubsets = {"O", "L",  "M",  "R",
                                                        "LM", "LR", "MR", "LMR"};
    return kSubsets;
}

// Grid over placement subsets: `target` picks which matmul varies ('F', 'E',
// 'G'), or '*' for the full 8x8x8 grid keyed by the full placement string.
// Cells run under parallel_for into fixed slots, so the output order and
// content never depend on the thread budget.
template <typename T = float>
std::vector<AblationCell> placement_ablation(const ModelConfig& cfg,
                                             const ModelWeightsT<T>& weights,
                                             const DatasetT<T>& data, char target) {
    if (cfg.scheme.peft)
        throw std::invalid_argument("ablation: placement grid applies to full fine-tuning only");
    const auto& subsets = placement_subsets();
    std::vector<std::pair<std::string, HaloScheme>> modes;
    if (target == 'F' || target == 'E' || target == 'G') {
        for (const char* sub : subsets) {
            HaloScheme s = cfg.scheme;
            Placement& slot = target == 'F'   ? s.placement_F
                              : target == 'E' ? s.placement_E
                                              : s.placement_G;
            slot = placement_from_string(sub);
            s.name.clear();
            modes.emplace_back(sub, s);
        }
    } else if (target == '*') {
        for (const char* f : subsets)
            for (const char* e : subsets)
                for (const char* g : subsets) {
                    HaloScheme s = cfg.scheme;
                    s.placement_F = placement_from_string(f);
                    s.placement_E = placement_from_string(e);
                    s.placement_G = placement_from_string(g);
                    s.name.clear();
                    modes.emplace_back(std::string("F:") + f + ";E:" + e + ";G:" + g, s);
                }
    } else {
        throw std::invalid_argument("ablation: target must be F, E, G, or *");
    }

    const auto exact = detail::linear_gradients(cfg, weights, data, exact_scheme());
    std::vector<AblationCell> cells(modes.size());
    parallel_for(static_cast<index_t>(modes.size()), [&](index_t i) {
        const auto& [key, scheme] = modes[static_cast<std::size_t>(i)];
        ModelConfig c = cfg;
        c.scheme = scheme;
        ToyModelT<T> model(c, weights);
        ModelContextT<T> ctx;
        const TensorT<T> y = model.forward(data.inputs, ctx);
        const std::vector<TensorT<T>> grads = model.backward(ctx, loss_gradient(data, y));
        const std::vector<ParamRefT<T>> params = model.parameters();
        double weighted = 0;
        double total = 0;
        std::size_t e = 0;
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (params[p].name.find(".fc") == std::string::npos)
                continue;
            const double cos = cosine_similarity(grads[p], exact[e++].second);
            weighted += cos * double(grads[p].size());
            total += double(grads[p].size());
        }
        cells[static_cast<std::size_t>(i)] =
            AblationCell{key, loss_value(data, y), total > 0 ? weighted / total : 0.0};
    });
    return cells;
}

// ---------------------------------------------------------------------------
// CSV writers

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace detail

inline void write_trace_csv(std::ostream& os, const std::vector<TrainRecord>& trace) {
    os << "step,loss,grad_norm\n";
    for (const TrainRecord& r : trace)
        os << r.step << ',' << detail::fmt_double(r.loss) << ','
           << detail::fmt_double(r.grad_norm) << '\n';
}

inline void write_cosine_csv(std::ostream& os, const std::vector<LayerCosine>& layers) {
    os << "layer,cosine,param_count\n";
    for (const LayerCosine& l : layers)
        os << l.layer << ',' << detail::fmt_double(l.cosine) << ',' << l.param_count << '\n';
}

inline void write_sensitivity_csv(std::ostream& os, const std::vector<SensitivityVariant>& report) {
    os << "layer,variant,cosine\n";
    for (const SensitivityVariant& v : report)
        for (const LayerCosine& l : v.layers)
            os << l.layer << ',' << v.variant << ',' << detail::fmt_double(l.cosine) << '\n';
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationCell>& cells) {
    os << "placement,loss,avg_cosine\n";
    for (const AblationCell& c : cells)
        os << c.key << ',' << detail::fmt_double(c.loss) << ','
           << detail::fmt_double(c.weighted_cosine) << '\n';
}

} // namespace halo
