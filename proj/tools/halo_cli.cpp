// halo: drive training, sensitivity/ablation studies, the sharded-gather
// simulator, and tensor-file inspection from flat key-value configs.
//
// Exit codes: 0 success, 2 bad input (config, file, or argument), 3 numerical
// failure (divergence or non-finite values). Every artifact-producing command
// writes a manifest.json whose bytes depend only on the config, so a rerun
// reproduces identical hashes.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "halo/config.hpp"
#include "halo/hqfsdp.hpp"
#include "halo/tensor_io.hpp"
#include "halo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace halo;

namespace {

// --- config -> domain objects -------------------------------------------------

NumericFormat parse_format(const Config& cfg) {
    const std::string s = cfg.get_string("format", "int8");
    const auto f = format_from_string(s);
    if (!f)
        throw config_error(cfg.origin() + ": key 'format': unknown format '" + s + "'");
    return *f;
}

Granularity parse_granularity(const Config& cfg) {
    const std::string s = cfg.get_string("granularity", "tensor");
    if (s == "tensor")
        return Granularity::tensor();
    if (s == "row")
        return Granularity::row();
    if (s == "column")
        return Granularity::column();
    if (s == "mx")
        return Granularity::mx();
    if (s.rfind("block:", 0) == 0) {
        const std::size_t x = s.find('x', 6);
        if (x != std::string::npos) {
            try {
                return Granularity::block(std::stoll(s.substr(6, x - 6)),
                                          std::stoll(s.substr(x + 1)));
            } catch (const std::exception&) {
            }
        }
    }
    throw config_error(cfg.origin() + ": key 'granularity': expected tensor, row, column, mx, " +
                       "or block:RxC, got '" + s + "'");
}

HaloScheme parse_scheme(const Config& cfg) {
    const NumericFormat f = parse_format(cfg);
    const Granularity g = parse_granularity(cfg);
    const std::string id = cfg.get_string("scheme", "halo2");
    if (id == "exact")
        return exact_scheme();
    return scheme_from_string(id, f, g);
}

ModelConfig parse_model(const Config& cfg, const HaloScheme& scheme, std::uint64_t seed) {
    ModelConfig m;
    m.input_dim = cfg.get_int("model.input_dim", m.input_dim);
    m.hidden_dim = cfg.get_int("model.hidden_dim", m.hidden_dim);
    m.output_dim = cfg.get_int("model.output_dim", m.output_dim);
    m.blocks = cfg.get_int("model.blocks", m.blocks);
    m.rmsnorm_gain = cfg.get_bool("model.rmsnorm_gain", true);
    m.lora_rank = cfg.get_int("model.lora_rank", m.lora_rank);
    m.init_scale = cfg.get_double("model.init_scale", m.init_scale);
    m.scheme = scheme;
    m.seed = seed;
    return m;
}

TrainConfig parse_train(const Config& cfg) {
    TrainConfig t;
    t.steps = cfg.get_int("train.steps", t.steps);
    t.optimizer.lr = cfg.get_double("train.lr", t.optimizer.lr);
    t.optimizer.beta1 = cfg.get_double("train.beta1", t.optimizer.beta1);
    t.optimizer.beta2 = cfg.get_double("train.beta2", t.optimizer.beta2);
    t.optimizer.eps = cfg.get_double("train.eps", t.optimizer.eps);
    t.optimizer.weight_decay = cfg.get_double("train.weight_decay", t.optimizer.weight_decay);
    t.optimizer.warmup_steps = cfg.get_int("train.warmup_steps", t.optimizer.warmup_steps);
    t.divergence_threshold = cfg.get_double("train.divergence_threshold", t.divergence_threshold);
    return t;
}

RegressionTaskConfig parse_regression_task(const Config& cfg, const ModelConfig& model,
                                           std::uint64_t seed) {
    RegressionTaskConfig rc;
    rc.model = model;
    rc.batch = cfg.get_int("task.batch", rc.batch);
    rc.input_outlier_mag = cfg.get_double("task.input_outlier_mag", rc.input_outlier_mag);
    rc.weight_outlier_mag = cfg.get_double("task.weight_outlier_mag", rc.weight_outlier_mag);
    rc.target_spike_mag = cfg.get_double("task.target_spike_mag", rc.target_spike_mag);
    rc.student_noise = cfg.get_double("task.student_noise", rc.student_noise);
    rc.gain_error = cfg.get_double("task.gain_error", rc.gain_error);
    rc.seed = seed;
    return rc;
}

std::vector<std::uint64_t> parse_seeds(const Config& cfg) {
    if (cfg.has("seeds"))
        return cfg.get_seed_list("seeds");
    return {cfg.get_u64("seed", 1)};
}

// --- artifacts -----------------------------------------------------------------

// Buffers each artifact so the manifest can record the hash of the exact bytes
// on disk.
class ArtifactDir {
  public:
    ArtifactDir(std::string dir, RunManifest& man) : dir_(std::move(dir)), man_(man) {
        fs::create_directories(dir_);
    }

    void write(const std::string& name, const std::string& bytes) {
        const fs::path p = fs::path(dir_) / name;
        std::ofstream os(p, std::ios::binary);
        if (!os)
            throw config_error("cannot open " + p.string() + " for writing");
        os << bytes;
        if (!os)
            throw config_error("write failed for " + p.string());
        man_.outputs.push_back({name, content_hash(bytes)});
        std::cout << "wrote " << p.string() << "\n";
    }

    const std::string& dir() const { return dir_; }

  private:
    std::string dir_;
    RunManifest& man_;
};

json manifest_json(const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["inputs"] = json::array();
    for (const ManifestFile& f : m.inputs)
        j["inputs"].push_back({{"path", f.path}, {"hash", f.hash}});
    j["seeds"] = m.seeds;
    j["outputs"] = json::array();
    for (const ManifestFile& f : m.outputs)
        j["outputs"].push_back({{"path", f.path}, {"hash", f.hash}});
    j["verdicts"] = json::array();
    for (const auto& [name, value] : m.verdicts)
        j["verdicts"].push_back({{"name", name}, {"verdict", value}});
    return j;
}

void write_manifest(ArtifactDir& dir, const RunManifest& man) {
    const fs::path p = fs::path(dir.dir()) / "manifest.json";
    std::ofstream os(p, std::ios::binary);
    if (!os)
        throw config_error("cannot open " + p.string() + " for writing");
    os << manifest_json(man).dump(2) << "\n";
    std::cout << "wrote " << p.string() << "\n";
}

RunManifest start_manifest(const std::string& command, const Config& cfg,
                           const std::string& config_path) {
    RunManifest man;
    man.command = command;
    man.config = cfg.echo();
    man.inputs.push_back({config_path, content_hash(cfg.text())});
    return man;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// --- train ----------------------------------------------------------------------

int cmd_train(const std::string& config_path) {
    const Config cfg = Config::parse_file(config_path);
    cfg.expect_version();

    const std::vector<std::uint64_t> seeds = parse_seeds(cfg);
    const HaloScheme scheme = parse_scheme(cfg);
    const ModelConfig model = parse_model(cfg, scheme, seeds.front());
    const TrainConfig tc = parse_train(cfg);
    const std::string kind = cfg.get_string("task", "regression");

    CharTaskConfig char_cfg;
    RegressionTaskConfig reg_cfg;
    if (kind == "char") {
        char_cfg.model = model;
        char_cfg.classes = cfg.get_int("task.classes", char_cfg.classes);
        char_cfg.samples_per_class =
            cfg.get_int("task.samples_per_class", char_cfg.samples_per_class);
        char_cfg.sample_noise = cfg.get_double("task.sample_noise", char_cfg.sample_noise);
    } else if (kind == "regression") {
        reg_cfg = parse_regression_task(cfg, model, seeds.front());
    } else {
        throw config_error(cfg.origin() + ": key 'task': expected regression or char, got '" +
                           kind + "'");
    }
    const std::string out_dir = cfg.get_string("out_dir");
    cfg.reject_unused();

    RunManifest man = start_manifest("train", cfg, config_path);
    man.seeds = seeds;
    ArtifactDir out(out_dir, man);

    for (std::uint64_t seed : seeds) {
        DatasetT<float> data;
        ModelConfig mc = model;
        mc.seed = seed;
        std::optional<ToyModelT<float>> student;
        if (kind == "char") {
            char_cfg.model = mc;
            char_cfg.seed = seed;
            auto task = make_char_task<float>(char_cfg);
            data = std::move(task.data);
            student.emplace(std::move(task.student));
        } else {
            reg_cfg.model = mc;
            reg_cfg.seed = seed;
            auto task = make_regression_task<float>(reg_cfg);
            data = std::move(task.data);
            student.emplace(std::move(task.student));
        }

        TrainResult result;
        try {
            result = train(*student, data, tc);
        } catch (const numeric_error& e) {
            man.verdicts.emplace_back("seed " + std::to_string(seed), "diverged");
            write_manifest(out, man);
            throw;
        }

        std::ostringstream csv;
        write_trace_csv(csv, result.trace);
        out.write("trace_seed" + std::to_string(seed) + ".csv", csv.str());
        man.verdicts.emplace_back("seed " + std::to_string(seed),
                                  "completed final_loss=" + fmt(result.final_loss()));
        std::cout << "seed " << seed << ": final loss " << fmt(result.final_loss()) << " after "
                  << tc.steps << " steps\n";
    }

    write_manifest(out, man);
    return 0;
}

// --- sensitivity ------------------------------------------------------------------

int cmd_sensitivity(const std::string& config_path) {
    const Config cfg = Config::parse_file(config_path);
    cfg.expect_version();

    const std::uint64_t seed = cfg.get_u64("seed", 1);
    const HaloScheme scheme = parse_scheme(cfg);
    const ModelConfig model = parse_model(cfg, scheme, seed);
    const RegressionTaskConfig rc = parse_regression_task(cfg, model, seed);
    const std::string out_dir = cfg.get_string("out_dir");
    cfg.reject_unused();

    RunManifest man = start_manifest("sensitivity", cfg, config_path);
    man.seeds = {seed};
    ArtifactDir out(out_dir, man);

    auto task = make_regression_task<float>(rc);
    const auto report =
        sensitivity_report(task.student.config(), task.student.weights(), task.data);

    std::ostringstream csv;
    write_sensitivity_csv(csv, report);
    out.write("sensitivity.csv", csv.str());

    auto average_of = [&](const std::string& name) {
        for (const SensitivityVariant& v : report)
            if (v.variant == name)
                return v.weighted_average;
        throw std::logic_error("sensitivity: missing variant " + name);
    };

    if (scheme.format_X == NumericFormat::Identity) {
        bool ones = true;
        for (const SensitivityVariant& v : report)
            for (const LayerCosine& l : v.layers)
                ones = ones && std::abs(l.cosine - 1.0) < 1e-6;
        const char* verdict = ones ? "PASS" : "FAIL";
        std::cout << "identity cosines all one: " << verdict << "\n";
        man.verdicts.emplace_back("identity_all_ones", verdict);
    } else {
        const double fwd = average_of("forward_only");
        const double bwd = average_of("backward_only");
        const double had = average_of("forward_hadamard");
        const char* v1 = fwd < bwd ? "PASS" : "FAIL";
        const char* v2 = had > fwd ? "PASS" : "FAIL";
        std::cout << "fwd<bwd: " << v1 << ", had>fwd: " << v2 << "\n";
        std::cout << "weighted cosines: forward_only " << fmt(fwd) << ", backward_only "
                  << fmt(bwd) << ", forward_hadamard " << fmt(had) << "\n";
        man.verdicts.emplace_back("fwd<bwd", v1);
        man.verdicts.emplace_back("had>fwd", v2);
    }

    write_manifest(out, man);
    return 0;
}

// --- ablate ------------------------------------------------------------------------

int cmd_ablate(const std::string& config_path) {
    const Config cfg = Config::parse_file(config_path);
    cfg.expect_version();

    const std::uint64_t seed = cfg.get_u64("seed", 1);
    const HaloScheme scheme = parse_scheme(cfg);
    const ModelConfig model = parse_model(cfg, scheme, seed);
    const RegressionTaskConfig rc = parse_regression_task(cfg, model, seed);
    const std::string target = cfg.get_string("ablate.target", "F");
    if (target != "F" && target != "E" && target != "G" && target != "*")
        throw config_error(cfg.origin() + ": key 'ablate.target': expected F, E, G, or *, got '" +
                           target + "'");
    const std::string out_dir = cfg.get_string("out_dir");
    cfg.reject_unused();

    RunManifest man = start_manifest("ablate", cfg, config_path);
    man.seeds = {seed};
    ArtifactDir out(out_dir, man);

    auto task = make_regression_task<float>(rc);
    const auto cells =
        placement_ablation(task.student.config(), task.student.weights(), task.data, target[0]);

    std::ostringstream csv;
    write_ablation_csv(csv, cells);
    out.write("ablation.csv", csv.str());
    std::cout << "placement grid: " << cells.size() << " rows (target " << target << ")\n";

    if (scheme.format_X == NumericFormat::Identity) {
        // every placement is a no-op up to rotation round-off, so the grid
        // must be flat
        double lo = cells.front().loss, hi = cells.front().loss;
        double worst_cos = 1.0;
        for (const AblationCell& c : cells) {
            lo = std::min(lo, c.loss);
            hi = std::max(hi, c.loss);
            worst_cos = std::min(worst_cos, c.weighted_cosine);
        }
        const bool flat = (hi - lo) <= 1e-4 * std::max(1.0, std::abs(hi)) &&
                          (1.0 - worst_cos) < 1e-4;
        const char* verdict = flat ? "PASS" : "FAIL";
        std::cout << "identity grid all equal: " << verdict << " (loss spread " << fmt(hi - lo)
                  << ", min cosine " << fmt(worst_cos) << ")\n";
        man.verdicts.emplace_back("identity_grid_equal", verdict);
    }

    write_manifest(out, man);
    return 0;
}

// --- fsdp --------------------------------------------------------------------------

// Independent reference for the gather protocol: pad, rotate the whole
// weight, quantize once with a per-tensor scale.
QuantizedTensor reference_gather(const TensorT<float>& w, index_t world, NumericFormat format,
                                 bool hadamard) {
    const index_t pad = (world - w.rows() % world) % world;
    TensorT<float> full(w.rows() + pad, w.cols());
    for (index_t i = 0; i < w.rows(); ++i)
        for (index_t j = 0; j < w.cols(); ++j)
            full(i, j) = w(i, j);
    if (hadamard)
        full = transform_right(full, build_spec(full.cols()));
    return quantize(full, format, Granularity::tensor());
}

bool same_quantized(const QuantizedTensor& a, const QuantizedTensor& b) {
    return a.format == b.format && a.rows == b.rows && a.cols == b.cols && a.codes == b.codes &&
           a.scales == b.scales;
}

int cmd_fsdp(const std::string& config_path) {
    const Config cfg = Config::parse_file(config_path);
    cfg.expect_version();

    const std::uint64_t seed = cfg.get_u64("seed", 1);
    const HaloScheme scheme = parse_scheme(cfg);
    const ModelConfig model = parse_model(cfg, scheme, seed);
    const RegressionTaskConfig rc = parse_regression_task(cfg, model, seed);
    const TrainConfig tc = parse_train(cfg);

    FsdpSimConfig sim;
    sim.world.world_size = cfg.get_int("fsdp.world_size", 4);
    sim.format = parse_format(cfg);
    sim.hadamard = cfg.get_bool("fsdp.hadamard", true);
    sim.activation_checkpoint = cfg.get_bool("fsdp.activation_checkpoint", false);
    if (sim.world.world_size < 1)
        throw config_error(cfg.origin() + ": key 'fsdp.world_size': must be at least 1");
    const std::string out_dir = cfg.get_string("out_dir");
    cfg.reject_unused();

    RunManifest man = start_manifest("fsdp", cfg, config_path);
    man.seeds = {seed};
    ArtifactDir out(out_dir, man);

    auto task = make_regression_task<float>(rc);

    // gather protocol vs the single-tensor reference, on every sharded weight
    bool equivalent = true;
    json params = json::array();
    {
        CommLedger scratch;
        for (const ParamRefT<float>& p : task.student.parameters()) {
            if (p.name.find(".fc") == std::string::npos)
                continue;
            ShardedParamT<float> sp = shard(*p.value, sim.world, sim.format);
            const QuantizedTensor got = quantized_all_gather(sp, sim.hadamard, scratch);
            const QuantizedTensor want =
                reference_gather(*p.value, sim.world.world_size, sim.format, sim.hadamard);
            equivalent = equivalent && same_quantized(got, want);
            params.push_back({{"param", p.name},
                              {"rows", sp.full_rows},
                              {"pad_rows", sp.pad_rows},
                              {"shard_rows", sp.shard_rows}});
            if (sp.pad_rows > 0)
                std::cout << p.name << ": rows " << sp.full_rows << " padded by " << sp.pad_rows
                          << " to " << sp.full_rows + sp.pad_rows << "\n";
        }
    }
    const char* verdict = equivalent ? "PASS" : "FAIL";
    std::cout << "equivalence: " << verdict << "\n";
    man.verdicts.emplace_back("equivalence", verdict);

    FsdpTrainResult result;
    try {
        result = train_fsdp(task.student, task.data, tc, sim);
    } catch (const numeric_error& e) {
        man.verdicts.emplace_back("training", "diverged");
        write_manifest(out, man);
        throw;
    }

    std::ostringstream csv;
    write_trace_csv(csv, result.train.trace);
    out.write("fsdp_trace.csv", csv.str());

    const CommLedger& led = result.ledger;
    const CommReport rep = comm_report(led);
    json j;
    j["world_size"] = sim.world.world_size;
    j["format"] = to_string(sim.format);
    j["hadamard"] = sim.hadamard;
    j["activation_checkpoint"] = sim.activation_checkpoint;
    j["ledger"] = json::array({
        json{{"collective", "gather"}, {"bytes", led.gather.transferred},
             {"count", led.gather.count}},
        json{{"collective", "scale_reduce"}, {"bytes", led.scale_reduce.transferred},
             {"count", led.scale_reduce.count}},
        json{{"collective", "reduce_scatter"}, {"bytes", led.reduce_scatter.transferred},
             {"count", led.reduce_scatter.count}},
    });
    j["payload_bytes"] = {{"gather", led.gather.payload},
                          {"scale_reduce", led.scale_reduce.payload},
                          {"reduce_scatter", led.reduce_scatter.payload},
                          {"bf16_gather", led.bf16_gather_payload}};
    j["gather_ratio_vs_bf16"] = rep.gather_ratio_vs_bf16;
    j["backward"] = {{"regathers", led.backward_gathers},
                     {"consumers", led.backward_consumers}};
    j["params"] = params;
    j["verdicts"] = {{"equivalence", verdict}};
    out.write("fsdp.json", j.dump(2) + "\n");

    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.4f", rep.gather_ratio_vs_bf16);
    std::cout << "gather ratio vs bf16: " << ratio << "\n";
    std::cout << "gather bytes transferred: " << led.gather.transferred << "\n";
    std::cout << "final loss: " << fmt(result.train.final_loss()) << "\n";
    man.verdicts.emplace_back("gather_ratio_vs_bf16", ratio);

    write_manifest(out, man);
    return 0;
}

// --- inspect -----------------------------------------------------------------------

template <typename T>
void print_stats(const TensorT<T>& t, double outlier_mult) {
    double lo = HUGE_VAL, hi = -HUGE_VAL, sum = 0;
    for (index_t k = 0; k < t.size(); ++k) {
        const double v = t.data()[k];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        sum += v;
    }
    const OutlierReport rep = outlier_stats(t, Axis::Columns, outlier_mult);
    std::cout << "  min " << fmt(lo) << "  max " << fmt(hi) << "  mean "
              << fmt(t.size() > 0 ? sum / double(t.size()) : 0.0) << "  mean_abs "
              << fmt(rep.mean_abs) << "\n";
    std::cout << "  outliers (|x| >= " << fmt(outlier_mult) << " * mean_abs): "
              << rep.total_outliers << "\n";
}

template <typename T>
void inspect_loaded(const TensorT<T>& t, const std::string& rotate, double outlier_mult) {
    print_stats(t, outlier_mult);
    if (rotate.empty())
        return;
    if (rotate == "right") {
        if (!is_supported_hadamard_dim(t.cols()))
            throw std::invalid_argument("--hadamard right: no transform of size " +
                                        std::to_string(t.cols()));
        std::cout << "after right rotation (columns mixed):\n";
        print_stats(transform_right(t, build_spec(t.cols())), outlier_mult);
    } else {
        if (!is_supported_hadamard_dim(t.rows()))
            throw std::invalid_argument("--hadamard left: no transform of size " +
                                        std::to_string(t.rows()));
        std::cout << "after left rotation (rows mixed):\n";
        print_stats(transform_left(t, build_spec(t.rows())), outlier_mult);
    }
}

int cmd_inspect(const std::string& tensor_path, const std::string& rotate, double outlier_mult) {
    const TensorFileHeader h = probe_tensor_file(tensor_path);
    std::cout << tensor_path << ": " << h.rows << " x " << h.cols;
    switch (h.dtype) {
    case FileDtype::F32: {
        std::cout << " f32\n";
        inspect_loaded(read_tensor<float>(tensor_path), rotate, outlier_mult);
        break;
    }
    case FileDtype::F64: {
        std::cout << " f64\n";
        inspect_loaded(read_tensor<double>(tensor_path), rotate, outlier_mult);
        break;
    }
    case FileDtype::QInt8:
    case FileDtype::QF32: {
        const QuantizedTensor q = read_quantized_tensor(tensor_path);
        std::cout << " quantized " << to_string(q.format) << " (" << q.scales.size()
                  << " scale group" << (q.scales.size() == 1 ? "" : "s") << ")\n";
        std::cout << "dequantized values:\n";
        inspect_loaded(dequantize(q), rotate, outlier_mult);
        break;
    }
    }
    return 0;
}

// --- quantreport ---------------------------------------------------------------------

int cmd_quantreport(const std::string& config_path) {
    const Config cfg = Config::parse_file(config_path);
    cfg.expect_version();

    const std::uint64_t seed = cfg.get_u64("seed", 1);
    const Granularity gran = parse_granularity(cfg);

    std::vector<NumericFormat> formats;
    {
        const std::string list = cfg.get_string("formats", "int8,fp8_e4m3,fp6_e3m2,bf16");
        std::size_t pos = 0;
        while (pos <= list.size()) {
            const std::size_t comma = list.find(',', pos);
            std::string part = list.substr(
                pos, comma == std::string::npos ? std::string::npos : comma - pos);
            part.erase(0, part.find_first_not_of(" \t"));
            part.erase(part.find_last_not_of(" \t") + 1);
            const auto f = format_from_string(part);
            if (!f)
                throw config_error(cfg.origin() + ": key 'formats': unknown format '" + part +
                                   "'");
            formats.push_back(*f);
            if (comma == std::string::npos)
                break;
            pos = comma + 1;
        }
    }

    const std::string tensor_path = cfg.get_string("tensor", "");
    index_t gen_rows = 256, gen_cols = 64;
    OutlierProfile prof;
    bool save = false;
    if (tensor_path.empty()) {
        gen_rows = cfg.get_int("gen.rows", gen_rows);
        gen_cols = cfg.get_int("gen.cols", gen_cols);
        prof.magnification = cfg.get_double("gen.outlier_mag", 30.0);
        prof.random_count = cfg.get_int("gen.outlier_count", 4);
        const std::string axis = cfg.get_string("gen.outlier_axis", "columns");
        if (axis == "columns")
            prof.axis = Axis::Columns;
        else if (axis == "rows")
            prof.axis = Axis::Rows;
        else
            throw config_error(cfg.origin() +
                               ": key 'gen.outlier_axis': expected columns or rows, got '" +
                               axis + "'");
        save = cfg.get_bool("gen.save", false);
    }
    const std::string out_dir = cfg.get_string("out_dir");
    cfg.reject_unused();

    RunManifest man = start_manifest("quantreport", cfg, config_path);
    man.seeds = {seed};
    ArtifactDir out(out_dir, man);

    TensorT<float> t(0, 0);
    if (!tensor_path.empty()) {
        man.inputs.push_back({tensor_path, file_content_hash(tensor_path)});
        t = read_tensor<float>(tensor_path);
    } else {
        Rng rng(seed);
        t = inject_outliers(randn<float>(gen_rows, gen_cols, rng), prof, seed + 1);
        if (save) {
            std::ostringstream buf;
            write_tensor(buf, t);
            out.write("input.halt", buf.str());
        }
    }

    struct Rotation {
        const char* name;
        bool ok;
    };
    const Rotation rotations[3] = {{"none", true},
                                   {"left", is_supported_hadamard_dim(t.rows())},
                                   {"right", is_supported_hadamard_dim(t.cols())}};

    std::ostringstream csv;
    csv << "format,rotation,max_abs,quant_mse,quant_max_err\n";
    for (const Rotation& rot : rotations) {
        if (!rot.ok) {
            std::cout << "skipping " << rot.name << " rotation: no transform of size "
                      << (std::string(rot.name) == "left" ? t.rows() : t.cols()) << "\n";
            continue;
        }
        TensorT<float> ten = t;
        if (std::string(rot.name) == "left")
            ten = transform_left(ten, build_spec(ten.rows()));
        else if (std::string(rot.name) == "right")
            ten = transform_right(ten, build_spec(ten.cols()));

        for (NumericFormat f : formats) {
            const TensorT<float> back = dequantize(quantize(ten, f, gran));
            double mse = 0, max_err = 0;
            for (index_t k = 0; k < ten.size(); ++k) {
                const double d = double(back.data()[k]) - double(ten.data()[k]);
                mse += d * d;
                max_err = std::max(max_err, std::abs(d));
            }
            mse /= double(ten.size());
            csv << to_string(f) << ',' << rot.name << ',' << fmt(max_abs(ten)) << ','
                << fmt(mse) << ',' << fmt(max_err) << "\n";
            std::cout << to_string(f) << " " << rot.name << ": mse " << fmt(mse) << ", max err "
                      << fmt(max_err) << "\n";
        }
    }
    out.write("quantreport.csv", csv.str());

    write_manifest(out, man);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hadamard-assisted low-precision linear-layer training toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string tensor_path;
    std::string rotate;
    double outlier_mult = 10.0;

    CLI::App* c_train =
        app.add_subcommand("train", "fine-tune the toy model and write loss traces");
    CLI::App* c_sens =
        app.add_subcommand("sensitivity", "per-matmul quantization sensitivity cosines");
    CLI::App* c_ablate = app.add_subcommand("ablate", "rotation placement grid");
    CLI::App* c_fsdp =
        app.add_subcommand("fsdp", "sharded quantized weight-gather simulation");
    CLI::App* c_quant =
        app.add_subcommand("quantreport", "round-trip quantization error by format");
    for (CLI::App* sub : {c_train, c_sens, c_ablate, c_fsdp, c_quant})
        sub->add_option("config", config_path, "run config file")->required();

    CLI::App* c_inspect =
        app.add_subcommand("inspect", "dump a tensor file's header and statistics");
    c_inspect->add_option("tensor", tensor_path, "tensor file")->required();
    c_inspect->add_option("--hadamard", rotate, "recompute statistics after a rotation")
        ->check(CLI::IsMember({"left", "right"}));
    c_inspect->add_option("--outlier-mult", outlier_mult,
                          "outlier threshold as a multiple of mean |x|");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*c_train)
            return cmd_train(config_path);
        if (*c_sens)
            return cmd_sensitivity(config_path);
        if (*c_ablate)
            return cmd_ablate(config_path);
        if (*c_fsdp)
            return cmd_fsdp(config_path);
        if (*c_quant)
            return cmd_quantreport(config_path);
        if (*c_inspect)
            return cmd_inspect(tensor_path, rotate, outlier_mult);
    } catch (const numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
