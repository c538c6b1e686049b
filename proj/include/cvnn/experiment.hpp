#pragma once

// Experiment runner: data preparation, training with history/checkpoint emission, resume and
// evaluation of stored checkpoints.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cvnn/checkpoint.hpp"
#include "cvnn/config.hpp"
#include "cvnn/data.hpp"
#include "cvnn/model.hpp"
#include "cvnn/train.hpp"

namespace cvnn {

/// Exact text form of a double (hex float), parsed back by std::strtod.
inline std::string exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}
inline double parse_exact(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

template <typename T>
struct Splits {
    Dataset<T> train, val;
    Normalization norm;
};

/// Builds train/validation data. Image data is normalized per channel with constants from the
/// training split, or with `stored` when given.
template <typename T>
Splits<T> make_data(const ExperimentConfig& c, const Normalization* stored = nullptr) {
    Splits<T> s;
    const auto& d = c.data;
    if (d.kind == "cifar") {
        s.train = load_cifar_binary<T>(d.train_path);
        s.val = load_cifar_binary<T>(d.val_path);
    } else if (d.kind == "grating") {
        GratingParams p;
        p.size = d.image_size;
        p.channels = d.channels;
        p.noise = d.noise;
        p.frequency = d.frequency;
        s.train = synthetic_image_task<T>(d.n_train, derive_seed(c.seed, "data.train"), p);
        s.val = synthetic_image_task<T>(d.n_val, derive_seed(c.seed, "data.val"), p);
    } else if (d.kind == "phasor") {
        PhasorParams p;
        p.size = d.image_size;
        p.omega = d.omega;
        p.noise = d.noise;
        s.train = synthetic_phasor_sequences<T>(d.n_train, d.seq_len, derive_seed(c.seed, "data.train"), p);
        s.val = synthetic_phasor_sequences<T>(d.n_val, d.seq_len, derive_seed(c.seed, "data.val"), p);
        return s;
    } else {
        throw ConfigError("unknown data.kind '" + d.kind + "'");
    }
    s.norm = stored ? *stored : channel_statistics(s.train.x);
    apply_normalization(s.train.x, s.norm);
    if (s.val.size()) apply_normalization(s.val.x, s.norm);
    return s;
}

inline const char* kHistoryHeader = "epoch,lr,train_loss,val_loss,metric,status,seed";

inline std::string history_row(const EpochRecord& r, std::uint64_t seed) {
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    return std::to_string(r.epoch) + "," + num(r.lr) + "," + num(r.train_loss) + "," +
           num(r.val_loss) + "," + num(r.metric) + "," + r.status + "," + std::to_string(seed);
}

struct RunResult {
    std::vector<EpochRecord> history;  // every epoch, including those before a resume
    bool aborted = false;
    std::string nan_where;
    double best_metric = 0;
};

template <typename T>
Checkpoint capture_checkpoint(const ExperimentConfig& cfg, Network<T>& net, Trainer<T>& tr,
                              const Normalization& norm, const std::string& history_csv) {
    Checkpoint ck;
    ck.spec = cfg.model.serialize();
    ck.seed = cfg.seed;
    ck.meta["config"] = resolved_config_text(cfg);
    ck.meta["epoch"] = std::to_string(tr.epoch());
    ck.meta["best_metric"] = exact(tr.best_metric());
    ck.meta["bad_epochs"] = std::to_string(tr.bad_epochs());
    ck.meta["optimizer"] = to_string(tr.optimizer().kind());
    ck.meta["optimizer_steps"] = std::to_string(tr.optimizer().steps());
    ck.meta["history"] = history_csv;
    auto params = net.parameters();
    auto buffers = net.buffers();
    ck.params = parameter_records<T>(params);
    ck.buffers = buffer_records<T>(buffers);
    for (const auto& [name, t] : tr.optimizer().slots())
        ck.optimizer.push_back(TensorRecord::from<T>(name, t));
    if (!norm.empty()) {
        const std::size_t C = norm.mean.size();
        ck.extras.push_back(TensorRecord::from<double>("data.mean", Tensor<double>(Shape{C}, norm.mean)));
        ck.extras.push_back(TensorRecord::from<double>("data.std", Tensor<double>(Shape{C}, norm.std)));
    }
    return ck;
}

inline Normalization stored_normalization(const Checkpoint& ck) {
    Normalization n;
    const auto* m = ck.find_extra("data.mean");
    const auto* s = ck.find_extra("data.std");
    if (m && s) {
        n.mean = m->re;
        n.std = s->re;
    }
    return n;
}

template <typename T>
void restore_model(Network<T>& net, const Checkpoint& ck) {
    auto params = net.parameters();
    auto buffers = net.buffers();
    restore_parameters<T>(params, ck.params);
    restore_buffers<T>(buffers, ck.buffers);
}

template <typename T>
void restore_trainer(Trainer<T>& tr, const Checkpoint& ck) {
    if (ck.meta.at("optimizer") != to_string(tr.optimizer().kind()))
        throw CheckpointError("checkpoint optimizer differs from the config");
    tr.set_epoch(std::stoul(ck.meta.at("epoch")));
    tr.set_best_metric(parse_exact(ck.meta.at("best_metric")));
    tr.set_bad_epochs(std::stoul(ck.meta.at("bad_epochs")));
    tr.optimizer().set_steps(std::stoull(ck.meta.at("optimizer_steps")));
    auto& slots = tr.optimizer().slots();
    slots.clear();
    for (const auto& r : ck.optimizer) slots.emplace_back(r.name, r.real_plane<T>());
}

/// Trains per config, writing config.resolved, history.csv, last.ckpt and best.ckpt under
/// output_dir. A NaN-guard trip ends the run with `aborted` set.
template <typename T>
RunResult run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    namespace fs = std::filesystem;
    const fs::path out = cfg.output_dir;
    fs::create_directories(out);
    atomic_write(out / "config.resolved", resolved_config_text(cfg));

    auto net = build_model<T>(cfg.model, cfg.seed);
    Trainer<T> trainer(*net, cfg.train_config());

    std::optional<Checkpoint> resumed;
    if (!cfg.resume.empty()) {
        resumed = load_checkpoint(cfg.resume);
        if (ModelSpec::deserialize(resumed->spec) != cfg.model)
            throw CheckpointError("checkpoint model spec differs from the config");
        if (resumed->seed != cfg.seed) throw CheckpointError("checkpoint seed differs from the config");
        restore_model(*net, *resumed);
        restore_trainer(trainer, *resumed);
    }
    const Normalization stored = resumed ? stored_normalization(*resumed) : Normalization{};
    Splits<T> data = make_data<T>(cfg, stored.empty() ? nullptr : &stored);

    RunResult result;
    std::string csv = std::string(kHistoryHeader) + "\n";
    if (resumed) {
        const std::string& prev = resumed->meta.at("history");
        csv = prev;
        std::istringstream is(prev);
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::stringstream ls(line);
            std::string f;
            EpochRecord r;
            std::getline(ls, f, ',');
            r.epoch = std::stoul(f);
            std::getline(ls, f, ',');
            r.lr = std::stod(f);
            std::getline(ls, f, ',');
            r.train_loss = std::stod(f);
            std::getline(ls, f, ',');
            r.val_loss = std::stod(f);
            std::getline(ls, f, ',');
            r.metric = std::stod(f);
            std::getline(ls, r.status, ',');
            result.history.push_back(r);
        }
    }
    atomic_write(out / "history.csv", csv);

    auto save = [&](const fs::path& p) {
        save_checkpoint(p, capture_checkpoint(cfg, *net, trainer, data.norm, csv));
    };
    std::size_t since_ckpt = 0;
    try {
        trainer.run(data.train, data.val, [&](const EpochRecord& r, bool improved) {
            csv += history_row(r, cfg.seed) + "\n";
            atomic_write(out / "history.csv", csv);
            result.history.push_back(r);
            if (r.status != "ok") return;
            if (improved) save(out / "best.ckpt");
            if (cfg.checkpoint_every > 0 && ++since_ckpt >= cfg.checkpoint_every) {
                save(out / "last.ckpt");
                since_ckpt = 0;
            }
        });
    } catch (const NanGuardError& e) {
        result.aborted = true;
        result.nan_where = e.where();
    }
    if (!result.aborted) save(out / "last.ckpt");
    result.best_metric = trainer.best_metric();
    return result;
}

/// Calls f(T{}) with T = float or double according to the dtype id.
template <typename F>
decltype(auto) with_dtype(const std::string& dtype, F&& f) {
    if (dtype == "float32") return f(float{});
    if (dtype == "float64") return f(double{});
    throw ConfigError("unknown dtype '" + dtype + "'");
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
    return with_dtype(cfg.dtype, [&](auto tag) { return run_experiment<decltype(tag)>(cfg); });
}

/// Evaluates a checkpoint on "val" (the stored config's validation split) or a CIFAR file.
template <typename T>
EvalResult evaluate_checkpoint(const Checkpoint& ck, const std::string& data_arg) {
    ExperimentConfig cfg = parse_config_text(ck.meta.at("config"));
    auto net = build_model<T>(ModelSpec::deserialize(ck.spec), ck.seed);
    restore_model(*net, ck);
    const Normalization norm = stored_normalization(ck);
    Dataset<T> data;
    if (data_arg == "val") {
        data = make_data<T>(cfg, norm.empty() ? nullptr : &norm).val;
    } else {
        data = load_cifar_binary<T>(data_arg);
        if (!norm.empty()) apply_normalization(data.x, norm);
    }
    return evaluate(*net, data, cfg.batch_size);
}

inline EvalResult evaluate_checkpoint(const std::filesystem::path& path, const std::string& data_arg) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.params.empty()) throw CheckpointError("checkpoint has no parameters");
    const std::string dtype = ck.params.front().dtype == Dtype::f32 ? "float32" : "float64";
    return with_dtype(dtype, [&](auto tag) { return evaluate_checkpoint<decltype(tag)>(ck, data_arg); });
}

}  // namespace cvnn
