#pragma once

// Experiment configuration: flat `key = value` lines with dotted keys, `#` comments, and
// environment overrides (CVNN_ + key upper-cased with '.' -> '_').

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/data.hpp"
#include "cvnn/network.hpp"
#include "cvnn/train.hpp"

namespace cvnn {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    std::string kind = "grating";  // grating | phasor | cifar
    std::string train_path, val_path;
    std::size_t n_train = 2000, n_val = 500;
    std::size_t image_size = 16;
    std::size_t channels = 1;
    double noise = 0.5;
    double frequency = 3.0;
    std::size_t seq_len = 8;
    double omega = 0.5;
};

struct ExperimentConfig {
    ModelSpec model;
    DataConfig data;
    std::string optimizer = "sgd_nesterov";
    std::string schedule = "0:0.01,10:0.1,120:0.01,150:0.001";
    double momentum = 0.9;
    double clip_norm = 1.0;
    std::size_t epochs = 200;
    std::size_t batch_size = 64;
    std::size_t patience = 30;
    std::size_t checkpoint_every = 1;
    std::string dtype = "float32";
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    std::string resume;

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.clip_norm = clip_norm;
        t.optimizer = parse_optimizer(optimizer);
        t.momentum = momentum;
        t.schedule = LrSchedule::parse(schedule);
        t.patience = patience;
        t.seed = seed;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string env_name(const std::string& key) {
    std::string n = "CVNN_";
    for (char c : key) n.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(c)));
    return n;
}

template <typename U>
U parse_number(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        U out{};
        if constexpr (std::is_floating_point_v<U>)
            out = static_cast<U>(std::stod(v, &pos));
        else {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            out = static_cast<U>(std::stoull(v, &pos));
        }
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse '" + v + "' as a number");
    }
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

/// Every recognised key with its current value, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> config_pairs(const ExperimentConfig& c) {
    using detail::fmt_double;
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [k, v] : c.model.to_pairs()) out.emplace_back("model." + k, v);
    out.insert(out.end(),
               {{"data.kind", c.data.kind},
                {"data.train_path", c.data.train_path},
                {"data.val_path", c.data.val_path},
                {"data.n_train", std::to_string(c.data.n_train)},
                {"data.n_val", std::to_string(c.data.n_val)},
                {"data.image_size", std::to_string(c.data.image_size)},
                {"data.channels", std::to_string(c.data.channels)},
                {"data.noise", fmt_double(c.data.noise)},
                {"data.frequency", fmt_double(c.data.frequency)},
                {"data.seq_len", std::to_string(c.data.seq_len)},
                {"data.omega", fmt_double(c.data.omega)},
                {"opt.kind", c.optimizer},
                {"opt.schedule", c.schedule},
                {"opt.momentum", fmt_double(c.momentum)},
                {"opt.clip_norm", fmt_double(c.clip_norm)},
                {"train.epochs", std::to_string(c.epochs)},
                {"train.batch_size", std::to_string(c.batch_size)},
                {"train.patience", std::to_string(c.patience)},
                {"train.checkpoint_every", std::to_string(c.checkpoint_every)},
                {"train.dtype", c.dtype},
                {"seed", std::to_string(c.seed)},
                {"output_dir", c.output_dir},
                {"resume", c.resume}});
    return out;
}

/// Applies one key. `opt.lr` is shorthand for a constant schedule.
inline void apply_config_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
    using detail::parse_number;
    if (key.rfind("model.", 0) == 0) {
        try {
            if (!c.model.set(key.substr(6), v)) throw ConfigError("unknown config key '" + key + "'");
        } catch (const SpecError& e) {
            throw ConfigError(e.what());
        }
        return;
    }
    if (key == "data.kind") c.data.kind = v;
    else if (key == "data.train_path") c.data.train_path = v;
    else if (key == "data.val_path") c.data.val_path = v;
    else if (key == "data.n_train") c.data.n_train = parse_number<std::size_t>(key, v);
    else if (key == "data.n_val") c.data.n_val = parse_number<std::size_t>(key, v);
    else if (key == "data.image_size") c.data.image_size = parse_number<std::size_t>(key, v);
    else if (key == "data.channels") c.data.channels = parse_number<std::size_t>(key, v);
    else if (key == "data.noise") c.data.noise = parse_number<double>(key, v);
    else if (key == "data.frequency") c.data.frequency = parse_number<double>(key, v);
    else if (key == "data.seq_len") c.data.seq_len = parse_number<std::size_t>(key, v);
    else if (key == "data.omega") c.data.omega = parse_number<double>(key, v);
    else if (key == "opt.kind") c.optimizer = v;
    else if (key == "opt.schedule") c.schedule = v;
    else if (key == "opt.lr") c.schedule = "0:" + detail::fmt_double(parse_number<double>(key, v));
    else if (key == "opt.momentum") c.momentum = parse_number<double>(key, v);
    else if (key == "opt.clip_norm") c.clip_norm = parse_number<double>(key, v);
    else if (key == "train.epochs") c.epochs = parse_number<std::size_t>(key, v);
    else if (key == "train.batch_size") c.batch_size = parse_number<std::size_t>(key, v);
    else if (key == "train.patience") c.patience = parse_number<std::size_t>(key, v);
    else if (key == "train.checkpoint_every") c.checkpoint_every = parse_number<std::size_t>(key, v);
    else if (key == "train.dtype") c.dtype = v;
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else if (key == "resume") c.resume = v;
    else throw ConfigError("unknown config key '" + key + "'");
}

/// Checks cross-field invariants; throws ConfigError listing the first violation.
inline void validate_config(const ExperimentConfig& c) {
    try {
        c.model.validate();
        parse_optimizer(c.optimizer);
        LrSchedule::parse(c.schedule);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (c.dtype != "float32" && c.dtype != "float64")
        throw ConfigError("train.dtype must be float32 or float64");
    if (c.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (c.clip_norm < 0) throw ConfigError("opt.clip_norm must be >= 0");
    const auto& d = c.data;
    if (d.kind == "cifar") {
        for (const auto* p : {&d.train_path, &d.val_path})
            if (p->empty() || !std::filesystem::exists(*p))
                throw ConfigError("data path '" + *p + "' does not exist");
        if (c.model.in_channels != 3 || c.model.image_size != 32)
            throw ConfigError("cifar data needs model.in_channels = 3 and model.image_size = 32");
    } else if (d.kind == "grating") {
        if (c.model.is_convlstm()) throw ConfigError("grating data needs a residual model");
        if (c.model.in_channels != d.channels || c.model.image_size != d.image_size)
            throw ConfigError("model.in_channels/image_size must match data.channels/image_size");
        if (c.model.n_classes != 2) throw ConfigError("grating data has 2 classes");
    } else if (d.kind == "phasor") {
        if (!c.model.is_convlstm()) throw ConfigError("phasor data needs model.variant = convlstm");
        if (d.seq_len < 2) throw ConfigError("data.seq_len must be >= 2");
    } else {
        throw ConfigError("data.kind must be grating, phasor or cifar");
    }
    if (d.n_train == 0 && d.kind != "cifar") throw ConfigError("data.n_train must be >= 1");
    if (!c.resume.empty() && !std::filesystem::exists(c.resume))
        throw ConfigError("resume checkpoint '" + c.resume + "' does not exist");
}

/// Parses config text; later lines override earlier ones.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        apply_config_key(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return c;
}

/// Overrides from CVNN_* environment variables for every known key (and opt.lr).
inline void apply_env_overrides(ExperimentConfig& c) {
    std::vector<std::string> keys;
    for (const auto& [k, v] : config_pairs(c)) keys.push_back(k);
    keys.push_back("opt.lr");
    for (const auto& k : keys)
        if (const char* v = std::getenv(detail::env_name(k).c_str())) apply_config_key(c, k, v);
}

inline ExperimentConfig load_config(const std::filesystem::path& path, bool env = true) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    ExperimentConfig c = parse_config_text(ss.str());
    if (env) apply_env_overrides(c);
    validate_config(c);
    return c;
}

/// Full key = value echo of a config; parsing it back yields the same config.
inline std::string resolved_config_text(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [k, v] : config_pairs(c)) out += k + " = " + v + "\n";
    return out;
}

}  // namespace cvnn
