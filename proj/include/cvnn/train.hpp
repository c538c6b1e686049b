#pragma once

// Optimizers, learning-rate schedule, metrics and the training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvnn/network.hpp"
#include "cvnn/random.hpp"

namespace cvnn {

// ---------------------------------------------------------------------------------------------
// Learning-rate schedule

/// Piecewise-constant schedule: each breakpoint (epoch, lr) holds until the next one.
class LrSchedule {
public:
    LrSchedule()
        : LrSchedule(std::vector<std::pair<std::size_t, double>>{
              {0, 0.01}, {10, 0.1}, {120, 0.01}, {150, 0.001}}) {}
    explicit LrSchedule(std::vector<std::pair<std::size_t, double>> points)
        : points_(std::move(points)) {
        if (points_.empty() || points_.front().first != 0)
            throw std::invalid_argument("lr schedule must start at epoch 0");
        for (std::size_t i = 0; i < points_.size(); ++i) {
            if (!(points_[i].second >= 0.0) || !std::isfinite(points_[i].second))
                throw std::invalid_argument("lr schedule values must be finite and >= 0");
            if (i > 0 && points_[i].first <= points_[i - 1].first)
                throw std::invalid_argument("lr schedule epochs must be strictly increasing");
        }
    }
    static LrSchedule constant(double lr) { return LrSchedule({{0, lr}}); }

    /// "0:0.01,10:0.1,120:0.01,150:0.001"
    static LrSchedule parse(const std::string& text) {
        std::vector<std::pair<std::size_t, double>> pts;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto colon = item.find(':');
            if (colon == std::string::npos)
                throw std::invalid_argument("lr schedule entry '" + item + "' is not epoch:lr");
            try {
                pts.emplace_back(std::stoul(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
            } catch (const std::logic_error&) {
                throw std::invalid_argument("lr schedule entry '" + item + "' is not epoch:lr");
            }
        }
        return LrSchedule(std::move(pts));
    }

    double at(std::size_t epoch) const {
        double lr = points_.front().second;
        for (const auto& [e, v] : points_)
            if (epoch >= e) lr = v;
        return lr;
    }

    std::string str() const {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t i = 0; i < points_.size(); ++i)
            os << (i ? "," : "") << points_[i].first << ":" << points_[i].second;
        return os.str();
    }
    const std::vector<std::pair<std::size_t, double>>& points() const { return points_; }

private:
    std::vector<std::pair<std::size_t, double>> points_;
};

// ---------------------------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd_nesterov, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd" || s == "sgd_nesterov") return OptimizerKind::sgd_nesterov;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd_nesterov|adam)");
}
inline std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd_nesterov";
}

/// Per-component optimizer. Slots are keyed by parameter name, one real slot per real scalar.
template <typename T>
class Optimizer {
public:
    explicit Optimizer(OptimizerKind kind, double momentum = 0.9, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8)
        : kind_(kind), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::span<Parameter<T>* const> params, double lr) {
        if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
        for (const auto* p : params)
            if (!p->grad_re.all_finite() || (p->is_complex && !p->grad_im.all_finite()))
                throw NanGuardError(p->name, "non-finite gradient");
        ++t_;
        for (auto* p : params) {
            for (int plane = 0; plane < (p->is_complex ? 2 : 1); ++plane) {
                Tensor<T>& w = plane ? p->im : p->re;
                const Tensor<T>& g = plane ? p->grad_im : p->grad_re;
                const std::string key = p->name + (plane ? ".im" : ".re");
                if (kind_ == OptimizerKind::sgd_nesterov)
                    nesterov(w, g, slot(key + ".v", w.shape()), lr);
                else
                    adam(w, g, slot(key + ".m", w.shape()), slot(key + ".s", w.shape()), lr);
            }
        }
    }

    OptimizerKind kind() const { return kind_; }
    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    std::vector<std::pair<std::string, Tensor<T>>>& slots() { return slots_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& slots() const { return slots_; }

private:
    Tensor<T>& slot(const std::string& key, const Shape& shape) {
        for (auto& [k, v] : slots_)
            if (k == key) return v;
        slots_.emplace_back(key, Tensor<T>(shape));
        return slots_.back().second;
    }

    // v <- mu v - lr g ; p <- p + mu v - lr g
    void nesterov(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& v, double lr) const {
        const T mu = T(momentum_), a = T(lr);
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = mu * v[i] - a * g[i];
            w[i] += mu * v[i] - a * g[i];
        }
    }

    void adam(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& s, double lr) const {
        const double c1 = 1.0 - std::pow(beta1_, double(t_));
        const double c2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = T(beta1_) * m[i] + T(1 - beta1_) * g[i];
            s[i] = T(beta2_) * s[i] + T(1 - beta2_) * g[i] * g[i];
            const double mh = double(m[i]) / c1, sh = double(s[i]) / c2;
            w[i] -= T(lr * mh / (std::sqrt(sh) + eps_));
        }
    }

    OptimizerKind kind_;
    double momentum_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::pair<std::string, Tensor<T>>> slots_;
};

// Free-function forms.

template <typename T>
void sgd_nesterov_step(std::span<Parameter<T>* const> params, Optimizer<T>& state, double lr) {
    if (state.kind() != OptimizerKind::sgd_nesterov) throw std::logic_error("optimizer is not SGD");
    state.step(params, lr);
}
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, Optimizer<T>& state, double lr) {
    if (state.kind() != OptimizerKind::adam) throw std::logic_error("optimizer is not Adam");
    state.step(params, lr);
}

// ---------------------------------------------------------------------------------------------
// Metrics

/// Step-wise average precision: mean of precision at each positive in descending-score order,
/// ties kept in input order.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("average_precision: scores and labels differ in length");
    const auto positives = std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; });
    if (positives == 0) throw std::invalid_argument("average_precision: no positive labels");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (!labels[order[k]]) continue;
        ++hits;
        ap += double(hits) / double(k + 1);
    }
    return ap / double(positives);
}

template <typename T>
double accuracy(const Tensor<T>& scores, const std::vector<int>& labels) {
    const std::size_t N = scores.shape().at(0), K = scores.shape().at(1);
    if (labels.size() != N) throw std::invalid_argument("accuracy: label count mismatch");
    std::size_t ok = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = scores.data() + n * K;
        if (static_cast<int>(std::max_element(row, row + K) - row) == labels[n]) ++ok;
    }
    return N ? double(ok) / double(N) : 0.0;
}

template <typename T>
T cross_entropy(const Tensor<T>& scores, const std::vector<int>& labels) {
    Tape<T> tape;
    return softmax_cross_entropy(tape.constant(scores), labels).value()[0];
}
template <typename T>
T bce_multilabel(const Tensor<T>& logits, const Tensor<T>& targets) {
    Tape<T> tape;
    return bce_with_logits(tape.constant(logits), targets).value()[0];
}
template <typename T>
T mse(const Tensor<T>& pred, const Tensor<T>& target) {
    Tape<T> tape;
    return mse(tape.constant(pred), target).value()[0];
}

// ---------------------------------------------------------------------------------------------
// Dataset and training loop

template <typename T>
struct Dataset {
    Tensor<T> x;                // (N, ...)
    std::vector<int> labels;    // classification
    Tensor<T> targets;          // (N, ...) for multilabel / regression

    std::size_t size() const { return x.shape().empty() ? 0 : x.shape()[0]; }

    Batch<T> gather(std::span<const std::size_t> idx) const {
        Batch<T> b;
        b.x = rows(x, idx);
        if (!labels.empty())
            for (auto i : idx) b.labels.push_back(labels[i]);
        if (!targets.empty()) b.targets = rows(targets, idx);
        return b;
    }

    static Tensor<T> rows(const Tensor<T>& t, std::span<const std::size_t> idx) {
        Shape s = t.shape();
        const std::size_t m = t.size() / s[0];
        s[0] = idx.size();
        Tensor<T> out(s);
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy_n(t.data() + idx[k] * m, m, out.data() + k * m);
        return out;
    }
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 64;
    double clip_norm = 1.0;  // 0 disables clipping
    OptimizerKind optimizer = OptimizerKind::sgd_nesterov;
    double momentum = 0.9;
    LrSchedule schedule;
    std::size_t patience = 30;  // 0 disables early stopping
    std::uint64_t seed = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0, train_loss = 0, val_loss = 0, metric = 0;
    std::string status = "ok";
};

/// Whether `metric` is better when lower (validation MSE) for this task.
inline bool lower_is_better(TaskKind k) { return k == TaskKind::regression; }

struct EvalResult {
    double loss = 0, metric = 0;
};

/// Eval-mode loss and task metric (accuracy, AP or MSE) over a dataset.
template <typename T>
EvalResult evaluate(Network<T>& net, const Dataset<T>& data, std::size_t batch_size) {
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    if (data.size() == 0) return {nan, nan};
    double loss = 0;
    std::vector<double> ap_scores;
    std::vector<int> ap_labels;
    double acc_sum = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, data.size() - start);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), start);
        Batch<T> b = data.gather(idx);
        Tape<T> tape;
        Var<T> out = net.forward(tape, b.x, false);
        Var<T> l = net.loss(tape, out, b);
        loss += double(l.value()[0]) * double(n);
        switch (net.task()) {
            case TaskKind::classification:
                acc_sum += accuracy(out.value(), b.labels) * double(n);
                break;
            case TaskKind::multilabel:
                for (std::size_t i = 0; i < out.value().size(); ++i) {
                    ap_scores.push_back(out.value()[i]);
                    ap_labels.push_back(b.targets[i] > T(0.5));
                }
                break;
            case TaskKind::regression: break;
        }
    }
    EvalResult r;
    r.loss = loss / double(data.size());
    switch (net.task()) {
        case TaskKind::classification: r.metric = acc_sum / double(data.size()); break;
        case TaskKind::multilabel: r.metric = average_precision(ap_scores, ap_labels); break;
        case TaskKind::regression: r.metric = r.loss; break;
    }
    return r;
}

/// Instrumentation points, in order per step: "forward", "backward", "clip", "step".
using TraceHook = std::function<void(const char*)>;

template <typename T>
class Trainer {
public:
    Trainer(Network<T>& net, TrainConfig cfg)
        : net_(net), cfg_(std::move(cfg)), opt_(cfg_.optimizer, cfg_.momentum) {
        if (cfg_.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
        if (cfg_.clip_norm < 0) throw std::invalid_argument("clip_norm must be >= 0");
    }

    /// Runs one epoch: shuffled minibatches, forward, loss, backward, clip, step; then
    /// validation. NaN-guard trips are recorded in the returned row and rethrown.
    EpochRecord run_epoch(const Dataset<T>& train, const Dataset<T>& val) {
        EpochRecord rec;
        rec.epoch = epoch_;
        rec.lr = cfg_.schedule.at(epoch_);
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg_.seed, std::uint64_t(epoch_)));
        rng.shuffle(order.begin(), order.end());
        auto params = net_.parameters();
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            const std::size_t n = std::min(cfg_.batch_size, order.size() - start);
            Batch<T> b = train.gather(std::span<const std::size_t>(order.data() + start, n));
            for (auto* p : params) p->zero_grad();
            Tape<T> tape;
            trace("forward");
            Var<T> out = net_.forward(tape, b.x, true);
            Var<T> loss = net_.loss(tape, out, b);
            const T lv = loss.value()[0];
            if (!std::isfinite(lv)) throw NanGuardError("loss", "non-finite training loss");
            trace("backward");
            tape.backward(loss);
            if (cfg_.clip_norm > 0) {
                trace("clip");
                clip_gradient_norm(std::span<Parameter<T>* const>(params), T(cfg_.clip_norm));
            }
            trace("step");
            opt_.step(params, rec.lr);
            total += double(lv) * double(n);
        }
        rec.train_loss = train.size() ? total / double(train.size()) : 0.0;
        const EvalResult ev = evaluate(net_, val, cfg_.batch_size);
        rec.val_loss = ev.loss;
        rec.metric = ev.metric;
        if (!std::isfinite(rec.val_loss)) throw NanGuardError("validation", "non-finite loss");
        ++epoch_;
        update_best(rec);
        return rec;
    }

    /// Runs until `cfg.epochs` or early stop. `on_epoch` sees every row (including an aborted
    /// one) before the loop continues or rethrows.
    using EpochCallback = std::function<void(const EpochRecord&, bool improved)>;
    std::vector<EpochRecord> run(const Dataset<T>& train, const Dataset<T>& val,
                                 const EpochCallback& on_epoch = {}) {
        std::vector<EpochRecord> history;
        while (epoch_ < cfg_.epochs && !stopped()) {
            EpochRecord rec;
            try {
                rec = run_epoch(train, val);
            } catch (const NanGuardError& e) {
                rec = EpochRecord{};
                rec.epoch = epoch_;
                rec.lr = cfg_.schedule.at(epoch_);
                rec.train_loss = rec.val_loss = rec.metric =
                    std::numeric_limits<double>::quiet_NaN();
                rec.status = "nan_guard:" + e.where();
                history.push_back(rec);
                if (on_epoch) on_epoch(rec, false);
                throw;
            }
            history.push_back(rec);
            if (on_epoch) on_epoch(rec, improved_);
        }
        return history;
    }

    bool stopped() const { return cfg_.patience > 0 && bad_epochs_ >= cfg_.patience; }

    void set_trace(TraceHook h) { trace_ = std::move(h); }

    // Resumable state.
    std::size_t epoch() const { return epoch_; }
    void set_epoch(std::size_t e) { epoch_ = e; }
    double best_metric() const { return best_; }
    void set_best_metric(double b) { best_ = b; }
    std::size_t bad_epochs() const { return bad_epochs_; }
    void set_bad_epochs(std::size_t n) { bad_epochs_ = n; }
    Optimizer<T>& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

private:
    void trace(const char* ev) {
        if (trace_) trace_(ev);
    }

    void update_best(const EpochRecord& rec) {
        // MSE tasks select on validation loss; others on the metric.
        const double score = rec.metric;
        const bool lower = lower_is_better(net_.task());
        improved_ = std::isnan(best_) || (lower ? score < best_ : score > best_);
        if (improved_) {
            best_ = score;
            bad_epochs_ = 0;
        } else {
            ++bad_epochs_;
        }
    }

    Network<T>& net_;
    TrainConfig cfg_;
    Optimizer<T> opt_;
    std::size_t epoch_ = 0;
    double best_ = std::numeric_limits<double>::quiet_NaN();
    std::size_t bad_epochs_ = 0;
    bool improved_ = false;
    TraceHook trace_;
};

}  // namespace cvnn
