// train.hpp — optimizer, learning-rate schedule, dataset splitting, and the
// epoch loop.
//
// The schedule multiplies the rate by decay_factor once per completed
// decay_every epochs, applying the factor repeatedly rather than through
// pow(): repeated multiplication reproduces the exact 1e-3 → 1e-4 → 1e-5
// doubles the schedule promises.
//
// Training is deterministic given (seed, config, dataset): the per-epoch
// shuffle and all parameter updates derive from the config seed alone, and
// the epoch log is byte-stable across runs.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "liverformer/augment.hpp"
#include "liverformer/metrics.hpp"
#include "liverformer/model.hpp"
#include "liverformer/rng.hpp"

namespace liverformer {

struct TrainError : VolumeError {
    using VolumeError::VolumeError;
};
struct TooFewCases : TrainError {
    using TrainError::TrainError;
};

struct TrainConfig {
    double lr0 = 1e-3;
    double decay_factor = 0.1;
    int decay_every = 50;
    int epochs = 150;
    int batch_size = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    std::uint64_t seed = 0;
    double train_ratio = 87.0 / 123.0;
    double val_ratio = 18.0 / 123.0;
    double test_ratio = 18.0 / 123.0;

    void validate() const {
        if (!(decay_factor > 0.0) || decay_factor > 1.0) {
            throw TrainError("decay_factor must be in (0, 1]");
        }
        if (epochs < 1 || decay_every < 1 || batch_size < 1) {
            throw TrainError("epochs, decay_every, batch_size must be >= 1");
        }
        if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
            throw TrainError("split ratios must sum to 1");
        }
    }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
    double lr = cfg.lr0;
    const int steps = epoch / cfg.decay_every;
    for (int k = 0; k < steps; ++k) lr *= cfg.decay_factor;
    return lr;
}

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then contiguous slices sized by largest-remainder
/// rounding of the ratios. Always a partition of 0..n-1.
inline SplitIndices split_dataset(std::size_t n, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
    if (n < 3) throw TooFewCases("split_dataset: need at least 3 cases");
    double ratio_sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(ratio_sum - 1.0) > 1e-9) {
        throw TrainError("split_dataset: ratios must sum to 1");
    }
    std::array<std::size_t, 3> sizes;
    std::array<double, 3> frac;
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(n);
        sizes[i] = static_cast<std::size_t>(std::floor(exact));
        frac[i] = exact - std::floor(exact);
        assigned += sizes[i];
    }
    // Hand remaining seats to the largest fractional parts, earlier split
    // winning ties.
    for (std::size_t seat = assigned; seat < n; ++seat) {
        int best = 0;
        for (int i = 1; i < 3; ++i) {
            if (frac[i] > frac[best]) best = i;
        }
        ++sizes[best];
        frac[best] = -1.0;
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    SplitIndices out;
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sizes[0]));
    out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes[0]),
                   order.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]),
                    order.end());
    return out;
}

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;  // first/second moments per parameter
    long t = 0;
    double beta1_pow = 1.0, beta2_pow = 1.0;  // running β^t, multiplied per step
};

/// One Adam update over every parameter, reading gradients in place.
template <typename T>
void adam_step(std::vector<ad::Tensor<T>>& params, AdamState<T>& state, double lr,
               double beta1, double beta2, double eps) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), T{});
            state.v[i].assign(params[i].numel(), T{});
        }
    }
    if (state.m.size() != params.size()) {
        throw ad::ShapeMismatch("adam_step: state holds " + std::to_string(state.m.size()) +
                                " tensors, registry has " + std::to_string(params.size()));
    }
    ++state.t;
    state.beta1_pow *= beta1;
    state.beta2_pow *= beta2;
    const double bc1 = 1.0 - state.beta1_pow;
    const double bc2 = 1.0 - state.beta2_pow;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel()) {
            throw ad::ShapeMismatch("adam_step: parameter " + params[i].name() +
                                    " changed size");
        }
        std::vector<T>& value = params[i].value();
        std::vector<T>& grad = params[i].grad();
        std::vector<T>& m = state.m[i];
        std::vector<T>& v = state.v[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = static_cast<double>(grad[j]);
            const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * g;
            const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            value[j] = static_cast<T>(static_cast<double>(value[j]) -
                                      lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_dice = std::numeric_limits<double>::quiet_NaN();  // NaN when no val split
};

/// Mean over present foreground classes of the per-class Dice, then over
/// cases; the summary number logged per epoch and used for best-checkpoint
/// selection.
template <typename Model>
double mean_case_dice(Model& model, const std::vector<LabeledCase>& cases) {
    if (cases.empty()) return std::numeric_limits<double>::quiet_NaN();
    double total = 0.0;
    for (const LabeledCase& c : cases) {
        const LabelVolume pred = model.predict(c.image);
        const MetricsReport rep = build_report(pred, c.labels);
        total += rep.dice.mean;
    }
    return total / static_cast<double>(cases.size());
}

/// Drives one model through seeded epochs: shuffle, forward, Dice loss,
/// backward, Adam, per-epoch log, best-validation snapshot. Epochs run one
/// at a time so callers can stop early on their own criteria.
template <typename Model>
class Trainer {
  public:
    using T = typename Model::scalar_type;

    Trainer(Model& model, std::vector<LabeledCase> train_cases,
            std::vector<LabeledCase> val_cases, TrainConfig cfg)
        : model_(model),
          train_cases_(std::move(train_cases)),
          val_cases_(std::move(val_cases)),
          cfg_(std::move(cfg)),
          rng_(cfg_.seed) {
        cfg_.validate();
        if (train_cases_.empty()) throw TooFewCases("trainer: empty train split");
        for (const LabeledCase& c : train_cases_) {
            onehots_.push_back(labels_to_onehot<T>(c.labels, model_.config().classes));
        }
    }

    EpochStats run_epoch() {
        const int epoch = static_cast<int>(history_.size());
        const double lr = lr_at(epoch, cfg_);

        std::vector<std::size_t> order(train_cases_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng_.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t idx : order) {
            model_.params().zero_grads();
            ad::Tensor<T> logits =
                model_.forward(image_to_tensor<T>(train_cases_[idx].image));
            ad::Tensor<T> loss = dice_loss(logits, onehots_[idx]);
            ad::backward(loss);
            adam_step(model_.params().all(), adam_, lr, cfg_.beta1, cfg_.beta2,
                      cfg_.eps_adam);
            loss_sum += static_cast<double>(loss.value()[0]);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = loss_sum / static_cast<double>(train_cases_.size());
        stats.val_dice = mean_case_dice(model_, val_cases_);
        if (!val_cases_.empty() &&
            (!has_best_ || stats.val_dice > best_val_dice_)) {
            best_val_dice_ = stats.val_dice;
            has_best_ = true;
            snapshot_best();
        }
        history_.push_back(stats);
        return stats;
    }

    const std::vector<EpochStats>& history() const { return history_; }
    bool has_best() const { return has_best_; }
    double best_val_dice() const { return best_val_dice_; }

    /// Load the best-validation parameter snapshot back into the model.
    void restore_best() {
        if (!has_best_) return;
        auto& params = model_.params().all();
        for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = best_values_[i];
    }

    /// CSV log: epoch, lr, train_loss, val_dice; byte-stable across runs.
    std::string log_csv() const {
        std::string out = "epoch,lr,train_loss,val_dice\n";
        char buf[128];
        for (const EpochStats& s : history_) {
            if (std::isnan(s.val_dice)) {
                std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,\n", s.epoch, s.lr,
                              s.train_loss);
            } else {
                std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g\n", s.epoch, s.lr,
                              s.train_loss, s.val_dice);
            }
            out += buf;
        }
        return out;
    }

  private:
    void snapshot_best() {
        best_values_.clear();
        for (auto& p : model_.params().all()) best_values_.push_back(p.value());
    }

    Model& model_;
    std::vector<LabeledCase> train_cases_, val_cases_;
    TrainConfig cfg_;
    Rng rng_;
    std::vector<ad::Tensor<T>> onehots_;
    AdamState<T> adam_;
    std::vector<EpochStats> history_;
    std::vector<std::vector<T>> best_values_;
    double best_val_dice_ = -1.0;
    bool has_best_ = false;
};

/// Full protocol run: cfg.epochs epochs, returning the trainer for log and
/// snapshot access.
template <typename Model>
Trainer<Model> train_loop(Model& model, std::vector<LabeledCase> train_cases,
                          std::vector<LabeledCase> val_cases, const TrainConfig& cfg) {
    Trainer<Model> trainer(model, std::move(train_cases), std::move(val_cases), cfg);
    for (int e = 0; e < cfg.epochs; ++e) trainer.run_epoch();
    return trainer;
}

}  // namespace liverformer
