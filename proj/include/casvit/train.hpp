#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "casvit/backbone.hpp"
#include "casvit/dataset.hpp"

namespace casvit {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double base_lr = 2e-3;
  double min_lr = 0.0;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;
  double label_smoothing = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Linear warmup over the first warmup_fraction of steps, then cosine decay to min_lr.
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

/// Adam with decoupled weight decay. Rank-1 tensors (biases, norm scales) are not decayed.
template <typename T>
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::vector<Tensor<T>*> params);
  /// grads[i] may be null for a parameter that received no gradient this step.
  void step(const std::vector<const Tensor<T>*>& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Slot {
    Tensor<T>* param;
    std::vector<double> m, v;
    bool decay;
  };
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<Slot> slots_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  bool operator==(const EpochMetrics& o) const {
    return epoch == o.epoch && train_loss == o.train_loss && train_accuracy == o.train_accuracy &&
           val_loss == o.val_loss && val_accuracy == o.val_accuracy && lr == o.lr;
  }
};

/// Raised when the training loss becomes non-finite; names the first node on the tape
/// whose output was non-finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, std::string scope, std::string op)
      : std::runtime_error(msg), scope_(std::move(scope)), op_(std::move(op)) {}
  const std::string& scope() const noexcept { return scope_; }
  const std::string& op() const noexcept { return op_; }

 private:
  std::string scope_, op_;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch training with per-epoch shuffling (drop_last when at least one full batch
/// exists). Validation is skipped when `val` is empty.
template <typename T>
std::vector<EpochMetrics> train(Model<T>& model, const TrainConfig& cfg, const Dataset& data,
                                const Dataset& val, const EpochCallback& on_epoch = {});

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

template <typename T>
using LogitsFn = std::function<Tensor<T>(const Tensor<T>& images)>;

/// Top-1 accuracy and mean (unsmoothed) cross-entropy of any logits function.
template <typename T>
EvalResult evaluate(const LogitsFn<T>& logits, const Dataset& data, std::size_t batch_size = 64);
/// Eval-mode BN; never mutates the model.
template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size = 64);

}  // namespace casvit
