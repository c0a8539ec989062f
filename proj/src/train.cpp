#include "casvit/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace casvit {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(base_lr >= 0) || !(min_lr >= 0)) throw ConfigError("learning rates must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  const auto warmup = static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (step < warmup) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::size_t>(total_steps - warmup, 1));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
AdamW<T>::AdamW(const TrainConfig& cfg, std::vector<Tensor<T>*> params)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), wd_(cfg.weight_decay) {
  for (Tensor<T>* p : params) {
    slots_.push_back(Slot{p, std::vector<double>(p->numel(), 0.0), std::vector<double>(p->numel(), 0.0),
                          p->rank() > 1});
  }
}

template <typename T>
void AdamW<T>::step(const std::vector<const Tensor<T>*>& grads, double lr) {
  if (grads.size() != slots_.size()) throw std::invalid_argument("AdamW::step: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    Slot& s = slots_[i];
    auto p = s.param->data();
    const bool has_grad = grads[i] != nullptr;
    if (has_grad && grads[i]->shape() != s.param->shape()) {
      throw ShapeError("AdamW::step: gradient shape " + shape_str(grads[i]->shape()) + " for parameter " +
                       shape_str(s.param->shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grads[i]->data()[j]) : 0.0;
      s.m[j] = beta1_ * s.m[j] + (1 - beta1_) * g;
      s.v[j] = beta2_ * s.v[j] + (1 - beta2_) * g * g;
      double w = static_cast<double>(p[j]);
      if (s.decay) w -= lr * wd_ * w;
      w -= lr * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + eps_);
      p[j] = static_cast<T>(w);
    }
  }
}

namespace {

std::vector<int> batch_labels(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
  return out;
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = logits.data().subspan(b * k, k);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[b]) ++correct;
  }
  return correct;
}

template <typename T>
[[noreturn]] void report_divergence(const Tape<T>& tape, std::size_t epoch, std::size_t step) {
  for (const auto& n : tape.nodes()) {
    if (n.kind != OpKind::leaf && !all_finite(n.value)) {
      const std::string scope = n.scope.empty() ? "<top>" : n.scope;
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(step) + ": first non-finite output from " + op_name(n.kind) +
                                " in " + scope,
                            scope, op_name(n.kind));
    }
  }
  for (const auto& n : tape.nodes()) {
    if (!all_finite(n.value)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                ": non-finite parameter " + n.detail,
                            n.scope, "leaf");
    }
  }
  throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss", "", "");
}

}  // namespace

template <typename T>
std::vector<EpochMetrics> train(Model<T>& model, const TrainConfig& cfg, const Dataset& data,
                                const Dataset& val, const EpochCallback& on_epoch) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw DatasetError("training set is empty");
  if (data.num_classes != model.config.num_classes) {
    throw ConfigError("model head has " + std::to_string(model.config.num_classes) + " classes, dataset has " +
                      std::to_string(data.num_classes));
  }
  std::vector<Tensor<T>*> params;
  visit<T>(model, [&](const std::string&, Tensor<T>& t, ParamRole role) {
    if (role == ParamRole::parameter) params.push_back(&t);
  });
  AdamW<T> opt(cfg, params);

  const std::size_t n = data.size();
  const std::size_t batch = std::min(cfg.batch_size, n);
  const std::size_t steps_per_epoch = n / batch;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::vector<EpochMetrics> history;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    EpochMetrics m;
    m.epoch = epoch + 1;
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::span<const std::size_t> idx(order.data() + s * batch, batch);
      const std::vector<int> labels = batch_labels(data, idx);
      Tape<T> tape;
      Context<T> ctx(tape, Mode::train);
      const Var<T> logits = backbone_forward(ctx, model, tape.constant(images_to_tensor<T>(data, idx)));
      const Var<T> loss = ag::cross_entropy(tape, logits, std::span<const int>(labels), cfg.label_smoothing);
      const double loss_value = static_cast<double>(loss.value().data()[0]);
      if (!std::isfinite(loss_value)) report_divergence(tape, epoch + 1, step);
      const GradMap<T> grads = tape.backward(loss);
      std::vector<const Tensor<T>*> g;
      g.reserve(params.size());
      for (Tensor<T>* p : params) g.push_back(ctx.grad(grads, *p));
      m.lr = learning_rate(cfg, step, total_steps);
      opt.step(g, m.lr);
      loss_sum += loss_value * static_cast<double>(batch);
      correct += count_correct(logits.value(), labels);
      seen += batch;
    }
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (val.size() > 0) {
      const EvalResult r = evaluate(model, val, 128);
      m.val_loss = r.loss;
      m.val_accuracy = r.accuracy;
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

template <typename T>
EvalResult evaluate(const LogitsFn<T>& logits_fn, const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  EvalResult r;
  r.count = data.size();
  if (data.size() == 0) return r;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, data.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> labels = batch_labels(data, idx);
    const Tensor<T> logits = logits_fn(images_to_tensor<T>(data, idx));
    if (logits.rank() != 2 || logits.dim(0) != idx.size() || logits.dim(1) != data.num_classes) {
      throw ShapeError("evaluate: logits " + shape_str(logits.shape()) + " do not match batch of " +
                       std::to_string(idx.size()) + " and " + std::to_string(data.num_classes) + " classes");
    }
    correct += count_correct(logits, labels);
    // Per-sample losses are summed so the mean does not depend on the chunking.
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Tensor<T> row(Shape{1, logits.dim(1)},
                          std::vector<T>(logits.data().begin() + b * logits.dim(1),
                                         logits.data().begin() + (b + 1) * logits.dim(1)));
      loss_sum += static_cast<double>(kernels::cross_entropy(row, std::span<const int>(&labels[b], 1), 0.0));
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  r.loss = loss_sum / static_cast<double>(data.size());
  return r;
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size) {
  return evaluate<T>([&](const Tensor<T>& images) { return predict(model, images); }, data, batch_size);
}

template class AdamW<float>;
template class AdamW<double>;

#define CASVIT_INSTANTIATE_TRAIN(T)                                                                     \
  template std::vector<EpochMetrics> train(Model<T>&, const TrainConfig&, const Dataset&, const Dataset&, \
                                           const EpochCallback&);                                       \
  template EvalResult evaluate(const LogitsFn<T>&, const Dataset&, std::size_t);                        \
  template EvalResult evaluate(Model<T>&, const Dataset&, std::size_t);

CASVIT_INSTANTIATE_TRAIN(float)
CASVIT_INSTANTIATE_TRAIN(double)
#undef CASVIT_INSTANTIATE_TRAIN

}  // namespace casvit
