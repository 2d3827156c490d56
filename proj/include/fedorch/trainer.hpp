#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedorch/datakit.hpp"
#include "fedorch/error.hpp"
#include "fedorch/rng.hpp"
#include "fedorch/tensor.hpp"

namespace fedorch {

struct ModelSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;  // empty: logistic regression
  std::uint64_t seed = 0;
};

/// Glorot-uniform weights drawn from `spec.seed`, zero biases. Entries are
/// w0,b0,w1,b1,... with w_l shaped [fan_in, fan_out]; the last layer has a
/// single output unit.
inline TensorMap init_model(const ModelSpec& spec) {
  require(spec.input_dim >= 1, ErrorCode::InvalidSpec, "input_dim must be >= 1");
  for (std::size_t h : spec.hidden_dims) require(h >= 1, ErrorCode::InvalidSpec, "hidden layer width must be >= 1");

  std::vector<std::size_t> widths{spec.input_dim};
  widths.insert(widths.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  widths.push_back(1);

  Rng rng(derive_seed(spec.seed, 0x1417u));
  TensorMap out;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<float> w(fan_in * fan_out);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-limit, limit));
    out.add("w" + std::to_string(l), {static_cast<std::uint32_t>(fan_in), static_cast<std::uint32_t>(fan_out)},
            std::move(w));
    out.add("b" + std::to_string(l), {static_cast<std::uint32_t>(fan_out)}, std::vector<float>(fan_out, 0.0f));
  }
  return out;
}

inline double sigmoid(double z) noexcept {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) noexcept { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Dense tanh network with a sigmoid output, evaluated in double precision.
/// Parameters are kept flat in TensorMap order so they can be perturbed and
/// copied back without re-deriving the layout.
class Network {
 public:
  static Network from_weights(const TensorMap& weights) {
    Network net;
    require(weights.size() >= 2 && weights.size() % 2 == 0, ErrorCode::StructureMismatch,
            "weights must hold w/b pairs");
    std::size_t offset = 0;
    for (std::size_t l = 0; l < weights.size() / 2; ++l) {
      const auto& w = weights.entries()[2 * l];
      const auto& b = weights.entries()[2 * l + 1];
      require(w.name == "w" + std::to_string(l) && b.name == "b" + std::to_string(l), ErrorCode::StructureMismatch,
              "unexpected entry names '" + w.name + "', '" + b.name + "'");
      require(w.shape.size() == 2 && b.shape.size() == 1 && b.shape[0] == w.shape[1], ErrorCode::StructureMismatch,
              "layer " + std::to_string(l) + " has inconsistent shapes");
      if (!net.layers_.empty())
        require(net.layers_.back().fan_out == w.shape[0], ErrorCode::StructureMismatch, "layer widths do not chain");
      Layer layer{w.shape[0], w.shape[1], offset, offset + w.data.size()};
      offset += w.data.size() + b.data.size();
      net.layers_.push_back(layer);
    }
    require(net.layers_.back().fan_out == 1, ErrorCode::StructureMismatch, "output layer must have one unit");
    net.params_.reserve(offset);
    for (const auto& e : weights.entries())
      for (float v : e.data) net.params_.push_back(static_cast<double>(v));
    net.template_ = weights;
    return net;
  }

  std::size_t input_dim() const noexcept { return layers_.front().fan_in; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  void set_params(std::span<const float> values) {
    require(values.size() == params_.size(), ErrorCode::StructureMismatch, "parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) params_[i] = static_cast<double>(values[i]);
  }

  /// Converts flat values (e.g. a gradient) back into this network's layout.
  TensorMap to_tensor_map(std::span<const double> values) const {
    std::vector<float> f(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
    return template_.with_values(f);
  }

  double logit(std::span<const float> x) const {
    require(x.size() == input_dim(), ErrorCode::DimensionMismatch,
            "expected " + std::to_string(input_dim()) + " features, got " + std::to_string(x.size()));
    std::vector<double> act(x.begin(), x.end()), next;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      next.assign(L.fan_out, 0.0);
      for (std::size_t j = 0; j < L.fan_out; ++j) next[j] = params_[L.bias_offset + j];
      for (std::size_t i = 0; i < L.fan_in; ++i) {
        const double a = act[i];
        const double* row = &params_[L.weight_offset + i * L.fan_out];
        for (std::size_t j = 0; j < L.fan_out; ++j) next[j] += a * row[j];
      }
      if (l + 1 < layers_.size())
        for (double& v : next) v = std::tanh(v);
      act.swap(next);
    }
    return act[0];
  }

  double predict(std::span<const float> x) const { return sigmoid(logit(x)); }

  /// Mean binary cross-entropy over `rows` of the dataset.
  double loss(const FeatureMatrix& x, std::span<const std::uint8_t> y, std::span<const std::size_t> rows) const {
    require(!rows.empty(), ErrorCode::EmptyBatch, "empty batch");
    double total = 0.0;
    for (std::size_t r : rows) {
      const double z = logit(x.row(r));
      total += softplus(z) - static_cast<double>(y[r]) * z;
    }
    return total / static_cast<double>(rows.size());
  }

  /// Mean loss over `rows`; writes d(loss)/d(params) into `grad`.
  double loss_and_gradient(const FeatureMatrix& x, std::span<const std::uint8_t> y, std::span<const std::size_t> rows,
                           std::vector<double>& grad) const {
    require(!rows.empty(), ErrorCode::EmptyBatch, "empty batch");
    require(x.cols() == input_dim(), ErrorCode::DimensionMismatch, "feature width does not match model input");
    grad.assign(params_.size(), 0.0);
    const double scale = 1.0 / static_cast<double>(rows.size());

    std::vector<std::vector<double>> acts(layers_.size() + 1);
    std::vector<double> delta, prev_delta;
    double total = 0.0;
    for (std::size_t r : rows) {
      require(y[r] <= 1, ErrorCode::DimensionMismatch, "label outside {0,1}");
      auto xr = x.row(r);
      acts[0].assign(xr.begin(), xr.end());
      for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& L = layers_[l];
        auto& out = acts[l + 1];
        out.assign(L.fan_out, 0.0);
        for (std::size_t j = 0; j < L.fan_out; ++j) out[j] = params_[L.bias_offset + j];
        for (std::size_t i = 0; i < L.fan_in; ++i) {
          const double a = acts[l][i];
          const double* row = &params_[L.weight_offset + i * L.fan_out];
          for (std::size_t j = 0; j < L.fan_out; ++j) out[j] += a * row[j];
        }
        if (l + 1 < layers_.size())
          for (double& v : out) v = std::tanh(v);
      }
      const double z = acts.back()[0];
      const double label = static_cast<double>(y[r]);
      total += softplus(z) - label * z;

      delta.assign(1, (sigmoid(z) - label) * scale);
      for (std::size_t l = layers_.size(); l-- > 0;) {
        const Layer& L = layers_[l];
        const auto& in = acts[l];
        for (std::size_t j = 0; j < L.fan_out; ++j) grad[L.bias_offset + j] += delta[j];
        for (std::size_t i = 0; i < L.fan_in; ++i) {
          double* g = &grad[L.weight_offset + i * L.fan_out];
          for (std::size_t j = 0; j < L.fan_out; ++j) g[j] += in[i] * delta[j];
        }
        if (l == 0) break;
        prev_delta.assign(L.fan_in, 0.0);
        for (std::size_t i = 0; i < L.fan_in; ++i) {
          const double* row = &params_[L.weight_offset + i * L.fan_out];
          double s = 0.0;
          for (std::size_t j = 0; j < L.fan_out; ++j) s += row[j] * delta[j];
          prev_delta[i] = s * (1.0 - in[i] * in[i]);
        }
        delta.swap(prev_delta);
      }
    }
    return total * scale;
  }

 private:
  struct Layer {
    std::size_t fan_in, fan_out, weight_offset, bias_offset;
  };

  std::vector<Layer> layers_;
  std::vector<double> params_;
  TensorMap template_;
};

/// Probability of the positive class.
inline double forward(const TensorMap& weights, std::span<const float> features) {
  return Network::from_weights(weights).predict(features);
}

struct LossAndGradient {
  double loss;
  TensorMap grad;
};

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

inline LossAndGradient loss_and_gradient(const TensorMap& weights, const FeatureMatrix& x,
                                         std::span<const std::uint8_t> y) {
  require(x.rows() == y.size(), ErrorCode::DimensionMismatch, "feature rows != label count");
  require(!y.empty(), ErrorCode::EmptyBatch, "empty batch");
  Network net = Network::from_weights(weights);
  std::vector<double> grad;
  const auto rows = all_rows(y.size());
  const double loss = net.loss_and_gradient(x, y, rows, grad);
  return {loss, net.to_tensor_map(grad)};
}

// Adam

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<double> first_moment;   // flat, TensorMap order; empty until first step
  std::vector<double> second_moment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

namespace detail {

inline void adam_apply(OptimizerState& s, std::span<float> weights, std::span<const double> grad) {
  require(weights.size() == grad.size(), ErrorCode::StructureMismatch, "gradient does not match weights");
  if (s.first_moment.empty() && s.second_moment.empty()) {
    s.first_moment.assign(weights.size(), 0.0);
    s.second_moment.assign(weights.size(), 0.0);
  }
  require(s.first_moment.size() == weights.size() && s.second_moment.size() == weights.size(),
          ErrorCode::StructureMismatch, "optimizer moments do not match weights");
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double g = grad[i];
    s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * g;
    s.second_moment[i] = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = s.first_moment[i] / c1;
    const double v_hat = s.second_moment[i] / c2;
    weights[i] = static_cast<float>(static_cast<double>(weights[i]) - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon));
  }
}

}  // namespace detail

/// One bias-corrected Adam update.
inline std::pair<OptimizerState, TensorMap> adam_step(OptimizerState state, const TensorMap& weights,
                                                      const TensorMap& grad) {
  detail::require_same_structure(weights, grad, "adam_step");
  std::vector<float> w = weights.flatten();
  std::vector<float> gf = grad.flatten();
  std::vector<double> g(gf.begin(), gf.end());
  detail::adam_apply(state, w, g);
  return {std::move(state), weights.with_values(w)};
}

// Reduce-on-plateau

struct PlateauScheduler {
  double factor = 0.1;
  std::uint32_t patience = 10;
  double best_loss = std::numeric_limits<double>::infinity();
  std::uint32_t evals_since_improvement = 0;
  double min_lr = 0.0;
};

/// Feeds one validation loss. The rate is multiplied by `factor` when
/// `patience` consecutive observations fail to strictly beat the best loss;
/// the counter resets on improvement and on every reduction.
inline std::pair<PlateauScheduler, double> scheduler_observe(PlateauScheduler s, double val_loss, double lr) {
  require(std::isfinite(val_loss), ErrorCode::NonFiniteLoss, "validation loss is not finite");
  if (val_loss < s.best_loss) {
    s.best_loss = val_loss;
    s.evals_since_improvement = 0;
    return {s, lr};
  }
  if (++s.evals_since_improvement >= s.patience) {
    s.evals_since_improvement = 0;
    const double reduced = lr * s.factor;
    return {s, reduced > s.min_lr ? reduced : std::min(lr, s.min_lr)};
  }
  return {s, lr};
}

// Local training

struct TrainerConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::uint32_t epochs_per_round = 10;
  std::uint64_t seed = 0;
  bool reset_optimizer_each_round = false;
  double plateau_factor = 0.1;
  std::uint32_t plateau_patience = 10;
  double min_lr = 0.0;
};

/// Everything a node carries from one training call to the next.
struct TrainerState {
  OptimizerState optimizer;
  PlateauScheduler scheduler;
  std::uint64_t epochs_completed = 0;

  static TrainerState fresh(const TrainerConfig& cfg) {
    TrainerState s;
    s.optimizer.learning_rate = cfg.learning_rate;
    s.scheduler.factor = cfg.plateau_factor;
    s.scheduler.patience = cfg.plateau_patience;
    s.scheduler.min_lr = cfg.min_lr;
    return s;
  }
};

struct TrainReport {
  std::uint32_t epochs_run = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  std::uint64_t sample_count = 0;
  TensorMap weights;
  std::vector<double> learning_rates;  // rate in effect during each epoch
};

/// Runs `epochs` shuffled mini-batch passes over the train split starting
/// from `weights`, threading optimizer and scheduler state through `state`.
/// Epoch e of the run shuffles with derive_seed(rng_seed, epochs_completed),
/// so splitting one call into two chained calls gives the same result.
inline TrainReport train_local(const TensorMap& weights, const SiteDataset& data, std::uint32_t epochs,
                               std::uint64_t rng_seed, const TrainerConfig& config, TrainerState& state) {
  require(epochs >= 1, ErrorCode::InvalidSpec, "epochs must be >= 1");
  require(config.batch_size >= 1, ErrorCode::InvalidSpec, "batch_size must be >= 1");
  require(!data.split.train.empty(), ErrorCode::EmptySplit, data.site_id + ": empty train split");
  require(!data.split.val.empty(), ErrorCode::EmptySplit, data.site_id + ": empty validation split");

  Network net = Network::from_weights(weights);
  require(net.input_dim() == data.dim(), ErrorCode::DimensionMismatch,
          "model expects " + std::to_string(net.input_dim()) + " features, dataset has " + std::to_string(data.dim()));

  std::vector<float> flat = weights.flatten();
  std::vector<double> grad;
  std::vector<std::size_t> order = data.split.train;

  TrainReport report;
  report.sample_count = data.split.train.size();
  report.initial_train_loss = net.loss(data.features, data.labels, data.split.train);

  for (std::uint32_t e = 0; e < epochs; ++e) {
    report.learning_rates.push_back(state.optimizer.learning_rate);
    order = data.split.train;
    Rng rng(derive_seed(rng_seed, state.epochs_completed));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      std::span<const std::size_t> batch(order.data() + start, len);
      net.loss_and_gradient(data.features, data.labels, batch, grad);
      detail::adam_apply(state.optimizer, flat, grad);
      net.set_params(flat);
    }
    const double val_loss = net.loss(data.features, data.labels, data.split.val);
    auto [sched, lr] = scheduler_observe(state.scheduler, val_loss, state.optimizer.learning_rate);
    state.scheduler = sched;
    state.optimizer.learning_rate = lr;
    ++state.epochs_completed;
    report.final_val_loss = val_loss;
  }
  report.epochs_run = epochs;
  report.final_train_loss = net.loss(data.features, data.labels, data.split.train);
  report.weights = weights.with_values(flat);
  return report;
}

inline TrainReport train_local(const TensorMap& weights, const SiteDataset& data, std::uint32_t epochs,
                               std::uint64_t rng_seed, const TrainerConfig& config = {}) {
  TrainerState state = TrainerState::fresh(config);
  return train_local(weights, data, epochs, rng_seed, config, state);
}

}  // namespace fedorch
