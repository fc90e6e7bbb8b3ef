#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dffl/error.hpp"
#include "dffl/rng.hpp"

namespace dffl {

// One dense layer: a rows x cols weight block (input-major), optionally
// followed by `cols` bias terms.
struct LayerShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool bias = true;

  std::size_t size() const { return rows * cols + (bias ? cols : 0); }
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

// Flat model parameters. payload_bytes is the simulated on-wire size and is
// deliberately independent of values.size().
class ParameterVector {
 public:
  ParameterVector() = default;

  ParameterVector(std::vector<LayerShape> shapes, std::vector<double> values,
                  std::uint64_t payload_bytes)
      : shapes_(std::move(shapes)), values_(std::move(values)), payload_bytes_(payload_bytes) {
    validate();
  }

  const std::vector<LayerShape>& shapes() const { return shapes_; }
  const std::vector<double>& values() const { return values_; }
  std::uint64_t payload_bytes() const { return payload_bytes_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Same shapes and payload, new values.
  ParameterVector with_values(std::vector<double> values) const {
    return ParameterVector(shapes_, std::move(values), payload_bytes_);
  }

  bool same_layout(const ParameterVector& other) const { return shapes_ == other.shapes_; }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  void validate() const {
    if (payload_bytes_ == 0) throw ValidationError("ParameterVector: payload_bytes must be > 0");
    std::size_t expected = 0;
    for (const auto& s : shapes_) expected += s.size();
    if (expected != values_.size()) {
      throw ValidationError("ParameterVector: " + std::to_string(values_.size()) +
                            " values but shapes declare " + std::to_string(expected));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw ValidationError("ParameterVector: non-finite value at index " + std::to_string(i));
      }
    }
  }

  std::vector<LayerShape> shapes_;
  std::vector<double> values_;
  std::uint64_t payload_bytes_ = 1;
};

// Row-major feature matrix plus class labels.
struct Dataset {
  std::size_t n_features = 0;
  std::size_t class_count = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * n_features, n_features};
  }

  std::size_t count_label(std::size_t label) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
  }

  void validate() const {
    if (class_count == 0) throw ValidationError("Dataset: class_count must be positive");
    if (features.size() != labels.size() * n_features) {
      throw ValidationError("Dataset: feature matrix does not match labels x n_features");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= class_count) {
        throw ValidationError("Dataset: label " + std::to_string(labels[i]) + " at row " +
                              std::to_string(i) + " >= class_count");
      }
    }
    for (double v : features) {
      if (!std::isfinite(v)) throw ValidationError("Dataset: non-finite feature value");
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class ModelKind { logistic, mlp };

struct TrainerSpec {
  ModelKind model_kind = ModelKind::mlp;
  std::size_t hidden_width = 8;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t epochs = 90;

  void validate() const {
    if (epochs < 1) throw ValidationError("TrainerSpec: epochs must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ValidationError("TrainerSpec: learning_rate must be > 0");
    }
    if (batch_size < 1) throw ValidationError("TrainerSpec: batch_size must be >= 1");
    if (model_kind == ModelKind::mlp && hidden_width < 1) {
      throw ValidationError("TrainerSpec: mlp hidden_width must be >= 1");
    }
  }

  friend bool operator==(const TrainerSpec&, const TrainerSpec&) = default;
};

inline std::vector<LayerShape> model_layout(const TrainerSpec& spec, std::size_t n_features,
                                            std::size_t class_count) {
  if (spec.model_kind == ModelKind::logistic) return {{n_features, class_count, true}};
  return {{n_features, spec.hidden_width, true}, {spec.hidden_width, class_count, true}};
}

// Logistic models start at zero; MLP weights get a seeded uniform
// Glorot-style draw so hidden units are not symmetric.
inline ParameterVector init_params(const TrainerSpec& spec, std::size_t n_features,
                                   std::size_t class_count, std::uint64_t payload_bytes,
                                   std::uint64_t seed) {
  auto layout = model_layout(spec, n_features, class_count);
  std::vector<double> values;
  auto rng = make_rng(seed);
  for (const auto& layer : layout) {
    double limit = spec.model_kind == ModelKind::logistic
                       ? 0.0
                       : std::sqrt(6.0 / static_cast<double>(layer.rows + layer.cols));
    for (std::size_t i = 0; i < layer.rows * layer.cols; ++i) {
      values.push_back(limit == 0.0 ? 0.0 : (2.0 * uniform01(rng) - 1.0) * limit);
    }
    if (layer.bias) values.insert(values.end(), layer.cols, 0.0);
  }
  return ParameterVector(std::move(layout), std::move(values), payload_bytes);
}

// ---------------------------------------------------------------------------
// Synthetic data

// Gaussian blobs with unit variance. Class c is centred on axis
// (c + axis_offset) mod n_features at distance separation/sqrt(2) from the
// origin, so any two class means are `separation` apart. With more classes
// than features the means sit on a circle in the first two dimensions.
struct SyntheticSpec {
  std::size_t n_samples = 0;
  std::size_t n_features = 2;
  std::size_t class_count = 2;
  std::vector<double> class_ratios;
  double separation = 4.0;
  std::size_t axis_offset = 0;
  std::uint64_t seed = 0;
};

// Largest-remainder apportionment; ties go to the lower class index.
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> ratios) {
  std::vector<std::size_t> counts(ratios.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < ratios.size(); ++c) {
    double exact = ratios[c] * static_cast<double>(total);
    auto whole = static_cast<std::size_t>(std::floor(exact));
    counts[c] = whole;
    assigned += whole;
    remainders.emplace_back(exact - static_cast<double>(whole), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < remainders.size(); ++k, ++assigned) {
    counts[remainders[k].second] += 1;
  }
  while (assigned > total) {
    // Only reachable through rounding noise in floor(); take from the largest class.
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

inline std::vector<double> class_mean(std::size_t cls, std::size_t n_features,
                                      std::size_t class_count, double separation,
                                      std::size_t axis_offset) {
  std::vector<double> mean(n_features, 0.0);
  if (class_count <= n_features) {
    mean[(cls + axis_offset) % n_features] = separation / std::sqrt(2.0);
  } else if (n_features >= 2) {
    const double pi = std::acos(-1.0);
    double radius = separation / (2.0 * std::sin(pi / static_cast<double>(class_count)));
    double angle = 2.0 * pi * static_cast<double>(cls) / static_cast<double>(class_count);
    mean[0] = radius * std::cos(angle);
    mean[1] = radius * std::sin(angle);
  } else {
    mean[0] = separation * static_cast<double>(cls);
  }
  return mean;
}

inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.n_samples == 0) throw ValidationError("generate_synthetic_dataset: zero samples");
  if (spec.class_count == 0) throw ValidationError("generate_synthetic_dataset: zero classes");
  if (spec.n_features == 0) throw ValidationError("generate_synthetic_dataset: zero features");
  if (spec.class_ratios.size() != spec.class_count) {
    throw ValidationError("generate_synthetic_dataset: need one ratio per class");
  }
  if (spec.n_samples < spec.class_count) {
    throw ValidationError("generate_synthetic_dataset: n_samples < class_count");
  }
  double sum = 0.0;
  for (double r : spec.class_ratios) {
    if (!(r >= 0.0)) throw ValidationError("generate_synthetic_dataset: negative class ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("generate_synthetic_dataset: class ratios sum to " + std::to_string(sum));
  }

  auto counts = apportion(spec.n_samples, spec.class_ratios);
  std::vector<std::size_t> labels;
  labels.reserve(spec.n_samples);
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], c);

  auto rng = make_rng(spec.seed);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    means.push_back(class_mean(c, spec.n_features, spec.class_count, spec.separation, spec.axis_offset));
  }

  Dataset out;
  out.n_features = spec.n_features;
  out.class_count = spec.class_count;
  out.labels = std::move(labels);
  out.features.reserve(spec.n_samples * spec.n_features);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t label : out.labels) {
    for (std::size_t f = 0; f < spec.n_features; ++f) {
      out.features.push_back(means[label][f] + noise(rng));
    }
  }
  return out;
}

inline Dataset generate_synthetic_dataset(std::size_t n_samples, std::size_t n_features,
                                          std::size_t class_count, std::vector<double> class_ratios,
                                          double separation, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_samples = n_samples;
  spec.n_features = n_features;
  spec.class_count = class_count;
  spec.class_ratios = std::move(class_ratios);
  spec.separation = separation;
  spec.seed = seed;
  return generate_synthetic_dataset(spec);
}

inline Dataset concat_datasets(const Dataset& a, const Dataset& b) {
  if (a.n_features != b.n_features || a.class_count != b.class_count) {
    throw ValidationError("concat_datasets: incompatible datasets");
  }
  Dataset out = a;
  out.features.insert(out.features.end(), b.features.begin(), b.features.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

// Deterministic split into (kept, held_out) with round(fraction * n) held out.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction,
                                                 std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ValidationError("split_holdout: fraction must be in (0, 1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  held = std::clamp<std::size_t>(held, 1, data.size() - 1);

  auto take = [&](std::size_t from, std::size_t to) {
    Dataset d;
    d.n_features = data.n_features;
    d.class_count = data.class_count;
    for (std::size_t k = from; k < to; ++k) {
      auto r = data.row(order[k]);
      d.features.insert(d.features.end(), r.begin(), r.end());
      d.labels.push_back(data.labels[order[k]]);
    }
    return d;
  };
  return {take(held, data.size()), take(0, held)};
}

// Relabel floor(fraction * count(source)) seeded-chosen samples of
// source_class as target_class.
inline Dataset corrupt_labels(const Dataset& data, std::size_t source_class,
                              std::size_t target_class, double fraction, std::uint64_t seed) {
  if (source_class == target_class) {
    throw ValidationError("corrupt_labels: source_class equals target_class");
  }
  if (source_class >= data.class_count || target_class >= data.class_count) {
    throw ValidationError("corrupt_labels: class index out of range");
  }
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ValidationError("corrupt_labels: fraction must be in [0, 1]");
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] == source_class) candidates.push_back(i);
  }
  auto flips = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(candidates.size())));
  auto rng = make_rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);

  Dataset out = data;
  for (std::size_t k = 0; k < flips; ++k) out.labels[candidates[k]] = target_class;
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline void check_compatible(const ParameterVector& params, const Dataset& data) {
  const auto& shapes = params.shapes();
  if (shapes.empty() || shapes.size() > 2) {
    throw ValidationError("model: expected 1 (logistic) or 2 (mlp) layers");
  }
  if (shapes.front().rows != data.n_features) {
    throw ValidationError("model: first layer expects " + std::to_string(shapes.front().rows) +
                          " features, dataset has " + std::to_string(data.n_features));
  }
  if (shapes.back().cols != data.class_count) {
    throw ValidationError("model: output layer has " + std::to_string(shapes.back().cols) +
                          " classes, dataset has " + std::to_string(data.class_count));
  }
  if (shapes.size() == 2 && shapes[0].cols != shapes[1].rows) {
    throw ValidationError("model: hidden layer widths disagree");
  }
}

// out[j] = sum_i in[i] * W[i][j] + b[j]
inline void dense_forward(const double* w, std::size_t rows, std::size_t cols, bool bias,
                          std::span<const double> in, double* out) {
  if (bias) {
    const double* b = w + rows * cols;
    std::copy(b, b + cols, out);
  } else {
    std::fill(out, out + cols, 0.0);
  }
  for (std::size_t i = 0; i < rows; ++i) {
    double x = in[i];
    const double* wi = w + i * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += x * wi[j];
  }
}

// Reusable buffers for one network evaluation.
class Network {
 public:
  explicit Network(const std::vector<LayerShape>& shapes) : shapes_(shapes) {
    hidden_.resize(shapes_.size() == 2 ? shapes_[0].cols : 0);
    logits_.resize(shapes_.back().cols);
    probs_.resize(shapes_.back().cols);
    if (shapes_.size() == 2) hidden_grad_.resize(shapes_[0].cols);
  }

  std::span<const double> logits(const double* params, std::span<const double> x) {
    if (shapes_.size() == 1) {
      dense_forward(params, shapes_[0].rows, shapes_[0].cols, shapes_[0].bias, x, logits_.data());
    } else {
      dense_forward(params, shapes_[0].rows, shapes_[0].cols, shapes_[0].bias, x, hidden_.data());
      for (double& h : hidden_) h = std::tanh(h);
      dense_forward(params + shapes_[0].size(), shapes_[1].rows, shapes_[1].cols, shapes_[1].bias,
                    hidden_, logits_.data());
    }
    return logits_;
  }

  // Adds d(-log softmax(label))/d(params) * scale into grad; returns the loss.
  double accumulate_gradient(const double* params, std::span<const double> x, std::size_t label,
                             double scale, double* grad) {
    logits(params, x);
    double max_logit = *std::max_element(logits_.begin(), logits_.end());
    double denom = 0.0;
    for (std::size_t j = 0; j < logits_.size(); ++j) {
      probs_[j] = std::exp(logits_[j] - max_logit);
      denom += probs_[j];
    }
    for (double& p : probs_) p /= denom;
    double loss = -std::log(std::max(probs_[label], 1e-300));
    probs_[label] -= 1.0;  // dL/dlogits

    const auto& out = shapes_.back();
    double* gw = grad + (shapes_.size() == 2 ? shapes_[0].size() : 0);
    std::span<const double> out_in = shapes_.size() == 2 ? std::span<const double>(hidden_) : x;
    for (std::size_t i = 0; i < out.rows; ++i) {
      double a = out_in[i] * scale;
      double* gi = gw + i * out.cols;
      for (std::size_t j = 0; j < out.cols; ++j) gi[j] += a * probs_[j];
    }
    if (out.bias) {
      double* gb = gw + out.rows * out.cols;
      for (std::size_t j = 0; j < out.cols; ++j) gb[j] += scale * probs_[j];
    }

    if (shapes_.size() == 2) {
      const auto& first = shapes_[0];
      const double* w2 = params + first.size();
      for (std::size_t i = 0; i < out.rows; ++i) {
        double acc = 0.0;
        const double* wi = w2 + i * out.cols;
        for (std::size_t j = 0; j < out.cols; ++j) acc += wi[j] * probs_[j];
        hidden_grad_[i] = acc * (1.0 - hidden_[i] * hidden_[i]) * scale;
      }
      for (std::size_t i = 0; i < first.rows; ++i) {
        double xi = x[i];
        double* gi = grad + i * first.cols;
        for (std::size_t j = 0; j < first.cols; ++j) gi[j] += xi * hidden_grad_[j];
      }
      if (first.bias) {
        double* gb = grad + first.rows * first.cols;
        for (std::size_t j = 0; j < first.cols; ++j) gb[j] += hidden_grad_[j];
      }
    }
    return loss;
  }

 private:
  std::vector<LayerShape> shapes_;
  std::vector<double> hidden_;
  std::vector<double> hidden_grad_;
  std::vector<double> logits_;
  std::vector<double> probs_;
};

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

}  // namespace detail

// Mean softmax cross-entropy over `indices` (all samples when empty) and its
// gradient with respect to every parameter.
inline std::pair<double, std::vector<double>> loss_and_gradient(
    const ParameterVector& params, const Dataset& data, std::span<const std::size_t> indices = {}) {
  detail::check_compatible(params, data);
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    indices = all;
  }
  detail::Network net(params.shapes());
  std::vector<double> grad(params.size(), 0.0);
  double scale = 1.0 / static_cast<double>(indices.size());
  double loss = 0.0;
  for (std::size_t idx : indices) {
    loss += net.accumulate_gradient(params.values().data(), data.row(idx), data.labels[idx], scale,
                                    grad.data());
  }
  return {loss * scale, std::move(grad)};
}

inline std::size_t predict(const ParameterVector& params, std::span<const double> features) {
  detail::Network net(params.shapes());
  return detail::argmax(net.logits(params.values().data(), features));
}

// Fraction of argmax-correct predictions.
inline double evaluate(const ParameterVector& params, const Dataset& data) {
  if (data.empty()) throw ValidationError("evaluate: empty dataset");
  detail::check_compatible(params, data);
  detail::Network net(params.shapes());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (detail::argmax(net.logits(params.values().data(), data.row(i))) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct TrainResult {
  ParameterVector params;
  double local_accuracy = 0.0;
};

// Mini-batch SGD on softmax cross-entropy with a seeded shuffle per epoch.
// epochs == 0 is accepted here (returns params unchanged) even though a
// TrainerSpec used in a Job must have epochs >= 1.
inline TrainResult train_local(const ParameterVector& params, const Dataset& data,
                               const TrainerSpec& spec, std::uint64_t seed) {
  detail::check_compatible(params, data);
  if (data.empty()) throw ValidationError("train_local: empty dataset");
  if (spec.batch_size < 1) throw ValidationError("train_local: batch_size must be >= 1");
  if (!(spec.learning_rate > 0.0)) throw ValidationError("train_local: learning_rate must be > 0");

  std::vector<double> w = params.values();
  std::vector<double> grad(w.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::Network net(params.shapes());
  auto rng = make_rng(seed);

  std::size_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size, ++batch_index) {
      std::size_t end = std::min(order.size(), start + spec.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        net.accumulate_gradient(w.data(), data.row(order[k]), data.labels[order[k]], scale, grad.data());
      }
      for (std::size_t p = 0; p < w.size(); ++p) {
        if (!std::isfinite(grad[p])) {
          throw NumericError("train_local: non-finite gradient in batch " +
                             std::to_string(batch_index) + " (epoch " + std::to_string(epoch) + ")");
        }
        w[p] -= spec.learning_rate * grad[p];
      }
    }
  }
  auto updated = params.with_values(std::move(w));
  double acc = evaluate(updated, data);
  return {std::move(updated), acc};
}

// Element-wise weighted mean, weights normalised to sum to one.
inline ParameterVector aggregate(std::span<const std::pair<ParameterVector, double>> updates) {
  if (updates.empty()) throw ValidationError("aggregate: no updates");
  const auto& first = updates.front().first;
  double total = 0.0;
  for (const auto& [p, weight] : updates) {
    if (!p.same_layout(first) || p.size() != first.size()) {
      throw ValidationError("aggregate: shape mismatch between updates");
    }
    if (p.payload_bytes() != first.payload_bytes()) {
      throw ValidationError("aggregate: payload_bytes differ between updates");
    }
    if (!(weight >= 0.0) || !std::isfinite(weight)) {
      throw ValidationError("aggregate: weights must be finite and nonnegative");
    }
    total += weight;
  }
  if (!(total > 0.0)) throw ValidationError("aggregate: weights sum to zero");

  std::vector<double> out(first.size(), 0.0);
  std::vector<double> lo = first.values();
  std::vector<double> hi = first.values();
  for (const auto& [p, weight] : updates) {
    double share = weight / total;
    const auto& v = p.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] += share * v[i];
      lo[i] = std::min(lo[i], v[i]);
      hi[i] = std::max(hi[i], v[i]);
    }
  }
  // Rounding in the normalised sum can step an ulp outside the hull of the inputs.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], lo[i], hi[i]);
  return first.with_values(std::move(out));
}

inline ParameterVector aggregate(const std::vector<std::pair<ParameterVector, double>>& updates) {
  return aggregate(std::span<const std::pair<ParameterVector, double>>(updates));
}

}  // namespace dffl
