// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repr/tensor.hpp"

namespace repr {

/// Coordinates of one convolutional filter in a model.
struct FilterId {
  std::size_t layer = 0;
  std::size_t filter = 0;
  auto operator<=>(const FilterId&) const = default;
};

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState fresh(std::size_t filters);
  /// Restores filter j to gamma=1, beta=0 and running stats (0, 1).
  void reset_filter(std::size_t j);
};

/// One conv layer: weights [J, c, k, k], bias [J], optional batch norm.
/// Stride 1 with same padding (k / 2) is used throughout the model.
struct ConvLayer {
  Tensor weights;
  Tensor bias;
  std::optional<BatchNormState> bn;

  std::size_t filters() const { return weights.dim(0); }
  std::size_t channels() const { return weights.dim(1); }
  std::size_t kernel() const { return weights.dim(2); }
  std::size_t filter_size() const { return channels() * kernel() * kernel(); }
  std::size_t padding() const { return kernel() / 2; }
};

/// Architecture of the vanilla ConvNet family: `layers` blocks of
/// conv(filters) -> [bn] -> relu, then one fully connected layer.
struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t num_classes = 10;
  std::size_t layers = 3;
  std::size_t filters = 32;
  std::size_t kernel = 3;
  bool batch_norm = false;
  double dropout = 0.0;
  bool operator==(const ModelSpec&) const = default;
};

struct Model {
  ModelSpec spec;
  std::vector<ConvLayer> conv_layers;
  Tensor fc_weights; ///< [num_classes, flattened_dim]
  Tensor fc_bias;    ///< [num_classes]

  /// Kaiming-normal conv weights (std sqrt(2 / (k*k*c))), N(0, 0.01) FC
  /// weights, zero biases.
  static Model create(const ModelSpec& spec, std::uint64_t seed);

  std::size_t layer_count() const { return conv_layers.size(); }
  std::size_t total_filters() const;
  /// Spatial extent of the feature maps after layer `layer`.
  std::size_t out_height(std::size_t layer) const;
  std::size_t out_width(std::size_t layer) const;
  std::size_t flattened_dim() const;

  /// Throws ConfigError if consecutive layers are not channel compatible or
  /// the FC input width does not match the last feature map.
  void check_consistency() const;
};

/// Per-filter liveness. A false bit zeroes the filter's output channel and
/// freezes its parameters.
class PruneMask {
public:
  PruneMask() = default;
  static PruneMask all_live(const Model& model);

  std::size_t layer_count() const { return live_.size(); }
  std::size_t filters(std::size_t layer) const { return live_.at(layer).size(); }
  bool is_live(std::size_t layer, std::size_t filter) const { return live_.at(layer).at(filter) != 0; }
  bool is_live(FilterId id) const { return is_live(id.layer, id.filter); }
  void set(FilterId id, bool live);

  std::size_t live_count() const;
  std::size_t live_in_layer(std::size_t layer) const;
  bool all_true() const;
  std::vector<FilterId> dead_filters() const;

  /// Throws ConfigError unless the shape matches `model` and every layer keeps
  /// at least one live filter.
  void validate(const Model& model, bool require_live = true) const;

  bool operator==(const PruneMask&) const = default;

private:
  std::vector<std::vector<std::uint8_t>> live_;
};

enum class Mode { Train, Eval };

struct LayerCache {
  Tensor input;     ///< [B, c, h, w] input to the conv
  Tensor conv_out;  ///< [B, J, h, w] conv + bias
  Tensor xhat;      ///< normalized conv_out (batch norm only)
  std::vector<double> batch_mean; ///< train-mode batch statistics
  std::vector<double> batch_var;
  Tensor pre_activation;  ///< after batch norm and mask, before relu
  Tensor post_activation; ///< relu output
};

struct ActivationCache {
  Mode mode = Mode::Eval;
  std::vector<LayerCache> layers;
  Tensor features;     ///< flattened last feature map [B, D]
  Tensor dropout_scale; ///< [B, D] multiplier, empty when dropout is inactive
  Tensor fc_input;     ///< features after dropout
  Tensor logits;
};

struct ForwardOptions {
  /// Seed for the dropout draw of this step; only consulted when
  /// mode == Train and the model has dropout > 0.
  std::uint64_t dropout_seed = 0;
  /// Permits layers with every filter masked (used when the Oracle removes a
  /// layer's last live filter).
  bool allow_empty_layers = false;
};

struct ForwardResult {
  Tensor logits;
  ActivationCache cache;
};

ForwardResult forward(const Model& model, const PruneMask& mask, const Tensor& batch, Mode mode,
                      const ForwardOptions& options = {});

struct LayerGrads {
  Tensor weights;
  Tensor bias;
  Tensor gamma; ///< empty without batch norm
  Tensor beta;
};

/// Structurally parallel to Model's trainable parameters.
struct Gradients {
  std::vector<LayerGrads> layers;
  Tensor fc_weights;
  Tensor fc_bias;

  static Gradients zeros_like(const Model& model);
  void add_scaled(const Gradients& other, double scale);
};

struct BackwardResult {
  double loss = 0.0; ///< mean softmax cross-entropy
  Gradients grads;
  /// d loss / d post-activation per layer, kept only when requested.
  std::vector<Tensor> activation_grads;
};

struct BackwardOptions {
  bool keep_activation_grads = false;
};

/// Softmax cross-entropy backward pass. Works from train- and eval-mode
/// caches; batch norm uses whichever statistics the forward pass used.
/// Gradients of masked filters are exactly zero.
BackwardResult backward(const Model& model, const PruneMask& mask, const ActivationCache& cache,
                        std::span<const int> labels, const BackwardOptions& options = {});

/// Trainable tensors in a fixed order: per conv layer weights, bias and (with
/// batch norm) gamma, beta; then fc weights and fc bias.
std::vector<Tensor*> parameters(Model& model);
std::vector<const Tensor*> parameters(const Model& model);
std::vector<Tensor*> parameters(Gradients& grads);
std::vector<const Tensor*> parameters(const Gradients& grads);
std::vector<std::string> parameter_names(const Model& model);

/// Contiguous run of elements inside parameter number `param`.
struct ParamSlice {
  std::size_t param = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Elements owned by one filter: its weight row, bias, and batch-norm gamma
/// and beta. With `downstream`, also the slices that consume its output
/// channel: the matching input kernels of the next conv layer, or the fc
/// columns when the filter sits in the last conv layer.
std::vector<ParamSlice> filter_slices(const Model& model, FilterId id, bool downstream);

/// Folds the batch statistics of a train-mode cache into the running
/// statistics of live filters.
void update_running_stats(Model& model, const PruneMask& mask, const ActivationCache& cache);

/// Cross-correlation (no kernel flip) with bias. Output extent is
/// (h + 2*padding - k) / stride + 1 and must be integral.
Tensor conv2d(const Tensor& input, const ConvLayer& layer, std::size_t stride, std::size_t padding);

/// [J, c*k*k]; row j is filter j flattened channel-major, then row, then column.
Tensor filter_matrix(const ConvLayer& layer);
void set_filter_row(ConvLayer& layer, std::size_t filter, std::span<const double> values);

/// Mean softmax cross-entropy of logits [B, C].
double cross_entropy(const Tensor& logits, std::span<const int> labels);
std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

struct EvalResult {
  double accuracy = 0.0; ///< percent
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Eval-mode accuracy over images [N, c, h, w], processed in chunks.
EvalResult evaluate(const Model& model, const PruneMask& mask, const Tensor& images, std::span<const int> labels,
                    std::size_t batch_size = 256, const ForwardOptions& options = {});

/// Copy of examples [first, first+count) of a [N, ...] tensor.
Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t count);

} // namespace repr
