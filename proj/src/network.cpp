// SPDX-License-Identifier: Apache-2.0
#include "repr/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "repr/errors.hpp"
#include "repr/rng.hpp"

namespace repr {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

BatchNormState BatchNormState::fresh(std::size_t filters) {
  BatchNormState bn;
  bn.gamma = Tensor({filters}, 1.0);
  bn.beta = Tensor({filters}, 0.0);
  bn.running_mean = Tensor({filters}, 0.0);
  bn.running_var = Tensor({filters}, 1.0);
  return bn;
}

void BatchNormState::reset_filter(std::size_t j) {
  gamma[j] = 1.0;
  beta[j] = 0.0;
  running_mean[j] = 0.0;
  running_var[j] = 1.0;
}

Model Model::create(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.layers < 1 || spec.filters < 1 || spec.kernel < 1 || spec.in_channels < 1 || spec.num_classes < 2) {
    throw ConfigError("model spec needs layers, filters, kernel, channels >= 1 and at least 2 classes");
  }
  if (spec.dropout < 0.0 || spec.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  Model m;
  m.spec = spec;
  Rng rng(seed, {static_cast<std::uint64_t>(Stream::Init)});
  std::size_t channels = spec.in_channels;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    ConvLayer layer;
    layer.weights = Tensor({spec.filters, channels, spec.kernel, spec.kernel});
    const double std = std::sqrt(2.0 / static_cast<double>(spec.kernel * spec.kernel * channels));
    for (double& w : layer.weights.data()) w = rng.normal(0.0, std);
    layer.bias = Tensor({spec.filters}, 0.0);
    if (spec.batch_norm) layer.bn = BatchNormState::fresh(spec.filters);
    m.conv_layers.push_back(std::move(layer));
    channels = spec.filters;
  }
  const std::size_t flat = m.flattened_dim();
  m.fc_weights = Tensor({spec.num_classes, flat});
  for (double& w : m.fc_weights.data()) w = rng.normal(0.0, 0.01);
  m.fc_bias = Tensor({spec.num_classes}, 0.0);
  return m;
}

std::size_t Model::total_filters() const {
  std::size_t n = 0;
  for (const auto& l : conv_layers) n += l.filters();
  return n;
}

std::size_t Model::out_height(std::size_t layer) const {
  std::size_t h = spec.height;
  for (std::size_t l = 0; l <= layer; ++l) h = h + 2 * conv_layers[l].padding() - conv_layers[l].kernel() + 1;
  return h;
}

std::size_t Model::out_width(std::size_t layer) const {
  std::size_t w = spec.width;
  for (std::size_t l = 0; l <= layer; ++l) w = w + 2 * conv_layers[l].padding() - conv_layers[l].kernel() + 1;
  return w;
}

std::size_t Model::flattened_dim() const {
  const std::size_t last = conv_layers.size() - 1;
  return conv_layers[last].filters() * out_height(last) * out_width(last);
}

void Model::check_consistency() const {
  if (conv_layers.empty()) throw ConfigError("model has no conv layers");
  std::size_t channels = spec.in_channels;
  for (std::size_t l = 0; l < conv_layers.size(); ++l) {
    const auto& layer = conv_layers[l];
    if (layer.weights.rank() != 4 || layer.kernel() != layer.weights.dim(3)) {
      throw ConfigError("conv layer " + std::to_string(l) + " has malformed weights " +
                        shape_string(layer.weights.shape()));
    }
    if (layer.channels() != channels) {
      throw ConfigError("conv layer " + std::to_string(l) + " expects " + std::to_string(layer.channels()) +
                        " input channels but receives " + std::to_string(channels));
    }
    if (layer.bias.shape() != Shape{layer.filters()}) {
      throw ConfigError("conv layer " + std::to_string(l) + " bias shape " + shape_string(layer.bias.shape()));
    }
    if (layer.bn && layer.bn->gamma.size() != layer.filters()) {
      throw ConfigError("conv layer " + std::to_string(l) + " batch norm size mismatch");
    }
    channels = layer.filters();
  }
  if (fc_weights.shape() != Shape{spec.num_classes, flattened_dim()} || fc_bias.shape() != Shape{spec.num_classes}) {
    throw ConfigError("fc layer shape " + shape_string(fc_weights.shape()) + " does not match feature width " +
                      std::to_string(flattened_dim()));
  }
}

// ---------------------------------------------------------------------------
// Mask
// ---------------------------------------------------------------------------

PruneMask PruneMask::all_live(const Model& model) {
  PruneMask m;
  for (const auto& l : model.conv_layers) m.live_.emplace_back(l.filters(), std::uint8_t{1});
  return m;
}

void PruneMask::set(FilterId id, bool live) {
  if (id.layer >= live_.size() || id.filter >= live_[id.layer].size()) {
    throw ConfigError("mask coordinate (" + std::to_string(id.layer) + ", " + std::to_string(id.filter) +
                      ") out of range");
  }
  live_[id.layer][id.filter] = live ? 1 : 0;
}

std::size_t PruneMask::live_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < live_.size(); ++l) n += live_in_layer(l);
  return n;
}

std::size_t PruneMask::live_in_layer(std::size_t layer) const {
  return static_cast<std::size_t>(std::count(live_.at(layer).begin(), live_.at(layer).end(), std::uint8_t{1}));
}

bool PruneMask::all_true() const {
  for (const auto& l : live_)
    if (std::find(l.begin(), l.end(), std::uint8_t{0}) != l.end()) return false;
  return true;
}

std::vector<FilterId> PruneMask::dead_filters() const {
  std::vector<FilterId> out;
  for (std::size_t l = 0; l < live_.size(); ++l)
    for (std::size_t j = 0; j < live_[l].size(); ++j)
      if (!live_[l][j]) out.push_back({l, j});
  return out;
}

void PruneMask::validate(const Model& model, bool require_live) const {
  if (live_.size() != model.layer_count()) {
    throw ConfigError("mask has " + std::to_string(live_.size()) + " layers, model has " +
                      std::to_string(model.layer_count()));
  }
  for (std::size_t l = 0; l < live_.size(); ++l) {
    if (live_[l].size() != model.conv_layers[l].filters()) {
      throw ConfigError("mask layer " + std::to_string(l) + " has " + std::to_string(live_[l].size()) +
                        " bits for " + std::to_string(model.conv_layers[l].filters()) + " filters");
    }
    if (require_live && live_in_layer(l) == 0) throw ConfigError("mask leaves layer " + std::to_string(l) + " without live filters");
  }
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry geometry(const Shape& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (input.size() != 4) throw DimensionError("conv input must be [B,c,h,w], got " + shape_string(input));
  if (stride < 1) throw DimensionError("conv stride must be >= 1");
  ConvGeometry g{input[1], input[2], input[3], kernel, stride, padding, 0, 0};
  const std::size_t ph = g.height + 2 * padding, pw = g.width + 2 * padding;
  if (ph < kernel || pw < kernel) {
    throw DimensionError("conv input " + shape_string(input) + " smaller than kernel " + std::to_string(kernel) +
                         " after padding " + std::to_string(padding));
  }
  if ((ph - kernel) % stride != 0 || (pw - kernel) % stride != 0) {
    throw DimensionError("conv output extent is not integral for input " + shape_string(input) + ", kernel " +
                         std::to_string(kernel) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
  }
  g.out_h = (ph - kernel) / stride + 1;
  g.out_w = (pw - kernel) / stride + 1;
  return g;
}

// cols[p * positions + s] for one example.
void im2col(const double* x, const ConvGeometry& g, std::vector<double>& cols) {
  cols.assign(g.patch() * g.positions(), 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* dst = cols.data() + ((c * g.kernel + ki) * g.kernel + kj) * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[oh * g.out_w + ow] = plane[ih * static_cast<std::ptrdiff_t>(g.width) + iw];
          }
        }
      }
    }
  }
}

// Transposed layout: cols[s * patch + p], one row per output position.
void im2col_t(const double* x, const ConvGeometry& g, std::vector<double>& cols) {
  const std::size_t patch = g.patch();
  cols.assign(patch * g.positions(), 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t oh = 0; oh < g.out_h; ++oh) {
    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
      double* dst = cols.data() + (oh * g.out_w + ow) * patch;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const double* plane = x + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[(c * g.kernel + ki) * g.kernel + kj] = plane[ih * static_cast<std::ptrdiff_t>(g.width) + iw];
          }
        }
      }
    }
  }
}

void col2im_t_add(const std::vector<double>& cols, const ConvGeometry& g, double* dx) {
  const std::size_t patch = g.patch();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t oh = 0; oh < g.out_h; ++oh) {
    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
      const double* src = cols.data() + (oh * g.out_w + ow) * patch;
      for (std::size_t c = 0; c < g.channels; ++c) {
        double* plane = dx + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            plane[ih * static_cast<std::ptrdiff_t>(g.width) + iw] += src[(c * g.kernel + ki) * g.kernel + kj];
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& input, const ConvLayer& layer, const ConvGeometry& g) {
  const std::size_t batch = input.dim(0), filters = layer.filters(), patch = g.patch(), pos = g.positions();
  Tensor out({batch, filters, g.out_h, g.out_w});
  std::vector<double> cols;
  const double* w = layer.weights.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(input.data().data() + b * g.channels * g.height * g.width, g, cols);
    double* o = out.data().data() + b * filters * pos;
    for (std::size_t j = 0; j < filters; ++j) {
      double* oj = o + j * pos;
      std::fill(oj, oj + pos, layer.bias[j]);
      const double* wj = w + j * patch;
      for (std::size_t p = 0; p < patch; ++p) {
        const double wv = wj[p];
        if (wv == 0.0) continue;
        const double* cp = cols.data() + p * pos;
        for (std::size_t s = 0; s < pos; ++s) oj[s] += wv * cp[s];
      }
    }
  }
  return out;
}

} // namespace

Tensor conv2d(const Tensor& input, const ConvLayer& layer, std::size_t stride, std::size_t padding) {
  if (layer.weights.rank() != 4 || layer.weights.dim(2) != layer.weights.dim(3)) {
    throw DimensionError("conv weights must be [J,c,k,k], got " + shape_string(layer.weights.shape()));
  }
  const ConvGeometry g = geometry(input.shape(), layer.kernel(), stride, padding);
  if (g.channels != layer.channels()) {
    throw DimensionError("conv input " + shape_string(input.shape()) + " does not match weights " +
                         shape_string(layer.weights.shape()));
  }
  return conv_forward(input, layer, g);
}

Tensor filter_matrix(const ConvLayer& layer) { return layer.weights.reshaped({layer.filters(), layer.filter_size()}); }

void set_filter_row(ConvLayer& layer, std::size_t filter, std::span<const double> values) {
  if (filter >= layer.filters() || values.size() != layer.filter_size()) {
    throw DimensionError("set_filter_row: filter " + std::to_string(filter) + " with " +
                         std::to_string(values.size()) + " values on weights " + shape_string(layer.weights.shape()));
  }
  std::copy(values.begin(), values.end(), layer.weights.data().begin() + filter * layer.filter_size());
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

ForwardResult forward(const Model& model, const PruneMask& mask, const Tensor& batch, Mode mode,
                      const ForwardOptions& options) {
  mask.validate(model, !options.allow_empty_layers);
  const ModelSpec& spec = model.spec;
  if (batch.rank() != 4 || batch.dim(1) != spec.in_channels || batch.dim(2) != spec.height ||
      batch.dim(3) != spec.width) {
    throw DimensionError("batch shape " + shape_string(batch.shape()) + " does not match model input [B," +
                         std::to_string(spec.in_channels) + "," + std::to_string(spec.height) + "," +
                         std::to_string(spec.width) + "]");
  }
  const std::size_t B = batch.dim(0);
  ActivationCache cache;
  cache.mode = mode;
  cache.layers.resize(model.layer_count());

  const Tensor* x = &batch;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const ConvLayer& layer = model.conv_layers[l];
    LayerCache& lc = cache.layers[l];
    lc.input = *x;
    const ConvGeometry g = geometry(x->shape(), layer.kernel(), 1, layer.padding());
    lc.conv_out = conv_forward(*x, layer, g);
    const std::size_t J = layer.filters(), pos = g.positions();
    Tensor pre = lc.conv_out;
    if (layer.bn) {
      const BatchNormState& bn = *layer.bn;
      lc.xhat = Tensor(lc.conv_out.shape());
      lc.batch_mean.assign(J, 0.0);
      lc.batch_var.assign(J, 0.0);
      const double n = static_cast<double>(B * pos);
      for (std::size_t j = 0; j < J; ++j) {
        double mean, var;
        if (mode == Mode::Train) {
          double s = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const double* p = lc.conv_out.data().data() + (b * J + j) * pos;
            for (std::size_t i = 0; i < pos; ++i) s += p[i];
          }
          mean = s / n;
          double v = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const double* p = lc.conv_out.data().data() + (b * J + j) * pos;
            for (std::size_t i = 0; i < pos; ++i) v += (p[i] - mean) * (p[i] - mean);
          }
          var = v / n;
          lc.batch_mean[j] = mean;
          lc.batch_var[j] = var;
        } else {
          mean = bn.running_mean[j];
          var = bn.running_var[j];
        }
        const double inv_std = 1.0 / std::sqrt(var + bn.epsilon);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * J + j) * pos;
          for (std::size_t i = 0; i < pos; ++i) {
            const double xh = (lc.conv_out[off + i] - mean) * inv_std;
            lc.xhat[off + i] = xh;
            pre[off + i] = bn.gamma[j] * xh + bn.beta[j];
          }
        }
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      if (mask.is_live(l, j)) continue;
      for (std::size_t b = 0; b < B; ++b) {
        double* p = pre.data().data() + (b * J + j) * pos;
        std::fill(p, p + pos, 0.0);
      }
    }
    lc.post_activation = pre;
    for (double& v : lc.post_activation.data()) v = v > 0.0 ? v : 0.0;
    lc.pre_activation = std::move(pre);
    x = &lc.post_activation;
  }

  const std::size_t D = model.flattened_dim();
  cache.features = x->reshaped({B, D});
  cache.fc_input = cache.features;
  if (mode == Mode::Train && spec.dropout > 0.0) {
    Rng rng(options.dropout_seed);
    const double keep = 1.0 - spec.dropout;
    cache.dropout_scale = Tensor({B, D});
    for (std::size_t i = 0; i < B * D; ++i) {
      cache.dropout_scale[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
      cache.fc_input[i] *= cache.dropout_scale[i];
    }
  }

  const std::size_t C = spec.num_classes;
  Tensor logits({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    const auto f = cache.fc_input.row(b);
    for (std::size_t c = 0; c < C; ++c) logits.at(b, c) = model.fc_bias[c] + dot(model.fc_weights.row(c), f);
  }
  cache.logits = logits;
  return {std::move(logits), std::move(cache)};
}

namespace {

std::vector<double> softmax_row(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

void check_labels(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw DimensionError("labels (" + std::to_string(labels.size()) + ") do not match logits " +
                         shape_string(logits.shape()));
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1))
      throw DimensionError("label " + std::to_string(y) + " out of range for " + std::to_string(logits.dim(1)) +
                           " classes");
}

} // namespace

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  double total = 0.0;
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const auto z = logits.row(b);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    total += mx + std::log(s) - z[static_cast<std::size_t>(labels[b])];
  }
  return total / static_cast<double>(logits.dim(0));
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const auto z = logits.row(b);
    const auto arg = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (arg == static_cast<std::size_t>(labels[b])) ++correct;
  }
  return correct;
}

Gradients Gradients::zeros_like(const Model& model) {
  Gradients g;
  for (const auto& l : model.conv_layers) {
    LayerGrads lg{Tensor(l.weights.shape()), Tensor(l.bias.shape()), {}, {}};
    if (l.bn) {
      lg.gamma = Tensor(l.bn->gamma.shape());
      lg.beta = Tensor(l.bn->beta.shape());
    }
    g.layers.push_back(std::move(lg));
  }
  g.fc_weights = Tensor(model.fc_weights.shape());
  g.fc_bias = Tensor(model.fc_bias.shape());
  return g;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  auto axpy = [scale](Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    axpy(layers[l].weights, other.layers[l].weights);
    axpy(layers[l].bias, other.layers[l].bias);
    axpy(layers[l].gamma, other.layers[l].gamma);
    axpy(layers[l].beta, other.layers[l].beta);
  }
  axpy(fc_weights, other.fc_weights);
  axpy(fc_bias, other.fc_bias);
}

BackwardResult backward(const Model& model, const PruneMask& mask, const ActivationCache& cache,
                        std::span<const int> labels, const BackwardOptions& options) {
  mask.validate(model, false);
  if (cache.layers.size() != model.layer_count() || cache.logits.rank() != 2 ||
      cache.logits.dim(1) != model.spec.num_classes || cache.fc_input.dim(1) != model.flattened_dim()) {
    throw ConfigError("activation cache does not match model");
  }
  check_labels(cache.logits, labels);
  const std::size_t B = cache.logits.dim(0), C = model.spec.num_classes, D = model.flattened_dim();

  BackwardResult res;
  res.grads = Gradients::zeros_like(model);
  res.loss = cross_entropy(cache.logits, labels);

  // d loss / d logits
  Tensor dlogits({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    auto p = softmax_row(cache.logits.row(b));
    p[static_cast<std::size_t>(labels[b])] -= 1.0;
    for (std::size_t c = 0; c < C; ++c) dlogits.at(b, c) = p[c] / static_cast<double>(B);
  }

  // FC
  Tensor dfeat({B, D});
  for (std::size_t b = 0; b < B; ++b) {
    const auto f = cache.fc_input.row(b);
    auto df = dfeat.row(b);
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dlogits.at(b, c);
      res.grads.fc_bias[c] += g;
      auto gw = res.grads.fc_weights.row(c);
      const auto w = model.fc_weights.row(c);
      for (std::size_t d = 0; d < D; ++d) {
        gw[d] += g * f[d];
        df[d] += g * w[d];
      }
    }
  }
  if (!cache.dropout_scale.empty()) {
    for (std::size_t i = 0; i < B * D; ++i) dfeat[i] *= cache.dropout_scale[i];
  }

  if (options.keep_activation_grads) res.activation_grads.resize(model.layer_count());
  Tensor dpost = dfeat.reshaped(cache.layers.back().post_activation.shape());
  for (std::size_t li = model.layer_count(); li-- > 0;) {
    const ConvLayer& layer = model.conv_layers[li];
    const LayerCache& lc = cache.layers[li];
    LayerGrads& lg = res.grads.layers[li];
    if (options.keep_activation_grads) res.activation_grads[li] = dpost;
    const std::size_t J = layer.filters();
    const ConvGeometry g = geometry(lc.input.shape(), layer.kernel(), 1, layer.padding());
    const std::size_t pos = g.positions();

    // relu and mask
    Tensor dconv = dpost;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < J; ++j) {
        const std::size_t off = (b * J + j) * pos;
        const bool live = mask.is_live(li, j);
        for (std::size_t i = 0; i < pos; ++i) {
          dconv[off + i] = (live && lc.pre_activation[off + i] > 0.0) ? dconv[off + i] : 0.0;
        }
      }
    }
    // batch norm
    if (layer.bn) {
      const BatchNormState& bn = *layer.bn;
      const double n = static_cast<double>(B * pos);
      for (std::size_t j = 0; j < J; ++j) {
        if (!mask.is_live(li, j)) continue;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * J + j) * pos;
          for (std::size_t i = 0; i < pos; ++i) {
            sum_dy += dconv[off + i];
            sum_dy_xhat += dconv[off + i] * lc.xhat[off + i];
          }
        }
        lg.gamma[j] = sum_dy_xhat;
        lg.beta[j] = sum_dy;
        const double var = cache.mode == Mode::Train ? lc.batch_var[j] : bn.running_var[j];
        const double inv_std = 1.0 / std::sqrt(var + bn.epsilon);
        const double gamma = bn.gamma[j];
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * J + j) * pos;
          for (std::size_t i = 0; i < pos; ++i) {
            if (cache.mode == Mode::Train) {
              const double dxhat = dconv[off + i] * gamma;
              dconv[off + i] =
                  inv_std / n * (n * dxhat - gamma * sum_dy - lc.xhat[off + i] * gamma * sum_dy_xhat);
            } else {
              dconv[off + i] *= gamma * inv_std;
            }
          }
        }
      }
    }
    // conv
    const std::size_t patch = g.patch();
    const bool need_dx = li > 0;
    Tensor dx = need_dx ? Tensor(lc.input.shape()) : Tensor();
    std::vector<double> cols, dcols;
    const double* w = layer.weights.data().data();
    double* gw = lg.weights.data().data();
    for (std::size_t b = 0; b < B; ++b) {
      im2col_t(lc.input.data().data() + b * g.channels * g.height * g.width, g, cols);
      const double* dy = dconv.data().data() + b * J * pos;
      if (need_dx) dcols.assign(patch * pos, 0.0);
      for (std::size_t j = 0; j < J; ++j) {
        if (!mask.is_live(li, j)) continue;
        const double* dyj = dy + j * pos;
        double sb = 0.0;
        for (std::size_t s = 0; s < pos; ++s) sb += dyj[s];
        lg.bias[j] += sb;
        double* gwj = gw + j * patch;
        const double* wj = w + j * patch;
        for (std::size_t s = 0; s < pos; ++s) {
          const double d = dyj[s];
          if (d == 0.0) continue;
          const double* cs = cols.data() + s * patch;
          for (std::size_t p = 0; p < patch; ++p) gwj[p] += d * cs[p];
          if (need_dx) {
            double* dc = dcols.data() + s * patch;
            for (std::size_t p = 0; p < patch; ++p) dc[p] += d * wj[p];
          }
        }
      }
      if (need_dx) col2im_t_add(dcols, g, dx.data().data() + b * g.channels * g.height * g.width);
    }
    if (need_dx) dpost = std::move(dx);
  }
  return res;
}

void update_running_stats(Model& model, const PruneMask& mask, const ActivationCache& cache) {
  if (cache.mode != Mode::Train) return;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    auto& layer = model.conv_layers[l];
    if (!layer.bn) continue;
    auto& bn = *layer.bn;
    const LayerCache& lc = cache.layers[l];
    const double n = static_cast<double>(lc.conv_out.size() / layer.filters());
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t j = 0; j < layer.filters(); ++j) {
      if (!mask.is_live(l, j)) continue;
      bn.running_mean[j] = (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * lc.batch_mean[j];
      bn.running_var[j] = (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * lc.batch_var[j] * unbias;
    }
  }
}

Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t count) {
  if (t.rank() < 1 || first + count > t.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") out of range for " + shape_string(t.shape()));
  }
  Shape s = t.shape();
  const std::size_t stride = t.size() / std::max<std::size_t>(t.dim(0), 1);
  s[0] = count;
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(first * stride),
                           t.data().begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
  return Tensor(std::move(s), std::move(data));
}

EvalResult evaluate(const Model& model, const PruneMask& mask, const Tensor& images, std::span<const int> labels,
                    std::size_t batch_size, const ForwardOptions& options) {
  if (images.dim(0) != labels.size()) throw DimensionError("evaluate: image and label counts differ");
  EvalResult r;
  r.count = labels.size();
  double loss_sum = 0.0;
  for (std::size_t first = 0; first < r.count; first += batch_size) {
    const std::size_t n = std::min(batch_size, r.count - first);
    const Tensor chunk = slice_rows(images, first, n);
    const auto fr = forward(model, mask, chunk, Mode::Eval, options);
    const auto lab = labels.subspan(first, n);
    r.correct += count_correct(fr.logits, lab);
    loss_sum += cross_entropy(fr.logits, lab) * static_cast<double>(n);
  }
  if (r.count > 0) {
    r.accuracy = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.count);
    r.loss = loss_sum / static_cast<double>(r.count);
  }
  return r;
}

} // namespace repr

namespace repr {

namespace {
template <typename M, typename T>
std::vector<T*> collect_params(M& model) {
  std::vector<T*> out;
  for (auto& l : model.conv_layers) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
    if (l.bn) {
      out.push_back(&l.bn->gamma);
      out.push_back(&l.bn->beta);
    }
  }
  out.push_back(&model.fc_weights);
  out.push_back(&model.fc_bias);
  return out;
}

template <typename G, typename T>
std::vector<T*> collect_grads(G& grads) {
  std::vector<T*> out;
  for (auto& l : grads.layers) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
    if (!l.gamma.empty()) {
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
    }
  }
  out.push_back(&grads.fc_weights);
  out.push_back(&grads.fc_bias);
  return out;
}

// Index of the first parameter of conv layer `layer` in parameters().
std::size_t layer_param_base(const Model& model, std::size_t layer) {
  std::size_t base = 0;
  for (std::size_t l = 0; l < layer; ++l) base += model.conv_layers[l].bn ? 4 : 2;
  return base;
}
} // namespace

std::vector<Tensor*> parameters(Model& model) { return collect_params<Model, Tensor>(model); }
std::vector<const Tensor*> parameters(const Model& model) { return collect_params<const Model, const Tensor>(model); }
std::vector<Tensor*> parameters(Gradients& grads) { return collect_grads<Gradients, Tensor>(grads); }
std::vector<const Tensor*> parameters(const Gradients& grads) {
  return collect_grads<const Gradients, const Tensor>(grads);
}

std::vector<std::string> parameter_names(const Model& model) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const std::string p = "conv" + std::to_string(l) + ".";
    names.push_back(p + "weights");
    names.push_back(p + "bias");
    if (model.conv_layers[l].bn) {
      names.push_back(p + "bn.gamma");
      names.push_back(p + "bn.beta");
    }
  }
  names.emplace_back("fc.weights");
  names.emplace_back("fc.bias");
  return names;
}

std::vector<ParamSlice> filter_slices(const Model& model, FilterId id, bool downstream) {
  if (id.layer >= model.layer_count() || id.filter >= model.conv_layers[id.layer].filters()) {
    throw ConfigError("filter coordinate (" + std::to_string(id.layer) + ", " + std::to_string(id.filter) +
                      ") out of range");
  }
  const ConvLayer& layer = model.conv_layers[id.layer];
  const std::size_t base = layer_param_base(model, id.layer);
  std::vector<ParamSlice> out;
  out.push_back({base, id.filter * layer.filter_size(), layer.filter_size()});
  out.push_back({base + 1, id.filter, 1});
  if (layer.bn) {
    out.push_back({base + 2, id.filter, 1});
    out.push_back({base + 3, id.filter, 1});
  }
  if (!downstream) return out;
  if (id.layer + 1 < model.layer_count()) {
    const ConvLayer& next = model.conv_layers[id.layer + 1];
    const std::size_t next_base = layer_param_base(model, id.layer + 1);
    const std::size_t kk = next.kernel() * next.kernel();
    for (std::size_t j = 0; j < next.filters(); ++j) {
      out.push_back({next_base, (j * next.channels() + id.filter) * kk, kk});
    }
  } else {
    const std::size_t fc = layer_param_base(model, model.layer_count());
    const std::size_t hw = model.out_height(id.layer) * model.out_width(id.layer);
    const std::size_t D = model.flattened_dim();
    for (std::size_t c = 0; c < model.spec.num_classes; ++c) out.push_back({fc, c * D + id.filter * hw, hw});
  }
  return out;
}

} // namespace repr
