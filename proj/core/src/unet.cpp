#include "cseg/unet.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "cseg/errors.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// UNetConfig

void UNetConfig::validate() const {
  if (rank != 2 && rank != 3) throw ConfigError("unet: rank must be 2 or 3, got " + std::to_string(rank));
  if (in_channels == 0) throw ConfigError("unet: in_channels must be positive");
  if (num_classes != kNumClasses) throw ConfigError("unet: num_classes must be 5 (labels 0..4)");
  if (base_channels == 0) throw ConfigError("unet: base_channels must be positive");
  if (depth == 0) throw ConfigError("unet: depth must be >= 1");
  if (max_channels < base_channels) throw ConfigError("unet: max_channels must be >= base_channels");
  if (kernel_size == 0 || kernel_size % 2 == 0) throw ConfigError("unet: kernel_size must be odd");
  if (!(leaky_slope >= 0 && leaky_slope < 1)) throw ConfigError("unet: leaky_slope must lie in [0,1)");
  if (!(norm_epsilon > 0)) throw ConfigError("unet: norm_epsilon must be > 0");
  if (!pool_factors.empty()) {
    if (pool_factors.size() != depth)
      throw ConfigError("unet: pool_factors needs one entry per stage (" + std::to_string(depth) + ")");
    for (const auto& f : pool_factors) {
      if (f.size() != rank) throw ConfigError("unet: each pool_factors entry needs one factor per axis");
      for (auto v : f)
        if (v == 0) throw ConfigError("unet: pool factors must be >= 1");
    }
  }
  if (!input_extents.empty()) {
    if (input_extents.size() != rank) throw ConfigError("unet: input_extents needs one entry per axis");
    const auto div = divisors();
    for (std::size_t a = 0; a < rank; ++a)
      if (input_extents[a] < div[a])
        throw ConfigError("unet: pooling by " + std::to_string(div[a]) + " collapses axis " + std::to_string(a) +
                          " of extent " + std::to_string(input_extents[a]) + " below 1 at the bottleneck");
  }
}

std::size_t UNetConfig::width(std::size_t stage) const {
  std::size_t w = base_channels;
  for (std::size_t i = 0; i < stage && w < max_channels; ++i) w *= 2;
  return std::min(w, max_channels);
}

std::vector<std::size_t> UNetConfig::pool(std::size_t stage) const {
  if (pool_factors.empty()) return std::vector<std::size_t>(rank, 2);
  return pool_factors.at(stage);
}

std::vector<std::size_t> UNetConfig::divisors() const {
  std::vector<std::size_t> d(rank, 1);
  for (std::size_t s = 0; s < depth; ++s) {
    const auto p = pool(s);
    for (std::size_t a = 0; a < rank; ++a) d[a] *= p[a];
  }
  return d;
}

std::string UNetConfig::canonical() const {
  std::ostringstream os;
  os << std::setprecision(17) << "rank=" << rank << ";in=" << in_channels << ";classes=" << num_classes
     << ";base=" << base_channels << ";depth=" << depth << ";max=" << max_channels << ";k=" << kernel_size
     << ";slope=" << leaky_slope << ";eps=" << norm_epsilon << ";pool=";
  for (std::size_t s = 0; s < depth; ++s) {
    const auto p = pool(s);
    for (std::size_t a = 0; a < rank; ++a) os << (a ? "x" : "") << p[a];
    os << (s + 1 < depth ? "," : "");
  }
  return os.str();
}

std::uint64_t UNetConfig::fingerprint() const {
  // FNV-1a
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

UNetConfig UNetConfig::default_2d() {
  UNetConfig c;
  c.rank = 2;
  c.in_channels = 1;
  c.base_channels = 16;
  c.depth = 4;
  return c;
}

UNetConfig UNetConfig::default_3d() {
  UNetConfig c;
  c.rank = 3;
  c.in_channels = 1 + kNumClasses;
  c.base_channels = 16;
  c.depth = 3;
  c.pool_factors = {{2, 2, 1}, {2, 2, 2}, {2, 2, 2}};
  return c;
}

// ---------------------------------------------------------------------------
// UNet

template <typename T>
Shape UNet<T>::kernel_shape(std::size_t c_out, std::size_t c_in, std::size_t k) const {
  Shape s{c_out, c_in};
  for (std::size_t a = 0; a < cfg_.rank; ++a) s.push_back(k);
  return s;
}

template <typename T>
std::size_t UNet<T>::add_param(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor<T>(std::move(shape))});
  return params_.size() - 1;
}

template <typename T>
typename UNet<T>::Block UNet<T>::add_block(const std::string& prefix, std::size_t c_in, std::size_t c_out) {
  Block b{};
  b.weight = add_param(prefix + ".conv.weight", kernel_shape(c_out, c_in, cfg_.kernel_size));
  b.bias = add_param(prefix + ".conv.bias", Shape{c_out});
  b.gain = add_param(prefix + ".norm.gain", Shape{c_out});
  b.offset = add_param(prefix + ".norm.offset", Shape{c_out});
  params_[b.gain].value.fill(T(1));
  return b;
}

template <typename T>
UNet<T>::UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t depth = cfg_.depth;
  std::size_t c_in = cfg_.in_channels;
  for (std::size_t d = 0; d < depth; ++d) {
    const std::size_t w = cfg_.width(d);
    const std::string p = "enc" + std::to_string(d);
    Block b0 = add_block(p + ".0", c_in, w);
    Block b1 = add_block(p + ".1", w, w);
    encoder_.emplace_back(b0, b1);
    c_in = w;
  }
  const std::size_t wb = cfg_.width(depth);
  bottleneck_ = {add_block("bottleneck.0", c_in, wb), add_block("bottleneck.1", wb, wb)};

  ups_.resize(depth);
  decoder_.resize(depth);
  std::size_t below = wb;
  for (std::size_t i = depth; i-- > 0;) {
    const std::size_t w = cfg_.width(i);
    const std::string p = std::to_string(i);
    Shape up_shape{below, w};
    for (auto f : cfg_.pool(i)) up_shape.push_back(f);
    ups_[i].weight = add_param("up" + p + ".weight", up_shape);
    ups_[i].bias = add_param("up" + p + ".bias", Shape{w});
    decoder_[i] = {add_block("dec" + p + ".0", 2 * w, w), add_block("dec" + p + ".1", w, w)};
    below = w;
  }
  head_.weight = add_param("head.weight", kernel_shape(cfg_.num_classes, cfg_.width(0), 1));
  head_.bias = add_param("head.bias", Shape{cfg_.num_classes});

  // He fan-in initialisation of every kernel; biases and offsets stay zero.
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    if (p.value.rank() < 3) continue;
    const bool transposed = p.name.rfind("up", 0) == 0;
    const std::size_t fan_in =
        transposed ? p.value.dim(0) : p.value.size() / p.value.dim(0);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
  }
}

template <typename T>
std::size_t UNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Tensor<T> UNet<T>::run_block(const Block& b, const Tensor<T>& x, Trace* trace) const {
  const std::vector<std::size_t> one{1};
  const std::vector<std::size_t> pad{cfg_.kernel_size / 2};
  BlockTrace* bt = nullptr;
  if (trace) bt = &trace->blocks.emplace_back();
  Tensor<T> y = conv_forward(x, params_[b.weight].value, params_[b.bias].value, one, pad, bt ? &bt->conv : nullptr);
  y = instance_norm(y, params_[b.gain].value, params_[b.offset].value, cfg_.norm_epsilon, bt ? &bt->norm : nullptr);
  if (bt) bt->pre_activation = y;
  return leaky_relu(y, static_cast<T>(cfg_.leaky_slope));
}

template <typename T>
Tensor<T> UNet<T>::back_block(const Block& b, const BlockTrace& t, const Tensor<T>& grad,
                              std::vector<Tensor<T>>& param_grads) const {
  Tensor<T> g = leaky_relu_backward(t.pre_activation, static_cast<T>(cfg_.leaky_slope), grad);
  auto ng = instance_norm_backward(t.norm, g);
  param_grads[b.gain] = std::move(ng.param_grads.at("gain"));
  param_grads[b.offset] = std::move(ng.param_grads.at("offset"));
  auto cg = conv_backward(t.conv, ng.input_grad);
  param_grads[b.weight] = std::move(cg.param_grads.at("weight"));
  param_grads[b.bias] = std::move(cg.param_grads.at("bias"));
  return std::move(cg.input_grad);
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& input, Trace* trace) const {
  if (input.rank() != cfg_.rank + 2)
    throw ShapeError("unet forward: expected rank-" + std::to_string(cfg_.rank) + " input [b,c,S...], got " +
                     shape_str(input.shape()));
  if (input.channels() != cfg_.in_channels)
    throw ShapeError("unet forward: input has " + std::to_string(input.channels()) + " channels, model expects " +
                     std::to_string(cfg_.in_channels));

  const auto div = cfg_.divisors();
  std::vector<std::size_t> before(cfg_.rank), after(cfg_.rank);
  for (std::size_t a = 0; a < cfg_.rank; ++a) {
    const std::size_t e = input.dim(a + 2);
    if (e < div[a])
      throw ShapeError("unet forward: axis " + std::to_string(a) + " of extent " + std::to_string(e) +
                       " collapses below 1 under pooling divisor " + std::to_string(div[a]));
    const std::size_t total = (e + div[a] - 1) / div[a] * div[a] - e;
    before[a] = total / 2;
    after[a] = total - before[a];
  }
  if (trace) {
    *trace = Trace{};
    trace->pad_before = before;
    trace->pad_after = after;
  }

  Tensor<T> x = pad_spatial(input, before, after);
  std::vector<Tensor<T>> skips;
  for (std::size_t d = 0; d < cfg_.depth; ++d) {
    x = run_block(encoder_[d].first, x, trace);
    x = run_block(encoder_[d].second, x, trace);
    skips.push_back(x);
    const auto f = cfg_.pool(d);
    x = maxpool(x, f, f, trace ? &trace->pools.emplace_back() : nullptr);
  }
  x = run_block(bottleneck_.first, x, trace);
  x = run_block(bottleneck_.second, x, trace);
  if (trace) trace->ups.resize(cfg_.depth);
  for (std::size_t d = cfg_.depth; d-- > 0;) {
    x = upsample_transposed_conv(x, params_[ups_[d].weight].value, params_[ups_[d].bias].value, cfg_.pool(d),
                                 trace ? &trace->ups[d] : nullptr);
    const Tensor<T>& skip = skips[d];
    for (std::size_t a = 2; a < x.rank(); ++a)
      if (x.dim(a) != skip.dim(a))
        throw std::logic_error("unet forward: skip connection extent mismatch at stage " + std::to_string(d) + ": " +
                               shape_str(skip.shape()) + " vs " + shape_str(x.shape()));
    if (trace) trace->skip_channels.push_back(skip.channels());
    x = concat_channels(skip, x);
    x = run_block(decoder_[d].first, x, trace);
    x = run_block(decoder_[d].second, x, trace);
  }
  const std::vector<std::size_t> one{1}, zero{0};
  Tensor<T> logits = conv_forward(x, params_[head_.weight].value, params_[head_.bias].value, one, zero,
                                  trace ? &trace->head : nullptr);
  logits = crop_spatial(logits, before, after);
  Tensor<T> probs = softmax_channels(logits);
  if (trace) {
    trace->logits = logits;
    trace->probs = probs;
  }
  return probs;
}

template <typename T>
UNetGradients<T> UNet<T>::backward(const Trace& trace, const Tensor<T>& logit_grad) const {
  if (!trace.head.valid) throw std::logic_error("unet backward: missing forward trace");
  if (logit_grad.shape() != trace.logits.shape())
    throw ShapeError("unet backward: logit gradient " + shape_str(logit_grad.shape()) + " does not match logits " +
                     shape_str(trace.logits.shape()));
  UNetGradients<T> out;
  out.params.resize(params_.size());

  Tensor<T> g = pad_spatial(logit_grad, trace.pad_before, trace.pad_after);
  auto hg = conv_backward(trace.head, g);
  out.params[head_.weight] = std::move(hg.param_grads.at("weight"));
  out.params[head_.bias] = std::move(hg.param_grads.at("bias"));
  g = std::move(hg.input_grad);

  // Blocks were recorded in execution order: encoder, bottleneck, decoder.
  std::size_t bi = trace.blocks.size();
  std::vector<Tensor<T>> skip_grads(cfg_.depth);
  for (std::size_t d = 0; d < cfg_.depth; ++d) {
    g = back_block(decoder_[d].second, trace.blocks[--bi], g, out.params);
    g = back_block(decoder_[d].first, trace.blocks[--bi], g, out.params);
    const std::size_t skip_c = trace.skip_channels[cfg_.depth - 1 - d];
    auto [gs, gu] = concat_channels_backward(g, skip_c);
    skip_grads[d] = std::move(gs);
    auto ug = upsample_transposed_conv_backward(trace.ups[d], gu);
    out.params[ups_[d].weight] = std::move(ug.param_grads.at("weight"));
    out.params[ups_[d].bias] = std::move(ug.param_grads.at("bias"));
    g = std::move(ug.input_grad);
  }
  g = back_block(bottleneck_.second, trace.blocks[--bi], g, out.params);
  g = back_block(bottleneck_.first, trace.blocks[--bi], g, out.params);
  for (std::size_t d = cfg_.depth; d-- > 0;) {
    g = maxpool_backward(trace.pools[d], g);
    const Tensor<T>& sg = skip_grads[d];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg[i];
    g = back_block(encoder_[d].second, trace.blocks[--bi], g, out.params);
    g = back_block(encoder_[d].first, trace.blocks[--bi], g, out.params);
  }
  out.input_grad = crop_spatial(g, trace.pad_before, trace.pad_after);
  return out;
}

template <typename T>
ModelWeights UNet<T>::export_weights() const {
  ModelWeights w;
  w.config_fingerprint = cfg_.fingerprint();
  for (const auto& p : params_) w.tensors.push_back({p.name, tensor_cast<float>(p.value)});
  return w;
}

template <typename T>
void UNet<T>::import_weights(const ModelWeights& weights) {
  if (weights.config_fingerprint != cfg_.fingerprint())
    throw FormatError("fingerprint", "weights were produced for a different network configuration");
  if (weights.tensors.size() != params_.size())
    throw FormatError("tensor_table", "expected " + std::to_string(params_.size()) + " tensors, found " +
                                          std::to_string(weights.tensors.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = weights.tensors[i];
    if (src.name != params_[i].name || src.value.shape() != params_[i].value.shape())
      throw FormatError("tensor_table", "tensor " + std::to_string(i) + " is '" + src.name + "' " +
                                            shape_str(src.value.shape()) + ", expected '" + params_[i].name + "' " +
                                            shape_str(params_[i].value.shape()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = tensor_cast<T>(weights.tensors[i].value);
}

template class UNet<float>;
template class UNet<double>;

}  // namespace cseg
