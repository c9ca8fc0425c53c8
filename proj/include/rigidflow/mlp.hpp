#pragma once

// Fully connected networks with ReLU hidden layers, identity output, optional
// positional encoding per input segment and concatenation skips.
//
// Batches are column-major: one sample per column.
//
// Parameter layout, layer by layer: the out x in weight matrix stored
// column-major, followed by the out-vector bias.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"

namespace rigidflow {

struct InputSegment {
  int dim = 1;
  int degree = 0;  // positional-encoding degree, 0 = raw

  friend bool operator==(const InputSegment&, const InputSegment&) = default;
};

struct MLPSpec {
  std::vector<InputSegment> inputs;
  std::vector<int> hidden;
  int output = 1;
  // Layer l in `skips` takes [encoded input; previous activation] as input.
  std::vector<int> skips;

  friend bool operator==(const MLPSpec&, const MLPSpec&) = default;

  int raw_input_dim() const {
    int d = 0;
    for (const auto& s : inputs) d += s.dim;
    return d;
  }
  int encoded_input_dim() const {
    int d = 0;
    for (const auto& s : inputs) d += encoded_length(s.dim, s.degree);
    return d;
  }
  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  bool is_skip(int layer) const { return std::find(skips.begin(), skips.end(), layer) != skips.end(); }

  int layer_out(int l) const { return l + 1 < layer_count() ? hidden[l] : output; }
  int layer_in(int l) const {
    const int prev = l == 0 ? encoded_input_dim() : hidden[l - 1];
    return is_skip(l) ? prev + encoded_input_dim() : prev;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (int l = 0; l < layer_count(); ++l)
      n += static_cast<std::size_t>(layer_out(l)) * (layer_in(l) + 1);
    return n;
  }

  void validate() const {
    if (inputs.empty()) throw Error(ErrorKind::Config, "network needs at least one input segment");
    if (hidden.empty()) throw Error(ErrorKind::Config, "network needs at least one hidden layer");
    for (const auto& s : inputs)
      if (s.dim <= 0 || s.degree < 0) throw Error(ErrorKind::Config, "bad input segment");
    for (int w : hidden)
      if (w <= 0) throw Error(ErrorKind::Config, "hidden width must be positive");
    if (output <= 0) throw Error(ErrorKind::Config, "output width must be positive");
    for (int s : skips)
      if (s <= 0 || s >= layer_count()) throw Error(ErrorKind::Config, "skip index out of range");
  }
};

/// Activations kept from a forward pass for the backward pass.
struct MLPCache {
  Matrix raw;                  // raw input, raw_input_dim x B
  Matrix encoded;              // encoded input
  std::vector<Matrix> inputs;  // input to each layer (after skip concat)
  std::vector<Matrix> acts;    // output of each layer (post-ReLU for hidden)
};

namespace detail {

inline Matrix encode_batch(const MLPSpec& spec, const Matrix& raw) {
  Matrix enc(spec.encoded_input_dim(), raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    int ri = 0, ei = 0;
    for (const auto& seg : spec.inputs) {
      const int len = encoded_length(seg.dim, seg.degree);
      positional_encoding_into(std::span<const double>(raw.col(c).data() + ri, seg.dim), seg.degree,
                               std::span<double>(enc.col(c).data() + ei, len));
      ri += seg.dim;
      ei += len;
    }
  }
  return enc;
}

// Chain rule through the encoding: d(encoded)/d(raw) is diagonal per component.
inline Matrix encoding_backward(const MLPSpec& spec, const Matrix& raw, const Matrix& d_enc) {
  Matrix d_raw = Matrix::Zero(raw.rows(), raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    int ri = 0, ei = 0;
    for (const auto& seg : spec.inputs) {
      const int stride = 1 + 2 * seg.degree;
      for (int k = 0; k < seg.dim; ++k) {
        const double x = raw(ri + k, c);
        const double* g = d_enc.col(c).data() + ei + k * stride;
        double acc = g[0];
        double freq = 1.0;
        for (int j = 0; j < seg.degree; ++j) {
          acc += g[1 + 2 * j] * freq * std::cos(freq * x) - g[2 + 2 * j] * freq * std::sin(freq * x);
          freq *= 2.0;
        }
        d_raw(ri + k, c) = acc;
      }
      ri += seg.dim;
      ei += encoded_length(seg.dim, seg.degree);
    }
  }
  return d_raw;
}

}  // namespace detail

inline Matrix mlp_forward(const MLPSpec& spec, std::span<const double> params, const Matrix& raw,
                          MLPCache* cache = nullptr) {
  if (raw.rows() != spec.raw_input_dim())
    throw Error(ErrorKind::Config, "input has " + std::to_string(raw.rows()) + " rows, network expects " +
                                       std::to_string(spec.raw_input_dim()));
  if (params.size() != spec.param_count()) throw Error(ErrorKind::Config, "parameter vector length mismatch");

  Matrix enc = detail::encode_batch(spec, raw);
  const int layers = spec.layer_count();
  if (cache) {
    cache->raw = raw;
    cache->inputs.assign(layers, Matrix());
    cache->acts.assign(layers, Matrix());
  }

  std::size_t offset = 0;
  Matrix act;
  for (int l = 0; l < layers; ++l) {
    Matrix in;
    if (l == 0) {
      in = enc;
    } else if (spec.is_skip(l)) {
      in.resize(enc.rows() + act.rows(), act.cols());
      in.topRows(enc.rows()) = enc;
      in.bottomRows(act.rows()) = act;
    } else {
      in = std::move(act);
    }
    const int out = spec.layer_out(l), nin = spec.layer_in(l);
    Eigen::Map<const Matrix> w(params.data() + offset, out, nin);
    Eigen::Map<const Vector> b(params.data() + offset + static_cast<std::size_t>(out) * nin, out);
    offset += static_cast<std::size_t>(out) * (nin + 1);

    act.noalias() = w * in;
    act.colwise() += b;
    if (l + 1 < layers) act = act.cwiseMax(0.0);

    if (cache) {
      cache->inputs[l] = std::move(in);
      cache->acts[l] = act;
    }
  }
  if (cache) cache->encoded = std::move(enc);
  return act;
}

/// Reverse pass for upstream^T . output. Adds parameter gradients into
/// `param_grad` (same layout as the parameters) and returns the gradient with
/// respect to the raw (pre-encoding) input.
inline Matrix mlp_backward(const MLPSpec& spec, std::span<const double> params, const MLPCache& cache,
                           const Matrix& upstream, std::span<double> param_grad) {
  const int layers = spec.layer_count();
  if (upstream.rows() != spec.output || upstream.cols() != cache.raw.cols())
    throw Error(ErrorKind::Config, "upstream gradient shape mismatch");
  if (param_grad.size() != spec.param_count()) throw Error(ErrorKind::Config, "gradient vector length mismatch");

  std::vector<std::size_t> offsets(layers);
  std::size_t offset = 0;
  for (int l = 0; l < layers; ++l) {
    offsets[l] = offset;
    offset += static_cast<std::size_t>(spec.layer_out(l)) * (spec.layer_in(l) + 1);
  }

  const Eigen::Index enc_dim = cache.encoded.rows();
  Matrix d_enc = Matrix::Zero(enc_dim, upstream.cols());
  Matrix d_act = upstream;
  for (int l = layers - 1; l >= 0; --l) {
    const int out = spec.layer_out(l), nin = spec.layer_in(l);
    Matrix dz = l + 1 < layers ? Matrix(d_act.cwiseProduct((cache.acts[l].array() > 0.0).cast<double>().matrix()))
                               : d_act;
    Eigen::Map<const Matrix> w(params.data() + offsets[l], out, nin);
    Eigen::Map<Matrix> dw(param_grad.data() + offsets[l], out, nin);
    Eigen::Map<Vector> db(param_grad.data() + offsets[l] + static_cast<std::size_t>(out) * nin, out);
    dw.noalias() += dz * cache.inputs[l].transpose();
    db += dz.rowwise().sum();

    Matrix d_in = w.transpose() * dz;
    if (l == 0) {
      d_enc += d_in;
    } else if (spec.is_skip(l)) {
      d_enc += d_in.topRows(enc_dim);
      d_act = d_in.bottomRows(d_in.rows() - enc_dim);
    } else {
      d_act = std::move(d_in);
    }
  }
  return detail::encoding_backward(spec, cache.raw, d_enc);
}

/// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.
/// With `zero_last`, the output layer starts at zero.
template <typename Rng>
void init_params(const MLPSpec& spec, std::span<double> params, Rng& rng, bool zero_last) {
  std::size_t offset = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int out = spec.layer_out(l), in = spec.layer_in(l);
    const std::size_t nw = static_cast<std::size_t>(out) * in;
    const bool last = l + 1 == spec.layer_count();
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (std::size_t i = 0; i < nw; ++i) params[offset + i] = (last && zero_last) ? 0.0 : dist(rng);
    for (int i = 0; i < out; ++i) params[offset + nw + i] = 0.0;
    offset += nw + out;
  }
}

}  // namespace rigidflow
