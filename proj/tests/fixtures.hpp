#pragma once

// Hand-built models with known motion, for oracle tests.

#include <span>
#include <vector>

#include "rigidflow/networks.hpp"

namespace fixtures {

using namespace rigidflow;

/// Zeroes every layer's weights except the output bias, which becomes `values`.
inline void set_constant_output(const MLPSpec& spec, std::span<double> params, const std::vector<double>& values) {
  std::fill(params.begin(), params.end(), 0.0);
  const int last = spec.layer_count() - 1;
  const std::size_t bias = spec.param_count() - static_cast<std::size_t>(spec.layer_out(last));
  for (std::size_t i = 0; i < values.size(); ++i) params[bias + i] = values[i];
}

/// Every particle gets h = e_0 and W_t has first row V, so V_t = V for all t.
/// Codes come from f_code with all-zero parameters.
inline Model constant_motion_model(ModelConfig cfg, const Vec3& linear, const Vec3& omega) {
  cfg.ablation = {};
  Model m(cfg);
  std::vector<double> h(static_cast<std::size_t>(cfg.bottleneck), 0.0);
  h[0] = 1.0;
  set_constant_output(m.neck_net(), m.block(m.neck_block()), h);
  const VelocityComponents v = VelocityComponents::from_linear_angular(linear, omega);
  std::vector<double> flat(static_cast<std::size_t>(6 * cfg.bottleneck), 0.0);
  for (int j = 0; j < 6; ++j) flat[static_cast<std::size_t>(j)] = v[static_cast<std::size_t>(j)];
  set_constant_output(m.weight_net(), m.block(m.weight_block()), flat);
  return m;
}

/// Sets f_deform so that dp = v * t (t >= 0), dr = identity, ds = 1.
inline void set_linear_deform(Model& m, const Vec3& v) {
  const MLPSpec& spec = m.deform_net();
  auto params = m.block(m.deform_block());
  std::fill(params.begin(), params.end(), 0.0);
  const int t_index = encoded_length(3, spec.inputs[0].degree);  // raw t inside the encoding
  const int enc = spec.encoded_input_dim();
  std::size_t off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int out = spec.layer_out(l), in = spec.layer_in(l);
    Eigen::Map<Matrix> w(params.data() + off, out, in);
    if (l == 0) {
      w(0, t_index) = 1.0;
    } else if (l + 1 < spec.layer_count()) {
      w(0, spec.is_skip(l) ? enc : 0) = 1.0;
    } else {
      const int col = spec.is_skip(l) ? enc : 0;
      for (int a = 0; a < 3; ++a) w(a, col) = v[a];
    }
    off += static_cast<std::size_t>(out) * (in + 1);
  }
}

}  // namespace fixtures
