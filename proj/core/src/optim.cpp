#include "facediff/optim.hpp"

#include <cmath>

namespace facediff::nn {

template <class S>
void adam_step(ParameterSet<S>& params, const GradientMap<S>& grads, AdamState<S>& state) {
  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    auto it = grads.find(name);
    if (it == grads.end()) {
      throw ContractError("adam_step: missing gradient for parameter '" + name + "'");
    }
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw DimensionError("adam_step: gradient shape for '" + name +
                           "' does not match the parameter");
    }
  }
  state.step += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    const Mat<S>& g = grads.at(name);
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.size() == 0) m = Mat<S>::Zero(g.rows(), g.cols());
    if (v.size() == 0) v = Mat<S>::Zero(g.rows(), g.cols());
    if (m.rows() != g.rows() || m.cols() != g.cols()) {
      throw DimensionError("adam_step: moment shape for '" + name +
                           "' does not match the parameter");
    }
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (!p.frozen_rows.empty() && p.frozen_rows[static_cast<std::size_t>(r)]) continue;
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const double gi = static_cast<double>(g(r, c));
        const double mi = b1 * static_cast<double>(m(r, c)) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v(r, c)) + (1.0 - b2) * gi * gi;
        m(r, c) = static_cast<S>(mi);
        v(r, c) = static_cast<S>(vi);
        const double update =
            state.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon);
        p.value(r, c) = static_cast<S>(static_cast<double>(p.value(r, c)) - update);
      }
    }
  }
}

template void adam_step(ParameterSet<float>&, const GradientMap<float>&, AdamState<float>&);
template void adam_step(ParameterSet<double>&, const GradientMap<double>&, AdamState<double>&);

}  // namespace facediff::nn
