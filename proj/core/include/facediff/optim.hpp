#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "facediff/autodiff.hpp"

namespace facediff::nn {

template <class S>
struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Mat<S>> first_moment;
  std::map<std::string, Mat<S>> second_moment;
};

// Bias-corrected Adam update applied in place to every trainable parameter.
// Parameters marked non-trainable are skipped; rows listed in frozen_rows are
// neither updated nor have their moments advanced. A trainable parameter
// without an entry in grads is a contract error.
template <class S>
void adam_step(ParameterSet<S>& params, const GradientMap<S>& grads, AdamState<S>& state);

}  // namespace facediff::nn
