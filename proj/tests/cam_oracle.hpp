// Independent Grad-CAM reference used by the unit and acceptance suites: every
// entry of dlogit/dA is taken by central differences through forward_head on
// a frozen copy of the model, never touching backward().
#pragma once

#include <algorithm>
#include <vector>

#include "attnsteer/model.hpp"

namespace attnsteer::testing {

inline std::vector<double> fd_cam_grid(const ModelState& state, const Tensor& image, std::size_t attribute,
                                       double step = 1e-5) {
  const ModelState frozen = state.frozen();
  Tensor acts = forward_trunk(frozen, image).detach();
  const Shape shape = acts.shape();
  const std::size_t channels = shape[1], cells = shape[2] * shape[3];
  std::vector<double> base(acts.data().begin(), acts.data().end());

  auto logit_at = [&](const std::vector<double>& values) {
    return forward_head(frozen, Tensor(shape, values)).at(attribute);
  };

  std::vector<double> alpha(channels, 0.0);
  std::vector<double> probe = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + step;
    const double up = logit_at(probe);
    probe[i] = base[i] - step;
    const double down = logit_at(probe);
    probe[i] = base[i];
    alpha[i / cells] += (up - down) / (2 * step) / static_cast<double>(cells);
  }

  std::vector<double> raw(cells, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    for (std::size_t p = 0; p < cells; ++p) raw[p] += alpha[k] * base[k * cells + p];
  }
  double peak = 0.0;
  for (auto& v : raw) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (auto& v : raw) v /= peak;
  }
  return raw;
}

}  // namespace attnsteer::testing
