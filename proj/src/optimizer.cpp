#include "mmfal/optimizer.hpp"

#include <cmath>

namespace mmfal {

void Adam::step(const NamedParameters& params, double grad_scale) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& [name, p] : params) {
    if (!p->trainable) continue;
    auto [it, inserted] = moments_.try_emplace(name);
    if (inserted) it->second = Moments{Tensor(p->value.shape()), Tensor(p->value.shape())};
    auto& m = it->second.m;
    auto& v = it->second.v;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i] * grad_scale;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      p->value[i] -= config_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.epsilon);
    }
  }
}

void Adam::reset() {
  steps_ = 0;
  moments_.clear();
}

void Adam::restore(long long steps, std::map<std::string, Moments> moments) {
  steps_ = steps;
  moments_ = std::move(moments);
}

}  // namespace mmfal
