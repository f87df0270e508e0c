#pragma once

#include "mmfal/layers.hpp"

#include <map>
#include <string>

namespace mmfal {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed and restored onto a rebuilt model.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Updates every parameter using grad × grad_scale (e.g. 1/batch size).
  void step(const NamedParameters& params, double grad_scale = 1.0);
  void reset();

  const AdamConfig& config() const { return config_; }
  long long steps() const { return steps_; }

  struct Moments {
    Tensor m;
    Tensor v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(long long steps, std::map<std::string, Moments> moments);

 private:
  AdamConfig config_;
  long long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mmfal
