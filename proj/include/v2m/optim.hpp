#pragma once

// AdamW with decoupled weight decay and a warmup + cosine learning rate.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "v2m/autograd.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Default decay mask: weight matrices only. Biases, norm gains, the
/// evolution log-rates and the position embedding are not decayed.
inline bool decays_by_default(const std::string& name, const Shape& shape) {
  if (shape.size() < 2) return false;
  return !name.ends_with("a_log") && !name.ends_with("pos");
}

/// Moments are kept in double regardless of the parameter precision.
template <std::floating_point T>
class AdamW {
 public:
  using DecayMask = std::function<bool(const std::string&, const Shape&)>;

  explicit AdamW(AdamWConfig config = {}, DecayMask mask = decays_by_default)
      : config_(config), mask_(std::move(mask)) {}

  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

  /// One update with learning rate `lr`:
  ///   p <- p * (1 - lr * wd)                     (decayed tensors only)
  ///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
  ///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
  void step(ParamMap<T>& params, const ParamMap<T>& grads, double lr) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (auto& [name, p] : params) {
      auto g_it = grads.find(name);
      if (g_it == grads.end()) throw ContractError("AdamW: no gradient for '" + name + "'");
      const Tensor<T>& g = g_it->second;
      if (g.shape() != p.shape()) {
        throw DimensionError("AdamW: gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                             ", parameter has " + shape_str(p.shape()));
      }
      auto& m = m_[name];
      auto& v = v_[name];
      m.resize(p.size(), 0.0);
      v.resize(p.size(), 0.0);
      const double keep = mask_(name, p.shape()) ? 1.0 - lr * config_.weight_decay : 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
        double pi = static_cast<double>(p[i]) * keep;
        pi -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
        p[i] = static_cast<T>(pi);
      }
    }
  }

 private:
  AdamWConfig config_;
  DecayMask mask_;
  std::size_t step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Linear warmup over `warmup` steps to `base`, then cosine decay to 0 at `total`.
/// `step` counts from 0.
inline double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace v2m
