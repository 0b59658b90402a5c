#pragma once

// Tape-based reverse-mode differentiation and a central-difference checker.
//
// Nodes are appended in evaluation order, so creation order is a valid
// topological order and backward simply walks the tape from the loss down.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "v2m/numerics.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

enum class ScanImpl { sequential, parallel };

/// Execution knobs threaded through every recorded op.
struct ExecPolicy {
  std::size_t workers = 1;
  ScanImpl scan = ScanImpl::sequential;
  /// Keep only scan inputs on the tape and regenerate hidden states in backward.
  bool recompute = true;
};

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <std::floating_point T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <std::floating_point T>
using VarMap = std::map<std::string, Var<T>>;

template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  explicit Tape(bool record = true, ExecPolicy policy = {}) : record_(record), policy_(policy) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  const ExecPolicy& policy() const { return policy_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, {}); }

  Var<T> parameter(std::string name, Tensor<T> value) {
    Var<T> v = push(std::move(value), record_, {}, {});
    nodes_[v.id()]->param_name = std::move(name);
    params_.push_back(v.id());
    return v;
  }

  /// Records an op output. `fn` receives the gradient flowing into the
  /// output and must push parent gradients with accumulate().
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    std::vector<std::size_t> ids;
    bool needs = false;
    for (const auto& p : parents) {
      ids.push_back(p.id());
      needs = needs || requires_grad(p.id());
    }
    if (!record_ || !needs) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(ids), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    std::vector<std::size_t> ids;
    bool needs = false;
    for (const auto& p : parents) {
      ids.push_back(p.id());
      needs = needs || requires_grad(p.id());
    }
    if (!record_ || !needs) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(ids), std::move(fn));
  }

  void accumulate(const Var<T>& v, Tensor<T> g) {
    Node& n = *nodes_[v.id()];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                           shape_str(n.value.shape()));
    }
    if (n.grad.empty() && n.value.size() != 0) {
      n.grad = std::move(g);
    } else {
      add_in_place(n.grad, g);
    }
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id]->value; }
  bool requires_grad(std::size_t id) const { return nodes_[id]->requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradients of a scalar loss with respect to every registered parameter.
  /// Parameters the loss does not reach get zero tensors.
  std::map<std::string, Tensor<T>> backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) n->grad = Tensor<T>();
    if (nodes_[loss.id()]->requires_grad) {
      nodes_[loss.id()]->grad = Tensor<T>::ones(loss.shape());
      for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = *nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        Tensor<T> g = std::move(n.grad);
        n.backward(g);
        n.grad = Tensor<T>();
      }
    }
    std::map<std::string, Tensor<T>> out;
    for (auto id : params_) {
      Node& n = *nodes_[id];
      Tensor<T> g = n.grad.empty() ? Tensor<T>::zeros(n.value.shape()) : std::move(n.grad);
      auto it = out.find(n.param_name);
      if (it == out.end()) {
        out.emplace(n.param_name, std::move(g));
      } else {
        add_in_place(it->second, g);
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string param_name;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> parents, BackwardFn fn) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->parents = std::move(parents);
    n->backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool record_;
  ExecPolicy policy_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<std::size_t> params_;
};

template <std::floating_point T>
VarMap<T> bind_parameters(Tape<T>& tape, const ParamMap<T>& params) {
  VarMap<T> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(name, value));
  return vars;
}

template <std::floating_point T>
const Var<T>& lookup(const VarMap<T>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

namespace ops {

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return a.tape().record(v2m::add(a.value(), b.value()), {a, b}, [a, b](const Tensor<T>& g) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, g);
  });
}

template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return a.tape().record(v2m::mul(a.value(), b.value()), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) a.tape().accumulate(a, v2m::mul(g, b.value()));
    if (b.requires_grad()) a.tape().accumulate(b, v2m::mul(g, a.value()));
  });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, double s) {
  return a.tape().record(v2m::scale(a.value(), s), {a},
                         [a, s](const Tensor<T>& g) { a.tape().accumulate(a, v2m::scale(g, s)); });
}

/// a + b where b's shape is a trailing suffix of a's shape.
template <std::floating_point T>
Var<T> add_broadcast(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  const std::size_t inner = numel(bs);
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i % inner];
  return a.tape().record(std::move(y), {a, b}, [a, b, inner](const Tensor<T>& g) {
    a.tape().accumulate(a, g);
    if (b.requires_grad()) {
      std::vector<double> acc(inner, 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i % inner] += g[i];
      Tensor<T> gb(b.shape());
      for (std::size_t i = 0; i < inner; ++i) gb[i] = static_cast<T>(acc[i]);
      a.tape().accumulate(b, std::move(gb));
    }
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](const Tensor<T>& g) {
    a.tape().accumulate(a, Tensor<T>::full(a.shape(), g[0]));
  });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

template <std::floating_point T>
Var<T> square(const Var<T>& a) {
  return mul(a, a);
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  return a.tape().record(a.value().reshaped(std::move(shape)), {a}, [a](const Tensor<T>& g) {
    a.tape().accumulate(a, g.reshaped(a.shape()));
  });
}

template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  const std::size_t workers = x.tape().policy().workers;
  return x.tape().record(v2m::linear(x.value(), w.value(), workers), {x, w},
                         [x, w, workers](const Tensor<T>& g) {
                           if (x.requires_grad()) {
                             x.tape().accumulate(x, linear_grad_input(g, w.value(), x.shape(), workers));
                           }
                           if (w.requires_grad()) {
                             x.tape().accumulate(w, linear_grad_weight(x.value(), g, workers));
                           }
                         });
}

template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const std::size_t workers = x.tape().policy().workers;
  return x.tape().record(v2m::linear(x.value(), w.value(), b.value(), workers), {x, w, b},
                         [x, w, b, workers](const Tensor<T>& g) {
                           if (x.requires_grad()) {
                             x.tape().accumulate(x, linear_grad_input(g, w.value(), x.shape(), workers));
                           }
                           if (w.requires_grad()) {
                             x.tape().accumulate(w, linear_grad_weight(x.value(), g, workers));
                           }
                           if (b.requires_grad()) x.tape().accumulate(b, sum_rows(g));
                         });
}

template <std::floating_point T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, Fwd&& fwd, Deriv&& deriv) {
  return x.tape().record(v2m::map(x.value(), fwd), {x}, [x, deriv](const Tensor<T>& g) {
    Tensor<T> dx(x.shape());
    const Tensor<T>& xv = x.value();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] = static_cast<T>(g[i] * deriv(static_cast<double>(xv[i])));
    }
    x.tape().accumulate(x, std::move(dx));
  });
}

template <std::floating_point T>
Var<T> softplus(const Var<T>& x) {
  return unary(x, softplus_scalar, sigmoid_scalar);
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(x, sigmoid_scalar, [](double v) {
    const double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

template <std::floating_point T>
Var<T> silu(const Var<T>& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

template <std::floating_point T>
Var<T> gelu(const Var<T>& x) {
  return unary(x, gelu_scalar, gelu_grad_scalar);
}

template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  auto stats = std::make_shared<LayerNormStats<T>>();
  Tensor<T> y = v2m::layer_norm(x.value(), gamma.value(), beta.value(), eps, stats.get());
  return x.tape().record(std::move(y), {x, gamma, beta}, [x, gamma, beta, stats](const Tensor<T>& g) {
    const std::size_t d = x.value().last_dim();
    const std::size_t rows = x.value().rows();
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gm = gamma.value();
    Tensor<T> dx(x.shape());
    std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
    std::vector<double> xhat(d), gh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double mean = stats->mean[r];
      const double rstd = stats->rstd[r];
      double sum_gh = 0.0, sum_gh_xhat = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (xv[r * d + i] - mean) * rstd;
        const double gi = g[r * d + i];
        dgamma[i] += gi * xhat[i];
        dbeta[i] += gi;
        gh[i] = gi * gm[i];
        sum_gh += gh[i];
        sum_gh_xhat += gh[i] * xhat[i];
      }
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) {
        dx[r * d + i] = static_cast<T>(rstd * (gh[i] - inv_d * sum_gh - xhat[i] * inv_d * sum_gh_xhat));
      }
    }
    x.tape().accumulate(x, std::move(dx));
    if (gamma.requires_grad()) {
      Tensor<T> t({d});
      for (std::size_t i = 0; i < d; ++i) t[i] = static_cast<T>(dgamma[i]);
      x.tape().accumulate(gamma, std::move(t));
    }
    if (beta.requires_grad()) {
      Tensor<T> t({d});
      for (std::size_t i = 0; i < d; ++i) t[i] = static_cast<T>(dbeta[i]);
      x.tape().accumulate(beta, std::move(t));
    }
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

struct GradReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
  };
  std::vector<Entry> entries;
  double step = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }

  const Entry* worst() const {
    const Entry* w = nullptr;
    for (const auto& e : entries) {
      if (!w || e.max_rel_error > w->max_rel_error) w = &e;
    }
    return w;
  }
};

/// Scalar objective built on a tape from bound parameters.
using ScalarGraph = std::function<Var<double>(Tape<double>&, const VarMap<double>&)>;

/// Compares backward() against central differences (f(p+h)-f(p-h))/(2h) on
/// every coordinate of every parameter. The relative error of a tensor is
/// max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-8):
/// coordinates whose gradient is far below the tensor's scale sit at the
/// difference quotient's noise floor and are judged against that scale.
inline GradReport finite_diff_check(const ScalarGraph& f, const ParamMap<double>& params, double h,
                                    ExecPolicy policy = {}) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  std::map<std::string, Tensor<double>> analytic;
  {
    Tape<double> tape(true, policy);
    auto vars = bind_parameters(tape, params);
    Var<double> loss = f(tape, vars);
    analytic = tape.backward(loss);
  }
  auto evaluate = [&](const ParamMap<double>& p) {
    Tape<double> tape(false, policy);
    auto vars = bind_parameters(tape, p);
    Var<double> loss = f(tape, vars);
    if (loss.value().size() != 1) throw ContractError("finite_diff_check: objective must be scalar");
    return loss.value()[0];
  };

  GradReport report;
  report.step = h;
  ParamMap<double> work = params;
  for (const auto& [name, value] : params) {
    GradReport::Entry entry;
    entry.name = name;
    Tensor<double>& slot = work.at(name);
    const Tensor<double>& grad = analytic.at(name);
    double scale = 1e-8, worst = -1.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      slot[i] = orig + h;
      const double fp = evaluate(work);
      slot[i] = orig - h;
      const double fm = evaluate(work);
      slot[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = grad[i];
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
      if (std::abs(a - numeric) > worst) {
        worst = std::abs(a - numeric);
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    entry.max_rel_error = value.size() == 0 ? 0.0 : worst / scale;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace v2m
