#pragma once

// Plain (non-hierarchical) V2M classifier.
//
//   image -> patch embedding + position embedding
//         -> optional class-token cross
//         -> K blocks: u = z + W_out(sum_k derot_k(gate_k * ssm2d(rot_k(LN(z)))))
//                      z' = u + MLP(LN(u))
//         -> final LN -> class feature -> linear head
//
// Parameters live in a flat name -> tensor map so the optimizer, checkpoint
// and tape binding all see the same view. The forward pass is written once
// in tape ops; the value-only entry points run it on a non-recording tape.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "v2m/autograd.hpp"
#include "v2m/directions.hpp"
#include "v2m/numerics.hpp"
#include "v2m/ssm2d.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

enum class ClassTokenScheme { mean_pool, edge_cross, center_cross };

inline ClassTokenScheme parse_cls_scheme(const std::string& s) {
  if (s == "mean") return ClassTokenScheme::mean_pool;
  if (s == "edge") return ClassTokenScheme::edge_cross;
  if (s == "center") return ClassTokenScheme::center_cross;
  throw ConfigError("unknown class-token scheme '" + s + "' (expected mean, edge or center)");
}

inline const char* cls_scheme_name(ClassTokenScheme s) {
  switch (s) {
    case ClassTokenScheme::mean_pool: return "mean";
    case ClassTokenScheme::edge_cross: return "edge";
    default: return "center";
  }
}

struct ModelConfig {
  std::size_t image = 16;     // square image side in pixels
  std::size_t patch = 4;      // square patch side in pixels
  std::size_t in_channels = 1;
  std::size_t dim = 32;       // D
  std::size_t state = 8;      // N
  std::size_t depth = 4;      // K
  std::size_t mlp_ratio = 4;
  std::size_t classes = 4;
  ClassTokenScheme scheme = ClassTokenScheme::center_cross;
  std::vector<int> rotations = {0, 1, 2, 3};
  PipelineMask pipelines{};
  double norm_eps = 1e-5;

  /// Patch grid side M.
  std::size_t grid() const { return image / patch; }
  /// Grid side after class-token insertion.
  std::size_t side() const { return grid() + (scheme == ClassTokenScheme::mean_pool ? 0 : 1); }
  std::size_t patch_pixels() const { return patch * patch * in_channels; }
  std::size_t hidden() const { return mlp_ratio * dim; }

  void validate() const {
    if (patch == 0 || image == 0 || image % patch != 0) {
      throw ConfigError("image size " + std::to_string(image) + " is not divisible by patch size " +
                        std::to_string(patch));
    }
    if (in_channels == 0 || dim == 0 || state == 0 || mlp_ratio == 0 || classes == 0) {
      throw ConfigError("model sizes must be positive");
    }
    if (rotations.empty()) throw ConfigError("at least one direction must be enabled");
    std::set<int> seen;
    for (int r : rotations) {
      if (r < 0 || r > 3 || !seen.insert(r).second) throw ConfigError("directions must be distinct rotations 0..3");
    }
    if (!pipelines.horizontal && !pipelines.vertical) throw ConfigError("at least one pipeline must be enabled");
  }
};

/// Index at which the center cross is inserted: ceil(M / 2).
inline std::size_t center_index(std::size_t m) { return (m + 1) / 2; }

/// Closed-form parameter count.
///   embed:  P*P*C*D + D + M*M*D, plus D for the class token in cross schemes
///   block:  4D (two norms) + D*D + D (gate) + D*D (out) + 2*r*D*D + r*D + D (MLP)
///           + per enabled pipeline: first stage 3DN + 2DR + D, second stage 2DN + 2DR + D
///   head:   2D (final norm) + D*classes + classes
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.dim, n = c.state, r = default_dt_rank(d), m = c.grid(), h = c.hidden();
  const std::size_t embed = c.patch_pixels() * d + d + m * m * d + (c.scheme == ClassTokenScheme::mean_pool ? 0 : d);
  const std::size_t pipeline = (3 * d * n + 2 * d * r + d) + (2 * d * n + 2 * d * r + d);
  const std::size_t pipes = (c.pipelines.horizontal ? 1 : 0) + (c.pipelines.vertical ? 1 : 0);
  const std::size_t block = 4 * d + d * d + d + d * d + d * h + h + h * d + d + pipes * pipeline;
  return embed + c.depth * block + 2 * d + d * c.classes + c.classes;
}

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

template <std::floating_point T>
std::size_t count_parameters(const ParamMap<T>& params) {
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.size();
  return total;
}

/// Fixed 2D sine-cosine table [M, M, D]: the first half of the channels encodes
/// the row, the second half the column, each as D/4 sines and D/4 cosines at
/// frequencies base^(-k / (D/4)). Channels beyond 4 * (D/4) are zero. The
/// default base is small because patch grids are a handful of cells wide: with
/// the usual 10000 most frequencies would be nearly constant across the grid.
template <std::floating_point T>
Tensor<T> sincos_position_table(std::size_t m, std::size_t d, double base = 10.0) {
  Tensor<T> pos({m, m, d});
  const std::size_t q = d / 4;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T* e = pos.ptr() + (i * m + j) * d;
      for (std::size_t k = 0; k < q; ++k) {
        const double w = std::pow(base, -static_cast<double>(k) / static_cast<double>(q));
        e[k] = static_cast<T>(std::sin(static_cast<double>(i) * w));
        e[q + k] = static_cast<T>(std::cos(static_cast<double>(i) * w));
        e[2 * q + k] = static_cast<T>(std::sin(static_cast<double>(j) * w));
        e[3 * q + k] = static_cast<T>(std::cos(static_cast<double>(j) * w));
      }
    }
  }
  return pos;
}

/// Deterministic initialization. The block output projection starts at zero
/// so every block is the identity at step 0. The position embedding is learned
/// but starts from the sine-cosine table: summing four rotations of a shared
/// operator makes the centre class slot rotation-invariant, and the position
/// embedding is the only term that tells the quadrants apart.
template <std::floating_point T>
ParamMap<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  const std::size_t d = c.dim, m = c.grid(), h = c.hidden();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  ParamMap<T> p;
  p["embed.w"] = rng_normal<T>(rng, {c.patch_pixels(), d}, 0, 1.0 / std::sqrt(static_cast<double>(c.patch_pixels())));
  p["embed.b"] = Tensor<T>::zeros({d});
  p["embed.pos"] = sincos_position_table<T>(m, d);
  if (c.scheme != ClassTokenScheme::mean_pool) p["cls"] = rng_normal<T>(rng, {d}, 0, 0.02);
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string b = block_prefix(i);
    p[b + "norm1.g"] = Tensor<T>::ones({d});
    p[b + "norm1.b"] = Tensor<T>::zeros({d});
    p[b + "gate.w"] = rng_normal<T>(rng, {d, d}, 0, sd);
    p[b + "gate.b"] = Tensor<T>::zeros({d});
    if (c.pipelines.horizontal) {
      Pipeline2DParams<T>::init(d, c.state, AxisOrder::rows_then_cols, rng).store(p, b + "ssm.h.");
    }
    if (c.pipelines.vertical) {
      Pipeline2DParams<T>::init(d, c.state, AxisOrder::cols_then_rows, rng).store(p, b + "ssm.v.");
    }
    p[b + "out.w"] = Tensor<T>::zeros({d, d});
    p[b + "norm2.g"] = Tensor<T>::ones({d});
    p[b + "norm2.b"] = Tensor<T>::zeros({d});
    p[b + "mlp.w1"] = rng_normal<T>(rng, {d, h}, 0, sd);
    p[b + "mlp.b1"] = Tensor<T>::zeros({h});
    p[b + "mlp.w2"] = rng_normal<T>(rng, {h, d}, 0, 1.0 / std::sqrt(static_cast<double>(h)));
    p[b + "mlp.b2"] = Tensor<T>::zeros({d});
  }
  p["norm.g"] = Tensor<T>::ones({d});
  p["norm.b"] = Tensor<T>::zeros({d});
  p["head.w"] = rng_normal<T>(rng, {d, c.classes}, 0, sd);
  p["head.b"] = Tensor<T>::zeros({c.classes});
  return p;
}

/// Checks that `params` holds exactly the tensors `c` needs, naming the first offender.
template <std::floating_point T>
void check_model_shapes(const ModelConfig& c, const ParamMap<T>& params) {
  const ParamMap<T> expect = init_model<T>(c, 0);
  for (const auto& [name, t] : expect) {
    auto it = params.find(name);
    if (it == params.end()) throw DimensionError("missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw DimensionError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                           shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : params) {
    if (!expect.contains(name)) throw DimensionError("unexpected tensor '" + name + "'");
  }
}

// ---------------------------------------------------------------------------
// Embedding and class tokens
// ---------------------------------------------------------------------------

/// [B, S, S, C] -> [B, M, M, P*P*C], each patch flattened in (row, column, channel) order.
template <std::floating_point T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 4) throw DimensionError("patchify: expected [B, H, W, C], got " + shape_str(image.shape()));
  const std::size_t b = image.dim(0), s = image.dim(1), ch = image.dim(3);
  if (image.dim(2) != s) throw DimensionError("patchify: image must be square, got " + shape_str(image.shape()));
  if (patch == 0 || s % patch != 0) {
    throw DimensionError("patchify: image side " + std::to_string(s) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t m = s / patch, pp = patch * patch * ch;
  Tensor<T> out({b, m, m, pp});
  T* o = out.ptr();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t pi = 0; pi < m; ++pi) {
      for (std::size_t pj = 0; pj < m; ++pj) {
        for (std::size_t r = 0; r < patch; ++r) {
          const T* src = image.ptr() + ((n * s + pi * patch + r) * s + pj * patch) * ch;
          o = std::copy(src, src + patch * ch, o);
        }
      }
    }
  }
  return out;
}

namespace detail {

/// Source of each output cell after class-token insertion: a grid cell index, or npos for a class slot.
inline std::vector<std::size_t> cls_layout(std::size_t m, ClassTokenScheme scheme) {
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  if (scheme == ClassTokenScheme::mean_pool) {
    std::vector<std::size_t> id(m * m);
    for (std::size_t i = 0; i < id.size(); ++i) id[i] = i;
    return id;
  }
  const std::size_t at = scheme == ClassTokenScheme::edge_cross ? 0 : center_index(m);
  const std::size_t s = m + 1;
  std::vector<std::size_t> src(s * s);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      if (i == at || j == at) {
        src[i * s + j] = npos;
      } else {
        src[i * s + j] = (i - (i > at)) * m + (j - (j > at));
      }
    }
  }
  return src;
}

inline std::size_t cls_slot(std::size_t m, ClassTokenScheme scheme) {
  const std::size_t at = scheme == ClassTokenScheme::edge_cross ? 0 : center_index(m);
  return at * (m + 1) + at;
}

template <std::floating_point T>
Tensor<T> insert_cls(const Tensor<T>& grid, ClassTokenScheme scheme, const Tensor<T>* cls) {
  if (grid.rank() != 4 || grid.dim(1) != grid.dim(2)) {
    throw DimensionError("insert_class_tokens: expected [B, M, M, D], got " + shape_str(grid.shape()));
  }
  if (scheme == ClassTokenScheme::mean_pool) return grid;
  const std::size_t b = grid.dim(0), m = grid.dim(1), d = grid.dim(3), s = m + 1;
  require_shape(*cls, {d}, "class token");
  const auto src = cls_layout(m, scheme);
  Tensor<T> out({b, s, s, d});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t q = 0; q < s * s; ++q) {
      const T* from = src[q] == static_cast<std::size_t>(-1) ? cls->ptr() : grid.ptr() + (n * m * m + src[q]) * d;
      std::copy(from, from + d, out.ptr() + (n * s * s + q) * d);
    }
  }
  return out;
}

}  // namespace detail

/// Patch flattening, linear projection and additive position embedding.
template <std::floating_point T>
Tensor<T> patch_embed(const Tensor<T>& image, std::size_t patch, const Tensor<T>& w, const Tensor<T>& b,
                      const Tensor<T>& pos) {
  Tensor<T> tokens = linear(patchify(image, patch), w, b);
  require_shape(pos, {tokens.dim(1), tokens.dim(2), tokens.dim(3)}, "position embedding");
  const std::size_t per = pos.size();
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] += pos[i % per];
  return tokens;
}

/// Mean pool leaves the grid alone; the cross schemes add a row and a column of cls_vec.
template <std::floating_point T>
Tensor<T> insert_class_tokens(const Tensor<T>& grid, ClassTokenScheme scheme, const Tensor<T>& cls_vec) {
  return detail::insert_cls(grid, scheme, &cls_vec);
}

/// Mean over positions, or the classification slot of a cross scheme.
template <std::floating_point T>
Tensor<T> extract_class_feature(const Tensor<T>& grid, ClassTokenScheme scheme) {
  if (grid.rank() != 4 || grid.dim(1) != grid.dim(2)) {
    throw DimensionError("extract_class_feature: expected [B, S, S, D], got " + shape_str(grid.shape()));
  }
  const std::size_t b = grid.dim(0), s = grid.dim(1), d = grid.dim(3), cells = s * s;
  Tensor<T> out({b, d});
  if (scheme == ClassTokenScheme::mean_pool) {
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0.0;
        for (std::size_t q = 0; q < cells; ++q) acc += grid[(n * cells + q) * d + k];
        out[n * d + k] = static_cast<T>(acc / static_cast<double>(cells));
      }
    }
    return out;
  }
  if (s < 2) throw DimensionError("extract_class_feature: cross scheme needs a grid of side >= 2");
  const std::size_t slot = detail::cls_slot(s - 1, scheme);
  for (std::size_t n = 0; n < b; ++n) {
    std::copy_n(grid.ptr() + (n * cells + slot) * d, d, out.ptr() + n * d);
  }
  return out;
}

namespace ops {

template <std::floating_point T>
Var<T> insert_class_tokens(const Var<T>& grid, ClassTokenScheme scheme, const Var<T>& cls) {
  if (scheme == ClassTokenScheme::mean_pool) return grid;
  Tensor<T> y = detail::insert_cls(grid.value(), scheme, &cls.value());
  return grid.tape().record(std::move(y), {grid, cls}, [grid, cls, scheme](const Tensor<T>& g) {
    const Shape& gs = grid.shape();
    const std::size_t b = gs[0], m = gs[1], d = gs[3], s = m + 1;
    const auto src = detail::cls_layout(m, scheme);
    Tensor<T> dg(gs);
    std::vector<double> dc(d, 0.0);
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t q = 0; q < s * s; ++q) {
        const T* from = g.ptr() + (n * s * s + q) * d;
        if (src[q] == static_cast<std::size_t>(-1)) {
          for (std::size_t k = 0; k < d; ++k) dc[k] += from[k];
        } else {
          std::copy(from, from + d, dg.ptr() + (n * m * m + src[q]) * d);
        }
      }
    }
    Tensor<T> dcls({d});
    for (std::size_t k = 0; k < d; ++k) dcls[k] = static_cast<T>(dc[k]);
    grid.tape().accumulate(grid, std::move(dg));
    grid.tape().accumulate(cls, std::move(dcls));
  });
}

template <std::floating_point T>
Var<T> extract_class_feature(const Var<T>& grid, ClassTokenScheme scheme) {
  return grid.tape().record(v2m::extract_class_feature(grid.value(), scheme), {grid},
                            [grid, scheme](const Tensor<T>& g) {
                              const Shape& gs = grid.shape();
                              const std::size_t b = gs[0], s = gs[1], d = gs[3], cells = s * s;
                              Tensor<T> dg = Tensor<T>::zeros(gs);
                              if (scheme == ClassTokenScheme::mean_pool) {
                                const double inv = 1.0 / static_cast<double>(cells);
                                for (std::size_t n = 0; n < b; ++n) {
                                  for (std::size_t q = 0; q < cells; ++q) {
                                    for (std::size_t k = 0; k < d; ++k) {
                                      dg[(n * cells + q) * d + k] = static_cast<T>(g[n * d + k] * inv);
                                    }
                                  }
                                }
                              } else {
                                const std::size_t slot = detail::cls_slot(s - 1, scheme);
                                for (std::size_t n = 0; n < b; ++n) {
                                  std::copy_n(g.ptr() + n * d, d, dg.ptr() + (n * cells + slot) * d);
                                }
                              }
                              grid.tape().accumulate(grid, std::move(dg));
                            });
}

/// Position-wise V2M block on [B, S, S, D].
template <std::floating_point T>
Var<T> v2m_block(const Var<T>& z, const VarMap<T>& p, const std::string& prefix, const ModelConfig& c) {
  auto at = [&](const char* name) { return lookup(p, prefix + name); };
  const Var<T> n1 = layer_norm(z, at("norm1.g"), at("norm1.b"), c.norm_eps);
  const Var<T> gate = expand_directions(silu(linear(n1, at("gate.w"), at("gate.b"))), c.rotations);
  const Var<T> rotated = expand_directions(n1, c.rotations);
  PipelineVars<T> ph, pv;
  if (c.pipelines.horizontal) ph = PipelineVars<T>::bind(p, prefix + "ssm.h.", AxisOrder::rows_then_cols);
  if (c.pipelines.vertical) pv = PipelineVars<T>::bind(p, prefix + "ssm.v.", AxisOrder::cols_then_rows);
  const Var<T> mixed = mul(gate, ssm2d_forward(rotated, ph, pv, c.pipelines));
  const Var<T> u = add(z, aggregate_directions(mixed, c.rotations, at("out.w")));
  const Var<T> n2 = layer_norm(u, at("norm2.g"), at("norm2.b"), c.norm_eps);
  const Var<T> mlp = linear(gelu(linear(n2, at("mlp.w1"), at("mlp.b1"))), at("mlp.w2"), at("mlp.b2"));
  return add(u, mlp);
}

/// Tokens before the first block: embedding plus class tokens.
template <std::floating_point T>
Var<T> embed(const Tensor<T>& images, const VarMap<T>& p, const ModelConfig& c) {
  Tape<T>& tape = lookup(p, "embed.w").tape();
  const Var<T> patches = tape.constant(patchify(images, c.patch));
  if (patches.shape()[1] != c.grid() || patches.shape()[3] != c.patch_pixels()) {
    throw DimensionError("images " + shape_str(images.shape()) + " do not match the model configuration");
  }
  const Var<T> tokens = add_broadcast(linear(patches, lookup(p, "embed.w"), lookup(p, "embed.b")), lookup(p, "embed.pos"));
  if (c.scheme == ClassTokenScheme::mean_pool) return tokens;
  return insert_class_tokens(tokens, c.scheme, lookup(p, "cls"));
}

/// Logits [B, classes] for images [B, S, S, C].
template <std::floating_point T>
Var<T> model_logits(const Tensor<T>& images, const VarMap<T>& p, const ModelConfig& c) {
  Var<T> z = embed(images, p, c);
  for (std::size_t i = 0; i < c.depth; ++i) z = v2m_block(z, p, block_prefix(i), c);
  z = layer_norm(z, lookup(p, "norm.g"), lookup(p, "norm.b"), c.norm_eps);
  return linear(extract_class_feature(z, c.scheme), lookup(p, "head.w"), lookup(p, "head.b"));
}

}  // namespace ops

/// Value-only block forward.
template <std::floating_point T>
Tensor<T> v2m_block_forward(const Tensor<T>& z, const ParamMap<T>& params, const std::string& prefix,
                            const ModelConfig& c, const ExecPolicy& policy = {}) {
  Tape<T> tape(false, policy);
  const VarMap<T> vars = bind_parameters(tape, params);
  return ops::v2m_block(tape.constant(z), vars, prefix, c).value();
}

/// Value-only logits [B, classes].
template <std::floating_point T>
Tensor<T> model_forward(const Tensor<T>& images, const ModelConfig& c, const ParamMap<T>& params,
                        const ExecPolicy& policy = {}) {
  c.validate();
  Tape<T> tape(false, policy);
  const VarMap<T> vars = bind_parameters(tape, params);
  return ops::model_logits(images, vars, c).value();
}

}  // namespace v2m
