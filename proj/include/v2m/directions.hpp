#pragma once

// Four-direction processing of a square token grid.
//
// The grid is replicated under quarter-turn rotations, the copies are stacked
// along the batch axis so one parameter set processes all of them, and the
// results are rotated back and summed.
//
// Rotation is counterclockwise: rot90(x, 1)[i, j] = x[j, S-1-i]. Scanning the
// rotated copy from its upper-left corner therefore starts from this corner
// of the original grid:
//   k = 0 upper-left, k = 1 upper-right, k = 2 lower-right, k = 3 lower-left.

#include <array>
#include <string>
#include <vector>

#include "v2m/autograd.hpp"
#include "v2m/numerics.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

enum class Corner { upper_left = 0, upper_right = 1, lower_right = 2, lower_left = 3 };

inline int rotation_of(Corner c) { return static_cast<int>(c); }

inline Corner parse_corner(const std::string& s) {
  if (s == "UL") return Corner::upper_left;
  if (s == "UR") return Corner::upper_right;
  if (s == "LR") return Corner::lower_right;
  if (s == "LL") return Corner::lower_left;
  throw ConfigError("unknown direction '" + s + "' (expected UL, UR, LR or LL)");
}

inline const char* corner_name(Corner c) {
  static constexpr std::array<const char*, 4> names{"UL", "UR", "LR", "LL"};
  return names[static_cast<int>(c)];
}

inline const std::vector<int>& all_rotations() {
  static const std::vector<int> r{0, 1, 2, 3};
  return r;
}

namespace detail {

inline void require_square(const Shape& s, const char* what) {
  if (s.size() != 4) throw DimensionError(std::string(what) + ": expected [B, S, S, D], got " + shape_str(s));
  if (s[1] != s[2]) throw DimensionError(std::string(what) + ": grid must be square, got " + shape_str(s));
}

}  // namespace detail

/// Counterclockwise rotation of the two grid axes by k quarter turns (k mod 4).
template <std::floating_point T>
Tensor<T> rot90(const Tensor<T>& x, int k) {
  detail::require_square(x.shape(), "rot90");
  k = ((k % 4) + 4) % 4;
  if (k == 0) return x;
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        std::size_t si = 0, sj = 0;
        switch (k) {
          case 1: si = j, sj = s - 1 - i; break;
          case 2: si = s - 1 - i, sj = s - 1 - j; break;
          default: si = s - 1 - j, sj = i; break;
        }
        const T* src = x.ptr() + ((n * s + si) * s + sj) * d;
        std::copy(src, src + d, out.ptr() + ((n * s + i) * s + j) * d);
      }
    }
  }
  return out;
}

/// Rotated copies stacked on the batch axis: group g holds rot90(x, rotations[g]).
template <std::floating_point T>
struct DirectionBatch {
  Tensor<T> z;                 // [G * B, S, S, D]
  std::vector<int> rotations;  // one entry per group
  std::size_t batch = 0;       // B
};

namespace detail {

template <std::floating_point T>
Tensor<T> stack_rotations(const Tensor<T>& x, const std::vector<int>& rotations) {
  require_square(x.shape(), "expand_directions");
  if (rotations.empty()) throw ContractError("expand_directions: no directions enabled");
  Shape s = x.shape();
  s[0] *= rotations.size();
  Tensor<T> z(s);
  for (std::size_t g = 0; g < rotations.size(); ++g) {
    const Tensor<T> r = rot90(x, rotations[g]);
    std::copy(r.ptr(), r.ptr() + r.size(), z.ptr() + g * r.size());
  }
  return z;
}

/// Adjoint of stack_rotations: rotate each group back and sum.
template <std::floating_point T>
Tensor<T> derotate_sum(const Tensor<T>& z, const std::vector<int>& rotations) {
  require_square(z.shape(), "aggregate_directions");
  const std::size_t groups = rotations.size();
  if (groups == 0 || z.dim(0) % groups != 0) {
    throw DimensionError("aggregate_directions: leading extent " + std::to_string(z.dim(0)) +
                         " not divisible into " + std::to_string(groups) + " direction groups");
  }
  Shape s = z.shape();
  s[0] /= groups;
  const std::size_t group_size = numel(s);
  Tensor<T> sum = Tensor<T>::zeros(s);
  for (std::size_t g = 0; g < groups; ++g) {
    Tensor<T> part(s, std::vector<T>(z.ptr() + g * group_size, z.ptr() + (g + 1) * group_size));
    add_in_place(sum, rot90(part, 4 - rotations[g]));
  }
  return sum;
}

}  // namespace detail

template <std::floating_point T>
DirectionBatch<T> expand_directions(const Tensor<T>& x, const std::vector<int>& rotations = all_rotations()) {
  return {detail::stack_rotations(x, rotations), rotations, x.dim(0)};
}

/// Rotate each group back to the original frame, sum, then project with w_out.
template <std::floating_point T>
Tensor<T> aggregate_directions(const DirectionBatch<T>& z_out, const Tensor<T>& w_out) {
  return linear(detail::derotate_sum(z_out.z, z_out.rotations), w_out);
}

namespace ops {

template <std::floating_point T>
Var<T> rot90(const Var<T>& x, int k) {
  return x.tape().record(v2m::rot90(x.value(), k), {x},
                         [x, k](const Tensor<T>& g) { x.tape().accumulate(x, v2m::rot90(g, 4 - k)); });
}

template <std::floating_point T>
Var<T> expand_directions(const Var<T>& x, const std::vector<int>& rotations) {
  return x.tape().record(detail::stack_rotations(x.value(), rotations), {x}, [x, rotations](const Tensor<T>& g) {
    x.tape().accumulate(x, detail::derotate_sum(g, rotations));
  });
}

template <std::floating_point T>
Var<T> derotate_sum(const Var<T>& z, const std::vector<int>& rotations) {
  return z.tape().record(detail::derotate_sum(z.value(), rotations), {z}, [z, rotations](const Tensor<T>& g) {
    z.tape().accumulate(z, detail::stack_rotations(g, rotations));
  });
}

template <std::floating_point T>
Var<T> aggregate_directions(const Var<T>& z, const std::vector<int>& rotations, const Var<T>& w_out) {
  return linear(derotate_sum(z, rotations), w_out);
}

}  // namespace ops

}  // namespace v2m
