#pragma once

#include <cstddef>

#include "lorank/types.hpp"

namespace lorank {

// Sizing limits shared by generation, Hessian assembly and spectral analysis.
struct Caps {
  std::size_t max_operator_bytes = std::size_t{2} << 30;
  Index dense_hessian_dim = 4096;
  Index dense_gram_dim = 4096;
  Index dense_tangent_dim = 4096;
};

}  // namespace lorank
