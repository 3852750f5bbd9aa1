#pragma once

#include <vector>

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/rng.hpp"

namespace alft::testing {

inline ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// Fixed random weights turn any tensor-valued op into a scalar objective.
inline ad::Var probe(ad::Var x, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(x.size());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  ad::Var c = x.graph().constant(x.shape(), std::move(w));
  return ad::sum_all(ad::mul(x, c));
}

}  // namespace alft::testing
