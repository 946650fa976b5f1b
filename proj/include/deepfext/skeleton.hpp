#pragma once

#include "deepfext/maps.hpp"

namespace dfx {

// Two-subiteration parallel thinning (Zhang-Suen neighborhood rules) run to
// convergence. The skeleton is a subset of the input, keeps each component's
// 8-connectivity and is one pixel wide away from junctions and endpoints.
BinaryMap skeletonize(const BinaryMap& mask);

// 8-connected component count; used by the thinning property checks.
int count_components_8(const BinaryMap& mask);

}  // namespace dfx
