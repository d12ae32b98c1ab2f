#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <span>
#include <vector>

namespace obow {

// Sum over a canonical (ascending value) accumulation order. The result is
// invariant under any permutation of the inputs, which makes reductions such
// as softmax denominators bit-exactly equivariant when the items they range
// over are reordered (e.g. a permuted vocabulary).
inline double ordered_sum(std::span<const double> xs) {
    std::vector<double> v(xs.begin(), xs.end());
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc;
}

inline double ordered_sum(const Eigen::VectorXd& xs) {
    return ordered_sum(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())));
}

// Numerically stabilized softmax. The max shift and the ordered-sum
// denominator are both permutation invariant, so permuting the logits
// permutes the output bitwise.
inline Eigen::VectorXd stable_softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - m).exp();
    return e / ordered_sum(e);
}

}  // namespace obow
