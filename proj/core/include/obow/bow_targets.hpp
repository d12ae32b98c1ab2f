#pragma once

#include <Eigen/Dense>
#include <vector>

#include "obow/encoder.hpp"
#include "obow/vocabulary.hpp"

namespace obow {

enum class ReductionMode { kMax, kAvg };

// Per-location soft-assignment rows over the vocabulary. Rows are on the
// simplex; `locations` maps each row back to its feature-map column.
struct AssignmentCodes {
    Eigen::MatrixXd codes;                // U x K
    std::vector<Eigen::Index> locations;  // original column of each row
    Eigen::VectorXd nearest_sq;           // squared distance to nearest word per row
};

struct BowTarget {
    Level level = Level::kLast;
    Eigen::VectorXd probs;  // K entries, nonnegative, summing to 1
};

// q[u][k] = softmax_k(-||f_u - v_k||^2 / delta) over interior locations.
// When edge_exclude is set, the outermost ring of the map is dropped; the
// result may then have zero rows (callers reducing it will reject that).
AssignmentCodes soft_assign(const Eigen::MatrixXd& feature_map, int h, int w,
                            const WordVocabulary& vocab, double delta, bool edge_exclude);

// Same computation against a precomputed (dim x K) word matrix; avoids
// re-materializing the vocabulary in per-image loops.
AssignmentCodes soft_assign_words(const Eigen::MatrixXd& feature_map, int h, int w,
                                  const Eigen::MatrixXd& words, double delta,
                                  bool edge_exclude);

// max:  y[k] = max_u q[u][k];  avg:  y[k] = mean_u q[u][k]
Eigen::VectorXd reduce_bow(const AssignmentCodes& codes, ReductionMode mode);

BowTarget normalize_bow(const Eigen::VectorXd& unnormalized);

struct LevelTarget {
    Level level = Level::kLast;
    BowTarget target;
    AssignmentCodes codes;
};

// soft_assign -> reduce_bow -> normalize_bow per requested level, with the
// temperature read from each level's tracker before any update. An
// uninitialized tracker is seeded from this image's own nearest distances
// first (at the training level the batch does this seeding beforehand).
std::vector<LevelTarget> build_targets(const FeaturePyramid& pyramid,
                                       std::vector<std::reference_wrapper<const WordVocabulary>> vocabs,
                                       std::vector<std::reference_wrapper<TemperatureTracker>> trackers,
                                       const std::vector<Level>& levels,
                                       ReductionMode mode, bool edge_exclude);

// Independent oracle: the same quantity computed with explicit scalar loops
// and no shared code with soft_assign / reduce_bow / normalize_bow. Intended
// for small inputs (locations * words <= 1e6).
BowTarget brute_force_bow(const Eigen::MatrixXd& feature_map, int h, int w,
                          const WordVocabulary& vocab, double delta, ReductionMode mode,
                          bool edge_exclude);

bool is_simplex(const Eigen::VectorXd& v, double tol = 1e-6);

}  // namespace obow
