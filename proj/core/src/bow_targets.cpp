#include "obow/bow_targets.hpp"

#include <cmath>
#include <stdexcept>

#include "obow/numeric.hpp"

namespace obow {

namespace {

std::vector<Eigen::Index> interior_locations(int h, int w, bool edge_exclude) {
    std::vector<Eigen::Index> locs;
    if (!edge_exclude) {
        locs.reserve(static_cast<std::size_t>(h) * w);
        for (Eigen::Index u = 0; u < static_cast<Eigen::Index>(h) * w; ++u) locs.push_back(u);
        return locs;
    }
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) locs.push_back(static_cast<Eigen::Index>(y) * w + x);
    return locs;
}

}  // namespace

AssignmentCodes soft_assign_words(const Eigen::MatrixXd& feature_map, int h, int w,
                                  const Eigen::MatrixXd& words, double delta,
                                  bool edge_exclude) {
    if (words.cols() < 1) throw std::invalid_argument("soft_assign: empty vocabulary");
    if (delta <= 0.0) throw std::invalid_argument("soft_assign: temperature must be positive");
    if (feature_map.cols() != static_cast<Eigen::Index>(h) * w)
        throw std::invalid_argument("soft_assign: map shape mismatch");
    if (feature_map.rows() != words.rows())
        throw std::invalid_argument("soft_assign: feature/word dimension mismatch");

    const Eigen::Index K = words.cols();
    AssignmentCodes out;
    out.locations = interior_locations(h, w, edge_exclude);
    const Eigen::Index U = static_cast<Eigen::Index>(out.locations.size());
    out.codes.resize(U, K);
    out.nearest_sq.resize(U);

    // Per-word squared norms; each is an order-independent reduction over one
    // word only, so a permuted vocabulary yields bitwise-permuted codes.
    Eigen::VectorXd word_sq(K);
    for (Eigen::Index k = 0; k < K; ++k) word_sq[k] = words.col(k).squaredNorm();

    Eigen::VectorXd dist(K);
    for (Eigen::Index r = 0; r < U; ++r) {
        const auto f = feature_map.col(out.locations[static_cast<std::size_t>(r)]);
        const double fsq = f.squaredNorm();
        for (Eigen::Index k = 0; k < K; ++k)
            dist[k] = std::max(fsq + word_sq[k] - 2.0 * words.col(k).dot(f), 0.0);
        out.nearest_sq[r] = dist.minCoeff();
        out.codes.row(r) = stable_softmax(-dist / delta).transpose();
    }
    return out;
}

AssignmentCodes soft_assign(const Eigen::MatrixXd& feature_map, int h, int w,
                            const WordVocabulary& vocab, double delta, bool edge_exclude) {
    if (vocab.empty()) throw std::invalid_argument("soft_assign: empty vocabulary");
    return soft_assign_words(feature_map, h, w, vocab.as_matrix(), delta, edge_exclude);
}

Eigen::VectorXd reduce_bow(const AssignmentCodes& codes, ReductionMode mode) {
    if (codes.codes.rows() < 1)
        throw std::invalid_argument(
            "reduce_bow: zero valid locations (map too small after edge exclusion)");
    const Eigen::Index K = codes.codes.cols();
    Eigen::VectorXd y(K);
    for (Eigen::Index k = 0; k < K; ++k) {
        y[k] = mode == ReductionMode::kMax ? codes.codes.col(k).maxCoeff()
                                           : codes.codes.col(k).mean();
    }
    return y;
}

BowTarget normalize_bow(const Eigen::VectorXd& unnormalized) {
    if (unnormalized.size() < 1) throw std::invalid_argument("normalize_bow: empty input");
    if ((unnormalized.array() < 0.0).any())
        throw std::invalid_argument("normalize_bow: negative entry");
    const double total = ordered_sum(unnormalized);
    if (total <= 0.0) throw std::invalid_argument("normalize_bow: all-zero input");
    BowTarget t;
    t.probs = unnormalized / total;
    return t;
}

std::vector<LevelTarget> build_targets(const FeaturePyramid& pyramid,
                                       std::vector<std::reference_wrapper<const WordVocabulary>> vocabs,
                                       std::vector<std::reference_wrapper<TemperatureTracker>> trackers,
                                       const std::vector<Level>& levels,
                                       ReductionMode mode, bool edge_exclude) {
    if (vocabs.size() != levels.size() || trackers.size() != levels.size())
        throw std::invalid_argument("build_targets: one vocabulary and tracker per level");
    std::vector<LevelTarget> out;
    out.reserve(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const Level level = levels[i];
        const auto& map = level == Level::kLast ? pyramid.map_last : pyramid.map_penult;
        const int h = level == Level::kLast ? pyramid.last_h : pyramid.penult_h;
        const int w = level == Level::kLast ? pyramid.last_w : pyramid.penult_w;
        TemperatureTracker& tracker = trackers[i].get();
        const WordVocabulary& vocab = vocabs[i].get();
        if (!tracker.initialized) {
            // One-image seeding path; the trainer seeds from the whole batch
            // before reaching here.
            AssignmentCodes probe = soft_assign(map, h, w, vocab, 1.0, edge_exclude);
            update_temperature(tracker, std::span<const double>(probe.nearest_sq.data(),
                                                                static_cast<std::size_t>(probe.nearest_sq.size())));
        }
        LevelTarget lt;
        lt.level = level;
        lt.codes = soft_assign(map, h, w, vocab, tracker.delta(), edge_exclude);
        lt.target = normalize_bow(reduce_bow(lt.codes, mode));
        lt.target.level = level;
        out.push_back(std::move(lt));
    }
    return out;
}

BowTarget brute_force_bow(const Eigen::MatrixXd& feature_map, int h, int w,
                          const WordVocabulary& vocab, double delta, ReductionMode mode,
                          bool edge_exclude) {
    if (vocab.empty()) throw std::invalid_argument("brute_force_bow: empty vocabulary");
    if (delta <= 0.0) throw std::invalid_argument("brute_force_bow: non-positive temperature");
    const int K = vocab.size();
    const int c = static_cast<int>(feature_map.rows());

    const int y0 = edge_exclude ? 1 : 0, x0 = edge_exclude ? 1 : 0;
    const int y1 = edge_exclude ? h - 1 : h, x1 = edge_exclude ? w - 1 : w;
    if (y0 >= y1 || x0 >= x1)
        throw std::invalid_argument("brute_force_bow: zero valid locations");

    std::vector<std::vector<double>> q;
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            const int u = y * w + x;
            std::vector<double> logits(static_cast<std::size_t>(K));
            for (int k = 0; k < K; ++k) {
                double d = 0.0;
                for (int ci = 0; ci < c; ++ci) {
                    const double diff = feature_map(ci, u) - vocab.word(k)[ci];
                    d += diff * diff;
                }
                logits[static_cast<std::size_t>(k)] = -d / delta;
            }
            double m = logits[0];
            for (double l : logits) m = l > m ? l : m;
            double denom = 0.0;
            for (double l : logits) denom += std::exp(l - m);
            std::vector<double> row(static_cast<std::size_t>(K));
            for (int k = 0; k < K; ++k)
                row[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - m) / denom;
            q.push_back(std::move(row));
        }
    }

    std::vector<double> reduced(static_cast<std::size_t>(K), 0.0);
    for (int k = 0; k < K; ++k) {
        if (mode == ReductionMode::kMax) {
            double best = q[0][static_cast<std::size_t>(k)];
            for (const auto& row : q)
                if (row[static_cast<std::size_t>(k)] > best) best = row[static_cast<std::size_t>(k)];
            reduced[static_cast<std::size_t>(k)] = best;
        } else {
            double acc = 0.0;
            for (const auto& row : q) acc += row[static_cast<std::size_t>(k)];
            reduced[static_cast<std::size_t>(k)] = acc / static_cast<double>(q.size());
        }
    }

    double total = 0.0;
    for (double v : reduced) total += v;
    BowTarget t;
    t.probs.resize(K);
    for (int k = 0; k < K; ++k) t.probs[k] = reduced[static_cast<std::size_t>(k)] / total;
    return t;
}

bool is_simplex(const Eigen::VectorXd& v, double tol) {
    if (v.size() < 1) return false;
    if ((v.array() < -tol).any()) return false;
    return std::abs(v.sum() - 1.0) <= tol;
}

}  // namespace obow
