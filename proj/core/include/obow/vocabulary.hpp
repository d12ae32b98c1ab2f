#pragma once

#include <Eigen/Dense>
#include <deque>
#include <span>
#include <vector>

#include "obow/encoder.hpp"
#include "obow/rng.hpp"

namespace obow {

enum class VocabMode { kQueue, kKmeans };

// How one candidate word is drawn from a feature map.
enum class SampleStrategy { kLocal, kGlobalAvg, kLocalAvg3x3 };

// Ordered (oldest-first) collection of visual words with fixed capacity.
// In queue mode, inserting past capacity evicts exactly the oldest entries.
class WordVocabulary {
public:
    WordVocabulary(Level level, int capacity, VocabMode mode = VocabMode::kQueue)
        : level_(level), capacity_(capacity), mode_(mode) {
        if (capacity < 1) throw std::invalid_argument("WordVocabulary: capacity must be >= 1");
    }

    Level level() const { return level_; }
    int capacity() const { return capacity_; }
    VocabMode mode() const { return mode_; }
    int size() const { return static_cast<int>(words_.size()); }
    bool empty() const { return words_.empty(); }
    long insertion_index() const { return insertion_index_; }
    int dim() const { return words_.empty() ? 0 : static_cast<int>(words_.front().size()); }

    const Eigen::VectorXd& word(int k) const { return words_[static_cast<std::size_t>(k)]; }
    void set_word(int k, Eigen::VectorXd v);

    // Age (in insertions) of the word at position k; 0 = newest possible.
    long insertion_id(int k) const { return insertion_index_ - size() + k; }
    long oldest_age() const { return empty() ? 0 : insertion_index_ - insertion_id(0); }

    // Words as columns of a (dim x size) matrix, oldest first.
    Eigen::MatrixXd as_matrix() const;

    // Checkpoint restore: contents plus the historical insertion counter.
    static WordVocabulary deserialize(Level level, int capacity, VocabMode mode,
                                      std::vector<Eigen::VectorXd> words, long insertion_index);

    friend void enqueue_words(WordVocabulary& vocab,
                              const std::vector<Eigen::VectorXd>& candidates);

private:
    Level level_;
    int capacity_;
    VocabMode mode_;
    long insertion_index_ = 0;
    std::deque<Eigen::VectorXd> words_;
};

// Appends candidates in order; evicts oldest entries beyond capacity.
// Only meaningful in queue mode (k-means centroids are updated in place).
void enqueue_words(WordVocabulary& vocab, const std::vector<Eigen::VectorXd>& candidates);

// Draws one candidate word from a (channels x h*w) feature map.
//   kLocal:       feature vector of one uniformly sampled location
//   kGlobalAvg:   spatial mean vector
//   kLocalAvg3x3: mean over one uniformly sampled 3x3 window (stride 1, no
//                 padding)
Eigen::VectorXd sample_word_candidate(const Eigen::MatrixXd& feature_map, int h, int w,
                                      SampleStrategy strategy, Rng& rng);

// Exponential moving average of the mean squared distance to the nearest
// word; the effective soft-assignment temperature is delta_base * mu_msd.
struct TemperatureTracker {
    double delta_base = 0.1;
    double mu_msd = 0.0;
    double momentum = 0.99;
    bool initialized = false;

    double delta() const;
};

// batch mean computed with a permutation-invariant summation order.
void update_temperature(TemperatureTracker& tracker, std::span<const double> sq_dists_to_nearest);

// EMA state for online k-means: per-word assignment mass and feature sums.
struct KMeansState {
    Eigen::VectorXd mass;        // N_k
    Eigen::MatrixXd feature_sum; // M, column k = M_k
    double gamma = 0.99;
    std::vector<long> last_used_step;

    static KMeansState init_from(const WordVocabulary& vocab, double gamma, long step);
    void reset_word(int k, const Eigen::VectorXd& v, long step);
};

// N_k <- gamma*N_k + (1-gamma)*n_k, M_k likewise; centroids refreshed as
// M_k/N_k. codes is (K x B) with columns on the simplex (or one-hot).
void kmeans_ema_update(KMeansState& state, WordVocabulary& vocab,
                       const Eigen::MatrixXd& codes, const Eigen::MatrixXd& features);

// Records, for each batch column, the argmax word as "used" at `step`.
void mark_word_usage(KMeansState& state, const Eigen::MatrixXd& codes, long step);

// Replaces every word unused for strictly more than stale_steps steps with a
// uniformly sampled column of batch_features. No-op when nothing is stale.
void replace_rare_words(KMeansState& state, WordVocabulary& vocab,
                        const Eigen::MatrixXd& batch_features, long step, Rng& rng,
                        long stale_steps = 1000);

struct SinkhornConfig {
    double epsilon = 0.05;
    int max_iters = 100;
    double marginal_tol = 1e-3;

    void validate() const;
};

struct SinkhornResult {
    Eigen::MatrixXd plan;  // K x B, rows sum to 1/K, columns to 1/B
    int iterations = 0;
    double row_dev = 0.0;  // L1 deviation of row sums from uniform
    double col_dev = 0.0;
    bool converged = false;
};

// Entropy-regularized balanced assignment of B feature columns to K words,
// computed by Sinkhorn scaling of exp(-D/epsilon). The kernel is shifted by
// min(D) before exponentiation, so the plan is invariant (to rounding) under
// adding a constant to D.
SinkhornResult sinkhorn_assign(const Eigen::MatrixXd& distances, const SinkhornConfig& cfg);

// Per-location assignment codes from a transport plan: columns rescaled to
// sum to one.
Eigen::MatrixXd codes_from_plan(const Eigen::MatrixXd& plan);

}  // namespace obow
