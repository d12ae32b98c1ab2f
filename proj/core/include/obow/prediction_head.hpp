#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "obow/encoder.hpp"
#include "obow/vocabulary.hpp"

namespace obow {

struct PredictionConfig {
    double kappa = 5.0;  // fixed logit scale applied to the unit-norm weights

    void validate() const {
        if (kappa <= 0.0) throw std::invalid_argument("PredictionConfig: kappa must be positive");
    }
};

// Two-layer word-to-weight generator: L2-normalize -> linear -> relu ->
// linear -> L2-normalize. Parameter count does not depend on the vocabulary
// size. The final layer carries no bias by default (the output normalization
// absorbs scale); `final_bias` switches it on.
struct GeneratorParams {
    Level level = Level::kLast;
    int input_dim = 0;   // word dimension of the level
    int hidden_dim = 0;  // 2 * pooled_dim
    int output_dim = 0;  // pooled_dim
    bool final_bias = false;

    Eigen::MatrixXd w1;  // hidden x input
    Eigen::VectorXd b1;  // hidden
    Eigen::MatrixXd w2;  // output x hidden
    Eigen::VectorXd b2;  // output, used only when final_bias

    static GeneratorParams init(Level level, int input_dim, int pooled_dim,
                                std::uint64_t seed, bool final_bias = false);

    long param_count() const;
    std::vector<ParamRef> collect(const std::string& prefix);
};

// Forward intermediates for one generator application over K words.
struct GeneratorCache {
    Eigen::MatrixXd vhat;    // input x K, L2-normalized words
    Eigen::MatrixXd hidden;  // hidden x K, post-relu
    Eigen::MatrixXd raw;     // output x K, pre-normalization
    Eigen::VectorXd norms;   // K
};

// Prediction weight matrix (K x c); row k = G(v_k), unit L2 norm. Computed
// per word so a permuted vocabulary yields bitwise-permuted rows.
Eigen::MatrixXd generate_weights(const GeneratorParams& gen, const WordVocabulary& vocab,
                                 GeneratorCache* cache = nullptr);
Eigen::MatrixXd generate_weights_from(const GeneratorParams& gen, const Eigen::MatrixXd& words,
                                      GeneratorCache* cache = nullptr);

// Backward through the generator given d(loss)/d(weight rows); accumulates
// into grads under prefix. Word vectors receive no gradient.
void generator_backward(const GeneratorParams& gen, const GeneratorCache& cache,
                        const Eigen::MatrixXd& dweights, const std::string& prefix,
                        Gradients& grads);

// y[k] = softmax_k(kappa * <weights_k, pooled>)
Eigen::VectorXd predict_bow(const Eigen::VectorXd& pooled, const Eigen::MatrixXd& weights,
                            const PredictionConfig& cfg);

// Ablation head with a fixed learnable K x c weight matrix (Eq.-1-style
// linear-plus-softmax, meaningful only with a frozen vocabulary ordering).
struct FixedHeadParams {
    Eigen::MatrixXd weight;  // K x c

    static FixedHeadParams init(int vocab_size, int pooled_dim, std::uint64_t seed);
    std::vector<ParamRef> collect(const std::string& prefix);
};

Eigen::VectorXd fixed_predict_bow(const Eigen::VectorXd& pooled, const FixedHeadParams& head);

}  // namespace obow
