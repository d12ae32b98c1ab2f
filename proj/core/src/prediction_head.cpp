#include "obow/prediction_head.hpp"

#include <cmath>

#include "obow/numeric.hpp"
#include "obow/rng.hpp"

namespace obow {

namespace {
constexpr double kNormFloor = 1e-12;
}

GeneratorParams GeneratorParams::init(Level level, int input_dim, int pooled_dim,
                                      std::uint64_t seed, bool final_bias) {
    if (input_dim < 1 || pooled_dim < 1)
        throw std::invalid_argument("GeneratorParams: dimensions must be positive");
    GeneratorParams g;
    g.level = level;
    g.input_dim = input_dim;
    g.hidden_dim = 2 * pooled_dim;
    g.output_dim = pooled_dim;
    g.final_bias = final_bias;
    Rng rng = Rng::derive(seed, "generator.init", static_cast<std::uint64_t>(level));
    const double s1 = std::sqrt(2.0 / input_dim);
    const double s2 = std::sqrt(2.0 / g.hidden_dim);
    g.w1.resize(g.hidden_dim, input_dim);
    for (Eigen::Index i = 0; i < g.w1.size(); ++i) g.w1.data()[i] = rng.normal(0.0, s1);
    g.b1 = Eigen::VectorXd::Zero(g.hidden_dim);
    g.w2.resize(g.output_dim, g.hidden_dim);
    for (Eigen::Index i = 0; i < g.w2.size(); ++i) g.w2.data()[i] = rng.normal(0.0, s2);
    if (final_bias) g.b2 = Eigen::VectorXd::Zero(g.output_dim);
    return g;
}

long GeneratorParams::param_count() const {
    long n = static_cast<long>(w1.size()) + b1.size() + w2.size();
    if (final_bias) n += b2.size();
    return n;
}

std::vector<ParamRef> GeneratorParams::collect(const std::string& prefix) {
    std::vector<ParamRef> refs;
    refs.push_back({prefix + "w1", w1.data(), w1.size()});
    refs.push_back({prefix + "b1", b1.data(), b1.size()});
    refs.push_back({prefix + "w2", w2.data(), w2.size()});
    if (final_bias) refs.push_back({prefix + "b2", b2.data(), b2.size()});
    return refs;
}

Eigen::MatrixXd generate_weights_from(const GeneratorParams& gen, const Eigen::MatrixXd& words,
                                      GeneratorCache* cache) {
    if (words.rows() != gen.input_dim)
        throw std::invalid_argument("generate_weights: word dimension does not match generator input");
    const Eigen::Index K = words.cols();
    Eigen::MatrixXd vhat(gen.input_dim, K), hidden(gen.hidden_dim, K), raw(gen.output_dim, K);
    Eigen::VectorXd norms(K);
    Eigen::MatrixXd weights(K, gen.output_dim);

    // Strictly per-word evaluation: every column goes through an identical
    // instruction sequence, so reordering the vocabulary reorders the rows
    // bit-exactly.
    for (Eigen::Index k = 0; k < K; ++k) {
        Eigen::VectorXd v = words.col(k);
        const double vn = v.norm();
        if (vn > kNormFloor) v /= vn;
        vhat.col(k) = v;
        Eigen::VectorXd h = gen.b1;
        h.noalias() += gen.w1 * v;
        h = h.cwiseMax(0.0);
        hidden.col(k) = h;
        Eigen::VectorXd g = gen.final_bias ? Eigen::VectorXd(gen.b2) : Eigen::VectorXd::Zero(gen.output_dim);
        g.noalias() += gen.w2 * h;
        raw.col(k) = g;
        const double gn = g.norm();
        norms[k] = gn;
        if (gn > kNormFloor) {
            weights.row(k) = (g / gn).transpose();
        } else {
            // Degenerate all-dead hidden layer: fall back to a fixed unit
            // vector so the unit-norm contract still holds.
            weights.row(k).setZero();
            weights(k, 0) = 1.0;
        }
    }
    if (cache) {
        cache->vhat = std::move(vhat);
        cache->hidden = std::move(hidden);
        cache->raw = std::move(raw);
        cache->norms = std::move(norms);
    }
    return weights;
}

Eigen::MatrixXd generate_weights(const GeneratorParams& gen, const WordVocabulary& vocab,
                                 GeneratorCache* cache) {
    if (vocab.empty()) throw std::invalid_argument("generate_weights: empty vocabulary");
    return generate_weights_from(gen, vocab.as_matrix(), cache);
}

void generator_backward(const GeneratorParams& gen, const GeneratorCache& cache,
                        const Eigen::MatrixXd& dweights, const std::string& prefix,
                        Gradients& grads) {
    const Eigen::Index K = dweights.rows();
    if (cache.norms.size() != K)
        throw std::invalid_argument("generator_backward: cache/gradient shape mismatch");

    Eigen::MatrixXd draw(gen.output_dim, K);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double gn = cache.norms[k];
        if (gn <= kNormFloor) {
            draw.col(k).setZero();
            continue;
        }
        const Eigen::VectorXd y = cache.raw.col(k) / gn;
        const Eigen::VectorXd dy = dweights.row(k).transpose();
        draw.col(k) = (dy - y * y.dot(dy)) / gn;
    }

    Eigen::VectorXd& dw2 = grads.accumulator(prefix + "w2", gen.w2.size());
    Eigen::Map<Eigen::MatrixXd>(dw2.data(), gen.output_dim, gen.hidden_dim).noalias() +=
        draw * cache.hidden.transpose();
    if (gen.final_bias) {
        grads.accumulator(prefix + "b2", gen.output_dim) += draw.rowwise().sum();
    }

    Eigen::MatrixXd dh;
    dh.noalias() = gen.w2.transpose() * draw;
    dh = (cache.hidden.array() > 0.0).select(dh, 0.0);

    Eigen::VectorXd& dw1 = grads.accumulator(prefix + "w1", gen.w1.size());
    Eigen::Map<Eigen::MatrixXd>(dw1.data(), gen.hidden_dim, gen.input_dim).noalias() +=
        dh * cache.vhat.transpose();
    grads.accumulator(prefix + "b1", gen.hidden_dim) += dh.rowwise().sum();
}

Eigen::VectorXd predict_bow(const Eigen::VectorXd& pooled, const Eigen::MatrixXd& weights,
                            const PredictionConfig& cfg) {
    cfg.validate();
    if (weights.cols() != pooled.size())
        throw std::invalid_argument("predict_bow: pooled/weight shape mismatch");
    Eigen::VectorXd logits;
    logits.noalias() = weights * pooled;
    logits *= cfg.kappa;
    return stable_softmax(logits);
}

FixedHeadParams FixedHeadParams::init(int vocab_size, int pooled_dim, std::uint64_t seed) {
    if (vocab_size < 1 || pooled_dim < 1)
        throw std::invalid_argument("FixedHeadParams: dimensions must be positive");
    FixedHeadParams head;
    head.weight.resize(vocab_size, pooled_dim);
    Rng rng = Rng::derive(seed, "fixed_head.init");
    const double s = std::sqrt(1.0 / pooled_dim);
    for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = rng.normal(0.0, s);
    return head;
}

std::vector<ParamRef> FixedHeadParams::collect(const std::string& prefix) {
    return {{prefix + "weight", weight.data(), weight.size()}};
}

Eigen::VectorXd fixed_predict_bow(const Eigen::VectorXd& pooled, const FixedHeadParams& head) {
    if (head.weight.cols() != pooled.size())
        throw std::invalid_argument("fixed_predict_bow: pooled/weight shape mismatch");
    Eigen::VectorXd logits;
    logits.noalias() = head.weight * pooled;
    return stable_softmax(logits);
}

}  // namespace obow
