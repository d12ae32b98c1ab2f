#include "obow/vocabulary.hpp"

#include <cmath>
#include <sstream>

#include "obow/numeric.hpp"

namespace obow {

void WordVocabulary::set_word(int k, Eigen::VectorXd v) {
    if (k < 0 || k >= size()) throw std::out_of_range("WordVocabulary::set_word: bad index");
    if (dim() != 0 && v.size() != dim())
        throw std::invalid_argument("WordVocabulary::set_word: dimension mismatch");
    words_[static_cast<std::size_t>(k)] = std::move(v);
}

Eigen::MatrixXd WordVocabulary::as_matrix() const {
    Eigen::MatrixXd m(dim(), size());
    for (int k = 0; k < size(); ++k) m.col(k) = words_[static_cast<std::size_t>(k)];
    return m;
}

WordVocabulary WordVocabulary::deserialize(Level level, int capacity, VocabMode mode,
                                           std::vector<Eigen::VectorXd> words,
                                           long insertion_index) {
    if (static_cast<int>(words.size()) > capacity)
        throw std::invalid_argument("WordVocabulary::deserialize: more words than capacity");
    if (insertion_index < static_cast<long>(words.size()))
        throw std::invalid_argument("WordVocabulary::deserialize: inconsistent insertion index");
    WordVocabulary v(level, capacity, mode);
    for (auto& w : words) v.words_.push_back(std::move(w));
    v.insertion_index_ = insertion_index;
    return v;
}

void enqueue_words(WordVocabulary& vocab, const std::vector<Eigen::VectorXd>& candidates) {
    for (const auto& c : candidates) {
        if (vocab.dim() != 0 && c.size() != vocab.dim())
            throw std::invalid_argument("enqueue_words: candidate dimension mismatch");
        vocab.words_.push_back(c);
        ++vocab.insertion_index_;
    }
    while (vocab.size() > vocab.capacity()) vocab.words_.pop_front();
}

Eigen::VectorXd sample_word_candidate(const Eigen::MatrixXd& feature_map, int h, int w,
                                      SampleStrategy strategy, Rng& rng) {
    if (feature_map.cols() != static_cast<Eigen::Index>(h) * w || h < 1 || w < 1)
        throw std::invalid_argument("sample_word_candidate: map shape mismatch");
    switch (strategy) {
        case SampleStrategy::kLocal: {
            const auto u = rng.uniform_int(static_cast<std::uint64_t>(h) * w);
            return feature_map.col(static_cast<Eigen::Index>(u));
        }
        case SampleStrategy::kGlobalAvg:
            return feature_map.rowwise().mean();
        case SampleStrategy::kLocalAvg3x3: {
            if (h < 3 || w < 3)
                throw std::invalid_argument(
                    "sample_word_candidate: map smaller than 3x3; local_avg_3x3 needs at "
                    "least one full window");
            const int gh = h - 2, gw = w - 2;
            const auto u = rng.uniform_int(static_cast<std::uint64_t>(gh) * gw);
            const int py = static_cast<int>(u) / gw, px = static_cast<int>(u) % gw;
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(feature_map.rows());
            for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx)
                    acc += feature_map.col(static_cast<Eigen::Index>(py + dy) * w + (px + dx));
            return acc / 9.0;
        }
    }
    throw std::logic_error("sample_word_candidate: unknown strategy");
}

double TemperatureTracker::delta() const {
    if (!initialized)
        throw std::logic_error("TemperatureTracker: temperature read before initialization");
    const double d = delta_base * mu_msd;
    if (d <= 0.0)
        throw std::logic_error("TemperatureTracker: non-positive temperature");
    return d;
}

void update_temperature(TemperatureTracker& tracker, std::span<const double> sq_dists) {
    if (sq_dists.empty())
        throw std::invalid_argument("update_temperature: empty distance list");
    for (double d : sq_dists)
        if (!(d >= 0.0)) throw std::invalid_argument("update_temperature: negative squared distance");
    const double batch_msd = ordered_sum(sq_dists) / static_cast<double>(sq_dists.size());
    if (!tracker.initialized) {
        tracker.mu_msd = batch_msd;
        tracker.initialized = true;
    } else {
        tracker.mu_msd = tracker.momentum * tracker.mu_msd + (1.0 - tracker.momentum) * batch_msd;
    }
}

KMeansState KMeansState::init_from(const WordVocabulary& vocab, double gamma, long step) {
    KMeansState st;
    st.gamma = gamma;
    st.mass = Eigen::VectorXd::Ones(vocab.size());
    st.feature_sum = vocab.as_matrix();
    st.last_used_step.assign(static_cast<std::size_t>(vocab.size()), step);
    return st;
}

void KMeansState::reset_word(int k, const Eigen::VectorXd& v, long step) {
    mass[k] = 1.0;
    feature_sum.col(k) = v;
    last_used_step[static_cast<std::size_t>(k)] = step;
}

void kmeans_ema_update(KMeansState& state, WordVocabulary& vocab,
                       const Eigen::MatrixXd& codes, const Eigen::MatrixXd& features) {
    const Eigen::Index K = codes.rows(), B = codes.cols();
    if (K != vocab.size() || features.cols() != B || features.rows() != vocab.dim())
        throw std::invalid_argument("kmeans_ema_update: shape mismatch");
    for (Eigen::Index u = 0; u < B; ++u) {
        const double s = codes.col(u).sum();
        if (std::abs(s - 1.0) > 1e-6) {
            std::ostringstream os;
            os << "kmeans_ema_update: codes column " << u << " sums to " << s
               << " (must be 1 within 1e-6)";
            throw std::invalid_argument(os.str());
        }
    }
    const Eigen::VectorXd n = codes.rowwise().sum();
    Eigen::MatrixXd m;
    m.noalias() = features * codes.transpose();
    const double g = state.gamma;
    state.mass = g * state.mass + (1.0 - g) * n;
    state.feature_sum = g * state.feature_sum + (1.0 - g) * m;
    for (int k = 0; k < vocab.size(); ++k)
        if (state.mass[k] > 0.0) vocab.set_word(k, state.feature_sum.col(k) / state.mass[k]);
}

void mark_word_usage(KMeansState& state, const Eigen::MatrixXd& codes, long step) {
    for (Eigen::Index u = 0; u < codes.cols(); ++u) {
        Eigen::Index k;
        codes.col(u).maxCoeff(&k);
        state.last_used_step[static_cast<std::size_t>(k)] = step;
    }
}

void replace_rare_words(KMeansState& state, WordVocabulary& vocab,
                        const Eigen::MatrixXd& batch_features, long step, Rng& rng,
                        long stale_steps) {
    for (int k = 0; k < vocab.size(); ++k) {
        if (step - state.last_used_step[static_cast<std::size_t>(k)] <= stale_steps) continue;
        const auto u = rng.uniform_int(static_cast<std::uint64_t>(batch_features.cols()));
        Eigen::VectorXd v = batch_features.col(static_cast<Eigen::Index>(u));
        vocab.set_word(k, v);
        state.reset_word(k, v, step);
    }
}

void SinkhornConfig::validate() const {
    if (epsilon <= 0.0) throw std::invalid_argument("SinkhornConfig: epsilon must be positive");
    if (max_iters < 1) throw std::invalid_argument("SinkhornConfig: max_iters must be >= 1");
    if (marginal_tol <= 0.0) throw std::invalid_argument("SinkhornConfig: marginal_tol must be positive");
}

SinkhornResult sinkhorn_assign(const Eigen::MatrixXd& D, const SinkhornConfig& cfg) {
    cfg.validate();
    if (D.rows() < 1 || D.cols() < 1)
        throw std::invalid_argument("sinkhorn_assign: empty distance matrix");
    if (!D.allFinite())
        throw std::invalid_argument("sinkhorn_assign: non-finite distance matrix");

    const Eigen::Index K = D.rows(), B = D.cols();
    const double shift = D.minCoeff();
    const Eigen::MatrixXd kernel = ((D.array() - shift) / -cfg.epsilon).exp();

    const double row_target = 1.0 / static_cast<double>(K);
    const double col_target = 1.0 / static_cast<double>(B);
    Eigen::VectorXd u = Eigen::VectorXd::Constant(K, row_target);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(B);

    SinkhornResult res;
    constexpr double kFloor = 1e-300;
    for (int it = 1; it <= cfg.max_iters; ++it) {
        u = row_target / (kernel * v).array().max(kFloor);
        v = col_target / (kernel.transpose() * u).array().max(kFloor);
        res.plan = u.asDiagonal() * kernel * v.asDiagonal();
        res.iterations = it;
        res.row_dev = (res.plan.rowwise().sum().array() - row_target).abs().sum();
        res.col_dev = (res.plan.colwise().sum().array() - col_target).abs().sum();
        if (res.row_dev < cfg.marginal_tol && res.col_dev < cfg.marginal_tol) {
            res.converged = true;
            break;
        }
    }
    return res;
}

Eigen::MatrixXd codes_from_plan(const Eigen::MatrixXd& plan) {
    Eigen::MatrixXd codes = plan;
    for (Eigen::Index u = 0; u < codes.cols(); ++u) {
        const double s = codes.col(u).sum();
        if (s > 0.0) codes.col(u) /= s;
    }
    return codes;
}

}  // namespace obow
