#include "obow/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "obow/checkpoint.hpp"
#include "obow/numeric.hpp"

namespace fs = std::filesystem;

namespace obow {

namespace {

std::string level_prefix(Level l) { return std::string("gen.") + level_name(l) + "."; }

// Squared distances from every word (column of `words`) to every feature
// column, evaluated strictly per word (see soft_assign_words).
Eigen::MatrixXd distance_matrix(const Eigen::MatrixXd& words, const Eigen::MatrixXd& feats) {
    const Eigen::Index K = words.cols(), U = feats.cols();
    Eigen::VectorXd wsq(K);
    for (Eigen::Index k = 0; k < K; ++k) wsq[k] = words.col(k).squaredNorm();
    Eigen::MatrixXd D(K, U);
    for (Eigen::Index u = 0; u < U; ++u) {
        const auto f = feats.col(u);
        const double fsq = f.squaredNorm();
        for (Eigen::Index k = 0; k < K; ++k)
            D(k, u) = std::max(fsq + wsq[k] - 2.0 * words.col(k).dot(f), 0.0);
    }
    return D;
}

std::vector<Eigen::Index> interior_columns(int h, int w, bool edge_exclude) {
    std::vector<Eigen::Index> cols;
    if (!edge_exclude) {
        for (Eigen::Index u = 0; u < static_cast<Eigen::Index>(h) * w; ++u) cols.push_back(u);
        return cols;
    }
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) cols.push_back(static_cast<Eigen::Index>(y) * w + x);
    return cols;
}

}  // namespace

double bow_loss(const Eigen::VectorXd& y_s, const Eigen::VectorXd& y_t) {
    if (y_s.size() != y_t.size()) throw std::invalid_argument("bow_loss: size mismatch");
    if (!is_simplex(y_s, 1e-5) || !is_simplex(y_t, 1e-5))
        throw std::invalid_argument("bow_loss: inputs must lie on the simplex (tol 1e-5)");
    double loss = 0.0;
    for (Eigen::Index k = 0; k < y_s.size(); ++k)
        loss -= y_t[k] * std::log(std::max(y_s[k], 1e-12));
    return loss;
}

double lr_schedule(long step, long total_steps, long warmup_steps, double peak, double floor) {
    if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be positive");
    if (step < 0 || step > total_steps) throw std::invalid_argument("lr_schedule: step out of range");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
        throw std::invalid_argument("lr_schedule: warmup_steps must lie in [0, total_steps)");
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return floor + (peak - floor) * (1.0 + std::cos(M_PI * t)) / 2.0;
}

std::string MetricsRecord::to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["mean_loss"] = mean_loss;
    j["alpha"] = alpha;
    j["lr"] = lr;
    for (std::size_t i = 0; i < level_names.size(); ++i) {
        nlohmann::json lv;
        lv["loss"] = level_loss[i];
        lv["delta"] = delta[i];
        lv["assign_entropy"] = assign_entropy[i];
        lv["min_usage"] = min_usage[i];
        lv["max_usage"] = max_usage[i];
        lv["oldest_age"] = oldest_age[i];
        j["levels"][level_names[i]] = lv;
    }
    return j.dump();
}

TrainState init_train_state(const TrainConfig& config) {
    config.validate();
    TrainState state;
    state.config = config;
    auto [student, teacher] = build_encoder_pair(config.encoder, config.seed);
    state.student = std::move(student);
    state.teacher = std::move(teacher);
    for (Level level : config.levels()) {
        LevelState ls;
        ls.level = level;
        ls.vocab = WordVocabulary(level, config.vocab_size, config.vocab_mode);
        ls.tracker.delta_base = config.delta_base;
        ls.tracker.momentum = config.temperature_momentum;
        if (config.dynamic_head) {
            ls.generator = GeneratorParams::init(level, config.encoder.level_channels(level),
                                                 config.encoder.pooled_dim, config.seed,
                                                 config.generator_final_bias);
        } else {
            ls.fixed_head = FixedHeadParams::init(config.vocab_size, config.encoder.pooled_dim,
                                                  config.seed + static_cast<int>(level));
        }
        state.levels.push_back(std::move(ls));
    }
    return state;
}

ViewBundle make_train_bundle(const TrainConfig& config, const Image& image, int epoch, long index) {
    Rng rng = Rng::derive(config.seed, "aug", static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(index));
    ViewBundle bundle = make_views(image, config.geometry, rng);
    for (std::size_t v = 0; v < bundle.primary_views.size(); ++v)
        photometric_aug(bundle.primary_views[v], bundle.primary_prov[v], config.photometric, rng);
    for (std::size_t v = 0; v < bundle.patch_views.size(); ++v)
        photometric_aug(bundle.patch_views[v], bundle.patch_prov[v], config.photometric, rng);
    return bundle;
}

void prefill_vocabulary(TrainState& state, const Dataset& dataset) {
    if (state.prefilled) return;
    const TrainConfig& cfg = state.config;
    if (dataset.size() == 0) throw std::invalid_argument("prefill: empty dataset");

    CropGeometry teacher_only = cfg.geometry;
    teacher_only.num_primary = 0;
    teacher_only.num_patches = 0;

    std::vector<long> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
    Rng order_rng = Rng::derive(cfg.seed, "prefill.order");
    order_rng.shuffle(order);

    const int b = cfg.batch_size;
    const StatsMode tmode = cfg.teacher_batch_stats ? StatsMode::kBatchUpdate
                                                    : StatsMode::kRunningUpdate;
    long consumed = 0;
    int guard = 0;
    while (state.levels.front().vocab.size() < cfg.vocab_size) {
        if (++guard > 100000) throw std::runtime_error("prefill: could not fill the vocabulary");
        std::vector<Image> views(static_cast<std::size_t>(b));
        std::vector<long> idx(static_cast<std::size_t>(b));
#pragma omp parallel for schedule(static)
        for (int i = 0; i < b; ++i) {
            const long gi = consumed + i;
            const long di = order[static_cast<std::size_t>(gi % static_cast<long>(order.size()))];
            Rng rng = Rng::derive(cfg.seed, "prefill.aug", static_cast<std::uint64_t>(gi));
            views[static_cast<std::size_t>(i)] =
                make_views(load_image(dataset.paths[static_cast<std::size_t>(di)]), teacher_only, rng)
                    .teacher_view;
            idx[static_cast<std::size_t>(i)] = gi;
        }
        const int th = views[0].height, tw = views[0].width;
        BatchPyramid tp = forward_batch(cfg.encoder, state.teacher, images_to_batch(views),
                                        b, th, tw, tmode);
        for (auto& ls : state.levels) {
            const BatchMaps& maps = ls.level == Level::kLast ? tp.last : tp.penult;
            std::vector<Eigen::VectorXd> candidates;
            candidates.reserve(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) {
                Rng rng = Rng::derive(cfg.seed, std::string("prefill.word.") + level_name(ls.level),
                                      static_cast<std::uint64_t>(idx[static_cast<std::size_t>(i)]));
                candidates.push_back(sample_word_candidate(maps.image_slice(i), maps.h, maps.w,
                                                           cfg.word_strategy, rng));
            }
            enqueue_words(ls.vocab, candidates);
        }
        consumed += b;
    }
    if (cfg.vocab_mode == VocabMode::kKmeans) {
        for (auto& ls : state.levels)
            ls.kmeans = KMeansState::init_from(ls.vocab, cfg.kmeans_gamma, 0);
    }
    state.prefilled = true;
}

namespace {

struct ViewGroup {
    std::vector<const Image*> views;
    std::vector<int> image_of_view;  // batch index of each view
};

// Per-level working data for one step.
struct LevelWork {
    Eigen::MatrixXd words;                  // dim x K snapshot of the vocabulary
    std::vector<Eigen::VectorXd> targets;   // per image, K
    std::vector<double> nearest;            // pooled over the batch
    Eigen::VectorXd usage_sum;              // sum of code rows
    long usage_rows = 0;
    Eigen::MatrixXd codes_cat;              // K x U_total (k-means mode only)
    Eigen::MatrixXd feats_cat;              // dim x U_total (k-means mode only)
    double delta = 0.0;
};

}  // namespace

MetricsRecord train_step(TrainState& state, const TrainBatch& batch, long total_steps) {
    const TrainConfig& cfg = state.config;
    if (!state.prefilled)
        throw std::logic_error("train_step: vocabulary prefill has not run");
    const int B = static_cast<int>(batch.bundles.size());
    if (B < 1) throw std::invalid_argument("train_step: empty batch");
    const std::vector<Level> levels = cfg.levels();
    const std::size_t L = levels.size();

    // (1) Teacher forward on the teacher views.
    std::vector<Image> teacher_views;
    teacher_views.reserve(static_cast<std::size_t>(B));
    for (const auto& bu : batch.bundles) teacher_views.push_back(bu.teacher_view);
    const StatsMode tmode = cfg.teacher_batch_stats ? StatsMode::kBatchUpdate
                                                    : StatsMode::kRunningUpdate;
    BatchPyramid tp = forward_batch(cfg.encoder, state.teacher, images_to_batch(teacher_views),
                                    B, teacher_views[0].height, teacher_views[0].width, tmode);

    // (2) BoW targets from the current vocabulary with the pre-update
    // temperature.
    std::vector<LevelWork> work(L);
    const bool sinkhorn_codes = cfg.vocab_mode == VocabMode::kKmeans &&
                                cfg.kmeans_balancing == KmeansBalancing::kSinkhorn;
    for (std::size_t li = 0; li < L; ++li) {
        LevelState& ls = state.levels[li];
        LevelWork& lw = work[li];
        const BatchMaps& maps = ls.level == Level::kLast ? tp.last : tp.penult;
        lw.words = ls.vocab.as_matrix();
        lw.targets.resize(static_cast<std::size_t>(B));
        lw.usage_sum = Eigen::VectorXd::Zero(ls.vocab.size());

        const auto interior = interior_columns(maps.h, maps.w, cfg.edge_exclude);
        const Eigen::Index Ui = static_cast<Eigen::Index>(interior.size());
        if (Ui == 0)
            throw std::runtime_error("train_step: teacher map has no interior after edge exclusion");
        const Eigen::Index Utotal = Ui * B;

        // Interior feature columns for the whole batch.
        Eigen::MatrixXd feats(maps.act.rows(), Utotal);
        for (int i = 0; i < B; ++i) {
            const Eigen::Index off = static_cast<Eigen::Index>(i) * maps.h * maps.w;
            for (Eigen::Index u = 0; u < Ui; ++u)
                feats.col(static_cast<Eigen::Index>(i) * Ui + u) = maps.act.col(off + interior[u]);
        }

        if (sinkhorn_codes) {
            // Mode (b): balanced codes feed both the targets and the k-means
            // update.
            Eigen::MatrixXd D = distance_matrix(lw.words, feats);
            lw.nearest.resize(static_cast<std::size_t>(Utotal));
            for (Eigen::Index u = 0; u < Utotal; ++u)
                lw.nearest[static_cast<std::size_t>(u)] = D.col(u).minCoeff();
            if (!ls.tracker.initialized)
                update_temperature(ls.tracker, lw.nearest);
            lw.delta = ls.tracker.delta();
            SinkhornResult sr = sinkhorn_assign(D, cfg.sinkhorn);
            if (!sr.converged)
                std::cerr << "[warn] sinkhorn did not reach tol: row_dev=" << sr.row_dev
                          << " col_dev=" << sr.col_dev << " after " << sr.iterations
                          << " iterations\n";
            lw.codes_cat = codes_from_plan(sr.plan);
            lw.feats_cat = std::move(feats);
            for (int i = 0; i < B; ++i) {
                AssignmentCodes ac;
                ac.codes = lw.codes_cat.middleCols(static_cast<Eigen::Index>(i) * Ui, Ui).transpose();
                lw.targets[static_cast<std::size_t>(i)] =
                    normalize_bow(reduce_bow(ac, cfg.reduction)).probs;
            }
            lw.usage_sum = lw.codes_cat.rowwise().sum();
            lw.usage_rows = Utotal;
        } else {
            if (!ls.tracker.initialized) {
                // First loss-bearing batch: seed the tracker from this batch's
                // own nearest distances, then use that value.
                Eigen::MatrixXd D = distance_matrix(lw.words, feats);
                std::vector<double> nearest(static_cast<std::size_t>(Utotal));
                for (Eigen::Index u = 0; u < Utotal; ++u)
                    nearest[static_cast<std::size_t>(u)] = D.col(u).minCoeff();
                update_temperature(ls.tracker, nearest);
            }
            lw.delta = ls.tracker.delta();
            lw.nearest.resize(static_cast<std::size_t>(Utotal));
            std::vector<Eigen::VectorXd> usage(static_cast<std::size_t>(B));
            const bool keep_codes = cfg.vocab_mode == VocabMode::kKmeans;
            if (keep_codes) lw.codes_cat.resize(ls.vocab.size(), Utotal);
#pragma omp parallel for schedule(static)
            for (int i = 0; i < B; ++i) {
                AssignmentCodes ac = soft_assign_words(maps.image_slice(i), maps.h, maps.w,
                                                       lw.words, lw.delta, cfg.edge_exclude);
                lw.targets[static_cast<std::size_t>(i)] =
                    normalize_bow(reduce_bow(ac, cfg.reduction)).probs;
                for (Eigen::Index u = 0; u < Ui; ++u)
                    lw.nearest[static_cast<std::size_t>(static_cast<Eigen::Index>(i) * Ui + u)] =
                        ac.nearest_sq[u];
                usage[static_cast<std::size_t>(i)] = ac.codes.colwise().sum().transpose();
                if (keep_codes)
                    lw.codes_cat.middleCols(static_cast<Eigen::Index>(i) * Ui, Ui) =
                        ac.codes.transpose();
            }
            for (const auto& u : usage) lw.usage_sum += u;
            lw.usage_rows = Utotal;
            if (keep_codes) lw.feats_cat = std::move(feats);
        }
    }

    // (3) Student forwards per crop-size group.
    std::vector<ViewGroup> groups;
    {
        ViewGroup primary, patch, teacher_as_student;
        for (int i = 0; i < B; ++i) {
            const ViewBundle& bu = batch.bundles[static_cast<std::size_t>(i)];
            for (const Image& v : bu.primary_views) {
                primary.views.push_back(&v);
                primary.image_of_view.push_back(i);
            }
            for (const Image& v : bu.patch_views) {
                patch.views.push_back(&v);
                patch.image_of_view.push_back(i);
            }
            if (cfg.student_includes_teacher_view) {
                teacher_as_student.views.push_back(&bu.teacher_view);
                teacher_as_student.image_of_view.push_back(i);
            }
        }
        for (auto* g : {&primary, &patch, &teacher_as_student})
            if (!g->views.empty()) groups.push_back(std::move(*g));
    }
    if (groups.empty()) throw std::invalid_argument("train_step: bundles carry no student views");

    long total_views = 0;
    for (const auto& g : groups) total_views += static_cast<long>(g.views.size());
    const double pair_scale = 1.0 / (static_cast<double>(total_views) * static_cast<double>(L));

    // Generator weights for the current vocabulary.
    std::vector<GeneratorCache> gen_cache(L);
    std::vector<Eigen::MatrixXd> gen_weights(L);
    for (std::size_t li = 0; li < L; ++li) {
        if (cfg.dynamic_head)
            gen_weights[li] = generate_weights_from(state.levels[li].generator, work[li].words,
                                                    &gen_cache[li]);
    }

    // (4) Loss over every (view, level) pair and gradients.
    Gradients grads;
    std::vector<double> level_loss_sum(L, 0.0);
    std::vector<Eigen::MatrixXd> dgen_weights(L);
    for (std::size_t li = 0; li < L; ++li)
        if (cfg.dynamic_head)
            dgen_weights[li] =
                Eigen::MatrixXd::Zero(gen_weights[li].rows(), gen_weights[li].cols());

    std::vector<ForwardCache> caches(groups.size());
    const PredictionConfig pred_cfg{cfg.kappa};
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const ViewGroup& g = groups[gi];
        std::vector<Image> imgs;
        imgs.reserve(g.views.size());
        for (const Image* v : g.views) imgs.push_back(*v);
        const int n = static_cast<int>(imgs.size());
        const int vh = imgs[0].height, vw = imgs[0].width;
        BatchPyramid sp = forward_batch(cfg.encoder, state.student, images_to_batch(imgs), n, vh, vw,
                                        StatsMode::kBatchUpdate, &caches[gi], /*want_maps=*/false);

        Eigen::MatrixXd dpooled = Eigen::MatrixXd::Zero(sp.pooled.rows(), n);
        for (std::size_t li = 0; li < L; ++li) {
            LevelState& ls = state.levels[li];
            // Batched logits; per-view softmax and CE.
            Eigen::MatrixXd logits;
            if (cfg.dynamic_head) {
                logits.noalias() = gen_weights[li] * sp.pooled;
                logits *= cfg.kappa;
            } else {
                logits.noalias() = ls.fixed_head->weight * sp.pooled;
            }
            Eigen::MatrixXd dlogits(logits.rows(), logits.cols());
            for (int v = 0; v < n; ++v) {
                const Eigen::VectorXd y_s = stable_softmax(logits.col(v));
                const Eigen::VectorXd& y_t =
                    work[li].targets[static_cast<std::size_t>(g.image_of_view[static_cast<std::size_t>(v)])];
                level_loss_sum[li] += bow_loss(y_s, y_t);
                dlogits.col(v) = (y_s - y_t) * pair_scale;
            }
            if (cfg.dynamic_head) {
                dgen_weights[li].noalias() += cfg.kappa * dlogits * sp.pooled.transpose();
                dpooled.noalias() += cfg.kappa * gen_weights[li].transpose() * dlogits;
            } else {
                Eigen::VectorXd& dw =
                    grads.accumulator(std::string("head.") + level_name(ls.level) + ".weight",
                                      ls.fixed_head->weight.size());
                Eigen::Map<Eigen::MatrixXd>(dw.data(), ls.fixed_head->weight.rows(),
                                            ls.fixed_head->weight.cols())
                    .noalias() += dlogits * sp.pooled.transpose();
                dpooled.noalias() += ls.fixed_head->weight.transpose() * dlogits;
            }
        }
        encoder_backward(cfg.encoder, state.student, caches[gi], dpooled, "student.", grads);
        caches[gi] = ForwardCache{};  // release
    }

    double mean_loss = 0.0;
    for (double s : level_loss_sum) mean_loss += s;
    mean_loss *= pair_scale;

    if (!std::isfinite(mean_loss)) {
        const std::string path =
            (fs::path(cfg.output_dir) / ("diagnostic_step_" + std::to_string(state.step) + ".ckpt"))
                .string();
        save_checkpoint(state, path);
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(state.step) +
                                 "; diagnostic snapshot written to " + path);
    }

    for (std::size_t li = 0; li < L; ++li)
        if (cfg.dynamic_head)
            generator_backward(state.levels[li].generator, gen_cache[li], dgen_weights[li],
                               level_prefix(levels[li]), grads);

    // (5) SGD with momentum and weight decay on student + head parameters.
    const double lr = lr_schedule(state.step, total_steps, cfg.warmup_steps, cfg.lr_peak,
                                  cfg.lr_floor);
    std::vector<ParamRef> refs = collect_params(state.student, "student.");
    for (auto& ls : state.levels) {
        if (cfg.dynamic_head) {
            auto g = ls.generator.collect(level_prefix(ls.level));
            refs.insert(refs.end(), g.begin(), g.end());
        } else {
            auto h = ls.fixed_head->collect(std::string("head.") + level_name(ls.level) + ".");
            refs.insert(refs.end(), h.begin(), h.end());
        }
    }
    for (const ParamRef& r : refs) {
        Eigen::Map<Eigen::VectorXd> p(r.data, r.size);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(r.size);
        if (const Eigen::VectorXd* found = grads.find(r.name)) g = *found;
        if (cfg.weight_decay != 0.0) g += cfg.weight_decay * p;
        auto it = state.momentum.find(r.name);
        if (it == state.momentum.end())
            it = state.momentum.emplace(r.name, Eigen::VectorXd::Zero(r.size)).first;
        it->second = cfg.sgd_momentum * it->second + g;
        p -= lr * it->second;
    }

    // (6) Teacher EMA with the scheduled momentum.
    const double alpha = momentum_schedule(state.step, total_steps, cfg.alpha0);
    ema_update(state.teacher, state.student, alpha);

    // (7) Vocabulary update: enqueue fresh candidates (queue) or advance the
    // online k-means accumulators. Codes were computed before this update.
    for (std::size_t li = 0; li < L; ++li) {
        LevelState& ls = state.levels[li];
        const BatchMaps& maps = ls.level == Level::kLast ? tp.last : tp.penult;
        if (cfg.vocab_mode == VocabMode::kQueue) {
            std::vector<Eigen::VectorXd> candidates;
            candidates.reserve(static_cast<std::size_t>(B));
            for (int i = 0; i < B; ++i) {
                Rng rng = Rng::derive(cfg.seed, std::string("word.") + level_name(ls.level),
                                      static_cast<std::uint64_t>(batch.epoch),
                                      static_cast<std::uint64_t>(
                                          batch.image_indices[static_cast<std::size_t>(i)]));
                candidates.push_back(sample_word_candidate(maps.image_slice(i), maps.h, maps.w,
                                                           cfg.word_strategy, rng));
            }
            enqueue_words(ls.vocab, candidates);
        } else {
            kmeans_ema_update(ls.kmeans, ls.vocab, work[li].codes_cat, work[li].feats_cat);
            mark_word_usage(ls.kmeans, work[li].codes_cat, state.step);
            if (cfg.kmeans_balancing == KmeansBalancing::kReplaceRare) {
                Rng rng = Rng::derive(cfg.seed, std::string("rare.") + level_name(ls.level),
                                      static_cast<std::uint64_t>(state.step));
                replace_rare_words(ls.kmeans, ls.vocab, work[li].feats_cat, state.step, rng,
                                   cfg.stale_steps);
            }
        }
    }

    // (8) Temperature EMA from this batch's nearest distances.
    for (std::size_t li = 0; li < L; ++li)
        update_temperature(state.levels[li].tracker, work[li].nearest);

    // (9) Metrics.
    MetricsRecord rec;
    rec.step = state.step;
    rec.mean_loss = mean_loss;
    rec.alpha = alpha;
    rec.lr = lr;
    for (std::size_t li = 0; li < L; ++li) {
        const LevelState& ls = state.levels[li];
        rec.level_names.push_back(level_name(ls.level));
        rec.level_loss.push_back(level_loss_sum[li] / static_cast<double>(total_views));
        rec.delta.push_back(work[li].delta);
        Eigen::VectorXd usage = work[li].usage_sum / static_cast<double>(work[li].usage_rows);
        double entropy = 0.0;
        for (Eigen::Index k = 0; k < usage.size(); ++k)
            if (usage[k] > 0.0) entropy -= usage[k] * std::log(usage[k]);
        rec.assign_entropy.push_back(entropy);
        rec.min_usage.push_back(usage.minCoeff());
        rec.max_usage.push_back(usage.maxCoeff());
        long age = 0;
        if (cfg.vocab_mode == VocabMode::kQueue) {
            age = ls.vocab.oldest_age();
        } else {
            long oldest = state.step;
            for (long t : ls.kmeans.last_used_step) oldest = std::min(oldest, t);
            age = state.step - oldest;
        }
        rec.oldest_age.push_back(age);
    }
    ++state.step;
    return rec;
}

namespace {

void put_snapshot(Archive& a, const std::string& prefix, const ParameterSnapshot& snap) {
    for (const auto& arr : snap.params)
        a.put_f64(prefix + ".param." + arr.name,
                  std::vector<double>(arr.data.data(), arr.data.data() + arr.data.size()));
    for (const auto& arr : snap.norm_stats)
        a.put_f64(prefix + ".stat." + arr.name,
                  std::vector<double>(arr.data.data(), arr.data.data() + arr.data.size()));
}

void read_snapshot(const Archive& a, const std::string& prefix, ParameterSnapshot& snap) {
    for (auto& arr : snap.params) {
        const auto& v = a.f64(prefix + ".param." + arr.name);
        if (static_cast<Eigen::Index>(v.size()) != arr.data.size())
            throw std::runtime_error("checkpoint: size mismatch for " + arr.name);
        arr.data = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    for (auto& arr : snap.norm_stats) {
        const auto& v = a.f64(prefix + ".stat." + arr.name);
        if (static_cast<Eigen::Index>(v.size()) != arr.data.size())
            throw std::runtime_error("checkpoint: size mismatch for " + arr.name);
        arr.data = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
}

std::vector<double> to_vec(const Eigen::MatrixXd& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
    Archive a;
    a.put_text("config", train_config_to_json(state.config));
    a.put_i64("scalars", {state.step, state.epoch, state.prefilled ? 1 : 0});
    put_snapshot(a, "student", state.student);
    put_snapshot(a, "teacher", state.teacher);
    for (const auto& ls : state.levels) {
        const std::string lvl = level_name(ls.level);
        a.put_f64("vocab." + lvl + ".words", to_vec(ls.vocab.as_matrix()));
        a.put_i64("vocab." + lvl + ".meta",
                  {ls.vocab.capacity(), ls.vocab.size(), ls.vocab.dim(), ls.vocab.insertion_index()});
        a.put_f64("tracker." + lvl,
                  {ls.tracker.delta_base, ls.tracker.mu_msd, ls.tracker.momentum,
                   ls.tracker.initialized ? 1.0 : 0.0});
        if (state.config.dynamic_head) {
            a.put_f64("gen." + lvl + ".w1", to_vec(ls.generator.w1));
            a.put_f64("gen." + lvl + ".b1", to_vec(ls.generator.b1));
            a.put_f64("gen." + lvl + ".w2", to_vec(ls.generator.w2));
            if (ls.generator.final_bias) a.put_f64("gen." + lvl + ".b2", to_vec(ls.generator.b2));
        } else {
            a.put_f64("head." + lvl + ".weight", to_vec(ls.fixed_head->weight));
        }
        if (state.config.vocab_mode == VocabMode::kKmeans && ls.kmeans.mass.size() > 0) {
            a.put_f64("kmeans." + lvl + ".mass", to_vec(ls.kmeans.mass));
            a.put_f64("kmeans." + lvl + ".sum", to_vec(ls.kmeans.feature_sum));
            a.put_f64("kmeans." + lvl + ".gamma", {ls.kmeans.gamma});
            a.put_i64("kmeans." + lvl + ".last_used",
                      std::vector<std::int64_t>(ls.kmeans.last_used_step.begin(),
                                                ls.kmeans.last_used_step.end()));
        }
    }
    for (const auto& [name, buf] : state.momentum)
        a.put_f64("opt." + name, std::vector<double>(buf.data(), buf.data() + buf.size()));
    a.save(path);
}

TrainState load_checkpoint(const std::string& path) {
    const Archive a = Archive::load(path);
    TrainConfig cfg = parse_train_config(a.text("config"));
    TrainState state = init_train_state(cfg);
    const auto& scalars = a.i64("scalars");
    if (scalars.size() != 3) throw std::runtime_error("checkpoint: bad scalar section");
    state.step = scalars[0];
    state.epoch = static_cast<int>(scalars[1]);
    state.prefilled = scalars[2] != 0;
    read_snapshot(a, "student", state.student);
    read_snapshot(a, "teacher", state.teacher);
    for (auto& ls : state.levels) {
        const std::string lvl = level_name(ls.level);
        const auto& meta = a.i64("vocab." + lvl + ".meta");
        if (meta.size() != 4) throw std::runtime_error("checkpoint: bad vocabulary meta");
        const int size = static_cast<int>(meta[1]), dim = static_cast<int>(meta[2]);
        const auto& words = a.f64("vocab." + lvl + ".words");
        if (static_cast<long>(words.size()) != static_cast<long>(size) * dim)
            throw std::runtime_error("checkpoint: vocabulary payload mismatch");
        std::vector<Eigen::VectorXd> ws(static_cast<std::size_t>(size));
        for (int k = 0; k < size; ++k)
            ws[static_cast<std::size_t>(k)] =
                Eigen::Map<const Eigen::VectorXd>(words.data() + static_cast<long>(k) * dim, dim);
        ls.vocab = WordVocabulary::deserialize(ls.level, static_cast<int>(meta[0]), cfg.vocab_mode,
                                               std::move(ws), meta[3]);

        const auto& tr = a.f64("tracker." + lvl);
        if (tr.size() != 4) throw std::runtime_error("checkpoint: bad tracker section");
        ls.tracker.delta_base = tr[0];
        ls.tracker.mu_msd = tr[1];
        ls.tracker.momentum = tr[2];
        ls.tracker.initialized = tr[3] != 0.0;

        auto read_mat = [&](const std::string& name, Eigen::MatrixXd& m) {
            const auto& v = a.f64(name);
            if (static_cast<Eigen::Index>(v.size()) != m.size())
                throw std::runtime_error("checkpoint: size mismatch for " + name);
            m = Eigen::Map<const Eigen::MatrixXd>(v.data(), m.rows(), m.cols());
        };
        auto read_vecd = [&](const std::string& name, Eigen::VectorXd& m) {
            const auto& v = a.f64(name);
            if (static_cast<Eigen::Index>(v.size()) != m.size())
                throw std::runtime_error("checkpoint: size mismatch for " + name);
            m = Eigen::Map<const Eigen::VectorXd>(v.data(), m.size());
        };
        if (cfg.dynamic_head) {
            read_mat("gen." + lvl + ".w1", ls.generator.w1);
            read_vecd("gen." + lvl + ".b1", ls.generator.b1);
            read_mat("gen." + lvl + ".w2", ls.generator.w2);
            if (ls.generator.final_bias) read_vecd("gen." + lvl + ".b2", ls.generator.b2);
        } else {
            read_mat("head." + lvl + ".weight", ls.fixed_head->weight);
        }
        if (cfg.vocab_mode == VocabMode::kKmeans && a.contains("kmeans." + lvl + ".mass")) {
            ls.kmeans.mass.resize(ls.vocab.size());
            read_vecd("kmeans." + lvl + ".mass", ls.kmeans.mass);
            ls.kmeans.feature_sum.resize(ls.vocab.dim(), ls.vocab.size());
            read_mat("kmeans." + lvl + ".sum", ls.kmeans.feature_sum);
            ls.kmeans.gamma = a.f64("kmeans." + lvl + ".gamma").at(0);
            const auto& lu = a.i64("kmeans." + lvl + ".last_used");
            ls.kmeans.last_used_step.assign(lu.begin(), lu.end());
        }
    }
    for (const auto& [name, sec] : a.sections()) {
        if (!name.starts_with("opt.")) continue;
        state.momentum[name.substr(4)] = Eigen::Map<const Eigen::VectorXd>(
            sec.f64.data(), static_cast<Eigen::Index>(sec.f64.size()));
    }
    return state;
}

RunResult run_training(const TrainConfig& config, const Dataset& dataset,
                       const RunOptions& options) {
    config.validate();
    if (dataset.size() == 0) throw std::invalid_argument("run_training: empty dataset");
#ifdef _OPENMP
    if (config.threads > 0) omp_set_num_threads(config.threads);
#endif
    if (config.threads > 0) Eigen::setNbThreads(config.threads);

    fs::create_directories(config.output_dir);

    TrainState state;
    bool resumed = false;
    if (!options.resume_path.empty()) {
        state = load_checkpoint(options.resume_path);
        std::string why;
        if (!structurally_compatible(state.config, config, &why))
            throw std::invalid_argument("run_training: config incompatible with checkpoint: " + why);
        // Run-local fields follow the invoking config.
        state.config.data_dir = config.data_dir;
        state.config.output_dir = config.output_dir;
        state.config.threads = config.threads;
        state.config.checkpoint_interval = config.checkpoint_interval;
        resumed = true;
    } else {
        state = init_train_state(config);
    }

    if (!state.prefilled) prefill_vocabulary(state, dataset);

    const long N = static_cast<long>(dataset.size());
    const long spe = std::max<long>(1, N / config.batch_size);
    const long total_steps = static_cast<long>(config.epochs) * spe;
    const int batch_actual = static_cast<int>(std::min<long>(config.batch_size, N));

    const std::string metrics_path = (fs::path(config.output_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path,
                          resumed && fs::exists(metrics_path) ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("run_training: cannot open " + metrics_path);
    {
        std::ofstream cfg_out(fs::path(config.output_dir) / "config.json");
        cfg_out << train_config_to_json(state.config) << "\n";
    }

    const std::string latest = (fs::path(config.output_dir) / "checkpoint_latest.ckpt").string();
    auto save_epoch = [&](int epoch_done) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%04d.ckpt", epoch_done);
        const std::string p = (fs::path(config.output_dir) / buf).string();
        save_checkpoint(state, p);
        save_checkpoint(state, latest);
    };

    long steps_run = 0;
    if (config.epochs == 0 || state.epoch >= config.epochs) save_checkpoint(state, latest);
    for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
        std::vector<long> order(static_cast<std::size_t>(N));
        for (long i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng order_rng = Rng::derive(config.seed, "order", static_cast<std::uint64_t>(epoch));
        order_rng.shuffle(order);

        for (long s = 0; s < spe; ++s) {
            TrainBatch batch;
            batch.epoch = epoch;
            batch.bundles.resize(static_cast<std::size_t>(batch_actual));
            batch.image_indices.resize(static_cast<std::size_t>(batch_actual));
#pragma omp parallel for schedule(static)
            for (int i = 0; i < batch_actual; ++i) {
                const long di = order[static_cast<std::size_t>((s * config.batch_size + i) % N)];
                batch.image_indices[static_cast<std::size_t>(i)] = di;
                batch.bundles[static_cast<std::size_t>(i)] = make_train_bundle(
                    state.config, load_image(dataset.paths[static_cast<std::size_t>(di)]), epoch, di);
            }
            MetricsRecord rec = train_step(state, batch, total_steps);
            metrics << rec.to_json() << "\n";
            metrics.flush();
            if (options.on_step) options.on_step(rec);
            ++steps_run;
        }
        state.epoch = epoch + 1;
        const bool due = (state.epoch % config.checkpoint_interval == 0) ||
                         state.epoch == config.epochs ||
                         state.epoch == options.stop_after_epoch;
        if (due) save_epoch(state.epoch);
        if (options.stop_after_epoch > 0 && state.epoch >= options.stop_after_epoch) break;
    }
    return {latest, metrics_path, steps_run};
}

}  // namespace obow
