#include "obow/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "obow/bow_targets.hpp"
#include "obow/numeric.hpp"

namespace fs = std::filesystem;

namespace obow {

namespace {

Image center_view(const Image& img, const CropGeometry& geometry) {
    const CropGeometry g = geometry.scaled();
    const Image base = standardize(img, g.base_size);
    const int off = (g.base_size - g.teacher_crop) / 2;
    return crop(base, {off, off, g.teacher_crop, g.teacher_crop});
}

}  // namespace

FeatureTable extract_features(const EncoderConfig& config, const ParameterSnapshot& encoder,
                              const Dataset& dataset, const CropGeometry& geometry,
                              const ExtractPolicy& policy) {
    if (dataset.size() == 0) throw std::invalid_argument("extract_features: empty dataset");
    ParameterSnapshot local = encoder;  // stats are never written in frozen modes
    const StatsMode mode = policy.use_batch_stats ? StatsMode::kBatchFrozen : StatsMode::kRunning;

    FeatureTable table;
    table.features.resize(config.pooled_dim, static_cast<Eigen::Index>(dataset.size()));
    table.labels = dataset.labels;
    table.num_classes = dataset.num_classes();
    table.provenance = std::string("center-crop") + (policy.flip_average ? "+flip-avg" : "");

    const long N = static_cast<long>(dataset.size());
    const int b = std::max(1, policy.batch_size);
    std::vector<Image> views;
    for (long start = 0; start < N; start += b) {
        const int n = static_cast<int>(std::min<long>(b, N - start));
        views.assign(static_cast<std::size_t>(n), Image{});
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i)
            views[static_cast<std::size_t>(i)] = center_view(
                load_image(dataset.paths[static_cast<std::size_t>(start + i)]), geometry);
        const int h = views[0].height, w = views[0].width;
        BatchPyramid p = forward_batch(config, local, images_to_batch(views), n, h, w, mode,
                                       nullptr, /*want_maps=*/false);
        if (policy.flip_average) {
            std::vector<Image> flipped(views.size());
#pragma omp parallel for schedule(static)
            for (int i = 0; i < n; ++i)
                flipped[static_cast<std::size_t>(i)] = hflip(views[static_cast<std::size_t>(i)]);
            BatchPyramid pf = forward_batch(config, local, images_to_batch(flipped), n, h, w, mode,
                                            nullptr, /*want_maps=*/false);
            p.pooled = 0.5 * (p.pooled + pf.pooled);
        }
        table.features.middleCols(start, n) = p.pooled;
    }
    return table;
}

void calibrate_norm_stats(const EncoderConfig& config, ParameterSnapshot& encoder,
                          const Dataset& dataset, const CropGeometry& geometry, int batches,
                          std::uint64_t seed, int batch_size) {
    if (dataset.size() == 0) throw std::invalid_argument("calibrate_norm_stats: empty dataset");
    std::vector<long> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
    Rng rng = Rng::derive(seed, "calibrate");
    rng.shuffle(order);
    long at = 0;
    for (int bi = 0; bi < batches; ++bi) {
        const int n = static_cast<int>(std::min<long>(batch_size, static_cast<long>(order.size())));
        std::vector<Image> views(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i)
            views[static_cast<std::size_t>(i)] = center_view(
                load_image(dataset.paths[static_cast<std::size_t>(
                    order[static_cast<std::size_t>((at + i) % static_cast<long>(order.size()))])]),
                geometry);
        at += n;
        forward_batch(config, encoder, images_to_batch(views), n, views[0].height, views[0].width,
                      StatsMode::kBatchUpdate, nullptr, /*want_maps=*/false);
    }
}

ProbeResult linear_probe(const FeatureTable& train, const FeatureTable& test,
                         const ProbeConfig& cfg) {
    if (train.size() == 0 || test.size() == 0)
        throw std::invalid_argument("linear_probe: empty split");
    const int classes = train.num_classes;
    std::vector<bool> seen(static_cast<std::size_t>(classes), false);
    for (int l : train.labels) {
        if (l < 0 || l >= classes) throw std::invalid_argument("linear_probe: label out of range");
        seen[static_cast<std::size_t>(l)] = true;
    }
    for (int c = 0; c < classes; ++c)
        if (!seen[static_cast<std::size_t>(c)])
            throw std::invalid_argument("linear_probe: class " + std::to_string(c) +
                                        " absent from the training split");

    const Eigen::Index dim = train.features.rows();
    const long N = train.size();
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(classes, dim);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(classes);
    Eigen::MatrixXd mW = Eigen::MatrixXd::Zero(classes, dim);
    Eigen::VectorXd mb = Eigen::VectorXd::Zero(classes);

    std::vector<long> order(static_cast<std::size_t>(N));
    for (long i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = Rng::derive(cfg.seed, "probe.order");

    double lr = cfg.lr;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && cfg.decay_every > 0 && epoch % cfg.decay_every == 0) lr *= cfg.lr_decay;
        rng.shuffle(order);
        for (long start = 0; start < N; start += cfg.batch_size) {
            const int n = static_cast<int>(std::min<long>(cfg.batch_size, N - start));
            Eigen::MatrixXd x(dim, n);
            std::vector<int> ys(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                const long idx = order[static_cast<std::size_t>(start + i)];
                x.col(i) = train.features.col(idx);
                ys[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(idx)];
            }
            Eigen::MatrixXd logits = (W * x).colwise() + b;
            Eigen::MatrixXd dlogits(classes, n);
            for (int i = 0; i < n; ++i) {
                Eigen::VectorXd p = stable_softmax(logits.col(i));
                p[ys[static_cast<std::size_t>(i)]] -= 1.0;
                dlogits.col(i) = p / static_cast<double>(n);
            }
            Eigen::MatrixXd gW = dlogits * x.transpose() + cfg.weight_decay * W;
            Eigen::VectorXd gb = dlogits.rowwise().sum();
            mW = cfg.momentum * mW + gW;
            mb = cfg.momentum * mb + gb;
            W -= lr * mW;
            b -= lr * mb;
        }
    }

    long correct = 0;
    for (long i = 0; i < test.size(); ++i) {
        Eigen::VectorXd logits = W * test.features.col(i) + b;
        Eigen::Index arg;
        logits.maxCoeff(&arg);
        if (static_cast<int>(arg) == test.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    ProbeResult res;
    res.top1 = static_cast<double>(correct) / static_cast<double>(test.size());
    res.weight = std::move(W);
    res.bias = std::move(b);
    return res;
}

FewshotResult fewshot_eval(const FeatureTable& table, const EpisodeSpec& spec) {
    if (spec.n_way < 2 || spec.k_shot < 1 || spec.queries_per_class < 1 || spec.episodes < 1)
        throw std::invalid_argument("fewshot_eval: bad episode spec");
    std::vector<int> pool = spec.class_pool;
    if (pool.empty())
        for (int c = 0; c < table.num_classes; ++c) pool.push_back(c);
    if (static_cast<int>(pool.size()) < spec.n_way)
        throw std::invalid_argument("fewshot_eval: class pool smaller than n_way");

    std::vector<std::vector<long>> by_class(static_cast<std::size_t>(table.num_classes));
    for (long i = 0; i < table.size(); ++i)
        by_class[static_cast<std::size_t>(table.labels[static_cast<std::size_t>(i)])].push_back(i);
    const int need = spec.k_shot + spec.queries_per_class;
    for (int c : pool)
        if (static_cast<int>(by_class[static_cast<std::size_t>(c)].size()) < need)
            throw std::invalid_argument("fewshot_eval: class " + std::to_string(c) +
                                        " has fewer than k_shot + queries samples");

    std::vector<double> episode_acc(static_cast<std::size_t>(spec.episodes));
    for (int e = 0; e < spec.episodes; ++e) {
        Rng rng = Rng::derive(spec.seed, "episode", static_cast<std::uint64_t>(e));
        const auto chosen = rng.sample_without_replacement(pool.size(),
                                                           static_cast<std::size_t>(spec.n_way));
        Eigen::MatrixXd prototypes(table.features.rows(), spec.n_way);
        std::vector<std::vector<long>> queries(static_cast<std::size_t>(spec.n_way));
        for (int w = 0; w < spec.n_way; ++w) {
            const int cls = pool[chosen[static_cast<std::size_t>(w)]];
            const auto& members = by_class[static_cast<std::size_t>(cls)];
            const auto picks = rng.sample_without_replacement(members.size(),
                                                              static_cast<std::size_t>(need));
            Eigen::VectorXd proto = Eigen::VectorXd::Zero(table.features.rows());
            for (int s = 0; s < spec.k_shot; ++s)
                proto += table.features.col(members[picks[static_cast<std::size_t>(s)]]);
            prototypes.col(w) = proto / static_cast<double>(spec.k_shot);
            for (int q = 0; q < spec.queries_per_class; ++q)
                queries[static_cast<std::size_t>(w)].push_back(
                    members[picks[static_cast<std::size_t>(spec.k_shot + q)]]);
        }
        Eigen::VectorXd proto_norm(spec.n_way);
        for (int w = 0; w < spec.n_way; ++w)
            proto_norm[w] = std::max(prototypes.col(w).norm(), 1e-12);

        long correct = 0, total = 0;
        for (int w = 0; w < spec.n_way; ++w) {
            for (long qi : queries[static_cast<std::size_t>(w)]) {
                const Eigen::VectorXd q = table.features.col(qi);
                const double qn = std::max(q.norm(), 1e-12);
                int best = 0;
                double best_sim = -2.0;
                for (int cand = 0; cand < spec.n_way; ++cand) {
                    const double sim = prototypes.col(cand).dot(q) / (proto_norm[cand] * qn);
                    if (sim > best_sim) {  // strict: ties keep the lowest index
                        best_sim = sim;
                        best = cand;
                    }
                }
                if (best == w) ++correct;
                ++total;
            }
        }
        episode_acc[static_cast<std::size_t>(e)] =
            static_cast<double>(correct) / static_cast<double>(total);
    }
    FewshotResult res;
    double mean = 0.0;
    for (double a : episode_acc) mean += a;
    mean /= static_cast<double>(spec.episodes);
    double var = 0.0;
    for (double a : episode_acc) var += (a - mean) * (a - mean);
    res.mean_accuracy = mean;
    res.std_error = spec.episodes > 1
                        ? std::sqrt(var / static_cast<double>(spec.episodes - 1)) /
                              std::sqrt(static_cast<double>(spec.episodes))
                        : 0.0;
    return res;
}

Rect receptive_field(const EncoderConfig& config, Level level, int input_side, int y, int x) {
    const int stages = level == Level::kLast ? config.num_stages() : config.num_stages() - 1;
    // Each 3x3/stride-2/pad-1 stage maps an output interval [a,b] to the
    // input interval [2a-1, 2b+1].
    long y0 = y, y1 = y, x0 = x, x1 = x;
    for (int s = 0; s < stages; ++s) {
        y0 = 2 * y0 - 1;
        y1 = 2 * y1 + 1;
        x0 = 2 * x0 - 1;
        x1 = 2 * x1 + 1;
    }
    Rect r;
    r.y = static_cast<int>(std::clamp<long>(y0, 0, input_side - 1));
    r.x = static_cast<int>(std::clamp<long>(x0, 0, input_side - 1));
    r.h = static_cast<int>(std::clamp<long>(y1, 0, input_side - 1)) - r.y + 1;
    r.w = static_cast<int>(std::clamp<long>(x1, 0, input_side - 1)) - r.x + 1;
    return r;
}

std::vector<std::vector<WordMatch>> inspect_words(const EncoderConfig& config,
                                                  const ParameterSnapshot& teacher,
                                                  const WordVocabulary& vocab,
                                                  const Dataset& dataset,
                                                  const CropGeometry& geometry,
                                                  const InspectConfig& inspect) {
    if (inspect.top_k < 1) throw std::invalid_argument("inspect_words: top_k must be >= 1");
    if (inspect.words.empty()) throw std::invalid_argument("inspect_words: no words requested");
    for (int wi : inspect.words)
        if (wi < 0 || wi >= vocab.size())
            throw std::invalid_argument("inspect_words: word index out of range");

    ParameterSnapshot local = teacher;
    const Eigen::MatrixXd words = vocab.as_matrix();
    const CropGeometry g = geometry.scaled();

    std::vector<std::vector<WordMatch>> matches(inspect.words.size());
    long total_locations = 0;
    for (long i = 0; i < static_cast<long>(dataset.size()); ++i) {
        const Image view = center_view(load_image(dataset.paths[static_cast<std::size_t>(i)]), g);
        FeaturePyramid p = teacher_forward(config, local, view, StatsMode::kRunning);
        const auto& map = inspect.level == Level::kLast ? p.map_last : p.map_penult;
        const int h = inspect.level == Level::kLast ? p.last_h : p.penult_h;
        const int w = inspect.level == Level::kLast ? p.last_w : p.penult_w;
        AssignmentCodes codes = soft_assign_words(map, h, w, words, inspect.delta,
                                                  /*edge_exclude=*/false);
        total_locations += static_cast<long>(codes.locations.size());
        for (std::size_t wi = 0; wi < inspect.words.size(); ++wi) {
            const int word = inspect.words[wi];
            for (Eigen::Index r = 0; r < codes.codes.rows(); ++r) {
                const double score = codes.codes(r, word);
                auto& heap = matches[wi];
                if (static_cast<int>(heap.size()) < inspect.top_k ||
                    score > heap.back().score) {
                    const Eigen::Index loc = codes.locations[static_cast<std::size_t>(r)];
                    WordMatch m;
                    m.image = i;
                    m.score = score;
                    m.rect = receptive_field(config, inspect.level, view.height,
                                             static_cast<int>(loc) / w, static_cast<int>(loc) % w);
                    heap.push_back(m);
                    std::sort(heap.begin(), heap.end(),
                              [](const WordMatch& a, const WordMatch& b) { return a.score > b.score; });
                    if (static_cast<int>(heap.size()) > inspect.top_k) heap.pop_back();
                }
            }
        }
    }
    if (total_locations < inspect.top_k)
        throw std::invalid_argument("inspect_words: dataset smaller than top_k locations");

    if (!inspect.out_dir.empty()) {
        fs::create_directories(inspect.out_dir);
        const int cell = 64;
        for (std::size_t wi = 0; wi < matches.size(); ++wi) {
            const auto& ms = matches[wi];
            Image grid(3, cell, cell * static_cast<int>(ms.size()));
            for (std::size_t m = 0; m < ms.size(); ++m) {
                const Image view = center_view(
                    load_image(dataset.paths[static_cast<std::size_t>(ms[m].image)]), g);
                const Image patch = resize_bilinear(crop(view, ms[m].rect), cell, cell);
                for (int c = 0; c < 3; ++c)
                    for (int y = 0; y < cell; ++y)
                        for (int x = 0; x < cell; ++x)
                            grid.at(c, y, static_cast<int>(m) * cell + x) = patch.at(c, y, x);
            }
            save_image((fs::path(inspect.out_dir) /
                        ("word_" + std::to_string(inspect.words[wi]) + ".png"))
                           .string(),
                       grid);
        }
    }
    return matches;
}

}  // namespace obow
