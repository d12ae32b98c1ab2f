#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "obow/augmentation.hpp"
#include "obow/bow_targets.hpp"
#include "obow/config.hpp"
#include "obow/dataset.hpp"
#include "obow/encoder.hpp"
#include "obow/prediction_head.hpp"
#include "obow/vocabulary.hpp"

namespace obow {

// Per-level training state: vocabulary, temperature tracker, weight
// generator, and (k-means mode) the EMA cluster accumulators.
struct LevelState {
    Level level = Level::kLast;
    WordVocabulary vocab{Level::kLast, 1};
    TemperatureTracker tracker;
    GeneratorParams generator;                  // dynamic head
    std::optional<FixedHeadParams> fixed_head;  // ablation head
    KMeansState kmeans;
};

struct TrainState {
    TrainConfig config;
    ParameterSnapshot student;
    ParameterSnapshot teacher;
    std::vector<LevelState> levels;
    std::map<std::string, Eigen::VectorXd> momentum;  // optimizer buffers by name
    long step = 0;
    int epoch = 0;  // completed epochs
    bool prefilled = false;
};

// One structured record per optimization step.
struct MetricsRecord {
    long step = 0;
    std::vector<double> level_loss;
    double mean_loss = 0.0;
    double alpha = 0.0;
    double lr = 0.0;
    std::vector<double> delta;
    std::vector<double> assign_entropy;
    std::vector<double> min_usage;
    std::vector<double> max_usage;
    std::vector<long> oldest_age;
    std::vector<std::string> level_names;

    std::string to_json() const;
};

// Cross entropy -sum_k y_T[k] * log(max(y_S[k], 1e-12)); both arguments must
// be on the simplex within 1e-5.
double bow_loss(const Eigen::VectorXd& y_s, const Eigen::VectorXd& y_t);

// Linear warmup to `peak` over warmup_steps, then cosine decay to `floor`.
double lr_schedule(long step, long total_steps, long warmup_steps, double peak, double floor);

TrainState init_train_state(const TrainConfig& config);

// Queue warm-up: teacher forwards over ceil(K / batch) batches fill each
// level's vocabulary to exactly K before any optimization. In k-means mode
// the same pass provides the initial centroids.
void prefill_vocabulary(TrainState& state, const Dataset& dataset);

struct TrainBatch {
    std::vector<ViewBundle> bundles;
    std::vector<long> image_indices;
    int epoch = 0;
};

// Builds the augmented bundle for one dataset image with the per-image rng
// stream derived from (seed, epoch, index).
ViewBundle make_train_bundle(const TrainConfig& config, const Image& image, int epoch, long index);

MetricsRecord train_step(TrainState& state, const TrainBatch& batch, long total_steps);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

struct RunOptions {
    std::string resume_path;    // checkpoint to continue from
    int stop_after_epoch = -1;  // stop once this many epochs completed (testing hook)
    std::function<void(const MetricsRecord&)> on_step;
};

struct RunResult {
    std::string final_checkpoint;
    std::string metrics_path;
    long steps_run = 0;
};

RunResult run_training(const TrainConfig& config, const Dataset& dataset,
                       const RunOptions& options = {});

}  // namespace obow
