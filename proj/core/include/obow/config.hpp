#pragma once

#include <cstdint>
#include <string>

#include "obow/augmentation.hpp"
#include "obow/bow_targets.hpp"
#include "obow/encoder.hpp"
#include "obow/prediction_head.hpp"
#include "obow/vocabulary.hpp"

namespace obow {

enum class KmeansBalancing { kReplaceRare, kSinkhorn };

// Full training-run configuration. Persisted as a flat key/value JSON
// document; every field has a default and unknown keys are rejected.
struct TrainConfig {
    std::string data_dir;
    std::string output_dir = "runs/obow";

    EncoderConfig encoder;
    // Teacher normalization: batch statistics (default) or running averages.
    bool teacher_batch_stats = true;

    CropGeometry geometry;
    PhotometricConfig photometric;
    bool student_includes_teacher_view = false;

    bool multi_scale = true;  // targets from both terminal levels

    VocabMode vocab_mode = VocabMode::kQueue;
    int vocab_size = 8192;
    SampleStrategy word_strategy = SampleStrategy::kLocalAvg3x3;
    double kmeans_gamma = 0.99;
    long stale_steps = 1000;
    KmeansBalancing kmeans_balancing = KmeansBalancing::kReplaceRare;
    SinkhornConfig sinkhorn;

    double delta_base = 0.1;
    double temperature_momentum = 0.99;

    bool dynamic_head = true;  // false: fixed weight-matrix ablation head
    double kappa = 5.0;
    bool generator_final_bias = false;

    ReductionMode reduction = ReductionMode::kMax;
    bool edge_exclude = true;

    double lr_peak = 0.05;
    double lr_floor = 0.0;
    long warmup_steps = 0;
    double sgd_momentum = 0.9;
    double weight_decay = 5e-4;
    double alpha0 = 0.99;

    int epochs = 30;
    int batch_size = 128;
    std::uint64_t seed = 0;
    int checkpoint_interval = 1;  // epochs between checkpoints
    int threads = 0;              // 0 = library default

    void validate() const;
    std::vector<Level> levels() const {
        return multi_scale ? std::vector<Level>{Level::kLast, Level::kPenultimate}
                           : std::vector<Level>{Level::kLast};
    }
};

TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);

// True when the fields that shape the checkpoint (architecture, vocabulary,
// head, levels) agree; run-local fields (paths, threads, intervals) may
// differ.
bool structurally_compatible(const TrainConfig& a, const TrainConfig& b, std::string* why = nullptr);

}  // namespace obow
