#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "obow/augmentation.hpp"
#include "obow/config.hpp"
#include "obow/dataset.hpp"
#include "obow/encoder.hpp"
#include "obow/vocabulary.hpp"

namespace obow {

// Pooled features for a dataset: column i = feature of image i.
struct FeatureTable {
    Eigen::MatrixXd features;  // c x N
    std::vector<int> labels;
    int num_classes = 0;
    std::string provenance;  // crop / flip policy description

    long size() const { return static_cast<long>(labels.size()); }
};

struct ExtractPolicy {
    bool flip_average = false;  // average with the horizontally flipped view
    int batch_size = 128;
    // Normalization statistics mode; running averages by default (frozen
    // evaluation behavior).
    bool use_batch_stats = false;
};

// One pooled vector per image from the center teacher_crop of each image,
// encoder frozen (running statistics; no buffer writes).
FeatureTable extract_features(const EncoderConfig& config, const ParameterSnapshot& encoder,
                              const Dataset& dataset, const CropGeometry& geometry,
                              const ExtractPolicy& policy = {});

// Populates running statistics by forwarding `batches` batches in
// batch-statistics mode; used before probing untrained snapshots.
void calibrate_norm_stats(const EncoderConfig& config, ParameterSnapshot& encoder,
                          const Dataset& dataset, const CropGeometry& geometry, int batches,
                          std::uint64_t seed, int batch_size = 128);

struct ProbeConfig {
    int epochs = 50;
    double lr = 10.0;
    double lr_decay = 0.1;  // multiplier applied every decay_every epochs
    int decay_every = 15;
    double weight_decay = 2e-6;
    double momentum = 0.9;
    int batch_size = 256;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double top1 = 0.0;
    Eigen::MatrixXd weight;  // classes x c
    Eigen::VectorXd bias;
};

// Multinomial logistic regression on frozen features; returns held-out top-1
// accuracy. Deterministic under a fixed seed.
ProbeResult linear_probe(const FeatureTable& train, const FeatureTable& test,
                         const ProbeConfig& cfg);

struct EpisodeSpec {
    int n_way = 20;
    int k_shot = 1;
    int queries_per_class = 1;
    int episodes = 200;
    std::vector<int> class_pool;  // empty: all classes
    std::uint64_t seed = 0;
};

struct FewshotResult {
    double mean_accuracy = 0.0;
    double std_error = 0.0;
};

// Episodic evaluation with a cosine-similarity prototype classifier; ties
// break toward the lowest class index.
FewshotResult fewshot_eval(const FeatureTable& table, const EpisodeSpec& spec);

struct WordMatch {
    long image = 0;   // dataset index
    Rect rect;        // receptive field in the teacher-view crop
    double score = 0.0;
};

struct InspectConfig {
    std::vector<int> words;
    int top_k = 8;
    Level level = Level::kLast;
    double delta = 1.0;
    std::string out_dir;  // when set, an image grid per word is written
};

// Ranks dataset patches by soft-assignment score for the requested words.
// Receptive-field rectangles are computed analytically from the stride chain
// and clipped to the crop bounds.
std::vector<std::vector<WordMatch>> inspect_words(const EncoderConfig& config,
                                                  const ParameterSnapshot& teacher,
                                                  const WordVocabulary& vocab,
                                                  const Dataset& dataset,
                                                  const CropGeometry& geometry,
                                                  const InspectConfig& inspect);

// Receptive field of one location of the level map for a given input side.
Rect receptive_field(const EncoderConfig& config, Level level, int input_side, int y, int x);

}  // namespace obow
