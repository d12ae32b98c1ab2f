#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "obow/image.hpp"

namespace obow {

// Feature levels the pipeline consumes: the final stage output and the one
// before it (finer resolution, fewer channels).
enum class Level { kLast, kPenultimate };

inline const char* level_name(Level l) {
    return l == Level::kLast ? "last" : "penult";
}

// How normalization statistics are resolved during a forward pass.
//   kBatchUpdate:   batch statistics, running buffers of the owning snapshot
//                   are advanced (training behavior).
//   kBatchFrozen:   batch statistics, no buffer writes (pure function).
//   kRunning:       stored running statistics (evaluation behavior).
//   kRunningUpdate: normalize with the stored running statistics, then
//                   advance them with the batch statistics (the alternative
//                   teacher normalization mode).
enum class StatsMode { kBatchUpdate, kBatchFrozen, kRunning, kRunningUpdate };

struct NormSpec {
    double momentum = 0.1;  // running <- (1-m)*running + m*batch
    double eps = 1e-5;
};

// Stage-wise 3x3/stride-2/pad-1 conv encoder: conv -> batchnorm -> relu per
// stage. Two or more stages are required so the last and penultimate feature
// maps are distinct.
struct EncoderConfig {
    int input_channels = 3;
    std::vector<int> stage_widths = {32, 64, 128, 256};
    int pooled_dim = 256;
    NormSpec normalization;

    void validate() const;

    int num_stages() const { return static_cast<int>(stage_widths.size()); }
    int total_stride() const { return 1 << num_stages(); }
    int level_channels(Level l) const {
        return l == Level::kLast ? stage_widths.back()
                                 : stage_widths[stage_widths.size() - 2];
    }

    static int conv_out_size(int n) { return (n - 1) / 2 + 1; }
    // Spatial side after `stages` applications of the stride-2 conv.
    int side_after(int input_side, int stages) const;
    // Smallest input side for which the penultimate map is strictly larger
    // than the last map.
    int min_student_side() const;
    // Smallest input side for which the last map is at least 3x3 (so an
    // interior remains after edge exclusion).
    int min_teacher_side() const;
};

struct NamedArray {
    std::string name;
    int rows = 0;
    int cols = 1;  // 1 for plain vectors
    Eigen::VectorXd data;

    Eigen::Map<Eigen::MatrixXd> matrix() {
        return {data.data(), rows, cols};
    }
    Eigen::Map<const Eigen::MatrixXd> matrix() const {
        return {data.data(), rows, cols};
    }
};

// Learnable parameters plus separately held normalization running statistics.
// Teacher and student snapshots always agree in names, shapes and ordering;
// EMA mixes `params` only and never touches `norm_stats`.
struct ParameterSnapshot {
    std::vector<NamedArray> params;
    std::vector<NamedArray> norm_stats;

    NamedArray& param(const std::string& name);
    const NamedArray& param(const std::string& name) const;
    NamedArray& stat(const std::string& name);
    const NamedArray& stat(const std::string& name) const;
    bool same_structure(const ParameterSnapshot& other) const;
};

// Per-image feature maps of the two terminal levels plus the pooled vector.
// Map storage is (channels x h*w); column u = y*w + x holds the feature
// vector at spatial location u.
struct FeaturePyramid {
    Eigen::MatrixXd map_last;
    int last_h = 0, last_w = 0;
    Eigen::MatrixXd map_penult;
    int penult_h = 0, penult_w = 0;
    Eigen::VectorXd pooled;
};

// Batch activations: (channels x n*h*w), column ((i*h)+y)*w + x.
struct BatchMaps {
    Eigen::MatrixXd act;
    int n = 0, h = 0, w = 0;

    Eigen::MatrixXd image_slice(int i) const {
        return act.middleCols(static_cast<Eigen::Index>(i) * h * w, h * w);
    }
};

struct BatchPyramid {
    BatchMaps penult;
    BatchMaps last;
    Eigen::MatrixXd pooled;  // (c x n)
    int n = 0;
};

// Intermediate state kept by a forward pass so a backward pass can follow.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> stage_inputs;  // [0]=batch input, [s+1]=stage s output
    std::vector<Eigen::MatrixXd> xhat;          // normalized conv outputs
    std::vector<Eigen::VectorXd> invstd;
    std::vector<std::pair<int, int>> sizes;     // (h, w) per stage input, plus final
    int n = 0;
};

// Accumulating name -> flat gradient store; ordered so that optimizer
// traversal is deterministic.
struct Gradients {
    std::map<std::string, Eigen::VectorXd> by_name;

    Eigen::VectorXd& accumulator(const std::string& name, Eigen::Index size);
    const Eigen::VectorXd* find(const std::string& name) const;
};

struct ParamRef {
    std::string name;
    double* data;
    Eigen::Index size;
};

// Teacher is constructed as an exact copy of the student; normalization
// statistics are initialized independently for each network.
std::pair<ParameterSnapshot, ParameterSnapshot>
build_encoder_pair(const EncoderConfig& config, std::uint64_t seed);

ParameterSnapshot make_encoder(const EncoderConfig& config, std::uint64_t seed);

Eigen::MatrixXd images_to_batch(const std::vector<Image>& images);

BatchPyramid forward_batch(const EncoderConfig& config, ParameterSnapshot& snapshot,
                           const Eigen::MatrixXd& input, int n, int h, int w,
                           StatsMode mode, ForwardCache* cache = nullptr,
                           bool want_maps = true);

FeaturePyramid teacher_forward(const EncoderConfig& config, ParameterSnapshot& teacher,
                               const Image& image,
                               StatsMode mode = StatsMode::kBatchUpdate);

FeaturePyramid student_forward(const EncoderConfig& config, ParameterSnapshot& student,
                               const Image& view,
                               StatsMode mode = StatsMode::kBatchUpdate);

// Backpropagates d(loss)/d(pooled) of shape (c x n) through the encoder,
// accumulating parameter gradients under `prefix`.
void encoder_backward(const EncoderConfig& config, const ParameterSnapshot& snapshot,
                      const ForwardCache& cache, const Eigen::MatrixXd& dpooled,
                      const std::string& prefix, Gradients& grads);

// theta_T <- alpha*theta_T + (1-alpha)*theta_S over learnable parameters.
// alpha=1 and alpha=0 are exact no-op / copy.
void ema_update(ParameterSnapshot& teacher, const ParameterSnapshot& student, double alpha);

// Cosine annealing of the teacher momentum from alpha0 at step 0 to 1 at
// total_steps.
double momentum_schedule(long step, long total_steps, double alpha0);

std::vector<ParamRef> collect_params(ParameterSnapshot& snapshot, const std::string& prefix);

}  // namespace obow
