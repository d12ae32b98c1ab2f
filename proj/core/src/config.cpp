#include "obow/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace obow {

using nlohmann::json;

void TrainConfig::validate() const {
    encoder.validate();
    geometry.validate();
    if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must be >= 2");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (lr_peak <= 0.0) throw std::invalid_argument("config: lr_peak must be positive");
    if (lr_floor < 0.0 || lr_floor > lr_peak)
        throw std::invalid_argument("config: lr_floor must lie in [0, lr_peak]");
    if (warmup_steps < 0) throw std::invalid_argument("config: negative warmup_steps");
    if (delta_base <= 0.0) throw std::invalid_argument("config: delta_base must be positive");
    if (kappa <= 0.0) throw std::invalid_argument("config: kappa must be positive");
    if (temperature_momentum < 0.0 || temperature_momentum >= 1.0)
        throw std::invalid_argument("config: temperature_momentum must lie in [0, 1)");
    if (kmeans_gamma < 0.0 || kmeans_gamma >= 1.0)
        throw std::invalid_argument("config: kmeans_gamma must lie in [0, 1)");
    if (alpha0 < 0.0 || alpha0 > 1.0) throw std::invalid_argument("config: alpha0 must lie in [0, 1]");
    if (sgd_momentum < 0.0 || sgd_momentum >= 1.0)
        throw std::invalid_argument("config: sgd_momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("config: negative weight_decay");
    if (checkpoint_interval < 1) throw std::invalid_argument("config: checkpoint_interval must be >= 1");
    if (stale_steps < 1) throw std::invalid_argument("config: stale_steps must be >= 1");
    sinkhorn.validate();
    // The teacher crop must leave an interior after edge exclusion.
    const CropGeometry g = geometry.scaled();
    if (g.teacher_crop < encoder.min_teacher_side()) {
        std::ostringstream os;
        os << "config: teacher crop " << g.teacher_crop << " too small for the encoder (needs >= "
           << encoder.min_teacher_side() << ")";
        throw std::invalid_argument(os.str());
    }
    if (g.num_primary == 0 && g.num_patches == 0 && !student_includes_teacher_view)
        throw std::invalid_argument("config: no student views configured");
    std::vector<int> view_sides;
    if (g.num_primary > 0) view_sides.push_back(g.primary_crop);
    if (g.num_patches > 0) view_sides.push_back(g.patch_size);
    if (student_includes_teacher_view) view_sides.push_back(g.teacher_crop);
    for (int side : view_sides) {
        if (side < encoder.min_student_side()) {
            std::ostringstream os;
            os << "config: student view side " << side << " too small for the encoder (needs >= "
               << encoder.min_student_side() << ")";
            throw std::invalid_argument(os.str());
        }
    }
}

namespace {

const char* vocab_mode_name(VocabMode m) {
    return m == VocabMode::kQueue ? "queue" : "kmeans";
}
VocabMode parse_vocab_mode(const std::string& s) {
    if (s == "queue") return VocabMode::kQueue;
    if (s == "kmeans") return VocabMode::kKmeans;
    throw std::invalid_argument("config: vocab_mode must be 'queue' or 'kmeans', got '" + s + "'");
}
const char* strategy_name(SampleStrategy s) {
    switch (s) {
        case SampleStrategy::kLocal: return "local";
        case SampleStrategy::kGlobalAvg: return "global_avg";
        default: return "local_avg_3x3";
    }
}
SampleStrategy parse_strategy(const std::string& s) {
    if (s == "local") return SampleStrategy::kLocal;
    if (s == "global_avg") return SampleStrategy::kGlobalAvg;
    if (s == "local_avg_3x3") return SampleStrategy::kLocalAvg3x3;
    throw std::invalid_argument("config: unknown word_strategy '" + s + "'");
}
const char* reduction_name(ReductionMode m) { return m == ReductionMode::kMax ? "max" : "avg"; }
ReductionMode parse_reduction(const std::string& s) {
    if (s == "max") return ReductionMode::kMax;
    if (s == "avg") return ReductionMode::kAvg;
    throw std::invalid_argument("config: reduction must be 'max' or 'avg', got '" + s + "'");
}
const char* balancing_name(KmeansBalancing b) {
    return b == KmeansBalancing::kReplaceRare ? "replace" : "sinkhorn";
}
KmeansBalancing parse_balancing(const std::string& s) {
    if (s == "replace") return KmeansBalancing::kReplaceRare;
    if (s == "sinkhorn") return KmeansBalancing::kSinkhorn;
    throw std::invalid_argument("config: kmeans_balancing must be 'replace' or 'sinkhorn'");
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) {
    json j;
    j["data_dir"] = c.data_dir;
    j["output_dir"] = c.output_dir;
    j["input_channels"] = c.encoder.input_channels;
    j["stage_widths"] = c.encoder.stage_widths;
    j["bn_momentum"] = c.encoder.normalization.momentum;
    j["bn_eps"] = c.encoder.normalization.eps;
    j["teacher_batch_stats"] = c.teacher_batch_stats;
    j["base_size"] = c.geometry.base_size;
    j["teacher_crop"] = c.geometry.teacher_crop;
    j["primary_crop"] = c.geometry.primary_crop;
    j["patch_size"] = c.geometry.patch_size;
    j["num_primary"] = c.geometry.num_primary;
    j["num_patches"] = c.geometry.num_patches;
    j["primary_area_min"] = c.geometry.primary_area_min;
    j["primary_area_max"] = c.geometry.primary_area_max;
    j["patch_area_min"] = c.geometry.patch_area_min;
    j["patch_area_max"] = c.geometry.patch_area_max;
    j["scale_factor"] = c.geometry.scale_factor;
    j["jitter_prob"] = c.photometric.jitter_prob;
    j["jitter_brightness"] = c.photometric.brightness;
    j["jitter_contrast"] = c.photometric.contrast;
    j["jitter_saturation"] = c.photometric.saturation;
    j["jitter_hue"] = c.photometric.hue;
    j["grayscale_prob"] = c.photometric.grayscale_prob;
    j["blur_prob"] = c.photometric.blur_prob;
    j["blur_sigma_min"] = c.photometric.blur_sigma_min;
    j["blur_sigma_max"] = c.photometric.blur_sigma_max;
    j["flip_prob"] = c.photometric.flip_prob;
    j["student_includes_teacher_view"] = c.student_includes_teacher_view;
    j["multi_scale"] = c.multi_scale;
    j["vocab_mode"] = vocab_mode_name(c.vocab_mode);
    j["vocab_size"] = c.vocab_size;
    j["word_strategy"] = strategy_name(c.word_strategy);
    j["kmeans_gamma"] = c.kmeans_gamma;
    j["stale_steps"] = c.stale_steps;
    j["kmeans_balancing"] = balancing_name(c.kmeans_balancing);
    j["sinkhorn_epsilon"] = c.sinkhorn.epsilon;
    j["sinkhorn_max_iters"] = c.sinkhorn.max_iters;
    j["sinkhorn_tol"] = c.sinkhorn.marginal_tol;
    j["delta_base"] = c.delta_base;
    j["temperature_momentum"] = c.temperature_momentum;
    j["dynamic_head"] = c.dynamic_head;
    j["kappa"] = c.kappa;
    j["generator_final_bias"] = c.generator_final_bias;
    j["reduction"] = reduction_name(c.reduction);
    j["edge_exclude"] = c.edge_exclude;
    j["lr_peak"] = c.lr_peak;
    j["lr_floor"] = c.lr_floor;
    j["warmup_steps"] = c.warmup_steps;
    j["sgd_momentum"] = c.sgd_momentum;
    j["weight_decay"] = c.weight_decay;
    j["alpha0"] = c.alpha0;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["checkpoint_interval"] = c.checkpoint_interval;
    j["threads"] = c.threads;
    return j.dump(2);
}

TrainConfig parse_train_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");

    TrainConfig c;
    std::set<std::string> known;
    auto take = [&](const char* key, auto& field) {
        known.insert(key);
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    auto take_str = [&](const char* key, auto parse, auto& field) {
        known.insert(key);
        if (j.contains(key)) field = parse(j.at(key).get<std::string>());
    };

    take("data_dir", c.data_dir);
    take("output_dir", c.output_dir);
    take("input_channels", c.encoder.input_channels);
    take("stage_widths", c.encoder.stage_widths);
    c.encoder.pooled_dim = c.encoder.stage_widths.empty() ? 0 : c.encoder.stage_widths.back();
    take("bn_momentum", c.encoder.normalization.momentum);
    take("bn_eps", c.encoder.normalization.eps);
    take("teacher_batch_stats", c.teacher_batch_stats);
    take("base_size", c.geometry.base_size);
    take("teacher_crop", c.geometry.teacher_crop);
    take("primary_crop", c.geometry.primary_crop);
    take("patch_size", c.geometry.patch_size);
    take("num_primary", c.geometry.num_primary);
    take("num_patches", c.geometry.num_patches);
    take("primary_area_min", c.geometry.primary_area_min);
    take("primary_area_max", c.geometry.primary_area_max);
    take("patch_area_min", c.geometry.patch_area_min);
    take("patch_area_max", c.geometry.patch_area_max);
    take("scale_factor", c.geometry.scale_factor);
    take("jitter_prob", c.photometric.jitter_prob);
    take("jitter_brightness", c.photometric.brightness);
    take("jitter_contrast", c.photometric.contrast);
    take("jitter_saturation", c.photometric.saturation);
    take("jitter_hue", c.photometric.hue);
    take("grayscale_prob", c.photometric.grayscale_prob);
    take("blur_prob", c.photometric.blur_prob);
    take("blur_sigma_min", c.photometric.blur_sigma_min);
    take("blur_sigma_max", c.photometric.blur_sigma_max);
    take("flip_prob", c.photometric.flip_prob);
    take("student_includes_teacher_view", c.student_includes_teacher_view);
    take("multi_scale", c.multi_scale);
    take_str("vocab_mode", parse_vocab_mode, c.vocab_mode);
    take("vocab_size", c.vocab_size);
    take_str("word_strategy", parse_strategy, c.word_strategy);
    take("kmeans_gamma", c.kmeans_gamma);
    take("stale_steps", c.stale_steps);
    take_str("kmeans_balancing", parse_balancing, c.kmeans_balancing);
    take("sinkhorn_epsilon", c.sinkhorn.epsilon);
    take("sinkhorn_max_iters", c.sinkhorn.max_iters);
    take("sinkhorn_tol", c.sinkhorn.marginal_tol);
    take("delta_base", c.delta_base);
    take("temperature_momentum", c.temperature_momentum);
    take("dynamic_head", c.dynamic_head);
    take("kappa", c.kappa);
    take("generator_final_bias", c.generator_final_bias);
    take_str("reduction", parse_reduction, c.reduction);
    take("edge_exclude", c.edge_exclude);
    take("lr_peak", c.lr_peak);
    take("lr_floor", c.lr_floor);
    take("warmup_steps", c.warmup_steps);
    take("sgd_momentum", c.sgd_momentum);
    take("weight_decay", c.weight_decay);
    take("alpha0", c.alpha0);
    take("epochs", c.epochs);
    take("batch_size", c.batch_size);
    take("seed", c.seed);
    take("checkpoint_interval", c.checkpoint_interval);
    take("threads", c.threads);

    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");

    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

bool structurally_compatible(const TrainConfig& a, const TrainConfig& b, std::string* why) {
    auto strip = [](const TrainConfig& c) {
        json j = json::parse(train_config_to_json(c));
        for (const char* k : {"data_dir", "output_dir", "threads", "checkpoint_interval"}) j.erase(k);
        return j;
    };
    json ja = strip(a), jb = strip(b);
    if (ja == jb) return true;
    if (why) {
        std::ostringstream os;
        for (auto it = ja.begin(); it != ja.end(); ++it)
            if (jb.at(it.key()) != it.value())
                os << it.key() << " (" << it.value().dump() << " vs " << jb.at(it.key()).dump() << ") ";
        *why = os.str();
    }
    return false;
}

}  // namespace obow
