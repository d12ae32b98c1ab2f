#include "obow/encoder.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "obow/rng.hpp"

namespace obow {

namespace {

constexpr int kKernel = 3;
constexpr int kStride = 2;
constexpr int kPad = 1;

std::string stage_name(int s, const char* leaf) {
    std::ostringstream os;
    os << "stage" << s << "." << leaf;
    return os.str();
}

// cols layout: row = koff*cin + ci with koff = ky*3 + kx; one column per
// output location, image-major then row-major spatial.
Eigen::MatrixXd im2col(const Eigen::MatrixXd& in, int n, int h, int w) {
    const int cin = static_cast<int>(in.rows());
    const int oh = EncoderConfig::conv_out_size(h);
    const int ow = EncoderConfig::conv_out_size(w);
    Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cin) * kKernel * kKernel,
                                                 static_cast<Eigen::Index>(n) * oh * ow);
    for (int i = 0; i < n; ++i) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = (static_cast<Eigen::Index>(i) * oh + oy) * ow + ox;
                for (int ky = 0; ky < kKernel; ++ky) {
                    const int iy = kStride * oy - kPad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kKernel; ++kx) {
                        const int ix = kStride * ox - kPad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const Eigen::Index incol = (static_cast<Eigen::Index>(i) * h + iy) * w + ix;
                        cols.col(col).segment(static_cast<Eigen::Index>(ky * kKernel + kx) * cin, cin) =
                            in.col(incol);
                    }
                }
            }
        }
    }
    return cols;
}

void col2im_add(const Eigen::MatrixXd& dcols, int n, int h, int w, Eigen::MatrixXd& din) {
    const int cin = static_cast<int>(din.rows());
    const int oh = EncoderConfig::conv_out_size(h);
    const int ow = EncoderConfig::conv_out_size(w);
    for (int i = 0; i < n; ++i) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = (static_cast<Eigen::Index>(i) * oh + oy) * ow + ox;
                for (int ky = 0; ky < kKernel; ++ky) {
                    const int iy = kStride * oy - kPad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kKernel; ++kx) {
                        const int ix = kStride * ox - kPad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const Eigen::Index incol = (static_cast<Eigen::Index>(i) * h + iy) * w + ix;
                        din.col(incol) +=
                            dcols.col(col).segment(static_cast<Eigen::Index>(ky * kKernel + kx) * cin, cin);
                    }
                }
            }
        }
    }
}

NamedArray make_array(std::string name, int rows, int cols) {
    NamedArray a;
    a.name = std::move(name);
    a.rows = rows;
    a.cols = cols;
    a.data = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows) * cols);
    return a;
}

}  // namespace

void EncoderConfig::validate() const {
    if (input_channels <= 0)
        throw std::invalid_argument("EncoderConfig: input_channels must be positive");
    if (stage_widths.size() < 2)
        throw std::invalid_argument(
            "EncoderConfig: at least two downsampling stages are required so the "
            "last and penultimate levels are distinct");
    for (int w : stage_widths)
        if (w <= 0) throw std::invalid_argument("EncoderConfig: stage widths must be positive");
    if (pooled_dim != stage_widths.back())
        throw std::invalid_argument(
            "EncoderConfig: pooled_dim must equal the final stage width");
    if (normalization.eps <= 0.0 || normalization.momentum < 0.0 || normalization.momentum > 1.0)
        throw std::invalid_argument("EncoderConfig: bad normalization spec");
}

int EncoderConfig::side_after(int input_side, int stages) const {
    int s = input_side;
    for (int i = 0; i < stages; ++i) s = conv_out_size(s);
    return s;
}

int EncoderConfig::min_student_side() const {
    int t = 2;  // penultimate side >= 2 makes it strictly larger than the last
    for (int i = 0; i < num_stages() - 1; ++i) t = 2 * t - 1;
    return t;
}

int EncoderConfig::min_teacher_side() const {
    int t = 3;
    for (int i = 0; i < num_stages(); ++i) t = 2 * t - 1;
    return t;
}

NamedArray& ParameterSnapshot::param(const std::string& name) {
    for (auto& a : params)
        if (a.name == name) return a;
    throw std::out_of_range("ParameterSnapshot: no parameter " + name);
}

const NamedArray& ParameterSnapshot::param(const std::string& name) const {
    for (const auto& a : params)
        if (a.name == name) return a;
    throw std::out_of_range("ParameterSnapshot: no parameter " + name);
}

NamedArray& ParameterSnapshot::stat(const std::string& name) {
    for (auto& a : norm_stats)
        if (a.name == name) return a;
    throw std::out_of_range("ParameterSnapshot: no statistic " + name);
}

const NamedArray& ParameterSnapshot::stat(const std::string& name) const {
    for (const auto& a : norm_stats)
        if (a.name == name) return a;
    throw std::out_of_range("ParameterSnapshot: no statistic " + name);
}

bool ParameterSnapshot::same_structure(const ParameterSnapshot& other) const {
    if (params.size() != other.params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != other.params[i].name || params[i].rows != other.params[i].rows ||
            params[i].cols != other.params[i].cols)
            return false;
    }
    return true;
}

Eigen::VectorXd& Gradients::accumulator(const std::string& name, Eigen::Index size) {
    auto it = by_name.find(name);
    if (it == by_name.end())
        it = by_name.emplace(name, Eigen::VectorXd::Zero(size)).first;
    return it->second;
}

const Eigen::VectorXd* Gradients::find(const std::string& name) const {
    auto it = by_name.find(name);
    return it == by_name.end() ? nullptr : &it->second;
}

ParameterSnapshot make_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    ParameterSnapshot snap;
    int cin = config.input_channels;
    for (int s = 0; s < config.num_stages(); ++s) {
        const int cout = config.stage_widths[s];
        NamedArray w = make_array(stage_name(s, "conv.weight"), cout, cin * kKernel * kKernel);
        Rng rng = Rng::derive(seed, "encoder.init", static_cast<std::uint64_t>(s));
        const double stddev = std::sqrt(2.0 / (cin * kKernel * kKernel));
        for (Eigen::Index i = 0; i < w.data.size(); ++i) w.data[i] = rng.normal(0.0, stddev);
        snap.params.push_back(std::move(w));

        NamedArray gamma = make_array(stage_name(s, "norm.gamma"), cout, 1);
        gamma.data.setOnes();
        snap.params.push_back(std::move(gamma));
        snap.params.push_back(make_array(stage_name(s, "norm.beta"), cout, 1));

        snap.norm_stats.push_back(make_array(stage_name(s, "norm.running_mean"), cout, 1));
        NamedArray var = make_array(stage_name(s, "norm.running_var"), cout, 1);
        var.data.setOnes();
        snap.norm_stats.push_back(std::move(var));
        cin = cout;
    }
    return snap;
}

std::pair<ParameterSnapshot, ParameterSnapshot>
build_encoder_pair(const EncoderConfig& config, std::uint64_t seed) {
    ParameterSnapshot student = make_encoder(config, seed);
    ParameterSnapshot teacher = student;  // exact copy of all learnables
    // Teacher statistics buffers are its own, reset to the initial values.
    for (auto& a : teacher.norm_stats) {
        if (a.name.ends_with("running_var"))
            a.data.setOnes();
        else
            a.data.setZero();
    }
    return {std::move(student), std::move(teacher)};
}

Eigen::MatrixXd images_to_batch(const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_batch: empty batch");
    const int c = images[0].channels, h = images[0].height, w = images[0].width;
    Eigen::MatrixXd out(c, static_cast<Eigen::Index>(images.size()) * h * w);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Image& img = images[i];
        if (img.channels != c || img.height != h || img.width != w)
            throw std::invalid_argument("images_to_batch: mixed image sizes in one batch");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index col = (static_cast<Eigen::Index>(i) * h + y) * w + x;
                for (int ch = 0; ch < c; ++ch) out(ch, col) = img.at(ch, y, x);
            }
    }
    return out;
}

BatchPyramid forward_batch(const EncoderConfig& config, ParameterSnapshot& snapshot,
                           const Eigen::MatrixXd& input, int n, int h, int w,
                           StatsMode mode, ForwardCache* cache, bool want_maps) {
    config.validate();
    if (input.rows() != config.input_channels ||
        input.cols() != static_cast<Eigen::Index>(n) * h * w)
        throw std::invalid_argument("forward_batch: input shape mismatch");

    const int stages = config.num_stages();
    if (cache) {
        cache->stage_inputs.clear();
        cache->xhat.clear();
        cache->invstd.clear();
        cache->sizes.clear();
        cache->n = n;
        cache->stage_inputs.reserve(stages + 1);
        cache->xhat.reserve(stages);
        cache->invstd.reserve(stages);
    }

    Eigen::MatrixXd act = input;
    int ch = h, cw = w;
    BatchPyramid pyr;
    pyr.n = n;
    const NormSpec& ns = config.normalization;

    for (int s = 0; s < stages; ++s) {
        if (cache) {
            cache->stage_inputs.push_back(act);
            cache->sizes.emplace_back(ch, cw);
        }
        const Eigen::MatrixXd cols = im2col(act, n, ch, cw);
        const int oh = EncoderConfig::conv_out_size(ch), ow = EncoderConfig::conv_out_size(cw);
        Eigen::MatrixXd z;
        z.noalias() = snapshot.param(stage_name(s, "conv.weight")).matrix() * cols;

        Eigen::VectorXd mean, var;
        if (mode == StatsMode::kRunning || mode == StatsMode::kRunningUpdate) {
            mean = snapshot.stat(stage_name(s, "norm.running_mean")).data;
            var = snapshot.stat(stage_name(s, "norm.running_var")).data;
        } else {
            mean = z.rowwise().mean();
            var = (z.colwise() - mean).array().square().rowwise().mean();
        }
        if (mode == StatsMode::kBatchUpdate || mode == StatsMode::kRunningUpdate) {
            Eigen::VectorXd bmean = mean, bvar = var;
            if (mode == StatsMode::kRunningUpdate) {
                bmean = z.rowwise().mean();
                bvar = (z.colwise() - bmean).array().square().rowwise().mean();
            }
            auto& rm = snapshot.stat(stage_name(s, "norm.running_mean")).data;
            auto& rv = snapshot.stat(stage_name(s, "norm.running_var")).data;
            rm = (1.0 - ns.momentum) * rm + ns.momentum * bmean;
            rv = (1.0 - ns.momentum) * rv + ns.momentum * bvar;
        }
        Eigen::VectorXd invstd = (var.array() + ns.eps).rsqrt();
        Eigen::MatrixXd xhat = ((z.colwise() - mean).array().colwise() * invstd.array()).matrix();
        if (cache) {
            cache->xhat.push_back(xhat);
            cache->invstd.push_back(std::move(invstd));
        }
        const auto& gamma = snapshot.param(stage_name(s, "norm.gamma")).data;
        const auto& beta = snapshot.param(stage_name(s, "norm.beta")).data;
        act = ((xhat.array().colwise() * gamma.array()).colwise() + beta.array()).cwiseMax(0.0).matrix();
        ch = oh;
        cw = ow;

        if (s == stages - 2 && want_maps) {
            pyr.penult.act = act;
            pyr.penult.n = n;
            pyr.penult.h = ch;
            pyr.penult.w = cw;
        }
    }
    if (cache) {
        cache->stage_inputs.push_back(act);
        cache->sizes.emplace_back(ch, cw);
    }
    if (want_maps) {
        pyr.last.act = act;
        pyr.last.n = n;
        pyr.last.h = ch;
        pyr.last.w = cw;
    }
    // Global average pooling over each image's spatial locations.
    const Eigen::Index hw = static_cast<Eigen::Index>(ch) * cw;
    pyr.pooled.resize(config.pooled_dim, n);
    for (int i = 0; i < n; ++i)
        pyr.pooled.col(i) = act.middleCols(i * hw, hw).rowwise().mean();
    if (!want_maps) {
        pyr.last.n = n;
        pyr.last.h = ch;
        pyr.last.w = cw;
    }
    return pyr;
}

namespace {

FeaturePyramid single_image_pyramid(const EncoderConfig& config, ParameterSnapshot& snapshot,
                                    const Image& image, StatsMode mode) {
    BatchPyramid bp = forward_batch(config, snapshot, images_to_batch({image}), 1,
                                    image.height, image.width, mode);
    FeaturePyramid fp;
    fp.map_last = std::move(bp.last.act);
    fp.last_h = bp.last.h;
    fp.last_w = bp.last.w;
    fp.map_penult = std::move(bp.penult.act);
    fp.penult_h = bp.penult.h;
    fp.penult_w = bp.penult.w;
    fp.pooled = bp.pooled.col(0);
    return fp;
}

}  // namespace

FeaturePyramid teacher_forward(const EncoderConfig& config, ParameterSnapshot& teacher,
                               const Image& image, StatsMode mode) {
    config.validate();
    if (image.height < config.min_teacher_side() || image.width < config.min_teacher_side()) {
        std::ostringstream os;
        os << "teacher_forward: image " << image.height << "x" << image.width
           << " too small; need >= " << config.min_teacher_side()
           << " per side so the last map is at least 3x3";
        throw std::invalid_argument(os.str());
    }
    return single_image_pyramid(config, teacher, image, mode);
}

FeaturePyramid student_forward(const EncoderConfig& config, ParameterSnapshot& student,
                               const Image& view, StatsMode mode) {
    config.validate();
    if (view.height < config.min_student_side() || view.width < config.min_student_side()) {
        std::ostringstream os;
        os << "student_forward: view " << view.height << "x" << view.width
           << " too small; need >= " << config.min_student_side() << " per side";
        throw std::invalid_argument(os.str());
    }
    return single_image_pyramid(config, student, view, mode);
}

void encoder_backward(const EncoderConfig& config, const ParameterSnapshot& snapshot,
                      const ForwardCache& cache, const Eigen::MatrixXd& dpooled,
                      const std::string& prefix, Gradients& grads) {
    const int stages = config.num_stages();
    if (static_cast<int>(cache.stage_inputs.size()) != stages + 1)
        throw std::invalid_argument("encoder_backward: cache does not match config");
    const int n = cache.n;

    // GAP backward: every location of an image receives dpooled / (h*w).
    const auto [lh, lw] = cache.sizes.back();
    const Eigen::Index hw = static_cast<Eigen::Index>(lh) * lw;
    Eigen::MatrixXd dact(dpooled.rows(), static_cast<Eigen::Index>(n) * hw);
    for (int i = 0; i < n; ++i)
        dact.middleCols(i * hw, hw).colwise() = (dpooled.col(i) / static_cast<double>(hw)).eval();

    for (int s = stages - 1; s >= 0; --s) {
        const auto& out = cache.stage_inputs[s + 1];  // post-relu output of stage s
        // ReLU backward.
        dact = (out.array() > 0.0).select(dact, 0.0);

        // Batchnorm backward (batch statistics).
        const auto& gamma = snapshot.param(stage_name(s, "norm.gamma")).data;
        const auto& xhat = cache.xhat[s];
        const auto& invstd = cache.invstd[s];
        const double m = static_cast<double>(dact.cols());

        Eigen::VectorXd dbeta = dact.rowwise().sum();
        Eigen::VectorXd dgamma = (dact.array() * xhat.array()).rowwise().sum();
        grads.accumulator(prefix + stage_name(s, "norm.beta"), dbeta.size()) += dbeta;
        grads.accumulator(prefix + stage_name(s, "norm.gamma"), dgamma.size()) += dgamma;

        Eigen::ArrayXd coef = gamma.array() * invstd.array() / m;
        Eigen::MatrixXd dz =
            ((dact.array() * m).colwise() - dbeta.array()).matrix();
        dz.array() -= xhat.array().colwise() * dgamma.array();
        dz.array().colwise() *= coef;

        // Conv backward.
        const auto& in = cache.stage_inputs[s];
        const auto [ih, iw] = cache.sizes[s];
        const Eigen::MatrixXd cols = im2col(in, n, ih, iw);
        const auto& wname = stage_name(s, "conv.weight");
        const auto& weight = snapshot.param(wname);
        Eigen::VectorXd& dw = grads.accumulator(prefix + wname, weight.data.size());
        Eigen::Map<Eigen::MatrixXd> dwm(dw.data(), weight.rows, weight.cols);
        dwm.noalias() += dz * cols.transpose();

        if (s > 0) {
            Eigen::MatrixXd dcols;
            dcols.noalias() = weight.matrix().transpose() * dz;
            Eigen::MatrixXd din = Eigen::MatrixXd::Zero(in.rows(), in.cols());
            col2im_add(dcols, n, ih, iw, din);
            dact = std::move(din);
        }
    }
}

void ema_update(ParameterSnapshot& teacher, const ParameterSnapshot& student, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
    if (!teacher.same_structure(student))
        throw std::invalid_argument("ema_update: snapshots differ in structure");
    if (alpha == 1.0) return;
    for (std::size_t i = 0; i < teacher.params.size(); ++i) {
        auto& t = teacher.params[i].data;
        const auto& s = student.params[i].data;
        if (alpha == 0.0)
            t = s;
        else
            t = alpha * t + (1.0 - alpha) * s;
    }
}

double momentum_schedule(long step, long total_steps, double alpha0) {
    if (total_steps <= 0) throw std::invalid_argument("momentum_schedule: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("momentum_schedule: step out of [0, total_steps]");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 - (1.0 - alpha0) * (1.0 + std::cos(M_PI * t)) / 2.0;
}

std::vector<ParamRef> collect_params(ParameterSnapshot& snapshot, const std::string& prefix) {
    std::vector<ParamRef> refs;
    refs.reserve(snapshot.params.size());
    for (auto& a : snapshot.params)
        refs.push_back({prefix + a.name, a.data.data(), a.data.size()});
    return refs;
}

}  // namespace obow
