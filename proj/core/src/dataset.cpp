#include "obow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace obow {

namespace {

bool is_image_file(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), ::tolower);
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp" || e == ".ppm";
}

}  // namespace

Dataset load_image_folder(const std::string& dir) {
    if (!fs::is_directory(dir))
        throw std::invalid_argument("load_image_folder: not a directory: " + dir);
    Dataset ds;
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cd : class_dirs) {
        const int label = static_cast<int>(ds.class_names.size());
        ds.class_names.push_back(cd.filename().string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(cd))
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ds.paths.push_back(f.string());
            ds.labels.push_back(label);
        }
    }
    if (ds.paths.empty())
        throw std::invalid_argument("load_image_folder: no images under " + dir);
    return ds;
}

Dataset load_index_file(const std::string& file) {
    std::ifstream in(file);
    if (!in) throw std::invalid_argument("load_index_file: cannot open " + file);
    const fs::path root = fs::path(file).parent_path();
    Dataset ds;
    int max_label = -1;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string path;
        int label;
        if (!(ls >> path >> label))
            throw std::invalid_argument("load_index_file: malformed line: " + line);
        fs::path p(path);
        if (p.is_relative()) p = root / p;
        ds.paths.push_back(p.string());
        ds.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    if (ds.paths.empty()) throw std::invalid_argument("load_index_file: empty index " + file);
    for (int i = 0; i <= max_label; ++i) ds.class_names.push_back("class_" + std::to_string(i));
    return ds;
}

Dataset load_dataset(const std::string& path) {
    if (fs::is_directory(path)) return load_image_folder(path);
    return load_index_file(path);
}

Image load_image(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw std::runtime_error("load_image: cannot read " + path);
    Image img(3, m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const auto& px = m.at<cv::Vec3b>(y, x);  // BGR
            img.at(0, y, x) = px[2] / 255.0;
            img.at(1, y, x) = px[1] / 255.0;
            img.at(2, y, x) = px[0] / 255.0;
        }
    return img;
}

void save_image(const std::string& path, const Image& img) {
    cv::Mat m(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto get = [&](int c) {
                double v = img.channels > c ? img.at(c, y, x) : img.at(0, y, x);
                return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            };
            m.at<cv::Vec3b>(y, x) = cv::Vec3b(get(2), get(1), get(0));
        }
    fs::create_directories(fs::path(path).parent_path());
    if (!cv::imwrite(path, m)) throw std::runtime_error("save_image: cannot write " + path);
}

namespace {

struct Palette {
    double bg0[3], bg1[3], fg[3];
};

Palette sample_palette(Rng& rng) {
    Palette p;
    auto color = [&](double* c) {
        for (int i = 0; i < 3; ++i) c[i] = rng.uniform();
    };
    auto lum = [](const double* c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; };
    color(p.bg0);
    color(p.bg1);
    // Foreground must hold some luma contrast against the mean background,
    // otherwise the structure disappears.
    const double bg = 0.5 * (lum(p.bg0) + lum(p.bg1));
    for (int tries = 0; tries < 64; ++tries) {
        color(p.fg);
        if (std::abs(lum(p.fg) - bg) > 0.25) break;
    }
    return p;
}

// mask(y, x) in [0,1]: 1 = foreground.
template <class MaskFn>
Image render(int s, const Palette& p, Rng& rng, MaskFn&& mask) {
    Image img(3, s, s);
    const double gtheta = rng.uniform(0.0, 2.0 * M_PI);
    const double gx = std::cos(gtheta), gy = std::sin(gtheta);
    const double noise = rng.uniform(0.0, 0.05);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double t = ((x - s / 2.0) * gx + (y - s / 2.0) * gy) / s + 0.5;
            t = std::clamp(t, 0.0, 1.0);
            const double m = mask(y, x);
            for (int c = 0; c < 3; ++c) {
                double bg = (1.0 - t) * p.bg0[c] + t * p.bg1[c];
                double v = (1.0 - m) * bg + m * p.fg[c];
                img.at(c, y, x) = std::clamp(v + rng.normal(0.0, noise), 0.0, 1.0);
            }
        }
    if (rng.uniform() < 0.3) img = gaussian_blur(img, rng.uniform(0.3, 0.8));
    return img;
}

// Shared scatter helper: place `count` elements at random positions.
template <class ElementFn>
Image scattered(int s, const Palette& p, Rng& rng, int count, ElementFn&& element) {
    std::vector<std::array<double, 3>> centers;
    for (int i = 0; i < count; ++i)
        centers.push_back({rng.uniform(0.1 * s, 0.9 * s), rng.uniform(0.1 * s, 0.9 * s),
                           rng.uniform(0.7, 1.3)});
    return render(s, p, rng, [&](int y, int x) {
        for (const auto& c : centers)
            if (element(y - c[0], x - c[1], c[2])) return 1.0;
        return 0.0;
    });
}

double frac(double v) { return v - std::floor(v); }

}  // namespace

Image synthetic_image(int class_id, int size, Rng& rng) {
    const int s = size;
    const double unit = s / 64.0;  // class parameters are tuned at 64 px
    Palette p = sample_palette(rng);
    switch (class_id % 10) {
        case 0: {  // parallel stripes
            const double theta = rng.uniform(0.0, M_PI);
            const double period = rng.uniform(8.0, 20.0) * unit;
            const double duty = rng.uniform(0.3, 0.6);
            const double phase = rng.uniform(0.0, 1.0);
            const double cx = std::cos(theta), cy = std::sin(theta);
            return render(s, p, rng, [&](int y, int x) {
                return frac((x * cx + y * cy) / period + phase) < duty ? 1.0 : 0.0;
            });
        }
        case 1: {  // checkerboard
            const double theta = rng.uniform(0.0, M_PI / 2);
            const double px = rng.uniform(10.0, 22.0) * unit;
            const double py = rng.uniform(10.0, 22.0) * unit;
            const double ox = rng.uniform(0.0, px), oy = rng.uniform(0.0, py);
            const double ct = std::cos(theta), st = std::sin(theta);
            return render(s, p, rng, [&](int y, int x) {
                const double u = x * ct + y * st + ox, v = -x * st + y * ct + oy;
                const long cell = static_cast<long>(std::floor(u / px)) +
                                  static_cast<long>(std::floor(v / py));
                return (cell & 1) ? 1.0 : 0.0;
            });
        }
        case 2: {  // dot lattice
            const double pitch = rng.uniform(11.0, 18.0) * unit;
            const double radius = rng.uniform(0.18, 0.32) * pitch;
            const double ox = rng.uniform(0.0, pitch), oy = rng.uniform(0.0, pitch);
            return render(s, p, rng, [&](int y, int x) {
                const double u = frac((x + ox) / pitch) - 0.5, v = frac((y + oy) / pitch) - 0.5;
                return (u * u + v * v) * pitch * pitch < radius * radius ? 1.0 : 0.0;
            });
        }
        case 3: {  // concentric rings
            const double cy = rng.uniform(0.3 * s, 0.7 * s), cx = rng.uniform(0.3 * s, 0.7 * s);
            const double period = rng.uniform(7.0, 13.0) * unit;
            const double duty = rng.uniform(0.35, 0.6);
            return render(s, p, rng, [&](int y, int x) {
                const double r = std::hypot(y - cy, x - cx);
                return frac(r / period) < duty ? 1.0 : 0.0;
            });
        }
        case 4: {  // radial spokes
            const double cy = rng.uniform(0.3 * s, 0.7 * s), cx = rng.uniform(0.3 * s, 0.7 * s);
            const int spokes = 6 + static_cast<int>(rng.uniform_int(8));
            const double duty = rng.uniform(0.35, 0.6);
            const double phase = rng.uniform(0.0, 1.0);
            return render(s, p, rng, [&](int y, int x) {
                const double a = std::atan2(y - cy, x - cx) / (2.0 * M_PI) + 0.5;
                return frac(a * spokes + phase) < duty ? 1.0 : 0.0;
            });
        }
        case 5: {  // scattered squares
            const int n = 6 + static_cast<int>(rng.uniform_int(6));
            const double half = rng.uniform(4.0, 7.0) * unit;
            return scattered(s, p, rng, n, [&](double dy, double dx, double sc) {
                return std::abs(dy) < half * sc && std::abs(dx) < half * sc;
            });
        }
        case 6: {  // scattered circles
            const int n = 6 + static_cast<int>(rng.uniform_int(6));
            const double radius = rng.uniform(4.5, 7.5) * unit;
            return scattered(s, p, rng, n, [&](double dy, double dx, double sc) {
                return dy * dy + dx * dx < radius * radius * sc * sc;
            });
        }
        case 7: {  // scattered crosses
            const int n = 5 + static_cast<int>(rng.uniform_int(5));
            const double arm = rng.uniform(5.0, 8.0) * unit;
            const double thick = rng.uniform(1.5, 2.5) * unit;
            return scattered(s, p, rng, n, [&](double dy, double dx, double sc) {
                return (std::abs(dy) < thick * sc && std::abs(dx) < arm * sc) ||
                       (std::abs(dx) < thick * sc && std::abs(dy) < arm * sc);
            });
        }
        case 8: {  // scattered triangles
            const int n = 6 + static_cast<int>(rng.uniform_int(6));
            const double side = rng.uniform(9.0, 14.0) * unit;
            return scattered(s, p, rng, n, [&](double dy, double dx, double sc) {
                const double h = side * sc;
                return dy > -h / 2 && dy < h / 2 && std::abs(dx) < (dy + h / 2) * 0.577;
            });
        }
        default: {  // wavy stripes
            const double period = rng.uniform(9.0, 16.0) * unit;
            const double amp = rng.uniform(3.0, 8.0) * unit;
            const double lambda = rng.uniform(18.0, 40.0) * unit;
            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            const double duty = rng.uniform(0.35, 0.6);
            return render(s, p, rng, [&](int y, int x) {
                const double yy = y + amp * std::sin(2.0 * M_PI * x / lambda + phase);
                return frac(yy / period) < duty ? 1.0 : 0.0;
            });
        }
    }
}

void generate_synthetic_dataset(const std::string& out_dir, int classes, int per_class_train,
                                int per_class_test, int size, std::uint64_t seed) {
    if (classes < 1 || per_class_train < 1 || per_class_test < 0 || size < 8)
        throw std::invalid_argument("generate_synthetic_dataset: bad arguments");
    for (int c = 0; c < classes; ++c) {
        char cls[32];
        std::snprintf(cls, sizeof(cls), "class_%02d", c);
        for (int i = 0; i < per_class_train + per_class_test; ++i) {
            Rng rng = Rng::derive(seed, "synth", static_cast<std::uint64_t>(c),
                                  static_cast<std::uint64_t>(i));
            Image img = synthetic_image(c, size, rng);
            const bool test = i >= per_class_train;
            char name[64];
            std::snprintf(name, sizeof(name), "img_%05d.png", i);
            fs::path p = fs::path(out_dir) / (test ? "test" : "train") / cls / name;
            save_image(p.string(), img);
        }
    }
}

}  // namespace obow
