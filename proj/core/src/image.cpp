#include "obow/image.hpp"

#include <algorithm>
#include <cmath>

namespace obow {

Image crop(const Image& img, const Rect& r) {
    if (r.y < 0 || r.x < 0 || r.h <= 0 || r.w <= 0 ||
        r.y + r.h > img.height || r.x + r.w > img.width) {
        throw std::invalid_argument("crop: rectangle outside image bounds");
    }
    Image out(img.channels, r.h, r.w);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < r.h; ++y)
            for (int x = 0; x < r.w; ++x)
                out.at(c, y, x) = img.at(c, r.y + y, r.x + x);
    return out;
}

Image hflip(const Image& img) {
    Image out(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize: non-positive size");
    if (out_h == img.height && out_w == img.width) return img;
    Image out(img.channels, out_h, out_w);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, img.height - 1);
        int y1c = std::clamp(y0 + 1, 0, img.height - 1);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, img.width - 1);
            int x1c = std::clamp(x0 + 1, 0, img.width - 1);
            for (int c = 0; c < img.channels; ++c) {
                double top = img.at(c, y0c, x0c) * (1.0 - wx) + img.at(c, y0c, x1c) * wx;
                double bot = img.at(c, y1c, x0c) * (1.0 - wx) + img.at(c, y1c, x1c) * wx;
                out.at(c, y, x) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

namespace {

int reflect(int i, int n) {
    // reflect-101 border: -1 -> 1, n -> n-2
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;

    Image tmp(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * img.at(c, y, reflect(x + i, img.width));
                tmp.at(c, y, x) = acc;
            }
    Image out(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * tmp.at(c, reflect(y + i, img.height), x);
                out.at(c, y, x) = acc;
            }
    return out;
}

double luma(const Image& img, int y, int x) {
    if (img.channels >= 3)
        return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
    return img.at(0, y, x);
}

void clamp01(Image& img) {
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

void adjust_brightness(Image& img, double factor) {
    for (double& v : img.data) v *= factor;
    clamp01(img);
}

void adjust_contrast(Image& img, double factor) {
    double mean = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mean += luma(img, y, x);
    mean /= static_cast<double>(img.height) * img.width;
    for (double& v : img.data) v = factor * v + (1.0 - factor) * mean;
    clamp01(img);
}

void adjust_saturation(Image& img, double factor) {
    if (img.channels < 3) return;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double g = luma(img, y, x);
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = factor * img.at(c, y, x) + (1.0 - factor) * g;
        }
    clamp01(img);
}

void adjust_hue(Image& img, double shift) {
    if (img.channels < 3 || shift == 0.0) return;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
            double mx = std::max({r, g, b}), mn = std::min({r, g, b});
            double d = mx - mn;
            double h = 0.0;
            if (d > 0.0) {
                if (mx == r) h = std::fmod((g - b) / d, 6.0);
                else if (mx == g) h = (b - r) / d + 2.0;
                else h = (r - g) / d + 4.0;
                h /= 6.0;
                if (h < 0.0) h += 1.0;
            }
            double s = mx > 0.0 ? d / mx : 0.0;
            double v = mx;
            h = std::fmod(h + shift + 1.0, 1.0);
            double hh = h * 6.0;
            int sect = static_cast<int>(std::floor(hh)) % 6;
            double f = hh - std::floor(hh);
            double p = v * (1.0 - s);
            double q = v * (1.0 - s * f);
            double t = v * (1.0 - s * (1.0 - f));
            double rr, gg, bb;
            switch (sect) {
                case 0: rr = v; gg = t; bb = p; break;
                case 1: rr = q; gg = v; bb = p; break;
                case 2: rr = p; gg = v; bb = t; break;
                case 3: rr = p; gg = q; bb = v; break;
                case 4: rr = t; gg = p; bb = v; break;
                default: rr = v; gg = p; bb = q; break;
            }
            img.at(0, y, x) = rr;
            img.at(1, y, x) = gg;
            img.at(2, y, x) = bb;
        }
    clamp01(img);
}

void to_grayscale(Image& img) {
    if (img.channels < 3) return;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double g = luma(img, y, x);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = g;
        }
}

}  // namespace obow
