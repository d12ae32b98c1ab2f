#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace obow {

// Planar CHW image, double precision, values nominally in [0, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, 0.0) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    bool empty() const { return data.empty(); }
};

// Axis-aligned rectangle in pixel coordinates (y/x of the top-left corner).
struct Rect {
    int y = 0, x = 0, h = 0, w = 0;
};

Image crop(const Image& img, const Rect& r);
Image hflip(const Image& img);

// Bilinear resize with half-pixel centers (the usual align_corners=false
// convention).
Image resize_bilinear(const Image& img, int out_h, int out_w);

// Separable Gaussian blur with reflect padding; kernel radius ceil(2.5*sigma).
Image gaussian_blur(const Image& img, double sigma);

// Photometric primitives. All clamp the result back to [0, 1]; the jitter
// factor conventions follow the common augmentation stacks (brightness and
// saturation blend against black / per-pixel luma, contrast against the mean
// luma, hue rotates in HSV).
void adjust_brightness(Image& img, double factor);
void adjust_contrast(Image& img, double factor);
void adjust_saturation(Image& img, double factor);
void adjust_hue(Image& img, double shift);  // shift in turns, |shift| <= 0.5
void to_grayscale(Image& img);
void clamp01(Image& img);

double luma(const Image& img, int y, int x);

}  // namespace obow
