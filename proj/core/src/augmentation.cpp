#include "obow/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace obow {

CropGeometry CropGeometry::scaled() const {
    CropGeometry g = *this;
    if (scale_factor == 1.0) return g;
    auto sc = [&](int v) { return std::max(1, static_cast<int>(std::lround(v * scale_factor))); };
    g.base_size = sc(base_size);
    g.teacher_crop = sc(teacher_crop);
    g.primary_crop = sc(primary_crop);
    g.patch_size = sc(patch_size);
    g.scale_factor = 1.0;
    return g;
}

void CropGeometry::validate() const {
    CropGeometry g = scaled();
    if (g.teacher_crop > g.base_size || g.patch_size > g.base_size || g.primary_crop > g.base_size)
        throw std::invalid_argument("CropGeometry: crops larger than base size");
    if (g.num_patches < 0 || g.num_patches > 9)
        throw std::invalid_argument("CropGeometry: at most 9 grid patches can be drawn");
    if (g.num_primary < 0) throw std::invalid_argument("CropGeometry: negative primary count");
    if (!(primary_area_max <= 0.60 + 1e-12))
        throw std::invalid_argument("CropGeometry: primary crops must cover at most 60% of the image");
    if (primary_area_min <= 0.0 || primary_area_min > primary_area_max)
        throw std::invalid_argument("CropGeometry: bad primary area range");
    if (patch_area_min <= 0.0 || patch_area_min > patch_area_max || patch_area_max > 1.0)
        throw std::invalid_argument("CropGeometry: bad patch source area range");
    if (scale_factor <= 0.0) throw std::invalid_argument("CropGeometry: bad scale factor");
}

Image standardize(const Image& image, int size) {
    if (image.height < 1 || image.width < 1) throw std::invalid_argument("standardize: empty image");
    Image resized = image;
    if (std::min(image.height, image.width) != size) {
        const double s = static_cast<double>(size) / std::min(image.height, image.width);
        resized = resize_bilinear(image,
                                  std::max(size, static_cast<int>(std::lround(image.height * s))),
                                  std::max(size, static_cast<int>(std::lround(image.width * s))));
    }
    const int oy = (resized.height - size) / 2;
    const int ox = (resized.width - size) / 2;
    return crop(resized, {oy, ox, size, size});
}

namespace {

// Samples a rectangle of relative area in [area_min, area_max] with aspect
// ratio log-uniform in [aspect_min, aspect_max]. Rounding never exceeds
// area_max (dimensions are shrunk if needed).
Rect sample_region(int side, double area_min, double area_max, double aspect_min,
                   double aspect_max, Rng& rng) {
    const double total = static_cast<double>(side) * side;
    for (int attempt = 0; attempt < 16; ++attempt) {
        const double area = rng.uniform(area_min, area_max) * total;
        const double aspect = std::exp(rng.uniform(std::log(aspect_min), std::log(aspect_max)));
        int w = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        int h = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        w = std::clamp(w, 1, side);
        h = std::clamp(h, 1, side);
        while (h > 1 && static_cast<double>(h) * w > area_max * total) --h;
        while (w > 1 && static_cast<double>(h) * w > area_max * total) --w;
        if (static_cast<double>(h) * w < area_min * total * 0.5) continue;
        const int y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(side - h + 1)));
        const int x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(side - w + 1)));
        return {y, x, h, w};
    }
    // Fallback: central square of the minimum area.
    const int s = std::max(1, static_cast<int>(std::floor(std::sqrt(area_min * total))));
    return {(side - s) / 2, (side - s) / 2, s, s};
}

}  // namespace

ViewBundle make_views(const Image& image, const CropGeometry& geometry, Rng& rng) {
    geometry.validate();
    const CropGeometry g = geometry.scaled();
    if (std::min(image.height, image.width) < g.base_size)
        throw std::invalid_argument("make_views: image smaller than the base size");

    const Image base = standardize(image, g.base_size);
    // Maps base-image rectangles back to original coordinates.
    const double sy = static_cast<double>(image.height) / g.base_size;
    const double sx = static_cast<double>(image.width) / g.base_size;
    auto to_original = [&](double y, double x, double h, double w) {
        Rect r;
        r.y = std::clamp(static_cast<int>(std::lround(y * sy)), 0, image.height - 1);
        r.x = std::clamp(static_cast<int>(std::lround(x * sx)), 0, image.width - 1);
        r.h = std::clamp(static_cast<int>(std::lround(h * sy)), 1, image.height - r.y);
        r.w = std::clamp(static_cast<int>(std::lround(w * sx)), 1, image.width - r.x);
        return r;
    };

    ViewBundle bundle;

    // Teacher: center crop, horizontal flip only.
    const int toff = (g.base_size - g.teacher_crop) / 2;
    bundle.teacher_view = crop(base, {toff, toff, g.teacher_crop, g.teacher_crop});
    bundle.teacher_prov.source = to_original(toff, toff, g.teacher_crop, g.teacher_crop);
    bundle.teacher_prov.hflipped = rng.uniform() < 0.5;
    if (bundle.teacher_prov.hflipped) bundle.teacher_view = hflip(bundle.teacher_view);

    for (int j = 0; j < g.num_primary; ++j) {
        const Rect r = sample_region(g.base_size, g.primary_area_min, g.primary_area_max,
                                     g.aspect_min, g.aspect_max, rng);
        bundle.primary_views.push_back(resize_bilinear(crop(base, r), g.primary_crop, g.primary_crop));
        ViewProvenance prov;
        prov.source = to_original(r.y, r.x, r.h, r.w);
        bundle.primary_prov.push_back(prov);
    }

    if (g.num_patches > 0) {
        const Rect region = sample_region(g.base_size, g.patch_area_min, g.patch_area_max,
                                          g.aspect_min, g.aspect_max, rng);
        const Image zoomed = resize_bilinear(crop(base, region), g.base_size, g.base_size);
        const int stride = g.grid_stride();
        const auto chosen = rng.sample_without_replacement(9, static_cast<std::size_t>(g.num_patches));
        const double ry = static_cast<double>(region.h) / g.base_size;
        const double rx = static_cast<double>(region.w) / g.base_size;
        for (std::size_t c : chosen) {
            const int gy = static_cast<int>(c) / 3, gx = static_cast<int>(c) % 3;
            const int py = gy * stride, px = gx * stride;
            bundle.patch_views.push_back(crop(zoomed, {py, px, g.patch_size, g.patch_size}));
            ViewProvenance prov;
            prov.source = to_original(region.y + py * ry, region.x + px * rx,
                                      g.patch_size * ry, g.patch_size * rx);
            bundle.patch_prov.push_back(prov);
        }
    }
    return bundle;
}

void photometric_aug(Image& view, ViewProvenance& prov, const PhotometricConfig& cfg, Rng& rng) {
    if (rng.uniform() < cfg.jitter_prob) {
        const double fb = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
        const double fc = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
        const double fs = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
        const double fh = rng.uniform(-cfg.hue, cfg.hue);
        adjust_brightness(view, fb);
        adjust_contrast(view, fc);
        adjust_saturation(view, fs);
        adjust_hue(view, fh);
        prov.photometric = true;
    }
    if (rng.uniform() < cfg.grayscale_prob) {
        to_grayscale(view);
        prov.photometric = true;
    }
    if (rng.uniform() < cfg.blur_prob) {
        const double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
        view = gaussian_blur(view, sigma);
        prov.photometric = true;
    }
    if (rng.uniform() < cfg.flip_prob) {
        // The source rectangle is where the content came from; a flip only
        // changes orientation.
        view = hflip(view);
        prov.hflipped = !prov.hflipped;
    }
}

}  // namespace obow
