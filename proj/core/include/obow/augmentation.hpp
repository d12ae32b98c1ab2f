#pragma once

#include <vector>

#include "obow/image.hpp"
#include "obow/rng.hpp"

namespace obow {

// Multi-crop geometry. All pixel sizes are multiplied by scale_factor (e.g.
// 0.25 maps 256/224/160/96 to 64/56/40/24); area fractions and the 3x3 patch
// grid are preserved.
struct CropGeometry {
    int base_size = 256;     // reference resolution the image is resized to
    int teacher_crop = 224;  // center crop fed to the teacher
    int primary_crop = 160;
    int patch_size = 96;
    int num_primary = 2;     // vanilla configuration: 1
    int num_patches = 5;     // drawn from the 3x3 grid; vanilla: 0
    double primary_area_min = 0.08;
    double primary_area_max = 0.60;
    double patch_area_min = 0.60;
    double patch_area_max = 1.00;
    double aspect_min = 3.0 / 4.0;
    double aspect_max = 4.0 / 3.0;
    double scale_factor = 1.0;

    CropGeometry scaled() const;  // pixel sizes multiplied by scale_factor
    void validate() const;

    // Grid stride and the three corner offsets of the 3x3 patch tiling.
    int grid_stride() const { return (base_size - patch_size) / 2; }
};

struct ViewProvenance {
    Rect source;              // rectangle in original-image coordinates
    bool hflipped = false;
    bool photometric = false; // any photometric op beyond flipping applied
};

// One teacher view plus the student crops. Full configuration: 1 teacher +
// 2 primary + 5 patches; vanilla: 1 + 1 + 0.
struct ViewBundle {
    Image teacher_view;
    ViewProvenance teacher_prov;
    std::vector<Image> primary_views;
    std::vector<ViewProvenance> primary_prov;
    std::vector<Image> patch_views;
    std::vector<ViewProvenance> patch_prov;
};

// Geometric views. The teacher view is the center crop of the standardized
// image, perturbed only by a horizontal flip. Primary crops sample at most
// primary_area_max of the image; patch views tile a 0.6-1.0-area region
// resized to base_size and draw num_patches of the nine cells without
// replacement. Photometric perturbation is a separate pass (student views
// only).
ViewBundle make_views(const Image& image, const CropGeometry& geometry, Rng& rng);

struct PhotometricConfig {
    double jitter_prob = 0.8;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
    double flip_prob = 0.5;
};

void photometric_aug(Image& view, ViewProvenance& prov, const PhotometricConfig& cfg, Rng& rng);

// Resize (shorter side) and center-crop to size x size.
Image standardize(const Image& image, int size);

}  // namespace obow
