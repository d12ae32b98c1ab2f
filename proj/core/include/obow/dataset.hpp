#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "obow/image.hpp"
#include "obow/rng.hpp"

namespace obow {

// Labeled image list. Loadable either from a directory-per-class folder tree
// or from an index file with one "path label" pair per line.
struct Dataset {
    std::vector<std::string> paths;
    std::vector<int> labels;
    std::vector<std::string> class_names;

    std::size_t size() const { return paths.size(); }
    int num_classes() const { return static_cast<int>(class_names.size()); }
};

Dataset load_image_folder(const std::string& dir);
Dataset load_index_file(const std::string& file);
// Dispatches on whether `path` is a directory or an index file.
Dataset load_dataset(const std::string& path);

Image load_image(const std::string& path);
void save_image(const std::string& path, const Image& img);

// Procedural texture/shape corpus: `classes` structural families rendered
// with heavy color, position, scale and noise nuisance, so class identity is
// carried by structure rather than low-level statistics. Writes
// out_dir/train/<class>/... and out_dir/test/<class>/... PNG files.
void generate_synthetic_dataset(const std::string& out_dir, int classes, int per_class_train,
                                int per_class_test, int size, std::uint64_t seed);

// Single synthetic image; exposed for tests and demos.
Image synthetic_image(int class_id, int size, Rng& rng);

}  // namespace obow
