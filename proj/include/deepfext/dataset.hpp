#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deepfext/maps.hpp"
#include "deepfext/tensor.hpp"

namespace dfx {

struct LabeledImage {
    std::string id;
    Tensor image;  // (3,H,W) in [0,1]; grayscale sources are replicated
    BinaryMap vessel_mask;
    std::optional<BinaryMap> centerline_mask;
    std::optional<BinaryMap> fov_mask;
};

struct DatasetItem {
    std::string id;
    std::filesystem::path image_path;
    std::filesystem::path mask_path;
    std::optional<std::filesystem::path> fov_path;
};

struct DatasetSplit {
    std::string name;
    std::vector<DatasetItem> items;
};

enum class Layout { Drive, Stare, Custom };

Layout layout_from_string(const std::string& s);

// DRIVE: root/{training,test}/{images,1st_manual,mask}, ids paired by the
//   leading digit run, published 20/20 split, FOV masks attached.
// STARE: root/images + root/labels-ah (first annotator = ground truth),
//   sorted-name split, first 10 train / rest test, no FOV.
// Custom: root/images + root/masks (+ optional root/fov) paired by full stem;
//   all items land in the train split.
std::pair<DatasetSplit, DatasetSplit> load_dataset(const std::filesystem::path& root, Layout layout);

// Decodes an item. want_centerline derives the centerline mask by
// skeletonization, reading/writing the `.centerline.png` cache next to the
// ground-truth mask (regenerated when the mask file is newer). Cache write
// failures fall back to in-memory derivation.
LabeledImage load_item(const DatasetItem& item, bool want_centerline);

// Forces centerline cache generation; returns the number of cache files.
int prepare_centerline_cache(const DatasetSplit& split);

std::filesystem::path centerline_cache_path(const std::filesystem::path& mask_path);

// Leading alphanumeric run of the filename, lowercased ("21_manual1.png" ->
// "21", "im0012.ah.ppm" -> "im0012"). Used to pair files across directories.
std::string id_token(const std::string& filename);

}  // namespace dfx
