#include "deepfext/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "deepfext/image_io.hpp"
#include "deepfext/skeleton.hpp"

namespace dfx {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kRasterExts = {".png", ".ppm", ".pgm", ".pnm", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp"};

bool is_raster(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return kRasterExts.count(ext) > 0;
}

bool is_centerline_cache(const fs::path& p) {
    return p.filename().string().find(".centerline.") != std::string::npos;
}

std::vector<fs::path> list_rasters(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_raster(e.path()) && !is_centerline_cache(e.path())) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

void require_dir(const fs::path& dir, std::vector<std::string>& missing) {
    if (!fs::is_directory(dir)) missing.push_back(dir.string());
}

std::map<std::string, fs::path> by_id(const std::vector<fs::path>& files) {
    std::map<std::string, fs::path> out;
    for (const auto& f : files) {
        const std::string id = id_token(f.filename().string());
        if (out.count(id)) {
            throw DataError("ambiguous dataset ids: '" + out[id].string() + "' and '" + f.string() +
                            "' both map to id '" + id + "'");
        }
        out[id] = f;
    }
    return out;
}

std::map<std::string, fs::path> by_stem(const std::vector<fs::path>& files) {
    std::map<std::string, fs::path> out;
    for (const auto& f : files) out[f.stem().string()] = f;
    return out;
}

DatasetSplit pair_split(const std::string& name, const fs::path& images_dir, const fs::path& masks_dir,
                        const fs::path* fov_dir, bool match_by_stem) {
    auto images = list_rasters(images_dir);
    auto masks = list_rasters(masks_dir);
    auto img_map = match_by_stem ? by_stem(images) : by_id(images);
    auto mask_map = match_by_stem ? by_stem(masks) : by_id(masks);
    std::map<std::string, fs::path> fov_map;
    if (fov_dir) {
        auto fovs = list_rasters(*fov_dir);
        fov_map = match_by_stem ? by_stem(fovs) : by_id(fovs);
    }

    std::vector<std::string> problems;
    DatasetSplit split;
    split.name = name;
    for (const auto& [id, img] : img_map) {
        auto mit = mask_map.find(id);
        if (mit == mask_map.end()) {
            problems.push_back("image '" + img.filename().string() + "' (id " + id + ") has no mask in " +
                               masks_dir.string());
            continue;
        }
        DatasetItem item;
        item.id = id;
        item.image_path = img;
        item.mask_path = mit->second;
        if (fov_dir) {
            auto fit = fov_map.find(id);
            if (fit == fov_map.end()) {
                problems.push_back("image id " + id + " has no FOV mask in " + fov_dir->string());
                continue;
            }
            item.fov_path = fit->second;
        }
        split.items.push_back(std::move(item));
    }
    for (const auto& [id, mask] : mask_map) {
        if (!img_map.count(id)) {
            problems.push_back("mask '" + mask.filename().string() + "' (id " + id + ") has no image in " +
                               images_dir.string());
        }
    }
    if (!problems.empty()) {
        std::string msg = "dataset layout problems under " + images_dir.parent_path().string() + ":";
        for (const auto& s : problems) msg += "\n  - " + s;
        throw DataError(msg);
    }
    return split;
}

}  // namespace

std::string id_token(const std::string& filename) {
    std::string out;
    for (char c : filename) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else {
            break;
        }
    }
    return out.empty() ? filename : out;
}

Layout layout_from_string(const std::string& s) {
    if (s == "drive") return Layout::Drive;
    if (s == "stare") return Layout::Stare;
    if (s == "custom") return Layout::Custom;
    throw ConfigError("unknown dataset layout '" + s + "' (expected drive, stare or custom)");
}

std::pair<DatasetSplit, DatasetSplit> load_dataset(const fs::path& root, Layout layout) {
    if (!fs::is_directory(root)) throw DataError("dataset root does not exist: " + root.string());
    std::vector<std::string> missing;

    switch (layout) {
        case Layout::Drive: {
            const fs::path tr = root / "training", te = root / "test";
            require_dir(tr / "images", missing);
            require_dir(tr / "1st_manual", missing);
            require_dir(tr / "mask", missing);
            require_dir(te / "images", missing);
            require_dir(te / "1st_manual", missing);
            require_dir(te / "mask", missing);
            if (!missing.empty()) {
                std::string msg = "DRIVE layout expects training/{images,1st_manual,mask} and test/{images,1st_manual,mask}; missing:";
                for (const auto& s : missing) msg += "\n  - " + s;
                throw DataError(msg);
            }
            fs::path tr_fov = tr / "mask", te_fov = te / "mask";
            return {pair_split("drive-train", tr / "images", tr / "1st_manual", &tr_fov, false),
                    pair_split("drive-test", te / "images", te / "1st_manual", &te_fov, false)};
        }
        case Layout::Stare: {
            require_dir(root / "images", missing);
            require_dir(root / "labels-ah", missing);
            if (!missing.empty()) {
                std::string msg = "STARE layout expects images/ and labels-ah/; missing:";
                for (const auto& s : missing) msg += "\n  - " + s;
                throw DataError(msg);
            }
            DatasetSplit all = pair_split("stare", root / "images", root / "labels-ah", nullptr, false);
            // sorted-name split: first 10 train, remainder test
            DatasetSplit train{"stare-train", {}}, test{"stare-test", {}};
            for (std::size_t i = 0; i < all.items.size(); ++i) {
                (i < 10 ? train : test).items.push_back(all.items[i]);
            }
            return {std::move(train), std::move(test)};
        }
        case Layout::Custom: {
            require_dir(root / "images", missing);
            require_dir(root / "masks", missing);
            if (!missing.empty()) {
                std::string msg = "custom layout expects images/ and masks/; missing:";
                for (const auto& s : missing) msg += "\n  - " + s;
                throw DataError(msg);
            }
            fs::path fov = root / "fov";
            const bool has_fov = fs::is_directory(fov);
            DatasetSplit train = pair_split("custom", root / "images", root / "masks",
                                            has_fov ? &fov : nullptr, true);
            train.name = "custom";
            return {std::move(train), DatasetSplit{"custom-test", {}}};
        }
    }
    throw ConfigError("unreachable layout");
}

fs::path centerline_cache_path(const fs::path& mask_path) {
    fs::path p = mask_path.parent_path() / mask_path.stem();
    p += ".centerline.png";
    return p;
}

namespace {

BinaryMap centerline_for(const fs::path& mask_path, const BinaryMap& vessel_mask) {
    const fs::path cache = centerline_cache_path(mask_path);
    std::error_code ec;
    if (fs::exists(cache, ec)) {
        const auto mask_time = fs::last_write_time(mask_path, ec);
        const auto cache_time = fs::last_write_time(cache, ec);
        if (!ec && cache_time >= mask_time) {
            BinaryMap m = decode_mask(cache.string());
            if (m.height == vessel_mask.height && m.width == vessel_mask.width) return m;
        }
    }
    BinaryMap skel = skeletonize(vessel_mask);
    try {
        write_mask_png(cache.string(), skel);
    } catch (const DataError&) {
        // read-only dataset tree: fall back to in-memory derivation
    }
    return skel;
}

}  // namespace

LabeledImage load_item(const DatasetItem& item, bool want_centerline) {
    LabeledImage out;
    out.id = item.id;
    Tensor img = decode_image(item.image_path.string());
    if (img.shape[0] == 3) {
        out.image = std::move(img);
    } else {
        // replicate grayscale so the RGB presets apply unchanged
        Tensor rgb(Shape{3, img.shape[1], img.shape[2]});
        for (int c = 0; c < 3; ++c) {
            std::copy(img.values.begin(), img.values.begin() + img.shape[1] * img.shape[2],
                      rgb.values.begin() + c * img.shape[1] * img.shape[2]);
        }
        out.image = std::move(rgb);
    }
    out.vessel_mask = decode_mask(item.mask_path.string());
    if (out.vessel_mask.height != out.image.shape[1] || out.vessel_mask.width != out.image.shape[2]) {
        throw DataError("mask dimensions differ from image for id " + item.id);
    }
    if (item.fov_path) {
        out.fov_mask = decode_mask(item.fov_path->string());
        if (out.fov_mask->height != out.vessel_mask.height || out.fov_mask->width != out.vessel_mask.width) {
            throw DataError("FOV dimensions differ from image for id " + item.id);
        }
    }
    if (want_centerline) {
        out.centerline_mask = centerline_for(item.mask_path, out.vessel_mask);
    }
    return out;
}

int prepare_centerline_cache(const DatasetSplit& split) {
    int written = 0;
    for (const auto& item : split.items) {
        LabeledImage li = load_item(item, /*want_centerline=*/true);
        if (fs::exists(centerline_cache_path(item.mask_path))) ++written;
    }
    return written;
}

}  // namespace dfx
