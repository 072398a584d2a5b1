/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file coco.hpp
/// @brief Reader for the `images` / `annotations` subset of COCO JSON.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "aadi/geometry.hpp"
#include "aadi/head.hpp"

namespace aadi {

struct ImageInfo {
    std::int64_t id = 0;
    int width = 0;
    int height = 0;
};

struct Annotation {
    std::int64_t image_id = 0;
    Box box;  // converted from [x, y, w, h]
    bool crowd = false;
    std::int64_t category_id = 0;
};

struct AnnotationSet {
    std::vector<ImageInfo> images;
    std::vector<Annotation> annotations;
    std::size_t dropped_degenerate = 0;  // annotations with w <= 0 or h <= 0

    /// Non-crowd boxes of one image, in file order.
    std::vector<Box> gts_for_image(std::int64_t image_id) const {
        std::vector<Box> out;
        for (const auto& a : annotations) {
            if (a.image_id == image_id && !a.crowd) out.push_back(a.box);
        }
        return out;
    }
};

class AnnotationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline AnnotationSet parse_coco_annotations(std::string_view text) {
    using nlohmann::json;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw AnnotationError(std::string("malformed annotation document: ") + e.what());
    }
    if (!doc.is_object()) throw AnnotationError("malformed annotation document: top level must be an object");
    if (!doc.contains("images") || !doc["images"].is_array()) {
        throw AnnotationError("malformed annotation document: missing 'images' array");
    }
    AnnotationSet set;
    std::map<std::int64_t, std::size_t> by_id;
    try {
        for (const auto& img : doc["images"]) {
            ImageInfo info{img.at("id").get<std::int64_t>(), img.at("width").get<int>(), img.at("height").get<int>()};
            if (info.width < 1 || info.height < 1) {
                throw AnnotationError("image " + std::to_string(info.id) + " has non-positive size");
            }
            if (by_id.contains(info.id)) throw AnnotationError("duplicate image id " + std::to_string(info.id));
            by_id[info.id] = set.images.size();
            set.images.push_back(info);
        }
        if (doc.contains("annotations")) {
            if (!doc["annotations"].is_array()) {
                throw AnnotationError("malformed annotation document: 'annotations' must be an array");
            }
            for (const auto& ann : doc["annotations"]) {
                Annotation a;
                a.image_id = ann.at("image_id").get<std::int64_t>();
                if (!by_id.contains(a.image_id)) {
                    throw AnnotationError("annotation refers to unknown image_id " + std::to_string(a.image_id));
                }
                const auto& bbox = ann.at("bbox");
                if (!bbox.is_array() || bbox.size() != 4) throw AnnotationError("bbox must be [x, y, width, height]");
                const double x = bbox[0].get<double>();
                const double y = bbox[1].get<double>();
                const double w = bbox[2].get<double>();
                const double h = bbox[3].get<double>();
                if (!(w > 0.0 && h > 0.0)) {
                    ++set.dropped_degenerate;
                    continue;
                }
                a.box = {x, y, x + w, y + h};
                a.crowd = ann.value("iscrowd", 0) != 0;
                a.category_id = ann.value("category_id", std::int64_t{0});
                set.annotations.push_back(a);
            }
        }
    } catch (const json::exception& e) {
        throw AnnotationError(std::string("malformed annotation document: ") + e.what());
    }
    return set;
}

inline AnnotationSet load_coco_annotations(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw AnnotationError(e.what());
    }
    return parse_coco_annotations(text);
}

}  // namespace aadi
