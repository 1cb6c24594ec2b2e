#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elab/tensor.hpp"

namespace elab {

/// Labeled single-channel images in [-1, 1], channels-last [H, W, 1].
struct LabeledImages {
    int image_size = 28;
    std::vector<Tensor<float>> images;
    std::vector<int> labels;
    std::vector<std::string> class_tokens;  // class id -> token string

    std::size_t size() const { return images.size(); }

    LabeledImages filter_class(int excluded) const {
        LabeledImages out;
        out.image_size = image_size;
        out.class_tokens = class_tokens;
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (labels[i] == excluded) continue;
            out.images.push_back(images[i]);
            out.labels.push_back(labels[i]);
        }
        return out;
    }

    LabeledImages only_class(int cls, std::size_t max_count = SIZE_MAX) const {
        LabeledImages out;
        out.image_size = image_size;
        out.class_tokens = class_tokens;
        for (std::size_t i = 0; i < images.size() && out.images.size() < max_count; ++i) {
            if (labels[i] != cls) continue;
            out.images.push_back(images[i]);
            out.labels.push_back(labels[i]);
        }
        return out;
    }
};

/// Deterministic synthetic digit corpus: glyphs rasterized through random
/// affine jitter, stroke and intensity variation. Stands in for the
/// MNIST-class data the experiments need; everything is derived from the
/// seed so reruns are byte-identical.
LabeledImages render_digits(int per_class, int image_size, std::uint64_t seed);

/// Token name for a digit class ("<digit-3>").
std::string digit_token(int cls);

}  // namespace elab
