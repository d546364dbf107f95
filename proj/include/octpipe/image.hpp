#pragma once

#include <cmath>
#include <vector>

#include "octpipe/errors.hpp"

namespace oct {

// 2D intensity image, row-major, values expected in [0,1].
// Templated on the scalar so the enhancement operators can run in double
// where a test or closed-form check needs more precision than f32.
template <typename S>
struct BasicImage {
    int height = 0;
    int width = 0;
    std::vector<S> pixels;

    BasicImage() = default;
    BasicImage(int h, int w, S fill = S(0))
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {
        if (h < 1 || w < 1) throw shape_error("image dims must be >= 1");
    }

    S& at(int h, int w) { return pixels[static_cast<std::size_t>(h) * width + w]; }
    S at(int h, int w) const { return pixels[static_cast<std::size_t>(h) * width + w]; }
    std::size_t size() const { return pixels.size(); }

    bool same_shape(const BasicImage& o) const { return height == o.height && width == o.width; }
};

using BScan = BasicImage<float>;

// Throws data_error if any pixel is non-finite or outside [0,1].
template <typename S>
void validate_image(const BasicImage<S>& img) {
    for (const S v : img.pixels) {
        if (!std::isfinite(static_cast<double>(v)) || v < S(0) || v > S(1))
            throw data_error("image intensity outside [0,1] or non-finite");
    }
}

template <typename S, typename T>
BasicImage<T> convert_image(const BasicImage<S>& img) {
    BasicImage<T> out(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = static_cast<T>(img.pixels[i]);
    return out;
}

}  // namespace oct
