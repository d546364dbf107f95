#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "octpipe/errors.hpp"

namespace oct::nn {

// Dense N-D array, channels-first, row-major. Feature maps are
// {C, H, W} in 2D and {C, D, H, W} in 3D (matching the OVB voxel order,
// so a single-channel volume tensor aliases the volume buffer directly).
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp) { resize(std::move(shp)); }

    void resize(std::vector<int> shp) {
        shape = std::move(shp);
        data.assign(numel_of(shape), S(0));
    }

    static std::size_t numel_of(const std::vector<int>& shp) {
        std::size_t n = 1;
        for (const int d : shp) {
            if (d < 1) throw shape_error("tensor dims must be >= 1");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    bool empty() const { return data.empty(); }
    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    int channels() const { return shape.empty() ? 0 : shape[0]; }
    // Product of all dims after the channel dim.
    std::size_t spatial_size() const {
        std::size_t n = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) n *= static_cast<std::size_t>(shape[i]);
        return n;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

}  // namespace oct::nn
