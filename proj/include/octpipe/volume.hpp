#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "octpipe/errors.hpp"
#include "octpipe/image.hpp"

namespace oct {

inline constexpr int kNumClasses = 8;

// Fixed class ids used throughout: 0 vitreous, 1 RNFL+prelamina, 2 GCC,
// 3 other retinal layers, 4 RPE, 5 choroid, 6 LC, 7 noise.
inline const std::array<std::string, kNumClasses>& class_names() {
    static const std::array<std::string, kNumClasses> names = {
        "vitreous",       "rnfl_prelamina", "gcc", "other_retinal",
        "rpe",            "choroid",        "lc",  "noise",
    };
    return names;
}

struct VoxelSpacing {
    float axial_um = 1.0f;   // per voxel step along height
    float lateral_um = 1.0f; // per voxel step along width
    float bscan_um = 1.0f;   // between consecutive B-scans

    bool valid() const { return axial_um > 0 && lateral_um > 0 && bscan_um > 0; }
};

// 3D scalar intensity grid. Voxel order is B-scan-major, then row, then
// column: index = d*H*W + h*W + w. Intensities are kept in [0,1].
struct OctVolume {
    int height = 0;  // axial, H
    int width = 0;   // lateral, W
    int depth = 0;   // number of B-scans, D
    VoxelSpacing spacing;
    std::vector<float> voxels;

    OctVolume() = default;
    OctVolume(int h, int w, int d, VoxelSpacing sp = {}, float fill = 0.0f)
        : height(h), width(w), depth(d), spacing(sp),
          voxels(static_cast<std::size_t>(h) * w * d, fill) {
        if (h < 1 || w < 1 || d < 1) throw shape_error("volume dims must be >= 1");
        if (!sp.valid()) throw data_error("voxel spacing components must be > 0");
    }

    std::size_t index(int h, int w, int d) const {
        return (static_cast<std::size_t>(d) * height + h) * width + w;
    }
    float& at(int h, int w, int d) { return voxels[index(h, w, d)]; }
    float at(int h, int w, int d) const { return voxels[index(h, w, d)]; }
    std::size_t size() const { return voxels.size(); }

    bool same_shape(const OctVolume& o) const {
        return height == o.height && width == o.width && depth == o.depth;
    }
};

// Per-voxel class map over the 8 fixed classes. Same voxel order as OctVolume.
struct LabelVolume {
    int height = 0;
    int width = 0;
    int depth = 0;
    VoxelSpacing spacing;
    std::vector<std::uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(int h, int w, int d, VoxelSpacing sp = {}, std::uint8_t fill = 0)
        : height(h), width(w), depth(d), spacing(sp),
          labels(static_cast<std::size_t>(h) * w * d, fill) {
        if (h < 1 || w < 1 || d < 1) throw shape_error("volume dims must be >= 1");
        if (fill >= kNumClasses) throw data_error("class id must be < 8");
    }

    std::size_t index(int h, int w, int d) const {
        return (static_cast<std::size_t>(d) * height + h) * width + w;
    }
    std::uint8_t& at(int h, int w, int d) { return labels[index(h, w, d)]; }
    std::uint8_t at(int h, int w, int d) const { return labels[index(h, w, d)]; }
    std::size_t size() const { return labels.size(); }

    bool same_shape(const LabelVolume& o) const {
        return height == o.height && width == o.width && depth == o.depth;
    }
};

inline void validate_volume(const OctVolume& v) {
    if (v.height < 1 || v.width < 1 || v.depth < 1) throw shape_error("volume dims must be >= 1");
    if (!v.spacing.valid()) throw data_error("voxel spacing components must be > 0");
    if (v.voxels.size() != static_cast<std::size_t>(v.height) * v.width * v.depth)
        throw shape_error("voxel buffer does not match dims");
    for (const float x : v.voxels) {
        if (!std::isfinite(x) || x < 0.0f || x > 1.0f)
            throw data_error("voxel intensity outside [0,1] or non-finite");
    }
}

inline void validate_labels(const LabelVolume& l) {
    if (l.labels.size() != static_cast<std::size_t>(l.height) * l.width * l.depth)
        throw shape_error("label buffer does not match dims");
    for (const std::uint8_t c : l.labels) {
        if (c >= kNumClasses) throw data_error("class id must be < 8");
    }
}

// ---------------------------------------------------------------------------
// B-scan slicing
// ---------------------------------------------------------------------------

inline BScan extract_bscan(const OctVolume& v, int index) {
    if (index < 0 || index >= v.depth) throw shape_error("b-scan index out of range");
    BScan b(v.height, v.width);
    const float* src = v.voxels.data() + static_cast<std::size_t>(index) * v.height * v.width;
    std::memcpy(b.pixels.data(), src, sizeof(float) * b.pixels.size());
    return b;
}

inline void insert_bscan(OctVolume& v, const BScan& b, int index) {
    if (index < 0 || index >= v.depth) throw shape_error("b-scan index out of range");
    if (b.height != v.height || b.width != v.width)
        throw shape_error("b-scan dims do not match volume");
    float* dst = v.voxels.data() + static_cast<std::size_t>(index) * v.height * v.width;
    std::memcpy(dst, b.pixels.data(), sizeof(float) * b.pixels.size());
}

// ---------------------------------------------------------------------------
// OVB file format
//
//   magic "OVB1" | u32 H | u32 W | u32 D | u8 dtype | f32 spacing x3 | payload
//
// All integers and floats little-endian. dtype 0 = f32 intensity volume,
// dtype 1 = u8 label volume. Payload in the documented voxel order.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kOvbMagic[4] = {'O', 'V', 'B', '1'};
inline constexpr std::size_t kOvbHeaderBytes = 4 + 3 * 4 + 1 + 3 * 4;

// The library targets little-endian hosts; the format is defined LE on disk.
static_assert(std::endian::native == std::endian::little,
              "OVB I/O assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return is.good();
}

struct OvbHeader {
    std::uint32_t h = 0, w = 0, d = 0;
    std::uint8_t dtype = 0;
    VoxelSpacing spacing;
};

inline OvbHeader read_ovb_header(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is.good() || std::memcmp(magic, kOvbMagic, 4) != 0)
        throw format_error("not an OVB file: " + path);
    OvbHeader hdr;
    if (!read_raw(is, hdr.h) || !read_raw(is, hdr.w) || !read_raw(is, hdr.d) ||
        !read_raw(is, hdr.dtype) || !read_raw(is, hdr.spacing.axial_um) ||
        !read_raw(is, hdr.spacing.lateral_um) || !read_raw(is, hdr.spacing.bscan_um))
        throw format_error("truncated OVB header: " + path);
    if (hdr.h == 0 || hdr.w == 0 || hdr.d == 0)
        throw format_error("OVB header has zero dimension: " + path);
    if (hdr.dtype > 1) throw format_error("unknown OVB dtype code: " + path);
    if (!hdr.spacing.valid()) throw format_error("OVB header spacing must be > 0: " + path);
    return hdr;
}

inline void write_ovb_header(std::ostream& os, std::uint32_t h, std::uint32_t w, std::uint32_t d,
                             std::uint8_t dtype, const VoxelSpacing& sp) {
    os.write(kOvbMagic, 4);
    write_raw(os, h);
    write_raw(os, w);
    write_raw(os, d);
    write_raw(os, dtype);
    write_raw(os, sp.axial_um);
    write_raw(os, sp.lateral_um);
    write_raw(os, sp.bscan_um);
}

}  // namespace detail

inline void save_volume(const OctVolume& v, const std::string& path) {
    validate_volume(v);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    detail::write_ovb_header(os, static_cast<std::uint32_t>(v.height),
                             static_cast<std::uint32_t>(v.width),
                             static_cast<std::uint32_t>(v.depth), 0, v.spacing);
    os.write(reinterpret_cast<const char*>(v.voxels.data()),
             static_cast<std::streamsize>(sizeof(float) * v.voxels.size()));
    if (!os) throw io_error("write failed: " + path);
}

inline OctVolume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    const auto hdr = detail::read_ovb_header(is, path);
    if (hdr.dtype != 0) throw format_error("expected intensity dtype 0: " + path);
    OctVolume v(static_cast<int>(hdr.h), static_cast<int>(hdr.w), static_cast<int>(hdr.d),
                hdr.spacing);
    is.read(reinterpret_cast<char*>(v.voxels.data()),
            static_cast<std::streamsize>(sizeof(float) * v.voxels.size()));
    if (static_cast<std::size_t>(is.gcount()) != sizeof(float) * v.voxels.size())
        throw truncation_error("voxel payload shorter than header promises: " + path);
    for (const float x : v.voxels) {
        if (!std::isfinite(x)) throw data_error("non-finite voxel in: " + path);
        if (x < 0.0f || x > 1.0f) throw data_error("voxel outside [0,1] in: " + path);
    }
    return v;
}

inline void save_labels(const LabelVolume& l, const std::string& path) {
    validate_labels(l);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    detail::write_ovb_header(os, static_cast<std::uint32_t>(l.height),
                             static_cast<std::uint32_t>(l.width),
                             static_cast<std::uint32_t>(l.depth), 1, l.spacing);
    os.write(reinterpret_cast<const char*>(l.labels.data()),
             static_cast<std::streamsize>(l.labels.size()));
    if (!os) throw io_error("write failed: " + path);
}

inline LabelVolume load_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    const auto hdr = detail::read_ovb_header(is, path);
    if (hdr.dtype != 1) throw format_error("expected label dtype 1: " + path);
    LabelVolume l(static_cast<int>(hdr.h), static_cast<int>(hdr.w), static_cast<int>(hdr.d),
                  hdr.spacing);
    is.read(reinterpret_cast<char*>(l.labels.data()),
            static_cast<std::streamsize>(l.labels.size()));
    if (static_cast<std::size_t>(is.gcount()) != l.labels.size())
        throw truncation_error("label payload shorter than header promises: " + path);
    for (const std::uint8_t c : l.labels) {
        if (c >= kNumClasses) throw data_error("class id >= 8 in: " + path);
    }
    return l;
}

}  // namespace oct
