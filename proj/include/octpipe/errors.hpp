#pragma once

#include <stdexcept>
#include <string>

namespace oct {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File cannot be opened, read or written.
struct io_error : error {
    using error::error;
};

// File exists but its header or structure is not a valid OVB stream.
struct format_error : error {
    using error::error;
};

// Header is valid but the payload is shorter than the header promises.
struct truncation_error : format_error {
    using format_error::format_error;
};

// Payload decodes but violates a value invariant (non-finite voxel, label >= 8, ...).
struct data_error : error {
    using error::error;
};

// Dimension / shape mismatch between arguments, or dims a network cannot accept.
struct shape_error : error {
    using error::error;
};

// A geometric construction (circular scan, crop) does not fit the volume.
struct geometry_error : error {
    using error::error;
};

// A statistic is undefined for the given input (e.g. two constant images).
struct stat_error : error {
    using error::error;
};

}  // namespace oct
