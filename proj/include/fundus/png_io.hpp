#pragma once

#include "fundus/image.hpp"

#include <string>

namespace fundus {

/// Reads an 8- or 16-bit PNG (gray/RGB; alpha dropped) into [0,1] planes.
ImageF read_png(const std::string& path);

/// 8-bit PNG from [0,1] planes (1 or 3 channels, values clamped).
void write_png8(const std::string& path, const ImageF& img);

/// Single-channel 16-bit PNG from a [0,1] plane.
void write_png16(const std::string& path, const PlaneF& plane);

bool has_png_extension(const std::string& path);

}  // namespace fundus
