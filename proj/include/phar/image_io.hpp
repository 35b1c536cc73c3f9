#pragma once

#include <string>

#include "phar/tensor.hpp"

namespace phar {

// Images are [1,3,H,W] in [0,1]; masks are [1,1,H,W] binary.
// Formats: PPM (P6, maxval 255) read/write, PGM (P5) read/write for masks
// with a strict >128 threshold on load, PNG read (8-bit RGB or gray,
// non-interlaced). Malformed files raise format errors with byte offsets.

Tensor load_image(const std::string& path);
Tensor load_mask(const std::string& path);
void save_image(const Tensor& image, const std::string& path);
void save_mask(const Tensor& mask, const std::string& path);

}  // namespace phar
