#pragma once

// PNG read/write for 8-bit RGB and grayscale rasters, plus sha256 hashing.
// Writes use fixed encoder settings so the same pixels always produce the
// same file bytes.

#include "repose/sprite.hpp"

#include <string>
#include <vector>

namespace repose {

void write_png_rgb(const std::string& path, const ImageU8& im);

// mask entries 0/1 are stored as 0/255 gray
void write_png_gray(const std::string& path, int w, int h, const std::vector<uint8_t>& data);

ImageU8 read_png_rgb(const std::string& path);

// returns 0/1 entries (anything >= 128 reads as 1)
std::vector<uint8_t> read_png_gray(const std::string& path, int& w, int& h);

std::array<uint8_t, 32> sha256_raw(const void* data, size_t n);
std::string sha256_hex(const void* data, size_t n);
std::string sha256_file(const std::string& path);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t n);

}  // namespace repose
