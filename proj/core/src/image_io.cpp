#include "repose/image_io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace repose {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void io_fail(const std::string& what, const std::string& path) {
    throw IoError(what + ": " + path);
}

}  // namespace

void write_png_rgb(const std::string& path, const ImageU8& im) {
    require_t<ConfigError>(im.w > 0 && im.h > 0 &&
                               im.px.size() == size_t(im.w) * size_t(im.h) * 3,
                           "write_png_rgb: inconsistent raster");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) io_fail("cannot open for writing", path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        io_fail("png encoder setup failed", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        io_fail("png write failed", path);
    }
    png_init_io(png, f.get());
    // fixed settings: reproducible bytes for identical pixels
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, png_uint_32(im.w), png_uint_32(im.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < im.h; ++y)
        png_write_row(png, const_cast<png_bytep>(im.px.data() + size_t(y) * size_t(im.w) * 3));
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

void write_png_gray(const std::string& path, int w, int h, const std::vector<uint8_t>& data) {
    require_t<ConfigError>(w > 0 && h > 0 && data.size() == size_t(w) * size_t(h),
                           "write_png_gray: inconsistent raster");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) io_fail("cannot open for writing", path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        io_fail("png encoder setup failed", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        io_fail("png write failed", path);
    }
    png_init_io(png, f.get());
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            row[size_t(x)] = data[size_t(y) * size_t(w) + size_t(x)] ? 255 : 0;
        png_write_row(png, row.data());
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

ImageU8 read_png_rgb(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) io_fail("cannot open for reading", path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png decoder setup failed", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png read failed", path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int ctype = png_get_color_type(png, info);
    if (depth != 8 || ctype != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png is not 8-bit RGB", path);
    }
    ImageU8 im;
    im.w = int(w);
    im.h = int(h);
    im.px.resize(size_t(w) * size_t(h) * 3);
    for (png_uint_32 y = 0; y < h; ++y)
        png_read_row(png, im.px.data() + size_t(y) * size_t(w) * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return im;
}

std::vector<uint8_t> read_png_gray(const std::string& path, int& w, int& h) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) io_fail("cannot open for reading", path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png decoder setup failed", path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png read failed", path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const png_uint_32 pw = png_get_image_width(png, info);
    const png_uint_32 ph = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int ctype = png_get_color_type(png, info);
    if (depth != 8 || ctype != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        io_fail("png is not 8-bit gray", path);
    }
    w = int(pw);
    h = int(ph);
    std::vector<uint8_t> out(size_t(pw) * size_t(ph));
    std::vector<uint8_t> row(static_cast<size_t>(pw));
    for (png_uint_32 y = 0; y < ph; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < pw; ++x)
            out[size_t(y) * size_t(pw) + size_t(x)] = row[size_t(x)] >= 128 ? 1 : 0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

std::array<uint8_t, 32> sha256_raw(const void* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    if (EVP_Digest(data, n, md, &md_len, EVP_sha256(), nullptr) != 1 || md_len != 32)
        throw IoError("sha256 computation failed");
    std::array<uint8_t, 32> out{};
    std::memcpy(out.data(), md, 32);
    return out;
}

std::string sha256_hex(const void* data, size_t n) {
    const std::array<uint8_t, 32> md = sha256_raw(data, n);
    const unsigned int md_len = 32;
    static const char* hex = "0123456789abcdef";
    std::string out(size_t(md_len) * 2, '0');
    for (unsigned int i = 0; i < md_len; ++i) {
        out[size_t(i) * 2] = hex[md[i] >> 4];
        out[size_t(i) * 2 + 1] = hex[md[i] & 0xf];
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    return sha256_hex(bytes.data(), bytes.size());
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) io_fail("cannot open for reading", path);
    std::fseek(f.get(), 0, SEEK_END);
    const long sz = std::ftell(f.get());
    if (sz < 0) io_fail("cannot stat", path);
    std::fseek(f.get(), 0, SEEK_SET);
    std::vector<uint8_t> out(static_cast<size_t>(sz));
    if (sz > 0 && std::fread(out.data(), 1, size_t(sz), f.get()) != size_t(sz))
        io_fail("short read", path);
    return out;
}

void write_file_bytes(const std::string& path, const void* data, size_t n) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) io_fail("cannot open for writing", path);
    if (n > 0 && std::fwrite(data, 1, n, f.get()) != n) io_fail("short write", path);
}

}  // namespace repose
