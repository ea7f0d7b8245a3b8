#include "repose/checkpoint.hpp"

#include "repose/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace repose {

namespace {

// The payload fast path below memcpy's f32 blocks straight between file
// bytes and memory, which is only the little-endian encoding on a
// little-endian host.
static_assert(std::endian::native == std::endian::little,
              "tensor archive IO assumes a little-endian host");

constexpr char kMagic[4] = {'A', 'D', 'P', 'D'};
constexpr size_t kDigestLen = 32;
// magic + version + count + digest
constexpr size_t kMinFileLen = 4 + 4 + 4 + kDigestLen;

void append_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t(v >> 8));
}
void append_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}
void append_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}
void append_f32_block(std::vector<uint8_t>& out, const std::vector<float>& v) {
    const uint8_t* p = reinterpret_cast<const uint8_t*>(v.data());
    out.insert(out.end(), p, p + v.size() * 4);
}

// Bounds-checked little-endian reader over a byte buffer.
struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;

    void need(size_t k, const char* what) {
        require_t<IntegrityError>(pos + k <= n,
                                  std::string("archive record overruns file while reading ") +
                                      what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p[pos + size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t k, const char* what) {
        need(k, what);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

}  // namespace

void Archive::put(const std::string& name, Shape shape, std::vector<float> data) {
    require_t<StateError>(!has(name), "archive already holds '" + name + "'");
    require_t<StateError>(!name.empty() && name.size() <= 0xffff,
                          "archive tensor name must be 1..65535 bytes");
    require_t<StateError>(shape.size() <= 0xff, "archive tensor rank exceeds 255");
    for (int64_t d : shape)
        require_t<ShapeError>(d >= 0, "archive tensor '" + name + "' has negative extent");
    require_t<ShapeError>(numel(shape) == int64_t(data.size()),
                          "archive tensor '" + name + "': " + shape_str(shape) + " does not hold " +
                              std::to_string(data.size()) + " values");
    records_.push_back(TensorRecord{name, std::move(shape), std::move(data)});
}

void Archive::put_scalar(const std::string& name, double v) {
    put(name, Shape{}, std::vector<float>{float(v)});
}

void Archive::put_text(const std::string& name, const std::string& text) {
    std::vector<float> data(text.size());
    for (size_t i = 0; i < text.size(); ++i) data[i] = float(uint8_t(text[i]));
    put(name, Shape{int64_t(text.size())}, std::move(data));
}

void Archive::put_u64s(const std::string& name, const std::vector<uint64_t>& words) {
    // Four 16-bit limbs per word, low first. Small integers survive the f32
    // payload exactly, unlike raw 32-bit patterns (which could be NaNs).
    std::vector<float> data;
    data.reserve(words.size() * 4);
    for (uint64_t w : words)
        for (int k = 0; k < 4; ++k) data.push_back(float((w >> (16 * k)) & 0xffff));
    put(name, Shape{int64_t(words.size() * 4)}, std::move(data));
}

bool Archive::has(const std::string& name) const {
    for (const auto& r : records_)
        if (r.name == name) return true;
    return false;
}

const TensorRecord& Archive::at(const std::string& name) const {
    for (const auto& r : records_)
        if (r.name == name) return r;
    throw StateError("archive has no tensor '" + name + "'");
}

double Archive::scalar(const std::string& name) const {
    const TensorRecord& r = at(name);
    require_t<ShapeError>(r.data.size() == 1,
                          "archive tensor '" + name + "' is not a scalar: " + shape_str(r.shape));
    return double(r.data[0]);
}

std::string Archive::text(const std::string& name) const {
    const TensorRecord& r = at(name);
    std::string s(r.data.size(), '\0');
    for (size_t i = 0; i < r.data.size(); ++i) {
        const float v = r.data[i];
        require_t<IntegrityError>(v >= 0.0f && v <= 255.0f && v == std::floor(v),
                                  "archive tensor '" + name + "' is not byte-valued text");
        s[i] = char(uint8_t(v));
    }
    return s;
}

std::vector<uint64_t> Archive::u64s(const std::string& name) const {
    const TensorRecord& r = at(name);
    require_t<ShapeError>(r.data.size() % 4 == 0,
                          "archive tensor '" + name + "' is not a packed u64 list");
    std::vector<uint64_t> words(r.data.size() / 4, 0);
    for (size_t i = 0; i < r.data.size(); ++i) {
        const float v = r.data[i];
        require_t<IntegrityError>(v >= 0.0f && v <= 65535.0f && v == std::floor(v),
                                  "archive tensor '" + name + "' has a non-limb value");
        words[i / 4] |= uint64_t(uint16_t(v)) << (16 * (i % 4));
    }
    return words;
}

std::vector<uint8_t> encode_archive(const Archive& a) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    append_u32(out, Archive::kFormatVersion);
    require_t<StateError>(a.size() <= 0xffffffffu, "archive tensor count exceeds u32");
    append_u32(out, uint32_t(a.size()));
    for (const TensorRecord& r : a.records()) {
        append_u16(out, uint16_t(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        out.push_back(uint8_t(r.shape.size()));
        for (int64_t d : r.shape) append_u64(out, uint64_t(d));
        append_f32_block(out, r.data);
    }
    const std::array<uint8_t, 32> digest = sha256_raw(out.data(), out.size());
    out.insert(out.end(), digest.begin(), digest.end());
    return out;
}

Archive decode_archive(const std::vector<uint8_t>& bytes) {
    require_t<IntegrityError>(bytes.size() >= kMinFileLen,
                              "archive is shorter than the fixed framing (" +
                                  std::to_string(bytes.size()) + " bytes)");
    require_t<IoError>(std::memcmp(bytes.data(), kMagic, 4) == 0,
                       "not a tensor archive (bad magic)");

    Reader rd{bytes.data(), bytes.size() - kDigestLen};
    rd.pos = 4;
    const uint32_t version = rd.u32("format version");
    require_t<VersionError>(version == Archive::kFormatVersion,
                            "archive format version " + std::to_string(version) +
                                " is not supported (expected " +
                                std::to_string(Archive::kFormatVersion) + ")");

    const std::array<uint8_t, 32> digest = sha256_raw(bytes.data(), bytes.size() - kDigestLen);
    require_t<IntegrityError>(
        std::memcmp(digest.data(), bytes.data() + bytes.size() - kDigestLen, kDigestLen) == 0,
        "archive digest mismatch (file is corrupted or truncated)");

    const uint32_t count = rd.u32("tensor count");
    Archive a;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = rd.u16("name length");
        require_t<IntegrityError>(name_len > 0, "archive record has an empty name");
        std::string name = rd.str(name_len, "name");
        rd.need(1, "rank");
        const uint8_t rank_b = bytes[rd.pos++];
        Shape shape(rank_b);
        int64_t n = 1;
        for (uint8_t k = 0; k < rank_b; ++k) {
            const uint64_t d = rd.u64("dimension");
            require_t<IntegrityError>(d <= uint64_t(1) << 40, "archive dimension is implausible");
            shape[k] = int64_t(d);
            n *= shape[k];
        }
        std::vector<float> data(static_cast<size_t>(n));
        rd.need(size_t(n) * 4, "payload");
        std::memcpy(data.data(), bytes.data() + rd.pos, size_t(n) * 4);
        rd.pos += size_t(n) * 4;
        a.put(name, std::move(shape), std::move(data));
    }
    require_t<IntegrityError>(rd.pos == bytes.size() - kDigestLen,
                              "archive holds trailing bytes after the last record");
    return a;
}

void save_archive(const std::string& path, const Archive& a) {
    const std::vector<uint8_t> bytes = encode_archive(a);
    write_file_bytes(path, bytes.data(), bytes.size());
}

Archive load_archive(const std::string& path) {
    return decode_archive(read_file_bytes(path));
}

void put_params(Archive& a, const std::string& prefix, const ParameterSet<float>& ps) {
    for (size_t i = 0; i < ps.size(); ++i)
        a.put(prefix + "/" + ps.names()[i], ps[i].shape(), ps[i].value());
}

void load_params(const Archive& a, const std::string& prefix, ParameterSet<float>& ps) {
    for (size_t i = 0; i < ps.size(); ++i) {
        const std::string key = prefix + "/" + ps.names()[i];
        require_t<ShapeError>(a.has(key), "archive lacks tensor '" + key + "'");
        const TensorRecord& r = a.at(key);
        require_t<ShapeError>(r.shape == ps[i].shape(),
                              "archive tensor '" + key + "' has shape " + shape_str(r.shape) +
                                  ", model expects " + shape_str(ps[i].shape()));
        ps[i].value_mut() = r.data;
    }
}

}  // namespace repose
