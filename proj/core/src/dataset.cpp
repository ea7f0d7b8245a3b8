#include "repose/dataset.hpp"

#include "repose/image_io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>

namespace repose {

namespace {

std::string sample_stem(const std::string& dir, int64_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06" PRId64, index);
    return dir + "/" + buf;
}

std::string color_str(const std::array<uint8_t, 3>& c) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%d,%d,%d", int(c[0]), int(c[1]), int(c[2]));
    return buf;
}

std::array<uint8_t, 3> parse_color(const std::string& s, const std::string& path) {
    int r = -1, g = -1, b = -1;
    if (std::sscanf(s.c_str(), "%d,%d,%d", &r, &g, &b) != 3 || r < 0 || r > 255 || g < 0 ||
        g > 255 || b < 0 || b > 255)
        throw IoError("malformed color '" + s + "' in " + path);
    return {uint8_t(r), uint8_t(g), uint8_t(b)};
}

void append_pose(std::string& meta, const char* prefix, const Pose& p) {
    const std::pair<const char*, double> fields[] = {
        {"torso_tilt", p.torso_tilt}, {"neck", p.neck},
        {"shoulder_r", p.shoulder_r}, {"shoulder_l", p.shoulder_l},
        {"elbow_r", p.elbow_r},       {"elbow_l", p.elbow_l},
        {"hip_r", p.hip_r},           {"hip_l", p.hip_l},
        {"knee_r", p.knee_r},         {"knee_l", p.knee_l},
        {"mouth_curve", p.mouth_curve}, {"eye_open", p.eye_open},
    };
    char buf[64];
    for (const auto& [name, v] : fields) {
        std::snprintf(buf, sizeof buf, "%s_%s=%.6f\n", prefix, name, v);
        meta += buf;
    }
}

double parse_angle(const std::map<std::string, std::string>& kv, const std::string& key,
                   const std::string& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("missing key '" + key + "' in " + path);
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str()) throw IoError("malformed value for '" + key + "' in " + path);
    return v;
}

Pose parse_pose(const std::map<std::string, std::string>& kv, const std::string& prefix,
                const std::string& path) {
    Pose p;
    p.torso_tilt = parse_angle(kv, prefix + "_torso_tilt", path);
    p.neck = parse_angle(kv, prefix + "_neck", path);
    p.shoulder_r = parse_angle(kv, prefix + "_shoulder_r", path);
    p.shoulder_l = parse_angle(kv, prefix + "_shoulder_l", path);
    p.elbow_r = parse_angle(kv, prefix + "_elbow_r", path);
    p.elbow_l = parse_angle(kv, prefix + "_elbow_l", path);
    p.hip_r = parse_angle(kv, prefix + "_hip_r", path);
    p.hip_l = parse_angle(kv, prefix + "_hip_l", path);
    p.knee_r = parse_angle(kv, prefix + "_knee_r", path);
    p.knee_l = parse_angle(kv, prefix + "_knee_l", path);
    p.mouth_curve = parse_angle(kv, prefix + "_mouth_curve", path);
    p.eye_open = parse_angle(kv, prefix + "_eye_open", path);
    return p;
}

}  // namespace

std::string write_dataset(int64_t n, uint64_t seed, const std::string& out_dir) {
    require_t<ConfigError>(n >= 0, "write_dataset: negative sample count");
    std::filesystem::create_directories(out_dir);

    std::string manifest;
    for (int64_t i = 0; i < n; ++i) {
        Rng rng(seed + uint64_t(i));  // per-index seed
        const SpriteSample s = sample_pair(rng);
        const std::string stem = sample_stem(out_dir, i);

        write_png_rgb(stem + "_ref.png", s.ref_image);
        write_png_rgb(stem + "_tgt.png", s.tgt_image);
        write_png_rgb(stem + "_pose.png", s.pose_map);
        write_png_gray(stem + "_mask.png", s.tgt_image.w, s.tgt_image.h, s.figure_mask);

        std::string meta;
        meta += "head_color=" + color_str(s.identity.head_color) + "\n";
        meta += "torso_color=" + color_str(s.identity.torso_color) + "\n";
        meta += "arm_color=" + color_str(s.identity.arm_color) + "\n";
        meta += "leg_color=" + color_str(s.identity.leg_color) + "\n";
        meta += "background_color=" + color_str(s.identity.background_color) + "\n";
        meta += "limb_thickness=" + std::to_string(s.identity.limb_thickness) + "\n";
        meta += "head_radius=" + std::to_string(s.identity.head_radius) + "\n";
        append_pose(meta, "ref", s.ref_pose);
        append_pose(meta, "tgt", s.tgt_pose);
        write_file_bytes(stem + "_meta.txt", meta.data(), meta.size());

        manifest += std::to_string(i);
        manifest += '\t';
        manifest += sha256_file(stem + "_ref.png");
        manifest += '\t';
        manifest += sha256_file(stem + "_tgt.png");
        manifest += '\t';
        manifest += sha256_file(stem + "_pose.png");
        manifest += '\n';
    }
    write_file_bytes(out_dir + "/manifest.txt", manifest.data(), manifest.size());
    return sha256_hex(manifest.data(), manifest.size());
}

DatasetReader::DatasetReader(const std::string& dir) : dir_(dir) {
    const std::string mpath = dir + "/manifest.txt";
    const std::vector<uint8_t> bytes = read_file_bytes(mpath);
    manifest_hash_ = sha256_hex(bytes.data(), bytes.size());

    const std::string text(bytes.begin(), bytes.end());
    size_t pos = 0;
    int64_t line_no = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (line.empty()) continue;

        Entry e;
        char sref[80], stgt[80], spose[80];
        if (std::sscanf(line.c_str(), "%" SCNd64 "\t%79s\t%79s\t%79s", &e.index, sref, stgt,
                        spose) != 4 ||
            std::strlen(sref) != 64 || std::strlen(stgt) != 64 || std::strlen(spose) != 64)
            throw IoError("malformed manifest line " + std::to_string(line_no) + " in " + mpath);
        e.sha_ref = sref;
        e.sha_tgt = stgt;
        e.sha_pose = spose;
        require_t<IoError>(e.index == int64_t(entries_.size()),
                           "manifest indices not contiguous at line " + std::to_string(line_no));
        entries_.push_back(std::move(e));
    }
}

SpriteSample DatasetReader::sample(int64_t i) const {
    require_t<ConfigError>(i >= 0 && i < size(), "dataset: sample index out of range");
    const Entry& e = entries_[size_t(i)];
    const std::string stem = sample_stem(dir_, e.index);

    auto checked_read = [&](const std::string& path, const std::string& want) {
        const std::vector<uint8_t> bytes = read_file_bytes(path);
        const std::string got = sha256_hex(bytes.data(), bytes.size());
        if (got != want)
            throw IoError("checksum mismatch for " + path + " (manifest " + want + ", file " +
                          got + ")");
    };
    checked_read(stem + "_ref.png", e.sha_ref);
    checked_read(stem + "_tgt.png", e.sha_tgt);
    checked_read(stem + "_pose.png", e.sha_pose);

    SpriteSample s;
    s.ref_image = read_png_rgb(stem + "_ref.png");
    s.tgt_image = read_png_rgb(stem + "_tgt.png");
    s.pose_map = read_png_rgb(stem + "_pose.png");
    int mw = 0, mh = 0;
    s.figure_mask = read_png_gray(stem + "_mask.png", mw, mh);
    require_t<IoError>(mw == s.tgt_image.w && mh == s.tgt_image.h,
                       "mask size mismatch for sample " + std::to_string(i));

    const std::string meta_path = stem + "_meta.txt";
    const std::vector<uint8_t> mb = read_file_bytes(meta_path);
    const std::string meta(mb.begin(), mb.end());
    std::map<std::string, std::string> kv;
    size_t pos = 0;
    while (pos < meta.size()) {
        size_t eol = meta.find('\n', pos);
        if (eol == std::string::npos) eol = meta.size();
        const std::string line = meta.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed meta line in " + meta_path);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto color_of = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end())
            throw IoError("missing key '" + std::string(key) + "' in " + meta_path);
        return parse_color(it->second, meta_path);
    };
    s.identity.head_color = color_of("head_color");
    s.identity.torso_color = color_of("torso_color");
    s.identity.arm_color = color_of("arm_color");
    s.identity.leg_color = color_of("leg_color");
    s.identity.background_color = color_of("background_color");
    s.identity.limb_thickness = int(parse_angle(kv, "limb_thickness", meta_path));
    s.identity.head_radius = int(parse_angle(kv, "head_radius", meta_path));
    s.ref_pose = parse_pose(kv, "ref", meta_path);
    s.tgt_pose = parse_pose(kv, "tgt", meta_path);
    return s;
}

Tensor<float> image_to_tensor(const ImageU8& im) {
    require_t<ConfigError>(im.w > 0 && im.h > 0, "image_to_tensor: empty image");
    const int64_t H = im.h, W = im.w;
    std::vector<float> v(size_t(3 * H * W));
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                v[size_t((c * H + y) * W + x)] =
                    float(im.px[size_t((y * W + x) * 3 + c)]) / 127.5f - 1.0f;
    return Tensor<float>::from_data({3, H, W}, std::move(v));
}

ImageU8 tensor_to_image(const Tensor<float>& t) {
    require_t<ShapeError>(t.shape().size() == 3 && t.shape()[0] == 3,
                          "tensor_to_image: want [3,H,W], got " + shape_str(t.shape()));
    const int64_t H = t.shape()[1], W = t.shape()[2];
    ImageU8 im;
    im.w = int(W);
    im.h = int(H);
    im.px.resize(size_t(3 * H * W));
    const auto& v = t.value();
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                float f = (v[size_t((c * H + y) * W + x)] + 1.0f) * 127.5f;
                f = f < 0.0f ? 0.0f : (f > 255.0f ? 255.0f : f);
                im.px[size_t((y * W + x) * 3 + c)] = uint8_t(std::lround(double(f)));
            }
    return im;
}

Tensor<float> mask_to_tensor(const std::vector<uint8_t>& mask, int w, int h) {
    require_t<ConfigError>(mask.size() == size_t(w) * size_t(h), "mask_to_tensor: size mismatch");
    std::vector<float> v(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] ? 1.0f : 0.0f;
    return Tensor<float>::from_data({1, int64_t(h), int64_t(w)}, std::move(v));
}

}  // namespace repose
