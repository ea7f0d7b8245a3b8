#pragma once

// On-disk sample store. Layout per sample index NNNNNN (zero-padded, 6
// digits): NNNNNN_ref.png, NNNNNN_tgt.png, NNNNNN_pose.png (8-bit RGB),
// NNNNNN_mask.png (8-bit gray, 0/255), NNNNNN_meta.txt (key=value lines:
// colors as "r,g,b" in [0,255], angles with 6 decimals). manifest.txt holds
// one line per sample: index<TAB>sha256(ref)<TAB>sha256(tgt)<TAB>sha256(pose),
// hashing the exact file bytes. Generation uses per-index seeds
// (base seed + index), so any sample is reproducible in isolation.

#include "repose/sprite.hpp"
#include "repose/tensor.hpp"

#include <string>
#include <vector>

namespace repose {

// Generates n samples under out_dir (created if missing) and returns the
// sha256 of the manifest text, which identifies the dataset contents.
std::string write_dataset(int64_t n, uint64_t seed, const std::string& out_dir);

// Random-access reader. Construction parses and validates the manifest;
// sample(i) loads one sample from disk, verifying each hashed file against
// its manifest entry (mismatch throws IoError naming the file).
class DatasetReader {
  public:
    explicit DatasetReader(const std::string& dir);

    int64_t size() const { return int64_t(entries_.size()); }
    SpriteSample sample(int64_t i) const;

    // sha256 of the manifest text; identifies the dataset
    const std::string& manifest_hash() const { return manifest_hash_; }

  private:
    struct Entry {
        int64_t index;
        std::string sha_ref, sha_tgt, sha_pose;
    };
    std::string dir_;
    std::vector<Entry> entries_;
    std::string manifest_hash_;
};

// [0,255] u8 RGB <-> [-1,1] float tensor [3,H,W]; the u8->float->u8 round
// trip is exact.
Tensor<float> image_to_tensor(const ImageU8& im);
ImageU8 tensor_to_image(const Tensor<float>& t);

// 0/1 mask entries -> float tensor [1,H,W] of 0.0/1.0
Tensor<float> mask_to_tensor(const std::vector<uint8_t>& mask, int w, int h);

}  // namespace repose
