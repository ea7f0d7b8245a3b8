#pragma once

// Self-describing binary store of named float tensors, used for model
// checkpoints. On-disk layout (all integers little-endian regardless of
// host):
//
//   bytes 0..3   magic "ADPD"
//   u32          format version (currently 1)
//   u32          tensor count
//   per tensor:  u16 name length, UTF-8 name bytes, u8 rank,
//                rank x u64 dims, then numel x f32 payload (row-major)
//   footer       32-byte sha256 of every preceding byte
//
// Loading validates magic, then version, then the digest, then record
// structure, and reports each failure as a distinct error type: IoError
// (not this format at all), VersionError, IntegrityError (digest or
// record-structure mismatch, which is what truncation and corruption
// produce). Shape problems only arise later, when an archive is copied
// into a concrete model (load_params), and throw ShapeError naming the
// first offending tensor. save(load(p)) writes bytes identical to p.

#include "repose/params.hpp"
#include "repose/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace repose {

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

// Ordered collection of named tensors. Order is preserved through save/load
// (it is part of the byte-identity contract); names must be unique.
class Archive {
  public:
    static constexpr uint32_t kFormatVersion = 1;

    void put(const std::string& name, Shape shape, std::vector<float> data);
    void put_scalar(const std::string& name, double v);
    void put_text(const std::string& name, const std::string& text);  // one value per byte
    void put_u64s(const std::string& name, const std::vector<uint64_t>& words);  // u16 limbs

    bool has(const std::string& name) const;
    const TensorRecord& at(const std::string& name) const;  // StateError if missing
    double scalar(const std::string& name) const;
    std::string text(const std::string& name) const;
    std::vector<uint64_t> u64s(const std::string& name) const;

    const std::vector<TensorRecord>& records() const { return records_; }
    size_t size() const { return records_.size(); }

  private:
    std::vector<TensorRecord> records_;
};

void save_archive(const std::string& path, const Archive& a);
Archive load_archive(const std::string& path);

// In-memory encode/decode of the same byte format (save/load minus the file).
std::vector<uint8_t> encode_archive(const Archive& a);
Archive decode_archive(const std::vector<uint8_t>& bytes);

// Copies every parameter of ps into the archive under "<prefix>/<name>".
void put_params(Archive& a, const std::string& prefix, const ParameterSet<float>& ps);

// Copies values back into an existing set. Every parameter must be present
// under the prefix with an identical shape; the first miss or mismatch
// throws ShapeError naming the tensor. Extra archive entries are ignored.
void load_params(const Archive& a, const std::string& prefix, ParameterSet<float>& ps);

}  // namespace repose
