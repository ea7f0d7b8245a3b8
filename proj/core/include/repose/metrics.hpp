#pragma once

// Image-comparison metrics and the evaluation/ablation drivers.
//
// All image metrics take model-space tensors ([3,H,W], values nominally in
// [-1,1]) and remap to [0,1] internally, so reported numbers live on the
// usual unit pixel scale: L1 is the mean absolute pixel difference, PSNR is
// 10*log10(1/MSE) capped at 99.0 dB for (near-)identical images, SSIM uses
// an 8x8 uniform window with stride 4 (sized for 32x32 frames).
//
// Identity-Cos is the palette analogue of a face-embedding cosine: the
// ground-truth figure mask's bounding box is cut into four horizontal bands
// (head / torso / arms / legs), each band contributes its masked mean RGB
// (signed domain), and the metric is the cosine between the two stacked
// 12-dim descriptors. Both images are described through the *ground truth*
// mask, so the metric isolates appearance fidelity from segmentation error.

#include "repose/dataset.hpp"
#include "repose/tensor.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace repose {

double l1(const Tensor<float>& a, const Tensor<float>& b);
double psnr(const Tensor<float>& a, const Tensor<float>& b);  // dB, capped 99.0
double ssim(const Tensor<float>& a, const Tensor<float>& b);

// Per-band mean RGB; a band with no mask pixels is marked invalid and both
// descriptors of a comparison skip it.
struct IdentityDescriptor {
    std::array<double, 12> v{};     // band-major: [band*3 + channel]
    std::array<bool, 4> valid{};    // head, torso, arms, legs
    int skipped() const {
        int n = 0;
        for (bool b : valid) n += b ? 0 : 1;
        return n;
    }
};

// mask: row-major H*W entries, nonzero = figure. Throws NumericError when
// the mask is entirely empty.
IdentityDescriptor identity_descriptor(const Tensor<float>& img,
                                       const std::vector<uint8_t>& mask);

// Cosine over the bands valid in the ground-truth mask.
double identity_cos(const Tensor<float>& generated, const Tensor<float>& gt,
                    const std::vector<uint8_t>& figure_mask);

// ------------------------------------------------------------- evaluation

struct SampleMetrics {
    int64_t index = 0;
    double l1 = 0.0, psnr = 0.0, ssim = 0.0, idcos = 0.0;
};

struct MetricReport {
    std::vector<std::pair<std::string, std::string>> header;  // key=value echo
    std::vector<SampleMetrics> rows;                          // sample-index order
    double mean_l1 = 0.0, mean_psnr = 0.0, mean_ssim = 0.0, mean_idcos = 0.0;
    int64_t parts_skipped = 0;  // bands skipped across all samples
};

// Recomputes the aggregate fields from rows (aggregates are always the
// arithmetic means of the per-sample values).
void finalize_report(MetricReport& r);

// key=value header block, then TSV rows "index\tl1\tpsnr\tssim\tidcos".
// Numbers use shortest round-trip formatting, so equal reports serialize to
// identical bytes.
std::string format_report(const MetricReport& r);
void write_report(const std::string& path, const MetricReport& r);

// One generated image [3,S,S] for a held-out sample; rng is that sample's
// private stream.
using Generator = std::function<Tensor<float>(const SpriteSample&, Rng&)>;

// Evaluates `gen` on samples 0..n-1 of `reader`. Each sample gets its own
// rng stream derived from (seed, index), so results do not depend on
// evaluation order. `header` entries are prepended to the report header.
MetricReport evaluate_with(const Generator& gen, const DatasetReader& reader, int64_t n,
                           uint64_t seed,
                           std::vector<std::pair<std::string, std::string>> header = {});

// Full protocol: loads the checkpoint, generates each evaluation sample with
// classifier-free guidance (and the pose branch when the checkpoint carries
// one), and scores against the ground-truth target.
MetricReport evaluate(const std::string& ckpt_path, const std::string& data_dir, int64_t n,
                      uint64_t seed, int64_t sample_steps = 16, double cfg_scale = 2.0);

// -------------------------------------------------------------- ablation

struct AblationConfig {
    std::string ckpt_dir;    // where row checkpoints live / are written
    std::string data;        // training dataset (rows that need training)
    std::string eval_data;   // held-out dataset
    int64_t eval_n = 200;
    uint64_t eval_seed = 555;
    std::vector<uint64_t> seeds = {0, 1, 2};
    int64_t steps = 2000;
    int64_t base_steps = 1000;
    int64_t batch_size = 16;
    int64_t sample_steps = 16;
    double cfg_scale = 2.0;

    void validate() const;
};

AblationConfig parse_ablation_config(const std::string& path);

struct AblationRow {
    std::string name;                  // "full", "no-disentangle", "no-pretrain"
    bool failed = false;               // NaN/divergence while training a seed
    std::string note;                  // failure detail
    std::vector<double> idcos;         // one per seed
    std::vector<double> ssim;          // one per seed
    double median_idcos = 0.0;
    double median_ssim = 0.0;
};

struct AblationTable {
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<AblationRow> rows;     // full, no-disentangle, no-pretrain
    bool ordering_holds = false;       // idcos: full > no-disentangle > no-pretrain
};

// Trains (or reuses, when the row checkpoint already exists and matches the
// protocol) every row x seed combination, evaluates each on the held-out
// set, and checks the identity ordering full > no-disentangle > no-pretrain
// on the per-row medians. A row whose training diverges is marked failed
// and the table is still produced.
AblationTable run_ablation(const AblationConfig& cfg, std::ostream* log = nullptr);

std::string format_ablation_table(const AblationTable& t);

}  // namespace repose
