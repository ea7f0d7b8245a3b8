#pragma once

// Two-stage training driver.
//
// Stage 1 trains the appearance branch alone: the base denoiser is first
// warmed up unconditionally (base_steps) and frozen, the appearance net
// starts as its exact copy, and each step scores the base net's noise
// prediction on a target image while attending to the reference image's
// key/value bank. With probability cfg_dropout_p a sample's reference is
// replaced by the null reference (an all-zero image in model space), which
// trains the unconditional branch that classifier-free guidance mixes in at
// inference.
//
// Stage 2 loads a stage-1 checkpoint, attaches a zero-initialized pose
// branch, and fine-tunes appearance + pose jointly (the pose branch's
// residuals enter the same loss). Ablation switches:
//   no_pretrain    - appearance starts from fresh random weights instead of
//                    the stage-1 result (only the base is taken from the
//                    checkpoint)
//   no_disentangle - appearance stays frozen in stage 2; only the pose
//                    branch trains (the naive combination)
//   no_cfg         - reference dropout disabled
//   no_mask_aug    - pose maps are fed untouched (no occlusion augmentation)
//
// Every random draw flows from one Rng seeded by TrainConfig::seed, so
// (config, seed, dataset) pins the final checkpoint bytes.

#include "repose/checkpoint.hpp"
#include "repose/control.hpp"
#include "repose/dataset.hpp"
#include "repose/diffusion.hpp"
#include "repose/optim.hpp"
#include "repose/unet.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace repose {

struct TrainConfig {
    int64_t stage = 1;  // 1 = appearance pretraining, 2 = joint fine-tune
    int64_t steps = 2000;
    int64_t batch_size = 16;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    double cfg_dropout_p = 0.1;
    double p_face = 0.3;
    double p_hand = 0.3;
    uint64_t seed = 0;
    std::string data;      // dataset directory
    std::string ckpt_in;   // required for stage 2; optional warm start for stage 1
    std::string ckpt_out;  // where the final checkpoint is written ("" = skip)
    int64_t base_steps = 1000;  // unconditional warm-up before stage 1
    int64_t log_every = 100;    // 0 = silent
    int64_t schedule_steps = 256;
    bool no_pretrain = false;
    bool no_disentangle = false;
    bool no_cfg = false;
    bool no_mask_aug = false;
    bool stage2_reuse_adam = false;  // default: stage 2 starts fresh moments
    UNetConfig arch{};

    void validate() const;
};

// key=value per line, '#' starts a comment, blank lines ignored. Unknown
// keys and unparsable values throw ConfigError naming the line.
TrainConfig parse_train_config(const std::string& path);
TrainConfig parse_train_config_text(const std::string& text, const std::string& origin);
// Full echo of every field, parseable by parse_train_config_text.
std::string format_train_config(const TrainConfig& cfg);

// Everything a training run mutates, plus what a checkpoint persists.
struct TrainState {
    UNetConfig arch{};
    NoiseSchedule ns;
    std::unique_ptr<UNet<float>> base;
    std::unique_ptr<UNet<float>> app;
    std::unique_ptr<PoseControlNet<float>> pose;  // stage 2 only
    std::unique_ptr<Adam<float>> opt;             // absent after plain load
    Rng rng{0};
    int64_t stage = 1;
    int64_t step = 0;
    std::vector<double> loss_history;  // one entry per completed step
    std::string config_echo;
};

// One assembled batch: [B,3,S,S] model-space image tensors. pose is only
// defined for stage-2 batches.
struct TrainBatch {
    Tensor<float> ref, tgt, pose;
};

// Draws batch_size sample indices, loads the images, and (for with_pose,
// unless no_mask_aug) applies the occlusion augmentation to the pose maps.
TrainBatch make_batch(const DatasetReader& reader, const TrainConfig& cfg, bool with_pose,
                      Rng& rng);

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;  // pre-clip global L2 norm
};

// One forward/backward/update on st. Draw order per step: one dropout coin
// per sample (skipped when no_cfg), then the loss's timestep and noise
// draws. Throws NumericError naming st.step on a non-finite loss or
// gradient.
StepStats train_step(TrainState& st, const TrainConfig& cfg, const TrainBatch& batch);

// Runs the configured stage end to end (including the stage-1 base warm-up
// when no ckpt_in is given) and writes ckpt_out if set. log receives
// one line every log_every steps when non-null.
TrainState run_training(const TrainConfig& cfg, std::ostream* log = nullptr);

// Checkpoint <-> state. Persists architecture, base/appearance (and pose)
// weights, optimizer moments, step counter, rng state, loss history, and
// the config echo.
void save_checkpoint(const std::string& path, const TrainState& st);
TrainState load_checkpoint(const std::string& path);

}  // namespace repose
