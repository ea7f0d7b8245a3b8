#pragma once

// Procedural articulated-sprite world: stick figures on a 32x32 canvas with
// fully separable appearance (colors, sizes) and geometry (joint angles)
// factors. Rendering is aliased coverage rasterization - no anti-aliasing -
// so palettes and masks are exact, and every routine is deterministic given
// its inputs.

#include "repose/common.hpp"
#include "repose/rng.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace repose {

// A pose whose rendered figure leaves the frame; callers resample.
struct RejectionError : Error {
    using Error::Error;
};

// Interleaved 8-bit RGB raster.
struct ImageU8 {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // size w*h*3, row-major

    static ImageU8 filled(int w, int h, std::array<uint8_t, 3> c) {
        ImageU8 im;
        im.w = w;
        im.h = h;
        im.px.resize(size_t(w) * size_t(h) * 3);
        for (int i = 0; i < w * h; ++i)
            for (int k = 0; k < 3; ++k) im.px[size_t(i) * 3 + size_t(k)] = c[size_t(k)];
        return im;
    }
    uint8_t* at(int x, int y) { return px.data() + (size_t(y) * size_t(w) + size_t(x)) * 3; }
    const uint8_t* at(int x, int y) const {
        return px.data() + (size_t(y) * size_t(w) + size_t(x)) * 3;
    }
    bool operator==(const ImageU8& o) const { return w == o.w && h == o.h && px == o.px; }
};

// Appearance factors. Colors are 8-bit RGB; every figure color keeps a
// max-channel distance of at least 77/255 (~0.30) from the background so the
// figure is always segmentable.
struct Identity {
    std::array<uint8_t, 3> head_color{}, torso_color{}, arm_color{}, leg_color{},
        background_color{};
    int limb_thickness = 1;  // 1 or 2 px
    int head_radius = 4;     // 3..5 px

    bool operator==(const Identity& o) const {
        return head_color == o.head_color && torso_color == o.torso_color &&
               arm_color == o.arm_color && leg_color == o.leg_color &&
               background_color == o.background_color && limb_thickness == o.limb_thickness &&
               head_radius == o.head_radius;
    }
};

// Geometry factors: joint angles in radians plus two expression scalars.
// Limb angles use a mirrored frame (one sign convention per side), so the
// all-zero pose is an upright figure with exact left/right symmetry.
struct Pose {
    double torso_tilt = 0;   // [-0.4, 0.4], lean from vertical
    double neck = 0;         // [-0.5, 0.5], head bend relative to torso
    double shoulder_r = 0;   // [-0.5, 2.2], arm swing from the rest splay
    double shoulder_l = 0;
    double elbow_r = 0;      // [0, 2.6], forearm flexion
    double elbow_l = 0;
    double hip_r = 0;        // [-0.5, 0.9], leg swing from the rest splay
    double hip_l = 0;
    double knee_r = 0;       // [0, 2.0], shin flexion
    double knee_l = 0;
    double mouth_curve = 0;  // [-1, 1], frown..smile
    double eye_open = 1;     // [0, 1], closed..open

    bool operator==(const Pose& o) const {
        return torso_tilt == o.torso_tilt && neck == o.neck && shoulder_r == o.shoulder_r &&
               shoulder_l == o.shoulder_l && elbow_r == o.elbow_r && elbow_l == o.elbow_l &&
               hip_r == o.hip_r && hip_l == o.hip_l && knee_r == o.knee_r &&
               knee_l == o.knee_l && mouth_curve == o.mouth_curve && eye_open == o.eye_open;
    }
};

// Inclusive articulation limits, one row per Pose field, in field order.
struct JointLimits {
    double lo, hi;
};
constexpr std::array<JointLimits, 12> kJointLimits{{{-0.4, 0.4},
                                                    {-0.5, 0.5},
                                                    {-0.5, 2.2},
                                                    {-0.5, 2.2},
                                                    {0.0, 2.6},
                                                    {0.0, 2.6},
                                                    {-0.5, 0.9},
                                                    {-0.5, 0.9},
                                                    {0.0, 2.0},
                                                    {0.0, 2.0},
                                                    {-1.0, 1.0},
                                                    {0.0, 1.0}}};

struct RenderResult {
    ImageU8 image;
    std::vector<uint8_t> mask;  // size*size entries, 1 where the figure drew
};

// Fixed palette for the geometry map: each bone gets its own color on black,
// face landmarks get two more. Indexed by bone enum below.
enum class MapPart : int {
    forearm_l = 0,
    forearm_r,
    upper_arm_l,
    upper_arm_r,
    shin_l,
    shin_r,
    thigh_l,
    thigh_r,
    neck,
    torso,
    eyes,
    mouth,
    count
};
constexpr std::array<std::array<uint8_t, 3>, size_t(MapPart::count)> kMapPalette{{
    {85, 255, 0},    // forearm_l
    {255, 255, 0},   // forearm_r
    {170, 255, 0},   // upper_arm_l
    {255, 170, 0},   // upper_arm_r
    {0, 85, 255},    // shin_l
    {0, 255, 170},   // shin_r
    {0, 170, 255},   // thigh_l
    {0, 255, 85},    // thigh_r
    {255, 85, 0},    // neck
    {255, 0, 0},     // torso
    {255, 0, 255},   // eyes
    {255, 0, 170},   // mouth
}};

// One generated training example: one identity rendered in two poses, plus
// the geometry map and figure mask for the target frame.
struct SpriteSample {
    Identity identity;
    Pose ref_pose, tgt_pose;
    ImageU8 ref_image, tgt_image;
    ImageU8 pose_map;                 // geometry map of tgt_pose
    std::vector<uint8_t> figure_mask;  // of tgt_image
};

// Deterministic aliased rasterization of the figure; throws RejectionError
// when any part of the figure would leave the frame.
RenderResult render_figure(const Identity& id, const Pose& pose, int size = 32);

// Geometry-only map: bones in the fixed palette on black, face landmark dots
// sized by the expression scalars. Depends on the Pose alone.
ImageU8 render_pose_map(const Pose& pose, int size = 32);

// Random factors. Draw order is pinned (documented in the implementation) so
// results are reproducible from the rng seed alone.
Identity sample_identity(Rng& rng);
Pose sample_pose(Rng& rng);

// One identity, two independent in-frame poses, rendered. Resamples a pose
// on frame rejection; more than 100 consecutive rejections is a
// configuration error.
SpriteSample sample_pair(Rng& rng);

// Condition-dropout augmentation: with probability p_face erase the face
// landmark dots, and independently per arm with probability p_hand erase
// that forearm bone (exact palette match; erased pixels turn black). The
// torso and neck bones are never touched. Draw order: face, right arm,
// left arm.
ImageU8 augment_mask_pose(const ImageU8& pose_map, Rng& rng, double p_face = 0.3,
                          double p_hand = 0.3);

}  // namespace repose
