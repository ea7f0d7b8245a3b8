#include "repose/sprite.hpp"

#include <cmath>
#include <string>

namespace repose {

namespace {

// All geometry lives in centered coordinates: x is a signed offset from the
// vertical canvas centerline, y runs downward from the top edge. Pixel (i,j)
// has center (i + 0.5 - size/2, j + 0.5); both parts are exact binary
// fractions, and left/right limb offsets are exact negations of each other,
// so a mirrored pose rasterizes to the mirrored pixel set bit for bit.
struct P2 {
    double x, y;
};

// skeleton proportions in pixels at size 32 (scaled linearly otherwise)
constexpr double kPelvisY = 20.0;
constexpr double kTorsoLen = 7.0;
constexpr double kNeckLen = 1.5;
constexpr double kUpperArmLen = 4.0;
constexpr double kForearmLen = 4.0;
constexpr double kThighLen = 4.5;
constexpr double kShinLen = 4.5;
constexpr double kShoulderW = 2.0;
constexpr double kHipW = 1.2;
constexpr double kArmSplay = 0.35;  // rest angle of the arm from vertical
constexpr double kLegSplay = 0.15;  // rest angle of the leg from vertical
constexpr double kMapHeadR = 4.0;   // nominal head radius in the geometry map

// direction from a swing angle measured off the downward vertical, with the
// x component mirrored by side sign s (+1 right, -1 left)
inline P2 swing_dir(double psi, double s) { return {s * std::sin(psi), std::cos(psi)}; }

struct Skeleton {
    P2 pelvis, neck_base, head_base, head_center;
    P2 shoulder[2], elbow[2], hand[2];  // [0] = left, [1] = right
    P2 hip[2], knee[2], foot[2];
    P2 head_up, head_right;  // unit frame of the face
    double scale;
};

Skeleton build_skeleton(const Pose& p, int size, double head_radius) {
    const double sc = double(size) / 32.0;
    Skeleton sk;
    sk.scale = sc;

    const double tilt = p.torso_tilt;
    const P2 up_t{std::sin(tilt), -std::cos(tilt)};   // torso up direction
    const P2 right_t{std::cos(tilt), std::sin(tilt)};  // torso right direction

    sk.pelvis = {0.0, kPelvisY * sc};
    sk.neck_base = {sk.pelvis.x + kTorsoLen * sc * up_t.x, sk.pelvis.y + kTorsoLen * sc * up_t.y};

    const double head_dir = tilt + p.neck;
    const P2 up_h{std::sin(head_dir), -std::cos(head_dir)};
    sk.head_up = up_h;
    sk.head_right = {std::cos(head_dir), std::sin(head_dir)};
    sk.head_base = {sk.neck_base.x + kNeckLen * sc * up_h.x,
                    sk.neck_base.y + kNeckLen * sc * up_h.y};
    sk.head_center = {sk.head_base.x + head_radius * sc * up_h.x,
                      sk.head_base.y + head_radius * sc * up_h.y};

    const double shoulder_angle[2] = {p.shoulder_l, p.shoulder_r};
    const double elbow_angle[2] = {p.elbow_l, p.elbow_r};
    const double hip_angle[2] = {p.hip_l, p.hip_r};
    const double knee_angle[2] = {p.knee_l, p.knee_r};
    for (int i = 0; i < 2; ++i) {
        const double s = i == 0 ? -1.0 : 1.0;
        sk.shoulder[i] = {sk.neck_base.x + s * (kShoulderW * sc * right_t.x),
                          sk.neck_base.y + s * (kShoulderW * sc * right_t.y)};
        const double psi_ua = kArmSplay + shoulder_angle[i];
        const P2 dua = swing_dir(psi_ua, s);
        sk.elbow[i] = {sk.shoulder[i].x + kUpperArmLen * sc * dua.x,
                       sk.shoulder[i].y + kUpperArmLen * sc * dua.y};
        const double psi_fa = psi_ua - elbow_angle[i];
        const P2 dfa = swing_dir(psi_fa, s);
        sk.hand[i] = {sk.elbow[i].x + kForearmLen * sc * dfa.x,
                      sk.elbow[i].y + kForearmLen * sc * dfa.y};

        sk.hip[i] = {sk.pelvis.x + s * (kHipW * sc * right_t.x),
                     sk.pelvis.y + s * (kHipW * sc * right_t.y)};
        const double psi_th = kLegSplay + hip_angle[i];
        const P2 dth = swing_dir(psi_th, s);
        sk.knee[i] = {sk.hip[i].x + kThighLen * sc * dth.x,
                      sk.hip[i].y + kThighLen * sc * dth.y};
        const double psi_sh = psi_th + knee_angle[i];
        const P2 dsh = swing_dir(psi_sh, s);
        sk.foot[i] = {sk.knee[i].x + kShinLen * sc * dsh.x,
                      sk.knee[i].y + kShinLen * sc * dsh.y};
    }
    return sk;
}

// throws RejectionError when a primitive's coverage could leave the canvas
void require_in_frame(const P2& p, double reach, int size, const char* what) {
    const double half = double(size) / 2.0;
    if (!(p.x - reach >= -half && p.x + reach <= half && p.y - reach >= 0.0 &&
          p.y + reach <= double(size)))
        throw RejectionError(std::string("figure leaves the frame at the ") + what);
}

struct Raster {
    ImageU8* im;
    std::vector<uint8_t>* mask;  // optional
    int size;

    void paint(int i, int j, const std::array<uint8_t, 3>& c) const {
        uint8_t* p = im->at(i, j);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
        if (mask) (*mask)[size_t(j) * size_t(size) + size_t(i)] = 1;
    }

    void disc(const P2& c, double r, const std::array<uint8_t, 3>& col) const {
        const double half = double(size) / 2.0;
        for (int j = 0; j < size; ++j)
            for (int i = 0; i < size; ++i) {
                const double px = (double(i) + 0.5) - half;
                const double py = double(j) + 0.5;
                const double dx = px - c.x, dy = py - c.y;
                if (dx * dx + dy * dy <= r * r) paint(i, j, col);
            }
    }

    void seg(const P2& a, const P2& b, double half_w, const std::array<uint8_t, 3>& col) const {
        const double half = double(size) / 2.0;
        const double dx = b.x - a.x, dy = b.y - a.y;
        const double len2 = dx * dx + dy * dy;
        const double w2 = half_w * half_w;
        for (int j = 0; j < size; ++j)
            for (int i = 0; i < size; ++i) {
                const double px = (double(i) + 0.5) - half;
                const double py = double(j) + 0.5;
                double ux = px - a.x, uy = py - a.y;
                if (len2 > 0.0) {
                    double t = (ux * dx + uy * dy) / len2;
                    t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
                    ux -= t * dx;
                    uy -= t * dy;
                }
                if (ux * ux + uy * uy <= w2) paint(i, j, col);
            }
    }
};

// face feature geometry shared by the figure and the map; r is the head
// radius the features scale with
struct FaceGeom {
    P2 eye[2];
    double eye_r;
    std::array<P2, 7> mouth;  // polyline through the mouth arc
};

FaceGeom face_geom(const Skeleton& sk, const Pose& p, double r) {
    FaceGeom f;
    const double sc = sk.scale;
    for (int i = 0; i < 2; ++i) {
        const double s = i == 0 ? -1.0 : 1.0;
        f.eye[i] = {sk.head_center.x + s * (0.40 * r * sc * sk.head_right.x) +
                        0.15 * r * sc * sk.head_up.x,
                    sk.head_center.y + s * (0.40 * r * sc * sk.head_right.y) +
                        0.15 * r * sc * sk.head_up.y};
    }
    f.eye_r = (0.12 + 0.16 * p.eye_open) * r * sc;
    for (int k = 0; k < 7; ++k) {
        const double xh = double(k - 3) / 3.0;  // -1..1, exactly mirrored
        const double along = xh * (0.45 * r * sc);
        const double below = -0.45 * r * sc + p.mouth_curve * 0.25 * r * sc * (xh * xh - 0.5);
        f.mouth[size_t(k)] = {
            sk.head_center.x + along * sk.head_right.x + below * sk.head_up.x,
            sk.head_center.y + along * sk.head_right.y + below * sk.head_up.y};
    }
    return f;
}

}  // namespace

RenderResult render_figure(const Identity& id, const Pose& pose, int size) {
    require_t<ConfigError>(size >= 8, "render: canvas too small");
    const Skeleton sk = build_skeleton(pose, size, double(id.head_radius));
    const double sc = sk.scale;
    const double hw = double(id.limb_thickness) / 2.0;
    const double head_r = double(id.head_radius) * sc;

    // frame check before touching any pixel
    for (int i = 0; i < 2; ++i) {
        require_in_frame(sk.shoulder[i], hw, size, "shoulder");
        require_in_frame(sk.elbow[i], hw, size, "elbow");
        require_in_frame(sk.hand[i], hw, size, "hand");
        require_in_frame(sk.hip[i], hw, size, "hip");
        require_in_frame(sk.knee[i], hw, size, "knee");
        require_in_frame(sk.foot[i], hw, size, "foot");
    }
    require_in_frame(sk.pelvis, hw, size, "pelvis");
    require_in_frame(sk.neck_base, hw, size, "neck");
    require_in_frame(sk.head_center, head_r, size, "head");

    RenderResult out;
    out.image = ImageU8::filled(size, size, id.background_color);
    out.mask.assign(size_t(size) * size_t(size), 0);
    Raster r{&out.image, &out.mask, size};

    // draw order: limbs first, trunk over them, head on top, face etched last
    for (int i = 0; i < 2; ++i) {
        r.seg(sk.hip[i], sk.knee[i], hw, id.leg_color);
        r.seg(sk.knee[i], sk.foot[i], hw, id.leg_color);
    }
    for (int i = 0; i < 2; ++i) {
        r.seg(sk.shoulder[i], sk.elbow[i], hw, id.arm_color);
        r.seg(sk.elbow[i], sk.hand[i], hw, id.arm_color);
    }
    r.seg(sk.pelvis, sk.neck_base, hw, id.torso_color);
    r.seg(sk.neck_base, sk.head_base, hw, id.torso_color);
    r.disc(sk.head_center, head_r, id.head_color);

    // face features etched in the background color (still part of the mask)
    const FaceGeom f = face_geom(sk, pose, double(id.head_radius));
    r.disc(f.eye[0], f.eye_r, id.background_color);
    r.disc(f.eye[1], f.eye_r, id.background_color);
    const double mouth_hw = 0.12 * double(id.head_radius) * sc + 0.15;
    for (int k = 0; k + 1 < 7; ++k)
        r.seg(f.mouth[size_t(k)], f.mouth[size_t(k) + 1], mouth_hw, id.background_color);

    return out;
}

ImageU8 render_pose_map(const Pose& pose, int size) {
    require_t<ConfigError>(size >= 8, "render: canvas too small");
    const Skeleton sk = build_skeleton(pose, size, kMapHeadR);
    const double sc = sk.scale;
    const double hw = 0.5;

    for (int i = 0; i < 2; ++i) {
        require_in_frame(sk.shoulder[i], hw, size, "shoulder");
        require_in_frame(sk.elbow[i], hw, size, "elbow");
        require_in_frame(sk.hand[i], hw, size, "hand");
        require_in_frame(sk.hip[i], hw, size, "hip");
        require_in_frame(sk.knee[i], hw, size, "knee");
        require_in_frame(sk.foot[i], hw, size, "foot");
    }
    require_in_frame(sk.head_center, kMapHeadR * sc, size, "head");

    ImageU8 im = ImageU8::filled(size, size, {0, 0, 0});
    Raster r{&im, nullptr, size};
    const auto& pal = kMapPalette;
    auto col = [&](MapPart p) { return pal[size_t(p)]; };

    // bones: forearms first so the trunk always overdraws any crossing,
    // then upper arms, shins, thighs, neck, torso
    r.seg(sk.elbow[0], sk.hand[0], hw, col(MapPart::forearm_l));
    r.seg(sk.elbow[1], sk.hand[1], hw, col(MapPart::forearm_r));
    r.seg(sk.shoulder[0], sk.elbow[0], hw, col(MapPart::upper_arm_l));
    r.seg(sk.shoulder[1], sk.elbow[1], hw, col(MapPart::upper_arm_r));
    r.seg(sk.knee[0], sk.foot[0], hw, col(MapPart::shin_l));
    r.seg(sk.knee[1], sk.foot[1], hw, col(MapPart::shin_r));
    r.seg(sk.hip[0], sk.knee[0], hw, col(MapPart::thigh_l));
    r.seg(sk.hip[1], sk.knee[1], hw, col(MapPart::thigh_r));
    r.seg(sk.neck_base, sk.head_base, hw, col(MapPart::neck));
    r.seg(sk.pelvis, sk.neck_base, hw, col(MapPart::torso));

    // face landmark dots, sized by the expression scalars
    const FaceGeom f = face_geom(sk, pose, kMapHeadR);
    const double eye_r = (0.30 + 0.40 * pose.eye_open) * sc;
    r.disc(f.eye[0], eye_r, col(MapPart::eyes));
    r.disc(f.eye[1], eye_r, col(MapPart::eyes));
    for (int k = 0; k < 7; k += 1)
        if (k != 1 && k != 5)  // 5 dots, placed symmetrically: ends, inner pair, center
            r.disc(f.mouth[size_t(k)], 0.45 * sc, col(MapPart::mouth));

    return im;
}

Identity sample_identity(Rng& rng) {
    // draw order: head, torso, arm, leg colors (3 channels each), then the
    // background with rejection until it is far enough from all four part
    // colors, then limb thickness, then head radius
    Identity id;
    auto draw3 = [&rng] {
        std::array<uint8_t, 3> c;
        for (auto& ch : c) ch = uint8_t(rng.uniform_u64(256));
        return c;
    };
    id.head_color = draw3();
    id.torso_color = draw3();
    id.arm_color = draw3();
    id.leg_color = draw3();

    auto far_enough = [](const std::array<uint8_t, 3>& a, const std::array<uint8_t, 3>& b) {
        int m = 0;
        for (int k = 0; k < 3; ++k) m = std::max(m, std::abs(int(a[size_t(k)]) - int(b[size_t(k)])));
        return m >= 77;  // 77/255 > 0.3 max-channel distance
    };
    bool ok = false;
    for (int tries = 0; tries < 1000 && !ok; ++tries) {
        id.background_color = draw3();
        ok = far_enough(id.head_color, id.background_color) &&
             far_enough(id.torso_color, id.background_color) &&
             far_enough(id.arm_color, id.background_color) &&
             far_enough(id.leg_color, id.background_color);
    }
    require_t<ConfigError>(ok, "sample_identity: no segmentable background after 1000 tries");

    id.limb_thickness = int(1 + rng.uniform_u64(2));
    id.head_radius = int(3 + rng.uniform_u64(3));
    return id;
}

Pose sample_pose(Rng& rng) {
    // one uniform draw per field, in declaration order, quantized to 6
    // decimals so serialized poses reproduce the draw exactly
    auto q6 = [](double v) { return double(std::llround(v * 1e6)) / 1e6; };
    double a[12];
    for (size_t i = 0; i < 12; ++i)
        a[i] = q6(rng.uniform(kJointLimits[i].lo, kJointLimits[i].hi));
    Pose p;
    p.torso_tilt = a[0];
    p.neck = a[1];
    p.shoulder_r = a[2];
    p.shoulder_l = a[3];
    p.elbow_r = a[4];
    p.elbow_l = a[5];
    p.hip_r = a[6];
    p.hip_l = a[7];
    p.knee_r = a[8];
    p.knee_l = a[9];
    p.mouth_curve = a[10];
    p.eye_open = a[11];
    return p;
}

SpriteSample sample_pair(Rng& rng) {
    SpriteSample s;
    s.identity = sample_identity(rng);

    auto draw_rendered_pose = [&](Pose& pose_out, RenderResult& render_out) {
        for (int tries = 0; tries < 100; ++tries) {
            Pose p = sample_pose(rng);
            try {
                RenderResult r = render_figure(s.identity, p);
                pose_out = p;
                render_out = std::move(r);
                return;
            } catch (const RejectionError&) {
                continue;  // out of frame; resample
            }
        }
        throw ConfigError("sample_pair: 100 consecutive out-of-frame poses");
    };

    RenderResult ref, tgt;
    draw_rendered_pose(s.ref_pose, ref);
    draw_rendered_pose(s.tgt_pose, tgt);
    s.ref_image = std::move(ref.image);
    s.tgt_image = std::move(tgt.image);
    s.figure_mask = std::move(tgt.mask);
    s.pose_map = render_pose_map(s.tgt_pose);
    return s;
}

ImageU8 augment_mask_pose(const ImageU8& pose_map, Rng& rng, double p_face, double p_hand) {
    require_t<ConfigError>(p_face >= 0.0 && p_face <= 1.0 && p_hand >= 0.0 && p_hand <= 1.0,
                           "augment: probabilities must lie in [0,1]");
    // decision order: face, right forearm, left forearm
    const bool erase_face = rng.uniform() < p_face;
    const bool erase_r = rng.uniform() < p_hand;
    const bool erase_l = rng.uniform() < p_hand;

    ImageU8 out = pose_map;
    auto erase_color = [&out](const std::array<uint8_t, 3>& c) {
        for (size_t i = 0; i + 2 < out.px.size(); i += 3)
            if (out.px[i] == c[0] && out.px[i + 1] == c[1] && out.px[i + 2] == c[2])
                out.px[i] = out.px[i + 1] = out.px[i + 2] = 0;
    };
    if (erase_face) {
        erase_color(kMapPalette[size_t(MapPart::eyes)]);
        erase_color(kMapPalette[size_t(MapPart::mouth)]);
    }
    if (erase_r) erase_color(kMapPalette[size_t(MapPart::forearm_r)]);
    if (erase_l) erase_color(kMapPalette[size_t(MapPart::forearm_l)]);
    return out;
}

}  // namespace repose
