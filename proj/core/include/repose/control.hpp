#pragma once

// Conditioning branches around the base denoiser:
//
//  * appearance twin - a separately owned copy of the base net whose
//    forward pass over a clean reference image yields the key/value bank the
//    base net's attention consumes (token-axis concatenation);
//  * pose branch - a trainable copy of the base encoder+middle trunk plus a
//    small hint encoder and one zero-initialized 1x1 projection per decoder
//    injection site, emitting additive feature residuals;
//  * inference compositions - guided eps prediction, full guided sampling
//    with classifier-free guidance over the appearance bank, and the
//    zero-extra-weights connected-attention mode that banks key/values from
//    a re-noised reference through the base net itself.

#include "repose/diffusion.hpp"
#include "repose/unet.hpp"

#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace repose {

// True for parameters that belong to the encoder+middle trunk (as opposed to
// decoder / output-head parameters that only a full net has).
inline bool trunk_param(const std::string& name) {
    return name.rfind("time.", 0) == 0 || name.rfind("stem.", 0) == 0 ||
           name.rfind("enc", 0) == 0 || name.rfind("down", 0) == 0 || name.rfind("mid.", 0) == 0;
}

// A full architectural twin of `base` with its own parameter storage,
// value-initialized to bitwise equality with the base weights.
template <class T>
UNet<T> make_twin(const UNet<T>& base, Rng& rng) {
    require_t<StateError>(base.kind() == NetKind::full, "twin: base must be a full net");
    UNet<T> twin(base.config(), rng, NetKind::full);
    twin.params().copy_values_from(base.params());
    return twin;
}

// Key/value bank from the clean (un-noised) reference image, embedded with
// the consuming step's timestep so both passes share a time scale. The twin's
// own eps output is a discarded side product of the full pass.
template <class T>
KVBank<T> encode_reference(const UNet<T>& appearance, const Tensor<T>& ref,
                           const std::vector<int64_t>& ts) {
    return appearance.forward_capture_kv(ref, ts).bank;
}

// One guided eps prediction: the base net consumes the appearance bank (and
// optionally a residual bank) computed fresh for this step.
template <class T>
Tensor<T> guided_eps(const UNet<T>& base, const UNet<T>& appearance, const Tensor<T>& z_t,
                     const std::vector<int64_t>& ts, const Tensor<T>& ref,
                     const ResidualBank<T>* residuals = nullptr) {
    const KVBank<T> bank = encode_reference(appearance, ref, ts);
    return base.forward(z_t, ts, &bank, residuals);
}

// ------------------------------------------------------------- pose branch

template <class T>
class PoseControlNet {
  public:
    // Trunk weights start as a bitwise copy of the base encoder+middle; the
    // hint encoder is randomly initialized (variance-preserving scale) and
    // every output projection starts at exactly zero, so a fresh branch is a
    // guaranteed no-op on the pipeline it plugs into.
    PoseControlNet(const UNet<T>& base, Rng& rng)
        : trunk_(base.config(), rng, NetKind::trunk) {
        require_t<StateError>(base.kind() == NetKind::full,
                              "pose branch: base must be a full net");
        ParameterSet<T>& ps = trunk_.params();
        for (const std::string& name : std::vector<std::string>(ps.names())) {
            require_t<StateError>(base.params().has(name),
                                  "pose branch: base lacks trunk parameter '" + name + "'");
            const Tensor<T>& src = base.params().at(name);
            require_t<ShapeError>(src.shape() == ps.at(name).shape(),
                                  "pose branch: shape mismatch for '" + name + "'");
            ps.at(name).value_mut() = src.value();
        }
        const UNetConfig& cfg = trunk_.config();
        const int64_t C = cfg.base_channels;
        auto add_conv = [&](const std::string& p, int64_t out_ch, int64_t in_ch, int64_t k,
                            bool zero) {
            const int64_t fan_in = in_ch * k * k;
            std::vector<T> w = zero ? const_fill<T>(out_ch * fan_in, T(0))
                                    : he_uniform<T>(out_ch * fan_in, fan_in, rng);
            ps.add(p + ".w", Tensor<T>::from_data(Shape{out_ch, in_ch, k, k}, std::move(w)));
            ps.add(p + ".b",
                   Tensor<T>::from_data(Shape{out_ch}, const_fill<T>(out_ch, T(0))));
        };
        add_conv("hint.conv1", C, cfg.in_channels, 3, false);
        add_conv("hint.conv2", C, C, 3, false);
        for (int64_t l = 0; l < cfg.levels(); ++l)
            add_conv("zp" + std::to_string(l), cfg.width(l), cfg.width(l), 1, true);
        add_conv("zpmid", cfg.width(cfg.levels() - 1), cfg.width(cfg.levels() - 1), 1, true);
    }

    ParameterSet<T>& params() { return trunk_.params(); }
    const ParameterSet<T>& params() const { return trunk_.params(); }
    const UNet<T>& trunk() const { return trunk_; }

    // Hint path alone: pose map -> feature map at stem width, full resolution.
    Tensor<T> encode_hint(const Tensor<T>& pose_map) const {
        const ParameterSet<T>& ps = trunk_.params();
        Tensor<T> h = conv2d(pose_map, ps.at("hint.conv1.w"), ps.at("hint.conv1.b"), 1, 1);
        return conv2d(silu(h), ps.at("hint.conv2.w"), ps.at("hint.conv2.b"), 1, 1);
    }

    // Residual bank for one step: trunk consumes the noisy latent with the
    // hint added after the stem, then each captured feature passes through
    // its (initially zero) 1x1 projection. Order: level skips, then middle.
    ResidualBank<T> residuals(const Tensor<T>& z_t, const std::vector<int64_t>& ts,
                              const Tensor<T>& pose_map) const {
        require_t<ShapeError>(pose_map.shape() == z_t.shape(),
                              "pose branch: pose map must match the latent shape, got " +
                                  shape_str(pose_map.shape()) + " vs " + shape_str(z_t.shape()));
        const Tensor<T> hint = encode_hint(pose_map);
        const typename UNet<T>::EncodeOut enc = trunk_.encode_features(z_t, ts, &hint);
        const ParameterSet<T>& ps = trunk_.params();
        ResidualBank<T> out;
        for (int64_t l = 0; l < trunk_.config().levels(); ++l) {
            const std::string p = "zp" + std::to_string(l);
            out.push_back(conv2d(enc.skips[size_t(l)], ps.at(p + ".w"), ps.at(p + ".b"), 1, 0));
        }
        out.push_back(conv2d(enc.mid, ps.at("zpmid.w"), ps.at("zpmid.b"), 1, 0));
        return out;
    }

  private:
    UNet<T> trunk_;
};

// ------------------------------------------------------- sampling drivers

// Full conditional generation. Per step: the appearance bank is recomputed
// from the clean reference at the current timestep; the pose branch (when
// present) contributes residuals to both guidance branches; classifier-free
// guidance mixes the reference-conditioned prediction with the null-
// reference one (an all-zero image), which is exactly the branch that
// reference dropout exercises during training.
template <class T>
Tensor<T> guided_sample(const UNet<T>& base, const UNet<T>& appearance,
                        const PoseControlNet<T>* pose, const NoiseSchedule& ns,
                        const Tensor<T>& ref, std::type_identity_t<const Tensor<T>*> pose_map,
                        int64_t num_inference_steps, double cfg_scale, Rng& rng) {
    require_t<ConfigError>(pose == nullptr || pose_map != nullptr,
                           "guided_sample: pose branch needs a pose map");
    NoGradGuard<T> ng;
    const int64_t B = ref.dim(0);
    const Tensor<T> null_ref = Tensor<T>::zeros(ref.shape());
    Tensor<T> z = randn<T>(ref.shape(), rng);
    auto eps_fn = [&](const Tensor<T>& zt, int64_t t) {
        const std::vector<int64_t> ts(size_t(B), t);
        ResidualBank<T> res;
        if (pose) res = pose->residuals(zt, ts, *pose_map);
        const ResidualBank<T>* rp = pose ? &res : nullptr;
        const KVBank<T> bank = encode_reference(appearance, ref, ts);
        if (cfg_scale == 1.0) return base.forward(zt, ts, &bank, rp);
        Tensor<T> eps_c = base.forward(zt, ts, &bank, rp);
        const KVBank<T> bank_null = encode_reference(appearance, null_ref, ts);
        Tensor<T> eps_u = base.forward(zt, ts, &bank_null, rp);
        return cfg_combine(eps_u, eps_c, cfg_scale);
    };
    return ddim_sample(ns, eps_fn, z, num_inference_steps);
}

// Zero-extra-weights appearance transfer: the base net itself banks key/
// values from the reference re-noised to the current step (one fixed noise
// draw reused across steps), and the target pass consumes that bank.
template <class T>
Tensor<T> connected_attention_sample(const UNet<T>& base, const NoiseSchedule& ns,
                                     const Tensor<T>& ref, int64_t num_inference_steps,
                                     Rng& rng) {
    NoGradGuard<T> ng;
    const int64_t B = ref.dim(0);
    const Tensor<T> eps_fix = randn<T>(ref.shape(), rng);
    Tensor<T> z = randn<T>(ref.shape(), rng);
    auto eps_fn = [&](const Tensor<T>& zt, int64_t t) {
        const std::vector<int64_t> ts(size_t(B), t);
        const Tensor<T> noised = forward_diffuse(ns, ref, t, eps_fix);
        const KVBank<T> bank = base.forward_capture_kv(noised, ts).bank;
        return base.forward(zt, ts, &bank, nullptr);
    };
    return ddim_sample(ns, eps_fn, z, num_inference_steps);
}

// Unconditional generation from the base net alone.
template <class T>
Tensor<T> unguided_sample(const UNet<T>& base, const NoiseSchedule& ns, Shape shape,
                          int64_t num_inference_steps, Rng& rng) {
    NoGradGuard<T> ng;
    const int64_t B = shape.at(0);
    Tensor<T> z = randn<T>(std::move(shape), rng);
    auto eps_fn = [&](const Tensor<T>& zt, int64_t t) {
        return base.forward(zt, std::vector<int64_t>(size_t(B), t));
    };
    return ddim_sample(ns, eps_fn, z, num_inference_steps);
}

}  // namespace repose
