#pragma once

// Noise-prediction UNet with ResNet blocks and transformer blocks whose
// self-attention can additionally consume an externally supplied key/value
// bank (concatenated along the token axis) and whose decoder accepts additive
// feature residuals at each skip connection and at the middle block.
//
// One class covers three uses:
//   * the base denoiser (full encoder/decoder),
//   * its architectural twin used to produce key/value banks from a
//     reference image (same config, separately owned weights),
//   * the encoder+middle trunk of the pose branch (NetKind::trunk registers
//     and runs only the downsampling half).
//
// Attention placement: transformer blocks appear wherever the feature map's
// spatial extent is <= cfg.attn_max_spatial. Sites are numbered in forward
// execution order (encoder levels shallow->deep, middle, decoder deep->
// shallow); a bank must always cover all sites in that order.

#include "repose/ops.hpp"
#include "repose/params.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace repose {

struct UNetConfig {
    int64_t in_channels = 3;
    int64_t base_channels = 32;
    std::vector<int64_t> channel_mults = {1, 2, 4};
    int64_t res_blocks_per_level = 1;
    int64_t attn_max_spatial = 16;  // transformer blocks at spatial sizes <= this
    int64_t heads = 2;
    int64_t time_embed_dim = 0;  // 0 -> 4 * base_channels
    int64_t gn_groups = 8;
    int64_t ff_mult = 2;
    int64_t image_size = 32;

    int64_t levels() const { return int64_t(channel_mults.size()); }
    int64_t width(int64_t level) const { return base_channels * channel_mults.at(size_t(level)); }
    int64_t te_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
    int64_t spatial(int64_t level) const { return image_size >> level; }
    bool has_attn(int64_t level) const { return spatial(level) <= attn_max_spatial; }

    void validate() const {
        require_t<ConfigError>(in_channels >= 1, "unet: in_channels must be positive");
        require_t<ConfigError>(base_channels >= 1 && base_channels % 2 == 0,
                               "unet: base_channels must be positive and even");
        require_t<ConfigError>(levels() >= 2, "unet: need at least two resolution levels");
        require_t<ConfigError>(res_blocks_per_level >= 1, "unet: need at least one block per level");
        require_t<ConfigError>(heads >= 1, "unet: heads must be positive");
        require_t<ConfigError>(gn_groups >= 1, "unet: gn_groups must be positive");
        require_t<ConfigError>(ff_mult >= 1, "unet: ff_mult must be positive");
        require_t<ConfigError>(image_size >= 1, "unet: image_size must be positive");
        require_t<ConfigError>(image_size % (int64_t(1) << (levels() - 1)) == 0,
                               "unet: image_size must be divisible by 2^(levels-1)");
        for (int64_t l = 0; l < levels(); ++l) {
            require_t<ConfigError>(channel_mults[size_t(l)] >= 1, "unet: multipliers must be >= 1");
            require_t<ConfigError>(width(l) % gn_groups == 0,
                                   "unet: every level width must divide by gn_groups");
            if (has_attn(l))
                require_t<ConfigError>(width(l) % heads == 0,
                                       "unet: head count must divide attention site width");
        }
        require_t<ConfigError>(has_attn(levels() - 1),
                               "unet: the deepest level must carry attention (middle block)");
    }
};

// One transformer-block location, numbered in forward execution order.
struct AttentionSite {
    int64_t ordinal = 0;
    int64_t spatial = 0;   // feature-map side length at this site
    int64_t channels = 0;  // token feature width at this site
};

// Externally supplied key/value pair for one attention site, stored
// pre-head-split as [B, tokens, channels]. A leading dim of 1 broadcasts
// over the consuming batch.
template <class T>
struct KvEntry {
    Tensor<T> k, v;
};

// Per-site key/value bank. Either empty (plain self-attention everywhere)
// or exactly one entry per AttentionSite, in ordinal order.
template <class T>
using KVBank = std::vector<KvEntry<T>>;

// Additive decoder residuals: one feature map per level's skip connection
// (index = level) followed by one for the middle-block output (last index).
// Empty bank = no injection.
template <class T>
using ResidualBank = std::vector<Tensor<T>>;

enum class NetKind { full, trunk };

// Attention core shared by every transformer block: multi-head scaled
// dot-product attention over token tensors [B, tokens, channels], with the
// key/value rows optionally extended by an external entry (token-axis
// concatenation; queries always come from x alone). The softmax temperature
// is sqrt(head_dim) regardless of how many external tokens extend the rows.
template <class T>
Tensor<T> attention_tokens(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t heads, const KvEntry<T>* ext = nullptr) {
    require_t<ShapeError>(q.shape().size() == 3 && k.shape().size() == 3 &&
                              v.shape().size() == 3 && q.dim(2) == k.dim(2) &&
                              k.dim(2) == v.dim(2) && k.dim(1) == v.dim(1),
                          "attention: need [B,tokens,channels] operands of one width");
    require_t<ShapeError>(q.dim(2) % heads == 0, "attention: heads must divide channels");
    Tensor<T> kk = k, vv = v;
    if (ext) {
        require_t<ShapeError>(ext->k.defined() && ext->v.defined() &&
                                  ext->k.dim(2) == q.dim(2) && ext->v.dim(2) == q.dim(2),
                              "attention: external entry width mismatch");
        kk = concat_tokens(kk, ext->k);
        vv = concat_tokens(vv, ext->v);
    }
    const int64_t d = q.dim(2) / heads;
    Tensor<T> att = softmax_rows(bmm_nt(split_heads(q, heads), split_heads(kk, heads)),
                                 T(std::sqrt(double(d))));
    return merge_heads(bmm_nn(att, split_heads(vv, heads)), heads);
}

template <class T>
class UNet {
  public:
    struct Capture {
        Tensor<T> eps;
        KVBank<T> bank;
    };
    struct EncodeOut {
        std::vector<Tensor<T>> skips;  // one per level, shallow -> deep
        Tensor<T> mid;                 // middle-block output
    };

    UNet(UNetConfig cfg, Rng& rng, NetKind kind = NetKind::full)
        : cfg_(std::move(cfg)), kind_(kind) {
        cfg_.validate();
        plan_sites();
        register_params(rng);
    }

    const UNetConfig& config() const { return cfg_; }
    NetKind kind() const { return kind_; }
    ParameterSet<T>& params() { return params_; }
    const ParameterSet<T>& params() const { return params_; }
    const std::vector<AttentionSite>& attention_sites() const { return sites_; }

    // eps prediction. kv: empty/omitted = plain self-attention; otherwise one
    // entry per site, consumed by token-axis concatenation. res: empty/omitted
    // = no injection; otherwise one map per level skip plus one for the middle.
    Tensor<T> forward(const Tensor<T>& z, const std::vector<int64_t>& ts,
                      const KVBank<T>* kv = nullptr, const ResidualBank<T>* res = nullptr) const {
        require_t<StateError>(kind_ == NetKind::full, "unet: trunk nets have no decoder");
        check_input(z, ts);
        if (kv && !kv->empty()) check_bank(*kv, z.dim(0));
        const Tensor<T> emb = time_embed(ts);
        int64_t site = 0;
        EncodeOut enc = run_encoder(z, emb, nullptr, kv, nullptr, site);
        Tensor<T> out = run_decoder(enc, emb, kv, nullptr, site, res);
        require_t<StateError>(site == int64_t(sites_.size()), "unet: attention site walk desynced");
        return out;
    }

    // Plain forward (no external inputs) that additionally records every
    // site's key and value, pre-head-split, in ordinal order.
    Capture forward_capture_kv(const Tensor<T>& z, const std::vector<int64_t>& ts) const {
        require_t<StateError>(kind_ == NetKind::full, "unet: trunk nets have no decoder");
        check_input(z, ts);
        Capture cap;
        cap.bank.reserve(sites_.size());
        const Tensor<T> emb = time_embed(ts);
        int64_t site = 0;
        EncodeOut enc = run_encoder(z, emb, nullptr, nullptr, &cap.bank, site);
        cap.eps = run_decoder(enc, emb, nullptr, &cap.bank, site, nullptr);
        require_t<StateError>(cap.bank.size() == sites_.size(),
                              "unet: capture did not cover every attention site");
        return cap;
    }

    // Encoder + middle only, with an optional additive hint merged into the
    // stem output. This is the whole forward pass of a trunk net and the
    // first half of a full net's.
    EncodeOut encode_features(const Tensor<T>& z, const std::vector<int64_t>& ts,
                              const Tensor<T>* hint = nullptr) const {
        check_input(z, ts);
        const Tensor<T> emb = time_embed(ts);
        int64_t site = 0;
        return run_encoder(z, emb, hint, nullptr, nullptr, site);
    }

    // Sinusoidal embedding -> 2-layer MLP, shared by every residual block.
    Tensor<T> time_embed(const std::vector<int64_t>& ts) const {
        Tensor<T> e = timestep_embedding<T>(ts, cfg_.base_channels);
        e = linear(e, params_.at("time.l1.w"), params_.at("time.l1.b"));
        return linear(silu(e), params_.at("time.l2.w"), params_.at("time.l2.b"));
    }

    // Expected shapes of a residual bank for batch size B (skips then middle).
    std::vector<Shape> residual_shapes(int64_t B) const {
        std::vector<Shape> out;
        for (int64_t l = 0; l < cfg_.levels(); ++l)
            out.push_back(Shape{B, cfg_.width(l), cfg_.spatial(l), cfg_.spatial(l)});
        const int64_t last = cfg_.levels() - 1;
        out.push_back(Shape{B, cfg_.width(last), cfg_.spatial(last), cfg_.spatial(last)});
        return out;
    }

  private:
    // ---------------------------------------------------------- construction

    void plan_sites() {
        sites_.clear();
        auto add_site = [&](int64_t level) {
            sites_.push_back({int64_t(sites_.size()), cfg_.spatial(level), cfg_.width(level)});
        };
        for (int64_t l = 0; l < cfg_.levels(); ++l)
            if (cfg_.has_attn(l))
                for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) add_site(l);
        add_site(cfg_.levels() - 1);  // middle
        if (kind_ == NetKind::full)
            for (int64_t l = cfg_.levels() - 1; l >= 0; --l)
                if (cfg_.has_attn(l))
                    for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) add_site(l);
    }

    void reg_conv(const std::string& name, int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng,
                  bool zero = false) {
        const int64_t fan_in = in_ch * k * k;
        std::vector<T> w = zero ? const_fill<T>(out_ch * fan_in, T(0))
                                : fan_in_uniform<T>(out_ch * fan_in, fan_in, rng);
        params_.add(name + ".w", Tensor<T>::from_data(Shape{out_ch, in_ch, k, k}, std::move(w)));
        params_.add(name + ".b", Tensor<T>::from_data(Shape{out_ch}, const_fill<T>(out_ch, T(0))));
    }

    void reg_linear(const std::string& name, int64_t out_f, int64_t in_f, Rng& rng) {
        params_.add(name + ".w", Tensor<T>::from_data(
                                     Shape{out_f, in_f}, fan_in_uniform<T>(out_f * in_f, in_f, rng)));
        params_.add(name + ".b", Tensor<T>::from_data(Shape{out_f}, const_fill<T>(out_f, T(0))));
    }

    void reg_affine(const std::string& name, int64_t n) {
        params_.add(name + ".g", Tensor<T>::from_data(Shape{n}, const_fill<T>(n, T(1))));
        params_.add(name + ".b", Tensor<T>::from_data(Shape{n}, const_fill<T>(n, T(0))));
    }

    void reg_resblock(const std::string& p, int64_t in_ch, int64_t out_ch, Rng& rng) {
        reg_affine(p + ".gn1", in_ch);
        reg_conv(p + ".conv1", out_ch, in_ch, 3, rng);
        reg_linear(p + ".emb", out_ch, cfg_.te_dim(), rng);
        reg_affine(p + ".gn2", out_ch);
        reg_conv(p + ".conv2", out_ch, out_ch, 3, rng);
        if (in_ch != out_ch) reg_conv(p + ".skip", out_ch, in_ch, 1, rng);
    }

    void reg_attention(const std::string& p, int64_t ch, Rng& rng) {
        reg_affine(p + ".ln1", ch);
        reg_linear(p + ".q", ch, ch, rng);
        reg_linear(p + ".k", ch, ch, rng);
        reg_linear(p + ".v", ch, ch, rng);
        reg_linear(p + ".o", ch, ch, rng);
        reg_affine(p + ".ln2", ch);
        reg_linear(p + ".ff1", ch * cfg_.ff_mult, ch, rng);
        reg_linear(p + ".ff2", ch, ch * cfg_.ff_mult, rng);
    }

    void register_params(Rng& rng) {
        reg_linear("time.l1", cfg_.te_dim(), cfg_.base_channels, rng);
        reg_linear("time.l2", cfg_.te_dim(), cfg_.te_dim(), rng);
        reg_conv("stem", cfg_.base_channels, cfg_.in_channels, 3, rng);
        int64_t ch = cfg_.base_channels;
        for (int64_t l = 0; l < cfg_.levels(); ++l) {
            const int64_t w = cfg_.width(l);
            for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) {
                const std::string p = "enc" + std::to_string(l) + ".rb" + std::to_string(r);
                reg_resblock(p, r == 0 ? ch : w, w, rng);
                if (cfg_.has_attn(l))
                    reg_attention("enc" + std::to_string(l) + ".attn" + std::to_string(r), w, rng);
            }
            ch = w;
            // 4x4 stride-2 downsampler: output extent is exactly half of any
            // even input, with no rounding in the shape arithmetic.
            if (l + 1 < cfg_.levels()) reg_conv("down" + std::to_string(l), ch, ch, 4, rng);
        }
        reg_resblock("mid.rb1", ch, ch, rng);
        reg_attention("mid.attn", ch, rng);
        reg_resblock("mid.rb2", ch, ch, rng);
        if (kind_ == NetKind::trunk) return;
        for (int64_t l = cfg_.levels() - 1; l >= 0; --l) {
            const int64_t w = cfg_.width(l);
            for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) {
                const std::string p = "dec" + std::to_string(l) + ".rb" + std::to_string(r);
                reg_resblock(p, r == 0 ? ch + w : w, w, rng);
                if (cfg_.has_attn(l))
                    reg_attention("dec" + std::to_string(l) + ".attn" + std::to_string(r), w, rng);
            }
            ch = w;
            if (l > 0) {
                reg_conv("up" + std::to_string(l), cfg_.width(l - 1), ch, 3, rng);
                ch = cfg_.width(l - 1);
            }
        }
        reg_affine("out.gn", ch);
        reg_conv("out.conv", cfg_.in_channels, ch, 3, rng, /*zero=*/true);
    }

    // --------------------------------------------------------------- blocks

    const Tensor<T>& P(const std::string& name) const { return params_.at(name); }

    Tensor<T> resblock(const std::string& p, const Tensor<T>& x, const Tensor<T>& emb) const {
        const T eps = T(1e-5);
        Tensor<T> h = conv2d(silu(group_norm(x, cfg_.gn_groups, P(p + ".gn1.g"), P(p + ".gn1.b"),
                                             eps)),
                             P(p + ".conv1.w"), P(p + ".conv1.b"), 1, 1);
        h = add_channel_vec(h, linear(silu(emb), P(p + ".emb.w"), P(p + ".emb.b")));
        h = conv2d(silu(group_norm(h, cfg_.gn_groups, P(p + ".gn2.g"), P(p + ".gn2.b"), eps)),
                   P(p + ".conv2.w"), P(p + ".conv2.b"), 1, 1);
        const Tensor<T> sk =
            params_.has(p + ".skip.w") ? conv2d(x, P(p + ".skip.w"), P(p + ".skip.b"), 1, 0) : x;
        return add(sk, h);
    }

    // Transformer block: pre-norm attention with token-axis key/value
    // extension, then pre-norm feed-forward, both with residual connections.
    Tensor<T> attn_block(const std::string& p, const Tensor<T>& x, const KVBank<T>* kv_in,
                         KVBank<T>* kv_out, int64_t& site) const {
        const AttentionSite& s = sites_.at(size_t(site));
        require_t<StateError>(s.channels == x.dim(1) && s.spatial == x.dim(2),
                              "unet: attention site walk mismatched the feature map");
        const T eps = T(1e-5);
        const int64_t H = x.dim(2), W = x.dim(3);
        const Tensor<T> tok = nchw_to_tokens(x);
        const Tensor<T> n1 = layer_norm(tok, P(p + ".ln1.g"), P(p + ".ln1.b"), eps);
        const Tensor<T> q = linear(n1, P(p + ".q.w"), P(p + ".q.b"));
        Tensor<T> k = linear(n1, P(p + ".k.w"), P(p + ".k.b"));
        Tensor<T> v = linear(n1, P(p + ".v.w"), P(p + ".v.b"));
        if (kv_out) kv_out->push_back({k, v});
        const KvEntry<T>* ext =
            (kv_in && !kv_in->empty()) ? &kv_in->at(size_t(site)) : nullptr;
        Tensor<T> o = attention_tokens(q, k, v, cfg_.heads, ext);
        const Tensor<T> tok2 = add(tok, linear(o, P(p + ".o.w"), P(p + ".o.b")));
        const Tensor<T> n2 = layer_norm(tok2, P(p + ".ln2.g"), P(p + ".ln2.b"), eps);
        Tensor<T> ff = linear(gelu(linear(n2, P(p + ".ff1.w"), P(p + ".ff1.b"))), P(p + ".ff2.w"),
                              P(p + ".ff2.b"));
        ++site;
        return tokens_to_nchw(add(tok2, ff), H, W);
    }

    EncodeOut run_encoder(const Tensor<T>& z, const Tensor<T>& emb, const Tensor<T>* hint,
                          const KVBank<T>* kv_in, KVBank<T>* kv_out, int64_t& site) const {
        Tensor<T> h = conv2d(z, P("stem.w"), P("stem.b"), 1, 1);
        if (hint) h = add(h, *hint);
        EncodeOut out;
        for (int64_t l = 0; l < cfg_.levels(); ++l) {
            for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) {
                const std::string sl = std::to_string(l), sr = std::to_string(r);
                h = resblock("enc" + sl + ".rb" + sr, h, emb);
                if (cfg_.has_attn(l))
                    h = attn_block("enc" + sl + ".attn" + sr, h, kv_in, kv_out, site);
            }
            out.skips.push_back(h);
            if (l + 1 < cfg_.levels())
                h = conv2d(h, P("down" + std::to_string(l) + ".w"),
                           P("down" + std::to_string(l) + ".b"), 2, 1);
        }
        h = resblock("mid.rb1", h, emb);
        h = attn_block("mid.attn", h, kv_in, kv_out, site);
        out.mid = resblock("mid.rb2", h, emb);
        return out;
    }

    Tensor<T> run_decoder(EncodeOut& enc, const Tensor<T>& emb, const KVBank<T>* kv_in,
                          KVBank<T>* kv_out, int64_t& site, const ResidualBank<T>* res) const {
        const bool inject = res && !res->empty();
        if (inject) check_residuals(*res, enc);
        Tensor<T> h = inject ? add(enc.mid, res->back()) : enc.mid;
        for (int64_t l = cfg_.levels() - 1; l >= 0; --l) {
            const Tensor<T>& sk = enc.skips[size_t(l)];
            Tensor<T> skip = inject ? add(sk, res->at(size_t(l))) : sk;
            for (int64_t r = 0; r < cfg_.res_blocks_per_level; ++r) {
                const std::string sl = std::to_string(l), sr = std::to_string(r);
                if (r == 0) h = concat_channels(h, skip);
                h = resblock("dec" + sl + ".rb" + sr, h, emb);
                if (cfg_.has_attn(l))
                    h = attn_block("dec" + sl + ".attn" + sr, h, kv_in, kv_out, site);
            }
            if (l > 0)
                h = conv2d(upsample_nearest2x(h), P("up" + std::to_string(l) + ".w"),
                           P("up" + std::to_string(l) + ".b"), 1, 1);
        }
        h = silu(group_norm(h, cfg_.gn_groups, P("out.gn.g"), P("out.gn.b"), T(1e-5)));
        return conv2d(h, P("out.conv.w"), P("out.conv.b"), 1, 1);
    }

    // ---------------------------------------------------------- validation

    void check_input(const Tensor<T>& z, const std::vector<int64_t>& ts) const {
        require_t<ShapeError>(z.shape().size() == 4 && z.dim(1) == cfg_.in_channels &&
                                  z.dim(2) == cfg_.image_size && z.dim(3) == cfg_.image_size,
                              "unet: input must be [B," + std::to_string(cfg_.in_channels) + "," +
                                  std::to_string(cfg_.image_size) + "," +
                                  std::to_string(cfg_.image_size) + "], got " +
                                  shape_str(z.shape()));
        require_t<ShapeError>(int64_t(ts.size()) == z.dim(0),
                              "unet: need one timestep per sample");
    }

    void check_bank(const KVBank<T>& kv, int64_t B) const {
        require_t<ShapeError>(kv.size() == sites_.size(),
                              "unet: bank has " + std::to_string(kv.size()) + " entries, net has " +
                                  std::to_string(sites_.size()) + " attention sites");
        for (const AttentionSite& s : sites_) {
            const KvEntry<T>& e = kv[size_t(s.ordinal)];
            for (const Tensor<T>* t : {&e.k, &e.v}) {
                require_t<ShapeError>(t->defined() && t->shape().size() == 3,
                                      "unet: bank entries must be [B,tokens,channels]");
                require_t<ShapeError>(t->dim(2) == s.channels,
                                      "unet: bank width mismatch at site " +
                                          std::to_string(s.ordinal));
                require_t<ShapeError>(t->dim(0) == B || t->dim(0) == 1,
                                      "unet: bank batch mismatch at site " +
                                          std::to_string(s.ordinal));
            }
            require_t<ShapeError>(e.k.dim(0) == e.v.dim(0) && e.k.dim(1) == e.v.dim(1),
                                  "unet: key/value disagree at site " + std::to_string(s.ordinal));
        }
    }

    void check_residuals(const ResidualBank<T>& res, const EncodeOut& enc) const {
        require_t<ShapeError>(int64_t(res.size()) == cfg_.levels() + 1,
                              "unet: residual bank needs one map per level skip plus the middle");
        for (int64_t l = 0; l < cfg_.levels(); ++l)
            require_t<ShapeError>(res[size_t(l)].defined() &&
                                      res[size_t(l)].shape() == enc.skips[size_t(l)].shape(),
                                  "unet: residual shape mismatch at level " + std::to_string(l));
        require_t<ShapeError>(res.back().defined() && res.back().shape() == enc.mid.shape(),
                              "unet: middle residual shape mismatch");
    }

    UNetConfig cfg_;
    NetKind kind_;
    ParameterSet<T> params_;
    std::vector<AttentionSite> sites_;
};

}  // namespace repose
