#include "repose/metrics.hpp"

#include "repose/checkpoint.hpp"
#include "repose/control.hpp"
#include "repose/image_io.hpp"
#include "repose/ops.hpp"
#include "repose/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace repose {

namespace {

void require_image_pair(const Tensor<float>& a, const Tensor<float>& b, const char* op) {
    require_t<ShapeError>(a.defined() && b.defined() && a.shape().size() == 3,
                          std::string(op) + ": expected [C,H,W] images");
    require_t<ShapeError>(a.shape() == b.shape(),
                          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

// [-1,1] model space -> [0,1] pixel space.
inline double remap01(float v) { return (double(v) + 1.0) * 0.5; }

}  // namespace

double l1(const Tensor<float>& a, const Tensor<float>& b) {
    require_image_pair(a, b, "l1");
    const std::vector<float>& av = a.value();
    const std::vector<float>& bv = b.value();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) acc += std::abs(remap01(av[i]) - remap01(bv[i]));
    return acc / double(av.size());
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    require_image_pair(a, b, "psnr");
    const std::vector<float>& av = a.value();
    const std::vector<float>& bv = b.value();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        const double d = remap01(av[i]) - remap01(bv[i]);
        acc += d * d;
    }
    const double mse = acc / double(av.size());
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor<float>& a, const Tensor<float>& b) {
    require_image_pair(a, b, "ssim");
    const int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
    require_t<ShapeError>(H >= 8 && W >= 8, "ssim: images must be at least 8x8");
    constexpr int64_t win = 8, stride = 4;
    constexpr double C1 = 0.01 * 0.01;  // (0.01 * L)^2, L = 1
    constexpr double C2 = 0.03 * 0.03;
    const std::vector<float>& av = a.value();
    const std::vector<float>& bv = b.value();

    double total = 0.0;
    int64_t count = 0;
    for (int64_t c = 0; c < C; ++c) {
        const size_t plane = size_t(c) * size_t(H) * size_t(W);
        for (int64_t y = 0; y + win <= H; y += stride) {
            for (int64_t x = 0; x + win <= W; x += stride) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (int64_t dy = 0; dy < win; ++dy) {
                    const size_t row = plane + size_t((y + dy) * W + x);
                    for (int64_t dx = 0; dx < win; ++dx) {
                        const double pa = remap01(av[row + size_t(dx)]);
                        const double pb = remap01(bv[row + size_t(dx)]);
                        sx += pa;
                        sy += pb;
                        sxx += pa * pa;
                        syy += pb * pb;
                        sxy += pa * pb;
                    }
                }
                constexpr double n = double(win * win);
                const double mx = sx / n, my = sy / n;
                const double vx = sxx / n - mx * mx;
                const double vy = syy / n - my * my;
                const double cov = sxy / n - mx * my;
                const double num = (2.0 * mx * my + C1) * (2.0 * cov + C2);
                const double den = (mx * mx + my * my + C1) * (vx + vy + C2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / double(count);
}

IdentityDescriptor identity_descriptor(const Tensor<float>& img,
                                       const std::vector<uint8_t>& mask) {
    require_t<ShapeError>(img.defined() && img.shape().size() == 3 && img.dim(0) == 3,
                          "identity descriptor: expected a [3,H,W] image");
    const int64_t H = img.dim(1), W = img.dim(2);
    require_t<ShapeError>(int64_t(mask.size()) == H * W,
                          "identity descriptor: mask size does not match the image");

    // Row extent of the figure.
    int64_t r0 = -1, r1 = -1;
    for (int64_t y = 0; y < H; ++y) {
        bool any = false;
        for (int64_t x = 0; x < W; ++x) any = any || mask[size_t(y * W + x)] != 0;
        if (any) {
            if (r0 < 0) r0 = y;
            r1 = y;
        }
    }
    require_t<NumericError>(r0 >= 0, "identity descriptor: empty figure mask");

    const std::vector<float>& v = img.value();
    const int64_t span = r1 - r0 + 1;
    IdentityDescriptor d;
    for (int64_t band = 0; band < 4; ++band) {
        // Quarter the bounding box by row fraction (head/torso/arms/legs).
        const int64_t ys = r0 + span * band / 4;
        const int64_t ye = r0 + span * (band + 1) / 4;
        double acc[3] = {0, 0, 0};
        int64_t n = 0;
        for (int64_t y = ys; y < ye; ++y)
            for (int64_t x = 0; x < W; ++x)
                if (mask[size_t(y * W + x)] != 0) {
                    for (int64_t c = 0; c < 3; ++c)
                        acc[c] += double(v[size_t((c * H + y) * W + x)]);
                    ++n;
                }
        d.valid[size_t(band)] = n > 0;
        if (n > 0)
            for (int64_t c = 0; c < 3; ++c) d.v[size_t(band * 3 + c)] = acc[c] / double(n);
    }
    return d;
}

double identity_cos(const Tensor<float>& generated, const Tensor<float>& gt,
                    const std::vector<uint8_t>& figure_mask) {
    require_image_pair(generated, gt, "identity_cos");
    const IdentityDescriptor dg = identity_descriptor(generated, figure_mask);
    const IdentityDescriptor dt = identity_descriptor(gt, figure_mask);
    double dot = 0.0, ng = 0.0, nt = 0.0;
    for (int64_t band = 0; band < 4; ++band) {
        if (!dg.valid[size_t(band)]) continue;  // same mask => same validity
        for (int64_t c = 0; c < 3; ++c) {
            const double x = dg.v[size_t(band * 3 + c)];
            const double y = dt.v[size_t(band * 3 + c)];
            dot += x * y;
            ng += x * x;
            nt += y * y;
        }
    }
    if (ng == 0.0 || nt == 0.0) return 0.0;
    return dot / (std::sqrt(ng) * std::sqrt(nt));
}

// ------------------------------------------------------------- evaluation

void finalize_report(MetricReport& r) {
    double sl = 0, sp = 0, ss = 0, si = 0;
    for (const SampleMetrics& m : r.rows) {
        sl += m.l1;
        sp += m.psnr;
        ss += m.ssim;
        si += m.idcos;
    }
    const double n = r.rows.empty() ? 1.0 : double(r.rows.size());
    r.mean_l1 = sl / n;
    r.mean_psnr = sp / n;
    r.mean_ssim = ss / n;
    r.mean_idcos = si / n;
}

std::string format_report(const MetricReport& r) {
    std::ostringstream o;
    for (const auto& [k, v] : r.header) o << k << "=" << v << "\n";
    o << "n=" << r.rows.size() << "\n";
    o << "parts_skipped=" << r.parts_skipped << "\n";
    o << "mean_l1=" << fmt_shortest(r.mean_l1) << "\n";
    o << "mean_psnr=" << fmt_shortest(r.mean_psnr) << "\n";
    o << "mean_ssim=" << fmt_shortest(r.mean_ssim) << "\n";
    o << "mean_idcos=" << fmt_shortest(r.mean_idcos) << "\n";
    o << "index\tl1\tpsnr\tssim\tidcos\n";
    for (const SampleMetrics& m : r.rows)
        o << m.index << "\t" << fmt_shortest(m.l1) << "\t" << fmt_shortest(m.psnr) << "\t"
          << fmt_shortest(m.ssim) << "\t" << fmt_shortest(m.idcos) << "\n";
    return o.str();
}

void write_report(const std::string& path, const MetricReport& r) {
    const std::string text = format_report(r);
    write_file_bytes(path, text.data(), text.size());
}

MetricReport evaluate_with(const Generator& gen, const DatasetReader& reader, int64_t n,
                           uint64_t seed,
                           std::vector<std::pair<std::string, std::string>> header) {
    require_t<ConfigError>(n >= 1, "evaluate: need at least one sample");
    require_t<ConfigError>(n <= reader.size(),
                           "evaluate: dataset holds " + std::to_string(reader.size()) +
                               " samples, asked for " + std::to_string(n));
    MetricReport r;
    r.header = std::move(header);
    for (int64_t i = 0; i < n; ++i) {
        const SpriteSample s = reader.sample(i);
        // Private per-sample stream: results do not depend on eval order.
        Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (uint64_t(i) + 1)));
        Tensor<float> out = gen(s, rng);
        // Score the displayable image.
        out = clamp(out, -1.0f, 1.0f);
        const Tensor<float> tgt = image_to_tensor(s.tgt_image);
        SampleMetrics m;
        m.index = i;
        m.l1 = l1(out, tgt);
        m.psnr = psnr(out, tgt);
        m.ssim = ssim(out, tgt);
        m.idcos = identity_cos(out, tgt, s.figure_mask);
        r.parts_skipped += identity_descriptor(tgt, s.figure_mask).skipped();
        r.rows.push_back(m);
    }
    finalize_report(r);
    return r;
}

MetricReport evaluate(const std::string& ckpt_path, const std::string& data_dir, int64_t n,
                      uint64_t seed, int64_t sample_steps, double cfg_scale) {
    require_t<ConfigError>(sample_steps >= 1, "evaluate: sample_steps must be positive");
    const TrainState st = load_checkpoint(ckpt_path);
    DatasetReader reader(data_dir);
    const int64_t S = st.arch.image_size;
    Generator gen = [&](const SpriteSample& s, Rng& rng) {
        const Tensor<float> ref = reshape(image_to_tensor(s.ref_image), Shape{1, 3, S, S});
        const Tensor<float> pm = reshape(image_to_tensor(s.pose_map), Shape{1, 3, S, S});
        const Tensor<float> out =
            guided_sample<float>(*st.base, *st.app, st.pose.get(), st.ns, ref,
                                 st.pose ? &pm : nullptr, sample_steps, cfg_scale, rng);
        return reshape(out, Shape{3, S, S});
    };
    std::vector<std::pair<std::string, std::string>> header{
        {"checkpoint", ckpt_path},
        {"data", data_dir},
        {"dataset_hash", reader.manifest_hash()},
        {"model_stage", std::to_string(st.stage)},
        {"model_step", std::to_string(st.step)},
        {"sample_steps", std::to_string(sample_steps)},
        {"cfg_scale", fmt_shortest(cfg_scale)},
        {"seed", std::to_string(seed)},
    };
    return evaluate_with(gen, reader, n, seed, std::move(header));
}

// -------------------------------------------------------------- ablation

void AblationConfig::validate() const {
    require_t<ConfigError>(!ckpt_dir.empty(), "ablate: ckpt_dir is required");
    require_t<ConfigError>(!data.empty(), "ablate: data is required");
    require_t<ConfigError>(!eval_data.empty(), "ablate: eval_data is required");
    require_t<ConfigError>(eval_n >= 1, "ablate: eval_n must be positive");
    require_t<ConfigError>(!seeds.empty(), "ablate: need at least one seed");
    require_t<ConfigError>(steps >= 0 && base_steps >= 0, "ablate: step counts must be >= 0");
    require_t<ConfigError>(batch_size >= 1, "ablate: batch_size must be positive");
    require_t<ConfigError>(sample_steps >= 1, "ablate: sample_steps must be positive");
}

AblationConfig parse_ablation_config(const std::string& path) {
    std::ifstream in(path);
    require_t<IoError>(bool(in), "cannot open ablation config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    AblationConfig cfg;
    std::string line;
    std::istringstream ls(ss.str());
    int64_t lineno = 0;
    auto fail = [&](const std::string& why) -> void {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(ls, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key=value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        auto trim = [](std::string s) {
            const size_t x = s.find_first_not_of(" \t");
            if (x == std::string::npos) return std::string();
            const size_t y = s.find_last_not_of(" \t");
            return s.substr(x, y - x + 1);
        };
        key = trim(key);
        val = trim(val);
        try {
            if (key == "ckpt_dir") cfg.ckpt_dir = val;
            else if (key == "data") cfg.data = val;
            else if (key == "eval_data") cfg.eval_data = val;
            else if (key == "eval_n") cfg.eval_n = std::stoll(val);
            else if (key == "eval_seed") cfg.eval_seed = uint64_t(std::stoull(val));
            else if (key == "steps") cfg.steps = std::stoll(val);
            else if (key == "base_steps") cfg.base_steps = std::stoll(val);
            else if (key == "batch_size") cfg.batch_size = std::stoll(val);
            else if (key == "sample_steps") cfg.sample_steps = std::stoll(val);
            else if (key == "cfg_scale") cfg.cfg_scale = std::stod(val);
            else if (key == "seeds") {
                cfg.seeds.clear();
                std::istringstream vs(val);
                std::string tok;
                while (std::getline(vs, tok, ','))
                    cfg.seeds.push_back(uint64_t(std::stoull(trim(tok))));
            } else {
                fail("unknown key '" + key + "'");
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            fail("cannot parse value '" + val + "' for key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

namespace {

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// A row checkpoint is reusable when its embedded config echo matches the
// protocol this table is being built for.
bool checkpoint_matches(const std::string& path, const TrainConfig& want) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) return false;
    probe.close();
    try {
        const Archive a = load_archive(path);
        const TrainConfig got = parse_train_config_text(a.text("meta/config"), path);
        return got.stage == want.stage && got.steps == want.steps &&
               got.base_steps == want.base_steps && got.batch_size == want.batch_size &&
               got.seed == want.seed && got.data == want.data &&
               got.no_pretrain == want.no_pretrain &&
               got.no_disentangle == want.no_disentangle && got.no_cfg == want.no_cfg &&
               got.no_mask_aug == want.no_mask_aug &&
               int64_t(a.scalar("meta/step")) == want.steps;
    } catch (const Error&) {
        return false;  // unreadable/corrupt -> retrain
    }
}

void ensure_trained(const TrainConfig& cfg, std::ostream* log) {
    if (checkpoint_matches(cfg.ckpt_out, cfg)) {
        if (log) (*log) << "reusing " << cfg.ckpt_out << "\n";
        return;
    }
    if (log) (*log) << "training " << cfg.ckpt_out << "\n";
    run_training(cfg, log);
}

}  // namespace

AblationTable run_ablation(const AblationConfig& cfg, std::ostream* log) {
    cfg.validate();
    DatasetReader eval_reader(cfg.eval_data);  // validates the held-out set early

    AblationTable t;
    t.header = {
        {"data", cfg.data},
        {"eval_data", cfg.eval_data},
        {"eval_n", std::to_string(cfg.eval_n)},
        {"eval_seed", std::to_string(cfg.eval_seed)},
        {"steps", std::to_string(cfg.steps)},
        {"base_steps", std::to_string(cfg.base_steps)},
        {"batch_size", std::to_string(cfg.batch_size)},
        {"sample_steps", std::to_string(cfg.sample_steps)},
        {"cfg_scale", fmt_shortest(cfg.cfg_scale)},
        // Full-scale reference values (identity metric / SSIM) for the same
        // three rows, measured on the TikTok benchmark with a pretrained
        // latent-diffusion backbone. Desk-scale runs reproduce the ORDERING
        // of these rows, not the values.
        {"reference_full", "0.426/0.752"},
        {"reference_no_disentangle", "0.397/0.727"},
        {"reference_no_pretrain", "0.038/0.291"},
        {"out_of_scope_metrics", "FID,LPIPS,FID-VID,user-study"},
    };
    std::string seed_list;
    for (size_t i = 0; i < cfg.seeds.size(); ++i)
        seed_list += (i ? "," : "") + std::to_string(cfg.seeds[i]);
    t.header.emplace_back("seeds", seed_list);

    struct RowSpec {
        const char* name;
        bool no_pretrain, no_disentangle;
    };
    const RowSpec specs[] = {
        {"full", false, false},
        {"no-disentangle", false, true},
        {"no-pretrain", true, false},
    };

    auto stage1_path = [&](uint64_t seed) {
        return cfg.ckpt_dir + "/s" + std::to_string(seed) + "_stage1.ckpt";
    };
    auto row_path = [&](uint64_t seed, const RowSpec& s) {
        const char* tag = s.no_pretrain ? "nopre" : (s.no_disentangle ? "nodis" : "full");
        return cfg.ckpt_dir + "/s" + std::to_string(seed) + "_stage2_" + tag + ".ckpt";
    };
    auto base_config = [&](uint64_t seed) {
        TrainConfig c;
        c.data = cfg.data;
        c.seed = seed;
        c.steps = cfg.steps;
        c.base_steps = cfg.base_steps;
        c.batch_size = cfg.batch_size;
        c.log_every = log ? 200 : 0;
        return c;
    };

    for (const RowSpec& spec : specs) {
        AblationRow row;
        row.name = spec.name;
        for (uint64_t seed : cfg.seeds) {
            try {
                TrainConfig s1 = base_config(seed);
                s1.stage = 1;
                s1.ckpt_out = stage1_path(seed);
                ensure_trained(s1, log);

                TrainConfig s2 = base_config(seed);
                s2.stage = 2;
                s2.ckpt_in = stage1_path(seed);
                s2.ckpt_out = row_path(seed, spec);
                s2.no_pretrain = spec.no_pretrain;
                s2.no_disentangle = spec.no_disentangle;
                ensure_trained(s2, log);

                const MetricReport rep = evaluate(s2.ckpt_out, cfg.eval_data, cfg.eval_n,
                                                  cfg.eval_seed, cfg.sample_steps,
                                                  cfg.cfg_scale);
                row.idcos.push_back(rep.mean_idcos);
                row.ssim.push_back(rep.mean_ssim);
                if (log)
                    (*log) << row.name << " seed " << seed << ": idcos "
                           << fmt_shortest(rep.mean_idcos) << " ssim "
                           << fmt_shortest(rep.mean_ssim) << "\n";
            } catch (const NumericError& e) {
                row.failed = true;
                row.note = "seed " + std::to_string(seed) + ": " + e.what();
                if (log) (*log) << row.name << " FAILED: " << row.note << "\n";
                break;
            }
        }
        if (!row.failed) {
            row.median_idcos = median3(row.idcos);
            row.median_ssim = median3(row.ssim);
        }
        t.rows.push_back(std::move(row));
    }

    const AblationRow& full = t.rows[0];
    const AblationRow& nodis = t.rows[1];
    const AblationRow& nopre = t.rows[2];
    t.ordering_holds = !full.failed && !nodis.failed && !nopre.failed &&
                       full.median_idcos > nodis.median_idcos &&
                       nodis.median_idcos > nopre.median_idcos;
    return t;
}

std::string format_ablation_table(const AblationTable& t) {
    std::ostringstream o;
    for (const auto& [k, v] : t.header) o << k << "=" << v << "\n";
    o << "row\tstatus\tidcos_per_seed\tmedian_idcos\tssim_per_seed\tmedian_ssim\n";
    auto join = [](const std::vector<double>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_shortest(v[i]);
        return s.empty() ? std::string("-") : s;
    };
    for (const AblationRow& r : t.rows) {
        o << r.name << "\t" << (r.failed ? "failed" : "ok") << "\t" << join(r.idcos) << "\t"
          << (r.failed ? "-" : fmt_shortest(r.median_idcos)) << "\t" << join(r.ssim) << "\t"
          << (r.failed ? "-" : fmt_shortest(r.median_ssim)) << "\n";
        if (r.failed) o << "# " << r.name << " failure: " << r.note << "\n";
    }
    o << "ordering_idcos_full_gt_nodisentangle_gt_nopretrain="
      << (t.ordering_holds ? "pass" : "fail") << "\n";
    return o.str();
}

}  // namespace repose
