#include "repose/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace repose {

namespace {

// ------------------------------------------------------------ small lexing

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void bad_line(const std::string& origin, int lineno, const std::string& why) {
    throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + why);
}

int64_t to_i64(const std::string& v, const std::string& origin, int lineno) {
    int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        bad_line(origin, lineno, "expected an integer, got '" + v + "'");
    return out;
}

uint64_t to_u64(const std::string& v, const std::string& origin, int lineno) {
    uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        bad_line(origin, lineno, "expected a non-negative integer, got '" + v + "'");
    return out;
}

double to_f64(const std::string& v, const std::string& origin, int lineno) {
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        bad_line(origin, lineno, "expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v, const std::string& origin, int lineno) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    bad_line(origin, lineno, "expected 0/1/true/false, got '" + v + "'");
}

std::vector<int64_t> to_i64_list(const std::string& v, const std::string& origin, int lineno) {
    std::vector<int64_t> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) out.push_back(to_i64(trim(item), origin, lineno));
    if (out.empty()) bad_line(origin, lineno, "expected a comma-separated integer list");
    return out;
}

// --------------------------------------------------------- batch assembly

// Stacks per-sample [3,S,S] values into one [B,3,S,S] buffer slot b.
void fill_slot(std::vector<float>& out, int64_t b, const Tensor<float>& t, int64_t S,
               const char* what) {
    require_t<ShapeError>(t.shape() == Shape({3, S, S}),
                          std::string(what) + " image has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(Shape{3, S, S}));
    std::copy(t.value().begin(), t.value().end(),
              out.begin() + size_t(b) * size_t(t.numel()));
}

template <class SampleAt>
TrainBatch assemble_batch(SampleAt&& sample_at, int64_t n_samples, const TrainConfig& cfg,
                          bool with_pose, Rng& rng) {
    require_t<ConfigError>(n_samples > 0, "training needs a non-empty dataset");
    const int64_t B = cfg.batch_size;
    const int64_t S = cfg.arch.image_size;
    const size_t plane = size_t(3 * S * S);
    std::vector<float> ref(size_t(B) * plane), tgt(size_t(B) * plane);
    std::vector<float> pose(with_pose ? size_t(B) * plane : 0);
    for (int64_t b = 0; b < B; ++b) {
        const int64_t idx = int64_t(rng.uniform_u64(uint64_t(n_samples)));
        const SpriteSample s = sample_at(idx);
        fill_slot(ref, b, image_to_tensor(s.ref_image), S, "reference");
        fill_slot(tgt, b, image_to_tensor(s.tgt_image), S, "target");
        if (with_pose) {
            const ImageU8 pm = cfg.no_mask_aug
                                   ? s.pose_map
                                   : augment_mask_pose(s.pose_map, rng, cfg.p_face, cfg.p_hand);
            fill_slot(pose, b, image_to_tensor(pm), S, "pose map");
        }
    }
    TrainBatch out;
    out.ref = Tensor<float>::from_data(Shape{B, 3, S, S}, std::move(ref));
    out.tgt = Tensor<float>::from_data(Shape{B, 3, S, S}, std::move(tgt));
    if (with_pose) out.pose = Tensor<float>::from_data(Shape{B, 3, S, S}, std::move(pose));
    return out;
}

AdamConfig adam_config(const TrainConfig& cfg) {
    AdamConfig a;
    a.lr = cfg.learning_rate;
    a.beta1 = cfg.beta1;
    a.beta2 = cfg.beta2;
    a.eps = cfg.adam_eps;
    a.clip = cfg.grad_clip;
    return a;
}

void log_line(std::ostream* log, const std::string& phase, int64_t step, int64_t total,
              double loss, double gn) {
    if (!log) return;
    (*log) << phase << " step " << step << "/" << total << "  loss " << loss << "  grad_norm "
           << gn << "\n";
    log->flush();
}

// Unconditional denoising warm-up that turns the freshly initialized base
// net into a usable frozen prior. Runs before stage 1 when no starting
// checkpoint is supplied; its optimizer and losses are local (they are not
// part of the persisted training state).
void warm_up_base(TrainState& st, const TrainConfig& cfg,
                  const std::vector<SpriteSample>& cache, std::ostream* log) {
    Adam<float> opt({{"base", &st.base->params()}}, adam_config(cfg));
    auto sample_at = [&](int64_t i) { return cache[size_t(i)]; };
    for (int64_t i = 0; i < cfg.base_steps; ++i) {
        const TrainBatch batch =
            assemble_batch(sample_at, int64_t(cache.size()), cfg, false, st.rng);
        double lv = 0.0, gn = 0.0;
        try {
            TapeScope<float> tape;
            Tensor<float> loss = denoise_loss(
                st.ns, [&](const Tensor<float>& zt, const std::vector<int64_t>& ts) {
                    return st.base->forward(zt, ts);
                },
                batch.tgt, st.rng);
            lv = double(loss.item());
            tape.backward(loss);
            gn = opt.step();
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at base warm-up step " +
                               std::to_string(i));
        }
        st.base->params().zero_grad();
        if (cfg.log_every > 0 && ((i + 1) % cfg.log_every == 0 || i + 1 == cfg.base_steps))
            log_line(log, "warm-up", i + 1, cfg.base_steps, lv, gn);
    }
}

bool archive_has_prefix(const Archive& a, const std::string& prefix) {
    for (const TensorRecord& r : a.records())
        if (r.name.rfind(prefix, 0) == 0) return true;
    return false;
}

}  // namespace

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
    require_t<ConfigError>(stage == 1 || stage == 2, "train: stage must be 1 or 2");
    require_t<ConfigError>(steps >= 0, "train: steps must be >= 0");
    require_t<ConfigError>(batch_size >= 1, "train: batch_size must be >= 1");
    require_t<ConfigError>(learning_rate >= 0.0, "train: learning_rate must be >= 0");
    require_t<ConfigError>(adam_eps > 0.0, "train: adam_eps must be > 0");
    require_t<ConfigError>(grad_clip >= 0.0, "train: grad_clip must be >= 0");
    for (auto [p, name] : {std::pair{cfg_dropout_p, "cfg_dropout_p"},
                           std::pair{p_face, "p_face"}, std::pair{p_hand, "p_hand"},
                           std::pair{beta1, "beta1"}, std::pair{beta2, "beta2"}})
        require_t<ConfigError>(p >= 0.0 && p <= 1.0,
                               std::string("train: ") + name + " must lie in [0,1]");
    require_t<ConfigError>(base_steps >= 0, "train: base_steps must be >= 0");
    require_t<ConfigError>(schedule_steps >= 2, "train: schedule_steps must be >= 2");
    require_t<ConfigError>(stage == 1 || !ckpt_in.empty(),
                           "train: stage 2 requires ckpt_in (a stage-1 checkpoint)");
    arch.validate();
}

TrainConfig parse_train_config_text(const std::string& text, const std::string& origin) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = trim(raw);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) bad_line(origin, lineno, "expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "stage") cfg.stage = to_i64(val, origin, lineno);
        else if (key == "steps") cfg.steps = to_i64(val, origin, lineno);
        else if (key == "batch_size") cfg.batch_size = to_i64(val, origin, lineno);
        else if (key == "learning_rate") cfg.learning_rate = to_f64(val, origin, lineno);
        else if (key == "beta1") cfg.beta1 = to_f64(val, origin, lineno);
        else if (key == "beta2") cfg.beta2 = to_f64(val, origin, lineno);
        else if (key == "adam_eps") cfg.adam_eps = to_f64(val, origin, lineno);
        else if (key == "grad_clip") cfg.grad_clip = to_f64(val, origin, lineno);
        else if (key == "cfg_dropout_p") cfg.cfg_dropout_p = to_f64(val, origin, lineno);
        else if (key == "p_face") cfg.p_face = to_f64(val, origin, lineno);
        else if (key == "p_hand") cfg.p_hand = to_f64(val, origin, lineno);
        else if (key == "seed") cfg.seed = to_u64(val, origin, lineno);
        else if (key == "data") cfg.data = val;
        else if (key == "ckpt_in") cfg.ckpt_in = val;
        else if (key == "ckpt_out") cfg.ckpt_out = val;
        else if (key == "base_steps") cfg.base_steps = to_i64(val, origin, lineno);
        else if (key == "log_every") cfg.log_every = to_i64(val, origin, lineno);
        else if (key == "schedule_steps") cfg.schedule_steps = to_i64(val, origin, lineno);
        else if (key == "no_pretrain") cfg.no_pretrain = to_bool(val, origin, lineno);
        else if (key == "no_disentangle") cfg.no_disentangle = to_bool(val, origin, lineno);
        else if (key == "no_cfg") cfg.no_cfg = to_bool(val, origin, lineno);
        else if (key == "no_mask_aug") cfg.no_mask_aug = to_bool(val, origin, lineno);
        else if (key == "stage2_reuse_adam") cfg.stage2_reuse_adam = to_bool(val, origin, lineno);
        else if (key == "base_channels") cfg.arch.base_channels = to_i64(val, origin, lineno);
        else if (key == "channel_mults") cfg.arch.channel_mults = to_i64_list(val, origin, lineno);
        else if (key == "res_blocks") cfg.arch.res_blocks_per_level = to_i64(val, origin, lineno);
        else if (key == "attn_max_spatial") cfg.arch.attn_max_spatial = to_i64(val, origin, lineno);
        else if (key == "heads") cfg.arch.heads = to_i64(val, origin, lineno);
        else if (key == "time_embed_dim") cfg.arch.time_embed_dim = to_i64(val, origin, lineno);
        else if (key == "gn_groups") cfg.arch.gn_groups = to_i64(val, origin, lineno);
        else if (key == "ff_mult") cfg.arch.ff_mult = to_i64(val, origin, lineno);
        else if (key == "image_size") cfg.arch.image_size = to_i64(val, origin, lineno);
        else bad_line(origin, lineno, "unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require_t<IoError>(bool(in), "cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_train_config_text(buf.str(), path);
}

std::string format_train_config(const TrainConfig& cfg) {
    std::ostringstream o;
    o << "stage=" << cfg.stage << "\n";
    o << "steps=" << cfg.steps << "\n";
    o << "batch_size=" << cfg.batch_size << "\n";
    o << "learning_rate=" << fmt_shortest(cfg.learning_rate) << "\n";
    o << "beta1=" << fmt_shortest(cfg.beta1) << "\n";
    o << "beta2=" << fmt_shortest(cfg.beta2) << "\n";
    o << "adam_eps=" << fmt_shortest(cfg.adam_eps) << "\n";
    o << "grad_clip=" << fmt_shortest(cfg.grad_clip) << "\n";
    o << "cfg_dropout_p=" << fmt_shortest(cfg.cfg_dropout_p) << "\n";
    o << "p_face=" << fmt_shortest(cfg.p_face) << "\n";
    o << "p_hand=" << fmt_shortest(cfg.p_hand) << "\n";
    o << "seed=" << cfg.seed << "\n";
    o << "data=" << cfg.data << "\n";
    o << "ckpt_in=" << cfg.ckpt_in << "\n";
    o << "ckpt_out=" << cfg.ckpt_out << "\n";
    o << "base_steps=" << cfg.base_steps << "\n";
    o << "log_every=" << cfg.log_every << "\n";
    o << "schedule_steps=" << cfg.schedule_steps << "\n";
    o << "no_pretrain=" << (cfg.no_pretrain ? 1 : 0) << "\n";
    o << "no_disentangle=" << (cfg.no_disentangle ? 1 : 0) << "\n";
    o << "no_cfg=" << (cfg.no_cfg ? 1 : 0) << "\n";
    o << "no_mask_aug=" << (cfg.no_mask_aug ? 1 : 0) << "\n";
    o << "stage2_reuse_adam=" << (cfg.stage2_reuse_adam ? 1 : 0) << "\n";
    o << "base_channels=" << cfg.arch.base_channels << "\n";
    o << "channel_mults=";
    for (size_t i = 0; i < cfg.arch.channel_mults.size(); ++i)
        o << (i ? "," : "") << cfg.arch.channel_mults[i];
    o << "\n";
    o << "res_blocks=" << cfg.arch.res_blocks_per_level << "\n";
    o << "attn_max_spatial=" << cfg.arch.attn_max_spatial << "\n";
    o << "heads=" << cfg.arch.heads << "\n";
    o << "time_embed_dim=" << cfg.arch.time_embed_dim << "\n";
    o << "gn_groups=" << cfg.arch.gn_groups << "\n";
    o << "ff_mult=" << cfg.arch.ff_mult << "\n";
    o << "image_size=" << cfg.arch.image_size << "\n";
    return o.str();
}

// ------------------------------------------------------------------ batches

TrainBatch make_batch(const DatasetReader& reader, const TrainConfig& cfg, bool with_pose,
                      Rng& rng) {
    return assemble_batch([&](int64_t i) { return reader.sample(i); }, reader.size(), cfg,
                          with_pose, rng);
}

// ------------------------------------------------------------------- steps

StepStats train_step(TrainState& st, const TrainConfig& cfg, const TrainBatch& batch) {
    require_t<StateError>(st.base && st.app, "train_step: state holds no models");
    require_t<StateError>(st.opt != nullptr, "train_step: state holds no optimizer");
    require_t<ShapeError>(batch.ref.defined() && batch.tgt.defined() &&
                              batch.ref.shape() == batch.tgt.shape(),
                          "train_step: reference/target batch shapes differ");
    if (st.pose)
        require_t<StateError>(batch.pose.defined(),
                              "train_step: stage-2 state needs pose maps in the batch");
    const int64_t B = batch.tgt.dim(0);

    // Reference dropout: with probability cfg_dropout_p a sample attends to
    // the null reference (all zeros in model space) instead of its real one.
    // Coins are drawn before the loss's timestep/noise draws, one per
    // sample, whenever the CFG path is enabled.
    Tensor<float> ref_eff = batch.ref;
    if (!cfg.no_cfg) {
        std::vector<float> vals = batch.ref.value();
        const size_t plane = vals.size() / size_t(B);
        bool any = false;
        for (int64_t b = 0; b < B; ++b) {
            if (st.rng.uniform() < cfg.cfg_dropout_p) {
                std::fill(vals.begin() + size_t(b) * plane,
                          vals.begin() + size_t(b + 1) * plane, 0.0f);
                any = true;
            }
        }
        if (any) ref_eff = Tensor<float>::from_data(batch.ref.shape(), std::move(vals));
    }

    StepStats stats;
    try {
        TapeScope<float> tape;
        auto model = [&](const Tensor<float>& zt, const std::vector<int64_t>& ts) {
            const KVBank<float> bank = encode_reference(*st.app, ref_eff, ts);
            ResidualBank<float> res;
            const ResidualBank<float>* rp = nullptr;
            if (st.pose) {
                res = st.pose->residuals(zt, ts, batch.pose);
                rp = &res;
            }
            return st.base->forward(zt, ts, &bank, rp);
        };
        Tensor<float> loss = denoise_loss(st.ns, model, batch.tgt, st.rng);
        stats.loss = double(loss.item());
        tape.backward(loss);
        stats.grad_norm = st.opt->step();
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at stage " + std::to_string(st.stage) +
                           " training step " + std::to_string(st.step));
    }
    st.base->params().zero_grad();
    st.app->params().zero_grad();
    if (st.pose) st.pose->params().zero_grad();

    st.loss_history.push_back(stats.loss);
    st.step += 1;
    return stats;
}

// ------------------------------------------------------------------ driver

TrainState run_training(const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    require_t<ConfigError>(!cfg.data.empty(), "train: no dataset directory configured");
    DatasetReader reader(cfg.data);
    require_t<ConfigError>(reader.size() > 0, "train: dataset is empty");

    // The whole run touches samples thousands of times; pull them into
    // memory once (hash-verified on this single pass).
    std::vector<SpriteSample> cache;
    cache.reserve(size_t(reader.size()));
    for (int64_t i = 0; i < reader.size(); ++i) cache.push_back(reader.sample(i));
    auto sample_at = [&](int64_t i) { return cache[size_t(i)]; };

    TrainState st;
    st.arch = cfg.arch;
    st.ns = NoiseSchedule::linear(cfg.schedule_steps);
    st.stage = cfg.stage;
    st.rng = Rng(cfg.seed);
    st.config_echo = format_train_config(cfg);

    Rng scratch(0);  // for nets whose fresh weights are immediately overwritten

    uint64_t base_sum = 0;
    if (cfg.stage == 1) {
        if (!cfg.ckpt_in.empty()) {
            st.base = std::make_unique<UNet<float>>(cfg.arch, scratch);
            const Archive a = load_archive(cfg.ckpt_in);
            load_params(a, "base", st.base->params());
        } else {
            st.base = std::make_unique<UNet<float>>(cfg.arch, st.rng);
            warm_up_base(st, cfg, cache, log);
        }
        st.base->params().set_all_frozen(true);
        base_sum = st.base->params().checksum();

        st.app = std::make_unique<UNet<float>>(make_twin(*st.base, scratch));
        st.opt = std::make_unique<Adam<float>>(
            std::vector<std::pair<std::string, ParameterSet<float>*>>{
                {"app", &st.app->params()}},
            adam_config(cfg));
    } else {
        const Archive a = load_archive(cfg.ckpt_in);
        require_t<StateError>(a.has("meta/stage") && a.scalar("meta/stage") == 1.0,
                              "train: stage 2 needs a stage-1 checkpoint, got '" + cfg.ckpt_in +
                                  "'");
        st.base = std::make_unique<UNet<float>>(cfg.arch, scratch);
        load_params(a, "base", st.base->params());
        st.base->params().set_all_frozen(true);
        base_sum = st.base->params().checksum();

        if (cfg.no_pretrain) {
            // Ablation: skip what stage 1 learned; appearance starts from
            // fresh random weights (only the frozen base is reused).
            st.app = std::make_unique<UNet<float>>(cfg.arch, st.rng);
        } else {
            st.app = std::make_unique<UNet<float>>(cfg.arch, scratch);
            load_params(a, "app", st.app->params());
        }
        st.pose = std::make_unique<PoseControlNet<float>>(*st.base, st.rng);
        if (cfg.no_disentangle) st.app->params().set_all_frozen(true);

        st.opt = std::make_unique<Adam<float>>(
            std::vector<std::pair<std::string, ParameterSet<float>*>>{
                {"app", &st.app->params()}, {"pose", &st.pose->params()}},
            adam_config(cfg));
        if (cfg.stage2_reuse_adam && archive_has_prefix(a, "adam/"))
            st.opt->load_state(a, "adam", /*allow_missing=*/true);
    }

    const bool with_pose = cfg.stage == 2;
    const char* phase = cfg.stage == 1 ? "stage-1" : "stage-2";
    for (int64_t i = 0; i < cfg.steps; ++i) {
        const TrainBatch batch =
            assemble_batch(sample_at, int64_t(cache.size()), cfg, with_pose, st.rng);
        const StepStats s = train_step(st, cfg, batch);
        if (cfg.log_every > 0 && ((i + 1) % cfg.log_every == 0 || i + 1 == cfg.steps))
            log_line(log, phase, i + 1, cfg.steps, s.loss, s.grad_norm);
    }

    require_t<StateError>(st.base->params().checksum() == base_sum,
                          "frozen base drifted during training");
    if (!cfg.ckpt_out.empty()) save_checkpoint(cfg.ckpt_out, st);
    return st;
}

// -------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, const TrainState& st) {
    require_t<StateError>(st.base && st.app, "save_checkpoint: state holds no models");
    Archive a;
    a.put_text("meta/config", st.config_echo);
    a.put_scalar("meta/stage", double(st.stage));
    a.put_scalar("meta/step", double(st.step));
    const auto& s = st.rng.state();
    a.put_u64s("meta/rng", {s[0], s[1], s[2], s[3]});
    a.put("meta/loss_history", Shape{int64_t(st.loss_history.size())},
          std::vector<float>(st.loss_history.begin(), st.loss_history.end()));
    put_params(a, "base", st.base->params());
    put_params(a, "app", st.app->params());
    if (st.pose) put_params(a, "pose", st.pose->params());
    if (st.opt) st.opt->save_state(a, "adam");
    save_archive(path, a);
}

TrainState load_checkpoint(const std::string& path) {
    const Archive a = load_archive(path);
    TrainState st;
    st.config_echo = a.text("meta/config");
    const TrainConfig cfg =
        parse_train_config_text(st.config_echo, path + " (embedded config)");
    st.arch = cfg.arch;
    st.ns = NoiseSchedule::linear(cfg.schedule_steps);
    st.stage = int64_t(a.scalar("meta/stage"));
    st.step = int64_t(a.scalar("meta/step"));
    const std::vector<uint64_t> words = a.u64s("meta/rng");
    require_t<IntegrityError>(words.size() == 4, "checkpoint rng state is malformed");
    st.rng.set_state({words[0], words[1], words[2], words[3]});
    const TensorRecord& hist = a.at("meta/loss_history");
    st.loss_history.assign(hist.data.begin(), hist.data.end());

    Rng scratch(0);
    st.base = std::make_unique<UNet<float>>(st.arch, scratch);
    load_params(a, "base", st.base->params());
    st.base->params().set_all_frozen(true);
    st.app = std::make_unique<UNet<float>>(st.arch, scratch);
    load_params(a, "app", st.app->params());
    if (archive_has_prefix(a, "pose/")) {
        st.pose = std::make_unique<PoseControlNet<float>>(*st.base, scratch);
        load_params(a, "pose", st.pose->params());
    }
    if (cfg.no_disentangle && st.pose) st.app->params().set_all_frozen(true);

    // Rebuild the optimizer around the same labeled sets the saving run
    // used, so save(load(p)) reproduces p byte for byte.
    if (archive_has_prefix(a, "adam/")) {
        std::vector<std::pair<std::string, ParameterSet<float>*>> sets{
            {"app", &st.app->params()}};
        if (st.pose) sets.emplace_back("pose", &st.pose->params());
        st.opt = std::make_unique<Adam<float>>(std::move(sets), adam_config(cfg));
        st.opt->load_state(a, "adam");
    }
    return st;
}

}  // namespace repose
