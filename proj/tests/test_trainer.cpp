// Training-stack tests. Oracles: closed-form Adam behavior on quadratics,
// byte-level archive round trips with hand-corrupted negative controls,
// bitwise determinism contracts, and cross-checks between the two stage
// drivers (twin init, frozen base, zero-init pose no-op).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "repose/checkpoint.hpp"
#include "repose/image_io.hpp"
#include "repose/optim.hpp"
#include "repose/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace repose;

namespace {

// Small-but-real configuration over the actual 32x32 sprite data: three
// levels so every architectural feature (attention, skips, pose taps) is
// live, with widths cut far down for speed.
TrainConfig micro_cfg(const std::string& data_dir) {
    TrainConfig cfg;
    cfg.arch.base_channels = 8;
    cfg.arch.channel_mults = {1, 2, 4};
    cfg.arch.res_blocks_per_level = 1;
    cfg.arch.attn_max_spatial = 16;
    cfg.arch.heads = 2;
    cfg.arch.gn_groups = 2;
    cfg.arch.ff_mult = 2;
    cfg.arch.image_size = 32;
    cfg.batch_size = 2;
    cfg.steps = 3;
    cfg.base_steps = 2;
    cfg.log_every = 0;
    cfg.data = data_dir;
    cfg.seed = 11;
    return cfg;
}

const std::string& micro_data() {
    static const std::string dir = [] {
        const std::string d = "/tmp/repose_trainer_ds";
        write_dataset(8, 7, d);
        return d;
    }();
    return dir;
}

AdamConfig toy_adam(double lr, double clip = 0.0) {
    AdamConfig a;
    a.lr = lr;
    a.clip = clip;
    return a;
}

// Stage-1-shaped state with an untrained frozen base, for train_step
// contract tests that don't need a useful model.
TrainState make_stage1_state(const TrainConfig& cfg, uint64_t model_seed,
                             uint64_t stream_seed) {
    TrainState st;
    st.arch = cfg.arch;
    st.ns = NoiseSchedule::linear(cfg.schedule_steps);
    st.stage = 1;
    Rng mr(model_seed);
    st.base = std::make_unique<UNet<float>>(cfg.arch, mr);
    // The output conv starts at exactly zero (so a fresh net is the
    // identity in eps-space); nudge it so gradients reach the attention
    // bank and the appearance net without a warm-up run.
    for (const char* nm : {"out.conv.w", "out.conv.b"}) {
        std::vector<float>& v = st.base->params().at(nm).value_mut();
        for (float& x : v) x = float(mr.uniform(-0.05, 0.05));
    }
    st.base->params().set_all_frozen(true);
    Rng tw(0);
    st.app = std::make_unique<UNet<float>>(make_twin(*st.base, tw));
    AdamConfig a;
    a.lr = cfg.learning_rate;
    a.beta1 = cfg.beta1;
    a.beta2 = cfg.beta2;
    a.eps = cfg.adam_eps;
    a.clip = cfg.grad_clip;
    st.opt = std::make_unique<Adam<float>>(
        std::vector<std::pair<std::string, ParameterSet<float>*>>{{"app", &st.app->params()}},
        a);
    st.rng = Rng(stream_seed);
    st.config_echo = format_train_config(cfg);
    return st;
}

std::vector<uint8_t> slurp(const std::string& path) { return read_file_bytes(path); }

double linf(const std::vector<float>& v) {
    double m = 0.0;
    for (float x : v) m = std::max(m, std::abs(double(x)));
    return m;
}

}  // namespace

// ======================================================== config parsing

TEST_CASE("config text round-trips through format and parse") {
    TrainConfig cfg = micro_cfg("/data/dir");
    cfg.stage = 2;
    cfg.ckpt_in = "/some/ckpt.bin";
    cfg.ckpt_out = "/other/out.bin";
    cfg.learning_rate = 3e-4;
    cfg.cfg_dropout_p = 0.25;
    cfg.seed = 1234567;
    cfg.no_mask_aug = true;
    cfg.stage2_reuse_adam = true;

    const std::string text = format_train_config(cfg);
    const TrainConfig back = parse_train_config_text(text, "round-trip");
    CHECK(format_train_config(back) == text);
    CHECK(back.stage == 2);
    CHECK(back.learning_rate == 3e-4);  // shortest-round-trip echo is exact
    CHECK(back.arch.channel_mults == std::vector<int64_t>{1, 2, 4});
    CHECK(back.no_mask_aug);
    CHECK(back.stage2_reuse_adam);
    CHECK_FALSE(back.no_cfg);
}

TEST_CASE("config parser accepts comments and rejects malformed lines") {
    const char* good =
        "# a comment line\n"
        "stage=1\n"
        "  steps = 5   # trailing comment\n"
        "\n"
        "batch_size=2\n"
        "data=/tmp/x\n";
    const TrainConfig cfg = parse_train_config_text(good, "inline");
    CHECK(cfg.steps == 5);
    CHECK(cfg.batch_size == 2);
    CHECK(cfg.data == "/tmp/x");

    CHECK_THROWS_AS(parse_train_config_text("nonsense line\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_train_config_text("unknown_key=1\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_train_config_text("steps=abc\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_train_config_text("learning_rate=fast\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_train_config_text("no_cfg=maybe\n", "x"), ConfigError);
    // validation failures surface through the parser too
    CHECK_THROWS_AS(parse_train_config_text("stage=3\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_train_config_text("stage=2\n", "x"), ConfigError);  // no ckpt_in
    CHECK_THROWS_AS(parse_train_config_text("cfg_dropout_p=1.5\n", "x"), ConfigError);

    // file variant: missing file is an IoError
    CHECK_THROWS_AS(parse_train_config("/tmp/repose_no_such_config.cfg"), IoError);
}

// ======================================================== archive format

TEST_CASE("tensor archive round-trips records and bytes") {
    Archive a;
    a.put("w", Shape{2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f});
    a.put("empty", Shape{0}, {});
    a.put_scalar("count", 42.0);
    a.put_text("note", "hello key=value\n");
    a.put_u64s("state", {0xDEADBEEFCAFEBABEull, 7ull});

    const std::vector<uint8_t> bytes = encode_archive(a);
    // fixed framing: magic + version
    REQUIRE(bytes.size() > 44);
    CHECK(bytes[0] == 'A');
    CHECK(bytes[1] == 'D');
    CHECK(bytes[2] == 'P');
    CHECK(bytes[3] == 'D');
    CHECK(bytes[4] == 1);  // version 1, little-endian low byte

    const Archive b = decode_archive(bytes);
    REQUIRE(b.size() == a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(b.records()[i].name == a.records()[i].name);
        CHECK(b.records()[i].shape == a.records()[i].shape);
        CHECK(b.records()[i].data == a.records()[i].data);
    }
    CHECK(encode_archive(b) == bytes);

    CHECK(b.scalar("count") == 42.0);
    CHECK(b.text("note") == "hello key=value\n");
    CHECK(b.u64s("state") == std::vector<uint64_t>{0xDEADBEEFCAFEBABEull, 7ull});

    // file round trip: save -> load -> save is byte-identical
    const std::string p1 = "/tmp/repose_arch_a.bin";
    const std::string p2 = "/tmp/repose_arch_b.bin";
    save_archive(p1, a);
    save_archive(p2, load_archive(p1));
    CHECK(slurp(p1) == slurp(p2));
    CHECK(slurp(p1) == bytes);
}

TEST_CASE("archive loader reports distinct failures") {
    Archive a;
    a.put("m", Shape{4}, {0.f, 1.f, 2.f, 3.f});
    std::vector<uint8_t> bytes = encode_archive(a);

    SUBCASE("bad magic is an io error") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(decode_archive(bytes), IoError);
    }
    SUBCASE("unsupported version is a version error even with a valid digest") {
        bytes[4] = 2;
        const auto d = sha256_raw(bytes.data(), bytes.size() - 32);
        std::copy(d.begin(), d.end(), bytes.end() - 32);
        CHECK_THROWS_AS(decode_archive(bytes), VersionError);
    }
    SUBCASE("truncation is an integrity error") {
        std::vector<uint8_t> cut(bytes.begin(), bytes.end() - 7);
        CHECK_THROWS_AS(decode_archive(cut), IntegrityError);
        std::vector<uint8_t> tiny(bytes.begin(), bytes.begin() + 10);
        CHECK_THROWS_AS(decode_archive(tiny), IntegrityError);
    }
    SUBCASE("payload corruption is an integrity error") {
        bytes[bytes.size() - 40] ^= 0x40;  // inside the last payload word
        CHECK_THROWS_AS(decode_archive(bytes), IntegrityError);
    }
    SUBCASE("appended bytes are an integrity error") {
        bytes.push_back(0);
        CHECK_THROWS_AS(decode_archive(bytes), IntegrityError);
    }
    SUBCASE("record inconsistency inside a digest-valid file is an integrity error") {
        // lie about the tensor count, then fix the digest
        bytes[8] = 2;
        const auto d = sha256_raw(bytes.data(), bytes.size() - 32);
        std::copy(d.begin(), d.end(), bytes.end() - 32);
        CHECK_THROWS_AS(decode_archive(bytes), IntegrityError);
    }
}

TEST_CASE("parameter loading validates names and shapes") {
    ParameterSet<float> ps;
    Rng rng(3);
    ps.add("a", Tensor<float>::from_data(Shape{2, 2}, {1, 2, 3, 4}));
    ps.add("b", Tensor<float>::from_data(Shape{3}, {5, 6, 7}));

    Archive a;
    put_params(a, "net", ps);
    CHECK(a.has("net/a"));
    CHECK(a.has("net/b"));

    ParameterSet<float> same;
    same.add("a", Tensor<float>::zeros(Shape{2, 2}));
    same.add("b", Tensor<float>::zeros(Shape{3}));
    load_params(a, "net", same);
    CHECK(same.at("a").value() == ps.at("a").value());
    CHECK(same.at("b").value() == ps.at("b").value());
    CHECK(same.checksum() == ps.checksum());

    SUBCASE("shape mismatch names the offending tensor") {
        ParameterSet<float> wrong;
        wrong.add("a", Tensor<float>::zeros(Shape{2, 3}));
        try {
            load_params(a, "net", wrong);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            CHECK(std::string(e.what()).find("net/a") != std::string::npos);
        }
    }
    SUBCASE("missing tensor names the offending tensor") {
        ParameterSet<float> extra;
        extra.add("a", Tensor<float>::zeros(Shape{2, 2}));
        extra.add("c", Tensor<float>::zeros(Shape{1}));
        try {
            load_params(a, "net", extra);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            CHECK(std::string(e.what()).find("net/c") != std::string::npos);
        }
    }
}

// ================================================================= adam

TEST_CASE("adam reaches the analytic minimum of a quadratic") {
    // f(x) = (x - 3)^2 (via mse against the constant), minimum x* = 3.
    ParameterSet<double> ps;
    ps.add("x", Tensor<double>::from_data(Shape{1}, {5.0}));
    Adam<double> opt({{"toy", &ps}}, toy_adam(0.1));
    const Tensor<double> target = Tensor<double>::from_data(Shape{1}, {3.0});
    for (int i = 0; i < 200; ++i) {
        TapeScope<double> tape;
        Tensor<double> loss = mse_loss(ps.at("x"), target);
        tape.backward(loss);
        opt.step();
        ps.zero_grad();
    }
    CHECK(std::abs(ps.at("x").value()[0] - 3.0) < 1e-3);
    CHECK(opt.steps_taken() == 200);

    // multi-dimensional variant with distinct targets per component
    ParameterSet<double> ps2;
    ps2.add("v", Tensor<double>::from_data(Shape{3}, {4.0, -2.0, 0.5}));
    const Tensor<double> t2 = Tensor<double>::from_data(Shape{3}, {1.0, 1.5, -0.25});
    Adam<double> opt2({{"toy", &ps2}}, toy_adam(0.1));
    for (int i = 0; i < 200; ++i) {
        TapeScope<double> tape;
        Tensor<double> loss = mse_loss(ps2.at("v"), t2);
        tape.backward(loss);
        opt2.step();
        ps2.zero_grad();
    }
    for (int k = 0; k < 3; ++k)
        CHECK(std::abs(ps2.at("v").value()[size_t(k)] - t2.value()[size_t(k)]) < 1e-3);
}

TEST_CASE("adam honors lr=0, freezing, clipping, and rejects NaN gradients") {
    SUBCASE("zero learning rate leaves weights bitwise unchanged") {
        ParameterSet<float> ps;
        ps.add("x", Tensor<float>::from_data(Shape{2}, {1.25f, -0.75f}));
        const uint64_t before = ps.checksum();
        Adam<float> opt({{"t", &ps}}, toy_adam(0.0));
        for (int i = 0; i < 3; ++i) {
            TapeScope<float> tape;
            Tensor<float> loss = mse_loss(ps.at("x"), Tensor<float>::zeros(Shape{2}));
            tape.backward(loss);
            opt.step();
            ps.zero_grad();
        }
        CHECK(ps.checksum() == before);
        CHECK(opt.steps_taken() == 3);
    }
    SUBCASE("frozen parameters never move even with gradients elsewhere") {
        ParameterSet<float> ps;
        ps.add("hot", Tensor<float>::from_data(Shape{1}, {1.0f}));
        ps.add("cold", Tensor<float>::from_data(Shape{1}, {2.0f}));
        ps.set_frozen("cold", true);
        Adam<float> opt({{"t", &ps}}, toy_adam(0.05));
        TapeScope<float> tape;
        Tensor<float> loss = mse_loss(add(ps.at("hot"), ps.at("cold")),
                                      Tensor<float>::zeros(Shape{1}));
        tape.backward(loss);
        opt.step();
        CHECK(ps.at("cold").value()[0] == 2.0f);
        CHECK(ps.at("hot").value()[0] != 1.0f);
    }
    SUBCASE("global norm clipping caps the applied gradient") {
        // d/dx of 10*x is exactly 10; with clip 1.0 the effective gradient
        // is 1, so the first bias-corrected update is lr/(1+eps).
        ParameterSet<double> ps;
        ps.add("x", Tensor<double>::from_data(Shape{1}, {0.0}));
        Adam<double> opt({{"t", &ps}}, toy_adam(0.01, 1.0));
        TapeScope<double> tape;
        Tensor<double> loss = sum_all(scale(ps.at("x"), 10.0));
        tape.backward(loss);
        const double norm = opt.step();
        CHECK(norm == doctest::Approx(10.0).epsilon(1e-12));
        CHECK(std::abs(ps.at("x").value()[0] + 0.01) < 1e-9);
    }
    SUBCASE("non-finite gradient aborts naming the parameter") {
        // Forward values are finite at every op, but the chain rule's
        // product overflows: d/dw of scale(w * 1e20, 1e25) is 1e45 = inf
        // in single precision. The optimizer must refuse the step.
        ParameterSet<float> ps;
        ps.add("w", Tensor<float>::from_data(Shape{1}, {1e-20f}));
        Adam<float> opt({{"net", &ps}}, toy_adam(0.01));
        TapeScope<float> tape;
        const Tensor<float> big = Tensor<float>::from_data(Shape{1}, {1e20f});
        Tensor<float> loss = scale(sum_all(mul(ps.at("w"), big)), 1e25f);
        tape.backward(loss);
        REQUIRE(ps.at("w").has_grad());
        try {
            opt.step();
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("net/w") != std::string::npos);
        }
    }
}

TEST_CASE("adam state serialization resumes bit for bit") {
    // float is the training dtype, and the archive stores moments as f32,
    // so a save/load mid-run must continue bitwise-identically.
    auto run_steps = [](ParameterSet<float>& ps, Adam<float>& opt, int n) {
        const Tensor<float> target = Tensor<float>::from_data(Shape{2}, {0.5f, -1.5f});
        for (int i = 0; i < n; ++i) {
            TapeScope<float> tape;
            Tensor<float> loss = mse_loss(ps.at("x"), target);
            tape.backward(loss);
            opt.step();
            ps.zero_grad();
        }
    };

    // uninterrupted: 5 steps
    ParameterSet<float> pa;
    pa.add("x", Tensor<float>::from_data(Shape{2}, {3.0f, 2.0f}));
    Adam<float> oa({{"t", &pa}}, toy_adam(0.05));
    run_steps(pa, oa, 5);

    // interrupted: 3 steps, save, fresh optimizer, load, 2 more steps
    ParameterSet<float> pb;
    pb.add("x", Tensor<float>::from_data(Shape{2}, {3.0f, 2.0f}));
    Adam<float> ob({{"t", &pb}}, toy_adam(0.05));
    run_steps(pb, ob, 3);
    Archive a;
    ob.save_state(a, "adam");
    Adam<float> oc({{"t", &pb}}, toy_adam(0.05));
    oc.load_state(a, "adam");
    CHECK(oc.steps_taken() == 3);
    run_steps(pb, oc, 2);

    CHECK(pa.at("x").value() == pb.at("x").value());

    SUBCASE("loading into a mismatched structure is a shape error") {
        ParameterSet<float> pc;
        pc.add("y", Tensor<float>::zeros(Shape{2}));
        Adam<float> od({{"t", &pc}}, toy_adam(0.05));
        CHECK_THROWS_AS(od.load_state(a, "adam"), ShapeError);
        CHECK_NOTHROW(od.load_state(a, "adam", /*allow_missing=*/true));
    }
}

// =========================================================== train_step

TEST_CASE("train_step contracts: lr=0, determinism, cleanup") {
    TrainConfig cfg = micro_cfg(micro_data());
    DatasetReader reader(cfg.data);

    SUBCASE("lr=0 reports a loss but changes nothing") {
        cfg.learning_rate = 0.0;
        TrainState st = make_stage1_state(cfg, 5, 21);
        const uint64_t base_sum = st.base->params().checksum();
        const uint64_t app_sum = st.app->params().checksum();
        Rng br(33);
        const TrainBatch batch = make_batch(reader, cfg, false, br);
        const StepStats s = train_step(st, cfg, batch);
        CHECK(std::isfinite(s.loss));
        CHECK(s.loss > 0.0);
        CHECK(s.grad_norm > 0.0);
        CHECK(st.base->params().checksum() == base_sum);
        CHECK(st.app->params().checksum() == app_sum);
        CHECK(st.step == 1);
        CHECK(st.loss_history.size() == 1);
    }

    SUBCASE("identical state and batch give bitwise-identical updates") {
        TrainState s1 = make_stage1_state(cfg, 5, 21);
        TrainState s2 = make_stage1_state(cfg, 5, 21);
        CHECK(s1.app->params().checksum() == s2.app->params().checksum());
        Rng b1(33), b2(33);
        for (int i = 0; i < 3; ++i) {
            const TrainBatch batch1 = make_batch(reader, cfg, false, b1);
            const TrainBatch batch2 = make_batch(reader, cfg, false, b2);
            const StepStats r1 = train_step(s1, cfg, batch1);
            const StepStats r2 = train_step(s2, cfg, batch2);
            CHECK(r1.loss == r2.loss);
            CHECK(r1.grad_norm == r2.grad_norm);
        }
        CHECK(s1.app->params().checksum() == s2.app->params().checksum());
        CHECK(s1.base->params().checksum() == s2.base->params().checksum());
    }

    SUBCASE("gradients are cleared after the update") {
        TrainState st = make_stage1_state(cfg, 5, 21);
        Rng br(33);
        const TrainBatch batch = make_batch(reader, cfg, false, br);
        train_step(st, cfg, batch);
        for (size_t i = 0; i < st.app->params().size(); ++i)
            CHECK_FALSE(st.app->params()[i].has_grad());
    }

    SUBCASE("a stage-2 state demands pose maps") {
        TrainState st = make_stage1_state(cfg, 5, 21);
        Rng pr(2);
        st.pose = std::make_unique<PoseControlNet<float>>(*st.base, pr);
        st.opt = std::make_unique<Adam<float>>(
            std::vector<std::pair<std::string, ParameterSet<float>*>>{
                {"app", &st.app->params()}, {"pose", &st.pose->params()}},
            toy_adam(1e-4));
        Rng br(33);
        const TrainBatch no_pose = make_batch(reader, cfg, false, br);
        CHECK_THROWS_AS(train_step(st, cfg, no_pose), StateError);
        const TrainBatch with_pose = make_batch(reader, cfg, true, br);
        CHECK_NOTHROW(train_step(st, cfg, with_pose));
    }
}

TEST_CASE("reference dropout feeds the null reference") {
    TrainConfig cfg = micro_cfg(micro_data());
    DatasetReader reader(cfg.data);
    Rng br(19);
    const TrainBatch batch = make_batch(reader, cfg, false, br);

    // With dropout probability 1 the reference content must be irrelevant.
    cfg.cfg_dropout_p = 1.0;
    TrainState s1 = make_stage1_state(cfg, 5, 77);
    TrainState s2 = make_stage1_state(cfg, 5, 77);
    TrainBatch scrambled = batch;
    scrambled.ref = scale(batch.ref, -0.5f);
    const StepStats r1 = train_step(s1, cfg, batch);
    const StepStats r2 = train_step(s2, cfg, scrambled);
    CHECK(r1.loss == r2.loss);
    CHECK(s1.app->params().checksum() == s2.app->params().checksum());

    // With dropout probability 0 the reference matters (same rng stream:
    // the coins are drawn either way).
    cfg.cfg_dropout_p = 0.0;
    TrainState s3 = make_stage1_state(cfg, 5, 77);
    TrainState s4 = make_stage1_state(cfg, 5, 77);
    const StepStats r3 = train_step(s3, cfg, batch);
    const StepStats r4 = train_step(s4, cfg, scrambled);
    CHECK(r3.loss != r4.loss);
}

// ======================================================== stage drivers

TEST_CASE("stage 1 driver: twin init, training effect, checkpoint fidelity") {
    TrainConfig cfg = micro_cfg(micro_data());
    cfg.ckpt_out = "/tmp/repose_s1_micro.ckpt";

    SUBCASE("steps=0 leaves the appearance net as the exact base twin") {
        TrainConfig c0 = cfg;
        c0.steps = 0;
        c0.ckpt_out = "/tmp/repose_s1_zero.ckpt";
        const TrainState st = run_training(c0);
        CHECK(st.app->params().checksum() == st.base->params().checksum());
        CHECK(st.step == 0);
        CHECK(st.loss_history.empty());
        const TrainState back = load_checkpoint(c0.ckpt_out);
        CHECK(back.app->params().checksum() == back.base->params().checksum());
    }

    SUBCASE("training moves the appearance net and freezes the base") {
        const TrainState st = run_training(cfg);
        CHECK(st.step == cfg.steps);
        CHECK(int64_t(st.loss_history.size()) == cfg.steps);
        for (double l : st.loss_history) CHECK(std::isfinite(l));
        CHECK(st.app->params().checksum() != st.base->params().checksum());
        CHECK(st.base->params().all_frozen());

        const TrainState back = load_checkpoint(cfg.ckpt_out);
        CHECK(back.base->params().checksum() == st.base->params().checksum());
        CHECK(back.app->params().checksum() == st.app->params().checksum());
        CHECK(back.stage == 1);
        CHECK(back.step == st.step);
        CHECK(back.rng.state() == st.rng.state());
        CHECK(back.loss_history.size() == st.loss_history.size());
        CHECK(back.config_echo == st.config_echo);

        // checkpoint-level save -> load -> save byte identity
        const std::string again = "/tmp/repose_s1_again.ckpt";
        save_checkpoint(again, back);
        CHECK(slurp(again) == slurp(cfg.ckpt_out));
    }

    SUBCASE("identical config and seed reproduce the checkpoint bytes") {
        run_training(cfg);
        const std::vector<uint8_t> first = slurp(cfg.ckpt_out);
        run_training(cfg);
        CHECK(slurp(cfg.ckpt_out) == first);

        // a run that differs only in output path matches in everything
        // except the echoed path
        TrainConfig c2 = cfg;
        c2.ckpt_out = "/tmp/repose_s1_repeat.ckpt";
        run_training(c2);
        const TrainState s1 = load_checkpoint(cfg.ckpt_out);
        const TrainState s2 = load_checkpoint(c2.ckpt_out);
        CHECK(s1.base->params().checksum() == s2.base->params().checksum());
        CHECK(s1.app->params().checksum() == s2.app->params().checksum());
        CHECK(s1.rng.state() == s2.rng.state());
        CHECK(s1.loss_history == s2.loss_history);
    }

    SUBCASE("warm start skips the base warm-up but keeps its weights") {
        run_training(cfg);
        const TrainState first = load_checkpoint(cfg.ckpt_out);
        TrainConfig warm = cfg;
        warm.ckpt_in = cfg.ckpt_out;
        warm.ckpt_out = "/tmp/repose_s1_warm.ckpt";
        const TrainState st = run_training(warm);
        CHECK(st.base->params().checksum() == first.base->params().checksum());
    }

    SUBCASE("a diverging run aborts with a step diagnostic") {
        TrainConfig hot = cfg;
        hot.learning_rate = 1e30;
        hot.base_steps = 1;
        hot.steps = 6;
        hot.ckpt_out.clear();
        try {
            run_training(hot);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("step") != std::string::npos);
        }
    }
}

TEST_CASE("stage 2 driver: gating, step-0 bitwise no-op, ablation switches") {
    TrainConfig s1cfg = micro_cfg(micro_data());
    s1cfg.ckpt_out = "/tmp/repose_s2_base.ckpt";
    const TrainState stage1 = run_training(s1cfg);

    TrainConfig cfg = micro_cfg(micro_data());
    cfg.stage = 2;
    cfg.ckpt_in = s1cfg.ckpt_out;
    cfg.ckpt_out = "/tmp/repose_s2_out.ckpt";

    SUBCASE("stage 2 refuses to run without a stage-1 checkpoint") {
        TrainConfig bad = cfg;
        bad.ckpt_in.clear();
        CHECK_THROWS_AS(run_training(bad), ConfigError);
    }

    SUBCASE("stage 2 rejects a stage-2 checkpoint as input") {
        TrainConfig first = cfg;
        first.steps = 1;
        run_training(first);
        TrainConfig again = cfg;
        again.ckpt_in = cfg.ckpt_out;
        CHECK_THROWS_AS(run_training(again), StateError);
    }

    SUBCASE("at step 0 the joint model generates exactly the stage-1 output") {
        TrainConfig c0 = cfg;
        c0.steps = 0;
        const TrainState st = run_training(c0);
        REQUIRE(bool(st.pose));
        CHECK(st.base->params().checksum() == stage1.base->params().checksum());
        CHECK(st.app->params().checksum() == stage1.app->params().checksum());

        DatasetReader reader(cfg.data);
        const SpriteSample s = reader.sample(0);
        const Tensor<float> ref = reshape(image_to_tensor(s.ref_image), Shape{1, 3, 32, 32});
        const Tensor<float> pm = reshape(image_to_tensor(s.pose_map), Shape{1, 3, 32, 32});
        Rng ra(99), rb(99);
        const Tensor<float> plain = guided_sample<float>(*stage1.base, *stage1.app, nullptr,
                                                         stage1.ns, ref, nullptr, 4, 2.0, ra);
        const Tensor<float> with_pose = guided_sample<float>(*st.base, *st.app, st.pose.get(),
                                                             st.ns, ref, &pm, 4, 2.0, rb);
        CHECK(plain.value() == with_pose.value());
    }

    SUBCASE("joint training moves appearance and pose nets, base stays frozen") {
        const TrainState st = run_training(cfg);
        REQUIRE(bool(st.pose));
        CHECK(st.base->params().checksum() == stage1.base->params().checksum());
        CHECK(st.app->params().checksum() != stage1.app->params().checksum());
        CHECK(linf(st.pose->params().at("zp0.w").value()) > 0.0);

        const TrainState back = load_checkpoint(cfg.ckpt_out);
        REQUIRE(bool(back.pose));
        CHECK(back.pose->params().checksum() == st.pose->params().checksum());
        CHECK(back.app->params().checksum() == st.app->params().checksum());

        const std::string again = "/tmp/repose_s2_again.ckpt";
        save_checkpoint(again, back);
        CHECK(slurp(again) == slurp(cfg.ckpt_out));
    }

    SUBCASE("no_disentangle freezes the appearance net") {
        TrainConfig c = cfg;
        c.no_disentangle = true;
        c.ckpt_out = "/tmp/repose_s2_nodis.ckpt";
        const TrainState st = run_training(c);
        CHECK(st.app->params().checksum() == stage1.app->params().checksum());
        CHECK(linf(st.pose->params().at("zp0.w").value()) > 0.0);
    }

    SUBCASE("no_pretrain starts appearance from fresh random weights") {
        TrainConfig c = cfg;
        c.no_pretrain = true;
        c.steps = 0;
        c.ckpt_out = "/tmp/repose_s2_nopre.ckpt";
        const TrainState st = run_training(c);
        CHECK(st.app->params().checksum() != stage1.app->params().checksum());
        CHECK(st.base->params().checksum() == stage1.base->params().checksum());
    }
}
