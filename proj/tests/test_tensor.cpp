// Tensor engine tests. Oracles here are independent of the library: hand
// summation, naive reference loops, and central finite differences.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "repose/gradcheck.hpp"
#include "repose/ops.hpp"
#include "repose/params.hpp"
#include "repose/rng.hpp"

#include <cmath>

using namespace repose;

namespace {

// naive O(B*O*C*OH*OW*kh*kw) cross-correlation in double
std::vector<double> conv_oracle(const std::vector<double>& x, int64_t B, int64_t C, int64_t H,
                                int64_t W, const std::vector<double>& w, int64_t O, int64_t kh,
                                int64_t kw, const std::vector<double>& bias, int64_t s,
                                int64_t p, int64_t OH, int64_t OW) {
    std::vector<double> y(size_t(B * O * OH * OW), 0.0);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bias.empty() ? 0.0 : bias[o];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t ih = oh * s + i - p;
                                const int64_t iw = ow * s + j - p;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[((b * C + c) * H + ih) * W + iw] *
                                       w[((o * C + c) * kh + i) * kw + j];
                            }
                    y[((b * O + o) * OH + oh) * OW + ow] = acc;
                }
    return y;
}

template <class T>
Tensor<T> randn_t(Shape s, Rng& rng) {
    return randn<T>(std::move(s), rng);
}

}  // namespace

TEST_CASE("gemm kernel matches double oracle on awkward shapes") {
    Rng rng(11);
    const int64_t shapes[][3] = {{1, 1, 1},   {3, 5, 7},     {8, 32, 64},  {9, 33, 65},
                                 {17, 27, 288}, {64, 48, 16}, {63, 130, 100}, {257, 31, 5}};
    for (auto& s : shapes) {
        const int64_t M = s[0], N = s[1], K = s[2];
        std::vector<float> A(size_t(M * K)), B(size_t(K * N)), C(size_t(M * N));
        for (auto& v : A) v = float(rng.normal());
        for (auto& v : B) v = float(rng.normal());
        kern::gemm(M, N, K, A.data(), B.data(), C.data());
        double worst = 0;
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < N; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < K; ++k) acc += double(A[i * K + k]) * double(B[k * N + j]);
                worst = std::max(worst, std::fabs(acc - double(C[i * N + j])));
            }
        CHECK(worst < 1e-3);  // float accumulation noise only
    }
    // double kernel is near-exact against the same oracle
    const int64_t M = 31, N = 45, K = 129;
    std::vector<double> A(size_t(M * K)), B(size_t(K * N)), C(size_t(M * N));
    for (auto& v : A) v = rng.normal();
    for (auto& v : B) v = rng.normal();
    kern::gemm(M, N, K, A.data(), B.data(), C.data());
    double worst = 0;
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < K; ++k) acc += A[i * K + k] * B[k * N + j];
            worst = std::max(worst, std::fabs(acc - C[i * N + j]));
        }
    CHECK(worst < 1e-10);
}

TEST_CASE("gemm is bitwise deterministic") {
    Rng rng(5);
    const int64_t M = 37, N = 65, K = 301;
    std::vector<float> A(size_t(M * K)), B(size_t(K * N)), C1(size_t(M * N)), C2(size_t(M * N));
    for (auto& v : A) v = float(rng.normal());
    for (auto& v : B) v = float(rng.normal());
    kern::gemm(M, N, K, A.data(), B.data(), C1.data());
    kern::gemm(M, N, K, A.data(), B.data(), C2.data());
    CHECK(std::memcmp(C1.data(), C2.data(), C1.size() * sizeof(float)) == 0);
}

TEST_CASE("matmul: identity, hand oracle, FD gradient") {
    // I3 * X == X exactly
    std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
    auto I = Tensor<double>::from_data({3, 3}, eye);
    Rng rng(3);
    auto X = randn_t<double>({3, 4}, rng);
    auto Y = matmul(I, X);
    for (int64_t i = 0; i < 12; ++i) CHECK(Y.value()[i] == X.value()[i]);

    // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]] (hand summation)
    auto A = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
    auto B = Tensor<double>::from_data({2, 2}, {5, 6, 7, 8});
    auto C = matmul(A, B);
    CHECK(C.value() == std::vector<double>{19, 22, 43, 50});

    // d sum(a*b) / da and /db match central differences
    ParameterSet<double> ps;
    auto a = ps.add("a", randn_t<double>({4, 3}, rng));
    auto b = ps.add("b", randn_t<double>({3, 5}, rng));
    auto rep = grad_check([&] { return sum_all(matmul(a, b)); }, ps);
    CHECK(rep.pass());
    CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("softmax_rows: values, normalization, shift invariance, scale, FD") {
    auto x = Tensor<double>::from_data({3}, {1, 2, 3});
    auto y = softmax_rows(x, 1.0);
    // frozen oracle: exp(i)/sum computed by hand calculator
    CHECK(y.value()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-12));
    CHECK(y.value()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-12));

    // scale divides the logits: softmax([2,4,6]/2) == softmax([1,2,3])
    auto y2 = softmax_rows(Tensor<double>::from_data({3}, {2, 4, 6}), 2.0);
    for (int i = 0; i < 3; ++i) CHECK(y2.value()[i] == doctest::Approx(y.value()[i]).epsilon(1e-12));

    Rng rng(9);
    auto big = randn_t<double>({7, 11}, rng);
    auto sb = softmax_rows(big, 3.0);
    for (int64_t r = 0; r < 7; ++r) {
        double s = 0;
        for (int64_t i = 0; i < 11; ++i) {
            const double v = sb.value()[r * 11 + i];
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    // additive shifts leave the result (nearly) unchanged
    auto shifted = add_scalar(big, 123.5);
    auto ss = softmax_rows(shifted, 3.0);
    for (size_t i = 0; i < ss.value().size(); ++i)
        CHECK(ss.value()[i] == doctest::Approx(sb.value()[i]).epsilon(1e-9));
    // huge logits do not overflow thanks to max subtraction
    auto huge = softmax_rows(Tensor<double>::from_data({2}, {1000.0, 1001.0}), 1.0);
    CHECK(huge.value()[0] + huge.value()[1] == doctest::Approx(1.0).epsilon(1e-9));

    ParameterSet<double> ps;
    auto p = ps.add("x", randn_t<double>({5, 8}, rng));
    auto w = randn_t<double>({5, 8}, rng);  // fixed mixing so the loss depends on all outputs
    auto rep = grad_check([&] { return sum_all(mul(softmax_rows(p, 2.0), w)); }, ps);
    CHECK(rep.pass());
}

TEST_CASE("conv2d: trivial kernels, oracle, errors, FD") {
    // 1x1 identity weight reproduces the input exactly
    Rng rng(17);
    auto x = randn_t<double>({2, 3, 5, 5}, rng);
    std::vector<double> wid(9, 0.0);
    wid[0 * 3 * 1 * 1 + 0] = 1;  // o=0 <- c=0
    wid[1 * 3 * 1 * 1 + 1] = 1;
    wid[2 * 3 * 1 * 1 + 2] = 1;
    auto W1 = Tensor<double>::from_data({3, 3, 1, 1}, wid);
    auto y1 = conv2d(x, W1, 1, 0);
    for (size_t i = 0; i < y1.value().size(); ++i) CHECK(y1.value()[i] == x.value()[i]);

    // all-ones 3x3 kernel on all-ones 4x4 input, pad 0 -> 2x2 of 9s
    auto ones = Tensor<double>::full({1, 1, 4, 4}, 1.0);
    auto wones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y9 = conv2d(ones, wones, 1, 0);
    REQUIRE(y9.shape() == Shape{1, 1, 2, 2});
    for (double v : y9.value()) CHECK(v == 9.0);

    // random configs against the naive loop oracle
    struct Cfg { int64_t B, C, H, W, O, kh, kw, s, p; };
    for (const Cfg cfg : {Cfg{2, 3, 8, 8, 5, 3, 3, 1, 1}, Cfg{1, 4, 9, 9, 3, 3, 3, 2, 1},
                          Cfg{2, 2, 6, 7, 4, 1, 1, 1, 0}, Cfg{1, 3, 7, 7, 2, 5, 3, 1, 2}}) {
        auto xi = randn_t<double>({cfg.B, cfg.C, cfg.H, cfg.W}, rng);
        auto wi = randn_t<double>({cfg.O, cfg.C, cfg.kh, cfg.kw}, rng);
        auto bi = randn_t<double>({cfg.O}, rng);
        auto yo = conv2d(xi, wi, bi, cfg.s, cfg.p);
        const int64_t OH = (cfg.H + 2 * cfg.p - cfg.kh) / cfg.s + 1;
        const int64_t OW = (cfg.W + 2 * cfg.p - cfg.kw) / cfg.s + 1;
        auto ref = conv_oracle(xi.value(), cfg.B, cfg.C, cfg.H, cfg.W, wi.value(), cfg.O,
                               cfg.kh, cfg.kw, bi.value(), cfg.s, cfg.p, OH, OW);
        REQUIRE(yo.numel() == int64_t(ref.size()));
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(yo.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    }

    // non-integral output extent is a dimension error
    auto xb = randn_t<double>({1, 1, 5, 5}, rng);
    auto wb = randn_t<double>({1, 1, 2, 2}, rng);
    CHECK_THROWS_AS((void)conv2d(xb, wb, 2, 0), ShapeError);

    // FD over x, w, bias, with stride and padding in play
    ParameterSet<double> ps;
    auto px = ps.add("x", randn_t<double>({2, 3, 7, 7}, rng));
    auto pw = ps.add("w", randn_t<double>({4, 3, 3, 3}, rng));
    auto pb = ps.add("b", randn_t<double>({4}, rng));
    auto mix = randn_t<double>({2, 4, 4, 4}, rng);
    auto rep = grad_check([&] { return sum_all(mul(conv2d(px, pw, pb, 2, 1), mix)); }, ps);
    CHECK(rep.pass());
}

TEST_CASE("elementwise ops and activations: values and FD") {
    Rng rng(23);
    auto a = Tensor<double>::from_data({4}, {-2.0, -0.5, 0.5, 2.0});

    auto s = silu(a);
    for (int i = 0; i < 4; ++i) {
        const double v = a.value()[i];
        CHECK(s.value()[i] == doctest::Approx(v / (1.0 + std::exp(-v))).epsilon(1e-12));
    }
    auto g = gelu(a);
    for (int i = 0; i < 4; ++i) {
        const double v = a.value()[i];
        CHECK(g.value()[i] ==
              doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-12));
    }

    ParameterSet<double> ps;
    auto pa = ps.add("a", randn_t<double>({3, 7}, rng));
    auto pbt = ps.add("b", randn_t<double>({3, 7}, rng));
    auto mix = randn_t<double>({3, 7}, rng);
    auto rep = grad_check(
        [&] {
            auto h = add(mul(pa, pbt), sub(pa, scale(pbt, 0.3)));
            h = add_scalar(silu(h), 0.1);
            h = gelu(h);
            return sum_all(mul(h, mix));
        },
        ps);
    CHECK(rep.pass());
}

TEST_CASE("reductions and losses") {
    // f(x) = sum(x^2), x = [1,2,3] -> grad [2,4,6]; FD agreement is ~1e-8
    ParameterSet<double> ps;
    auto x = ps.add("x", Tensor<double>::from_data({3}, {1, 2, 3}));
    {
        TapeScope<double> tape;
        auto loss = sum_all(mul(x, x));
        CHECK(loss.item() == doctest::Approx(14.0));
        tape.backward(loss);
    }
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(x.grad()[2] == doctest::Approx(6.0).epsilon(1e-12));
    auto rep = grad_check([&] { return sum_all(mul(x, x)); }, ps);
    CHECK(rep.pass());
    CHECK(rep.max_rel < 1e-8);

    // mse_loss value + FD
    Rng rng(31);
    ParameterSet<double> ps2;
    auto p = ps2.add("p", randn_t<double>({2, 5}, rng));
    auto t = randn_t<double>({2, 5}, rng);
    {
        NoGradGuard<double> ng;
        double acc = 0;
        for (int i = 0; i < 10; ++i) {
            const double d = p.value()[i] - t.value()[i];
            acc += d * d;
        }
        CHECK(mse_loss(p, t).item() == doctest::Approx(acc / 10.0).epsilon(1e-12));
    }
    CHECK(grad_check([&] { return mse_loss(p, t); }, ps2).pass());
    CHECK(grad_check([&] { return mean_all(mul(p, p)); }, ps2).pass());
}

TEST_CASE("norm layers match naive statistics and pass FD") {
    Rng rng(41);
    const int64_t B = 2, C = 6, H = 3, W = 4, G = 3;
    ParameterSet<double> ps;
    auto x = ps.add("x", randn_t<double>({B, C, H, W}, rng));
    auto ga = ps.add("gamma", randn_t<double>({C}, rng));
    auto be = ps.add("beta", randn_t<double>({C}, rng));
    const double eps = 1e-5;
    auto y = group_norm(x, G, ga, be, eps);

    // naive per-(sample,group) statistics
    const int64_t CG = C / G, m = CG * H * W;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < G; ++g) {
            double mu = 0, var = 0;
            for (int64_t c = g * CG; c < (g + 1) * CG; ++c)
                for (int64_t p = 0; p < H * W; ++p) mu += x.value()[(b * C + c) * H * W + p];
            mu /= double(m);
            for (int64_t c = g * CG; c < (g + 1) * CG; ++c)
                for (int64_t p = 0; p < H * W; ++p) {
                    const double d = x.value()[(b * C + c) * H * W + p] - mu;
                    var += d * d;
                }
            var /= double(m);
            for (int64_t c = g * CG; c < (g + 1) * CG; ++c)
                for (int64_t p = 0; p < H * W; ++p) {
                    const double xh =
                        (x.value()[(b * C + c) * H * W + p] - mu) / std::sqrt(var + eps);
                    const double want = xh * ga.value()[c] + be.value()[c];
                    CHECK(y.value()[(b * C + c) * H * W + p] ==
                          doctest::Approx(want).epsilon(1e-9));
                }
        }

    auto mix = randn_t<double>({B, C, H, W}, rng);
    CHECK(grad_check([&] { return sum_all(mul(group_norm(x, G, ga, be, eps), mix)); }, ps)
              .pass());

    // layer_norm: normalized rows have mean 0 / var 1 before affine; FD
    ParameterSet<double> ps2;
    auto t = ps2.add("t", randn_t<double>({5, 8}, rng));
    auto g2 = ps2.add("gamma", Tensor<double>::full({8}, 1.0));
    auto b2 = ps2.add("beta", Tensor<double>::zeros({8}));
    auto ln = layer_norm(t, g2, b2, eps);
    for (int64_t r = 0; r < 5; ++r) {
        double mu = 0, var = 0;
        for (int64_t i = 0; i < 8; ++i) mu += ln.value()[r * 8 + i];
        mu /= 8;
        for (int64_t i = 0; i < 8; ++i) {
            const double d = ln.value()[r * 8 + i] - mu;
            var += d * d;
        }
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(var / 8 == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks it slightly
    }
    auto mix2 = randn_t<double>({5, 8}, rng);
    CHECK(grad_check([&] { return sum_all(mul(layer_norm(t, g2, b2, eps), mix2)); }, ps2)
              .pass());
}

TEST_CASE("concat/slice recover inputs exactly; FD through both") {
    Rng rng(53);
    auto a = randn_t<double>({2, 3, 4}, rng);
    auto b = randn_t<double>({2, 5, 4}, rng);
    auto cat = concat_axis(a, b, 1);
    REQUIRE(cat.shape() == Shape{2, 8, 4});
    auto ra = slice_axis(cat, 1, 0, 3);
    auto rb = slice_axis(cat, 1, 3, 5);
    CHECK(ra.value() == a.value());
    CHECK(rb.value() == b.value());

    // token/channel specializations agree with the generic op
    auto catt = concat_tokens(a, b);
    CHECK(catt.value() == cat.value());
    auto a4 = randn_t<double>({2, 3, 4, 4}, rng);
    auto b4 = randn_t<double>({2, 2, 4, 4}, rng);
    CHECK(concat_channels(a4, b4).value() == concat_axis(a4, b4, 1).value());

    // broadcast bank: batch-1 second operand replicated across the batch
    auto bank = randn_t<double>({1, 5, 4}, rng);
    auto catb = concat_tokens(a, bank);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t t = 0; t < 5; ++t)
            for (int64_t c = 0; c < 4; ++c)
                CHECK(catb.value()[(i * 8 + 3 + t) * 4 + c] == bank.value()[(t * 4 + c)]);

    ParameterSet<double> ps;
    auto pa = ps.add("a", randn_t<double>({2, 3, 4}, rng));
    auto pb = ps.add("b", randn_t<double>({1, 5, 4}, rng));
    auto mix = randn_t<double>({2, 8, 4}, rng);
    CHECK(grad_check([&] { return sum_all(mul(concat_tokens(pa, pb), mix)); }, ps).pass());
    auto mix2 = randn_t<double>({2, 2, 4}, rng);
    CHECK(grad_check([&] { return sum_all(mul(slice_axis(pa, 1, 1, 2), mix2)); }, ps).pass());
}

TEST_CASE("layout ops: roundtrips exact, FD") {
    Rng rng(61);
    auto x = randn_t<double>({2, 5, 3, 4}, rng);
    auto tok = nchw_to_tokens(x);
    REQUIRE(tok.shape() == Shape{2, 12, 5});
    auto back = tokens_to_nchw(tok, 3, 4);
    CHECK(back.value() == x.value());

    auto t3 = randn_t<double>({2, 6, 8}, rng);
    auto sh = split_heads(t3, 4);
    REQUIRE(sh.shape() == Shape{8, 6, 2});
    CHECK(merge_heads(sh, 4).value() == t3.value());

    auto up = upsample_nearest2x(x);
    REQUIRE(up.shape() == Shape{2, 5, 6, 8});
    for (int64_t bc = 0; bc < 10; ++bc)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t w = 0; w < 8; ++w)
                CHECK(up.value()[bc * 48 + h * 8 + w] ==
                      x.value()[bc * 12 + (h / 2) * 4 + (w / 2)]);

    ParameterSet<double> ps;
    auto p = ps.add("x", randn_t<double>({2, 3, 2, 2}, rng));
    auto mix = randn_t<double>({2, 3, 4, 4}, rng);
    CHECK(grad_check([&] { return sum_all(mul(upsample_nearest2x(p), mix)); }, ps).pass());
    auto mix2 = randn_t<double>({2, 4, 3}, rng);
    CHECK(grad_check(
              [&] { return sum_all(mul(nchw_to_tokens(p), mix2)); }, ps)
              .pass());
    auto p2 = ps.add("t", randn_t<double>({2, 4, 6}, rng));
    auto mix3 = randn_t<double>({2, 4, 6}, rng);
    CHECK(grad_check(
              [&] { return sum_all(mul(merge_heads(split_heads(p2, 3), 3), mix3)); }, ps)
              .pass());

    // reshape + add_channel_vec FD
    ParameterSet<double> ps3;
    auto px = ps3.add("x", randn_t<double>({2, 3, 2, 2}, rng));
    auto pv = ps3.add("v", randn_t<double>({2, 3}, rng));
    auto mix4 = randn_t<double>({2, 3, 2, 2}, rng);
    CHECK(grad_check([&] { return sum_all(mul(add_channel_vec(px, pv), mix4)); }, ps3).pass());
}

TEST_CASE("batched matmuls match per-slice matmul and pass FD") {
    Rng rng(71);
    auto A = randn_t<double>({3, 4, 5}, rng);
    auto Bt = randn_t<double>({3, 6, 5}, rng);  // bmm_nt: [G,N,K]
    auto Y = bmm_nt(A, Bt);
    REQUIRE(Y.shape() == Shape{3, 4, 6});
    for (int64_t g = 0; g < 3; ++g)
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 6; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < 5; ++k)
                    acc += A.value()[(g * 4 + i) * 5 + k] * Bt.value()[(g * 6 + j) * 5 + k];
                CHECK(Y.value()[(g * 4 + i) * 6 + j] == doctest::Approx(acc).epsilon(1e-10));
            }
    auto Bn = randn_t<double>({3, 5, 6}, rng);  // bmm_nn: [G,K,N]
    auto Y2 = bmm_nn(A, Bn);
    for (int64_t g = 0; g < 3; ++g)
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 6; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < 5; ++k)
                    acc += A.value()[(g * 4 + i) * 5 + k] * Bn.value()[(g * 5 + k) * 6 + j];
                CHECK(Y2.value()[(g * 4 + i) * 6 + j] == doctest::Approx(acc).epsilon(1e-10));
            }

    ParameterSet<double> ps;
    auto pa = ps.add("a", randn_t<double>({2, 3, 4}, rng));
    auto pb = ps.add("b", randn_t<double>({2, 5, 4}, rng));
    auto pc = ps.add("c", randn_t<double>({2, 4, 5}, rng));
    auto mix = randn_t<double>({2, 3, 5}, rng);
    CHECK(grad_check([&] { return sum_all(mul(bmm_nt(pa, pb), mix)); }, ps).pass());
    CHECK(grad_check([&] { return sum_all(mul(bmm_nn(pa, pc), mix)); }, ps).pass());
}

TEST_CASE("linear matches matmul+bias and passes FD") {
    Rng rng(83);
    auto x = randn_t<double>({7, 5}, rng);
    auto W = randn_t<double>({4, 5}, rng);
    auto b = randn_t<double>({4}, rng);
    auto y = linear(x, W, b);
    for (int64_t i = 0; i < 7; ++i)
        for (int64_t o = 0; o < 4; ++o) {
            double acc = b.value()[o];
            for (int64_t k = 0; k < 5; ++k) acc += x.value()[i * 5 + k] * W.value()[o * 5 + k];
            CHECK(y.value()[i * 4 + o] == doctest::Approx(acc).epsilon(1e-10));
        }
    // 3D input: leading dims collapse
    auto x3 = randn_t<double>({2, 3, 5}, rng);
    auto y3 = linear(x3, W, b);
    REQUIRE(y3.shape() == Shape{2, 3, 4});

    ParameterSet<double> ps;
    auto px = ps.add("x", randn_t<double>({3, 5}, rng));
    auto pw = ps.add("W", randn_t<double>({4, 5}, rng));
    auto pb = ps.add("b", randn_t<double>({4}, rng));
    auto mix = randn_t<double>({3, 4}, rng);
    CHECK(grad_check([&] { return sum_all(mul(linear(px, pw, pb), mix)); }, ps).pass());
}

TEST_CASE("timestep embedding layout") {
    auto e = timestep_embedding<double>({0, 7, 255}, 8);
    REQUIRE(e.shape() == Shape{3, 8});
    // t=0: cos half all 1, sin half all 0
    for (int i = 0; i < 4; ++i) {
        CHECK(e.value()[i] == doctest::Approx(1.0));
        CHECK(e.value()[4 + i] == doctest::Approx(0.0));
    }
    // spot values from the formula
    for (int64_t b = 1; b < 3; ++b) {
        const double t = b == 1 ? 7.0 : 255.0;
        for (int i = 0; i < 4; ++i) {
            const double f = std::exp(-std::log(10000.0) * i / 4.0);
            CHECK(e.value()[b * 8 + i] == doctest::Approx(std::cos(t * f)).epsilon(1e-12));
            CHECK(e.value()[b * 8 + 4 + i] == doctest::Approx(std::sin(t * f)).epsilon(1e-12));
        }
    }
}

TEST_CASE("tape semantics: double backward, nesting, scope, pruning, no-grad") {
    Rng rng(97);
    ParameterSet<double> ps;
    auto x = ps.add("x", randn_t<double>({4}, rng));

    {
        TapeScope<double> tape;
        auto loss = sum_all(mul(x, x));
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), StateError);  // tape consumed
        CHECK_THROWS_AS(TapeScope<double>{}, StateError);  // no nesting
    }
    // backward on a tape that did not record the loss
    {
        Tensor<double> stray;
        {
            TapeScope<double> t1;
            stray = sum_all(mul(x, x));
        }
        TapeScope<double> t2;
        CHECK_THROWS_AS(t2.backward(stray), StateError);
    }
    // non-scalar loss rejected
    {
        TapeScope<double> tape;
        auto y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ShapeError);
    }
    // pruning: a recorded branch that does not feed the loss leaves no grads
    {
        ParameterSet<double> ps2;
        auto a = ps2.add("a", randn_t<double>({3}, rng));
        auto b = ps2.add("b", randn_t<double>({3}, rng));
        TapeScope<double> tape;
        auto unused = silu(mul(b, b));  // recorded but unreachable from loss
        auto loss = sum_all(mul(a, a));
        tape.backward(loss);
        CHECK(a.has_grad());
        CHECK_FALSE(b.has_grad());
        CHECK_FALSE(unused.has_grad());
        CHECK_THROWS_AS((void)b.grad(), StateError);
    }
    // no-grad mode records nothing and propagates no requires_grad
    {
        TapeScope<double> tape;
        size_t before = tape.recorded();
        NoGradGuard<double> ng;
        auto y = silu(mul(x, x));
        CHECK_FALSE(y.requires_grad());
        CHECK(tape.recorded() == before);
    }
    // frozen parameters receive no grad, others still do
    {
        ParameterSet<double> ps3;
        auto a = ps3.add("a", randn_t<double>({3}, rng));
        auto b = ps3.add("b", randn_t<double>({3}, rng));
        ps3.set_frozen("b", true);
        TapeScope<double> tape;
        auto loss = sum_all(mul(a, b));
        tape.backward(loss);
        CHECK(a.has_grad());
        CHECK_FALSE(b.has_grad());
        ps3.set_frozen("b", false);
    }
}

TEST_CASE("non-finite outputs are hard errors") {
    auto big = Tensor<float>::full({4}, 3e38f);
    CHECK_THROWS_AS((void)mul(big, big), NumericError);          // inf
    auto neg = Tensor<float>::full({4}, -1.0f);
    CHECK_THROWS_AS((void)add(mul(big, big), neg), NumericError);
    // log of 0 via softmax is protected by design; check scale op overflow
    CHECK_THROWS_AS((void)scale(big, 1e10f), NumericError);
}

TEST_CASE("grad_check flags a corrupted gradient rule") {
    // an intentionally wrong op: y = 2x forward, but backward claims dy/dx=3
    auto bad_double = [](const Tensor<double>& x) {
        std::vector<double> y(x.value());
        for (auto& v : y) v *= 2.0;
        auto xn = x.node();
        return repose::detail::make_op<double>("bad_double", x.shape(), std::move(y), {xn},
                                               [xn] {
            return [xn](Node<double>& self) {
                if (!xn->requires_grad) return;
                const auto& g = self.grad_buf();
                auto& dx = xn->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) dx[i] += 3.0 * g[i];  // wrong
            };
        });
    };
    ParameterSet<double> ps;
    auto x = ps.add("x", Tensor<double>::from_data({3}, {0.3, -0.7, 1.1}));
    auto rep = grad_check([&] { return sum_all(bad_double(x)); }, ps);
    CHECK_FALSE(rep.pass());
    CHECK(rep.flagged.size() == 3);
    CHECK(rep.flagged[0].param == "x");
}

TEST_CASE("parameter set: registration, freeze, checksum") {
    Rng rng(101);
    ParameterSet<float> ps;
    auto w = ps.add("w", randn_t<float>({3, 3}, rng));
    CHECK_THROWS_AS((void)ps.add("w", randn_t<float>({1}, rng)), StateError);
    CHECK(ps.scalar_count() == 9);
    CHECK_FALSE(ps.is_frozen(0));
    ps.set_all_frozen(true);
    CHECK(ps.all_frozen());
    CHECK_FALSE(w.requires_grad());
    const uint64_t c1 = ps.checksum();
    CHECK(c1 == ps.checksum());  // stable
    w.value_mut()[4] = std::nextafter(w.value()[4], 1e30f);
    CHECK(ps.checksum() != c1);  // single ULP flip changes it
}

TEST_CASE("graph evaluation is deterministic run-to-run") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        ParameterSet<float> ps;
        auto x = ps.add("x", randn_t<float>({4, 6}, rng));
        auto W = ps.add("W", randn_t<float>({6, 6}, rng));
        TapeScope<float> tape;
        auto y = softmax_rows(matmul(silu(matmul(x, W)), W), 2.0f);
        auto loss = mse_loss(y, Tensor<float>::full({4, 6}, 0.1f));
        tape.backward(loss);
        std::vector<float> out = y.value();
        auto gx = x.grad();
        out.insert(out.end(), gx.begin(), gx.end());
        out.push_back(loss.item());
        return out;
    };
    CHECK(run(7) == run(7));
    CHECK(run(7) != run(8));
}
