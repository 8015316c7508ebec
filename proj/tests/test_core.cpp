#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "subjectdiff/core/image.hpp"
#include "subjectdiff/core/nn.hpp"
#include "subjectdiff/core/ops.hpp"
#include "subjectdiff/core/optim.hpp"
#include "subjectdiff/core/rng.hpp"
#include "subjectdiff/core/serialize.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace sdg;

namespace {

// Central-difference gradient check against the autograd backward pass.
// Checks every element of every listed leaf.
template <typename F>
void check_grads(std::vector<TensorD*> leaves, F make_loss, double h = 1e-6, double tol = 1e-7) {
    for (auto* l : leaves) l->zero_grad();
    auto loss = make_loss();
    loss.backward();
    for (auto* leaf : leaves) {
        REQUIRE(leaf->has_grad());
        for (int64_t i = 0; i < leaf->numel(); i++) {
            double* x = leaf->data() + i;
            const double x0 = *x;
            *x = x0 + h;
            const double fp = make_loss().data()[0];
            *x = x0 - h;
            const double fm = make_loss().data()[0];
            *x = x0;
            const double num = (fp - fm) / (2 * h);
            const double ana = leaf->grad_vec()[static_cast<size_t>(i)];
            const double denom = std::max({1.0, std::abs(num), std::abs(ana)});
            CHECK(std::abs(num - ana) / denom < tol);
        }
    }
}

TensorD randn(std::vector<int> shape, Rng& rng, double scale = 1.0, bool needs_grad = true) {
    auto t = TensorD::leaf(std::move(shape), needs_grad);
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("rng: deterministic and state round-trips") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; i++) CHECK(a.u64() == b.u64());
    Rng c(7);
    c.normal();
    const std::string s = c.state();
    const double x1 = c.normal();
    Rng d(0);
    d.set_state(s);
    CHECK(d.normal() == x1);

    Rng e(5);
    double mean = 0;
    const int n = 20000;
    for (int i = 0; i < n; i++) mean += e.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.03);
}

TEST_CASE("derive_rng: independent keyed streams") {
    auto a = derive_rng(42, {1, 2});
    auto b = derive_rng(42, {1, 2});
    auto c = derive_rng(42, {1, 3});
    CHECK(a.u64() == b.u64());
    CHECK(a.u64() != c.u64());
}

TEST_CASE("grad: elementwise and scalar ops") {
    Rng rng(1);
    auto x = randn({3, 4}, rng);
    auto y = randn({3, 4}, rng);
    check_grads({&x, &y}, [&] { return mse_loss(silu(add(x, y)), TensorD::leaf({3, 4})); });
    check_grads({&x, &y}, [&] { return mse_loss(add_scaled(x, y, -2.5), TensorD::leaf({3, 4})); });
    check_grads({&x}, [&] { return mse_loss(scalar_mul(x, 1.7), TensorD::leaf({3, 4})); });
    auto s = randn({1}, rng, 0.1);
    check_grads({&x, &s}, [&] { return mse_loss(scale_by_param(x, exp_op(s)), TensorD::leaf({3, 4})); });
    check_grads({&x}, [&] { return mse_loss(reshape(x, {4, 3}), TensorD::leaf({4, 3})); });
}

TEST_CASE("grad: linear and matmul_nt") {
    Rng rng(2);
    auto x = randn({5, 3}, rng);
    auto w = randn({3, 4}, rng);
    auto b = randn({4}, rng);
    auto tgt = randn({5, 4}, rng, 1.0, false);
    check_grads({&x, &w, &b}, [&] { return mse_loss(linear(x, w, b), tgt); });

    auto a2 = randn({4, 6}, rng);
    auto b2 = randn({5, 6}, rng);
    auto t2 = randn({4, 5}, rng, 1.0, false);
    check_grads({&a2, &b2}, [&] { return mse_loss(matmul_nt(a2, b2), t2); });
}

TEST_CASE("grad: conv2d variants") {
    Rng rng(3);
    for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}}) {
        auto x = randn({2, 3, 6, 6}, rng);
        auto w = randn({4, 3, k, k}, rng, 0.5);
        auto b = randn({4}, rng, 0.1);
        const int oh = (6 + 2 * pad - k) / stride + 1;
        auto tgt = randn({2, 4, oh, oh}, rng, 1.0, false);
        check_grads({&x, &w, &b}, [&, s = stride, p = pad] { return mse_loss(conv2d(x, w, b, s, p), tgt); }, 1e-6,
                    1e-6);
    }
}

TEST_CASE("grad: group_norm") {
    Rng rng(4);
    auto x = randn({2, 8, 3, 3}, rng);
    auto gamma = randn({8}, rng, 0.5);
    auto beta = randn({8}, rng, 0.5);
    auto tgt = randn({2, 8, 3, 3}, rng, 1.0, false);
    check_grads({&x, &gamma, &beta}, [&] { return mse_loss(group_norm(x, gamma, beta, 4), tgt); }, 1e-6, 1e-6);
}

TEST_CASE("grad: attention with and without mask") {
    Rng rng(5);
    auto q = randn({2, 5, 8}, rng);
    auto k = randn({2, 7, 8}, rng);
    auto v = randn({2, 7, 8}, rng);
    auto tgt = randn({2, 5, 8}, rng, 1.0, false);
    check_grads({&q, &k, &v}, [&] { return mse_loss(attention(q, k, v, 2), tgt); }, 1e-6, 1e-6);

    auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 1, 0, 1, 0, 0, 1,
                                                                            0, 1, 1, 1, 1, 0, 0});
    check_grads({&q, &k, &v}, [&] { return mse_loss(attention(q, k, v, 2, mask), tgt); }, 1e-6, 1e-6);
}

TEST_CASE("attention: fully masked keys produce exact zeros") {
    Rng rng(6);
    auto q = randn({1, 3, 4}, rng);
    auto k = randn({1, 2, 4}, rng);
    auto v = randn({1, 2, 4}, rng);
    auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{0, 0});
    auto out = attention(q, k, v, 1, mask);
    for (double x : out.values()) CHECK(x == 0.0);
}

TEST_CASE("grad: layout and pooling ops") {
    Rng rng(7);
    auto x = randn({2, 4, 4, 4}, rng);
    auto t_seq = randn({2, 16, 4}, rng, 1.0, false);
    check_grads({&x}, [&] { return mse_loss(to_seq(x), t_seq); });
    auto xs = randn({2, 16, 4}, rng);
    auto t_sp = randn({2, 4, 4, 4}, rng, 1.0, false);
    check_grads({&xs}, [&] { return mse_loss(from_seq(xs, 4, 4), t_sp); });

    auto a = randn({2, 3, 4, 4}, rng);
    auto b = randn({2, 2, 4, 4}, rng);
    auto t_cat = randn({2, 5, 4, 4}, rng, 1.0, false);
    check_grads({&a, &b}, [&] { return mse_loss(concat_ch(a, b), t_cat); });

    auto t_up = randn({2, 3, 8, 8}, rng, 1.0, false);
    check_grads({&a}, [&] { return mse_loss(upsample_nearest2x(a), t_up); });

    auto bias = randn({2, 3}, rng);
    auto t_sb = randn({2, 3, 4, 4}, rng, 1.0, false);
    check_grads({&a, &bias}, [&] { return mse_loss(add_spatial_bias(a, bias), t_sb); });

    auto t_gap = randn({2, 3}, rng, 1.0, false);
    check_grads({&a}, [&] { return mse_loss(global_avg_pool(a), t_gap); });
}

TEST_CASE("grad: embedding, pooling, normalize, cross entropy") {
    Rng rng(8);
    auto table = randn({10, 6}, rng);
    std::vector<int> ids = {3, 3, 7, 0};
    auto t = randn({4, 6}, rng, 1.0, false);
    check_grads({&table}, [&] { return mse_loss(embed_rows(table, ids), t); });

    auto x = randn({2, 3, 4}, rng);
    auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 1, 1, 1});
    auto tm = randn({2, 4}, rng, 1.0, false);
    check_grads({&x}, [&] { return mse_loss(masked_mean_rows(x, mask), tm); });

    auto y = randn({3, 5}, rng);
    auto tn = randn({3, 5}, rng, 1.0, false);
    check_grads({&y}, [&] { return mse_loss(l2_normalize_rows(y), tn); });

    auto logits = randn({4, 6}, rng);
    std::vector<int> targets = {1, 0, 5, 2};
    check_grads({&logits}, [&] { return cross_entropy_logits(logits, targets); });
}

TEST_CASE("conv2d: per-sample outputs independent of batch order and thread count") {
    Rng rng(9);
    auto w = randn({8, 3, 3, 3}, rng, 0.3, false);
    auto b = randn({8}, rng, 0.1, false);
    auto x1 = randn({1, 3, 16, 16}, rng, 1.0, false);
    auto x2 = randn({1, 3, 16, 16}, rng, 1.0, false);

    auto batch = TensorD::leaf({2, 3, 16, 16});
    std::copy_n(x1.data(), x1.numel(), batch.data());
    std::copy_n(x2.data(), x2.numel(), batch.data() + x1.numel());
    auto swapped = TensorD::leaf({2, 3, 16, 16});
    std::copy_n(x2.data(), x2.numel(), swapped.data());
    std::copy_n(x1.data(), x1.numel(), swapped.data() + x2.numel());

    auto y = conv2d(batch, w, b, 1, 1);
    auto ys = conv2d(swapped, w, b, 1, 1);
    const int64_t per = y.numel() / 2;
    CHECK(std::memcmp(y.data(), ys.data() + per, sizeof(double) * per) == 0);
    CHECK(std::memcmp(y.data() + per, ys.data(), sizeof(double) * per) == 0);

#ifdef _OPENMP
    const int prev = omp_get_max_threads();
    omp_set_num_threads(1);
    auto y1 = conv2d(batch, w, b, 1, 1);
    omp_set_num_threads(prev);
    CHECK(std::memcmp(y.data(), y1.data(), sizeof(double) * y.numel()) == 0);
#endif
}

TEST_CASE("adamw: moves parameters and respects the filter") {
    Rng rng(10);
    ParamRegistry<double> reg;
    auto w1 = reg.add("a.w", {4, 4}, Partition::kBackbone);
    auto w2 = reg.add("obj.w", {4, 4}, Partition::kObjectAttention);
    init_he(w1, rng, 4);
    init_he(w2, rng, 4);
    const auto w2_before = w2.values();

    AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.attach(reg, [](const auto& e) { return e.part == Partition::kBackbone; });
    auto x = randn({2, 4}, rng, 1.0, false);
    auto loss = mse_loss(linear(x, w1, {}), randn({2, 4}, rng, 1.0, false));
    loss.backward();
    opt.step(1e-2);
    CHECK(w2.values() == w2_before);
    CHECK(reg.partition_hash(Partition::kObjectAttention) != 0);
}

TEST_CASE("ema: converges toward constant weights") {
    ParamRegistry<double> reg;
    auto w = reg.add("w", {4}, Partition::kBackbone);
    init_const(w, 0.0);
    Ema<double> ema(0.5);
    ema.init_from(reg);
    init_const(w, 1.0);
    for (int i = 0; i < 20; i++) ema.update(reg);
    ema.swap_into(reg);
    CHECK(w.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
    ema.swap_into(reg);
    CHECK(w.data()[0] == 1.0);
}

TEST_CASE("archive: round-trips meta and blobs") {
    Archive a;
    a.meta["kind"] = "test";
    a.meta["nested"] = {{"x", 1.5}, {"y", "z"}};
    std::vector<float> vals = {1.f, -2.f, 3.5f};
    a.put("w", {3}, vals.data(), vals.size());
    std::vector<double> dvals = {0.25, -0.125};
    a.put("d", {2, 1}, dvals.data(), dvals.size());

    const auto path = std::filesystem::temp_directory_path() / "sdg_archive_test.bin";
    a.save(path.string());
    auto b = Archive::load(path.string());
    CHECK(b.meta == a.meta);
    std::vector<int> shape;
    CHECK(b.get<float>("w", &shape) == vals);
    CHECK(shape == std::vector<int>{3});
    CHECK(b.get<double>("d") == dvals);
    CHECK(a.content_hash() == b.content_hash());
    std::filesystem::remove(path);
}

TEST_CASE("image: ppm/pbm round-trip is lossless at 8 bits") {
    Rng rng(11);
    ImageF img(3, 8, 8);
    for (auto& v : img.v) v = static_cast<float>(rng.uniform(-1, 1));
    // quantize to the on-disk grid first so the round trip is exact
    for (auto& v : img.v) v = u8_to_float(float_to_u8(v));
    const auto dir = std::filesystem::temp_directory_path();
    write_ppm((dir / "t.ppm").string(), img);
    auto back = read_ppm((dir / "t.ppm").string());
    CHECK(back.v == img.v);

    MaskImage m(8, 8);
    for (int i = 0; i < 8; i++) m.at(i, (i * 3) % 8) = 1;
    write_pbm((dir / "t.pbm").string(), m);
    auto mb = read_pbm((dir / "t.pbm").string());
    CHECK(mb.v == m.v);
    std::filesystem::remove(dir / "t.ppm");
    std::filesystem::remove(dir / "t.pbm");
}

TEST_CASE("no-grad mode skips graph construction") {
    Rng rng(12);
    auto x = randn({2, 3}, rng);
    NoGradGuard guard;
    auto y = silu(x);
    CHECK_FALSE(y.needs_grad());
}
