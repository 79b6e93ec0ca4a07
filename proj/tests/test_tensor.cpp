#include <doctest.h>

#include "ad/tensor.hpp"
#include "nn/adam.hpp"
#include "nn/modules.hpp"
#include "testutil.hpp"

using namespace tsyn;
using ad::Tensor;
using testutil::check_gradients;
using testutil::random_tensor;

TEST_CASE("elementwise arithmetic gradients") {
    Rng rng(1);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    // keep b away from zero for div
    for (std::int64_t i = 0; i < b.size(); ++i) b.data()[i] += b.data()[i] > 0 ? 1.5 : -1.5;
    check_gradients({a, b}, [&] {
        Tensor s = ad::add(ad::mul(a, b), ad::sub(a, b));
        s = ad::add(s, ad::div(a, b));
        s = ad::add(ad::scale(s, 0.7), ad::add_scalar(s, 0.1));
        return ad::mean_all(s);
    });
}

TEST_CASE("activation gradients") {
    Rng rng(2);
    Tensor a = random_tensor({17}, rng);
    // keep away from the relu/abs kinks
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (std::abs(a.data()[i]) < 0.05) a.data()[i] = 0.2;
    check_gradients({a}, [&] { return ad::mean_all(ad::relu(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::silu(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::tanh_act(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::sigmoid(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::softplus(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::square(a)); });
    check_gradients({a}, [&] { return ad::mean_all(ad::exp_t(ad::scale(a, 0.3))); });
    check_gradients({a}, [&] { return ad::mean_all(ad::log_t(ad::add_scalar(ad::square(a), 1.0))); });
    check_gradients({a}, [&] { return ad::mean_all(ad::abs_t(a)); });
}

TEST_CASE("matmul and bmm gradients") {
    Rng rng(3);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    check_gradients({a, b}, [&] { return ad::mean_all(ad::matmul(a, b)); });

    Tensor ba = random_tensor({2, 3, 4}, rng);
    Tensor bb = random_tensor({2, 4, 2}, rng);
    check_gradients({ba, bb}, [&] { return ad::mean_all(ad::square(ad::bmm(ba, bb))); });
}

TEST_CASE("softmax gradient and normalization") {
    Rng rng(4);
    Tensor a = random_tensor({3, 5}, rng);
    Tensor s = ad::softmax_lastdim(a);
    for (int r = 0; r < 3; ++r) {
        double sum = 0;
        for (int c = 0; c < 5; ++c) sum += s.data()[r * 5 + c];
        CHECK(sum == doctest::Approx(1.0));
    }
    Tensor w = random_tensor({3, 5}, rng, 1.0, false);
    check_gradients({a}, [&] { return ad::mean_all(ad::mul(ad::softmax_lastdim(a), w)); });
}

TEST_CASE("conv3d shapes and gradients") {
    Rng rng(5);
    Tensor x = random_tensor({1, 2, 4, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 3, 3, 3}, rng, 0.3);
    Tensor b = random_tensor({3}, rng, 0.1);

    Tensor y = ad::conv3d(x, w, b, 1, 1);
    CHECK(y.shape() == ad::Shape{1, 3, 4, 4, 4});
    Tensor y2 = ad::conv3d(x, w, b, 2, 1);
    CHECK(y2.shape() == ad::Shape{1, 3, 2, 2, 2});

    check_gradients({x, w, b}, [&] { return ad::mean_all(ad::square(ad::conv3d(x, w, b, 1, 1))); }, 1e-4);
    check_gradients({x, w, b}, [&] { return ad::mean_all(ad::square(ad::conv3d(x, w, b, 2, 1))); }, 1e-4);
}

TEST_CASE("conv2d gradients") {
    Rng rng(6);
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.3);
    Tensor b = random_tensor({3}, rng, 0.1);
    check_gradients({x, w, b}, [&] { return ad::mean_all(ad::square(ad::conv2d(x, w, b, 2, 1))); }, 1e-4);
}

TEST_CASE("conv3d matches a direct dense loop") {
    Rng rng(7);
    Tensor x = random_tensor({1, 2, 3, 4, 5}, rng, 1.0, false);
    Tensor w = random_tensor({2, 2, 3, 3, 3}, rng, 1.0, false);
    Tensor b = random_tensor({2}, rng, 1.0, false);
    Tensor y = ad::conv3d(x, w, b, 1, 1);
    const int A = 3, B = 4, C = 5, Ci = 2, Co = 2, k = 3;
    for (int co = 0; co < Co; ++co)
        for (int a = 0; a < A; ++a)
            for (int bb = 0; bb < B; ++bb)
                for (int c = 0; c < C; ++c) {
                    double acc = b.data()[co];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ka = 0; ka < k; ++ka)
                            for (int kb = 0; kb < k; ++kb)
                                for (int kc = 0; kc < k; ++kc) {
                                    const int ia = a + ka - 1, ib = bb + kb - 1, ic = c + kc - 1;
                                    if (ia < 0 || ia >= A || ib < 0 || ib >= B || ic < 0 || ic >= C) continue;
                                    acc += x.data()[((ci * A + ia) * B + ib) * C + ic] *
                                           w.data()[(((co * Ci + ci) * k + ka) * k + kb) * k + kc];
                                }
                    CHECK(y.data()[((co * A + a) * B + bb) * C + c] == doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("group_norm gradient and shape") {
    Rng rng(8);
    Tensor x = random_tensor({2, 4, 3, 3, 3}, rng);
    Tensor gamma = random_tensor({4}, rng, 0.5);
    Tensor beta = random_tensor({4}, rng, 0.5);
    for (std::int64_t i = 0; i < gamma.size(); ++i) gamma.data()[i] += 1.0;

    Tensor y = ad::group_norm(x, gamma, beta, 2);
    CHECK(y.shape() == x.shape());
    check_gradients({x, gamma, beta},
                    [&] { return ad::mean_all(ad::square(ad::group_norm(x, gamma, beta, 2))); }, 1e-4);
}

TEST_CASE("upsample, concat, slice, permute, reshape gradients") {
    Rng rng(9);
    Tensor x = random_tensor({1, 2, 2, 2, 2}, rng);
    Tensor y = ad::upsample_nearest3d(x, 2);
    CHECK(y.shape() == ad::Shape{1, 2, 4, 4, 4});
    check_gradients({x}, [&] { return ad::mean_all(ad::square(ad::upsample_nearest3d(x, 2))); });

    Tensor a = random_tensor({1, 2, 3}, rng);
    Tensor b = random_tensor({1, 4, 3}, rng);
    check_gradients({a, b}, [&] {
        Tensor cat = ad::concat({a, b}, 1);
        Tensor sl = ad::slice_axis(cat, 1, 1, 5);
        Tensor pm = ad::permute(sl, {2, 0, 1});
        return ad::mean_all(ad::square(ad::reshape(pm, {12})));
    });
}

TEST_CASE("row/channel bias and gather gradients") {
    Rng rng(10);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    check_gradients({x, b}, [&] { return ad::mean_all(ad::square(ad::add_row_bias(x, b))); });

    Tensor xc = random_tensor({2, 3, 2, 2, 2}, rng);
    Tensor bc = random_tensor({2, 3}, rng);
    check_gradients({xc, bc}, [&] { return ad::mean_all(ad::square(ad::add_channel_bias(xc, bc))); });

    Tensor table = random_tensor({5, 3}, rng);
    const std::vector<int> idx = {4, 0, 0, 2};
    Tensor g = ad::gather_rows(table, idx);
    CHECK(g.shape() == ad::Shape{4, 3});
    for (int j = 0; j < 3; ++j) CHECK(g.data()[j] == table.data()[4 * 3 + j]);
    check_gradients({table}, [&] { return ad::mean_all(ad::square(ad::gather_rows(table, idx))); });
}

TEST_CASE("losses: values and gradients") {
    Rng rng(11);
    Tensor a = random_tensor({9}, rng);
    Tensor b = random_tensor({9}, rng);
    CHECK(ad::l1_loss(a, a).item() == 0.0);
    CHECK(ad::mse_loss(b, b).item() == 0.0);
    check_gradients({a, b}, [&] { return ad::mse_loss(a, b); });
    check_gradients({a, b}, [&] { return ad::l1_loss(a, b); });

    Tensor logits = random_tensor({7}, rng);
    std::vector<double> t = {0, 1, 0, 1, 1, 0, 0.5};
    Tensor targets = Tensor::from_vec({7}, t);
    Tensor zero = Tensor::zeros({1});
    Tensor half = Tensor::from_vec({1}, {0.5});
    CHECK(ad::bce_with_logits(zero, half).item() == doctest::Approx(std::log(2.0)));
    check_gradients({logits}, [&] { return ad::bce_with_logits(logits, targets); });
}

TEST_CASE("detach blocks gradients; straight_through reroutes them") {
    Rng rng(12);
    Tensor a = random_tensor({4}, rng);
    Tensor loss = ad::mean_all(ad::square(ad::detach(a)));
    a.zero_grad();
    ad::backward(loss);
    CHECK(a.grad() == std::vector<double>(4, 0.0));

    const std::vector<double> values = {10.0, 20.0, 30.0, 40.0};
    Tensor st = ad::straight_through(values, a);
    for (int i = 0; i < 4; ++i) CHECK(st.data()[i] == values[static_cast<size_t>(i)]);
    Tensor w = Tensor::from_vec({4}, {1.0, 2.0, 3.0, 4.0});
    Tensor loss2 = ad::sum_all(ad::mul(st, w));
    a.zero_grad();
    ad::backward(loss2);
    // gradient w.r.t. the carrier equals the downstream gradient exactly
    for (int i = 0; i < 4; ++i) CHECK(a.grad()[static_cast<size_t>(i)] == w.data()[i]);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Rng rng(13);
    Tensor a = random_tensor({4}, rng);
    ad::NoGradGuard guard;
    Tensor y = ad::square(a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("factorized attention: shape, instrumented score sizes, gradients") {
    Rng rng(14);
    nn::ParamStore store;
    nn::FactorizedAttention attn(store, "attn", 4, rng);

    Tensor x = random_tensor({1, 4, 8, 8, 8}, rng, 0.5, false);
    nn::FactorizedAttention::reset_instrumentation();
    Tensor y;
    {
        ad::NoGradGuard guard;
        y = attn.forward(x);
    }
    CHECK(y.shape() == x.shape());
    // in-plane scores: d*(hw)^2; depth scores: hw*d^2 -- never (hwd)^2
    const std::int64_t expected = 8LL * 64 * 64 + 64LL * 8 * 8;
    CHECK(nn::FactorizedAttention::score_elements == expected);
    CHECK(expected < 512LL * 512);

    Tensor xs = random_tensor({1, 4, 2, 2, 3}, rng, 0.5);
    std::vector<Tensor> params = {xs, attn.q_plane.w, attn.k_depth.w, attn.norm.gamma};
    check_gradients(params, [&] { return ad::mean_all(ad::square(attn.forward(xs))); }, 1e-4);
}

TEST_CASE("adam drives a quadratic to its minimum deterministically") {
    nn::ParamStore store;
    Tensor p = store.add("p", {3}, {5.0, -3.0, 2.0});
    nn::Adam adam(store, 0.1);
    for (int step = 0; step < 400; ++step) {
        adam.zero_grad();
        Tensor loss = ad::mean_all(ad::square(ad::add_scalar(p, -1.0)));
        ad::backward(loss);
        adam.step();
    }
    for (int i = 0; i < 3; ++i) CHECK(p.data()[i] == doctest::Approx(1.0).epsilon(1e-3));
}
