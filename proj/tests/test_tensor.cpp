#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pvit/tensor.hpp"

using namespace pvit;

namespace {

// Fixed random weights per shape; catches gradient errors that a plain sum
// would cancel. The returned lambda is deterministic, as finite_diff_check
// requires.
std::function<TensorPtr(const TensorPtr&)> make_weighted_sum(const Shape& shape, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : w) x = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return [w](const TensorPtr& t) { return sum_all(mul(t, new_tensor(t->shape, w))); };
}

Shape random_small_shape(Rng& rng, int max_elems = 16) {
    int rank = 1 + static_cast<int>(rng.below(2));
    Shape s;
    long total = 1;
    for (int i = 0; i < rank; ++i) {
        long d = 1 + static_cast<long>(rng.below(4));
        if (total * d > max_elems) d = 1;
        s.push_back(d);
        total *= d;
    }
    return s;
}

}  // namespace

TEST(NewTensor, ShapeValueCountAgreement) {
    auto t = new_tensor({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t->numel(), 6);
    auto s = new_tensor({1}, {0.0});
    EXPECT_TRUE(s->is_scalar());
    EXPECT_THROW(new_tensor({2, 2}, {1, 2, 3}), ShapeMismatch);
    EXPECT_THROW(new_tensor({0}, {}), ShapeMismatch);
}

TEST(Elementwise, AddClipMul) {
    auto a = new_tensor({2}, {1, 2});
    auto b = new_tensor({2}, {3, 4});
    auto c = elementwise(EwKind::add, a, b);
    EXPECT_EQ(c->values, (std::vector<double>{4, 6}));

    auto clipped = clip_max(new_tensor({2}, {0.5, 12.0}), 10.0);
    EXPECT_EQ(clipped->values, (std::vector<double>{0.5, 10.0}));

    auto bad = new_tensor({3}, {1, 2, 3});
    EXPECT_THROW(mul(a, bad), ShapeMismatch);
}

TEST(Elementwise, ScalarBroadcastOnly) {
    auto a = new_tensor({2, 2}, {1, 2, 3, 4});
    auto s = scalar_tensor(2.0);
    EXPECT_EQ(mul(a, s)->values, (std::vector<double>{2, 4, 6, 8}));
    EXPECT_EQ(scale(a, -1.0)->values, (std::vector<double>{-1, -2, -3, -4}));
}

TEST(Matmul, ShapesAndIdentity) {
    Rng rng(7);
    auto a = randn({2, 3}, rng);
    auto b = randn({3, 4}, rng);
    auto c = matmul(a, b);
    EXPECT_EQ(c->shape, (Shape{2, 4}));

    auto eye = zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye->values[i * 3 + i] = 1.0;
    auto m = randn({3, 5}, rng);
    auto im = matmul(eye, m);
    EXPECT_EQ(im->values, m->values);

    auto bad = randn({4, 2}, rng);
    EXPECT_THROW(matmul(a, bad), ShapeMismatch);
}

TEST(Softmax, UniformAndShiftInvariance) {
    auto logits = zeros({4});
    auto p = softmax(logits, 0);
    for (double v : p->values) EXPECT_DOUBLE_EQ(v, 0.25);

    Rng rng(11);
    auto x = randn({2, 5}, rng);
    auto shifted = add_scalar(x, 3.7);
    auto p1 = softmax(x, 1);
    auto p2 = softmax(shifted, 1);
    for (size_t i = 0; i < p1->values.size(); ++i) EXPECT_NEAR(p1->values[i], p2->values[i], 1e-14);

    // Closed form: e^0/(e^0 + e^{ln 3}) = 1/4.
    auto two = softmax(new_tensor({2}, {0.0, std::log(3.0)}), 0);
    EXPECT_NEAR(two->values[0], 0.25, 1e-15);
    EXPECT_NEAR(two->values[1], 0.75, 1e-15);

    EXPECT_THROW(softmax(x, 2), InvalidAxis);
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = randn({3, 7}, rng, 5.0);
        auto p = softmax(x, 1);
        for (int r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int j = 0; j < 7; ++j) s += p->values[r * 7 + j];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerNorm, ZeroVarianceAndHandValues) {
    auto gain = full({3}, 1.0);
    auto bias = zeros({3});
    auto constant_row = full({1, 3}, 5.0);
    auto out = layer_norm(constant_row, gain, bias);
    for (double v : out->values) EXPECT_DOUBLE_EQ(v, 0.0);

    // Row [1,-1] already has mean 0 and variance 1.
    auto g2 = full({2}, 1.0);
    auto b2 = zeros({2});
    auto row = new_tensor({1, 2}, {1.0, -1.0});
    auto y = layer_norm(row, g2, b2, 1e-12);
    EXPECT_NEAR(y->values[0], 1.0, 1e-9);
    EXPECT_NEAR(y->values[1], -1.0, 1e-9);

    auto b3 = new_tensor({3}, {7.0, 8.0, 9.0});
    auto z = layer_norm(constant_row, gain, b3);
    EXPECT_EQ(z->values, (std::vector<double>{7.0, 8.0, 9.0}));
}

TEST(LayerNorm, PreAffineRowsAreCentered) {
    Rng rng(17);
    auto x = randn({4, 8}, rng, 2.0);
    auto y = layer_norm(x, full({8}, 1.0), zeros({8}));
    for (int r = 0; r < 4; ++r) {
        double mean = 0.0;
        for (int j = 0; j < 8; ++j) mean += y->values[r * 8 + j];
        EXPECT_LT(std::fabs(mean / 8.0), 1e-10);
    }
}

TEST(Concat, RowsAndSliceRecovery) {
    Rng rng(19);
    const long d = 6;
    auto a = randn({1, d}, rng);
    auto b = randn({4, d}, rng);
    auto c = randn({5, d}, rng);
    auto cat = concat({a, b, c}, 0);
    EXPECT_EQ(cat->shape, (Shape{10, d}));

    auto back = slice(cat, 0, 1, 4);
    EXPECT_EQ(back->values, b->values);  // bit-exact

    auto single = concat({b}, 0);
    EXPECT_EQ(single->values, b->values);

    auto bad = randn({2, d + 1}, rng);
    EXPECT_THROW(concat({a, bad}, 0), ShapeMismatch);
}

TEST(Concat, ColumnsAxis) {
    auto a = new_tensor({2, 1}, {1, 3});
    auto b = new_tensor({2, 2}, {10, 20, 30, 40});
    auto cat = concat({a, b}, 1);
    EXPECT_EQ(cat->shape, (Shape{2, 3}));
    EXPECT_EQ(cat->values, (std::vector<double>{1, 10, 20, 3, 30, 40}));
    auto col = slice(cat, 1, 0, 1);
    EXPECT_EQ(col->values, a->values);
}

TEST(Reduce, MeanSumAxis) {
    EXPECT_DOUBLE_EQ(mean_all(new_tensor({2}, {2, 4}))->scalar(), 3.0);
    EXPECT_DOUBLE_EQ(sum_all(zeros({5}))->scalar(), 0.0);
    auto m = reduce(new_tensor({2, 2}, {1, 2, 3, 4}), Reduce::mean, 0);
    EXPECT_EQ(m->shape, (Shape{2}));
    EXPECT_EQ(m->values, (std::vector<double>{2, 3}));
    EXPECT_THROW(reduce(m, Reduce::sum, 1), InvalidAxis);
}

TEST(Backward, LinearAndDisconnected) {
    auto w = new_tensor({3}, {1, 2, 3}, true);
    auto x = new_tensor({3}, {4, 5, 6});
    auto loss = sum_all(mul(w, x));
    backward(loss);
    EXPECT_EQ(w->grad, x->values);

    // A leaf the loss does not depend on keeps a zero (absent) gradient.
    auto unused = new_tensor({2}, {1, 1}, true);
    EXPECT_TRUE(unused->grad.empty());

    // mean(w^2) over 4 elements: d/dw = w/2.
    auto w2 = new_tensor({4}, {1, -2, 3, 0.5}, true);
    auto loss2 = mean_all(square(w2));
    backward(loss2);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(w2->grad[i], w2->values[i] / 2.0, 1e-15);
}

TEST(Backward, AccumulatesAcrossCalls) {
    auto w = new_tensor({2}, {1, 2}, true);
    auto x = new_tensor({2}, {3, 4});
    auto loss = sum_all(mul(w, x));
    backward(loss);
    backward(loss);
    EXPECT_EQ(w->grad, (std::vector<double>{6, 8}));
}

TEST(Backward, ErrorsAndNoGradLeaves) {
    auto w = new_tensor({2}, {1, 2}, true);
    auto v = mul(w, w);
    EXPECT_THROW(backward(v), NotScalar);
    auto leaf = scalar_tensor(1.0, true);
    EXPECT_THROW(backward(leaf), DisconnectedLoss);

    // requires_grad=false leaves never accumulate, even inside a live graph.
    auto frozen = new_tensor({2}, {1, 2}, false);
    auto live = new_tensor({2}, {3, 4}, true);
    backward(sum_all(mul(frozen, live)));
    EXPECT_TRUE(frozen->grad.empty());
    EXPECT_EQ(live->grad, (std::vector<double>{1, 2}));

    // A graph built entirely from non-grad tensors records no nodes at all.
    auto pure = sum_all(mul(frozen, frozen));
    EXPECT_TRUE(pure->is_leaf());
    EXPECT_THROW(backward(pure), DisconnectedLoss);
}

TEST(Backward, MatmulFormulas) {
    // dA = dC B^T, dB = A^T dC with dC = ones.
    auto a = new_tensor({2, 2}, {1, 2, 3, 4}, true);
    auto b = new_tensor({2, 2}, {5, 6, 7, 8}, true);
    backward(sum_all(matmul(a, b)));
    EXPECT_EQ(a->grad, (std::vector<double>{11, 15, 11, 15}));
    EXPECT_EQ(b->grad, (std::vector<double>{4, 4, 6, 6}));
}

TEST(BackwardGrads, PureModeDoesNotTouchTensors) {
    auto w = new_tensor({2}, {1, 2}, true);
    auto loss = sum_all(square(w));
    auto grads = backward_grads(loss);
    EXPECT_TRUE(w->grad.empty());
    ASSERT_TRUE(grads.count(w.get()));
    EXPECT_EQ(grads[w.get()], (std::vector<double>{2, 4}));
}

TEST(FiniteDiff, OracleSelfTest) {
    auto theta = scalar_tensor(3.0, true);
    auto f = [&]() { return square(theta); };
    EXPECT_LT(finite_diff_check(f, {theta}, 1e-4), 1e-8);

    // Constant function of theta: analytic 0 vs numeric O(step) noise.
    auto g = [&]() { return sum_all(scale(theta, 0.0)); };
    EXPECT_LT(finite_diff_check(g, {theta}, 1e-4), 1e-3);
}

TEST(Determinism, ReplayIsBitIdentical) {
    auto run = [] {
        Rng rng(99);
        auto x = randn({4, 4}, rng, 1.0, true);
        auto w = randn({4, 4}, rng, 1.0, true);
        auto y = gelu(matmul(x, w));
        auto loss = mean_all(layer_norm(y, full({4}, 1.0), zeros({4})));
        backward(loss);
        return std::pair(loss->scalar(), x->grad);
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    EXPECT_EQ(l1, l2);
    EXPECT_EQ(g1, g2);
}

// Every differentiable op: reverse-mode gradient matches central finite
// differences within 1e-3 relative at step 1e-4 (randomized small shapes).
TEST(GradientProperty, AllOpsMatchFiniteDifferences) {
    Rng rng(2024);
    const double kStep = 1e-4;
    const double kTol = 1e-3;
    const int kTrials = 100;

    // Wraps an op in a fixed weighted sum and runs the oracle.
    auto check = [&](const std::function<TensorPtr()>& make_out, const std::vector<TensorPtr>& params) {
        auto ws = make_weighted_sum(make_out()->shape, rng);
        return finite_diff_check([ws, make_out] { return ws(make_out()); }, params, kStep);
    };

    // Resamples values that sit within margin of a subgradient kink.
    auto away_from = [&](const TensorPtr& t, double kink, double margin) {
        for (auto& v : t->values) {
            while (std::fabs(v - kink) < margin) v = rng.normal();
        }
    };

    for (int trial = 0; trial < kTrials; ++trial) {
        Shape shape = random_small_shape(rng);
        auto a = randn(shape, rng, 1.0, true);
        auto b = randn(shape, rng, 1.0, true);
        const int which = trial % 15;
        double worst = 0.0;
        switch (which) {
            case 0:
                worst = check([&] { return add(a, b); }, {a, b});
                break;
            case 1:
                worst = check([&] { return sub(a, b); }, {a, b});
                break;
            case 2:
                worst = check([&] { return mul(a, b); }, {a, b});
                break;
            case 3:
                for (auto& v : b->values) {
                    while (std::fabs(v) < 0.2) v = rng.normal();
                }
                worst = check([&] { return div(a, b); }, {a, b});
                break;
            case 4:
                away_from(a, 0.5, 10 * kStep);
                worst = check([&] { return clip_max(a, 0.5); }, {a});
                break;
            case 5:
                away_from(a, -0.25, 10 * kStep);
                worst = check([&] { return clip_min(a, -0.25); }, {a});
                break;
            case 6:
                worst = check([&] { return gelu(a); }, {a});
                break;
            case 7:
                worst = check([&] { return sigmoid(a); }, {a});
                break;
            case 8:
                away_from(a, 0.0, 10 * kStep);
                worst = check([&] { return absval(a); }, {a});
                break;
            case 9: {
                // Keep the two operands separated so min/max picks stay stable.
                for (size_t i = 0; i < a->values.size(); ++i) {
                    while (std::fabs(a->values[i] - b->values[i]) < 10 * kStep) b->values[i] = rng.normal();
                }
                worst = std::max(check([&] { return emin(a, b); }, {a, b}), check([&] { return emax(a, b); }, {a, b}));
                break;
            }
            case 10: {
                long m = 1 + static_cast<long>(rng.below(3));
                long k = 1 + static_cast<long>(rng.below(3));
                long p = 1 + static_cast<long>(rng.below(3));
                auto x = randn({m, k}, rng, 1.0, true);
                auto y = randn({k, p}, rng, 1.0, true);
                worst = check([&] { return matmul(x, y); }, {x, y});
                break;
            }
            case 11: {
                long axis = static_cast<long>(rng.below(shape.size()));
                worst = std::max(check([&] { return softmax(a, axis); }, {a}),
                                 check([&] { return log_softmax(a, axis); }, {a}));
                break;
            }
            case 12: {
                long d = 2 + static_cast<long>(rng.below(4));
                long r = 1 + static_cast<long>(rng.below(3));
                auto x = randn({r, d}, rng, 1.0, true);
                auto gn = randn({d}, rng, 0.5, true);
                auto bs = randn({d}, rng, 0.5, true);
                worst = check([&] { return layer_norm(x, gn, bs); }, {x, gn, bs});
                break;
            }
            case 13: {
                auto x = randn({2, 3}, rng, 1.0, true);
                auto y = randn({1, 3}, rng, 1.0, true);
                worst = check([&] { return concat({x, repeat_rows(y, 2)}, 0); }, {x, y});
                worst = std::max(worst, check([&] { return slice(x, 1, 1, 2); }, {x}));
                worst = std::max(worst, check([&] { return transpose(reshape(x, {3, 2})); }, {x}));
                break;
            }
            case 14: {
                long axis = static_cast<long>(rng.below(shape.size()));
                worst = check([&] { return reduce(a, Reduce::mean, axis); }, {a});
                worst = std::max(worst, finite_diff_check([&] { return mean_all(square(a)); }, {a}, kStep));
                break;
            }
        }
        EXPECT_LT(worst, kTol) << "op case " << which << " trial " << trial;
    }
}
