#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "maskflow/autodiff.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/pipeline.hpp"
#include "maskflow/training.hpp"

using namespace maskflow;
using testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

ParamStore store_of(std::initializer_list<std::pair<const char*, Tensor>> items) {
    ParamStore p;
    for (const auto& [name, t] : items) p.add(name, t, Group::other);
    return p;
}

double check(const ad::LossFn& f, const ParamStore& p, std::uint64_t seed = 1, std::size_t n = 100) {
    ad::GradCheckOptions o;
    o.n_coords = n;
    o.seed = seed;
    return ad::grad_check(f, p, o).max_rel_error;
}

}  // namespace

TEST_SUITE("tensor") {
    TEST_CASE("construction validates shape and finiteness") {
        CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
        CHECK_THROWS_AS(Tensor({1}, std::vector<double>{std::nan("")}), ArgumentError);
        CHECK_THROWS_AS(Tensor({1}, std::vector<double>{INFINITY}), ArgumentError);
        set_checked_mode(false);
        CHECK_NOTHROW(Tensor({1}, std::vector<double>{std::nan("")}));
        set_checked_mode(true);
        Tensor t({2, 3, 4});
        CHECK(t.size() == shape_numel(t.shape()));
        CHECK(t.rows() == 2);
        CHECK(t.cols() == 12);
    }

    TEST_CASE("reshape and slicing") {
        Tensor m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
        CHECK(m.reshaped({2, 3}).at(1, 0) == 4.0);
        CHECK_THROWS_AS(m.reshaped({4}), DimensionError);
        Tensor s = m.rows_slice(1, 3);
        CHECK(s.shape() == Shape{2, 2});
        CHECK(s.at(0, 0) == 3.0);
        CHECK_THROWS_AS(m.rows_slice(2, 4), DimensionError);
        CHECK_THROWS_AS(m.item(), ContractError);
    }
}

TEST_SUITE("matmul") {
    TEST_CASE("identity and analytic cases") {
        Tensor I = Tensor::matrix({{1, 0}, {0, 1}});
        Tensor A = Tensor::matrix({{1, 2}, {3, 4}});
        CHECK(ad::matmul(I, A).bit_equal(A));
        CHECK(ad::matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item() == 11.0);
    }

    TEST_CASE("random product matches the triple-loop oracle") {
        Tensor a = random_tensor({5, 7}, 1), b = random_tensor({7, 3}, 2);
        CHECK(max_abs_diff(ad::matmul(a, b), naive_matmul(a, b)) < 1e-12);
    }

    TEST_CASE("shape mismatch is a dimension error") {
        ad::Graph g;
        CHECK_THROWS_AS(ad::matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), DimensionError);
        CHECK_THROWS_AS(ad::add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))), DimensionError);
    }
}

TEST_SUITE("attention") {
    TEST_CASE("softmax rows are distributions") {
        Tensor s = ad::softmax_rows(random_tensor({6, 9}, 3, 5.0));
        for (std::size_t r = 0; r < s.rows(); ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < s.cols(); ++c) {
                CHECK(s.at(r, c) >= 0.0);
                sum += s.at(r, c);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }

    TEST_CASE("a single key returns its value row") {
        ad::Graph g;
        Tensor v = random_tensor({1, 4}, 4);
        auto out = ad::attention(g.constant(random_tensor({3, 4}, 5)), g.constant(random_tensor({1, 4}, 6)),
                                 g.constant(v));
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out.value().at(r, c) - v.at(0, c)) < 1e-15);
    }

    TEST_CASE("equal scores give the column mean of v") {
        ad::Graph g;
        Tensor v = random_tensor({5, 4}, 7);
        auto out = ad::attention(g.constant(Tensor({2, 4})), g.constant(random_tensor({5, 4}, 8)), g.constant(v));
        for (std::size_t c = 0; c < 4; ++c) {
            double m = 0.0;
            for (std::size_t r = 0; r < 5; ++r) m += v.at(r, c) / 5.0;
            CHECK(std::abs(out.value().at(0, c) - m) < 1e-12);
        }
    }

    TEST_CASE("random case matches softmax-then-matmul") {
        Tensor q = random_tensor({3, 4}, 9), k = random_tensor({5, 4}, 10), v = random_tensor({5, 4}, 11);
        ad::Graph g;
        auto out = ad::attention(g.constant(q), g.constant(k), g.constant(v), 1);
        Tensor kt({4, 5});
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 4; ++j) kt.at(j, i) = k.at(i, j) / 2.0;
        Tensor ref = ad::matmul(ad::softmax_rows(ad::matmul(q, kt)), v);
        CHECK(max_abs_diff(out.value(), ref) < 1e-12);
    }

    TEST_CASE("block layout equals separate attention per block") {
        Tensor q = random_tensor({6, 4}, 12), k = random_tensor({4, 4}, 13), v = random_tensor({4, 4}, 14);
        ad::Graph g;
        auto full = ad::attention(g.constant(q), g.constant(k), g.constant(v), 2,
                                  ad::AttentionLayout::uniform_blocks(2, 3, 2));
        for (std::size_t b = 0; b < 2; ++b) {
            auto part = ad::attention(g.constant(q.rows_slice(3 * b, 3 * b + 3)), g.constant(k.rows_slice(2 * b, 2 * b + 2)),
                                      g.constant(v.rows_slice(2 * b, 2 * b + 2)), 2);
            CHECK(max_abs_diff(full.value().rows_slice(3 * b, 3 * b + 3), part.value()) < 1e-15);
        }
    }

    TEST_CASE("empty key context is rejected") {
        ad::Graph g;
        CHECK_THROWS_AS(ad::attention(g.constant(Tensor({2, 4})), g.constant(Tensor({0, 4})), g.constant(Tensor({0, 4}))),
                        ArgumentError);
        CHECK_THROWS_AS(ad::attention(g.constant(Tensor({2, 6})), g.constant(Tensor({2, 6})), g.constant(Tensor({2, 6})), 4),
                        DimensionError);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum gives ones, half sum of squares gives w") {
        Tensor w = random_tensor({3, 4}, 15);
        ad::Graph g;
        auto wv = g.variable(w, "w");
        auto grads = g.backward(ad::sum(wv));
        for (double x : grads["w"].storage()) CHECK(x == 1.0);
        ad::Graph g2;
        auto w2 = g2.variable(w, "w");
        auto grads2 = g2.backward(ad::affine(ad::sum(ad::mul(w2, w2)), 0.5, 0.0));
        CHECK(max_abs_diff(grads2["w"], w) < 1e-15);
    }

    TEST_CASE("non-scalar loss is a contract error") {
        ad::Graph g;
        auto w = g.variable(Tensor({2, 2}, 1.0), "w");
        CHECK_THROWS_AS(g.backward(w), ContractError);
    }

    TEST_CASE("frozen parameters are constants") {
        ParamStore p;
        p.add("a", Tensor({2, 2}, 1.0), Group::lora);
        p.add("b", Tensor({2, 2}, 1.0), Group::other);
        p.set_trainable({Group::lora});
        ad::Graph g;
        auto loss = ad::sum(ad::mul(g.parameter(p, "a"), g.parameter(p, "b")));
        auto grads = g.backward(loss);
        CHECK(grads.count("a") == 1);
        CHECK(grads.count("b") == 0);
    }

    TEST_CASE("replay is bit-identical") {
        ParamStore p = store_of({{"w", random_tensor({4, 4}, 16)}, {"x", random_tensor({3, 4}, 17)}});
        auto run = [&] {
            ad::Graph g;
            auto x = g.parameter(p, "x"), w = g.parameter(p, "w");
            auto h = ad::gelu(ad::matmul(x, w));
            auto loss = ad::mean(ad::attention(h, x, h, 2));
            return std::make_pair(loss.value().item(), g.backward(loss));
        };
        auto [l1, g1] = run();
        auto [l2, g2] = run();
        CHECK(l1 == l2);
        CHECK(g1["w"].bit_equal(g2["w"]));
        CHECK(g1["x"].bit_equal(g2["x"]));
    }
}

TEST_SUITE("grad_check") {
    TEST_CASE("linear map is exact to roundoff") {
        ParamStore p = store_of({{"w", random_tensor({3, 3}, 18)}});
        Tensor c = random_tensor({3, 3}, 19);
        auto f = [&](ad::Graph& g, const ParamStore& ps) { return ad::sum(ad::mul(g.parameter(ps, "w"), g.constant(c))); };
        CHECK(check(f, p) < 1e-10);
    }

    TEST_CASE("softmax cross-entropy toy") {
        ParamStore p = store_of({{"w", random_tensor({6, 4}, 20, 0.5)}});
        Tensor x = random_tensor({4, 1}, 21);
        auto f = [&](ad::Graph& g, const ParamStore& ps) {
            auto logits = ad::matmul(g.parameter(ps, "w"), g.constant(x));
            return ad::sub(ad::log(ad::sum(ad::exp(logits))), ad::sum(ad::slice_rows(logits, 2, 3)));
        };
        CHECK(check(f, p) < 1e-6);
    }

    TEST_CASE("every primitive passes the finite-difference oracle") {
        ParamStore p = store_of({{"a", random_tensor({4, 6}, 22, 0.7)},
                                 {"b", random_tensor({4, 6}, 23, 0.7)},
                                 {"w", random_tensor({6, 6}, 24, 0.4)},
                                 {"r", random_tensor({1, 6}, 25)},
                                 {"gain", random_tensor({1, 6}, 26)},
                                 {"bias", random_tensor({1, 6}, 27)}});
        Tensor pos = Tensor({4, 6}, 2.0);
        const std::vector<std::pair<const char*, ad::LossFn>> cases = {
            {"matmul", [](ad::Graph& g, const ParamStore& s) { return ad::sum(ad::matmul(g.parameter(s, "a"), g.parameter(s, "w"))); }},
            {"mul", [](ad::Graph& g, const ParamStore& s) { return ad::sum(ad::mul(g.parameter(s, "a"), g.parameter(s, "b"))); }},
            {"div", [&](ad::Graph& g, const ParamStore& s) {
                 return ad::sum(ad::div(g.parameter(s, "a"), ad::add(ad::mul(g.parameter(s, "b"), g.parameter(s, "b")), g.constant(pos))));
             }},
            {"add_row", [](ad::Graph& g, const ParamStore& s) {
                 auto y = ad::add_row(g.parameter(s, "a"), g.parameter(s, "r"));
                 return ad::sum(ad::mul(y, y));
             }},
            {"exp_log", [&](ad::Graph& g, const ParamStore& s) {
                 return ad::sum(ad::log(ad::add(ad::exp(g.parameter(s, "a")), g.constant(pos))));
             }},
            {"tanh", [](ad::Graph& g, const ParamStore& s) { return ad::sum(ad::mul(ad::tanh(g.parameter(s, "a")), g.parameter(s, "b"))); }},
            {"gelu", [](ad::Graph& g, const ParamStore& s) { return ad::sum(ad::mul(ad::gelu(g.parameter(s, "a")), g.parameter(s, "b"))); }},
            {"layer_norm", [](ad::Graph& g, const ParamStore& s) {
                 auto y = ad::layer_norm(g.parameter(s, "a"), g.parameter(s, "gain"), g.parameter(s, "bias"));
                 return ad::sum(ad::mul(y, g.parameter(s, "b")));
             }},
            {"mse", [](ad::Graph& g, const ParamStore& s) { return ad::mse(g.parameter(s, "a"), g.parameter(s, "b")); }},
            {"slice_concat", [](ad::Graph& g, const ParamStore& s) {
                 auto a = g.parameter(s, "a");
                 auto y = ad::concat_rows({ad::slice_rows(a, 2, 4), ad::slice_rows(a, 0, 1), g.parameter(s, "b")});
                 return ad::sum(ad::mul(y, y));
             }},
            {"attention", [](ad::Graph& g, const ParamStore& s) {
                 auto a = g.parameter(s, "a"), b = g.parameter(s, "b");
                 auto y = ad::attention(ad::matmul(a, g.parameter(s, "w")), b, a, 3, ad::AttentionLayout::uniform_blocks(2, 2, 2));
                 return ad::sum(ad::mul(y, b));
             }},
            {"neg_log_sigmoid", [](ad::Graph& g, const ParamStore& s) {
                 return ad::neg_log_sigmoid(ad::mean(ad::mul(g.parameter(s, "a"), g.parameter(s, "b"))));
             }},
        };
        for (const auto& [name, f] : cases) {
            CAPTURE(name);
            CHECK(check(f, p) < 1e-4);
        }
    }

    TEST_CASE("relu away from the kink") {
        Tensor a = random_tensor({4, 6}, 28);
        for (double& v : a.storage()) v += v >= 0 ? 0.1 : -0.1;
        ParamStore p = store_of({{"a", a}});
        auto f = [](ad::Graph& g, const ParamStore& s) {
            auto x = g.parameter(s, "a");
            return ad::sum(ad::mul(ad::relu(x), x));
        };
        CHECK(check(f, p) < 1e-4);
    }

    TEST_CASE("full model under the flow-matching loss") {
        config::RunConfig rc;
        rc.model = testing::small_model();
        for (std::uint64_t seed : {1, 2}) {
            auto res = pipeline::model_grad_check(rc, seed, 60);
            CAPTURE(res.worst_param);
            CHECK(res.n_checked == 60);
            CHECK(res.max_rel_error < 1e-4);
        }
    }
}
