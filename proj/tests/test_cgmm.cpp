#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "facegen/base.hpp"
#include "facegen/cgmm.hpp"
#include "facegen/data.hpp"
#include "facegen/nn.hpp"
#include "facegen/rng.hpp"
#include "facegen/tensor.hpp"

using namespace facegen;
namespace fs = std::filesystem;

namespace {

// A small model with hand-set distributions: |dim| unit Gaussians whose
// parameters are chosen per test. Names follow the "group.label" convention
// so the schema reconstruction stays valid.
CgmmModel toy_model(std::size_t dim, const std::vector<std::vector<double>>& mus) {
    CgmmModel m;
    m.layer = 0;
    m.lambda = 0.0;
    const char* names[] = {"g0.a", "g0.b", "g1.a", "g1.b", "g2.a", "g2.b"};
    for (std::size_t j = 0; j < mus.size(); ++j) {
        m.attribute_names.push_back(names[j]);
        AttributeGaussian g;
        g.mu = Tensor::from_data({dim}, mus[j]);
        g.var = Tensor::full({dim}, kVarianceFloor);
        g.count = 2;
        m.gaussians.push_back(std::move(g));
        m.weights.push_back(1.0);
    }
    return m;
}

// Objective re-derived from its definition with plain loops, no shared code.
double naive_objective(const CgmmModel& m, const std::vector<Tensor>& acts,
                       const std::vector<std::vector<int>>& sets) {
    const std::size_t dim = acts[0].size();
    double total = 0.0;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        std::vector<double> target(dim, 0.0);
        for (int j : sets[i])
            for (std::size_t d = 0; d < dim; ++d)
                target[d] += m.weights[static_cast<std::size_t>(j)] *
                             m.gaussians[static_cast<std::size_t>(j)].mu[d] /
                             static_cast<double>(sets[i].size());
        for (std::size_t d = 0; d < dim; ++d)
            total += (acts[i][d] - target[d]) * (acts[i][d] - target[d]);
    }
    total /= static_cast<double>(acts.size());
    for (double w : m.weights) total += m.lambda * w * w;
    return total;
}

}  // namespace

TEST_CASE("fit_gaussian computes the sample mean and unbiased variance") {
    const std::vector<Tensor> acts = {Tensor::from_data({2}, {0, 2}), Tensor::from_data({2}, {2, 0})};
    const AttributeGaussian g = fit_gaussian(acts);
    CHECK(g.count == 2);
    CHECK(g.mu[0] == doctest::Approx(1.0));
    CHECK(g.mu[1] == doctest::Approx(1.0));
    CHECK(g.var[0] == doctest::Approx(2.0));  // ((0-1)^2 + (2-1)^2) / (2-1)
    CHECK(g.var[1] == doctest::Approx(2.0));

    CHECK_THROWS_AS(fit_gaussian({Tensor::from_data({2}, {0, 2})}), std::invalid_argument);
}

TEST_CASE("constant units hit the variance floor") {
    const std::vector<Tensor> acts = {Tensor::from_data({2}, {5, 1}), Tensor::from_data({2}, {5, 3}),
                                      Tensor::from_data({2}, {5, 2})};
    const AttributeGaussian g = fit_gaussian(acts);
    CHECK(g.var[0] == kVarianceFloor);
    CHECK(g.var[1] == doctest::Approx(1.0));
}

TEST_CASE("fit_gaussian recovers N(3, 4) from draws") {
    std::vector<Tensor> acts;
    Rng rng(99);
    for (int i = 0; i < 10000; ++i) acts.push_back(Tensor::randn({16}, 3.0, 2.0, rng));
    const AttributeGaussian g = fit_gaussian(acts);
    for (std::size_t d = 0; d < 16; ++d) {
        CHECK(std::abs(g.mu[d] - 3.0) < 0.1);
        CHECK(std::abs(g.var[d] - 4.0) / 4.0 < 0.10);
    }
}

TEST_CASE("mean-mode targets average the weighted attribute means") {
    CgmmModel m = toy_model(2, {{2, 0}, {0, 2}});
    m.weights = {1.0, 3.0};
    const Tensor t = sample_target(m, {0, 1}, TargetMode::mean, 0);
    CHECK(t[0] == doctest::Approx(1.0));  // (1*2 + 3*0) / 2
    CHECK(t[1] == doctest::Approx(3.0));  // (1*0 + 3*2) / 2

    const Tensor single = sample_target(m, {1}, TargetMode::mean, 0);
    CHECK(single[0] == doctest::Approx(0.0));
    CHECK(single[1] == doctest::Approx(6.0));
}

TEST_CASE("sample-mode targets are seeded draws near the mean at the floor variance") {
    CgmmModel m = toy_model(3, {{1, 2, 3}, {4, 5, 6}});
    const Tensor mean = sample_target(m, {0, 1}, TargetMode::mean, 0);
    const Tensor s1 = sample_target(m, {0, 1}, TargetMode::sample, 42);
    const Tensor s2 = sample_target(m, {0, 1}, TargetMode::sample, 42);
    const Tensor s3 = sample_target(m, {0, 1}, TargetMode::sample, 43);
    bool same = true, diff = false;
    for (std::size_t d = 0; d < 3; ++d) {
        same = same && s1[d] == s2[d];
        diff = diff || s1[d] != s3[d];
        CHECK(std::abs(s1[d] - mean[d]) < 0.01);  // stddev is sqrt(1e-6)
    }
    CHECK(same);
    CHECK(diff);
}

TEST_CASE("targets reject duplicates, unknown ids, and unusable attributes") {
    CgmmModel m = toy_model(2, {{1, 0}, {0, 1}});
    CHECK_THROWS_AS(sample_target(m, {0, 0}, TargetMode::mean, 0), std::invalid_argument);
    CHECK_THROWS_AS(sample_target(m, {}, TargetMode::mean, 0), std::invalid_argument);
    CHECK_THROWS_AS(sample_target(m, {5}, TargetMode::mean, 0), std::invalid_argument);
    m.gaussians[1].count = 1;
    CHECK_THROWS_AS(sample_target(m, {1}, TargetMode::mean, 0), std::invalid_argument);
    CHECK(m.attribute_id("g0.b") == 1);
    CHECK_THROWS_AS(m.attribute_id("g9.z"), std::invalid_argument);
}

TEST_CASE("weight objective matches a naive re-derivation") {
    Rng rng(7);
    CgmmModel m = toy_model(5, {std::vector<double>(5), std::vector<double>(5),
                                std::vector<double>(5), std::vector<double>(5)});
    for (auto& g : m.gaussians) g.mu = Tensor::randn({5}, 0, 1, rng);
    m.weights = {0.5, -1.0, 2.0, 1.0};
    m.lambda = 1e-3;
    std::vector<Tensor> acts;
    for (int i = 0; i < 6; ++i) acts.push_back(Tensor::randn({5}, 0, 1, rng));
    const std::vector<std::vector<int>> sets = {{0}, {1, 2}, {0, 3}, {2}, {1, 3, 0}, {3}};
    CHECK(weight_objective(m, acts, sets) ==
          doctest::Approx(naive_objective(m, acts, sets)).epsilon(1e-12));
}

TEST_CASE("weight gradient matches central differences") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t dim = 3 + static_cast<std::size_t>(rng.uniform_below(10));
        const int attrs = 2 + static_cast<int>(rng.uniform_below(3));
        CgmmModel m;
        m.layer = 0;
        m.lambda = trial % 2 == 0 ? 0.0 : 1e-4;
        for (int j = 0; j < attrs; ++j) {
            m.attribute_names.push_back("g" + std::to_string(j) + ".x");
            AttributeGaussian g;
            g.mu = Tensor::randn({dim}, 0, 1, rng);
            g.var = Tensor::full({dim}, kVarianceFloor);
            g.count = 2;
            m.gaussians.push_back(std::move(g));
            m.weights.push_back(rng.normal(1, 0.5));
        }
        std::vector<Tensor> acts;
        std::vector<std::vector<int>> sets;
        const int images = 4 + static_cast<int>(rng.uniform_below(8));
        for (int i = 0; i < images; ++i) {
            acts.push_back(Tensor::randn({dim}, 0, 1, rng));
            std::vector<int> set;
            for (int j = 0; j < attrs; ++j)
                if (rng.uniform() < 0.6) set.push_back(j);
            if (set.empty()) set.push_back(static_cast<int>(rng.uniform_below(
                static_cast<std::uint64_t>(attrs))));
            sets.push_back(std::move(set));
        }
        const auto grad = weight_gradient(m, acts, sets);
        const double h = 1e-6;
        for (int j = 0; j < attrs; ++j) {
            CgmmModel probe = m;
            probe.weights[static_cast<std::size_t>(j)] += h;
            const double lp = weight_objective(probe, acts, sets);
            probe.weights[static_cast<std::size_t>(j)] -= 2 * h;
            const double lm = weight_objective(probe, acts, sets);
            const double numeric = (lp - lm) / (2 * h);
            const double rel = std::abs(grad[static_cast<std::size_t>(j)] - numeric) /
                               std::max({std::abs(grad[static_cast<std::size_t>(j)]),
                                         std::abs(numeric), 1e-12});
            CHECK(rel <= 1e-6);
        }
    }
}

TEST_CASE("learned weights match the closed form for disjoint singleton sets") {
    // One attribute per image and lambda = 0 decouples the objective into
    // independent quadratics: w_j = sum_i <phi_i, mu_j> / (|pos_j| * |mu_j|^2).
    Rng rng(33);
    const std::size_t dim = 6;
    CgmmModel m = toy_model(dim, {std::vector<double>(dim), std::vector<double>(dim),
                                  std::vector<double>(dim)});
    for (auto& g : m.gaussians) g.mu = Tensor::randn({dim}, 0, 2, rng);
    m.weights = {1.0, 1.0, 1.0};
    m.lambda = 0.0;

    std::vector<Tensor> acts;
    std::vector<std::vector<int>> sets;
    for (int i = 0; i < 12; ++i) {
        acts.push_back(Tensor::randn({dim}, 0, 1.5, rng));
        sets.push_back({i % 3});
    }
    std::vector<double> want(3, 0.0);
    std::vector<double> norm(3, 0.0), count(3, 0.0);
    for (int i = 0; i < 12; ++i) {
        const int j = i % 3;
        for (std::size_t d = 0; d < dim; ++d)
            want[static_cast<std::size_t>(j)] +=
                acts[static_cast<std::size_t>(i)][d] * m.gaussians[static_cast<std::size_t>(j)].mu[d];
        count[static_cast<std::size_t>(j)] += 1.0;
    }
    for (int j = 0; j < 3; ++j) {
        for (std::size_t d = 0; d < dim; ++d)
            norm[static_cast<std::size_t>(j)] += m.gaussians[static_cast<std::size_t>(j)].mu[d] *
                                                 m.gaussians[static_cast<std::size_t>(j)].mu[d];
        want[static_cast<std::size_t>(j)] /=
            count[static_cast<std::size_t>(j)] * norm[static_cast<std::size_t>(j)];
    }

    const WeightLearnResult res = learn_weights(m, acts, sets, 1e-2, 3000);
    for (int j = 0; j < 3; ++j) {
        const double rel = std::abs(res.weights[static_cast<std::size_t>(j)] -
                                    want[static_cast<std::size_t>(j)]) /
                           std::max(std::abs(want[static_cast<std::size_t>(j)]), 1e-12);
        CHECK(rel <= 1e-3);
    }
    for (std::size_t k = 1; k < res.objective_trace.size(); ++k)
        CHECK(res.objective_trace[k] < res.objective_trace[k - 1]);
}

TEST_CASE("learn_weights halves its way out of an oversized learning rate") {
    Rng rng(44);
    CgmmModel m = toy_model(4, {std::vector<double>(4), std::vector<double>(4)});
    for (auto& g : m.gaussians) g.mu = Tensor::randn({4}, 0, 1, rng);
    std::vector<Tensor> acts = {Tensor::randn({4}, 0, 1, rng), Tensor::randn({4}, 0, 1, rng)};
    const std::vector<std::vector<int>> sets = {{0}, {1}};
    // 1e6 would explode a fixed-step descent; halving must still make progress.
    const WeightLearnResult res = learn_weights(m, acts, sets, 1e6, 200);
    CHECK(res.objective_trace.back() < res.objective_trace.front());
    for (std::size_t k = 1; k < res.objective_trace.size(); ++k)
        CHECK(res.objective_trace[k] <= res.objective_trace[k - 1]);
}

TEST_CASE("stats files round-trip bit-exactly and validate") {
    Rng rng(55);
    CgmmModel m = toy_model(7, {std::vector<double>(7), std::vector<double>(7),
                                std::vector<double>(7), std::vector<double>(7)});
    for (auto& g : m.gaussians) {
        g.mu = Tensor::randn({7}, 0, 1, rng);
        g.var = Tensor::randn({7}, 2, 0.1, rng);
        g.count = 17;
    }
    m.layer = 5;
    m.lambda = 3e-4;
    m.weights = {1.5, -0.5, 2.0, 0.25};

    const std::string bytes = stats_to_bytes(m);
    const CgmmModel back = stats_from_bytes(bytes);
    CHECK(back.layer == 5);
    CHECK(back.lambda == 3e-4);
    CHECK(back.attribute_names == m.attribute_names);
    CHECK(back.weights == m.weights);
    for (std::size_t j = 0; j < m.gaussians.size(); ++j) {
        CHECK(back.gaussians[j].count == 17);
        for (std::size_t d = 0; d < 7; ++d) {
            CHECK(back.gaussians[j].mu[d] == m.gaussians[j].mu[d]);
            CHECK(back.gaussians[j].var[d] == m.gaussians[j].var[d]);
        }
    }

    std::string bad = bytes;
    bad[0] = 'Q';
    CHECK_THROWS_AS(stats_from_bytes(bad), io_error);
    CHECK_THROWS_AS(stats_from_bytes(bytes + "y"), io_error);
    CHECK_THROWS_AS(stats_from_bytes(bytes.substr(0, bytes.size() - 2)), io_error);

    const fs::path path = fs::temp_directory_path() / "facegen_test_stats.cgs";
    save_stats(path, m);
    const CgmmModel loaded = load_stats(path);
    CHECK(stats_to_bytes(loaded) == bytes);
    fs::remove(path);
}

TEST_CASE("schema reconstruction groups consecutive qualified names") {
    const std::vector<std::string> names = {"hair.black", "hair.blond", "eyes.none", "eyes.glasses"};
    const AttributeSchema s = schema_from_attribute_names(names);
    REQUIRE(s.group_count() == 2);
    CHECK(s.groups[0].name == "hair");
    CHECK(s.groups[0].labels == std::vector<std::string>{"black", "blond"});
    CHECK(s.groups[1].labels == std::vector<std::string>{"none", "glasses"});

    CHECK_THROWS_AS(schema_from_attribute_names({"hair.black", "eyes.none", "hair.blond"}),
                    std::invalid_argument);
    CHECK_THROWS_AS(schema_from_attribute_names({"hairblack"}), std::invalid_argument);
}

TEST_CASE("collect_activations equals a manual forward at the layer") {
    NetworkSpec spec;
    spec.in_channels = 3;
    spec.in_height = 16;
    spec.in_width = 16;
    spec.trunk = {ConvSpec{4, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2, 2}, FlattenSpec{}, DenseSpec{10}};
    spec.heads = {HeadSpec{"hair_color", 4}};
    const Parameters params = init_parameters(spec, 3);

    AttributeSchema schema;
    schema.groups = {{"hair_color", {"black", "blond", "brown"}}};
    Dataset ds;
    ds.schema = schema;
    for (int i = 0; i < 4; ++i)
        ds.items.push_back({"x", Tensor::randn({3, 16, 16}, 0.5, 0.2,
                                               static_cast<std::uint64_t>(i)), {i % 3}});

    const auto acts = collect_activations(spec, params, ds, {1, 3}, 4);
    REQUIRE(acts.size() == 2);
    CHECK(acts[0].shape() == std::vector<std::size_t>{10});
    const ForwardTrace trace = forward_to_layer(spec, params, ds.items[3].image, 4);
    for (std::size_t d = 0; d < 10; ++d) CHECK(acts[1][d] == trace.trunk[4][d]);
}
