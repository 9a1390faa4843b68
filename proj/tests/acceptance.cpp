// Acceptance gate: end-to-end checks of the numeric and product contracts,
// one printed line per criterion. Exits nonzero if any criterion fails.
//
//   1 gradient correctness (each layer type in isolation + the composed net)
//   2 attribute-weight gradient vs central differences
//   3 weight learning against the closed-form least-squares solution
//   4 Gaussian estimator convergence on known draws
//   5 desk-scale training accuracy + layer-freezing comparison
//   6 ground-truth reconstruction from conv activations
//   7 end-to-end attribute-conditioned generation
//   8 CLI determinism (every command, byte-identical reruns)
//   9 monotone inversion traces across all runs above

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "facegen/base.hpp"
#include "facegen/cgmm.hpp"
#include "facegen/data.hpp"
#include "facegen/generate.hpp"
#include "facegen/nn.hpp"
#include "facegen/rng.hpp"
#include "facegen/tensor.hpp"

using namespace facegen;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v, const char* spec = "%.3g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

struct Check {
    bool ok = true;
    std::string detail;
    void require(bool cond, const std::string& msg) {
        ok = ok && cond;
        if (!detail.empty()) detail += "; ";
        detail += msg + (cond ? "" : " <-- FAILED");
    }
};

// Inversion traces produced anywhere in this binary, inspected by criterion 9.
std::vector<std::pair<std::string, std::vector<double>>> g_traces;

NetworkSpec stock_spec(const AttributeSchema& schema) {
    NetworkSpec spec;
    spec.trunk = {ConvSpec{16, 3, 1, 1}, ReluSpec{},  MaxPoolSpec{2, 2}, ConvSpec{32, 3, 1, 1},
                  ReluSpec{},           MaxPoolSpec{2, 2}, FlattenSpec{},     DenseSpec{128},
                  ReluSpec{},           DropoutSpec{0.5},  DenseSpec{64},     ReluSpec{},
                  DropoutSpec{0.5}};
    for (const auto& g : schema.groups)
        spec.heads.push_back(HeadSpec{g.name, static_cast<int>(g.labels.size()) + 1});
    return spec;
}

struct TrainResult {
    Parameters params;
    std::vector<double> epoch_losses;
};

// Same update scheme the CLI uses: per-epoch shuffle, per-step dropout seed,
// SGD with an optional freeze mask. `start` fine-tunes from existing
// parameters instead of a fresh init.
TrainResult train_model(const NetworkSpec& spec, const Dataset& ds, int epochs, double lr,
                        double weight_decay, const FreezeMask& freeze, std::uint64_t seed,
                        const Parameters* start = nullptr) {
    TrainResult out;
    out.params = start ? *start : init_parameters(spec, split_seed(seed, 0));
    const std::uint64_t step_stream = split_seed(seed, 1);
    const std::uint64_t shuffle_stream = split_seed(seed, 2);
    std::vector<std::size_t> order(ds.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::uint64_t global_step = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(split_seed(shuffle_stream, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int loss_count = 0;
        for (std::size_t idx : order) {
            const auto& item = ds.items[idx];
            const ForwardTrace trace = forward(spec, out.params, item.image, RunMode::train,
                                               split_seed(step_stream, global_step));
            ++global_step;
            bool any = false;
            for (int l : item.labels) any = any || l != kUnlabeled;
            if (!any) continue;
            const MultiheadLoss loss = multihead_loss(trace, item.labels);
            loss_sum += loss.total;
            ++loss_count;
            const Gradients grads =
                backward(spec, out.params, trace, multihead_loss_grads(trace, item.labels));
            out.params = sgd_step(std::move(out.params), grads, lr, weight_decay, freeze);
        }
        out.epoch_losses.push_back(loss_count > 0 ? loss_sum / loss_count : 0.0);
    }
    return out;
}

std::vector<double> group_accuracy(const NetworkSpec& spec, const Parameters& params,
                                   const Dataset& ds) {
    std::vector<double> correct(spec.heads.size(), 0.0), total(spec.heads.size(), 0.0);
    for (const auto& item : ds.items) {
        const auto pred = classify_image(spec, params, ds.schema, item.image);
        for (std::size_t g = 0; g < pred.size(); ++g) {
            if (item.labels[g] == kUnlabeled) continue;
            total[g] += 1.0;
            if (pred[g] == item.labels[g]) correct[g] += 1.0;
        }
    }
    std::vector<double> acc(spec.heads.size(), 0.0);
    for (std::size_t g = 0; g < acc.size(); ++g) acc[g] = total[g] > 0 ? correct[g] / total[g] : 0.0;
    return acc;
}

// Trained artifacts shared by criteria 5-7.
struct Trained {
    Dataset train_ds;
    Dataset test_ds;
    NetworkSpec spec;
    Parameters params;
    bool ready = false;
};
Trained g_trained;

// --- criterion 1: gradient correctness ------------------------------------------

Check criterion_gradients() {
    Check c;
    const auto isolated = [&](const std::string& name, std::vector<LayerSpec> trunk, double tol,
                              RunMode mode) {
        NetworkSpec spec;
        spec.in_channels = 2;
        spec.in_height = 8;
        spec.in_width = 8;
        spec.trunk = std::move(trunk);
        spec.heads = {HeadSpec{"g", 3}};
        const Parameters params = init_parameters(spec, 7);
        const Tensor x = Tensor::randn({2, 8, 8}, 0.5, 0.2, 8);
        const double rel = gradient_check(spec, params, x, {1}, 1e-5, 200, 9, mode);
        c.require(rel <= tol, name + " " + fmt(rel) + " <= " + fmt(tol));
    };
    isolated("conv", {ConvSpec{3, 3, 1, 1}}, 1e-7, RunMode::eval);
    isolated("relu", {ConvSpec{3, 3, 1, 1}, ReluSpec{}}, 1e-4, RunMode::eval);
    isolated("maxpool", {MaxPoolSpec{2, 2}}, 1e-4, RunMode::eval);
    isolated("flatten", {FlattenSpec{}}, 1e-7, RunMode::eval);
    isolated("dense", {FlattenSpec{}, DenseSpec{12}}, 1e-7, RunMode::eval);
    isolated("dropout", {FlattenSpec{}, DropoutSpec{0.5}}, 1e-7, RunMode::train);

    const AttributeSchema schema = default_schema();
    NetworkSpec spec = stock_spec(schema);
    const Parameters params = init_parameters(spec, 17);
    const Tensor x = Tensor::randn({3, 32, 32}, 0.5, 0.2, 18);
    const std::vector<int> labels = {0, 1, 1, 0, 1, 0};
    const double rel = gradient_check(spec, params, x, labels, 1e-5, 200, 19);
    c.require(rel <= 1e-4, "composed " + fmt(rel) + " <= 1e-4");

    // Composed purely-linear configuration: conv -> dense -> head, three
    // parameterized linear maps in composition. Kept at this depth on purpose:
    // stacking a fourth linear layer drives the worst sampled coordinate's
    // gradient toward ~1e-6, below what central differences at h=1e-5 can
    // resolve (round-off floor eps*|loss|/2h), which would measure the probe,
    // not the gradients.
    NetworkSpec linear;
    linear.in_channels = 1;
    linear.in_height = 8;
    linear.in_width = 8;
    linear.trunk = {ConvSpec{2, 3, 1, 1}, FlattenSpec{}, DenseSpec{16}};
    linear.heads = {HeadSpec{"g", 4}};
    const double lin_rel = gradient_check(linear, init_parameters(linear, 20),
                                          Tensor::randn({1, 8, 8}, 0.5, 0.2, 21), {2}, 1e-5, 200, 22);
    c.require(lin_rel <= 1e-7, "linear " + fmt(lin_rel) + " <= 1e-7");
    return c;
}

// --- criterion 2: weight gradient vs central differences -------------------------

Check criterion_weight_gradient() {
    Check c;
    Rng rng(31);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t dim = 5 + static_cast<std::size_t>(rng.uniform_below(46));   // <= 50
        const int attrs = 2 + static_cast<int>(rng.uniform_below(5));                  // <= 6
        const int images = 3 + static_cast<int>(rng.uniform_below(18));                // <= 20
        CgmmModel m;
        m.layer = 0;
        m.lambda = trial % 3 == 0 ? 0.0 : 1e-4;
        for (int j = 0; j < attrs; ++j) {
            m.attribute_names.push_back("g" + std::to_string(j) + ".x");
            AttributeGaussian g;
            g.mu = Tensor::randn({dim}, 0, 1, rng);
            g.var = Tensor::full({dim}, kVarianceFloor);
            g.count = 2;
            m.gaussians.push_back(std::move(g));
            m.weights.push_back(rng.normal(1.0, 0.5));
        }
        std::vector<Tensor> acts;
        std::vector<std::vector<int>> sets;
        for (int i = 0; i < images; ++i) {
            acts.push_back(Tensor::randn({dim}, 0, 1, rng));
            std::vector<int> set;
            for (int j = 0; j < attrs; ++j)
                if (rng.uniform() < 0.5) set.push_back(j);
            if (set.empty())
                set.push_back(static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(attrs))));
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
            worst = std::max(worst, rel);
        }
    }
    c.require(worst <= 1e-6, "20 instances, worst rel " + fmt(worst) + " <= 1e-6");
    return c;
}

// --- criterion 3: closed-form weight learning ------------------------------------

Check criterion_closed_form() {
    Check c;
    Rng rng(41);
    const std::size_t dim = 24;
    const int attrs = 4;
    CgmmModel m;
    m.layer = 0;
    m.lambda = 0.0;
    for (int j = 0; j < attrs; ++j) {
        m.attribute_names.push_back("g" + std::to_string(j) + ".x");
        AttributeGaussian g;
        g.mu = Tensor::randn({dim}, 0, 2, rng);
        g.var = Tensor::full({dim}, kVarianceFloor);
        g.count = 2;
        m.gaussians.push_back(std::move(g));
        m.weights.push_back(1.0);
    }
    std::vector<Tensor> acts;
    std::vector<std::vector<int>> sets;
    const int images = 16;
    for (int i = 0; i < images; ++i) {
        acts.push_back(Tensor::randn({dim}, 0, 1.5, rng));
        sets.push_back({i % attrs});
    }
    // One attribute per image decouples the least squares:
    //   w_j = sum_{i in pos_j} <phi_i, mu_j> / (|pos_j| * ||mu_j||^2)
    std::vector<double> want(attrs, 0.0), count(attrs, 0.0);
    for (int i = 0; i < images; ++i) {
        const int j = i % attrs;
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d)
            dot += acts[static_cast<std::size_t>(i)][d] * m.gaussians[static_cast<std::size_t>(j)].mu[d];
        want[static_cast<std::size_t>(j)] += dot;
        count[static_cast<std::size_t>(j)] += 1.0;
    }
    for (int j = 0; j < attrs; ++j) {
        double norm = 0.0;
        for (std::size_t d = 0; d < dim; ++d)
            norm += m.gaussians[static_cast<std::size_t>(j)].mu[d] *
                    m.gaussians[static_cast<std::size_t>(j)].mu[d];
        want[static_cast<std::size_t>(j)] /= count[static_cast<std::size_t>(j)] * norm;
    }
    const WeightLearnResult res = learn_weights(m, acts, sets, 1e-2, 5000);
    double worst = 0.0;
    for (int j = 0; j < attrs; ++j)
        worst = std::max(worst, std::abs(res.weights[static_cast<std::size_t>(j)] -
                                         want[static_cast<std::size_t>(j)]) /
                                    std::max(std::abs(want[static_cast<std::size_t>(j)]), 1e-12));
    c.require(worst <= 1e-3,
              "worst rel " + fmt(worst) + " <= 1e-3 in " +
                  std::to_string(res.objective_trace.size() - 1) + " accepted steps");
    return c;
}

// --- criterion 4: Gaussian estimator convergence -----------------------------------

Check criterion_estimator() {
    Check c;
    const std::size_t dim = 200;
    std::vector<Tensor> draws;
    Rng rng(51);
    for (int i = 0; i < 10000; ++i) draws.push_back(Tensor::randn({dim}, 3.0, 2.0, rng));
    const AttributeGaussian g = fit_gaussian(draws);
    std::size_t good = 0;
    for (std::size_t d = 0; d < dim; ++d) {
        const bool mean_ok = std::abs(g.mu[d] - 3.0) <= 0.1;
        const bool var_ok = std::abs(g.var[d] - 4.0) / 4.0 <= 0.10;
        good += (mean_ok && var_ok) ? 1 : 0;
    }
    const double frac = static_cast<double>(good) / static_cast<double>(dim);
    c.require(frac >= 0.99, "10k draws of N(3,4): " + std::to_string(good) + "/" +
                                std::to_string(dim) + " units within tolerance (" + fmt(frac) +
                                " >= 0.99)");
    return c;
}

// --- criterion 5: desk-scale training + freezing comparison -------------------------

Check criterion_training() {
    Check c;
    const AttributeSchema schema = default_schema();
    GeneratorConfig train_cfg;
    train_cfg.count = 5000;
    train_cfg.seed = 101;
    GeneratorConfig test_cfg;
    test_cfg.count = 1000;
    test_cfg.seed = 202;
    g_trained.train_ds = generate_synthetic_dataset(schema, train_cfg);
    g_trained.test_ds = generate_synthetic_dataset(schema, test_cfg);
    g_trained.test_ds.split = "test";
    g_trained.spec = stock_spec(schema);
    g_trained.spec.in_height = 32;
    g_trained.spec.in_width = 32;

    // Without weight decay there is a sharp tradeoff: longer training drives
    // accuracy up but sharpens the conv filters into a landscape where
    // feature inversion stalls well short of its floor. L2 decay bounds the
    // weight scale, which keeps the loss surface around the trained filters
    // smooth enough to descend, so the net can train to full accuracy and
    // stay invertible at the same time.
    const int epochs = 8;
    const double lr = 0.03, weight_decay = 1e-3;
    const TrainResult main_run = train_model(g_trained.spec, g_trained.train_ds, epochs, lr,
                                             weight_decay, no_freeze(g_trained.spec), 11);
    g_trained.params = main_run.params;
    g_trained.ready = true;

    const auto acc = group_accuracy(g_trained.spec, g_trained.params, g_trained.test_ds);
    double mean_acc = 0.0;
    for (double a : acc) mean_acc += a;
    mean_acc /= static_cast<double>(acc.size());
    c.require(mean_acc >= 0.90, "mean per-group test accuracy " + fmt(mean_acc, "%.4f") +
                                    " >= 0.90 (5000 train / 1000 test, " + std::to_string(epochs) +
                                    " epochs)");

    // Freezing comparison, mirroring the transfer-learning experiment it
    // comes from: both runs fine-tune the already-trained model on fresh
    // data, one with everything below the first dense layer frozen. With a
    // trained conv stack the two should land at very similar final losses.
    GeneratorConfig cmp_cfg;
    cmp_cfg.count = 2000;
    cmp_cfg.seed = 303;
    const Dataset cmp_ds = generate_synthetic_dataset(schema, cmp_cfg);
    const int cmp_epochs = 5;
    const TrainResult all_free = train_model(g_trained.spec, cmp_ds, cmp_epochs, lr, weight_decay,
                                             no_freeze(g_trained.spec), 12, &g_trained.params);
    const TrainResult frozen =
        train_model(g_trained.spec, cmp_ds, cmp_epochs, lr, weight_decay,
                    freeze_below(g_trained.spec, resolve_layer(g_trained.spec, "fc1")), 12,
                    &g_trained.params);
    const double la = all_free.epoch_losses.back();
    const double lb = frozen.epoch_losses.back();
    c.require(la < all_free.epoch_losses.front() && lb < frozen.epoch_losses.front(),
              "both freeze variants converge (" + fmt(all_free.epoch_losses.front()) + "->" +
                  fmt(la) + ", " + fmt(frozen.epoch_losses.front()) + "->" + fmt(lb) + ")");
    const double gap = std::abs(la - lb) / std::max(la, lb);
    c.require(gap <= 0.20, "final losses within 20% (gap " + fmt(gap * 100, "%.1f") + "%)");
    return c;
}

// --- criterion 6: reconstruction from conv activations ------------------------------

Check criterion_reconstruction() {
    Check c;
    if (!g_trained.ready) {
        c.require(false, "skipped: no trained model from criterion 5");
        return c;
    }
    // A test image with every group labeled, so classify-back has a full key.
    std::size_t pick = g_trained.test_ds.items.size();
    for (std::size_t i = 0; i < g_trained.test_ds.items.size(); ++i) {
        bool full = true;
        for (int l : g_trained.test_ds.items[i].labels) full = full && l != kUnlabeled;
        if (full) {
            pick = i;
            break;
        }
    }
    const LabeledImage& target = g_trained.test_ds.items[pick];

    // Reconstruction wants the data term driven down, so the aesthetic
    // regularizers (blur, jitter) stay off; the mild l2 decay helps the
    // descent settle and costs nothing.
    InversionConfig cfg;
    cfg.iterations = 500;
    cfg.seed = 61;
    cfg.blur_sigma = 0.0;
    cfg.jitter = 0;
    const int layer = resolve_layer(g_trained.spec, "conv_last");
    const GenerationResult res =
        reconstruct_from_image(g_trained.spec, g_trained.params, target.image, layer, cfg);
    g_traces.emplace_back("reconstruction", res.objective_trace);

    const double reduction = 1.0 - res.objective_trace.back() / res.objective_trace.front();
    c.require(reduction >= 0.90,
              "data term reduced " + fmt(reduction * 100, "%.1f") + "% >= 90% in 500 iterations");

    const auto pred = classify_image(g_trained.spec, g_trained.params, g_trained.test_ds.schema,
                                     res.image);
    int match = 0;
    for (std::size_t g = 0; g < pred.size(); ++g) match += pred[g] == target.labels[g] ? 1 : 0;
    c.require(match >= 4, "classify-back matches target labels on " + std::to_string(match) +
                              "/6 groups (>= 4)");
    return c;
}

// --- criterion 7: end-to-end generation ----------------------------------------------

Check criterion_generation() {
    Check c;
    if (!g_trained.ready) {
        c.require(false, "skipped: no trained model from criterion 5");
        return c;
    }
    const Dataset& ds = g_trained.train_ds;
    const AttributeSchema& schema = ds.schema;
    // The dense layer closest to the heads: targets there give the heads the
    // most direct pull, which measured far stronger than the wider first
    // dense layer on every group.
    const int fc2 = resolve_layer(g_trained.spec, "fc2");

    // Per-attribute activation Gaussians.
    const auto sets = select_positive_sets(ds, 200, 71);
    CgmmModel model;
    model.layer = fc2;
    model.lambda = 1e-5;
    for (int a = 0; a < schema.attribute_count(); ++a) {
        model.attribute_names.push_back(schema.attribute_name(a));
        const auto& idx = sets[static_cast<std::size_t>(a)].indices;
        AttributeGaussian g;
        if (idx.size() >= 2)
            g = fit_gaussian(collect_activations(g_trained.spec, g_trained.params, ds, idx, fc2));
        model.gaussians.push_back(std::move(g));
        model.weights.push_back(1.0);
    }

    // Learn the attribute weights on a labeled subset.
    std::vector<std::size_t> indices;
    std::vector<std::vector<int>> attribute_sets;
    for (std::size_t i = 0; i < ds.items.size() && indices.size() < 1500; ++i) {
        std::vector<int> set;
        int base = 0;
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            const int l = ds.items[i].labels[g];
            if (l != kUnlabeled && model.usable(base + l)) set.push_back(base + l);
            base += static_cast<int>(schema.groups[g].labels.size());
        }
        if (!set.empty()) {
            indices.push_back(i);
            attribute_sets.push_back(std::move(set));
        }
    }
    const auto acts = collect_activations(g_trained.spec, g_trained.params, ds, indices, fc2);
    const WeightLearnResult learned = learn_weights(model, acts, attribute_sets, 1e-3, 5000);
    model.weights = learned.weights;

    // Majority-class prior per group, from the labeled training rows.
    std::vector<double> prior(schema.groups.size(), 0.0);
    for (std::size_t g = 0; g < schema.groups.size(); ++g) {
        std::map<int, int> counts;
        int total = 0;
        for (const auto& item : ds.items)
            if (item.labels[g] != kUnlabeled) {
                ++counts[item.labels[g]];
                ++total;
            }
        int best = 0;
        for (const auto& [label, n] : counts) best = std::max(best, n);
        prior[g] = static_cast<double>(best) / total;
    }

    // Descent-only inversion, as in the reconstruction criterion.
    InversionConfig cfg;
    cfg.layer = fc2;
    cfg.iterations = 300;
    cfg.blur_sigma = 0.0;
    cfg.jitter = 0;
    Rng rng(72);
    int correct = 0, total_targets = 0;
    std::vector<int> group_correct(schema.groups.size(), 0);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> attrs;
        std::vector<int> want(schema.groups.size());
        int base = 0;
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            const int l = static_cast<int>(rng.uniform_below(schema.groups[g].labels.size()));
            want[g] = l;
            attrs.push_back(base + l);
            base += static_cast<int>(schema.groups[g].labels.size());
        }
        cfg.seed = 1000 + static_cast<std::uint64_t>(trial);
        const GenerationResult res = generate_from_attributes(g_trained.spec, g_trained.params,
                                                              model, attrs, TargetMode::mean, cfg);
        g_traces.emplace_back("generation " + std::to_string(trial), res.objective_trace);
        const auto pred =
            classify_image(g_trained.spec, g_trained.params, schema, res.image);
        for (std::size_t g = 0; g < pred.size(); ++g) {
            ++total_targets;
            if (pred[g] == want[g]) {
                ++correct;
                ++group_correct[g];
            }
        }
    }
    const double frac = static_cast<double>(correct) / total_targets;
    c.require(frac >= 0.60, "targeted groups correct " + std::to_string(correct) + "/" +
                                std::to_string(total_targets) + " (" + fmt(frac * 100, "%.0f") +
                                "% >= 60%)");
    std::string beat = "per-group accuracy vs majority prior:";
    bool all_beat = true;
    for (std::size_t g = 0; g < schema.groups.size(); ++g) {
        const double acc = group_correct[g] / 10.0;
        all_beat = all_beat && acc > prior[g];
        beat += " " + schema.groups[g].name + " " + fmt(acc, "%.1f") + ">" + fmt(prior[g], "%.2f");
    }
    c.require(all_beat, beat);
    return c;
}

// --- criterion 8: CLI determinism ------------------------------------------------------

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FACEGEN_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (status < 0) return -1;
    return WEXITSTATUS(status);
}

Check criterion_cli_determinism() {
    Check c;
    const fs::path dir = fs::temp_directory_path() / "facegen_acceptance_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto p = [&](const std::string& n) { return (dir / n).string(); };
    const auto same = [&](const std::string& a, const std::string& b) {
        return read_file(dir / a) == read_file(dir / b);
    };

    bool ok = true;
    ok = ok && run_cli("synth-data --out " + p("d1") + " --count 40 --seed 3") == 0;
    ok = ok && run_cli("synth-data --out " + p("d2") + " --count 40 --seed 3") == 0;
    c.require(ok && same("d1/labels.csv", "d2/labels.csv") &&
                  same("d1/img_00007.ppm", "d2/img_00007.ppm"),
              "synth-data");

    ok = run_cli("train --dataset " + p("d1") + " --out " + p("n1.ckpt") +
                 " --epochs 1 --lr 0.02 --seed 4") == 0 &&
         run_cli("train --dataset " + p("d1") + " --out " + p("n2.ckpt") +
                 " --epochs 1 --lr 0.02 --seed 4") == 0;
    c.require(ok && same("n1.ckpt", "n2.ckpt") && same("n1.ckpt.loss.csv", "n2.ckpt.loss.csv") &&
                  same("n1.ckpt.metrics.txt", "n2.ckpt.metrics.txt"),
              "train");

    ok = run_cli("fit-cgmm --dataset " + p("d1") + " --checkpoint " + p("n1.ckpt") + " --out " +
                 p("s1.cgs") + " --per-attribute 10 --seed 5") == 0 &&
         run_cli("fit-cgmm --dataset " + p("d1") + " --checkpoint " + p("n1.ckpt") + " --out " +
                 p("s2.cgs") + " --per-attribute 10 --seed 5") == 0;
    c.require(ok && same("s1.cgs", "s2.cgs"), "fit-cgmm");

    ok = run_cli("learn-weights --dataset " + p("d1") + " --checkpoint " + p("n1.ckpt") +
                 " --stats " + p("s1.cgs") + " --out " + p("w1.cgs") + " --iters 50") == 0 &&
         run_cli("learn-weights --dataset " + p("d1") + " --checkpoint " + p("n1.ckpt") +
                 " --stats " + p("s1.cgs") + " --out " + p("w2.cgs") + " --iters 50") == 0;
    c.require(ok && same("w1.cgs", "w2.cgs"), "learn-weights");

    const std::string gen = " --checkpoint " + p("n1.ckpt") + " --stats " + p("w1.cgs") +
                            " --attributes blond,glasses --iterations 15 --seed 6";
    ok = run_cli("generate --out " + p("g1.ppm") + gen) == 0 &&
         run_cli("generate --out " + p("g2.ppm") + gen) == 0;
    c.require(ok && same("g1.ppm", "g2.ppm") && same("g1.ppm.trace.csv", "g2.ppm.trace.csv") &&
                  same("g1.ppm.report.txt", "g2.ppm.report.txt"),
              "generate");

    const std::string vis = " --checkpoint " + p("n1.ckpt") + " --dataset " + p("d1") +
                            " --attributes accessory.hat --iterations 10 --seed 7";
    ok = run_cli("classvis --out " + p("v1.ppm") + vis) == 0 &&
         run_cli("classvis --out " + p("v2.ppm") + vis) == 0;
    c.require(ok && same("v1.ppm", "v2.ppm") && same("v1.ppm.trace.csv", "v2.ppm.trace.csv"),
              "classvis");

    const std::string inv = " --checkpoint " + p("n1.ckpt") + " --image " + p("d1") +
                            "/img_00000.ppm --iterations 15 --seed 8";
    ok = run_cli("invert --out " + p("r1.ppm") + inv) == 0 &&
         run_cli("invert --out " + p("r2.ppm") + inv) == 0;
    c.require(ok && same("r1.ppm", "r2.ppm") && same("r1.ppm.trace.csv", "r2.ppm.trace.csv"),
              "invert");

    ok = run_cli("grad-check --samples 20 --seed 9 --out " + p("gc1.txt")) == 0 &&
         run_cli("grad-check --samples 20 --seed 9 --out " + p("gc2.txt")) == 0;
    c.require(ok && same("gc1.txt", "gc2.txt"), "grad-check");

    ok = run_cli("mean-image --dataset " + p("d1") + " --out " + p("m1.ppm") + " --out-tensor " +
                 p("m1.cgt")) == 0 &&
         run_cli("mean-image --dataset " + p("d1") + " --out " + p("m2.ppm") + " --out-tensor " +
                 p("m2.cgt")) == 0;
    c.require(ok && same("m1.ppm", "m2.ppm") && same("m1.cgt", "m2.cgt"), "mean-image");

    fs::remove_all(dir);
    return c;
}

// --- criterion 9: monotone inversion traces ----------------------------------------------

Check criterion_monotonicity() {
    Check c;
    c.require(!g_traces.empty(), std::to_string(g_traces.size()) + " traces collected");
    for (const auto& [name, trace] : g_traces) {
        bool mono = true;
        for (std::size_t i = 1; i < trace.size(); ++i) mono = mono && trace[i] <= trace[i - 1];
        c.require(mono, name + " non-increasing");
    }
    return c;
}

}  // namespace

int main() {
    using Clock = std::chrono::steady_clock;
    struct Entry {
        int id;
        const char* name;
        std::function<Check()> run;
    };
    const std::vector<Entry> entries = {
        {1, "gradient correctness", criterion_gradients},
        {2, "weight-gradient vs finite differences", criterion_weight_gradient},
        {3, "closed-form weight learning", criterion_closed_form},
        {4, "Gaussian estimator convergence", criterion_estimator},
        {5, "desk-scale training + freezing", criterion_training},
        {6, "reconstruction from conv activations", criterion_reconstruction},
        {7, "attribute-conditioned generation", criterion_generation},
        {8, "CLI determinism", criterion_cli_determinism},
        {9, "monotone inversion traces", criterion_monotonicity},
    };

    int failures = 0;
    for (const auto& e : entries) {
        const auto start = Clock::now();
        Check c;
        try {
            c = e.run();
        } catch (const std::exception& ex) {
            c.ok = false;
            c.detail += std::string(c.detail.empty() ? "" : "; ") + "exception: " + ex.what();
        }
        const double secs =
            std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count() /
            1000.0;
        failures += c.ok ? 0 : 1;
        std::cout << (c.ok ? "[PASS]" : "[FAIL]") << " criterion " << e.id << ": " << e.name
                  << " — " << c.detail << " (" << fmt(secs, "%.1f") << "s)\n";
        std::cout.flush();
    }
    if (failures == 0)
        std::cout << "all 9 criteria passed\n";
    else
        std::cout << failures << " criteria FAILED\n";
    return failures == 0 ? 0 : 1;
}
