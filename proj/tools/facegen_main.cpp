// facegen: one binary, subcommands for every stage of the pipeline —
// synthetic data, training, activation statistics, weight learning, and
// image synthesis. Every command is deterministic under a fixed seed and
// writes artifacts atomically (temp file + rename).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "facegen/base.hpp"
#include "facegen/cgmm.hpp"
#include "facegen/data.hpp"
#include "facegen/generate.hpp"
#include "facegen/nn.hpp"
#include "facegen/rng.hpp"
#include "facegen/tensor.hpp"

namespace fg = facegen;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// --- config files ------------------------------------------------------------

// Every subcommand takes --config FILE with flat key=value lines (# comments).
// The file is expanded into synthetic command-line arguments before parsing,
// with two rules: an option given explicitly on the command line wins over
// the file, and unknown keys fail the parse like any unknown flag would.
std::string trim(std::string s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
    return s;
}

std::vector<std::string> expand_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::string config_path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            config_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            config_path = args[i].substr(9);
    }
    if (config_path.empty()) return args;

    std::vector<std::string> given;
    for (const auto& a : args)
        if (a.rfind("--", 0) == 0) given.push_back(a.substr(0, a.find('=')));

    const std::string text = fg::read_file(config_path);  // io_error when unreadable
    std::istringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config " + config_path + ":" +
                                        std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                                  (value.front() == '\'' && value.back() == '\'')))
            value = value.substr(1, value.size() - 2);
        if (key.empty())
            throw std::invalid_argument("config " + config_path + ":" +
                                        std::to_string(lineno) + ": empty key");
        const std::string flag = "--" + key;
        if (std::find(given.begin(), given.end(), flag) != given.end()) continue;
        // Bare booleans toggle flags (only --logit-targets today).
        if (value == "true" || value == "false") {
            if (value == "true") args.push_back(flag);
        } else {
            args.push_back(flag);
            args.push_back(value);
        }
    }
    return args;
}

// --- shared construction -----------------------------------------------------

// The stock trunk: two conv/pool stages into two dense layers. Dropout
// placement: "dense" (after each dense ReLU), "all" (after every layer), or
// "none".
fg::NetworkSpec stock_network(const fg::AttributeSchema& schema, int height, int width,
                              const std::string& dropout_mode, double dropout_p) {
    if (dropout_mode != "dense" && dropout_mode != "all" && dropout_mode != "none")
        throw std::invalid_argument("dropout mode must be one of: dense, all, none");
    fg::NetworkSpec spec;
    spec.in_channels = 3;
    spec.in_height = height;
    spec.in_width = width;
    auto push = [&](fg::LayerSpec layer, bool dense_site) {
        spec.trunk.push_back(std::move(layer));
        if (dropout_mode == "all" || (dropout_mode == "dense" && dense_site))
            spec.trunk.push_back(fg::DropoutSpec{dropout_p});
    };
    push(fg::ConvSpec{16, 3, 1, 1}, false);
    push(fg::ReluSpec{}, false);
    push(fg::MaxPoolSpec{2, 2}, false);
    push(fg::ConvSpec{32, 3, 1, 1}, false);
    push(fg::ReluSpec{}, false);
    push(fg::MaxPoolSpec{2, 2}, false);
    push(fg::FlattenSpec{}, false);
    push(fg::DenseSpec{128}, false);
    push(fg::ReluSpec{}, true);
    push(fg::DenseSpec{64}, false);
    push(fg::ReluSpec{}, true);
    for (const auto& g : schema.groups)
        spec.heads.push_back(fg::HeadSpec{g.name, static_cast<int>(g.labels.size()) + 1});
    return spec;
}

void check_heads_match_schema(const fg::NetworkSpec& spec, const fg::AttributeSchema& schema) {
    if (spec.heads.size() != schema.groups.size())
        throw std::invalid_argument("checkpoint heads do not match schema group count");
    for (std::size_t i = 0; i < spec.heads.size(); ++i) {
        if (spec.heads[i].group != schema.groups[i].name)
            throw std::invalid_argument("checkpoint head '" + spec.heads[i].group +
                                        "' does not match schema group '" + schema.groups[i].name + "'");
        if (spec.heads[i].class_count != static_cast<int>(schema.groups[i].labels.size()) + 1)
            throw std::invalid_argument("checkpoint head '" + spec.heads[i].group +
                                        "' class count does not match schema labels");
    }
}

// Resolves comma-separated attribute names against qualified "group.label"
// ids; bare labels match by suffix and must be unambiguous.
std::vector<int> parse_attributes(const std::string& list, const std::vector<std::string>& names) {
    std::vector<int> out;
    std::string token;
    std::istringstream ss(list);
    while (std::getline(ss, token, ',')) {
        while (!token.empty() && token.front() == ' ') token.erase(token.begin());
        while (!token.empty() && token.back() == ' ') token.pop_back();
        if (token.empty()) continue;
        std::vector<int> matches;
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == token ||
                (token.find('.') == std::string::npos && names[i].size() > token.size() &&
                 names[i].compare(names[i].size() - token.size(), token.size(), token) == 0 &&
                 names[i][names[i].size() - token.size() - 1] == '.'))
                matches.push_back(static_cast<int>(i));
        }
        if (matches.size() == 1) {
            out.push_back(matches[0]);
            continue;
        }
        std::string msg = matches.empty() ? "unknown attribute '" + token + "'; choices:"
                                          : "ambiguous attribute '" + token + "'; matches:";
        const auto& pool = matches.empty()
                               ? [&] {
                                     std::vector<int> all(names.size());
                                     for (std::size_t i = 0; i < names.size(); ++i)
                                         all[i] = static_cast<int>(i);
                                     return all;
                                 }()
                               : matches;
        for (int i : pool) msg += " " + names[static_cast<std::size_t>(i)];
        throw std::invalid_argument(msg);
    }
    if (out.empty()) throw std::invalid_argument("empty attribute list");
    return out;
}

std::vector<std::string> qualified_names(const fg::AttributeSchema& schema) {
    std::vector<std::string> names;
    for (int a = 0; a < schema.attribute_count(); ++a) names.push_back(schema.attribute_name(a));
    return names;
}

void write_trace_csv(const fs::path& path, const fg::GenerationResult& res, const char* value_name) {
    std::string csv = std::string("iteration,") + value_name + ",step_size\n";
    for (std::size_t i = 0; i < res.objective_trace.size(); ++i)
        csv += std::to_string(i) + "," + fmt(res.objective_trace[i]) + "," + fmt(res.step_trace[i]) + "\n";
    fg::atomic_write_file(path, csv);
}

std::string inversion_config_echo(const fg::InversionConfig& cfg) {
    std::string s;
    s += "layer: " + std::to_string(cfg.layer) + "\n";
    s += "iterations: " + std::to_string(cfg.iterations) + "\n";
    s += "step: " + fmt(cfg.step) + "\n";
    s += std::string("init: ") + (cfg.init == fg::InitMode::noise ? "noise" : "image") + "\n";
    s += "noise_stddev: " + fmt(cfg.noise_stddev) + "\n";
    s += "blur_sigma: " + fmt(cfg.blur_sigma) + "\n";
    s += "blur_period: " + std::to_string(cfg.blur_period) + "\n";
    s += "jitter: " + std::to_string(cfg.jitter) + "\n";
    s += "l2_decay: " + fmt(cfg.l2_decay) + "\n";
    s += "seed: " + std::to_string(cfg.seed) + "\n";
    return s;
}

std::string head_probs_echo(const fg::NetworkSpec& spec, const fg::AttributeSchema* schema,
                            const std::vector<fg::Tensor>& probs) {
    std::string s;
    for (std::size_t h = 0; h < probs.size(); ++h) {
        s += spec.heads[h].group + ":";
        for (std::size_t c = 0; c < probs[h].size(); ++c) {
            std::string label = schema && c < schema->groups[h].labels.size()
                                    ? schema->groups[h].labels[c]
                                    : (c + 1 == probs[h].size() ? std::string("unlabeled")
                                                                : "class" + std::to_string(c));
            s += " " + label + "=" + fmt(probs[h][c]);
        }
        s += "\n";
    }
    return s;
}

// --- synth-data ------------------------------------------------------------------

struct SynthOpts {
    std::string out;
    int count = 0;
    int size = 32;
    std::uint64_t seed = 0;
    double unlabeled_fraction = 0.10;
    double skew = 0.0;
};

void run_synth_data(const SynthOpts& o) {
    fg::GeneratorConfig cfg;
    cfg.width = o.size;
    cfg.height = o.size;
    cfg.count = o.count;
    cfg.seed = o.seed;
    cfg.unlabeled_fraction = o.unlabeled_fraction;
    cfg.ratio_skew = o.skew;
    const fg::AttributeSchema schema = fg::default_schema();
    const fg::Dataset ds = fg::generate_synthetic_dataset(schema, cfg);
    fg::save_dataset(o.out, ds);

    std::cout << "wrote " << ds.items.size() << " images to " << o.out << "\n";
    for (std::size_t g = 0; g < schema.groups.size(); ++g) {
        std::vector<int> counts(schema.groups[g].labels.size(), 0);
        int unlabeled = 0;
        for (const auto& item : ds.items) {
            if (item.labels[g] == fg::kUnlabeled)
                ++unlabeled;
            else
                ++counts[static_cast<std::size_t>(item.labels[g])];
        }
        std::cout << schema.groups[g].name << ":";
        for (std::size_t l = 0; l < counts.size(); ++l)
            std::cout << " " << schema.groups[g].labels[l] << "=" << counts[l];
        std::cout << " unlabeled=" << unlabeled << "\n";
    }
}

// --- train -----------------------------------------------------------------------

struct TrainOpts {
    std::string dataset;
    std::string test_dataset;
    std::string out;
    std::string loss_csv;
    std::string metrics;
    int epochs = 10;
    double lr = 0.01;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::string freeze_below = "none";
    std::string dropout = "dense";
    double dropout_p = 0.5;
};

std::vector<double> group_accuracy(const fg::NetworkSpec& spec, const fg::Parameters& params,
                                   const fg::Dataset& ds) {
    std::vector<double> correct(spec.heads.size(), 0.0), total(spec.heads.size(), 0.0);
    for (const auto& item : ds.items) {
        const auto pred = fg::classify_image(spec, params, ds.schema, item.image);
        for (std::size_t g = 0; g < pred.size(); ++g) {
            if (item.labels[g] == fg::kUnlabeled) continue;
            total[g] += 1.0;
            if (pred[g] == item.labels[g]) correct[g] += 1.0;
        }
    }
    std::vector<double> acc(spec.heads.size(), 0.0);
    for (std::size_t g = 0; g < acc.size(); ++g) acc[g] = total[g] > 0 ? correct[g] / total[g] : 0.0;
    return acc;
}

void run_train(const TrainOpts& o) {
    const fg::Dataset ds = fg::load_dataset(o.dataset);
    fg::Dataset test;
    if (!o.test_dataset.empty()) test = fg::load_dataset(o.test_dataset);
    if (o.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");

    const auto& shape = ds.items[0].image.shape();
    const fg::NetworkSpec spec = stock_network(ds.schema, static_cast<int>(shape[1]),
                                               static_cast<int>(shape[2]), o.dropout, o.dropout_p);
    fg::Parameters params = fg::init_parameters(spec, fg::split_seed(o.seed, 0));
    const fg::FreezeMask freeze = (o.freeze_below.empty() || o.freeze_below == "none")
                                      ? fg::no_freeze(spec)
                                      : fg::freeze_below(spec, fg::resolve_layer(spec, o.freeze_below));

    const std::uint64_t step_stream = fg::split_seed(o.seed, 1);
    const std::uint64_t shuffle_stream = fg::split_seed(o.seed, 2);
    std::vector<std::size_t> order(ds.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> epoch_losses;
    std::uint64_t global_step = 0;
    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        fg::Rng shuffle_rng(fg::split_seed(shuffle_stream, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int loss_count = 0;
        for (std::size_t idx : order) {
            const auto& item = ds.items[idx];
            const fg::ForwardTrace trace = fg::forward(spec, params, item.image, fg::RunMode::train,
                                                       fg::split_seed(step_stream, global_step));
            ++global_step;
            const fg::MultiheadLoss loss = fg::multihead_loss(trace, item.labels);
            bool any_labeled = false;
            for (int l : item.labels) any_labeled = any_labeled || l != fg::kUnlabeled;
            if (!any_labeled) continue;  // nothing to learn from this image
            if (!std::isfinite(loss.total))
                throw fg::numeric_error("train: loss diverged (non-finite) at epoch " +
                                        std::to_string(epoch));
            loss_sum += loss.total;
            ++loss_count;
            const fg::Gradients grads =
                fg::backward(spec, params, trace, fg::multihead_loss_grads(trace, item.labels));
            params = fg::sgd_step(std::move(params), grads, o.lr, o.weight_decay, freeze);
        }
        const double mean_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
        epoch_losses.push_back(mean_loss);
        if (!epoch_losses.empty() && mean_loss > 20.0 * epoch_losses.front() + 1.0)
            throw fg::numeric_error("train: loss diverged (epoch mean " + fmt(mean_loss) +
                                    " vs initial " + fmt(epoch_losses.front()) + "); reduce lr");
        std::cout << "epoch " << epoch << " mean loss " << fmt(mean_loss) << "\n";
    }

    fg::save_checkpoint(o.out, spec, params);

    std::string csv = "epoch,mean_loss\n";
    for (std::size_t e = 0; e < epoch_losses.size(); ++e)
        csv += std::to_string(e) + "," + fmt(epoch_losses[e]) + "\n";
    const fs::path loss_path = o.loss_csv.empty() ? fs::path(o.out + ".loss.csv") : fs::path(o.loss_csv);
    fg::atomic_write_file(loss_path, csv);

    std::string metrics = "command: train\ndataset: " + o.dataset + "\nepochs: " +
                          std::to_string(o.epochs) + "\nlr: " + fmt(o.lr) + "\nweight_decay: " +
                          fmt(o.weight_decay) + "\nseed: " + std::to_string(o.seed) +
                          "\nfreeze_below: " + o.freeze_below + "\ndropout: " + o.dropout +
                          "\nfinal_loss: " + fmt(epoch_losses.back()) + "\n";
    const auto emit_acc = [&](const char* tag, const fg::Dataset& set) {
        const auto acc = group_accuracy(spec, params, set);
        double mean = 0.0;
        for (std::size_t g = 0; g < acc.size(); ++g) {
            metrics += std::string(tag) + "_accuracy " + spec.heads[g].group + ": " + fmt(acc[g]) + "\n";
            mean += acc[g];
        }
        mean /= static_cast<double>(acc.size());
        metrics += std::string(tag) + "_accuracy_mean: " + fmt(mean) + "\n";
        std::cout << tag << " mean per-group accuracy " << fmt(mean) << "\n";
    };
    emit_acc("train", ds);
    if (!o.test_dataset.empty()) emit_acc("test", test);
    const fs::path metrics_path = o.metrics.empty() ? fs::path(o.out + ".metrics.txt") : fs::path(o.metrics);
    fg::atomic_write_file(metrics_path, metrics);
}

// --- fit-cgmm -----------------------------------------------------------------------

struct FitOpts {
    std::string dataset;
    std::string checkpoint;
    std::string out;
    std::string layer = "fc1";
    int per_attribute = 200;
    std::uint64_t seed = 0;
    double lambda = 1e-5;
};

void run_fit_cgmm(const FitOpts& o) {
    const fg::Dataset ds = fg::load_dataset(o.dataset);
    auto [spec, params] = fg::load_checkpoint(o.checkpoint);
    check_heads_match_schema(spec, ds.schema);
    const int layer = fg::resolve_layer(spec, o.layer);

    const auto sets = fg::select_positive_sets(ds, o.per_attribute, o.seed);
    const auto shapes = fg::trunk_output_shapes(spec);
    std::size_t dim = 1;
    for (auto e : shapes[static_cast<std::size_t>(layer)]) dim *= e;

    fg::CgmmModel model;
    model.layer = layer;
    model.lambda = o.lambda;
    model.attribute_names = qualified_names(ds.schema);
    for (std::size_t a = 0; a < sets.size(); ++a) {
        fg::AttributeGaussian g;
        if (sets[a].indices.size() >= 2) {
            g = fg::fit_gaussian(fg::collect_activations(spec, params, ds, sets[a].indices, layer));
        } else {  // unusable: no distribution, kept as an explicit zero-count marker
            g.count = 0;
            g.mu = fg::Tensor::zeros({dim});
            g.var = fg::Tensor::full({dim}, fg::kVarianceFloor);
        }
        std::cout << model.attribute_names[a] << ": " << sets[a].indices.size() << " positives"
                  << (sets[a].shortfall ? " (shortfall)" : "") << (g.count < 2 ? " UNUSABLE" : "")
                  << "\n";
        model.gaussians.push_back(std::move(g));
        model.weights.push_back(1.0);
    }
    fg::save_stats(o.out, model);
    std::cout << "wrote stats for layer " << layer << " (dim " << dim << ") to " << o.out << "\n";
}

// --- learn-weights ---------------------------------------------------------------------

struct LearnOpts {
    std::string dataset;
    std::string checkpoint;
    std::string stats;
    std::string out;
    double lr = 1e-3;
    int iters = 500;
    double lambda = 1e-5;
};

void run_learn_weights(const LearnOpts& o) {
    const fg::Dataset ds = fg::load_dataset(o.dataset);
    auto [spec, params] = fg::load_checkpoint(o.checkpoint);
    check_heads_match_schema(spec, ds.schema);
    fg::CgmmModel model = fg::load_stats(o.stats);
    if (model.attribute_names != qualified_names(ds.schema))
        throw std::invalid_argument("stats attributes do not match dataset schema");
    model.lambda = o.lambda;

    // D = images with at least one usable labeled attribute; C_i = their
    // labeled attributes (unusable ones dropped).
    std::vector<std::size_t> indices;
    std::vector<std::vector<int>> attribute_sets;
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        std::vector<int> set;
        int base = 0;
        for (std::size_t g = 0; g < ds.schema.groups.size(); ++g) {
            const int l = ds.items[i].labels[g];
            if (l != fg::kUnlabeled && model.usable(base + l)) set.push_back(base + l);
            base += static_cast<int>(ds.schema.groups[g].labels.size());
        }
        if (!set.empty()) {
            indices.push_back(i);
            attribute_sets.push_back(std::move(set));
        }
    }
    if (indices.empty()) throw std::invalid_argument("learn-weights: no labeled images in dataset");
    const auto activations = fg::collect_activations(spec, params, ds, indices, model.layer);

    // Analytic-vs-numeric gradient check on every weight coordinate.
    const auto grad = fg::weight_gradient(model, activations, attribute_sets);
    double max_rel = 0.0;
    const double h = 1e-5;
    fg::CgmmModel probe = model;
    for (std::size_t j = 0; j < probe.weights.size(); ++j) {
        const double orig = probe.weights[j];
        probe.weights[j] = orig + h;
        const double lp = fg::weight_objective(probe, activations, attribute_sets);
        probe.weights[j] = orig - h;
        const double lm = fg::weight_objective(probe, activations, attribute_sets);
        probe.weights[j] = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel = std::abs(grad[j] - numeric) /
                           std::max({std::abs(grad[j]), std::abs(numeric), 1e-12});
        max_rel = std::max(max_rel, rel);
    }
    std::cout << "weight gradient check: max relative error " << fmt(max_rel) << "\n";
    if (max_rel > 1e-4)
        throw fg::numeric_error("learn-weights: gradient check failed (rel " + fmt(max_rel) + ")");

    const fg::WeightLearnResult result =
        fg::learn_weights(model, activations, attribute_sets, o.lr, o.iters);
    model.weights = result.weights;
    fg::save_stats(o.out.empty() ? o.stats : o.out, model);
    std::cout << "objective: initial " << fmt(result.objective_trace.front()) << " final "
              << fmt(result.objective_trace.back()) << " over "
              << result.objective_trace.size() - 1 << " accepted steps (|D| = " << indices.size()
              << ")\n";
}

// --- generation commands ---------------------------------------------------------------

struct GenOpts {
    std::string checkpoint;
    std::string stats;
    std::string dataset;  // classvis (mean image), invert (unused)
    std::string image;    // invert target
    std::string attributes;
    std::string mode = "mean";
    std::string layer;  // invert only; default conv_last
    std::string init_image;
    std::string out;
    fg::InversionConfig cfg;
    bool logit_targets = false;
};

void attach_common_gen_flags(CLI::App* cmd, GenOpts& o, int default_iters) {
    o.cfg.iterations = default_iters;
    cmd->add_option("--iterations", o.cfg.iterations, "optimization iterations")->capture_default_str();
    cmd->add_option("--step", o.cfg.step, "step-size ceiling")->capture_default_str();
    cmd->add_option("--noise-stddev", o.cfg.noise_stddev, "init noise standard deviation")
        ->capture_default_str();
    cmd->add_option("--blur-sigma", o.cfg.blur_sigma, "Gaussian blur sigma (0 = off)")
        ->capture_default_str();
    cmd->add_option("--blur-period", o.cfg.blur_period, "iterations between blurs")
        ->capture_default_str();
    cmd->add_option("--jitter", o.cfg.jitter, "max circular shift, pixels")->capture_default_str();
    cmd->add_option("--l2-decay", o.cfg.l2_decay, "per-step image decay")->capture_default_str();
    cmd->add_option("--seed", o.cfg.seed, "random seed")->capture_default_str();
}

void run_generate(const GenOpts& o) {
    auto [spec, params] = fg::load_checkpoint(o.checkpoint);
    const fg::CgmmModel model = fg::load_stats(o.stats);
    const fg::AttributeSchema schema = fg::schema_from_attribute_names(model.attribute_names);
    check_heads_match_schema(spec, schema);
    const auto attrs = parse_attributes(o.attributes, model.attribute_names);
    const fg::TargetMode mode = o.mode == "sample" ? fg::TargetMode::sample : fg::TargetMode::mean;
    if (o.mode != "sample" && o.mode != "mean")
        throw std::invalid_argument("mode must be 'mean' or 'sample'");

    fg::InversionConfig cfg = o.cfg;
    cfg.layer = model.layer;
    const fg::GenerationResult res =
        fg::generate_from_attributes(spec, params, model, attrs, mode, cfg);

    fg::save_ppm(o.out, res.image);
    write_trace_csv(o.out + ".trace.csv", res, "data_term");
    std::string report = "command: generate\nmode: " + o.mode + "\nattributes:";
    for (int a : attrs) report += " " + model.attribute_names[static_cast<std::size_t>(a)];
    report += "\n" + inversion_config_echo(cfg);
    report += "data_term_initial: " + fmt(res.objective_trace.front()) + "\n";
    report += "data_term_final: " + fmt(res.objective_trace.back()) + "\n";
    report += head_probs_echo(spec, &schema, res.head_probs);
    fg::atomic_write_file(o.out + ".report.txt", report);
    std::cout << report;
}

void run_classvis(const GenOpts& o) {
    auto [spec, params] = fg::load_checkpoint(o.checkpoint);
    const fg::Dataset ds = fg::load_dataset(o.dataset);
    check_heads_match_schema(spec, ds.schema);
    const fg::Tensor mean = fg::compute_mean_image(ds);
    const auto names = qualified_names(ds.schema);
    std::vector<std::pair<int, int>> targets;
    for (int a : parse_attributes(o.attributes, names))
        targets.push_back(ds.schema.attribute_parts(a));

    const fg::GenerationResult res =
        fg::class_visualize(spec, params, mean, targets, o.cfg, o.logit_targets);

    fg::save_ppm(o.out, res.image);
    write_trace_csv(o.out + ".trace.csv", res, "targeted_score");
    std::string report = "command: classvis\nattributes:";
    for (const auto& [g, c] : targets)
        report += " " + ds.schema.groups[static_cast<std::size_t>(g)].name + "." +
                  ds.schema.groups[static_cast<std::size_t>(g)].labels[static_cast<std::size_t>(c)];
    report += "\nlogit_targets: " + std::string(o.logit_targets ? "true" : "false") + "\n";
    report += inversion_config_echo(o.cfg);
    report += "score_initial: " + fmt(res.objective_trace.front()) + "\n";
    report += "score_final: " + fmt(res.objective_trace.back()) + "\n";
    report += head_probs_echo(spec, &ds.schema,
                              fg::forward(spec, params, res.image, fg::RunMode::eval).head_probs);
    fg::atomic_write_file(o.out + ".report.txt", report);
    std::cout << report;
}

void run_invert(const GenOpts& o) {
    auto [spec, params] = fg::load_checkpoint(o.checkpoint);
    const fg::Tensor target = fg::load_ppm(o.image);
    const int layer = fg::resolve_layer(spec, o.layer.empty() ? "conv_last" : o.layer);
    fg::InversionConfig cfg = o.cfg;
    cfg.layer = layer;
    fg::Tensor init;
    const fg::Tensor* init_ptr = nullptr;
    if (!o.init_image.empty()) {
        init = fg::load_ppm(o.init_image);
        cfg.init = fg::InitMode::image;
        init_ptr = &init;
    }
    const fg::GenerationResult res = fg::reconstruct_from_image(spec, params, target, layer, cfg, init_ptr);

    fg::save_ppm(o.out, res.image);
    write_trace_csv(o.out + ".trace.csv", res, "data_term");
    const double reduction = res.objective_trace.front() > 0.0
                                 ? 1.0 - res.objective_trace.back() / res.objective_trace.front()
                                 : 0.0;
    std::string report = "command: invert\ntarget: " + o.image + "\n" + inversion_config_echo(cfg);
    report += "data_term_initial: " + fmt(res.objective_trace.front()) + "\n";
    report += "data_term_final: " + fmt(res.objective_trace.back()) + "\n";
    report += "data_term_reduction: " + fmt(reduction) + "\n";
    report += "reconstruction heads:\n" + head_probs_echo(spec, nullptr, res.head_probs);
    report += "target heads:\n" +
              head_probs_echo(spec, nullptr, fg::forward(spec, params, target, fg::RunMode::eval).head_probs);
    fg::atomic_write_file(o.out + ".report.txt", report);
    std::cout << report;
}

// --- grad-check --------------------------------------------------------------------------

struct GradOpts {
    std::string checkpoint;
    std::string out;
    double h = 1e-5;
    int samples = 200;
    std::uint64_t seed = 0;
    double tol = 1e-4;
    std::string mode = "eval";
};

void run_grad_check(const GradOpts& o) {
    fg::NetworkSpec spec;
    fg::Parameters params;
    if (!o.checkpoint.empty()) {
        std::tie(spec, params) = fg::load_checkpoint(o.checkpoint);
    } else {
        spec = stock_network(fg::default_schema(), 32, 32, "dense", 0.5);
        params = fg::init_parameters(spec, fg::split_seed(o.seed, 0));
    }
    if (o.mode != "eval" && o.mode != "train")
        throw std::invalid_argument("mode must be 'eval' or 'train'");

    fg::Tensor image = fg::Tensor::randn({static_cast<std::size_t>(spec.in_channels),
                                          static_cast<std::size_t>(spec.in_height),
                                          static_cast<std::size_t>(spec.in_width)},
                                         0.5, 0.15, fg::split_seed(o.seed, 1));
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = std::clamp(image[i], 0.0, 1.0);
    fg::Rng label_rng(fg::split_seed(o.seed, 2));
    std::vector<int> labels;
    for (const auto& head : spec.heads)
        labels.push_back(label_rng.uniform_int(0, head.class_count - 2));

    const double rel = fg::gradient_check(spec, params, image, labels, o.h, o.samples, o.seed,
                                          o.mode == "train" ? fg::RunMode::train : fg::RunMode::eval);
    std::string report = "command: grad-check\nh: " + fmt(o.h) + "\nsamples: " +
                         std::to_string(o.samples) + "\nseed: " + std::to_string(o.seed) +
                         "\nmode: " + o.mode + "\nmax_relative_error: " + fmt(rel) + "\ntolerance: " +
                         fmt(o.tol) + "\n";
    if (!o.out.empty()) fg::atomic_write_file(o.out, report);
    std::cout << report;
    if (!(rel <= o.tol))
        throw fg::numeric_error("gradient check failed: " + fmt(rel) + " > " + fmt(o.tol));
}

// --- mean-image ---------------------------------------------------------------------------

struct MeanOpts {
    std::string dataset;
    std::string out;
    std::string out_tensor;
};

void run_mean_image(const MeanOpts& o) {
    const fg::Dataset ds = fg::load_dataset(o.dataset);
    const fg::Tensor mean = fg::compute_mean_image(ds);
    fg::save_ppm(o.out, mean);
    if (!o.out_tensor.empty()) {
        std::string blob;
        fg::append_tensor_blob(blob, mean);
        fg::atomic_write_file(o.out_tensor, blob);
    }
    const std::size_t plane = mean.shape()[1] * mean.shape()[2];
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::size_t i = 0; i < plane; ++i) m += mean[c * plane + i];
        std::cout << "channel " << c << " mean " << fmt(m / static_cast<double>(plane)) << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attribute-conditioned face generation from a from-scratch CNN"};
    app.require_subcommand(1);
    std::string config_file;

    SynthOpts synth;
    auto* cmd_synth = app.add_subcommand("synth-data", "generate a synthetic labeled face dataset");
    cmd_synth->add_option("--config", config_file, "config file with key=value lines");
    cmd_synth->add_option("--out", synth.out, "output dataset directory")->required();
    cmd_synth->add_option("--count", synth.count, "number of images")->required();
    cmd_synth->add_option("--size", synth.size, "image width and height")->capture_default_str();
    cmd_synth->add_option("--seed", synth.seed, "random seed")->capture_default_str();
    cmd_synth->add_option("--unlabeled-fraction", synth.unlabeled_fraction,
                          "per-group chance of dropping a label")->capture_default_str();
    cmd_synth->add_option("--skew", synth.skew, "class-ratio skew toward each group's first label")
        ->capture_default_str();
    cmd_synth->callback([&] { run_synth_data(synth); });

    TrainOpts train;
    auto* cmd_train = app.add_subcommand("train", "train the classifier on a dataset");
    cmd_train->add_option("--config", config_file, "config file with key=value lines");
    cmd_train->add_option("--dataset", train.dataset, "training dataset directory")->required();
    cmd_train->add_option("--test-dataset", train.test_dataset, "held-out dataset for accuracy");
    cmd_train->add_option("--out", train.out, "output checkpoint path")->required();
    cmd_train->add_option("--loss-csv", train.loss_csv, "per-epoch loss CSV (default <out>.loss.csv)");
    cmd_train->add_option("--metrics", train.metrics, "metrics file (default <out>.metrics.txt)");
    cmd_train->add_option("--epochs", train.epochs, "training epochs")->capture_default_str();
    cmd_train->add_option("--lr", train.lr, "learning rate")->capture_default_str();
    cmd_train->add_option("--weight-decay", train.weight_decay, "L2 weight decay")->capture_default_str();
    cmd_train->add_option("--seed", train.seed, "random seed")->capture_default_str();
    cmd_train->add_option("--freeze-below", train.freeze_below,
                          "freeze parameterized layers below this trunk layer (index, conv_last, fc1, fc2, or none)")
        ->capture_default_str();
    cmd_train->add_option("--dropout", train.dropout, "dropout placement: dense, all, none")
        ->capture_default_str();
    cmd_train->add_option("--dropout-p", train.dropout_p, "dropout probability")->capture_default_str();
    cmd_train->callback([&] { run_train(train); });

    FitOpts fit;
    auto* cmd_fit = app.add_subcommand("fit-cgmm", "fit per-attribute activation Gaussians");
    cmd_fit->add_option("--config", config_file, "config file with key=value lines");
    cmd_fit->add_option("--dataset", fit.dataset, "dataset directory")->required();
    cmd_fit->add_option("--checkpoint", fit.checkpoint, "trained checkpoint")->required();
    cmd_fit->add_option("--out", fit.out, "output stats path")->required();
    cmd_fit->add_option("--layer", fit.layer, "trunk layer (index, conv_last, fc1, fc2)")
        ->capture_default_str();
    cmd_fit->add_option("--per-attribute", fit.per_attribute, "positive examples per attribute")
        ->capture_default_str();
    cmd_fit->add_option("--seed", fit.seed, "random seed")->capture_default_str();
    cmd_fit->add_option("--lambda", fit.lambda, "ridge coefficient stored with the stats")
        ->capture_default_str();
    cmd_fit->callback([&] { run_fit_cgmm(fit); });

    LearnOpts learn;
    auto* cmd_learn = app.add_subcommand("learn-weights", "learn attribute weights on activations");
    cmd_learn->add_option("--config", config_file, "config file with key=value lines");
    cmd_learn->add_option("--dataset", learn.dataset, "dataset directory")->required();
    cmd_learn->add_option("--checkpoint", learn.checkpoint, "trained checkpoint")->required();
    cmd_learn->add_option("--stats", learn.stats, "input stats path")->required();
    cmd_learn->add_option("--out", learn.out, "output stats path (default: rewrite --stats)");
    cmd_learn->add_option("--lr", learn.lr, "learning rate")->capture_default_str();
    cmd_learn->add_option("--iters", learn.iters, "gradient descent iterations")->capture_default_str();
    cmd_learn->add_option("--lambda", learn.lambda, "ridge coefficient")->capture_default_str();
    cmd_learn->callback([&] { run_learn_weights(learn); });

    GenOpts gen;
    auto* cmd_gen = app.add_subcommand("generate", "generate a face for an attribute set");
    cmd_gen->add_option("--config", config_file, "config file with key=value lines");
    cmd_gen->add_option("--checkpoint", gen.checkpoint, "trained checkpoint")->required();
    cmd_gen->add_option("--stats", gen.stats, "fitted stats")->required();
    cmd_gen->add_option("--attributes", gen.attributes, "comma-separated attribute names")->required();
    cmd_gen->add_option("--mode", gen.mode, "target mode: mean or sample")->capture_default_str();
    cmd_gen->add_option("--out", gen.out, "output image (PPM)")->required();
    attach_common_gen_flags(cmd_gen, gen, 500);
    cmd_gen->callback([&] { run_generate(gen); });

    GenOpts vis;
    auto* cmd_vis = app.add_subcommand("classvis", "class visualization by gradient ascent");
    cmd_vis->add_option("--config", config_file, "config file with key=value lines");
    cmd_vis->add_option("--checkpoint", vis.checkpoint, "trained checkpoint")->required();
    cmd_vis->add_option("--dataset", vis.dataset, "dataset directory (mean image + schema)")->required();
    cmd_vis->add_option("--attributes", vis.attributes, "comma-separated attribute names")->required();
    cmd_vis->add_option("--out", vis.out, "output image (PPM)")->required();
    cmd_vis->add_flag("--logit-targets", vis.logit_targets,
                      "inject 1/0 gradients at the logits instead of the softmax outputs");
    attach_common_gen_flags(cmd_vis, vis, 200);
    cmd_vis->callback([&] { run_classvis(vis); });

    GenOpts inv;
    auto* cmd_inv = app.add_subcommand("invert", "reconstruct an image from its layer activations");
    cmd_inv->add_option("--config", config_file, "config file with key=value lines");
    cmd_inv->add_option("--checkpoint", inv.checkpoint, "trained checkpoint")->required();
    cmd_inv->add_option("--image", inv.image, "target image (PPM)")->required();
    cmd_inv->add_option("--layer", inv.layer, "trunk layer (default conv_last)");
    cmd_inv->add_option("--init-image", inv.init_image, "start from this image instead of noise");
    cmd_inv->add_option("--out", inv.out, "output image (PPM)")->required();
    attach_common_gen_flags(cmd_inv, inv, 500);
    cmd_inv->callback([&] { run_invert(inv); });

    GradOpts grad;
    auto* cmd_grad = app.add_subcommand("grad-check", "finite-difference gradient check");
    cmd_grad->add_option("--config", config_file, "config file with key=value lines");
    cmd_grad->add_option("--checkpoint", grad.checkpoint, "checkpoint (default: fresh random net)");
    cmd_grad->add_option("--out", grad.out, "report file");
    cmd_grad->add_option("--fd-step", grad.h, "finite-difference step")->capture_default_str();
    cmd_grad->add_option("--samples", grad.samples, "sampled coordinates")->capture_default_str();
    cmd_grad->add_option("--seed", grad.seed, "random seed")->capture_default_str();
    cmd_grad->add_option("--tol", grad.tol, "max allowed relative error")->capture_default_str();
    cmd_grad->add_option("--mode", grad.mode, "forward mode: eval or train")->capture_default_str();
    cmd_grad->callback([&] { run_grad_check(grad); });

    MeanOpts mean;
    auto* cmd_mean = app.add_subcommand("mean-image", "write the dataset mean image");
    cmd_mean->add_option("--config", config_file, "config file with key=value lines");
    cmd_mean->add_option("--dataset", mean.dataset, "dataset directory")->required();
    cmd_mean->add_option("--out", mean.out, "output image (PPM)")->required();
    cmd_mean->add_option("--out-tensor", mean.out_tensor, "also write the exact tensor blob here");
    cmd_mean->callback([&] { run_mean_image(mean); });

    try {
        const std::vector<std::string> args = expand_config_args(argc, argv);
        std::vector<const char*> ptrs;
        ptrs.reserve(args.size());
        for (const auto& a : args) ptrs.push_back(a.c_str());
        app.parse(static_cast<int>(ptrs.size()), ptrs.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const fg::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const fg::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
