#include "facegen/generate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "facegen/base.hpp"
#include "facegen/rng.hpp"

namespace facegen {

namespace {

void clamp01_in_place(Tensor& img) {
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
}

void validate_config(const InversionConfig& cfg) {
    if (cfg.iterations < 0) throw std::invalid_argument("inversion: iterations must be >= 0");
    if (!(cfg.step > 0.0)) throw std::invalid_argument("inversion: step must be > 0");
    if (cfg.blur_period < 1) throw std::invalid_argument("inversion: blur_period must be >= 1");
    if (cfg.jitter < 0) throw std::invalid_argument("inversion: jitter must be >= 0");
    if (cfg.blur_sigma < 0.0) throw std::invalid_argument("inversion: blur_sigma must be >= 0");
    if (cfg.noise_stddev < 0.0) throw std::invalid_argument("inversion: noise_stddev must be >= 0");
    if (cfg.l2_decay < 0.0 || cfg.l2_decay >= 1.0)
        throw std::invalid_argument("inversion: l2_decay must be in [0,1)");
}

Tensor make_init(const NetworkSpec& spec, const InversionConfig& cfg, const Tensor* init_image,
                 const Tensor* mean_image) {
    const std::vector<std::size_t> shape = {static_cast<std::size_t>(spec.in_channels),
                                            static_cast<std::size_t>(spec.in_height),
                                            static_cast<std::size_t>(spec.in_width)};
    Tensor x;
    if (mean_image != nullptr) {  // class visualization: mean image + noise
        if (mean_image->shape() != shape)
            throw std::invalid_argument("init: mean image shape does not match network input");
        x = *mean_image;
        Rng rng(split_seed(cfg.seed, 0));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += rng.normal(0.0, cfg.noise_stddev);
    } else if (cfg.init == InitMode::image) {
        if (init_image == nullptr)
            throw std::invalid_argument("init: InitMode::image requires an init image");
        if (init_image->shape() != shape)
            throw std::invalid_argument("init: init image shape does not match network input");
        x = *init_image;
    } else {
        x = Tensor::zeros(shape);
        Rng rng(split_seed(cfg.seed, 0));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal(0.5, cfg.noise_stddev);
    }
    clamp01_in_place(x);
    return x;
}

double data_term(const NetworkSpec& spec, const Parameters& params, const Tensor& x, int layer,
                 const Tensor& target) {
    const ForwardTrace trace = forward_to_layer(spec, params, x, layer);
    const Tensor& phi = trace.trunk[static_cast<std::size_t>(layer)];
    double sum = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double d = phi[i] - target[i];
        sum += d * d;
    }
    return sum;
}

}  // namespace

Tensor blur(const Tensor& image, double sigma) {
    if (sigma < 0.0) throw std::invalid_argument("blur: sigma must be >= 0");
    if (image.rank() != 3) throw std::invalid_argument("blur: expected [C,H,W] image");
    if (sigma == 0.0) return image;

    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        ksum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (double& k : kernel) k /= ksum;

    const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    Tensor mid = Tensor::zeros(image.shape());
    Tensor out = Tensor::zeros(image.shape());
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {  // horizontal pass, edge-clamped
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const long xx = std::clamp<long>(static_cast<long>(x) + k, 0, static_cast<long>(W) - 1);
                    acc += kernel[static_cast<std::size_t>(k + radius)] *
                           image.at(c, y, static_cast<std::size_t>(xx));
                }
                mid.at(c, y, x) = acc;
            }
        }
    }
    // vertical pass (reading mid), then per-channel mean restoration
    for (std::size_t c = 0; c < C; ++c) {
        double mean_before = 0.0, mean_after = 0.0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) mean_before += image.at(c, y, x);
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const long yy = std::clamp<long>(static_cast<long>(y) + k, 0, static_cast<long>(H) - 1);
                    acc += kernel[static_cast<std::size_t>(k + radius)] *
                           mid.at(c, static_cast<std::size_t>(yy), x);
                }
                out.at(c, y, x) = acc;
                mean_after += acc;
            }
        }
        const double correction = (mean_before - mean_after) / static_cast<double>(H * W);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) += correction;
    }
    return out;
}

Tensor circular_shift(const Tensor& image, int dx, int dy) {
    if (image.rank() != 3) throw std::invalid_argument("circular_shift: expected [C,H,W] image");
    const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    const long h = static_cast<long>(H), w = static_cast<long>(W);
    Tensor out = Tensor::zeros(image.shape());
    for (std::size_t c = 0; c < C; ++c) {
        for (long y = 0; y < h; ++y) {
            const long sy = ((y - dy) % h + h) % h;
            for (long x = 0; x < w; ++x) {
                const long sx = ((x - dx) % w + w) % w;
                out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    image.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
        }
    }
    return out;
}

GenerationResult class_visualize(const NetworkSpec& spec, const Parameters& params,
                                 const Tensor& mean_image,
                                 const std::vector<std::pair<int, int>>& targets,
                                 const InversionConfig& cfg, bool logit_targets) {
    validate_config(cfg);
    if (targets.empty()) throw std::invalid_argument("class_visualize: empty target set");
    for (const auto& [h, c] : targets) {
        if (h < 0 || h >= static_cast<int>(spec.heads.size()))
            throw std::invalid_argument("class_visualize: head index out of range");
        if (c < 0 || c >= spec.heads[static_cast<std::size_t>(h)].class_count)
            throw std::invalid_argument("class_visualize: class index out of range");
    }

    auto targeted_score = [&](const ForwardTrace& trace) {
        double s = 0.0;
        for (const auto& [h, c] : targets)
            s += trace.head_probs[static_cast<std::size_t>(h)][static_cast<std::size_t>(c)];
        return s;
    };

    GenerationResult res;
    Tensor x = make_init(spec, cfg, nullptr, &mean_image);
    Rng jit_rng(split_seed(cfg.seed, 1));
    res.objective_trace.push_back(targeted_score(forward(spec, params, x, RunMode::eval)));
    res.step_trace.push_back(cfg.step);

    for (int it = 1; it <= cfg.iterations; ++it) {
        int dx = 0, dy = 0;
        if (cfg.jitter > 0) {
            dx = jit_rng.uniform_int(-cfg.jitter, cfg.jitter);
            dy = jit_rng.uniform_int(-cfg.jitter, cfg.jitter);
        }
        const Tensor xs = circular_shift(x, dx, dy);
        const ForwardTrace trace = forward(spec, params, xs, RunMode::eval);
        std::vector<Tensor> head_grads;
        for (const auto& head : trace.head_probs) head_grads.push_back(Tensor::zeros(head.shape()));
        for (const auto& [h, c] : targets)
            head_grads[static_cast<std::size_t>(h)][static_cast<std::size_t>(c)] = 1.0;
        const Gradients grads = backward(spec, params, trace, head_grads,
                                         logit_targets ? HeadGradKind::logits : HeadGradKind::probs);

        Tensor ys = xs;
        axpy_in_place(ys, cfg.step, grads.input);  // ascent
        Tensor y = circular_shift(ys, -dx, -dy);
        if (cfg.l2_decay > 0.0)
            for (std::size_t i = 0; i < y.size(); ++i) y[i] *= 1.0 - cfg.l2_decay;
        if (cfg.blur_sigma > 0.0 && it % cfg.blur_period == 0) y = blur(y, cfg.blur_sigma);
        clamp01_in_place(y);
        x = std::move(y);
        res.objective_trace.push_back(targeted_score(forward(spec, params, x, RunMode::eval)));
        res.step_trace.push_back(cfg.step);
    }
    res.image = std::move(x);
    res.iterations = cfg.iterations;
    return res;
}

GenerationResult feature_invert(const NetworkSpec& spec, const Parameters& params,
                                const Tensor& target, const InversionConfig& cfg,
                                const Tensor* init_image) {
    validate_config(cfg);
    if (cfg.layer < 0 || cfg.layer >= static_cast<int>(spec.trunk.size()))
        throw std::invalid_argument("feature_invert: layer index out of range");
    require_finite(target, "inversion target");
    const auto shapes = trunk_output_shapes(spec);
    if (target.shape() != shapes[static_cast<std::size_t>(cfg.layer)])
        throw std::invalid_argument("feature_invert: target shape does not match layer activations");

    GenerationResult res;
    Tensor x = make_init(spec, cfg, init_image, nullptr);
    Rng jit_rng(split_seed(cfg.seed, 1));
    double current = data_term(spec, params, x, cfg.layer, target);
    double step = cfg.step;
    res.objective_trace.push_back(current);
    res.step_trace.push_back(step);

    for (int it = 1; it <= cfg.iterations; ++it) {
        int dx = 0, dy = 0;
        if (cfg.jitter > 0) {
            dx = jit_rng.uniform_int(-cfg.jitter, cfg.jitter);
            dy = jit_rng.uniform_int(-cfg.jitter, cfg.jitter);
        }
        const Tensor xs = circular_shift(x, dx, dy);
        const ForwardTrace trace = forward_to_layer(spec, params, xs, cfg.layer);
        const Tensor& phi = trace.trunk[static_cast<std::size_t>(cfg.layer)];
        Tensor d_phi = Tensor::zeros(phi.shape());
        for (std::size_t i = 0; i < phi.size(); ++i) d_phi[i] = 2.0 * (phi[i] - target[i]);
        const Tensor grad = backward_from_layer(spec, params, trace, cfg.layer, d_phi);

        // A proposal bundles the whole update (gradient step, un-jitter, l2
        // decay, scheduled blur, clamp) and is accepted only if it strictly
        // lowers the data term. If the scheduled blur blocks every step size,
        // retry without it; if nothing helps, the iteration is a no-op.
        const bool blur_scheduled = cfg.blur_sigma > 0.0 && it % cfg.blur_period == 0;
        bool accepted = false;
        for (int phase = 0; phase < (blur_scheduled ? 2 : 1) && !accepted; ++phase) {
            const bool use_blur = blur_scheduled && phase == 0;
            double s = step;
            for (int half = 0; half < 30 && !accepted; ++half) {
                Tensor ys = xs;
                axpy_in_place(ys, -s, grad);
                Tensor y = circular_shift(ys, -dx, -dy);
                if (cfg.l2_decay > 0.0)
                    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= 1.0 - cfg.l2_decay;
                if (use_blur) y = blur(y, cfg.blur_sigma);
                clamp01_in_place(y);
                const double trial = data_term(spec, params, y, cfg.layer, target);
                if (std::isfinite(trial) && trial < current) {
                    x = std::move(y);
                    current = trial;
                    accepted = true;
                    // Regrow gently: on this landscape (activation gates and
                    // pool routing flip under large moves) many small accepted
                    // steps outrun occasional big ones, so the step tracks the
                    // productive size closely rather than doubling back up.
                    step = std::min(s * 1.1, cfg.step);
                } else {
                    s *= 0.5;
                }
            }
        }
        res.objective_trace.push_back(current);
        res.step_trace.push_back(step);
    }
    res.image = std::move(x);
    res.iterations = cfg.iterations;
    return res;
}

GenerationResult reconstruct_from_image(const NetworkSpec& spec, const Parameters& params,
                                        const Tensor& target_image, int layer,
                                        const InversionConfig& cfg, const Tensor* init_image) {
    if (layer < 0 || layer >= static_cast<int>(spec.trunk.size()))
        throw std::invalid_argument("reconstruct_from_image: layer index out of range");
    const ForwardTrace trace = forward_to_layer(spec, params, target_image, layer);
    InversionConfig run_cfg = cfg;
    run_cfg.layer = layer;
    GenerationResult res =
        feature_invert(spec, params, trace.trunk[static_cast<std::size_t>(layer)], run_cfg, init_image);
    if (!spec.heads.empty())
        res.head_probs = forward(spec, params, res.image, RunMode::eval).head_probs;
    return res;
}

GenerationResult generate_from_attributes(const NetworkSpec& spec, const Parameters& params,
                                          const CgmmModel& model,
                                          const std::vector<int>& attributes, TargetMode mode,
                                          const InversionConfig& cfg) {
    if (cfg.layer != model.layer)
        throw std::invalid_argument("generate_from_attributes: config layer differs from model layer");
    if (model.layer < 0 || model.layer >= static_cast<int>(spec.trunk.size()))
        throw std::invalid_argument("generate_from_attributes: model layer out of range for network");
    const Tensor flat = sample_target(model, attributes, mode, split_seed(cfg.seed, 2));
    const auto shapes = trunk_output_shapes(spec);
    const auto& layer_shape = shapes[static_cast<std::size_t>(model.layer)];
    std::size_t expect = 1;
    for (auto e : layer_shape) expect *= e;
    if (flat.size() != expect)
        throw std::invalid_argument("generate_from_attributes: stats dimension does not match layer");
    GenerationResult res = feature_invert(spec, params, flat.reshaped(layer_shape), cfg);
    if (!spec.heads.empty())
        res.head_probs = forward(spec, params, res.image, RunMode::eval).head_probs;
    return res;
}

std::vector<int> classify_image(const NetworkSpec& spec, const Parameters& params,
                                const AttributeSchema& schema, const Tensor& image) {
    if (spec.heads.size() != schema.groups.size())
        throw std::invalid_argument("classify_image: head count does not match schema groups");
    const ForwardTrace trace = forward(spec, params, image, RunMode::eval);
    std::vector<int> labels;
    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        const std::size_t real = schema.groups[h].labels.size();
        if (trace.head_probs[h].size() < real)
            throw std::invalid_argument("classify_image: head smaller than its group");
        std::size_t best = 0;
        for (std::size_t c = 1; c < real; ++c)
            if (trace.head_probs[h][c] > trace.head_probs[h][best]) best = c;
        labels.push_back(static_cast<int>(best));
    }
    return labels;
}

}  // namespace facegen
