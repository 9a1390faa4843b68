#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "facegen/cgmm.hpp"
#include "facegen/data.hpp"
#include "facegen/nn.hpp"
#include "facegen/tensor.hpp"

namespace facegen {

// Gradient-based image synthesis: class visualization (ascent on targeted
// head outputs) and feature inversion (descent on ||T - phi_l(X)||^2), both
// with the same regularizer set: l2 decay toward zero, periodic Gaussian
// blur, and jitter (circular shift before the gradient step, undone after).

enum class InitMode { noise, image };

struct InversionConfig {
    int layer = -1;                    // trunk layer for feature inversion
    int iterations = 500;
    double step = 1.0;                 // step-size ceiling; halved on objective increase
    InitMode init = InitMode::noise;   // noise: N(0.5, noise_stddev^2) clamped; image: caller-provided
    double noise_stddev = 0.1;
    double blur_sigma = 0.5;           // 0 disables blurring
    int blur_period = 10;              // blur every this many iterations
    int jitter = 2;                    // max circular shift per axis, pixels; 0 disables
    double l2_decay = 1e-4;            // image scaled by (1 - l2_decay) each accepted step
    std::uint64_t seed = 0;
};

struct GenerationResult {
    Tensor image;                         // final image, clamped to [0,1]
    std::vector<double> objective_trace;  // per-iteration objective, entry 0 = initial
    std::vector<double> step_trace;       // step size in effect alongside each trace entry
    int iterations = 0;                   // iterations executed
    std::vector<Tensor> head_probs;       // classify-back softmax outputs, when attached
};

// Separable Gaussian blur (kernel radius ceil(3*sigma), edge-clamped), with
// an additive per-channel correction so channel means are preserved.
Tensor blur(const Tensor& image, double sigma);

// Circular shift by (dx, dy); shift(shift(img, dx, dy), -dx, -dy) == img.
Tensor circular_shift(const Tensor& image, int dx, int dy);

// Gradient ascent on the sum of targeted head outputs, starting from
// mean_image + noise. `targets` are (head index, class index) pairs. The
// objective trace records the targeted-output sum per iteration. With
// logit_targets the 1/0 gradients are injected at the logits instead of the
// softmax outputs (the default saturates slowly by design).
GenerationResult class_visualize(const NetworkSpec& spec, const Parameters& params,
                                 const Tensor& mean_image,
                                 const std::vector<std::pair<int, int>>& targets,
                                 const InversionConfig& cfg, bool logit_targets = false);

// Minimizes ||target - phi_layer(X)||^2 by gradient descent with
// step-halving: a proposal (gradient step, un-jitter, l2 decay, scheduled
// blur, clamp) is accepted only if it strictly lowers the data term, so the
// accepted trace never increases. When a scheduled blur blocks every step
// size, the iteration is retried without the blur; if nothing helps the
// iteration leaves the image unchanged and the trace repeats.
// init_image is required for InitMode::image.
GenerationResult feature_invert(const NetworkSpec& spec, const Parameters& params,
                                const Tensor& target, const InversionConfig& cfg,
                                const Tensor* init_image = nullptr);

// Extracts phi_layer(target_image) and inverts it; classify-back outputs for
// the final image are attached.
GenerationResult reconstruct_from_image(const NetworkSpec& spec, const Parameters& params,
                                        const Tensor& target_image, int layer,
                                        const InversionConfig& cfg,
                                        const Tensor* init_image = nullptr);

// Full pipeline: T = sample_target(model, attributes, mode), reshaped to the
// layer's activation shape, then feature inversion; classify-back outputs for
// the final image are attached. cfg.layer must equal model.layer.
GenerationResult generate_from_attributes(const NetworkSpec& spec, const Parameters& params,
                                          const CgmmModel& model,
                                          const std::vector<int>& attributes, TargetMode mode,
                                          const InversionConfig& cfg);

// Per-group predicted label: argmax over each head's real classes (a trailing
// extra class, when present, is ignored).
std::vector<int> classify_image(const NetworkSpec& spec, const Parameters& params,
                                const AttributeSchema& schema, const Tensor& image);

}  // namespace facegen
