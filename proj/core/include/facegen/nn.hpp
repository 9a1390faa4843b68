#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "facegen/tensor.hpp"

namespace facegen {

// --- network description ----------------------------------------------------

struct ConvSpec {
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    int pad = 0;
};
struct ReluSpec {};
struct MaxPoolSpec {
    int kernel = 2;
    int stride = 2;
};
struct FlattenSpec {};
struct DenseSpec {
    int out_units = 1;
};
struct DropoutSpec {
    double p = 0.5;  // drop probability, 0 <= p < 1; inverted scaling
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, MaxPoolSpec, FlattenSpec, DenseSpec, DropoutSpec>;

// One softmax head per attribute group. The head is a Dense layer on the
// trunk output followed by softmax over `class_count` classes: the group's
// labels plus one trailing "unlabeled" class (incomplete labels are the norm
// in attribute data, so every head carries the extra slot).
struct HeadSpec {
    std::string group;
    int class_count = 2;
};

struct NetworkSpec {
    int in_channels = 3;
    int in_height = 32;
    int in_width = 32;
    std::vector<LayerSpec> trunk;
    std::vector<HeadSpec> heads;
};

// Shape of every trunk layer's output for this spec, validating extents stay
// positive and layer parameters are sane. Index i holds the shape of the
// activation after trunk layer i.
std::vector<std::vector<std::size_t>> trunk_output_shapes(const NetworkSpec& spec);

bool layer_has_params(const LayerSpec& layer);
// Trunk parameterized-layer count (heads not included).
int parameterized_trunk_count(const NetworkSpec& spec);

// Canonical text form, one line per element:
//   input C H W / conv OC K S P / relu / maxpool K S / flatten / dense N /
//   dropout P / head GROUP CLASSES
// This exact text is what checkpoints embed, so it round-trips byte-for-byte.
std::string spec_to_text(const NetworkSpec& spec);
NetworkSpec spec_from_text(const std::string& text);

// Resolves a layer name to a trunk index: a decimal index, or one of the
// role aliases "conv_last" (output of the last Conv), "fc1" (output of the
// first Dense), "fc2" (output of the second Dense). The aliases track the
// layer roles the generation experiments care about regardless of where
// dropout layers sit.
int resolve_layer(const NetworkSpec& spec, const std::string& name);

// --- parameters ---------------------------------------------------------------

struct LayerParams {
    Tensor weight;
    Tensor bias;
};

// Weights/biases aligned with the trunk (nullopt for parameterless layers),
// then one entry per head.
struct Parameters {
    std::vector<std::optional<LayerParams>> trunk;
    std::vector<LayerParams> heads;
};

// He-style init: weights ~ N(0, 2/fan_in), biases zero. Deterministic in seed.
Parameters init_parameters(const NetworkSpec& spec, std::uint64_t seed);

// --- forward / backward -------------------------------------------------------

enum class RunMode { train, eval };

// Everything one forward pass produced: the input, every trunk activation,
// max-pool argmax indices and (train mode) dropout masks for the backward
// pass, and per-head logits and softmax outputs.
struct ForwardTrace {
    Tensor input;
    std::vector<Tensor> trunk;                          // post-layer activations
    std::vector<std::vector<std::int32_t>> pool_argmax;  // flat input index per output element
    std::vector<Tensor> dropout_mask;                    // 0 or 1/(1-p); train mode only
    std::vector<Tensor> head_logits;
    std::vector<Tensor> head_probs;
    RunMode mode = RunMode::eval;
    int layers_run = 0;  // trunk layers actually executed (== trunk.size())
};

// Full pass over trunk and heads. `seed` drives dropout masks in train mode
// and is ignored in eval mode (dropout becomes identity; scaling already
// happened at train time — inverted dropout).
ForwardTrace forward(const NetworkSpec& spec, const Parameters& params, const Tensor& image,
                     RunMode mode, std::uint64_t seed = 0);

// Eval-mode pass over trunk layers [0, up_to_layer] only; heads skipped.
// Cheaper when only phi_l is needed (activation collection, inversion).
ForwardTrace forward_to_layer(const NetworkSpec& spec, const Parameters& params,
                              const Tensor& image, int up_to_layer);

// Mean over labeled heads of -log softmax[label]; heads labeled kUnlabeled
// contribute nothing (no loss, no gradient).
struct MultiheadLoss {
    double total = 0.0;
    std::vector<double> per_head;
};
MultiheadLoss multihead_loss(const ForwardTrace& trace, const std::vector<int>& group_labels);

// d(total)/d(head softmax outputs) for the loss above; feeds backward().
std::vector<Tensor> multihead_loss_grads(const ForwardTrace& trace,
                                         const std::vector<int>& group_labels);

struct Gradients {
    std::vector<std::optional<LayerParams>> trunk;
    std::vector<LayerParams> heads;
    Tensor input;
};

// How head gradients passed to backward() are interpreted: with respect to
// the softmax outputs (default; the softmax Jacobian is applied internally)
// or directly with respect to the pre-softmax logits.
enum class HeadGradKind { probs, logits };

// Full backward pass. By default `head_grads` are gradients with respect to
// each head's softmax *output* (the class-visualization recipe sets these to
// 1/0 directly); the softmax Jacobian is applied here. Produces gradients for
// every parameter and for the input image. Freezing is applied at sgd_step,
// not here: frozen layers still propagate gradient through.
Gradients backward(const NetworkSpec& spec, const Parameters& params, const ForwardTrace& trace,
                   const std::vector<Tensor>& head_grads,
                   HeadGradKind kind = HeadGradKind::probs);

// Backprop seeded at trunk layer `layer` with d_phi (shape of phi_layer),
// reaching the input image; heads untouched, no parameter gradients.
Tensor backward_from_layer(const NetworkSpec& spec, const Parameters& params,
                           const ForwardTrace& trace, int layer, const Tensor& d_phi);

// --- SGD with freezing ----------------------------------------------------------

// One flag per parameterized layer: parameterized trunk layers in trunk
// order, then heads. true = frozen (bit-exact unchanged by sgd_step).
struct FreezeMask {
    std::vector<bool> frozen;
};
FreezeMask no_freeze(const NetworkSpec& spec);
// Freeze every parameterized trunk layer with index < layer; heads stay
// trainable.
FreezeMask freeze_below(const NetworkSpec& spec, int layer);

// p <- p - lr * (g + weight_decay * p) on unfrozen entries.
Parameters sgd_step(Parameters params, const Gradients& grads, double lr, double weight_decay,
                    const FreezeMask& freeze);

// --- gradient checking ------------------------------------------------------------

// Central finite differences (L(x+h) - L(x-h)) / 2h on `sample_count` random
// parameter coordinates plus image pixels, against the analytic gradient of
// multihead_loss. Returns max |a-n| / max(|a|,|n|,1e-12) over evaluated
// coordinates. Coordinates whose perturbation lands near a kink are skipped:
// a ReLU pre-activation that differs between the two perturbed passes with
// magnitude < 10h in either, or a max-pool argmax that flips.
double gradient_check(const NetworkSpec& spec, const Parameters& params, const Tensor& image,
                      const std::vector<int>& labels, double h, int sample_count,
                      std::uint64_t seed, RunMode mode = RunMode::eval);

// --- checkpoint file -----------------------------------------------------------------

// "CGN1", version u32, u32-length-prefixed canonical spec text, then every
// parameter tensor as a CGT1 blob: trunk layers in index order (weight then
// bias), then heads in order.
std::string checkpoint_to_bytes(const NetworkSpec& spec, const Parameters& params);
std::pair<NetworkSpec, Parameters> checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                     const Parameters& params);
std::pair<NetworkSpec, Parameters> load_checkpoint(const std::filesystem::path& path);

}  // namespace facegen
