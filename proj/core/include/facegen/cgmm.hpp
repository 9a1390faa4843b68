#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facegen/data.hpp"
#include "facegen/nn.hpp"
#include "facegen/tensor.hpp"

namespace facegen {

// Activation model: one diagonal Gaussian per attribute over the flattened
// activations of a chosen trunk layer, plus one learned scalar weight per
// attribute. Targets for feature inversion come from the weighted mean
// (1/|C|) * sum over C of w_i * z_i, with z_i either mu_i or a draw from
// N(mu_i, diag var_i).

inline constexpr double kVarianceFloor = 1e-6;

struct AttributeGaussian {
    Tensor mu;      // [dim], flattened layer activations
    Tensor var;     // [dim], elementwise variance, floored at kVarianceFloor
    int count = 0;  // samples used; < 2 marks the attribute unusable
};

struct CgmmModel {
    int layer = -1;    // trunk layer index the activations came from
    double lambda = 1e-5;
    std::vector<std::string> attribute_names;  // qualified "group.label", group-major
    std::vector<AttributeGaussian> gaussians;  // one per attribute
    std::vector<double> weights;               // w, one per attribute

    int attribute_count() const { return static_cast<int>(attribute_names.size()); }
    bool usable(int attribute) const {
        return gaussians.at(static_cast<std::size_t>(attribute)).count >= 2;
    }
    int attribute_id(const std::string& qualified) const;  // throws on unknown name
};

// Rebuilds the group structure from qualified attribute names (consecutive
// runs of one group prefix form that group's label list, in order).
AttributeSchema schema_from_attribute_names(const std::vector<std::string>& names);

// Eval-mode forward per image; returns the flattened layer activations.
std::vector<Tensor> collect_activations(const NetworkSpec& spec, const Parameters& params,
                                        const Dataset& dataset,
                                        const std::vector<std::size_t>& indices, int layer);

// mu = sample mean, var = unbiased (n-1) per-unit variance floored at
// kVarianceFloor. Needs at least 2 vectors.
AttributeGaussian fit_gaussian(const std::vector<Tensor>& activations);

enum class TargetMode { mean, sample };

// T = (1/|C|) * sum_{i in C} w_i z_i with z_i = mu_i (mean mode) or a seeded
// draw from N(mu_i, diag var_i) (sample mode). Every attribute in C must be
// usable; duplicates are rejected.
Tensor sample_target(const CgmmModel& model, const std::vector<int>& attributes, TargetMode mode,
                     std::uint64_t seed);

// Objective over a labeled activation set:
//   (1/|D|) * sum_i ||phi_i - Phi_i||^2 + lambda * ||w||^2,
//   Phi_i = (1/|C_i|) * sum_{j in C_i} w_j mu_j.
double weight_objective(const CgmmModel& model, const std::vector<Tensor>& activations,
                        const std::vector<std::vector<int>>& attribute_sets);

// d/dw_j = (2/|D|) * sum_{i: j in C_i} (1/|C_i|) * <Phi_i - phi_i, mu_j> + 2*lambda*w_j
std::vector<double> weight_gradient(const CgmmModel& model, const std::vector<Tensor>& activations,
                                    const std::vector<std::vector<int>>& attribute_sets);

struct WeightLearnResult {
    std::vector<double> weights;
    std::vector<double> objective_trace;  // accepted objective per step, starting at step 0
};

// Full-batch gradient descent with step-halving on objective increase; the
// accepted-objective trace never increases. Aborts (numeric_error) if the
// objective becomes non-finite or exceeds 10x its initial value.
WeightLearnResult learn_weights(const CgmmModel& model, const std::vector<Tensor>& activations,
                                const std::vector<std::vector<int>>& attribute_sets, double lr,
                                int iters);

// Stats file: magic "CGS1", version u32, layer u32, attribute count u32, then
// per attribute: name (u32 length + UTF-8), count u32, mu blob, var blob;
// then the weight vector blob and lambda as f64.
std::string stats_to_bytes(const CgmmModel& model);
CgmmModel stats_from_bytes(const std::string& bytes);
void save_stats(const std::filesystem::path& path, const CgmmModel& model);
CgmmModel load_stats(const std::filesystem::path& path);

}  // namespace facegen
