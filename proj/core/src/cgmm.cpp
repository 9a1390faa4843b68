#include "facegen/cgmm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "facegen/base.hpp"
#include "facegen/rng.hpp"

namespace facegen {

int CgmmModel::attribute_id(const std::string& qualified) const {
    for (std::size_t i = 0; i < attribute_names.size(); ++i)
        if (attribute_names[i] == qualified) return static_cast<int>(i);
    throw std::invalid_argument("unknown attribute: " + qualified);
}

AttributeSchema schema_from_attribute_names(const std::vector<std::string>& names) {
    AttributeSchema schema;
    for (const auto& name : names) {
        const auto dot = name.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == name.size())
            throw std::invalid_argument("attribute name is not group.label: " + name);
        const std::string group = name.substr(0, dot);
        const std::string label = name.substr(dot + 1);
        if (!schema.groups.empty() && schema.groups.back().name == group) {
            schema.groups.back().labels.push_back(label);
        } else {
            for (const auto& g : schema.groups)
                if (g.name == group)
                    throw std::invalid_argument("attribute names not group-contiguous at: " + name);
            schema.groups.push_back({group, {label}});
        }
    }
    schema_to_text(schema);  // validates names, sizes, uniqueness
    return schema;
}

std::vector<Tensor> collect_activations(const NetworkSpec& spec, const Parameters& params,
                                        const Dataset& dataset,
                                        const std::vector<std::size_t>& indices, int layer) {
    if (indices.empty()) throw std::invalid_argument("collect_activations: empty index list");
    std::vector<Tensor> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) {
        if (idx >= dataset.items.size())
            throw std::invalid_argument("collect_activations: index out of range");
        const ForwardTrace trace = forward_to_layer(spec, params, dataset.items[idx].image, layer);
        const Tensor& act = trace.trunk[static_cast<std::size_t>(layer)];
        out.push_back(act.reshaped({act.size()}));
    }
    return out;
}

AttributeGaussian fit_gaussian(const std::vector<Tensor>& activations) {
    if (activations.size() < 2)
        throw std::invalid_argument("fit_gaussian: need at least 2 activation vectors");
    const std::size_t dim = activations[0].size();
    for (const auto& a : activations)
        if (a.size() != dim) throw std::invalid_argument("fit_gaussian: inconsistent vector sizes");

    AttributeGaussian g;
    g.count = static_cast<int>(activations.size());
    g.mu = Tensor::zeros({dim});
    g.var = Tensor::zeros({dim});
    const double n = static_cast<double>(activations.size());
    for (const auto& a : activations)
        for (std::size_t i = 0; i < dim; ++i) g.mu[i] += a[i];
    for (std::size_t i = 0; i < dim; ++i) g.mu[i] /= n;
    for (const auto& a : activations) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double d = a[i] - g.mu[i];
            g.var[i] += d * d;
        }
    }
    for (std::size_t i = 0; i < dim; ++i) g.var[i] = std::max(g.var[i] / (n - 1.0), kVarianceFloor);
    return g;
}

Tensor sample_target(const CgmmModel& model, const std::vector<int>& attributes, TargetMode mode,
                     std::uint64_t seed) {
    if (attributes.empty()) throw std::invalid_argument("sample_target: empty attribute set");
    std::vector<int> sorted = attributes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw std::invalid_argument("sample_target: duplicate attribute in set");
    for (int a : attributes) {
        if (a < 0 || a >= model.attribute_count())
            throw std::invalid_argument("sample_target: attribute id out of range");
        if (!model.usable(a))
            throw std::invalid_argument("sample_target: attribute has no fitted distribution: " +
                                        model.attribute_names[static_cast<std::size_t>(a)]);
    }
    const std::size_t dim = model.gaussians[static_cast<std::size_t>(attributes[0])].mu.size();
    Tensor target = Tensor::zeros({dim});
    Rng rng(seed);
    const double inv = 1.0 / static_cast<double>(attributes.size());
    for (int a : attributes) {
        const auto& g = model.gaussians[static_cast<std::size_t>(a)];
        if (g.mu.size() != dim) throw std::invalid_argument("sample_target: dimension mismatch");
        const double w = model.weights[static_cast<std::size_t>(a)];
        for (std::size_t i = 0; i < dim; ++i) {
            const double z =
                mode == TargetMode::mean ? g.mu[i] : g.mu[i] + std::sqrt(g.var[i]) * rng.normal(0.0, 1.0);
            target[i] += inv * w * z;
        }
    }
    return target;
}

namespace {

void check_weight_instance(const CgmmModel& model, const std::vector<Tensor>& activations,
                           const std::vector<std::vector<int>>& attribute_sets) {
    if (activations.empty()) throw std::invalid_argument("weight objective: empty activation set");
    if (activations.size() != attribute_sets.size())
        throw std::invalid_argument("weight objective: activations/attribute_sets size mismatch");
    const std::size_t dim = activations[0].size();
    for (const auto& a : activations)
        if (a.size() != dim) throw std::invalid_argument("weight objective: inconsistent dimensions");
    for (const auto& set : attribute_sets) {
        if (set.empty())
            throw std::invalid_argument("weight objective: image with empty attribute set");
        for (int j : set)
            if (j < 0 || j >= model.attribute_count())
                throw std::invalid_argument("weight objective: attribute id out of range");
    }
}

Tensor weighted_mean_target(const CgmmModel& model, const std::vector<double>& w,
                            const std::vector<int>& set, std::size_t dim) {
    Tensor phi = Tensor::zeros({dim});
    const double inv = 1.0 / static_cast<double>(set.size());
    for (int j : set) {
        const Tensor& mu = model.gaussians[static_cast<std::size_t>(j)].mu;
        const double wj = w[static_cast<std::size_t>(j)];
        for (std::size_t i = 0; i < dim; ++i) phi[i] += inv * wj * mu[i];
    }
    return phi;
}

double objective_at(const CgmmModel& model, const std::vector<double>& w,
                    const std::vector<Tensor>& activations,
                    const std::vector<std::vector<int>>& attribute_sets, double lambda) {
    const std::size_t dim = activations[0].size();
    double data = 0.0;
    for (std::size_t i = 0; i < activations.size(); ++i) {
        const Tensor phi = weighted_mean_target(model, w, attribute_sets[i], dim);
        for (std::size_t k = 0; k < dim; ++k) {
            const double d = activations[i][k] - phi[k];
            data += d * d;
        }
    }
    data /= static_cast<double>(activations.size());
    double ridge = 0.0;
    for (double v : w) ridge += v * v;
    return data + lambda * ridge;
}

std::vector<double> gradient_at(const CgmmModel& model, const std::vector<double>& w,
                                const std::vector<Tensor>& activations,
                                const std::vector<std::vector<int>>& attribute_sets,
                                double lambda) {
    const std::size_t dim = activations[0].size();
    std::vector<double> grad(w.size(), 0.0);
    const double scale = 2.0 / static_cast<double>(activations.size());
    for (std::size_t i = 0; i < activations.size(); ++i) {
        const auto& set = attribute_sets[i];
        const Tensor phi = weighted_mean_target(model, w, set, dim);
        const double inv = 1.0 / static_cast<double>(set.size());
        for (int j : set) {
            const Tensor& mu = model.gaussians[static_cast<std::size_t>(j)].mu;
            double dot = 0.0;
            for (std::size_t k = 0; k < dim; ++k) dot += (phi[k] - activations[i][k]) * mu[k];
            grad[static_cast<std::size_t>(j)] += scale * inv * dot;
        }
    }
    for (std::size_t j = 0; j < w.size(); ++j) grad[j] += 2.0 * lambda * w[j];
    return grad;
}

}  // namespace

double weight_objective(const CgmmModel& model, const std::vector<Tensor>& activations,
                        const std::vector<std::vector<int>>& attribute_sets) {
    check_weight_instance(model, activations, attribute_sets);
    return objective_at(model, model.weights, activations, attribute_sets, model.lambda);
}

std::vector<double> weight_gradient(const CgmmModel& model, const std::vector<Tensor>& activations,
                                    const std::vector<std::vector<int>>& attribute_sets) {
    check_weight_instance(model, activations, attribute_sets);
    return gradient_at(model, model.weights, activations, attribute_sets, model.lambda);
}

WeightLearnResult learn_weights(const CgmmModel& model, const std::vector<Tensor>& activations,
                                const std::vector<std::vector<int>>& attribute_sets, double lr,
                                int iters) {
    if (lr <= 0.0) throw std::invalid_argument("learn_weights: lr must be > 0");
    if (iters < 0) throw std::invalid_argument("learn_weights: iters must be >= 0");
    check_weight_instance(model, activations, attribute_sets);

    WeightLearnResult result;
    result.weights = model.weights;
    double obj = objective_at(model, result.weights, activations, attribute_sets, model.lambda);
    if (!std::isfinite(obj)) throw numeric_error("learn_weights: initial objective is not finite");
    const double initial = obj;
    result.objective_trace.push_back(obj);

    double step = lr;
    for (int it = 0; it < iters; ++it) {
        const auto grad = gradient_at(model, result.weights, activations, attribute_sets, model.lambda);
        bool accepted = false;
        bool saw_blowup = false;
        for (int half = 0; half < 60 && !accepted; ++half) {
            std::vector<double> trial = result.weights;
            for (std::size_t j = 0; j < trial.size(); ++j) trial[j] -= step * grad[j];
            const double trial_obj =
                objective_at(model, trial, activations, attribute_sets, model.lambda);
            if (!std::isfinite(trial_obj) || trial_obj > 10.0 * std::max(initial, 1e-300)) {
                saw_blowup = true;
                step *= 0.5;
                continue;
            }
            if (trial_obj < obj) {
                result.weights = std::move(trial);
                obj = trial_obj;
                accepted = true;
                step = std::min(step * 1.25, lr);  // regrow after success, capped at configured lr
            } else {
                step *= 0.5;
            }
        }
        if (!accepted) {
            if (saw_blowup)
                throw numeric_error(
                    "learn_weights: diverged (objective exceeded 10x its initial value; reduce lr)");
            break;  // no step size improves: converged
        }
        result.objective_trace.push_back(obj);
    }
    return result;
}

// --- stats file -----------------------------------------------------------------

std::string stats_to_bytes(const CgmmModel& model) {
    const auto n = model.attribute_names.size();
    if (model.gaussians.size() != n || model.weights.size() != n)
        throw std::invalid_argument("stats_to_bytes: inconsistent model");
    std::string out = "CGS1";
    put_u32(out, 1u);
    put_u32(out, static_cast<std::uint32_t>(model.layer));
    put_u32(out, static_cast<std::uint32_t>(n));
    for (std::size_t i = 0; i < n; ++i) {
        put_u32(out, static_cast<std::uint32_t>(model.attribute_names[i].size()));
        out += model.attribute_names[i];
        put_u32(out, static_cast<std::uint32_t>(model.gaussians[i].count));
        append_tensor_blob(out, model.gaussians[i].mu);
        append_tensor_blob(out, model.gaussians[i].var);
    }
    Tensor w = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) w[i] = model.weights[i];
    append_tensor_blob(out, w);
    put_f64(out, model.lambda);
    return out;
}

CgmmModel stats_from_bytes(const std::string& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || bytes.compare(0, 4, "CGS1") != 0) throw io_error("stats: bad magic");
    pos = 4;
    if (get_u32(bytes, pos) != 1) throw io_error("stats: unsupported version");
    CgmmModel model;
    model.layer = static_cast<int>(get_u32(bytes, pos));
    const std::uint32_t n = get_u32(bytes, pos);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t len = get_u32(bytes, pos);
        if (pos + len > bytes.size()) throw io_error("stats: truncated attribute name");
        model.attribute_names.push_back(bytes.substr(pos, len));
        pos += len;
        AttributeGaussian g;
        g.count = static_cast<int>(get_u32(bytes, pos));
        g.mu = read_tensor_blob(bytes, pos);
        g.var = read_tensor_blob(bytes, pos);
        require_finite(g.mu, "stats mu");
        require_finite(g.var, "stats var");
        if (!g.mu.same_shape(g.var)) throw io_error("stats: mu/var shape mismatch");
        model.gaussians.push_back(std::move(g));
    }
    const Tensor w = read_tensor_blob(bytes, pos);
    if (w.size() != n) throw io_error("stats: weight vector size mismatch");
    model.weights.assign(w.data(), w.data() + w.size());
    model.lambda = get_f64(bytes, pos);
    if (pos != bytes.size()) throw io_error("stats: trailing bytes");
    schema_from_attribute_names(model.attribute_names);  // validates naming/grouping
    return model;
}

void save_stats(const std::filesystem::path& path, const CgmmModel& model) {
    atomic_write_file(path, stats_to_bytes(model));
}

CgmmModel load_stats(const std::filesystem::path& path) {
    return stats_from_bytes(read_file(path));
}

}  // namespace facegen
