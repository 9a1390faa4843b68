#include "facegen/nn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "facegen/base.hpp"
#include "facegen/rng.hpp"

namespace facegen {

namespace {

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

struct ShapeCHW {
    std::size_t c = 0, h = 0, w = 0;
};

ShapeCHW as_chw(const std::vector<std::size_t>& s, const char* who) {
    if (s.size() != 3) throw std::invalid_argument(std::string(who) + ": rank-3 input required");
    return {s[0], s[1], s[2]};
}

std::size_t flat_size(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

// ---- conv ----

void conv_forward(const ConvSpec& c, const Tensor& w, const Tensor& b, const Tensor& in,
                  Tensor& out) {
    const auto is = as_chw(in.shape(), "conv");
    const auto os = as_chw(out.shape(), "conv");
    const int IC = static_cast<int>(is.c), IH = static_cast<int>(is.h), IW = static_cast<int>(is.w);
    const int OH = static_cast<int>(os.h), OW = static_cast<int>(os.w);
    const int K = c.kernel, S = c.stride, P = c.pad;
    const double* pw = w.data();
    const double* pin = in.data();
    double* pout = out.data();
    for (int oc = 0; oc < c.out_channels; ++oc) {
        const double bias = b[static_cast<std::size_t>(oc)];
        for (int oy = 0; oy < OH; ++oy) {
            const int iy0 = oy * S - P;
            const int ky_lo = std::max(0, -iy0);
            const int ky_hi = std::min(K, IH - iy0);
            for (int ox = 0; ox < OW; ++ox) {
                const int ix0 = ox * S - P;
                const int kx_lo = std::max(0, -ix0);
                const int kx_hi = std::min(K, IW - ix0);
                double acc = bias;
                for (int ic = 0; ic < IC; ++ic) {
                    const double* wrow = pw + ((static_cast<std::size_t>(oc) * IC + ic) * K) * K;
                    const double* irow = pin + (static_cast<std::size_t>(ic) * IH) * IW;
                    for (int ky = ky_lo; ky < ky_hi; ++ky) {
                        const double* wk = wrow + static_cast<std::size_t>(ky) * K;
                        const double* ik = irow + static_cast<std::size_t>(iy0 + ky) * IW + ix0;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) acc += wk[kx] * ik[kx];
                    }
                }
                pout[(static_cast<std::size_t>(oc) * OH + oy) * OW + ox] = acc;
            }
        }
    }
}

void conv_backward(const ConvSpec& c, const Tensor& w, const Tensor& in, const Tensor& gout,
                   Tensor& gin, LayerParams* pgrads) {
    const auto is = as_chw(in.shape(), "conv");
    const auto os = as_chw(gout.shape(), "conv");
    const int IC = static_cast<int>(is.c), IH = static_cast<int>(is.h), IW = static_cast<int>(is.w);
    const int OH = static_cast<int>(os.h), OW = static_cast<int>(os.w);
    const int K = c.kernel, S = c.stride, P = c.pad;
    const double* pw = w.data();
    const double* pin = in.data();
    const double* pg = gout.data();
    double* pgin = gin.data();
    double* pdw = pgrads ? pgrads->weight.data() : nullptr;
    for (int oc = 0; oc < c.out_channels; ++oc) {
        double db = 0.0;
        for (int oy = 0; oy < OH; ++oy) {
            const int iy0 = oy * S - P;
            const int ky_lo = std::max(0, -iy0);
            const int ky_hi = std::min(K, IH - iy0);
            for (int ox = 0; ox < OW; ++ox) {
                const int ix0 = ox * S - P;
                const int kx_lo = std::max(0, -ix0);
                const int kx_hi = std::min(K, IW - ix0);
                const double g = pg[(static_cast<std::size_t>(oc) * OH + oy) * OW + ox];
                db += g;
                for (int ic = 0; ic < IC; ++ic) {
                    const std::size_t wbase = ((static_cast<std::size_t>(oc) * IC + ic) * K) * K;
                    const std::size_t ibase = (static_cast<std::size_t>(ic) * IH) * IW;
                    for (int ky = ky_lo; ky < ky_hi; ++ky) {
                        const std::size_t wrow = wbase + static_cast<std::size_t>(ky) * K;
                        const std::size_t irow = ibase + static_cast<std::size_t>(iy0 + ky) * IW + ix0;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) {
                            pgin[irow + kx] += g * pw[wrow + kx];
                            if (pdw) pdw[wrow + kx] += g * pin[irow + kx];
                        }
                    }
                }
            }
        }
        if (pgrads) pgrads->bias[static_cast<std::size_t>(oc)] += db;
    }
}

// ---- maxpool ----

void maxpool_forward(const MaxPoolSpec& m, const Tensor& in, Tensor& out,
                     std::vector<std::int32_t>& arg) {
    const auto is = as_chw(in.shape(), "maxpool");
    const auto os = as_chw(out.shape(), "maxpool");
    const int C = static_cast<int>(is.c), IH = static_cast<int>(is.h), IW = static_cast<int>(is.w);
    const int OH = static_cast<int>(os.h), OW = static_cast<int>(os.w);
    const double* pin = in.data();
    double* pout = out.data();
    arg.assign(out.size(), 0);
    std::size_t o = 0;
    for (int ch = 0; ch < C; ++ch) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox, ++o) {
                const int iy0 = oy * m.stride, ix0 = ox * m.stride;
                double best = -1e300;
                std::int32_t best_i = 0;
                // row-major scan; first maximum wins on ties
                for (int ky = 0; ky < m.kernel; ++ky) {
                    const std::size_t row = (static_cast<std::size_t>(ch) * IH + (iy0 + ky)) * IW + ix0;
                    for (int kx = 0; kx < m.kernel; ++kx) {
                        const double v = pin[row + kx];
                        if (v > best) {
                            best = v;
                            best_i = static_cast<std::int32_t>(row + kx);
                        }
                    }
                }
                pout[o] = best;
                arg[o] = best_i;
            }
        }
    }
}

// ---- dense ----

void dense_forward(const Tensor& w, const Tensor& b, const Tensor& in, Tensor& out) {
    const std::size_t O = w.shape()[0], I = w.shape()[1];
    const double* pw = w.data();
    const double* px = in.data();
    for (std::size_t o = 0; o < O; ++o) {
        double acc = b[o];
        const double* row = pw + o * I;
        for (std::size_t i = 0; i < I; ++i) acc += row[i] * px[i];
        out[o] = acc;
    }
}

void dense_backward(const Tensor& w, const Tensor& in, const Tensor& gout, Tensor& gin,
                    LayerParams* pgrads) {
    const std::size_t O = w.shape()[0], I = w.shape()[1];
    const double* pw = w.data();
    const double* px = in.data();
    const double* pg = gout.data();
    double* pgin = gin.data();
    for (std::size_t o = 0; o < O; ++o) {
        const double g = pg[o];
        const double* row = pw + o * I;
        for (std::size_t i = 0; i < I; ++i) pgin[i] += g * row[i];
        if (pgrads) {
            double* dwrow = pgrads->weight.data() + o * I;
            for (std::size_t i = 0; i < I; ++i) dwrow[i] += g * px[i];
            pgrads->bias[o] += g;
        }
    }
}

Tensor softmax(const Tensor& z) {
    Tensor p = z;
    const double m = max_value(z);
    double den = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(p[i] - m);
        den += p[i];
    }
    for (std::size_t i = 0; i < p.size(); ++i) p[i] /= den;
    return p;
}

std::vector<std::string> tokenize(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

int parse_int(const std::string& s, const char* what) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument(std::string("bad integer for ") + what + ": " + s);
    return v;
}

}  // namespace

// --- spec -----------------------------------------------------------------

bool layer_has_params(const LayerSpec& layer) {
    return std::holds_alternative<ConvSpec>(layer) || std::holds_alternative<DenseSpec>(layer);
}

int parameterized_trunk_count(const NetworkSpec& spec) {
    int n = 0;
    for (const auto& l : spec.trunk)
        if (layer_has_params(l)) ++n;
    return n;
}

std::vector<std::vector<std::size_t>> trunk_output_shapes(const NetworkSpec& spec) {
    if (spec.in_channels < 1 || spec.in_height < 1 || spec.in_width < 1)
        throw std::invalid_argument("network input extents must be >= 1");
    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> cur = {static_cast<std::size_t>(spec.in_channels),
                                    static_cast<std::size_t>(spec.in_height),
                                    static_cast<std::size_t>(spec.in_width)};
    for (std::size_t li = 0; li < spec.trunk.size(); ++li) {
        const auto& layer = spec.trunk[li];
        if (const auto* c = std::get_if<ConvSpec>(&layer)) {
            if (c->kernel < 1 || c->stride < 1 || c->pad < 0 || c->out_channels < 1)
                throw std::invalid_argument("conv: kernel/stride must be >= 1, pad >= 0");
            const auto s = as_chw(cur, "conv");
            // Truncating division hides a too-large kernel ((h - k)/s can
            // round up to 0), so the window fit is checked first.
            if (c->kernel > static_cast<long>(s.h) + 2 * c->pad ||
                c->kernel > static_cast<long>(s.w) + 2 * c->pad)
                throw std::invalid_argument("conv: kernel larger than padded input");
            const long oh = (static_cast<long>(s.h) + 2 * c->pad - c->kernel) / c->stride + 1;
            const long ow = (static_cast<long>(s.w) + 2 * c->pad - c->kernel) / c->stride + 1;
            if (oh < 1 || ow < 1) throw std::invalid_argument("conv: output spatial dims not positive");
            cur = {static_cast<std::size_t>(c->out_channels), static_cast<std::size_t>(oh),
                   static_cast<std::size_t>(ow)};
        } else if (const auto* m = std::get_if<MaxPoolSpec>(&layer)) {
            if (m->kernel < 1 || m->stride < 1)
                throw std::invalid_argument("maxpool: kernel/stride must be >= 1");
            const auto s = as_chw(cur, "maxpool");
            if (m->kernel > static_cast<long>(s.h) || m->kernel > static_cast<long>(s.w))
                throw std::invalid_argument("maxpool: kernel larger than input");
            const long oh = (static_cast<long>(s.h) - m->kernel) / m->stride + 1;
            const long ow = (static_cast<long>(s.w) - m->kernel) / m->stride + 1;
            if (oh < 1 || ow < 1)
                throw std::invalid_argument("maxpool: output spatial dims not positive");
            cur = {s.c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
        } else if (std::holds_alternative<FlattenSpec>(layer)) {
            cur = {flat_size(cur)};
        } else if (const auto* d = std::get_if<DenseSpec>(&layer)) {
            if (d->out_units < 1) throw std::invalid_argument("dense: out_units must be >= 1");
            cur = {static_cast<std::size_t>(d->out_units)};
        } else if (const auto* p = std::get_if<DropoutSpec>(&layer)) {
            if (!(p->p >= 0.0 && p->p < 1.0))
                throw std::invalid_argument("dropout: p must satisfy 0 <= p < 1");
        } else {
            // relu keeps the shape
        }
        shapes.push_back(cur);
    }
    return shapes;
}

std::string spec_to_text(const NetworkSpec& spec) {
    std::string out;
    out += "input " + std::to_string(spec.in_channels) + " " + std::to_string(spec.in_height) +
           " " + std::to_string(spec.in_width) + "\n";
    for (const auto& layer : spec.trunk) {
        if (const auto* c = std::get_if<ConvSpec>(&layer)) {
            out += "conv " + std::to_string(c->out_channels) + " " + std::to_string(c->kernel) +
                   " " + std::to_string(c->stride) + " " + std::to_string(c->pad) + "\n";
        } else if (std::holds_alternative<ReluSpec>(layer)) {
            out += "relu\n";
        } else if (const auto* m = std::get_if<MaxPoolSpec>(&layer)) {
            out += "maxpool " + std::to_string(m->kernel) + " " + std::to_string(m->stride) + "\n";
        } else if (std::holds_alternative<FlattenSpec>(layer)) {
            out += "flatten\n";
        } else if (const auto* d = std::get_if<DenseSpec>(&layer)) {
            out += "dense " + std::to_string(d->out_units) + "\n";
        } else if (const auto* p = std::get_if<DropoutSpec>(&layer)) {
            out += "dropout " + format_double(p->p) + "\n";
        }
    }
    for (const auto& h : spec.heads)
        out += "head " + h.group + " " + std::to_string(h.class_count) + "\n";
    return out;
}

NetworkSpec spec_from_text(const std::string& text) {
    NetworkSpec spec;
    spec.trunk.clear();
    bool saw_input = false;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        const auto tok = tokenize(line);
        if (tok.empty()) continue;
        const std::string& kind = tok[0];
        auto want = [&](std::size_t n) {
            if (tok.size() != n + 1)
                throw std::invalid_argument("network spec: bad argument count for " + kind);
        };
        if (kind == "input") {
            want(3);
            spec.in_channels = parse_int(tok[1], "input channels");
            spec.in_height = parse_int(tok[2], "input height");
            spec.in_width = parse_int(tok[3], "input width");
            saw_input = true;
        } else if (kind == "conv") {
            want(4);
            spec.trunk.push_back(ConvSpec{parse_int(tok[1], "conv channels"),
                                          parse_int(tok[2], "conv kernel"),
                                          parse_int(tok[3], "conv stride"),
                                          parse_int(tok[4], "conv pad")});
        } else if (kind == "relu") {
            want(0);
            spec.trunk.push_back(ReluSpec{});
        } else if (kind == "maxpool") {
            want(2);
            spec.trunk.push_back(
                MaxPoolSpec{parse_int(tok[1], "maxpool kernel"), parse_int(tok[2], "maxpool stride")});
        } else if (kind == "flatten") {
            want(0);
            spec.trunk.push_back(FlattenSpec{});
        } else if (kind == "dense") {
            want(1);
            spec.trunk.push_back(DenseSpec{parse_int(tok[1], "dense units")});
        } else if (kind == "dropout") {
            want(1);
            spec.trunk.push_back(DropoutSpec{std::stod(tok[1])});
        } else if (kind == "head") {
            want(2);
            spec.heads.push_back(HeadSpec{tok[1], parse_int(tok[2], "head classes")});
        } else {
            throw std::invalid_argument("network spec: unknown layer kind: " + kind);
        }
    }
    if (!saw_input) throw std::invalid_argument("network spec: missing input line");
    trunk_output_shapes(spec);  // validate
    return spec;
}

int resolve_layer(const NetworkSpec& spec, const std::string& name) {
    if (!name.empty() && std::all_of(name.begin(), name.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        const int idx = parse_int(name, "layer index");
        if (idx < 0 || idx >= static_cast<int>(spec.trunk.size()))
            throw std::invalid_argument("layer index out of range: " + name);
        return idx;
    }
    int conv_last = -1, fc1 = -1, fc2 = -1, dense_seen = 0;
    for (int i = 0; i < static_cast<int>(spec.trunk.size()); ++i) {
        if (std::holds_alternative<ConvSpec>(spec.trunk[i])) conv_last = i;
        if (std::holds_alternative<DenseSpec>(spec.trunk[i])) {
            ++dense_seen;
            if (dense_seen == 1) fc1 = i;
            if (dense_seen == 2) fc2 = i;
        }
    }
    int idx = -1;
    if (name == "conv_last") idx = conv_last;
    else if (name == "fc1") idx = fc1;
    else if (name == "fc2") idx = fc2;
    else throw std::invalid_argument("unknown layer name '" + name + "' (use an index, conv_last, fc1, or fc2)");
    if (idx < 0) throw std::invalid_argument("layer alias '" + name + "' has no matching layer in this network");
    return idx;
}

// --- parameters -------------------------------------------------------------

Parameters init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
    const auto shapes = trunk_output_shapes(spec);
    Parameters params;
    params.trunk.resize(spec.trunk.size());
    std::uint64_t stream = 0;
    std::vector<std::size_t> cur = {static_cast<std::size_t>(spec.in_channels),
                                    static_cast<std::size_t>(spec.in_height),
                                    static_cast<std::size_t>(spec.in_width)};
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        if (const auto* c = std::get_if<ConvSpec>(&spec.trunk[i])) {
            const std::size_t ic = cur[0];
            const std::size_t fan_in = ic * c->kernel * c->kernel;
            LayerParams lp;
            lp.weight = Tensor::randn({static_cast<std::size_t>(c->out_channels), ic,
                                       static_cast<std::size_t>(c->kernel),
                                       static_cast<std::size_t>(c->kernel)},
                                      0.0, std::sqrt(2.0 / static_cast<double>(fan_in)),
                                      split_seed(seed, stream++));
            lp.bias = Tensor::zeros({static_cast<std::size_t>(c->out_channels)});
            params.trunk[i] = std::move(lp);
        } else if (const auto* d = std::get_if<DenseSpec>(&spec.trunk[i])) {
            const std::size_t fan_in = flat_size(cur);
            LayerParams lp;
            lp.weight =
                Tensor::randn({static_cast<std::size_t>(d->out_units), fan_in}, 0.0,
                              std::sqrt(2.0 / static_cast<double>(fan_in)), split_seed(seed, stream++));
            lp.bias = Tensor::zeros({static_cast<std::size_t>(d->out_units)});
            params.trunk[i] = std::move(lp);
        }
        cur = shapes[i];
    }
    const std::size_t trunk_out = flat_size(shapes.empty() ? cur : shapes.back());
    for (const auto& h : spec.heads) {
        if (h.class_count < 2) throw std::invalid_argument("head class_count must be >= 2");
        LayerParams lp;
        lp.weight = Tensor::randn({static_cast<std::size_t>(h.class_count), trunk_out}, 0.0,
                                  std::sqrt(1.0 / static_cast<double>(trunk_out)),
                                  split_seed(seed, stream++));
        lp.bias = Tensor::zeros({static_cast<std::size_t>(h.class_count)});
        params.heads.push_back(std::move(lp));
    }
    return params;
}

// --- forward -----------------------------------------------------------------

namespace {

void run_trunk(const NetworkSpec& spec, const Parameters& params, const Tensor& image,
               RunMode mode, std::uint64_t seed, int up_to, ForwardTrace& trace) {
    const auto shapes = trunk_output_shapes(spec);
    const std::vector<std::size_t> in_shape = {static_cast<std::size_t>(spec.in_channels),
                                               static_cast<std::size_t>(spec.in_height),
                                               static_cast<std::size_t>(spec.in_width)};
    if (image.shape() != in_shape) throw std::invalid_argument("forward: image shape mismatch");
    require_finite(image, "forward input");
    if (params.trunk.size() != spec.trunk.size())
        throw std::invalid_argument("forward: parameters do not match spec");

    trace.input = image;
    trace.mode = mode;
    trace.trunk.clear();
    trace.pool_argmax.assign(spec.trunk.size(), {});
    trace.dropout_mask.assign(spec.trunk.size(), Tensor());

    const Tensor* cur = &trace.input;
    const int last = std::min<int>(up_to, static_cast<int>(spec.trunk.size()) - 1);
    for (int i = 0; i <= last; ++i) {
        const auto& layer = spec.trunk[static_cast<std::size_t>(i)];
        Tensor out;
        if (const auto* c = std::get_if<ConvSpec>(&layer)) {
            out = Tensor::zeros(shapes[static_cast<std::size_t>(i)]);
            const auto& lp = *params.trunk[static_cast<std::size_t>(i)];
            conv_forward(*c, lp.weight, lp.bias, *cur, out);
        } else if (std::holds_alternative<ReluSpec>(layer)) {
            out = *cur;
            for (std::size_t j = 0; j < out.size(); ++j)
                if (out[j] < 0.0) out[j] = 0.0;
        } else if (const auto* m = std::get_if<MaxPoolSpec>(&layer)) {
            out = Tensor::zeros(shapes[static_cast<std::size_t>(i)]);
            maxpool_forward(*m, *cur, out, trace.pool_argmax[static_cast<std::size_t>(i)]);
        } else if (std::holds_alternative<FlattenSpec>(layer)) {
            out = cur->reshaped(shapes[static_cast<std::size_t>(i)]);
        } else if (const auto* d = std::get_if<DenseSpec>(&layer)) {
            (void)d;
            out = Tensor::zeros(shapes[static_cast<std::size_t>(i)]);
            const auto& lp = *params.trunk[static_cast<std::size_t>(i)];
            dense_forward(lp.weight, lp.bias, *cur, out);
        } else if (const auto* p = std::get_if<DropoutSpec>(&layer)) {
            if (mode == RunMode::train && p->p > 0.0) {
                Rng rng(split_seed(seed, 0x1000u + static_cast<std::uint64_t>(i)));
                Tensor mask = Tensor::zeros(cur->shape());
                const double keep = 1.0 - p->p;
                for (std::size_t j = 0; j < mask.size(); ++j)
                    mask[j] = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
                out = mul(*cur, mask);
                trace.dropout_mask[static_cast<std::size_t>(i)] = std::move(mask);
            } else {
                out = *cur;  // eval: identity (inverted dropout scaled at train time)
            }
        }
        trace.trunk.push_back(std::move(out));
        cur = &trace.trunk.back();
    }
    trace.layers_run = last + 1;
}

}  // namespace

ForwardTrace forward(const NetworkSpec& spec, const Parameters& params, const Tensor& image,
                     RunMode mode, std::uint64_t seed) {
    ForwardTrace trace;
    run_trunk(spec, params, image, mode, seed, static_cast<int>(spec.trunk.size()) - 1, trace);
    if (params.heads.size() != spec.heads.size())
        throw std::invalid_argument("forward: head parameters do not match spec");
    const Tensor flat_in =
        trace.trunk.empty() ? trace.input : trace.trunk.back().reshaped({flat_size(trace.trunk.back().shape())});
    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        Tensor z = Tensor::zeros({static_cast<std::size_t>(spec.heads[h].class_count)});
        dense_forward(params.heads[h].weight, params.heads[h].bias, flat_in, z);
        trace.head_probs.push_back(softmax(z));
        trace.head_logits.push_back(std::move(z));
    }
    return trace;
}

ForwardTrace forward_to_layer(const NetworkSpec& spec, const Parameters& params,
                              const Tensor& image, int up_to_layer) {
    if (up_to_layer < 0 || up_to_layer >= static_cast<int>(spec.trunk.size()))
        throw std::invalid_argument("forward_to_layer: layer index out of range");
    ForwardTrace trace;
    run_trunk(spec, params, image, RunMode::eval, 0, up_to_layer, trace);
    return trace;
}

// --- loss ----------------------------------------------------------------------

MultiheadLoss multihead_loss(const ForwardTrace& trace, const std::vector<int>& group_labels) {
    if (group_labels.size() != trace.head_logits.size())
        throw std::invalid_argument("multihead_loss: label count does not match head count");
    MultiheadLoss out;
    out.per_head.assign(group_labels.size(), 0.0);
    int labeled = 0;
    double total = 0.0;
    for (std::size_t h = 0; h < group_labels.size(); ++h) {
        const int label = group_labels[h];
        if (label == kUnlabeled) continue;
        const Tensor& z = trace.head_logits[h];
        if (label < 0 || label >= static_cast<int>(z.size()))
            throw std::invalid_argument("multihead_loss: label out of range for head");
        // -log softmax[label], computed from logits for stability
        const double m = max_value(z);
        double den = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) den += std::exp(z[i] - m);
        const double ce = (m + std::log(den)) - z[static_cast<std::size_t>(label)];
        out.per_head[h] = ce;
        total += ce;
        ++labeled;
    }
    out.total = labeled > 0 ? total / labeled : 0.0;
    return out;
}

std::vector<Tensor> multihead_loss_grads(const ForwardTrace& trace,
                                         const std::vector<int>& group_labels) {
    if (group_labels.size() != trace.head_probs.size())
        throw std::invalid_argument("multihead_loss_grads: label count does not match head count");
    int labeled = 0;
    for (int l : group_labels)
        if (l != kUnlabeled) ++labeled;
    std::vector<Tensor> grads;
    for (std::size_t h = 0; h < group_labels.size(); ++h) {
        Tensor g = Tensor::zeros(trace.head_probs[h].shape());
        const int label = group_labels[h];
        if (label != kUnlabeled && labeled > 0) {
            const double p = trace.head_probs[h][static_cast<std::size_t>(label)];
            g[static_cast<std::size_t>(label)] = -1.0 / (static_cast<double>(labeled) * p);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// --- backward -------------------------------------------------------------------

namespace {

// Backprop d_out at trunk layer `from` down to the input image. When `sink`
// is non-null, parameter gradients accumulate into it.
Tensor backward_trunk_range(const NetworkSpec& spec, const Parameters& params,
                            const ForwardTrace& trace, int from, Tensor d_out, Gradients* sink) {
    for (int i = from; i >= 0; --i) {
        const auto& layer = spec.trunk[static_cast<std::size_t>(i)];
        const Tensor& in_act = (i == 0) ? trace.input : trace.trunk[static_cast<std::size_t>(i - 1)];
        Tensor d_in = Tensor::zeros(in_act.shape());
        if (const auto* c = std::get_if<ConvSpec>(&layer)) {
            const auto& lp = *params.trunk[static_cast<std::size_t>(i)];
            LayerParams* pg = sink ? &*sink->trunk[static_cast<std::size_t>(i)] : nullptr;
            conv_backward(*c, lp.weight, in_act, d_out, d_in, pg);
        } else if (std::holds_alternative<ReluSpec>(layer)) {
            // subgradient at exactly 0 is 0
            for (std::size_t j = 0; j < d_in.size(); ++j)
                d_in[j] = in_act[j] > 0.0 ? d_out[j] : 0.0;
        } else if (std::holds_alternative<MaxPoolSpec>(layer)) {
            const auto& arg = trace.pool_argmax[static_cast<std::size_t>(i)];
            for (std::size_t j = 0; j < d_out.size(); ++j)
                d_in[static_cast<std::size_t>(arg[j])] += d_out[j];
        } else if (std::holds_alternative<FlattenSpec>(layer)) {
            d_in = d_out.reshaped(in_act.shape());
        } else if (std::holds_alternative<DenseSpec>(layer)) {
            const auto& lp = *params.trunk[static_cast<std::size_t>(i)];
            LayerParams* pg = sink ? &*sink->trunk[static_cast<std::size_t>(i)] : nullptr;
            dense_backward(lp.weight, in_act, d_out, d_in, pg);
        } else if (std::holds_alternative<DropoutSpec>(layer)) {
            const Tensor& mask = trace.dropout_mask[static_cast<std::size_t>(i)];
            if (trace.mode == RunMode::train && !mask.empty()) {
                d_in = mul(d_out, mask);
            } else {
                d_in = d_out;
            }
        }
        d_out = std::move(d_in);
    }
    return d_out;
}

Gradients zero_gradients(const NetworkSpec& spec, const Parameters& params) {
    Gradients g;
    g.trunk.resize(params.trunk.size());
    for (std::size_t i = 0; i < params.trunk.size(); ++i) {
        if (params.trunk[i]) {
            g.trunk[i] = LayerParams{Tensor::zeros(params.trunk[i]->weight.shape()),
                                     Tensor::zeros(params.trunk[i]->bias.shape())};
        }
    }
    for (const auto& h : params.heads)
        g.heads.push_back(LayerParams{Tensor::zeros(h.weight.shape()), Tensor::zeros(h.bias.shape())});
    return g;
}

}  // namespace

Gradients backward(const NetworkSpec& spec, const Parameters& params, const ForwardTrace& trace,
                   const std::vector<Tensor>& head_grads, HeadGradKind kind) {
    if (trace.layers_run != static_cast<int>(spec.trunk.size()) ||
        trace.head_probs.size() != spec.heads.size())
        throw std::invalid_argument("backward: trace does not match spec");
    if (head_grads.size() != spec.heads.size())
        throw std::invalid_argument("backward: head gradient count mismatch");

    Gradients grads = zero_gradients(spec, params);
    const Tensor& last = trace.trunk.empty() ? trace.input : trace.trunk.back();
    const Tensor flat_in = last.reshaped({flat_size(last.shape())});
    Tensor d_flat = Tensor::zeros(flat_in.shape());

    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        const Tensor& p = trace.head_probs[h];
        const Tensor& dp = head_grads[h];
        if (!dp.same_shape(p)) throw std::invalid_argument("backward: head gradient shape mismatch");
        Tensor dz = Tensor::zeros(p.shape());
        if (kind == HeadGradKind::probs) {
            // softmax Jacobian: dz_j = p_j * (dp_j - sum_i dp_i p_i)
            double mix = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) mix += dp[i] * p[i];
            for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (dp[i] - mix);
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) dz[i] = dp[i];
        }
        dense_backward(params.heads[h].weight, flat_in, dz, d_flat, &grads.heads[h]);
    }

    Tensor d_last = d_flat.reshaped(last.shape());
    grads.input = trace.trunk.empty()
                      ? std::move(d_last)
                      : backward_trunk_range(spec, params, trace,
                                             static_cast<int>(spec.trunk.size()) - 1,
                                             std::move(d_last), &grads);
    return grads;
}

Tensor backward_from_layer(const NetworkSpec& spec, const Parameters& params,
                           const ForwardTrace& trace, int layer, const Tensor& d_phi) {
    if (layer < 0 || layer >= static_cast<int>(spec.trunk.size()))
        throw std::invalid_argument("backward_from_layer: layer index out of range");
    if (trace.layers_run <= layer)
        throw std::invalid_argument("backward_from_layer: trace does not cover the layer");
    if (!d_phi.same_shape(trace.trunk[static_cast<std::size_t>(layer)]))
        throw std::invalid_argument("backward_from_layer: gradient shape mismatch");
    return backward_trunk_range(spec, params, trace, layer, d_phi, nullptr);
}

// --- SGD -------------------------------------------------------------------------

FreezeMask no_freeze(const NetworkSpec& spec) {
    FreezeMask m;
    m.frozen.assign(static_cast<std::size_t>(parameterized_trunk_count(spec)) + spec.heads.size(),
                    false);
    return m;
}

FreezeMask freeze_below(const NetworkSpec& spec, int layer) {
    FreezeMask m = no_freeze(spec);
    int pi = 0;
    for (int i = 0; i < static_cast<int>(spec.trunk.size()); ++i) {
        if (layer_has_params(spec.trunk[static_cast<std::size_t>(i)])) {
            if (i < layer) m.frozen[static_cast<std::size_t>(pi)] = true;
            ++pi;
        }
    }
    return m;
}

namespace {

void sgd_update(LayerParams& p, const LayerParams& g, double lr, double wd) {
    require_finite(g.weight, "sgd_step gradient");
    require_finite(g.bias, "sgd_step gradient");
    for (std::size_t i = 0; i < p.weight.size(); ++i)
        p.weight[i] -= lr * (g.weight[i] + wd * p.weight[i]);
    for (std::size_t i = 0; i < p.bias.size(); ++i)
        p.bias[i] -= lr * (g.bias[i] + wd * p.bias[i]);
}

}  // namespace

Parameters sgd_step(Parameters params, const Gradients& grads, double lr, double weight_decay,
                    const FreezeMask& freeze) {
    if (lr <= 0.0) throw std::invalid_argument("sgd_step: lr must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("sgd_step: weight_decay must be >= 0");
    std::size_t mi = 0;
    for (std::size_t i = 0; i < params.trunk.size(); ++i) {
        if (!params.trunk[i]) continue;
        if (mi >= freeze.frozen.size()) throw std::invalid_argument("sgd_step: freeze mask too short");
        if (!freeze.frozen[mi]) sgd_update(*params.trunk[i], *grads.trunk[i], lr, weight_decay);
        ++mi;
    }
    for (std::size_t h = 0; h < params.heads.size(); ++h, ++mi) {
        if (mi >= freeze.frozen.size()) throw std::invalid_argument("sgd_step: freeze mask too short");
        if (!freeze.frozen[mi]) sgd_update(params.heads[h], grads.heads[h], lr, weight_decay);
    }
    return params;
}

// --- gradient check ------------------------------------------------------------------

namespace {

// Near-kink detection between the two perturbed traces: a changed ReLU input
// with magnitude < 10h, or a flipped max-pool argmax, invalidates central
// differences at this coordinate.
bool crosses_kink(const NetworkSpec& spec, const ForwardTrace& plus, const ForwardTrace& minus,
                  double h) {
    const double band = 10.0 * h;
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        if (std::holds_alternative<ReluSpec>(spec.trunk[i])) {
            const Tensor& a = (i == 0) ? plus.input : plus.trunk[i - 1];
            const Tensor& b = (i == 0) ? minus.input : minus.trunk[i - 1];
            for (std::size_t j = 0; j < a.size(); ++j) {
                if (a[j] != b[j] && (std::abs(a[j]) < band || std::abs(b[j]) < band)) return true;
            }
        } else if (std::holds_alternative<MaxPoolSpec>(spec.trunk[i])) {
            if (plus.pool_argmax[i] != minus.pool_argmax[i]) return true;
        }
    }
    return false;
}

}  // namespace

double gradient_check(const NetworkSpec& spec, const Parameters& params, const Tensor& image,
                      const std::vector<int>& labels, double h, int sample_count,
                      std::uint64_t seed, RunMode mode) {
    if (h <= 0.0) throw std::invalid_argument("gradient_check: h must be > 0");
    if (sample_count < 1) throw std::invalid_argument("gradient_check: sample_count must be >= 1");

    const std::uint64_t fwd_seed = split_seed(seed, 1);
    ForwardTrace base = forward(spec, params, image, mode, fwd_seed);
    const Gradients analytic = backward(spec, params, base, multihead_loss_grads(base, labels));

    // Mutable copies walked by flat coordinate id: trunk params, heads, image.
    Parameters work = params;
    Tensor work_image = image;

    std::vector<std::pair<double*, const double*>> coords;  // (value slot, analytic grad)
    auto add_pair = [&](Tensor& v, const Tensor& g) {
        for (std::size_t i = 0; i < v.size(); ++i) coords.emplace_back(v.data() + i, g.data() + i);
    };
    for (std::size_t i = 0; i < work.trunk.size(); ++i) {
        if (!work.trunk[i]) continue;
        add_pair(work.trunk[i]->weight, analytic.trunk[i]->weight);
        add_pair(work.trunk[i]->bias, analytic.trunk[i]->bias);
    }
    for (std::size_t hh = 0; hh < work.heads.size(); ++hh) {
        add_pair(work.heads[hh].weight, analytic.heads[hh].weight);
        add_pair(work.heads[hh].bias, analytic.heads[hh].bias);
    }
    add_pair(work_image, analytic.input);

    Rng rng(split_seed(seed, 0));
    double max_rel = 0.0;
    for (int s = 0; s < sample_count; ++s) {
        const std::size_t ci = static_cast<std::size_t>(rng.uniform_below(coords.size()));
        double* slot = coords[ci].first;
        const double a = *coords[ci].second;
        const double orig = *slot;

        *slot = orig + h;
        ForwardTrace plus = forward(spec, work, work_image, mode, fwd_seed);
        const double lp = multihead_loss(plus, labels).total;
        *slot = orig - h;
        ForwardTrace minus = forward(spec, work, work_image, mode, fwd_seed);
        const double lm = multihead_loss(minus, labels).total;
        *slot = orig;

        if (crosses_kink(spec, plus, minus, h)) continue;
        const double n = (lp - lm) / (2.0 * h);
        const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

// --- checkpoint -----------------------------------------------------------------------

std::string checkpoint_to_bytes(const NetworkSpec& spec, const Parameters& params) {
    std::string out = "CGN1";
    put_u32(out, 1u);
    const std::string text = spec_to_text(spec);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& lp : params.trunk) {
        if (!lp) continue;
        append_tensor_blob(out, lp->weight);
        append_tensor_blob(out, lp->bias);
    }
    for (const auto& h : params.heads) {
        append_tensor_blob(out, h.weight);
        append_tensor_blob(out, h.bias);
    }
    return out;
}

std::pair<NetworkSpec, Parameters> checkpoint_from_bytes(const std::string& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || bytes.compare(0, 4, "CGN1") != 0)
        throw io_error("checkpoint: bad magic");
    pos = 4;
    const std::uint32_t version = get_u32(bytes, pos);
    if (version != 1) throw io_error("checkpoint: unsupported version");
    const std::uint32_t text_len = get_u32(bytes, pos);
    if (pos + text_len > bytes.size()) throw io_error("checkpoint: truncated spec text");
    NetworkSpec spec = spec_from_text(bytes.substr(pos, text_len));
    pos += text_len;

    Parameters params;
    params.trunk.resize(spec.trunk.size());
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        if (!layer_has_params(spec.trunk[i])) continue;
        LayerParams lp;
        lp.weight = read_tensor_blob(bytes, pos);
        lp.bias = read_tensor_blob(bytes, pos);
        require_finite(lp.weight, "checkpoint weight");
        require_finite(lp.bias, "checkpoint bias");
        params.trunk[i] = std::move(lp);
    }
    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        LayerParams lp;
        lp.weight = read_tensor_blob(bytes, pos);
        lp.bias = read_tensor_blob(bytes, pos);
        require_finite(lp.weight, "checkpoint head weight");
        require_finite(lp.bias, "checkpoint head bias");
        params.heads.push_back(std::move(lp));
    }
    if (pos != bytes.size()) throw io_error("checkpoint: trailing bytes");
    return {std::move(spec), std::move(params)};
}

void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                     const Parameters& params) {
    atomic_write_file(path, checkpoint_to_bytes(spec, params));
}

std::pair<NetworkSpec, Parameters> load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file(path));
}

}  // namespace facegen
