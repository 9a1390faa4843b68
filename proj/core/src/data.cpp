#include "facegen/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "facegen/base.hpp"
#include "facegen/rng.hpp"

namespace facegen {

namespace {

bool valid_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
    return true;
}

}  // namespace

// --- schema ---------------------------------------------------------------

int AttributeSchema::attribute_count() const {
    int n = 0;
    for (const auto& g : groups) n += static_cast<int>(g.labels.size());
    return n;
}

int AttributeSchema::group_index(const std::string& name) const {
    for (std::size_t i = 0; i < groups.size(); ++i)
        if (groups[i].name == name) return static_cast<int>(i);
    return -1;
}

int AttributeSchema::label_index(int group, const std::string& label) const {
    const auto& labels = groups.at(static_cast<std::size_t>(group)).labels;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return static_cast<int>(i);
    return -1;
}

int AttributeSchema::attribute_index(const std::string& qualified) const {
    const auto dot = qualified.find('.');
    if (dot == std::string::npos)
        throw std::invalid_argument("attribute id must be qualified as group.label: " + qualified);
    const int g = group_index(qualified.substr(0, dot));
    if (g < 0) throw std::invalid_argument("unknown attribute group in: " + qualified);
    const int l = label_index(g, qualified.substr(dot + 1));
    if (l < 0) throw std::invalid_argument("unknown attribute label in: " + qualified);
    int base = 0;
    for (int i = 0; i < g; ++i) base += static_cast<int>(groups[static_cast<std::size_t>(i)].labels.size());
    return base + l;
}

std::string AttributeSchema::attribute_name(int attribute) const {
    const auto [g, l] = attribute_parts(attribute);
    return groups[static_cast<std::size_t>(g)].name + "." +
           groups[static_cast<std::size_t>(g)].labels[static_cast<std::size_t>(l)];
}

std::pair<int, int> AttributeSchema::attribute_parts(int attribute) const {
    int rest = attribute;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const int n = static_cast<int>(groups[g].labels.size());
        if (rest < n) return {static_cast<int>(g), rest};
        rest -= n;
    }
    throw std::invalid_argument("attribute id out of range: " + std::to_string(attribute));
}

AttributeSchema default_schema() {
    AttributeSchema s;
    s.groups = {
        {"hair_color", {"black", "blond", "brown"}},
        {"skin_tone", {"light", "dark"}},
        {"eyewear", {"none", "glasses"}},
        {"expression", {"neutral", "smiling"}},
        {"face_shape", {"round", "oval"}},
        {"accessory", {"none", "hat"}},
    };
    return s;
}

namespace {

void validate_schema(const AttributeSchema& schema) {
    if (schema.groups.empty()) throw std::invalid_argument("schema: no groups");
    for (const auto& g : schema.groups) {
        if (!valid_token(g.name)) throw std::invalid_argument("schema: bad group name: " + g.name);
        if (g.labels.size() < 2)
            throw std::invalid_argument("schema: group needs at least two labels: " + g.name);
        for (const auto& l : g.labels)
            if (!valid_token(l))
                throw std::invalid_argument("schema: bad label name in " + g.name + ": " + l);
        for (std::size_t i = 0; i < g.labels.size(); ++i)
            for (std::size_t j = i + 1; j < g.labels.size(); ++j)
                if (g.labels[i] == g.labels[j])
                    throw std::invalid_argument("schema: duplicate label in " + g.name);
    }
    for (std::size_t i = 0; i < schema.groups.size(); ++i)
        for (std::size_t j = i + 1; j < schema.groups.size(); ++j)
            if (schema.groups[i].name == schema.groups[j].name)
                throw std::invalid_argument("schema: duplicate group name: " + schema.groups[i].name);
}

}  // namespace

std::string schema_to_text(const AttributeSchema& schema) {
    validate_schema(schema);
    std::string out;
    for (const auto& g : schema.groups) {
        out += "group " + g.name;
        for (const auto& l : g.labels) out += " " + l;
        out += "\n";
    }
    return out;
}

AttributeSchema schema_from_text(const std::string& text) {
    AttributeSchema schema;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        std::istringstream ls(line);
        std::vector<std::string> tok;
        std::string t;
        while (ls >> t) tok.push_back(t);
        if (tok.empty()) continue;
        if (tok[0] != "group" || tok.size() < 4)
            throw io_error("schema: expected 'group <name> <label> <label> ...', got: " + line);
        AttributeGroup g;
        g.name = tok[1];
        g.labels.assign(tok.begin() + 2, tok.end());
        schema.groups.push_back(std::move(g));
    }
    validate_schema(schema);
    return schema;
}

void save_schema(const std::filesystem::path& path, const AttributeSchema& schema) {
    atomic_write_file(path, schema_to_text(schema));
}

AttributeSchema load_schema(const std::filesystem::path& path) {
    return schema_from_text(read_file(path));
}

// --- sprite renderer --------------------------------------------------------
//
// Faces are drawn back to front: background, skin ellipse, hair cap, hat,
// eyes, glasses, mouth, then pixel noise. Every random draw (geometry and
// noise) happens in a fixed order that does not depend on the labels, so two
// renders differing in one attribute differ only where that feature paints.

namespace {

struct Rgb {
    double r, g, b;
};

void put_px(Tensor& img, int y, int x, const Rgb& c) {
    const int h = static_cast<int>(img.shape()[1]);
    const int w = static_cast<int>(img.shape()[2]);
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    img.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = c.r;
    img.at(1, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = c.g;
    img.at(2, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = c.b;
}

void fill_rect(Tensor& img, double x0, double x1, double y0, double y1, const Rgb& c) {
    for (int y = static_cast<int>(std::floor(y0)); y <= static_cast<int>(std::ceil(y1)); ++y) {
        const double py = y + 0.5;
        if (py < y0 || py > y1) continue;
        for (int x = static_cast<int>(std::floor(x0)); x <= static_cast<int>(std::ceil(x1)); ++x) {
            const double px = x + 0.5;
            if (px < x0 || px > x1) continue;
            put_px(img, y, x, c);
        }
    }
}

void fill_circle(Tensor& img, double cx, double cy, double r, const Rgb& c) {
    for (int y = static_cast<int>(std::floor(cy - r - 1)); y <= static_cast<int>(std::ceil(cy + r + 1)); ++y) {
        for (int x = static_cast<int>(std::floor(cx - r - 1)); x <= static_cast<int>(std::ceil(cx + r + 1)); ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r) put_px(img, y, x, c);
        }
    }
}

void fill_ring(Tensor& img, double cx, double cy, double r, double thick, const Rgb& c) {
    const double ro = r + thick;
    for (int y = static_cast<int>(std::floor(cy - ro - 1)); y <= static_cast<int>(std::ceil(cy + ro + 1)); ++y) {
        for (int x = static_cast<int>(std::floor(cx - ro - 1)); x <= static_cast<int>(std::ceil(cx + ro + 1)); ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (std::abs(d - r) <= thick) put_px(img, y, x, c);
        }
    }
}

double jitter_draw(Rng& rng, double amp) { return (rng.uniform() * 2.0 - 1.0) * amp; }

int concrete_label(const AttributeSchema& schema, const std::vector<int>& labels,
                   const char* group) {
    const int g = schema.group_index(group);
    if (g < 0) return 0;  // custom schema without this group: feature defaults to state 0
    return labels[static_cast<std::size_t>(g)];
}

}  // namespace

Tensor render_face(const AttributeSchema& schema, const std::vector<int>& labels, int width,
                   int height, std::uint64_t geometry_seed, std::uint64_t noise_seed) {
    if (width < 16 || height < 16)
        throw std::invalid_argument("render_face: image size too small to render features (min 16)");
    if (labels.size() != schema.groups.size())
        throw std::invalid_argument("render_face: label count does not match schema");
    for (std::size_t g = 0; g < labels.size(); ++g) {
        if (labels[g] < 0 || labels[g] >= static_cast<int>(schema.groups[g].labels.size()))
            throw std::invalid_argument("render_face: labels must be concrete class indices");
    }

    // Fixed-order geometry draws, independent of the labels.
    Rng geo(geometry_seed);
    const double bgj_r = jitter_draw(geo, 0.05), bgj_g = jitter_draw(geo, 0.05),
                 bgj_b = jitter_draw(geo, 0.05);
    const double cxj = jitter_draw(geo, 1.0), cyj = jitter_draw(geo, 1.0);
    const double rxj = jitter_draw(geo, 1.0), ryj = jitter_draw(geo, 1.0);
    const double skinj = jitter_draw(geo, 0.03), hairj = jitter_draw(geo, 0.04);
    const double eyexj = jitter_draw(geo, 0.5), eyeyj = jitter_draw(geo, 0.8);
    const double mouthj = jitter_draw(geo, 0.4), hatj = jitter_draw(geo, 0.05);
    const double brightj = jitter_draw(geo, 0.04);

    const int hair = concrete_label(schema, labels, "hair_color");
    const int skin = concrete_label(schema, labels, "skin_tone");
    const int eyewear = concrete_label(schema, labels, "eyewear");
    const int expression = concrete_label(schema, labels, "expression");
    const int shape = concrete_label(schema, labels, "face_shape");
    const int accessory = concrete_label(schema, labels, "accessory");

    const double sx = width / 32.0, sy = height / 32.0, s = std::min(sx, sy);
    const double cx = (16.0 + cxj) * sx;
    const double cy = (16.5 + cyj) * sy;
    const double rx = (shape == 0 ? 10.5 + rxj : 8.0 + rxj) * sx;
    const double ry = (shape == 0 ? 10.0 + ryj : 12.0 + ryj) * sy;

    const Rgb bg = {0.75 + bgj_r, 0.78 + bgj_g, 0.82 + bgj_b};
    const Rgb skin_c = skin == 0 ? Rgb{0.94 + skinj, 0.78 + skinj, 0.66 + skinj}
                                 : Rgb{0.52 + skinj, 0.36 + skinj, 0.24 + skinj};
    const Rgb hair_c = hair == 0   ? Rgb{0.10 + hairj, 0.09 + hairj, 0.08 + hairj}
                       : hair == 1 ? Rgb{0.82 + hairj, 0.70 + hairj, 0.38 + hairj}
                                   : Rgb{0.42 + hairj, 0.26 + hairj, 0.14 + hairj};
    const Rgb sclera = {0.96, 0.96, 0.96};
    const Rgb pupil = {0.06, 0.06, 0.08};
    const Rgb frame = {0.12, 0.12, 0.14};
    const Rgb mouth_c = {0.62, 0.18, 0.18};
    const Rgb hat_c = {0.22 + hatj, 0.28 + hatj, 0.55 + hatj};

    Tensor img = Tensor::zeros({3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});

    // background + face + hair cap in one pixel pass
    const double hairline = cy - 0.35 * ry;
    for (int y = 0; y < height; ++y) {
        const double py = y + 0.5;
        for (int x = 0; x < width; ++x) {
            const double px = x + 0.5;
            const double fx = (px - cx) / rx, fy = (py - cy) / ry;
            const double hx = (px - cx) / (rx * 1.06), hy = (py - cy) / (ry * 1.06);
            if (hx * hx + hy * hy <= 1.0 && py < hairline) {
                put_px(img, y, x, hair_c);
            } else if (fx * fx + fy * fy <= 1.0) {
                put_px(img, y, x, skin_c);
            } else {
                put_px(img, y, x, bg);
            }
        }
    }

    if (accessory == 1) {  // hat: crown block plus a wider brim; hair stays visible below
        fill_rect(img, cx - 0.72 * rx, cx + 0.72 * rx, cy - ry - 2.5 * sy, cy - ry + 1.8 * sy, hat_c);
        fill_rect(img, cx - (0.95 * rx + 1.8 * sx), cx + (0.95 * rx + 1.8 * sx),
                  cy - ry + 1.0 * sy, cy - ry + 2.2 * sy, hat_c);
    }

    const double exo = 0.40 * rx + eyexj * sx;
    const double ey = cy - 0.14 * ry + eyeyj * sy;
    for (int side = -1; side <= 1; side += 2) {
        const double ex = cx + side * exo;
        fill_circle(img, ex, ey, 1.9 * s, sclera);
        fill_circle(img, ex, ey, 0.9 * s, pupil);
    }

    if (eyewear == 1) {  // glasses: two rings, a bridge, and short temple arms
        const double rg = 2.9 * s;
        for (int side = -1; side <= 1; side += 2)
            fill_ring(img, cx + side * exo, ey, rg, 0.75 * s, frame);
        fill_rect(img, cx - exo + rg, cx + exo - rg, ey - 0.5 * s, ey + 0.5 * s, frame);
        fill_rect(img, cx - rx + 0.8 * s, cx - exo - rg, ey - 0.5 * s, ey + 0.5 * s, frame);
        fill_rect(img, cx + exo + rg, cx + rx - 0.8 * s, ey - 0.5 * s, ey + 0.5 * s, frame);
    }

    {  // mouth: straight bar when neutral, corners-up parabola when smiling.
        // A smile both curves and widens the mouth. The displacement and the
        // extra width must outlive two rounds of 2x2 pooling at the 32x32
        // reference scale, so both span several pixels.
        const double mw = (3.2 + mouthj) * sx * (expression == 1 ? 1.45 : 1.0);
        const double my = cy + 0.45 * ry;
        const double kk = 4.5 * sy;
        for (int x = static_cast<int>(std::floor(cx - mw - 1)); x <= static_cast<int>(std::ceil(cx + mw + 1)); ++x) {
            const double px = x + 0.5;
            const double dxn = (px - cx) / mw;
            if (std::abs(dxn) > 1.0) continue;
            const double yc = expression == 1 ? my + kk * (1.0 - dxn * dxn) - 0.5 * kk : my;
            // Stroke thickness is measured perpendicular to the curve so the
            // arc stays connected where the parabola is steep.
            const double slope = expression == 1 ? -2.0 * kk * dxn / mw : 0.0;
            const double vtol = 0.7 * sy * std::sqrt(1.0 + slope * slope);
            for (int y = static_cast<int>(std::floor(yc - vtol - 1)); y <= static_cast<int>(std::ceil(yc + vtol + 1)); ++y) {
                if (std::abs(y + 0.5 - yc) <= vtol) put_px(img, y, x, mouth_c);
            }
        }
    }

    // brightness jitter, pixel noise, clamp
    Rng noise(noise_seed);
    const std::size_t plane = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = c * plane + i;
            img[idx] = std::clamp(img[idx] + brightj + jitter_draw(noise, 0.02), 0.0, 1.0);
        }
    }
    return img;
}

// --- generator -----------------------------------------------------------------

std::vector<std::vector<double>> default_class_ratios(const AttributeSchema& schema) {
    // Deliberately imbalanced so no head's majority class dominates; unknown
    // groups fall back to uniform.
    std::vector<std::vector<double>> out;
    for (const auto& g : schema.groups) {
        if (g.name == "hair_color" && g.labels.size() == 3) {
            out.push_back({0.4, 0.3, 0.3});
        } else if ((g.name == "skin_tone" || g.name == "eyewear" || g.name == "accessory") &&
                   g.labels.size() == 2) {
            out.push_back({0.55, 0.45});
        } else {
            out.push_back(std::vector<double>(g.labels.size(), 1.0 / static_cast<double>(g.labels.size())));
        }
    }
    return out;
}

Dataset generate_synthetic_dataset(const AttributeSchema& schema, const GeneratorConfig& cfg) {
    validate_schema(schema);
    if (cfg.count < 1) throw std::invalid_argument("generate_synthetic_dataset: count must be >= 1");
    if (cfg.width < 16 || cfg.height < 16)
        throw std::invalid_argument("generate_synthetic_dataset: image size must be at least 16");
    if (!(cfg.unlabeled_fraction >= 0.0 && cfg.unlabeled_fraction <= 1.0))
        throw std::invalid_argument("generate_synthetic_dataset: unlabeled_fraction must be in [0,1]");
    if (!(cfg.ratio_skew >= 0.0 && cfg.ratio_skew < 1.0))
        throw std::invalid_argument("generate_synthetic_dataset: ratio_skew must be in [0,1)");

    auto ratios = cfg.class_ratios.empty() ? default_class_ratios(schema) : cfg.class_ratios;
    if (ratios.size() != schema.groups.size())
        throw std::invalid_argument("generate_synthetic_dataset: class_ratios group count mismatch");
    for (std::size_t g = 0; g < ratios.size(); ++g) {
        if (ratios[g].size() != schema.groups[g].labels.size())
            throw std::invalid_argument("generate_synthetic_dataset: class_ratios size mismatch for group " +
                                        schema.groups[g].name);
        double sum = 0.0;
        for (double r : ratios[g]) {
            if (r < 0.0) throw std::invalid_argument("generate_synthetic_dataset: negative class ratio");
            sum += r;
        }
        if (sum <= 0.0) throw std::invalid_argument("generate_synthetic_dataset: class ratios sum to zero");
        for (double& r : ratios[g]) r /= sum;
        // skew pushes probability mass toward the group's first label
        ratios[g][0] = (1.0 - cfg.ratio_skew) * ratios[g][0] + cfg.ratio_skew;
        for (std::size_t k = 1; k < ratios[g].size(); ++k) ratios[g][k] *= 1.0 - cfg.ratio_skew;
    }

    Dataset ds;
    ds.schema = schema;
    ds.items.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        const std::uint64_t base = static_cast<std::uint64_t>(i) * 3;
        Rng label_rng(split_seed(cfg.seed, base));
        std::vector<int> truth(schema.groups.size(), 0);
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            const double u = label_rng.uniform();
            double acc = 0.0;
            int pick = static_cast<int>(ratios[g].size()) - 1;
            for (std::size_t k = 0; k < ratios[g].size(); ++k) {
                acc += ratios[g][k];
                if (u < acc) {
                    pick = static_cast<int>(k);
                    break;
                }
            }
            truth[g] = pick;
        }
        LabeledImage item;
        item.image = render_face(schema, truth, cfg.width, cfg.height, split_seed(cfg.seed, base + 1),
                                 split_seed(cfg.seed, base + 2));
        item.labels = truth;
        for (std::size_t g = 0; g < schema.groups.size(); ++g)
            if (label_rng.uniform() < cfg.unlabeled_fraction) item.labels[g] = kUnlabeled;
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
        item.name = name;
        ds.items.push_back(std::move(item));
    }
    return ds;
}

Tensor compute_mean_image(const Dataset& dataset) {
    if (dataset.items.empty()) throw std::invalid_argument("compute_mean_image: empty dataset");
    Tensor mean = Tensor::zeros(dataset.items[0].image.shape());
    for (const auto& item : dataset.items) {
        if (!item.image.same_shape(mean))
            throw std::invalid_argument("compute_mean_image: images differ in shape");
        add_in_place(mean, item.image);
    }
    const double inv = 1.0 / static_cast<double>(dataset.items.size());
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] *= inv;
    return mean;
}

std::vector<PositiveSet> select_positive_sets(const Dataset& dataset, int per_attribute,
                                              std::uint64_t seed) {
    if (per_attribute < 2) throw std::invalid_argument("select_positive_sets: per_attribute must be >= 2");
    std::vector<PositiveSet> out;
    int flat = 0;
    for (std::size_t g = 0; g < dataset.schema.groups.size(); ++g) {
        for (std::size_t l = 0; l < dataset.schema.groups[g].labels.size(); ++l, ++flat) {
            std::vector<std::size_t> positives;
            for (std::size_t i = 0; i < dataset.items.size(); ++i)
                if (dataset.items[i].labels[g] == static_cast<int>(l)) positives.push_back(i);
            PositiveSet set;
            set.shortfall = static_cast<int>(positives.size()) < per_attribute;
            if (!set.shortfall) {
                Rng rng(split_seed(seed, static_cast<std::uint64_t>(flat)));
                rng.shuffle(positives);
                positives.resize(static_cast<std::size_t>(per_attribute));
                std::sort(positives.begin(), positives.end());
            }
            set.indices = std::move(positives);
            out.push_back(std::move(set));
        }
    }
    return out;
}

// --- PPM codec --------------------------------------------------------------------

std::string ppm_to_bytes(const Tensor& image) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw std::invalid_argument("ppm_to_bytes: expected [3,H,W] image");
    const std::size_t h = image.shape()[1], w = image.shape()[2];
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + 3 * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                const int byte = std::min(255, static_cast<int>(std::floor(v * 255.0 + 0.5)));
                out.push_back(static_cast<char>(static_cast<unsigned char>(byte)));
            }
        }
    }
    return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(const std::string& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const char c = bytes[pos];
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw io_error("ppm: truncated header");
    return bytes.substr(start, pos - start);
}

}  // namespace

Tensor ppm_from_bytes(const std::string& bytes) {
    std::size_t pos = 0;
    if (ppm_token(bytes, pos) != "P6") throw io_error("ppm: not a binary P6 file");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoull(ppm_token(bytes, pos));
        h = std::stoull(ppm_token(bytes, pos));
        maxval = std::stoull(ppm_token(bytes, pos));
    } catch (const std::exception&) {
        throw io_error("ppm: malformed header");
    }
    if (w < 1 || h < 1) throw io_error("ppm: bad dimensions");
    if (maxval != 255) throw io_error("ppm: only maxval 255 supported");
    ++pos;  // single whitespace byte after maxval
    if (pos + 3 * w * h > bytes.size()) throw io_error("ppm: truncated pixel data");
    Tensor img = Tensor::zeros({3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const auto byte = static_cast<unsigned char>(bytes[pos++]);
                img.at(c, y, x) = static_cast<double>(byte) / 255.0;
            }
        }
    }
    return img;
}

void save_ppm(const std::filesystem::path& path, const Tensor& image) {
    atomic_write_file(path, ppm_to_bytes(image));
}

Tensor load_ppm(const std::filesystem::path& path) { return ppm_from_bytes(read_file(path)); }

// --- labels CSV -----------------------------------------------------------------------

std::string labels_to_csv(const AttributeSchema& schema, const std::vector<LabeledImage>& items) {
    std::string out = "image";
    for (const auto& g : schema.groups) out += "," + g.name;
    out += "\n";
    for (const auto& item : items) {
        out += item.name;
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            out += ",";
            const int l = item.labels[g];
            if (l != kUnlabeled) out += schema.groups[g].labels[static_cast<std::size_t>(l)];
        }
        out += "\n";
    }
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

}  // namespace

std::vector<LabelRow> labels_from_csv(const AttributeSchema& schema, const std::string& csv) {
    std::istringstream ss(csv);
    std::string line;
    if (!std::getline(ss, line)) throw io_error("labels csv: empty file");
    const auto header = split_csv_line(line);
    if (header.size() != schema.groups.size() + 1)
        throw io_error("labels csv: header column count does not match schema");
    for (std::size_t g = 0; g < schema.groups.size(); ++g) {
        if (header[g + 1] != schema.groups[g].name)
            throw io_error("labels csv: unknown group column '" + header[g + 1] + "' (expected '" +
                           schema.groups[g].name + "')");
    }
    std::vector<LabelRow> rows;
    int lineno = 1;
    while (std::getline(ss, line)) {
        ++lineno;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != schema.groups.size() + 1)
            throw io_error("labels csv: row " + std::to_string(lineno) + " has " +
                           std::to_string(fields.size()) + " columns, expected " +
                           std::to_string(schema.groups.size() + 1));
        LabelRow row;
        row.name = fields[0];
        if (row.name.empty())
            throw io_error("labels csv: row " + std::to_string(lineno) + " has empty image name");
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            const std::string& cell = fields[g + 1];
            if (cell.empty()) {
                row.labels.push_back(kUnlabeled);
                continue;
            }
            const int l = schema.label_index(static_cast<int>(g), cell);
            if (l < 0)
                throw io_error("labels csv: row " + std::to_string(lineno) + " (" + row.name +
                               "): unknown label '" + cell + "' for group '" +
                               schema.groups[g].name + "'");
            row.labels.push_back(l);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// --- dataset directory --------------------------------------------------------------------

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    if (dataset.items.empty()) throw std::invalid_argument("save_dataset: empty dataset");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("save_dataset: cannot create directory " + dir.string());
    save_schema(dir / "schema.txt", dataset.schema);
    atomic_write_file(dir / "labels.csv", labels_to_csv(dataset.schema, dataset.items));
    for (const auto& item : dataset.items) save_ppm(dir / item.name, item.image);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    ds.schema = load_schema(dir / "schema.txt");
    const auto rows = labels_from_csv(ds.schema, read_file(dir / "labels.csv"));
    if (rows.empty()) throw io_error("load_dataset: no rows in labels.csv");
    for (const auto& row : rows) {
        LabeledImage item;
        item.name = row.name;
        item.labels = row.labels;
        item.image = load_ppm(dir / row.name);
        if (!ds.items.empty() && !item.image.same_shape(ds.items[0].image))
            throw io_error("load_dataset: image shape mismatch at " + row.name);
        ds.items.push_back(std::move(item));
    }
    return ds;
}

}  // namespace facegen
