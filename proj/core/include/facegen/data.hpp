#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facegen/tensor.hpp"

namespace facegen {

// --- attribute schema -------------------------------------------------------
//
// A schema is an ordered list of attribute groups; each group is an ordered
// list of label names. Exactly one label per group applies to any face, so a
// face is described by one label index per group (or kUnlabeled). A flat
// "attribute id" enumerates every (group, label) pair group-major; its
// qualified name is "<group>.<label>" so labels like "none" stay unambiguous
// across groups.

struct AttributeGroup {
    std::string name;
    std::vector<std::string> labels;
};

struct AttributeSchema {
    std::vector<AttributeGroup> groups;

    int group_count() const { return static_cast<int>(groups.size()); }
    int attribute_count() const;
    int group_index(const std::string& name) const;              // -1 if absent
    int label_index(int group, const std::string& label) const;  // -1 if absent
    int attribute_index(const std::string& qualified) const;     // throws if absent
    std::string attribute_name(int attribute) const;             // "<group>.<label>"
    std::pair<int, int> attribute_parts(int attribute) const;    // (group, label)
};

AttributeSchema default_schema();

std::string schema_to_text(const AttributeSchema& schema);
AttributeSchema schema_from_text(const std::string& text);
void save_schema(const std::filesystem::path& path, const AttributeSchema& schema);
AttributeSchema load_schema(const std::filesystem::path& path);

// --- dataset ------------------------------------------------------------------

struct LabeledImage {
    std::string name;         // file name inside the dataset directory
    Tensor image;             // [3, H, W], values in [0, 1]
    std::vector<int> labels;  // one entry per schema group; kUnlabeled allowed
};

struct Dataset {
    AttributeSchema schema;
    std::vector<LabeledImage> items;
    std::string split = "train";  // in-memory tag only; not persisted
};

// --- synthetic face generator ----------------------------------------------------

struct GeneratorConfig {
    int width = 32;
    int height = 32;
    int count = 0;
    std::uint64_t seed = 0;
    double unlabeled_fraction = 0.10;  // per-group chance of dropping the label
    double ratio_skew = 0.0;           // 0 = configured ratios, ->1 pushes mass to each group's first label
    // Per-group class ratios; empty means default_class_ratios(schema). Rows are
    // normalized, so they only need to be non-negative with a positive sum.
    std::vector<std::vector<double>> class_ratios;
};

std::vector<std::vector<double>> default_class_ratios(const AttributeSchema& schema);

// Draws one face sprite. Geometry jitter (position, radii, tints) comes from
// geometry_seed, pixel noise from noise_seed; both draw a fixed sequence
// independent of `labels`, so toggling one attribute repaints only that
// feature's region.
Tensor render_face(const AttributeSchema& schema, const std::vector<int>& labels, int width,
                   int height, std::uint64_t geometry_seed, std::uint64_t noise_seed);

Dataset generate_synthetic_dataset(const AttributeSchema& schema, const GeneratorConfig& cfg);

Tensor compute_mean_image(const Dataset& dataset);

// --- positive-example selection -----------------------------------------------------

struct PositiveSet {
    std::vector<std::size_t> indices;  // ascending dataset indices; empty = no positives
    bool shortfall = false;            // fewer positives than requested
};

// For every flat attribute id, picks up to per_attribute images whose group
// label matches it (all of them when fewer exist), sampling without
// replacement. per_attribute must be >= 2.
std::vector<PositiveSet> select_positive_sets(const Dataset& dataset, int per_attribute,
                                              std::uint64_t seed);

// --- file formats ----------------------------------------------------------------------

// Binary PPM (P6, maxval 255). Channels quantize as floor(v * 255 + 0.5).
std::string ppm_to_bytes(const Tensor& image);
Tensor ppm_from_bytes(const std::string& bytes);
void save_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor load_ppm(const std::filesystem::path& path);

// labels.csv: header "image,<group>,<group>,..."; one row per item with label
// names; an empty cell means unlabeled.
struct LabelRow {
    std::string name;
    std::vector<int> labels;
};
std::string labels_to_csv(const AttributeSchema& schema, const std::vector<LabeledImage>& items);
std::vector<LabelRow> labels_from_csv(const AttributeSchema& schema, const std::string& csv);

// Dataset directory layout: schema.txt, labels.csv, img_00000.ppm, ...
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace facegen
