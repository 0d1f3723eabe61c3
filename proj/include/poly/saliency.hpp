#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "poly/common.hpp"
#include "poly/feature_store.hpp"

namespace poly::saliency {

/// Linear classification head over global-average-pooled conv features;
/// its per-class channel weights double as the saliency weighting.
struct GapHead {
    std::vector<std::vector<double>> weights;  // class_count x channel_count
    std::vector<double> bias;                  // class_count
    std::size_t class_count = 0;
    std::size_t channel_count = 0;
};

struct GapHyper {
    double learning_rate = 0.05;
    std::size_t epochs = 60;
    double l2 = 1e-4;
    std::uint64_t seed = 1;
};

struct GapTrainResult {
    GapHead head;
    std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

struct GapGradient {
    std::vector<std::vector<double>> weights;
    std::vector<double> bias;
};

/// Height x width grid of doubles.
struct Grid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> cells;

    double& at(std::size_t y, std::size_t x) { return cells[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
};

struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> cells;

    bool at(std::size_t y, std::size_t x) const { return cells[y * width + x] != 0; }
    void set(std::size_t y, std::size_t x, bool v) { cells[y * width + x] = v ? 1 : 0; }
};

/// Inclusive cell-coordinate box.
struct BBox {
    std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    bool operator==(const BBox&) const = default;
};

struct SaliencyResult {
    std::string image_id;
    std::size_t class_index = 0;
    Grid map;
    double threshold = 0.0;  // in normalized [0, 1] units
    Mask mask;
    BBox bbox;
    std::vector<double> instance_feature;
};

/// Global average pool of one map: per-channel spatial mean.
std::vector<double> gap_pool(const feature_store::FeatureMapBank& bank, const std::string& image_id);

/// Fits the linear softmax head on GAP-pooled maps with seeded SGD.
/// Labels map image_id -> class index and every labeled id must resolve.
GapTrainResult train_gap_head(const feature_store::FeatureMapBank& maps,
                              const std::map<std::string, std::size_t>& labels,
                              std::size_t class_count, const GapHyper& hyper);

/// Mean cross-entropy of the head over the labeled maps.
double gap_head_loss(const GapHead& head, const feature_store::FeatureMapBank& maps,
                     const std::map<std::string, std::size_t>& labels);

/// Cross-entropy of one pooled sample under the head.
double gap_sample_loss(const GapHead& head, std::span<const double> pooled, std::size_t label);

/// Analytic cross-entropy gradient of one pooled sample: the logit gradient
/// is probabilities minus the one-hot label, chained into weights and bias.
/// Training applies exactly this plus the L2 term.
GapGradient gap_head_gradient(const GapHead& head, std::span<const double> pooled,
                              std::size_t label);

std::vector<double> gap_head_probabilities(const GapHead& head, std::span<const double> pooled);
std::size_t gap_head_argmax(const GapHead& head, std::span<const double> pooled);

/// Weighted channel sum of a conv map under one class's head weights; the
/// spatially constant bias is excluded.
Grid compute_saliency_map(const feature_store::FeatureMapBank& maps, const std::string& image_id,
                          const GapHead& head, std::size_t class_index);

/// Min-max normalizes the grid, quantizes into 256 bins and returns the bin
/// edge (k/256 in normalized units) maximizing between-class variance.
/// Ties resolve to the lowest threshold. Constant grids are an error.
double otsu_threshold(const Grid& map);

/// Cells at or above the threshold after the same min-max normalization.
Mask binarize(const Grid& map, double threshold);

struct ComponentInfo {
    std::size_t size = 0;
    BBox bbox;
};

/// Largest 8-connected true component; ties resolve to the component
/// containing the lexicographically smallest (y, x) cell.
ComponentInfo largest_component(const Mask& mask);

/// Tight box of the largest component (see largest_component).
BBox largest_component_bbox(const Mask& mask);

/// Per-channel mean over the inclusive box.
std::vector<double> extract_instance(const feature_store::FeatureMapBank& maps,
                                     const std::string& image_id, const BBox& bbox);

/// Full per-image chain: saliency map for the image's class (or the head's
/// argmax when absent from `labels`), OTSU binarization, largest component
/// box, ROI-pooled instance feature.
SaliencyResult extract_saliency_instance(const feature_store::FeatureMapBank& maps,
                                         const std::string& image_id, const GapHead& head,
                                         const std::map<std::string, std::size_t>& labels);

/// Batch over every map in the bank; parallel over images.
std::vector<SaliencyResult> extract_all(const feature_store::FeatureMapBank& maps,
                                        const GapHead& head,
                                        const std::map<std::string, std::size_t>& labels,
                                        unsigned threads = 1);

}  // namespace poly::saliency
