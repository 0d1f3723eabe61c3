#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "poly/common.hpp"
#include "poly/feature_store.hpp"

namespace poly::evaluation {

/// Macro-averaged classification report. `aca` is the unweighted mean of
/// per-class accuracies over classes with at least one test sample; micro
/// accuracy (plain fraction correct) rides along as an auxiliary field.
struct EvalReport {
    double aca = 0.0;
    double micro_accuracy = 0.0;
    std::map<int, double> per_class_accuracy;
    std::vector<int> class_ids;                      // confusion axis, sorted
    std::vector<std::vector<std::uint64_t>> confusion;  // row = true, col = predicted
    std::map<int, std::string> class_names;
    std::string config_echo;  // JSON text of the producing run's configuration
    std::uint64_t runtime_ms = 0;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

/// Predictions outside the label set count as wrong (they get their own
/// confusion rows with zero test samples and do not enter the macro mean).
EvalReport average_classification_accuracy(const std::vector<int>& predictions,
                                           const std::vector<int>& labels);

struct SyntheticSpec {
    std::size_t senses = 4;
    std::size_t instances_per_sense = 100;
    std::size_t feature_dim = 64;
    double separation = 6.0;        // pairwise center distance, sigma = 1 units
    double outlier_fraction = 0.1;  // share of each sense's instances
    std::uint64_t seed = 1;

    // layout knobs with fixed defaults
    std::size_t map_height = 8;
    std::size_t map_width = 8;
    std::size_t pool_per_sense = 10;  // keyword-pool images
    std::size_t test_per_sense = 25;
    double outlier_box_halfwidth = 0.15;  // uniform scatter box, per coordinate
    double blob_amplitude = 0.1;          // saliency blob height in the conv maps
    std::string keyword = "poly";
};

/// Everything the pipeline needs for a desk-scale benchmark run: Gaussian
/// sense clusters around mutually equidistant centers, uniformly scattered
/// planted outliers, conv-map surrogates whose GAP equals the feature vector,
/// a keyword pool, a held-out test set and the planted ground truth.
struct SyntheticDataset {
    SyntheticSpec spec;
    std::vector<std::string> query_texts;  // one per sense
    feature_store::FeatureBank features;   // pool + query images
    feature_store::FeatureMapBank maps;
    std::vector<feature_store::ImageRecord> manifest;
    feature_store::FeatureBank test_features;
    feature_store::FeatureMapBank test_maps;
    std::vector<feature_store::ImageRecord> test_manifest;
    std::string corpus_tsv;
    std::vector<std::string> planted_outliers;      // image ids
    std::map<std::string, int> sense_of;            // image id -> sense
    std::vector<std::vector<double>> sense_centers;
};

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes banks, manifests, corpus, ground truth and a ready-to-run pipeline
/// config under `directory`. Returns the config path.
std::string write_synthetic_dataset(const SyntheticDataset& dataset, const std::string& directory);

struct AblationCell {
    std::string aggregator;
    std::size_t instances_per_sense = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
};

struct AblationRow {
    AblationCell cell;
    double aca = 0.0;
    std::uint64_t runtime_ms = 0;
    std::string error;  // empty on success

    bool ok() const { return error.empty(); }
};

struct AblationGrid {
    std::vector<std::string> aggregators;
    std::vector<std::size_t> instances_per_sense;
    std::vector<double> learning_rates;
    std::uint64_t seed = 1;
};

/// Runs `runner` over the Cartesian grid, recording per-cell errors without
/// aborting the sweep. Rows keep grid order regardless of runtime.
std::vector<AblationRow> run_ablation(const AblationGrid& grid,
                                      const std::function<EvalReport(const AblationCell&)>& runner);

std::string ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace poly::evaluation
