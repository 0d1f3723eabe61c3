#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "poly/common.hpp"
#include "poly/evaluation.hpp"

namespace poly::pipeline {

/// Per-stage exit codes; 0 is success and 2 a configuration error.
enum class Stage : int {
    discover = 10,
    match = 11,
    dedup = 12,
    saliency = 13,
    train = 14,
    outliers = 15,
    eval = 16,
    report = 17,
};

std::string_view stage_name(Stage stage);

struct PipelineConfig {
    std::string keyword;
    std::string corpus;
    std::string features;
    std::string feature_maps;
    std::string manifest;
    std::string test_feature_maps;
    std::string test_manifest;
    std::string output_dir;

    double tau = 0.75;
    std::size_t top_n = 10;
    std::size_t per_query_images = 5;
    double alpha = 0.6;
    double beta = 30.0;
    double lambda = 1.0;
    double theta_out = 0.3;
    std::string aggregator = "max";
    std::size_t bag_size = 5;
    double learning_rate = 0.001;
    std::size_t epochs = 100;
    std::size_t restarts = 16;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    /// Canonical JSON form, echoed into every report.
    std::string to_json() const;
};

/// Parses and range-checks a config document. Unknown keys are rejected and
/// out-of-range values name the offending key. Relative paths are resolved
/// against base_dir when it is non-empty.
PipelineConfig parse_config(const std::string& json_text, const std::string& base_dir = "");
PipelineConfig load_config_file(const std::string& path);

struct PipelineResult {
    int exit_code = 0;
    std::string failed_stage;
    std::string error;
    evaluation::EvalReport report;
    std::map<std::string, std::string> artifacts;  // name -> path

    bool ok() const { return exit_code == 0; }
};

/// Runs discover -> match -> dedup -> saliency -> train -> outlier removal ->
/// eval, each stage reading only declared inputs or files written by earlier
/// stages. Artifacts land in config.output_dir together with a manifest of
/// input hashes; report.json is byte-deterministic for a fixed config+seed.
PipelineResult run_pipeline(const PipelineConfig& config);

}  // namespace poly::pipeline
