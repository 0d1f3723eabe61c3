#include "poly/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace poly::evaluation {

std::string EvalReport::to_json() const {
    nlohmann::json doc;
    doc["aca"] = aca;
    doc["micro_accuracy"] = micro_accuracy;
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, acc] : per_class_accuracy) per_class[std::to_string(cls)] = acc;
    doc["per_class_accuracy"] = per_class;
    doc["class_ids"] = class_ids;
    doc["confusion"] = confusion;
    nlohmann::json names = nlohmann::json::object();
    for (const auto& [cls, name] : class_names) names[std::to_string(cls)] = name;
    doc["class_names"] = names;
    if (!config_echo.empty()) {
        doc["config_echo"] = nlohmann::json::parse(config_echo);
    } else {
        doc["config_echo"] = nullptr;
    }
    doc["runtime_ms"] = runtime_ms;
    return doc.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("report JSON: ") + e.what());
    }
    EvalReport report;
    try {
        report.aca = doc.at("aca").get<double>();
        report.micro_accuracy = doc.at("micro_accuracy").get<double>();
        for (const auto& [key, value] : doc.at("per_class_accuracy").items()) {
            report.per_class_accuracy[std::stoi(key)] = value.get<double>();
        }
        report.class_ids = doc.at("class_ids").get<std::vector<int>>();
        report.confusion = doc.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
        for (const auto& [key, value] : doc.at("class_names").items()) {
            report.class_names[std::stoi(key)] = value.get<std::string>();
        }
        if (!doc.at("config_echo").is_null()) {
            report.config_echo = doc["config_echo"].dump();
        }
        report.runtime_ms = doc.at("runtime_ms").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("report JSON: ") + e.what());
    }
    return report;
}

EvalReport average_classification_accuracy(const std::vector<int>& predictions,
                                           const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "predictions and labels differ in length");
    }
    if (labels.empty()) {
        throw Error(ErrorCode::insufficient_data, "no samples to evaluate");
    }

    std::set<int> class_set(labels.begin(), labels.end());
    class_set.insert(predictions.begin(), predictions.end());

    EvalReport report;
    report.class_ids.assign(class_set.begin(), class_set.end());
    std::map<int, std::size_t> index_of;
    for (std::size_t i = 0; i < report.class_ids.size(); ++i) {
        index_of[report.class_ids[i]] = i;
    }
    report.confusion.assign(report.class_ids.size(),
                            std::vector<std::uint64_t>(report.class_ids.size(), 0));

    std::map<int, std::uint64_t> total_of, correct_of;
    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ++report.confusion[index_of[labels[i]]][index_of[predictions[i]]];
        ++total_of[labels[i]];
        if (predictions[i] == labels[i]) {
            ++correct_of[labels[i]];
            ++correct;
        }
    }

    double acc_sum = 0.0;
    for (const auto& [cls, total] : total_of) {
        double acc = static_cast<double>(correct_of[cls]) / static_cast<double>(total);
        report.per_class_accuracy[cls] = acc;
        acc_sum += acc;
    }
    report.aca = acc_sum / static_cast<double>(total_of.size());
    report.micro_accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    return report;
}

namespace {

const char* kModifierWords[] = {"amber", "birch", "cedar",  "dune",  "elm",    "fern",  "gale",
                                "holly", "iris",  "jade",   "kelp",  "lark",   "moss",  "nook",
                                "onyx",  "pine",  "quartz", "reed",  "sage",   "thorn", "umber",
                                "vale",  "wren",  "yarrow", "zephyr"};

std::string modifier_word(std::size_t k) {
    constexpr std::size_t known = sizeof(kModifierWords) / sizeof(kModifierWords[0]);
    if (k < known) return kModifierWords[k];
    return "sense" + std::to_string(k);
}

std::vector<std::vector<double>> make_centers(std::size_t senses, std::size_t dim,
                                              double separation, Rng& rng) {
    // random orthonormal directions scaled so every pair of centers sits at
    // exactly `separation`
    std::vector<std::vector<double>> basis;
    while (basis.size() < senses) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.normal();
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;  // rejected, retry
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    const double scale = separation / std::sqrt(2.0);
    for (auto& b : basis) {
        for (double& x : b) x *= scale;
    }
    return basis;
}

std::vector<double> unit_direction(const std::vector<double>& v,
                                   const std::vector<double>& fallback) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-9) {
        double fn = 0.0;
        for (double x : fallback) fn += x * x;
        fn = std::sqrt(fn);
        std::vector<double> out(fallback);
        for (double& x : out) x /= fn;
        return out;
    }
    std::vector<double> out(v);
    for (double& x : out) x /= norm;
    return out;
}

// conv-map surrogate: per-channel constant equal to the feature value plus a
// spatially zero-mean rectangular blob along `pattern`, so GAP recovers the
// feature vector and the saliency path has a localized region to find
std::vector<double> make_map(const std::vector<double>& feature,
                             const std::vector<double>& pattern, std::size_t height,
                             std::size_t width, double amplitude, Rng& rng) {
    const std::size_t area = height * width;
    std::size_t rect_h = 2 + rng.uniform_index(std::min<std::size_t>(4, height - 1));
    std::size_t rect_w = 2 + rng.uniform_index(std::min<std::size_t>(4, width - 1));
    rect_h = std::min(rect_h, height);
    rect_w = std::min(rect_w, width);
    std::size_t y0 = rng.uniform_index(height - rect_h + 1);
    std::size_t x0 = rng.uniform_index(width - rect_w + 1);

    const double area_fraction =
        static_cast<double>(rect_h * rect_w) / static_cast<double>(area);
    std::vector<double> cells(feature.size() * area);
    for (std::size_t u = 0; u < feature.size(); ++u) {
        double* plane = cells.data() + u * area;
        const double inside = amplitude * pattern[u] * (1.0 - area_fraction);
        const double outside = -amplitude * pattern[u] * area_fraction;
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                bool in_rect = y >= y0 && y < y0 + rect_h && x >= x0 && x < x0 + rect_w;
                plane[y * width + x] = feature[u] + (in_rect ? inside : outside);
            }
        }
    }
    return cells;
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.senses < 2) {
        throw Error(ErrorCode::invalid_argument, "need at least 2 senses");
    }
    if (spec.separation <= 0.0) {
        throw Error(ErrorCode::invalid_argument, "separation must be positive");
    }
    if (spec.feature_dim < spec.senses) {
        throw Error(ErrorCode::invalid_argument,
                    "feature_dim must be at least the number of senses");
    }
    if (spec.outlier_fraction < 0.0 || spec.outlier_fraction >= 1.0) {
        throw Error(ErrorCode::invalid_argument, "outlier_fraction must lie in [0, 1)");
    }
    if (spec.map_height < 2 || spec.map_width < 2) {
        throw Error(ErrorCode::invalid_argument, "maps must be at least 2x2");
    }

    SyntheticDataset data;
    data.spec = spec;
    data.features = feature_store::FeatureBank(spec.feature_dim);
    data.maps = feature_store::FeatureMapBank(spec.feature_dim, spec.map_height, spec.map_width);
    data.test_features = feature_store::FeatureBank(spec.feature_dim);
    data.test_maps =
        feature_store::FeatureMapBank(spec.feature_dim, spec.map_height, spec.map_width);

    Rng center_rng(mix_seed(spec.seed, 0xce'17e5));
    data.sense_centers = make_centers(spec.senses, spec.feature_dim, spec.separation, center_rng);

    const double blob_amplitude = spec.blob_amplitude;
    std::ostringstream corpus;
    for (std::size_t k = 0; k < spec.senses; ++k) {
        std::string modifier = modifier_word(k);
        data.query_texts.push_back(spec.keyword + " " + modifier);
        corpus << modifier << '\t' << spec.keyword << "\tNOUN\t"
               << (1000 + 10 * (spec.senses - k)) << '\n';
    }
    // chaff the discovery stage has to filter: wrong POS, wrong head, and a
    // malformed record
    corpus << "blur\t" << spec.keyword << "\tVERB\t700\n";
    corpus << modifier_word(0) << "\tother\tNOUN\t600\n";
    corpus << "oops\tbroken\t42\n";
    data.corpus_tsv = corpus.str();

    auto sample_clean = [&](std::size_t sense, Rng& rng) {
        std::vector<double> x = data.sense_centers[sense];
        for (double& v : x) v += rng.normal();
        return x;
    };

    for (std::size_t k = 0; k < spec.senses; ++k) {
        Rng rng(mix_seed(spec.seed, 0xda7a, k));
        const std::string& query = data.query_texts[k];
        const auto n_outliers = static_cast<std::size_t>(
            std::floor(spec.outlier_fraction * static_cast<double>(spec.instances_per_sense)));
        const std::size_t n_clean = spec.instances_per_sense - n_outliers;

        struct Pending {
            std::string id;
            std::vector<double> feature;
            std::vector<double> pattern;
            bool outlier;
        };
        std::vector<Pending> pending;
        for (std::size_t i = 0; i < n_clean; ++i) {
            Pending p;
            p.id = "img_" + std::to_string(k) + "_" + std::to_string(i);
            p.feature = sample_clean(k, rng);
            p.pattern = unit_direction(data.sense_centers[k], data.sense_centers[k]);
            p.outlier = false;
            pending.push_back(std::move(p));
        }
        for (std::size_t i = 0; i < n_outliers; ++i) {
            Pending p;
            p.id = "img_" + std::to_string(k) + "_out" + std::to_string(i);
            p.feature.resize(spec.feature_dim);
            for (double& v : p.feature) {
                v = rng.uniform(-spec.outlier_box_halfwidth, spec.outlier_box_halfwidth);
            }
            p.pattern = unit_direction(p.feature, data.sense_centers[k]);
            p.outlier = true;
            pending.push_back(std::move(p));
        }
        rng.shuffle(pending);

        for (Pending& p : pending) {
            data.features.add(p.id, p.feature);
            data.maps.add(p.id, make_map(p.feature, p.pattern, spec.map_height, spec.map_width,
                                         blob_amplitude, rng));
            feature_store::ImageRecord rec;
            rec.image_id = p.id;
            rec.source_query = query;
            rec.label = static_cast<int>(k);
            data.manifest.push_back(std::move(rec));
            data.sense_of[p.id] = static_cast<int>(k);
            if (p.outlier) data.planted_outliers.push_back(p.id);
        }

        // keyword pool: clean draws without a source query
        Rng pool_rng(mix_seed(spec.seed, 0x9001, k));
        for (std::size_t i = 0; i < spec.pool_per_sense; ++i) {
            std::string id = "pool_" + std::to_string(k) + "_" + std::to_string(i);
            std::vector<double> x = sample_clean(k, pool_rng);
            std::vector<double> pattern = unit_direction(data.sense_centers[k], data.sense_centers[k]);
            data.features.add(id, x);
            data.maps.add(id, make_map(x, pattern, spec.map_height, spec.map_width,
                                       blob_amplitude, pool_rng));
            feature_store::ImageRecord rec;
            rec.image_id = id;
            data.manifest.push_back(std::move(rec));
        }

        Rng test_rng(mix_seed(spec.seed, 0x7e57, k));
        for (std::size_t i = 0; i < spec.test_per_sense; ++i) {
            std::string id = "test_" + std::to_string(k) + "_" + std::to_string(i);
            std::vector<double> x = sample_clean(k, test_rng);
            std::vector<double> pattern = unit_direction(data.sense_centers[k], data.sense_centers[k]);
            data.test_features.add(id, x);
            data.test_maps.add(id, make_map(x, pattern, spec.map_height, spec.map_width,
                                            blob_amplitude, test_rng));
            feature_store::ImageRecord rec;
            rec.image_id = id;
            rec.source_query = query;
            rec.label = static_cast<int>(k);
            data.test_manifest.push_back(std::move(rec));
        }
    }
    std::sort(data.planted_outliers.begin(), data.planted_outliers.end());
    return data;
}

std::string write_synthetic_dataset(const SyntheticDataset& dataset,
                                    const std::string& directory) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    auto path = [&](const std::string& name) { return (fs::path(directory) / name).string(); };

    feature_store::save_feature_bank(dataset.features, path("features.poly"));
    feature_store::save_feature_map_bank(dataset.maps, path("maps.poly"));
    feature_store::save_feature_bank(dataset.test_features, path("test_features.poly"));
    feature_store::save_feature_map_bank(dataset.test_maps, path("test_maps.poly"));

    std::ofstream(path("manifest.json")) << feature_store::manifest_to_json(dataset.manifest);
    std::ofstream(path("test_manifest.json"))
        << feature_store::manifest_to_json(dataset.test_manifest);
    std::ofstream(path("corpus.tsv")) << dataset.corpus_tsv;

    nlohmann::json truth{{"planted_outliers", dataset.planted_outliers},
                         {"query_texts", dataset.query_texts}};
    nlohmann::json sense_of = nlohmann::json::object();
    for (const auto& [id, sense] : dataset.sense_of) sense_of[id] = sense;
    truth["sense_of"] = sense_of;
    std::ofstream(path("truth.json")) << truth.dump(2) << "\n";

    nlohmann::json config{{"keyword", dataset.spec.keyword},
                          {"corpus", "corpus.tsv"},
                          {"features", "features.poly"},
                          {"feature_maps", "maps.poly"},
                          {"manifest", "manifest.json"},
                          {"test_feature_maps", "test_maps.poly"},
                          {"test_manifest", "test_manifest.json"},
                          {"output_dir", "out"},
                          {"tau", 0.15},
                          {"top_n", dataset.spec.senses},
                          {"per_query_images", 5},
                          {"alpha", 0.6},
                          {"beta", 30.0},
                          {"lambda", 1.0},
                          {"theta_out", 0.3},
                          {"aggregator", "max"},
                          {"bag_size", 5},
                          {"learning_rate", 0.001},
                          {"epochs", 100},
                          {"restarts", 16},
                          {"seed", dataset.spec.seed},
                          {"threads", 1}};
    std::string config_path = path("config.json");
    std::ofstream(config_path) << config.dump(2) << "\n";
    return config_path;
}

std::vector<AblationRow> run_ablation(
    const AblationGrid& grid, const std::function<EvalReport(const AblationCell&)>& runner) {
    std::vector<AblationRow> rows;
    for (const std::string& aggregator : grid.aggregators) {
        for (std::size_t instances : grid.instances_per_sense) {
            for (double lr : grid.learning_rates) {
                AblationRow row;
                row.cell = AblationCell{aggregator, instances, lr, grid.seed};
                auto begin = std::chrono::steady_clock::now();
                try {
                    EvalReport report = runner(row.cell);
                    row.aca = report.aca;
                } catch (const std::exception& e) {
                    row.error = e.what();
                }
                auto end = std::chrono::steady_clock::now();
                row.runtime_ms = static_cast<std::uint64_t>(
                    std::chrono::duration_cast<std::chrono::milliseconds>(end - begin).count());
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

std::string ablation_to_json(const std::vector<AblationRow>& rows) {
    nlohmann::json table = nlohmann::json::array();
    std::map<std::string, std::pair<double, std::size_t>> by_aggregator;
    for (const AblationRow& row : rows) {
        nlohmann::json item{{"aggregator", row.cell.aggregator},
                            {"instances_per_sense", row.cell.instances_per_sense},
                            {"learning_rate", row.cell.learning_rate},
                            {"seed", row.cell.seed},
                            {"runtime_ms", row.runtime_ms}};
        if (row.ok()) {
            item["aca"] = row.aca;
            auto& acc = by_aggregator[row.cell.aggregator];
            acc.first += row.aca;
            acc.second += 1;
        } else {
            item["error"] = row.error;
        }
        table.push_back(std::move(item));
    }
    nlohmann::json summary = nlohmann::json::object();
    for (const auto& [aggregator, acc] : by_aggregator) {
        summary[aggregator] = acc.second == 0 ? 0.0 : acc.first / static_cast<double>(acc.second);
    }
    nlohmann::json doc{{"rows", table}, {"mean_aca_by_aggregator", summary}};
    return doc.dump(2) + "\n";
}

}  // namespace poly::evaluation
