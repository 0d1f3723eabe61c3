#include "poly/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "poly/corpus.hpp"
#include "poly/dmil.hpp"
#include "poly/feature_store.hpp"
#include "poly/query_dedup.hpp"
#include "poly/query_match.hpp"
#include "poly/saliency.hpp"

namespace poly::pipeline {

namespace fs = std::filesystem;

std::string_view stage_name(Stage stage) {
    switch (stage) {
        case Stage::discover: return "discover";
        case Stage::match: return "match";
        case Stage::dedup: return "dedup";
        case Stage::saliency: return "saliency";
        case Stage::train: return "train";
        case Stage::outliers: return "outliers";
        case Stage::eval: return "eval";
        case Stage::report: return "report";
    }
    return "unknown";
}

namespace {

class StageFailure : public std::runtime_error {
public:
    StageFailure(Stage stage, const std::string& message)
        : std::runtime_error(message), stage_(stage) {}
    Stage stage() const { return stage_; }

private:
    Stage stage_;
};

std::string read_file(const std::string& path, Stage stage) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw StageFailure(stage, "cannot open '" + path + "'");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const std::string& path, const std::string& content, Stage stage) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw StageFailure(stage, "cannot open '" + path + "' for writing");
    }
    out << content;
    if (!out) {
        throw StageFailure(stage, "write failed on '" + path + "'");
    }
}

/// Recorded per stage as files are consumed; proves the file-level dataflow.
class HashLedger {
public:
    void record(Stage stage, const std::string& path, const std::string& bytes) {
        entries_.push_back({std::string(stage_name(stage)), path, fnv1a64(bytes.data(), bytes.size())});
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : entries_) {
            std::ostringstream hex;
            hex << std::hex << e.hash;
            arr.push_back(nlohmann::json{
                {"stage", e.stage}, {"input", e.path}, {"fnv1a64", hex.str()}});
        }
        return arr;
    }

private:
    struct Entry {
        std::string stage;
        std::string path;
        std::uint64_t hash;
    };
    std::vector<Entry> entries_;
};

double require_range(const nlohmann::json& doc, const char* key, double fallback, double lo,
                     double hi) {
    if (!doc.contains(key)) return fallback;
    double v;
    try {
        v = doc.at(key).get<double>();
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::config_error, std::string("config key '") + key + "' must be a number");
    }
    if (!(v >= lo && v <= hi)) {
        throw Error(ErrorCode::config_error,
                    std::string("config key '") + key + "' out of range [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
    }
    return v;
}

std::uint64_t require_uint(const nlohmann::json& doc, const char* key, std::uint64_t fallback,
                           std::uint64_t lo, std::uint64_t hi) {
    if (!doc.contains(key)) return fallback;
    if (!doc.at(key).is_number_unsigned() && !doc.at(key).is_number_integer()) {
        throw Error(ErrorCode::config_error,
                    std::string("config key '") + key + "' must be an integer");
    }
    auto signed_value = doc.at(key).get<std::int64_t>();
    if (signed_value < 0) {
        throw Error(ErrorCode::config_error,
                    std::string("config key '") + key + "' must be non-negative");
    }
    auto v = static_cast<std::uint64_t>(signed_value);
    if (v < lo || v > hi) {
        throw Error(ErrorCode::config_error,
                    std::string("config key '") + key + "' out of range [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
    }
    return v;
}

std::string require_string(const nlohmann::json& doc, const char* key, bool required) {
    if (!doc.contains(key)) {
        if (required) {
            throw Error(ErrorCode::config_error, std::string("config key '") + key + "' is required");
        }
        return "";
    }
    if (!doc.at(key).is_string()) {
        throw Error(ErrorCode::config_error, std::string("config key '") + key + "' must be a string");
    }
    return doc.at(key).get<std::string>();
}

}  // namespace

std::string PipelineConfig::to_json() const {
    nlohmann::json doc{{"keyword", keyword},
                       {"corpus", corpus},
                       {"features", features},
                       {"feature_maps", feature_maps},
                       {"manifest", manifest},
                       {"test_feature_maps", test_feature_maps},
                       {"test_manifest", test_manifest},
                       {"output_dir", output_dir},
                       {"tau", tau},
                       {"top_n", top_n},
                       {"per_query_images", per_query_images},
                       {"alpha", alpha},
                       {"beta", beta},
                       {"lambda", lambda},
                       {"theta_out", theta_out},
                       {"aggregator", aggregator},
                       {"bag_size", bag_size},
                       {"learning_rate", learning_rate},
                       {"epochs", epochs},
                       {"restarts", restarts},
                       {"seed", seed},
                       {"threads", threads}};
    return doc.dump();
}

PipelineConfig parse_config(const std::string& json_text, const std::string& base_dir) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::config_error, std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw Error(ErrorCode::config_error, "config must be a JSON object");
    }

    static const std::set<std::string> known_keys = {
        "keyword",     "corpus",           "features",   "feature_maps", "manifest",
        "test_feature_maps", "test_manifest", "output_dir", "tau",        "top_n",
        "per_query_images",  "alpha",       "beta",       "lambda",       "theta_out",
        "aggregator",  "bag_size",         "learning_rate", "epochs",    "restarts",
        "seed",        "threads"};
    for (const auto& [key, value] : doc.items()) {
        if (!known_keys.count(key)) {
            throw Error(ErrorCode::config_error, "unknown config key '" + key + "'");
        }
    }

    PipelineConfig config;
    config.keyword = require_string(doc, "keyword", true);
    config.corpus = require_string(doc, "corpus", true);
    config.features = require_string(doc, "features", true);
    config.feature_maps = require_string(doc, "feature_maps", true);
    config.manifest = require_string(doc, "manifest", true);
    config.test_feature_maps = require_string(doc, "test_feature_maps", true);
    config.test_manifest = require_string(doc, "test_manifest", true);
    config.output_dir = require_string(doc, "output_dir", true);

    config.tau = require_range(doc, "tau", config.tau, -1.0, 1.0);
    config.top_n = require_uint(doc, "top_n", config.top_n, 1, 1'000'000);
    config.per_query_images = require_uint(doc, "per_query_images", config.per_query_images, 1,
                                           1'000'000);
    config.alpha = require_range(doc, "alpha", config.alpha, 0.0, 1.0);
    config.beta = require_range(doc, "beta", config.beta, 1e-9, 1e9);
    config.lambda = require_range(doc, "lambda", config.lambda, 0.0, 1e9);
    config.theta_out = require_range(doc, "theta_out", config.theta_out, 1e-12, 1.0 - 1e-12);
    config.aggregator = doc.contains("aggregator") ? require_string(doc, "aggregator", true) : "max";
    if (config.aggregator != "max" && config.aggregator != "avg" && config.aggregator != "lse") {
        throw Error(ErrorCode::config_error, "config key 'aggregator' must be max, avg or lse");
    }
    config.bag_size = require_uint(doc, "bag_size", config.bag_size, 1, 1'000'000);
    config.learning_rate = require_range(doc, "learning_rate", config.learning_rate, 0.0, 1e3);
    config.epochs = require_uint(doc, "epochs", config.epochs, 1, 1'000'000);
    config.restarts = require_uint(doc, "restarts", config.restarts, 0, 1'000'000);
    if (!doc.contains("seed")) {
        throw Error(ErrorCode::config_error, "config key 'seed' is required");
    }
    config.seed = require_uint(doc, "seed", 0, 0, UINT64_MAX);
    config.threads =
        static_cast<unsigned>(require_uint(doc, "threads", config.threads, 1, 4096));

    if (!base_dir.empty()) {
        auto resolve = [&](std::string& path) {
            if (path.empty()) return;
            fs::path p(path);
            if (p.is_relative()) path = (fs::path(base_dir) / p).string();
        };
        resolve(config.corpus);
        resolve(config.features);
        resolve(config.feature_maps);
        resolve(config.manifest);
        resolve(config.test_feature_maps);
        resolve(config.test_manifest);
        resolve(config.output_dir);
    }
    return config;
}

PipelineConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::config_error, "cannot open config '" + path + "'");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), fs::path(path).parent_path().string());
}

namespace {

struct StageTimer {
    std::vector<std::pair<std::string, std::uint64_t>> timings;

    template <typename Fn>
    void run(Stage stage, Fn&& fn) {
        auto begin = std::chrono::steady_clock::now();
        try {
            fn();
        } catch (const StageFailure&) {
            throw;
        } catch (const std::exception& e) {
            throw StageFailure(stage, e.what());
        }
        auto end = std::chrono::steady_clock::now();
        timings.emplace_back(
            stage_name(stage),
            static_cast<std::uint64_t>(
                std::chrono::duration_cast<std::chrono::milliseconds>(end - begin).count()));
    }
};

std::map<std::string, std::vector<std::string>> images_by_query(
    const std::vector<feature_store::ImageRecord>& records) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& rec : records) {
        if (rec.source_query) out[*rec.source_query].push_back(rec.image_id);
    }
    return out;
}

nlohmann::json gap_head_to_json(const saliency::GapHead& head) {
    return nlohmann::json{{"class_count", head.class_count},
                          {"channel_count", head.channel_count},
                          {"weights", head.weights},
                          {"bias", head.bias}};
}

saliency::GapHead gap_head_from_json(const nlohmann::json& doc) {
    saliency::GapHead head;
    head.class_count = doc.at("class_count").get<std::size_t>();
    head.channel_count = doc.at("channel_count").get<std::size_t>();
    head.weights = doc.at("weights").get<std::vector<std::vector<double>>>();
    head.bias = doc.at("bias").get<std::vector<double>>();
    return head;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
    PipelineResult result;
    HashLedger ledger;
    StageTimer timer;

    fs::create_directories(config.output_dir);
    auto artifact = [&](const std::string& name) {
        std::string path = (fs::path(config.output_dir) / name).string();
        result.artifacts[name] = path;
        return path;
    };

    const std::string candidates_path = artifact("candidates.json");
    const std::string scored_path = artifact("scored.json");
    const std::string selected_path = artifact("selected.json");
    const std::string instances_path = artifact("instances.poly");
    const std::string gap_head_path = artifact("gap_head.json");
    const std::string saliency_report_path = artifact("saliency.json");
    const std::string model_path = artifact("model.json");
    const std::string outliers_path = artifact("outliers.json");
    const std::string report_path = artifact("report.json");
    const std::string run_manifest_path = artifact("run_manifest.json");
    const std::string timings_path = artifact("timings.json");

    try {
        // ---- discover ------------------------------------------------
        timer.run(Stage::discover, [&] {
            std::string corpus_bytes = read_file(config.corpus, Stage::discover);
            ledger.record(Stage::discover, config.corpus, corpus_bytes);
            std::istringstream stream(corpus_bytes);
            corpus::ParseResult parsed = corpus::parse_ngram_file(stream);
            std::vector<corpus::CandidateQuery> candidates =
                corpus::discover_candidates(config.keyword, parsed.entries);
            if (candidates.empty()) {
                throw StageFailure(Stage::discover,
                                   "no candidate queries discovered for keyword '" +
                                       config.keyword + "'");
            }
            write_file(candidates_path, corpus::candidates_to_json(candidates), Stage::discover);
        });

        // ---- match ----------------------------------------------------
        timer.run(Stage::match, [&] {
            std::string candidate_bytes = read_file(candidates_path, Stage::match);
            ledger.record(Stage::match, candidates_path, candidate_bytes);
            std::vector<corpus::CandidateQuery> candidates =
                corpus::candidates_from_json(candidate_bytes);

            std::string bank_bytes = read_file(config.features, Stage::match);
            ledger.record(Stage::match, config.features, bank_bytes);
            std::istringstream bank_stream(bank_bytes);
            feature_store::FeatureBank bank = feature_store::read_feature_bank(bank_stream);

            std::string manifest_bytes = read_file(config.manifest, Stage::match);
            ledger.record(Stage::match, config.manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            std::vector<feature_store::ImageRecord> records =
                feature_store::load_manifest(manifest_stream);

            std::vector<std::vector<double>> pool;
            for (const auto& rec : records) {
                if (!rec.source_query) pool.push_back(bank.get(rec.image_id));
            }
            if (pool.empty()) {
                throw StageFailure(Stage::match, "manifest has no keyword-pool images");
            }
            auto by_query = images_by_query(records);

            query_match::MatchParams params;
            params.similarity_threshold = config.tau;
            params.top_n = config.top_n;
            params.per_query_images = config.per_query_images;
            params.threads = config.threads;

            nlohmann::json scored = nlohmann::json::array();
            for (auto& candidate : candidates) {
                std::vector<std::vector<double>> query_images;
                auto it = by_query.find(candidate.query_text);
                if (it != by_query.end()) {
                    for (const std::string& id : it->second) {
                        if (query_images.size() >= params.per_query_images) break;
                        query_images.push_back(bank.get(id));
                    }
                }
                query_match::MatchCounts counts;
                if (!query_images.empty()) {
                    counts = query_match::accumulate_counts(
                        query_images, pool, params.similarity_threshold, params.threads);
                }
                candidate.match_score = counts.total;  // queries absent from the
                                                       // search results score zero
                nlohmann::json item{{"keyword", candidate.keyword},
                                    {"modifier", candidate.modifier},
                                    {"query_text", candidate.query_text},
                                    {"corpus_count", candidate.corpus_count},
                                    {"match_score", counts.total},
                                    {"per_image", counts.per_image}};
                scored.push_back(std::move(item));
            }

            std::vector<corpus::CandidateQuery> ranked =
                query_match::rank_candidates(candidates, params.top_n);
            nlohmann::json doc{{"scored", scored},
                               {"ranked", nlohmann::json::parse(corpus::candidates_to_json(ranked))}};
            write_file(scored_path, doc.dump(2) + "\n", Stage::match);
        });

        // ---- dedup ----------------------------------------------------
        timer.run(Stage::dedup, [&] {
            std::string scored_bytes = read_file(scored_path, Stage::dedup);
            ledger.record(Stage::dedup, scored_path, scored_bytes);
            nlohmann::json scored_doc = nlohmann::json::parse(scored_bytes);
            std::vector<corpus::CandidateQuery> ranked =
                corpus::candidates_from_json(scored_doc.at("ranked").dump());
            if (ranked.empty()) {
                throw StageFailure(Stage::dedup, "no candidates survived match ranking");
            }

            std::string bank_bytes = read_file(config.features, Stage::dedup);
            ledger.record(Stage::dedup, config.features, bank_bytes);
            std::istringstream bank_stream(bank_bytes);
            feature_store::FeatureBank bank = feature_store::read_feature_bank(bank_stream);

            std::string manifest_bytes = read_file(config.manifest, Stage::dedup);
            ledger.record(Stage::dedup, config.manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            auto by_query = images_by_query(feature_store::load_manifest(manifest_stream));

            query_dedup::SelectionSolution solution;
            nlohmann::json problem_doc;
            if (ranked.size() == 1) {
                // nothing to deduplicate against
                solution.selected = {1};
                solution.relaxed = {1.0};
                solution.objective = config.lambda;
            } else {
                std::vector<std::uint64_t> scores;
                std::vector<std::vector<std::vector<double>>> query_images;
                for (const auto& candidate : ranked) {
                    scores.push_back(*candidate.match_score);
                    std::vector<std::vector<double>> images;
                    for (const std::string& id : by_query[candidate.query_text]) {
                        images.push_back(bank.get(id));
                    }
                    query_images.push_back(std::move(images));
                }
                query_dedup::DedupParams params;
                params.alpha = config.alpha;
                params.beta = config.beta;
                params.relevance_weight = config.lambda;
                params.seed = mix_seed(config.seed, 0xded0);
                query_dedup::SelectionProblem problem =
                    query_dedup::build_selection_problem(scores, query_images, params);
                solution = query_dedup::select_queries(problem, config.restarts,
                                                       mix_seed(config.seed, 0x5e1e));
                problem_doc["relevance"] = problem.relevance;
                problem_doc["distinctness"] = problem.distinctness;
            }

            std::vector<corpus::CandidateQuery> kept;
            for (std::size_t i = 0; i < ranked.size(); ++i) {
                if (solution.selected[i]) kept.push_back(ranked[i]);
            }
            if (kept.empty()) {
                throw StageFailure(Stage::dedup, "selection removed every candidate query");
            }
            nlohmann::json doc{
                {"selected", nlohmann::json::parse(corpus::candidates_to_json(kept))},
                {"gamma", solution.selected},
                {"gamma_relaxed", solution.relaxed},
                {"objective", solution.objective},
                {"lambda", config.lambda},
                {"problem", problem_doc}};
            write_file(selected_path, doc.dump(2) + "\n", Stage::dedup);
        });

        // ---- saliency ------------------------------------------------
        timer.run(Stage::saliency, [&] {
            std::string selected_bytes = read_file(selected_path, Stage::saliency);
            ledger.record(Stage::saliency, selected_path, selected_bytes);
            nlohmann::json selected_doc = nlohmann::json::parse(selected_bytes);
            std::vector<corpus::CandidateQuery> kept =
                corpus::candidates_from_json(selected_doc.at("selected").dump());

            std::string maps_bytes = read_file(config.feature_maps, Stage::saliency);
            ledger.record(Stage::saliency, config.feature_maps, maps_bytes);
            std::istringstream maps_stream(maps_bytes);
            feature_store::FeatureMapBank maps = feature_store::read_feature_map_bank(maps_stream);

            std::string manifest_bytes = read_file(config.manifest, Stage::saliency);
            ledger.record(Stage::saliency, config.manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            std::vector<feature_store::ImageRecord> records =
                feature_store::load_manifest(manifest_stream);

            std::map<std::string, std::size_t> class_of_query;
            for (std::size_t i = 0; i < kept.size(); ++i) class_of_query[kept[i].query_text] = i;
            if (class_of_query.size() < 2) {
                throw StageFailure(Stage::saliency,
                                   "need at least 2 selected queries to train the head");
            }

            std::map<std::string, std::size_t> labels;
            for (const auto& rec : records) {
                if (!rec.source_query) continue;
                auto it = class_of_query.find(*rec.source_query);
                if (it == class_of_query.end()) continue;
                if (!maps.contains(rec.image_id)) {
                    throw StageFailure(Stage::saliency,
                                       "image '" + rec.image_id + "' has no feature map");
                }
                labels[rec.image_id] = it->second;
            }

            saliency::GapHyper hyper;
            hyper.seed = mix_seed(config.seed, 0x6a9);
            saliency::GapTrainResult trained =
                saliency::train_gap_head(maps, labels, kept.size(), hyper);

            // instances only for bag members; pool images stay out of the bags
            feature_store::FeatureBank instances(maps.channels());
            nlohmann::json image_reports = nlohmann::json::array();
            std::vector<std::string> ids;
            ids.reserve(labels.size());
            for (const auto& [id, cls] : labels) ids.push_back(id);
            std::vector<saliency::SaliencyResult> extracted(ids.size());
            parallel_for(ids.size(), config.threads, [&](std::size_t i) {
                extracted[i] = saliency::extract_saliency_instance(maps, ids[i], trained.head, labels);
            });
            for (const auto& res : extracted) {
                instances.add(res.image_id, res.instance_feature);
                image_reports.push_back(nlohmann::json{
                    {"image_id", res.image_id},
                    {"class_index", res.class_index},
                    {"threshold", res.threshold},
                    {"bbox", {res.bbox.x_min, res.bbox.y_min, res.bbox.x_max, res.bbox.y_max}}});
            }

            std::ofstream instance_out(instances_path, std::ios::binary);
            feature_store::write_feature_bank(instances, instance_out);
            write_file(gap_head_path, gap_head_to_json(trained.head).dump(2) + "\n",
                       Stage::saliency);
            nlohmann::json report{{"epoch_loss", trained.epoch_loss},
                                  {"images", image_reports}};
            write_file(saliency_report_path, report.dump(2) + "\n", Stage::saliency);
        });

        // ---- train ----------------------------------------------------
        timer.run(Stage::train, [&] {
            std::string selected_bytes = read_file(selected_path, Stage::train);
            ledger.record(Stage::train, selected_path, selected_bytes);
            nlohmann::json selected_doc = nlohmann::json::parse(selected_bytes);
            std::vector<corpus::CandidateQuery> kept =
                corpus::candidates_from_json(selected_doc.at("selected").dump());

            std::string instance_bytes = read_file(instances_path, Stage::train);
            ledger.record(Stage::train, instances_path, instance_bytes);
            std::istringstream instance_stream(instance_bytes);
            feature_store::FeatureBank instances =
                feature_store::read_feature_bank(instance_stream);

            std::string manifest_bytes = read_file(config.manifest, Stage::train);
            ledger.record(Stage::train, config.manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            auto by_query = images_by_query(feature_store::load_manifest(manifest_stream));

            std::vector<dmil::Bag> bags;
            for (std::size_t i = 0; i < kept.size(); ++i) {
                dmil::Bag bag;
                bag.bag_id = kept[i].query_text;
                bag.label = i;
                for (const std::string& id : by_query[kept[i].query_text]) {
                    if (instances.contains(id)) bag.instances.push_back(instances.get(id));
                }
                if (bag.instances.empty()) {
                    throw StageFailure(Stage::train,
                                       "query '" + bag.bag_id + "' has no instances");
                }
                bags.push_back(std::move(bag));
            }

            dmil::TrainConfig train_config;
            train_config.learning_rate = config.learning_rate;
            train_config.epochs = config.epochs;
            train_config.bag_size = config.bag_size;
            train_config.seed = mix_seed(config.seed, 0x311);
            train_config.aggregator = dmil::aggregator_from_string(config.aggregator);
            dmil::TrainResult trained = dmil::train(bags, train_config);
            for (const auto& q : kept) trained.model.class_names.push_back(q.query_text);
            write_file(model_path, dmil::model_to_json(trained.model), Stage::train);
        });

        // ---- outlier removal -------------------------------------------
        timer.run(Stage::outliers, [&] {
            std::string model_bytes = read_file(model_path, Stage::outliers);
            ledger.record(Stage::outliers, model_path, model_bytes);
            dmil::MILModel model = dmil::model_from_json(model_bytes);

            std::string instance_bytes = read_file(instances_path, Stage::outliers);
            ledger.record(Stage::outliers, instances_path, instance_bytes);
            std::istringstream instance_stream(instance_bytes);
            feature_store::FeatureBank instances =
                feature_store::read_feature_bank(instance_stream);

            std::string manifest_bytes = read_file(config.manifest, Stage::outliers);
            ledger.record(Stage::outliers, config.manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            auto by_query = images_by_query(feature_store::load_manifest(manifest_stream));

            nlohmann::json queries = nlohmann::json::array();
            for (std::size_t c = 0; c < model.class_names.size(); ++c) {
                const std::string& query = model.class_names[c];
                std::vector<std::string> ids;
                std::vector<std::vector<double>> feats;
                for (const std::string& id : by_query[query]) {
                    if (instances.contains(id)) {
                        ids.push_back(id);
                        feats.push_back(instances.get(id));
                    }
                }
                dmil::OutlierSplit split =
                    dmil::remove_outliers(model, c, feats, config.theta_out);
                nlohmann::json kept_ids = nlohmann::json::array();
                nlohmann::json outlier_ids = nlohmann::json::array();
                for (std::size_t idx : split.kept) kept_ids.push_back(ids[idx]);
                for (std::size_t idx : split.outliers) outlier_ids.push_back(ids[idx]);
                queries.push_back(nlohmann::json{{"query", query},
                                                 {"class_index", c},
                                                 {"kept", kept_ids},
                                                 {"outliers", outlier_ids}});
            }
            nlohmann::json doc{{"theta_out", config.theta_out}, {"queries", queries}};
            write_file(outliers_path, doc.dump(2) + "\n", Stage::outliers);
        });

        // ---- eval -------------------------------------------------------
        timer.run(Stage::eval, [&] {
            std::string model_bytes = read_file(model_path, Stage::eval);
            ledger.record(Stage::eval, model_path, model_bytes);
            dmil::MILModel model = dmil::model_from_json(model_bytes);

            std::string head_bytes = read_file(gap_head_path, Stage::eval);
            ledger.record(Stage::eval, gap_head_path, head_bytes);
            saliency::GapHead head = gap_head_from_json(nlohmann::json::parse(head_bytes));

            std::string maps_bytes = read_file(config.test_feature_maps, Stage::eval);
            ledger.record(Stage::eval, config.test_feature_maps, maps_bytes);
            std::istringstream maps_stream(maps_bytes);
            feature_store::FeatureMapBank test_maps =
                feature_store::read_feature_map_bank(maps_stream);

            std::string manifest_bytes = read_file(config.test_manifest, Stage::eval);
            ledger.record(Stage::eval, config.test_manifest, manifest_bytes);
            std::istringstream manifest_stream(manifest_bytes);
            std::vector<feature_store::ImageRecord> records =
                feature_store::load_manifest(manifest_stream);
            if (records.empty()) {
                throw StageFailure(Stage::eval, "test manifest is empty");
            }

            std::map<std::string, int> class_of_query;
            for (std::size_t i = 0; i < model.class_names.size(); ++i) {
                class_of_query[model.class_names[i]] = static_cast<int>(i);
            }

            // test images carry no training label; the saliency class comes
            // from the head's own prediction
            const std::map<std::string, std::size_t> no_labels;
            std::vector<int> predictions(records.size());
            std::vector<int> truths(records.size());
            std::vector<std::string> failures(records.size());
            parallel_for(records.size(), config.threads, [&](std::size_t i) {
                const auto& rec = records[i];
                try {
                    if (!rec.source_query) {
                        throw Error(ErrorCode::invalid_argument,
                                    "test record '" + rec.image_id + "' lacks source_query");
                    }
                    auto it = class_of_query.find(*rec.source_query);
                    truths[i] = it != class_of_query.end() ? it->second : -1;
                    saliency::SaliencyResult res = saliency::extract_saliency_instance(
                        test_maps, rec.image_id, head, no_labels);
                    predictions[i] =
                        static_cast<int>(dmil::classify(model, res.instance_feature));
                } catch (const std::exception& e) {
                    failures[i] = e.what();
                }
            });
            for (std::size_t i = 0; i < records.size(); ++i) {
                if (!failures[i].empty()) {
                    throw StageFailure(Stage::eval, "test image '" + records[i].image_id +
                                                        "': " + failures[i]);
                }
            }

            result.report = evaluation::average_classification_accuracy(predictions, truths);
            for (const auto& [query, cls] : class_of_query) {
                result.report.class_names[cls] = query;
            }
            result.report.config_echo = config.to_json();
            result.report.runtime_ms = 0;  // wall time lives in timings.json so
                                           // report.json stays run-deterministic
            write_file(report_path, result.report.to_json(), Stage::eval);
        });

        // ---- run manifest ------------------------------------------------
        timer.run(Stage::report, [&] {
            nlohmann::json artifacts = nlohmann::json::object();
            for (const auto& [name, path] : result.artifacts) artifacts[name] = path;
            nlohmann::json doc{{"config", nlohmann::json::parse(config.to_json())},
                               {"inputs", ledger.to_json()},
                               {"artifacts", artifacts}};
            write_file(run_manifest_path, doc.dump(2) + "\n", Stage::report);

            nlohmann::json timing_doc = nlohmann::json::object();
            for (const auto& [name, ms] : timer.timings) timing_doc[name] = ms;
            write_file(timings_path, timing_doc.dump(2) + "\n", Stage::report);
        });
    } catch (const StageFailure& failure) {
        result.exit_code = static_cast<int>(failure.stage());
        result.failed_stage = stage_name(failure.stage());
        result.error = failure.what();
    }
    return result;
}

}  // namespace poly::pipeline
