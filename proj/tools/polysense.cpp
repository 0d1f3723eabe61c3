#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "poly/corpus.hpp"
#include "poly/dmil.hpp"
#include "poly/evaluation.hpp"
#include "poly/feature_store.hpp"
#include "poly/pipeline.hpp"
#include "poly/query_dedup.hpp"
#include "poly/query_match.hpp"
#include "poly/saliency.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfigError = 2;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw poly::Error(poly::ErrorCode::io_error, "cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void spill(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw poly::Error(poly::ErrorCode::io_error, "cannot open '" + path + "' for writing");
    out << content;
}

std::map<std::string, std::vector<std::string>> group_by_query(
    const std::vector<poly::feature_store::ImageRecord>& records) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& rec : records) {
        if (rec.source_query) out[*rec.source_query].push_back(rec.image_id);
    }
    return out;
}

int cmd_discover(const std::string& keyword, const std::string& corpus_path,
                 const std::string& out_path) {
    std::ifstream in(corpus_path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot open corpus '" << corpus_path << "'\n";
        return 1;
    }
    poly::corpus::ParseResult parsed = poly::corpus::parse_ngram_file(in);
    if (parsed.malformed_lines > 0) {
        std::cerr << "warning: skipped " << parsed.malformed_lines << " malformed corpus line(s)\n";
    }
    if (parsed.all_malformed()) {
        std::cerr << "warning: every corpus line was malformed; no entries parsed\n";
    }
    auto candidates = poly::corpus::discover_candidates(keyword, parsed.entries);
    spill(out_path, poly::corpus::candidates_to_json(candidates));
    std::cout << "discovered " << candidates.size() << " candidate queries -> " << out_path
              << "\n";
    return 0;
}

int cmd_validate(const std::string& bank_path, const std::string& manifest_path) {
    auto records = poly::feature_store::load_manifest_file(manifest_path);

    std::ifstream probe(bank_path, std::ios::binary);
    if (!probe) {
        std::cerr << "error: cannot open bank '" << bank_path << "'\n";
        return 1;
    }
    char magic[6] = {0};
    probe.read(magic, 6);
    probe.close();

    std::size_t missing = 0;
    if (magic[5] == 2) {
        auto bank = poly::feature_store::load_feature_map_bank(bank_path);
        for (const auto& rec : records) {
            if (!bank.contains(rec.image_id)) {
                std::cerr << "missing map: " << rec.image_id << "\n";
                ++missing;
            }
        }
        std::cout << "map bank: " << bank.size() << " records, " << bank.channels() << "x"
                  << bank.height() << "x" << bank.width() << "\n";
    } else {
        auto bank = poly::feature_store::load_feature_bank(bank_path);
        for (const auto& rec : records) {
            if (!bank.contains(rec.image_id)) {
                std::cerr << "missing row: " << rec.image_id << "\n";
                ++missing;
            }
        }
        std::cout << "feature bank: " << bank.size() << " records, dim " << bank.dim() << "\n";
    }
    std::cout << "manifest: " << records.size() << " records, " << missing << " unresolved\n";
    return missing == 0 ? 0 : 1;
}

int cmd_match(const std::string& keyword_bank, const std::string& manifest_path,
              const std::string& candidates_path, double tau, std::size_t top_n,
              std::size_t per_query, unsigned threads, const std::string& out_path) {
    auto bank = poly::feature_store::load_feature_bank(keyword_bank);
    auto records = poly::feature_store::load_manifest_file(manifest_path);
    auto candidates = poly::corpus::candidates_from_json(slurp(candidates_path));

    std::vector<std::vector<double>> pool;
    for (const auto& rec : records) {
        if (!rec.source_query) pool.push_back(bank.get(rec.image_id));
    }
    if (pool.empty()) {
        std::cerr << "error: manifest has no keyword-pool images (records without source_query)\n";
        return 1;
    }
    auto by_query = group_by_query(records);

    json scored = json::array();
    for (auto& candidate : candidates) {
        std::vector<std::vector<double>> query_images;
        auto it = by_query.find(candidate.query_text);
        if (it != by_query.end()) {
            for (const auto& id : it->second) {
                if (query_images.size() >= per_query) break;
                query_images.push_back(bank.get(id));
            }
        }
        poly::query_match::MatchCounts counts;
        if (!query_images.empty()) {
            counts = poly::query_match::accumulate_counts(query_images, pool, tau, threads);
        }
        candidate.match_score = counts.total;
        scored.push_back(json{{"query_text", candidate.query_text},
                              {"match_score", counts.total},
                              {"per_image", counts.per_image}});
    }
    auto ranked = poly::query_match::rank_candidates(candidates, top_n);
    json doc{{"scored", scored},
             {"ranked", json::parse(poly::corpus::candidates_to_json(ranked))}};
    spill(out_path, doc.dump(2) + "\n");
    std::cout << "ranked " << ranked.size() << " / " << candidates.size() << " candidates -> "
              << out_path << "\n";
    return 0;
}

int cmd_dedup(const std::string& scored_path, const std::string& features_path,
              const std::string& manifest_path, double alpha, double beta, double lambda,
              std::size_t restarts, std::uint64_t seed, const std::string& out_path) {
    json scored_doc = json::parse(slurp(scored_path));
    auto ranked = poly::corpus::candidates_from_json(
        scored_doc.contains("ranked") ? scored_doc["ranked"].dump() : scored_doc.dump());
    auto bank = poly::feature_store::load_feature_bank(features_path);
    auto by_query = group_by_query(poly::feature_store::load_manifest_file(manifest_path));

    std::vector<std::uint64_t> scores;
    std::vector<std::vector<std::vector<double>>> query_images;
    for (const auto& candidate : ranked) {
        if (!candidate.match_score) {
            std::cerr << "error: candidate '" << candidate.query_text << "' is unscored\n";
            return 1;
        }
        scores.push_back(*candidate.match_score);
        std::vector<std::vector<double>> images;
        for (const auto& id : by_query[candidate.query_text]) images.push_back(bank.get(id));
        query_images.push_back(std::move(images));
    }

    poly::query_dedup::SelectionSolution solution;
    json problem_doc = json::object();
    if (ranked.size() == 1) {
        solution.selected = {1};
        solution.relaxed = {1.0};
        solution.objective = lambda;
    } else {
        poly::query_dedup::DedupParams params;
        params.alpha = alpha;
        params.beta = beta;
        params.relevance_weight = lambda;
        params.seed = poly::mix_seed(seed, 0xded0);
        auto problem = poly::query_dedup::build_selection_problem(scores, query_images, params);
        solution =
            poly::query_dedup::select_queries(problem, restarts, poly::mix_seed(seed, 0x5e1e));
        problem_doc["relevance"] = problem.relevance;
        problem_doc["distinctness"] = problem.distinctness;
    }

    std::vector<poly::corpus::CandidateQuery> kept;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (solution.selected[i]) kept.push_back(ranked[i]);
    }
    json doc{{"selected", json::parse(poly::corpus::candidates_to_json(kept))},
             {"gamma", solution.selected},
             {"gamma_relaxed", solution.relaxed},
             {"objective", solution.objective},
             {"lambda", lambda},
             {"problem", problem_doc}};
    spill(out_path, doc.dump(2) + "\n");
    std::cout << "kept " << kept.size() << " / " << ranked.size() << " queries -> " << out_path
              << "\n";
    return 0;
}

int cmd_saliency(const std::string& maps_path, const std::string& labels_path,
                 const std::string& out_path, const std::string& report_path, double lr,
                 std::size_t epochs, double l2, std::uint64_t seed, unsigned threads) {
    auto maps = poly::feature_store::load_feature_map_bank(maps_path);
    json labels_doc = json::parse(slurp(labels_path));
    std::map<std::string, std::size_t> labels;
    for (const auto& [id, cls] : labels_doc.at("labels").items()) {
        labels[id] = cls.get<std::size_t>();
    }
    std::size_t class_count = labels_doc.contains("class_count")
                                  ? labels_doc["class_count"].get<std::size_t>()
                                  : 0;
    if (class_count == 0) {
        for (const auto& [id, cls] : labels) class_count = std::max(class_count, cls + 1);
    }

    poly::saliency::GapHyper hyper;
    hyper.learning_rate = lr;
    hyper.epochs = epochs;
    hyper.l2 = l2;
    hyper.seed = seed;
    auto trained = poly::saliency::train_gap_head(maps, labels, class_count, hyper);
    auto results = poly::saliency::extract_all(maps, trained.head, labels, threads);

    poly::feature_store::FeatureBank instances(maps.channels());
    json image_reports = json::array();
    for (const auto& res : results) {
        instances.add(res.image_id, res.instance_feature);
        image_reports.push_back(json{
            {"image_id", res.image_id},
            {"class_index", res.class_index},
            {"threshold", res.threshold},
            {"bbox", {res.bbox.x_min, res.bbox.y_min, res.bbox.x_max, res.bbox.y_max}}});
    }
    poly::feature_store::save_feature_bank(instances, out_path);
    spill(report_path, json{{"epoch_loss", trained.epoch_loss}, {"images", image_reports}}.dump(2) + "\n");
    std::cout << "extracted " << results.size() << " instances -> " << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& instances_path, const std::string& bags_path,
              const std::string& aggregator, std::size_t epochs, double lr, std::size_t bag_size,
              std::uint64_t seed, const std::string& model_path) {
    auto instances = poly::feature_store::load_feature_bank(instances_path);
    json bags_doc = json::parse(slurp(bags_path));

    std::vector<poly::dmil::Bag> bags;
    std::vector<std::string> class_names;
    if (bags_doc.contains("class_names")) {
        class_names = bags_doc["class_names"].get<std::vector<std::string>>();
    }
    for (const auto& item : bags_doc.at("bags")) {
        poly::dmil::Bag bag;
        bag.bag_id = item.at("bag_id").get<std::string>();
        bag.label = item.at("label").get<std::size_t>();
        for (const auto& id : item.at("instance_ids")) {
            bag.instances.push_back(instances.get(id.get<std::string>()));
        }
        bags.push_back(std::move(bag));
    }

    poly::dmil::TrainConfig config;
    config.learning_rate = lr;
    config.epochs = epochs;
    config.bag_size = bag_size;
    config.seed = seed;
    config.aggregator = poly::dmil::aggregator_from_string(aggregator);
    auto trained = poly::dmil::train(bags, config);
    trained.model.class_names = class_names;
    poly::dmil::save_model(trained.model, model_path);
    std::cout << "trained on " << bags.size() << " bags, final loss "
              << (trained.epoch_loss.empty() ? 0.0 : trained.epoch_loss.back()) << " -> "
              << model_path << "\n";
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& test_bank_path,
             const std::string& manifest_path, const std::string& out_path) {
    auto begin = std::chrono::steady_clock::now();
    auto model = poly::dmil::load_model(model_path);
    auto bank = poly::feature_store::load_feature_bank(test_bank_path);
    auto records = poly::feature_store::load_manifest_file(manifest_path);

    std::vector<int> predictions, labels;
    for (const auto& rec : records) {
        if (!rec.label) continue;
        labels.push_back(*rec.label);
        predictions.push_back(
            static_cast<int>(poly::dmil::classify(model, bank.get(rec.image_id))));
    }
    if (labels.empty()) {
        std::cerr << "error: no labeled records in manifest\n";
        return 1;
    }
    auto report = poly::evaluation::average_classification_accuracy(predictions, labels);
    json echo{{"model", model_path}, {"test_bank", test_bank_path}, {"manifest", manifest_path}};
    report.config_echo = echo.dump();
    auto end = std::chrono::steady_clock::now();
    report.runtime_ms = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(end - begin).count());
    spill(out_path, report.to_json());
    std::cout << "aca " << report.aca << " over " << labels.size() << " samples -> " << out_path
              << "\n";
    return 0;
}

poly::evaluation::EvalReport run_cell(const poly::evaluation::AblationCell& cell,
                                      const std::string& work_dir) {
    poly::evaluation::SyntheticSpec spec;
    spec.instances_per_sense = cell.instances_per_sense;
    spec.seed = cell.seed;
    auto dataset = poly::evaluation::generate_synthetic_dataset(spec);
    std::string tag = cell.aggregator + "_" + std::to_string(cell.instances_per_sense) + "_" +
                      std::to_string(cell.seed);
    std::string cell_dir = (fs::path(work_dir) / tag).string();
    std::string config_path = poly::evaluation::write_synthetic_dataset(dataset, cell_dir);

    auto config = poly::pipeline::load_config_file(config_path);
    config.aggregator = cell.aggregator;
    config.learning_rate = cell.learning_rate;
    auto outcome = poly::pipeline::run_pipeline(config);
    if (!outcome.ok()) {
        throw poly::Error(poly::ErrorCode::invalid_argument,
                          "stage " + outcome.failed_stage + ": " + outcome.error);
    }
    return outcome.report;
}

int cmd_ablate(const std::string& grid_path, const std::string& out_path) {
    json grid_doc = json::parse(slurp(grid_path));
    poly::evaluation::AblationGrid grid;
    grid.aggregators = grid_doc.at("aggregators").get<std::vector<std::string>>();
    grid.instances_per_sense = grid_doc.at("instances_per_sense").get<std::vector<std::size_t>>();
    grid.learning_rates = grid_doc.at("learning_rates").get<std::vector<double>>();
    grid.seed = grid_doc.value("seed", 1);
    std::string work_dir = grid_doc.value("work_dir", std::string("ablation_work"));

    auto rows = poly::evaluation::run_ablation(
        grid, [&](const poly::evaluation::AblationCell& cell) { return run_cell(cell, work_dir); });
    spill(out_path, poly::evaluation::ablation_to_json(rows));

    std::map<std::string, std::pair<double, std::size_t>> means;
    for (const auto& row : rows) {
        if (row.ok()) {
            means[row.cell.aggregator].first += row.aca;
            means[row.cell.aggregator].second += 1;
        }
        std::cout << row.cell.aggregator << " n=" << row.cell.instances_per_sense
                  << " lr=" << row.cell.learning_rate << " -> "
                  << (row.ok() ? "aca " + std::to_string(row.aca) : "error: " + row.error)
                  << "\n";
    }
    if (means.count("max") && means.count("avg")) {
        double max_mean = means["max"].first / static_cast<double>(means["max"].second);
        double avg_mean = means["avg"].first / static_cast<double>(means["avg"].second);
        std::cout << "aggregator ordering: max " << (max_mean >= avg_mean ? ">=" : "<") << " avg ("
                  << max_mean << " vs " << avg_mean << ")\n";
    }
    std::cout << "ablation table -> " << out_path << "\n";
    return 0;
}

int cmd_pipeline(const std::string& config_path) {
    auto config = poly::pipeline::load_config_file(config_path);
    auto result = poly::pipeline::run_pipeline(config);
    if (!result.ok()) {
        std::cerr << "pipeline failed at stage '" << result.failed_stage << "': " << result.error
                  << "\n";
        return result.exit_code;
    }
    std::cout << "pipeline complete: aca " << result.report.aca << ", artifacts in '"
              << config.output_dir << "'\n";
    return 0;
}

int cmd_gen_synthetic(std::size_t senses, std::size_t per_sense, std::size_t dim,
                      double separation, double outlier_fraction, std::uint64_t seed,
                      const std::string& out_dir) {
    poly::evaluation::SyntheticSpec spec;
    spec.senses = senses;
    spec.instances_per_sense = per_sense;
    spec.feature_dim = dim;
    spec.separation = separation;
    spec.outlier_fraction = outlier_fraction;
    spec.seed = seed;
    auto dataset = poly::evaluation::generate_synthetic_dataset(spec);
    std::string config_path = poly::evaluation::write_synthetic_dataset(dataset, out_dir);
    std::cout << "synthetic dataset in '" << out_dir << "', config: " << config_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"polysense: visual word-sense disambiguation over precomputed image features"};
    app.require_subcommand(1);

    // discover
    auto* discover = app.add_subcommand("discover", "discover candidate queries from a corpus");
    std::string keyword, corpus_path, out_path = "candidates.json";
    discover->add_option("--keyword", keyword)->required();
    discover->add_option("--corpus", corpus_path)->required();
    discover->add_option("--out", out_path);

    // validate
    auto* validate = app.add_subcommand("validate", "check a bank against a manifest");
    std::string bank_path, manifest_path;
    validate->add_option("--bank", bank_path)->required();
    validate->add_option("--manifest", manifest_path)->required();

    // match
    auto* match = app.add_subcommand("match", "score candidates against the keyword image pool");
    std::string match_bank, match_manifest, match_candidates, match_out = "scored.json";
    double tau = 0.75;
    std::size_t top_n = 10, per_query = 5;
    unsigned threads = 1;
    match->add_option("--keyword-bank", match_bank)->required();
    match->add_option("--manifest", match_manifest)->required();
    match->add_option("--candidates", match_candidates)->required();
    match->add_option("--tau", tau);
    match->add_option("--topn", top_n);
    match->add_option("--per-query", per_query);
    match->add_option("--threads", threads);
    match->add_option("--out", match_out);

    // dedup
    auto* dedup = app.add_subcommand("dedup", "drop visually redundant queries");
    std::string dedup_scored, dedup_features, dedup_manifest, dedup_out = "selected.json";
    double alpha = 0.6, beta = 30.0, lambda = 1.0;
    std::size_t restarts = 16;
    std::uint64_t seed = 1;
    dedup->add_option("--scored", dedup_scored)->required();
    dedup->add_option("--features", dedup_features)->required();
    dedup->add_option("--manifest", dedup_manifest)->required();
    dedup->add_option("--alpha", alpha);
    dedup->add_option("--beta", beta);
    dedup->add_option("--lambda", lambda);
    dedup->add_option("--restarts", restarts);
    dedup->add_option("--seed", seed);
    dedup->add_option("--out", dedup_out);

    // saliency
    auto* saliency_cmd = app.add_subcommand("saliency", "train the GAP head and extract instances");
    std::string sal_maps, sal_labels, sal_out = "instances.poly", sal_report = "saliency.json";
    double sal_lr = 0.05, sal_l2 = 1e-4;
    std::size_t sal_epochs = 60;
    std::uint64_t sal_seed = 1;
    unsigned sal_threads = 1;
    saliency_cmd->add_option("--maps", sal_maps)->required();
    saliency_cmd->add_option("--labels", sal_labels)->required();
    saliency_cmd->add_option("--out", sal_out);
    saliency_cmd->add_option("--report", sal_report);
    saliency_cmd->add_option("--lr", sal_lr);
    saliency_cmd->add_option("--epochs", sal_epochs);
    saliency_cmd->add_option("--l2", sal_l2);
    saliency_cmd->add_option("--seed", sal_seed);
    saliency_cmd->add_option("--threads", sal_threads);

    // train
    auto* train = app.add_subcommand("train", "train the multi-instance sense classifier");
    std::string train_instances, train_bags, train_model = "model.json";
    std::string aggregator = "max";
    std::size_t train_epochs = 100, bag_size = 5;
    double train_lr = 0.001;
    std::uint64_t train_seed = 1;
    train->add_option("--instances", train_instances)->required();
    train->add_option("--bags", train_bags)->required();
    train->add_option("--aggregator", aggregator)->check(CLI::IsMember({"max", "avg", "lse"}));
    train->add_option("--epochs", train_epochs);
    train->add_option("--lr", train_lr);
    train->add_option("--bag-size", bag_size);
    train->add_option("--seed", train_seed);
    train->add_option("--model", train_model);

    // eval
    auto* eval = app.add_subcommand("eval", "score a model on labeled instances");
    std::string eval_model, eval_bank, eval_manifest, eval_out = "report.json";
    eval->add_option("--model", eval_model)->required();
    eval->add_option("--test-bank", eval_bank)->required();
    eval->add_option("--manifest", eval_manifest)->required();
    eval->add_option("--out", eval_out);

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run the aggregator/size ablation grid");
    std::string grid_path, ablate_out = "ablation.json";
    ablate->add_option("--grid", grid_path)->required();
    ablate->add_option("--out", ablate_out);

    // pipeline
    auto* pipeline_cmd = app.add_subcommand("pipeline", "run every stage from one config");
    std::string pipeline_config;
    pipeline_cmd->add_option("--config", pipeline_config)->required();

    // gen-synthetic
    auto* gen = app.add_subcommand("gen-synthetic", "emit a reproducible synthetic benchmark");
    std::size_t gen_senses = 4, gen_per_sense = 100, gen_dim = 64;
    double gen_separation = 6.0, gen_outliers = 0.1;
    std::uint64_t gen_seed = 1;
    std::string gen_dir = "synthetic";
    gen->add_option("--senses", gen_senses);
    gen->add_option("--per-sense", gen_per_sense);
    gen->add_option("--dim", gen_dim);
    gen->add_option("--separation", gen_separation);
    gen->add_option("--outlier-fraction", gen_outliers);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out-dir", gen_dir);

    CLI11_PARSE(app, argc, argv);

    try {
        if (discover->parsed()) return cmd_discover(keyword, corpus_path, out_path);
        if (validate->parsed()) return cmd_validate(bank_path, manifest_path);
        if (match->parsed()) {
            return cmd_match(match_bank, match_manifest, match_candidates, tau, top_n, per_query,
                             threads, match_out);
        }
        if (dedup->parsed()) {
            return cmd_dedup(dedup_scored, dedup_features, dedup_manifest, alpha, beta, lambda,
                             restarts, seed, dedup_out);
        }
        if (saliency_cmd->parsed()) {
            return cmd_saliency(sal_maps, sal_labels, sal_out, sal_report, sal_lr, sal_epochs,
                                sal_l2, sal_seed, sal_threads);
        }
        if (train->parsed()) {
            return cmd_train(train_instances, train_bags, aggregator, train_epochs, train_lr,
                             bag_size, train_seed, train_model);
        }
        if (eval->parsed()) return cmd_eval(eval_model, eval_bank, eval_manifest, eval_out);
        if (ablate->parsed()) return cmd_ablate(grid_path, ablate_out);
        if (pipeline_cmd->parsed()) return cmd_pipeline(pipeline_config);
        if (gen->parsed()) {
            return cmd_gen_synthetic(gen_senses, gen_per_sense, gen_dim, gen_separation,
                                     gen_outliers, gen_seed, gen_dir);
        }
    } catch (const poly::Error& e) {
        std::cerr << "error [" << poly::error_code_name(e.code()) << "]: " << e.what() << "\n";
        return e.code() == poly::ErrorCode::config_error ? kExitConfigError : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
