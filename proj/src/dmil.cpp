#include "poly/dmil.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace poly::dmil {

Aggregator aggregator_from_string(const std::string& name) {
    if (name == "max") return Aggregator::max;
    if (name == "avg") return Aggregator::avg;
    if (name == "lse") return Aggregator::lse;
    throw Error(ErrorCode::invalid_argument, "unknown aggregator '" + name + "'");
}

std::string aggregator_to_string(Aggregator aggregator) {
    switch (aggregator) {
        case Aggregator::max: return "max";
        case Aggregator::avg: return "avg";
        case Aggregator::lse: return "lse";
    }
    return "max";
}

namespace {

std::vector<double> instance_logits(const MILModel& model, std::span<const double> instance) {
    if (instance.size() != model.feature_dim()) {
        throw Error(ErrorCode::dimension_mismatch,
                    "instance dim " + std::to_string(instance.size()) + " does not match model dim " +
                        std::to_string(model.feature_dim()));
    }
    std::vector<double> logits(model.class_count());
    for (std::size_t c = 0; c < model.class_count(); ++c) {
        double z = model.bias[c];
        const auto& w = model.weights[c];
        for (std::size_t u = 0; u < instance.size(); ++u) z += w[u] * instance[u];
        logits[c] = z;
    }
    return logits;
}

std::vector<double> stable_softmax(const std::vector<double>& logits) {
    double max_logit = *std::max_element(logits.begin(), logits.end());
    std::vector<double> probs(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - max_logit);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return probs;
}

}  // namespace

ForwardTrace forward_bag(const MILModel& model, const Bag& bag) {
    if (bag.instances.empty()) {
        throw Error(ErrorCode::insufficient_data, "bag '" + bag.bag_id + "' has no instances");
    }
    const std::size_t m = model.class_count();
    const std::size_t n = bag.instances.size();

    ForwardTrace trace;
    trace.instance_count = n;
    trace.logits.assign(m, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> column = instance_logits(model, bag.instances[j]);
        for (std::size_t i = 0; i < m; ++i) trace.logits[i][j] = column[i];
    }

    trace.aggregated.assign(m, 0.0);
    switch (model.aggregator) {
        case Aggregator::max: {
            trace.argmax_index.assign(m, 0);
            for (std::size_t i = 0; i < m; ++i) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < n; ++j) {
                    if (trace.logits[i][j] > trace.logits[i][best]) best = j;
                }
                trace.argmax_index[i] = best;
                trace.aggregated[i] = trace.logits[i][best];
            }
            break;
        }
        case Aggregator::avg: {
            for (std::size_t i = 0; i < m; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < n; ++j) sum += trace.logits[i][j];
                trace.aggregated[i] = sum / static_cast<double>(n);
            }
            break;
        }
        case Aggregator::lse: {
            // log(1 + sum_j exp(h_ij)), shifted so exp never overflows
            for (std::size_t i = 0; i < m; ++i) {
                double peak = 0.0;  // the implicit "1 +" term is exp(0)
                for (std::size_t j = 0; j < n; ++j) peak = std::max(peak, trace.logits[i][j]);
                double sum = std::exp(-peak);
                for (std::size_t j = 0; j < n; ++j) sum += std::exp(trace.logits[i][j] - peak);
                trace.aggregated[i] = peak + std::log(sum);
            }
            break;
        }
    }
    trace.probabilities = stable_softmax(trace.aggregated);
    return trace;
}

double bag_loss(const ForwardTrace& trace, std::size_t label) {
    if (label >= trace.probabilities.size()) {
        throw Error(ErrorCode::invalid_argument, "label out of range");
    }
    double p = trace.probabilities[label];
    if (p <= 0.0) {
        std::cerr << "[polysense] warning: true-class probability underflowed to 0, "
                     "clamping loss\n";
        p = 1e-300;
    }
    return -std::log(p);
}

BagGradients backward_bag(const MILModel& model, const ForwardTrace& trace, const Bag& bag) {
    const std::size_t m = model.class_count();
    const std::size_t n = bag.instances.size();
    if (trace.instance_count != n || trace.logits.size() != m) {
        throw Error(ErrorCode::invalid_argument,
                    "trace does not belong to this bag/model combination");
    }

    BagGradients grads;
    grads.weights.assign(m, std::vector<double>(model.feature_dim(), 0.0));
    grads.bias.assign(m, 0.0);
    grads.logit_grads.assign(m, std::vector<double>(n, 0.0));

    for (std::size_t i = 0; i < m; ++i) {
        double aggregated_grad = trace.probabilities[i] - (i == bag.label ? 1.0 : 0.0);
        switch (model.aggregator) {
            case Aggregator::max:
                grads.logit_grads[i][trace.argmax_index[i]] = aggregated_grad;
                break;
            case Aggregator::avg: {
                double share = aggregated_grad / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) grads.logit_grads[i][j] = share;
                break;
            }
            case Aggregator::lse: {
                double peak = 0.0;
                for (std::size_t j = 0; j < n; ++j) peak = std::max(peak, trace.logits[i][j]);
                double denom = std::exp(-peak);
                for (std::size_t j = 0; j < n; ++j) denom += std::exp(trace.logits[i][j] - peak);
                for (std::size_t j = 0; j < n; ++j) {
                    grads.logit_grads[i][j] =
                        aggregated_grad * std::exp(trace.logits[i][j] - peak) / denom;
                }
                break;
            }
        }
    }

    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double g = grads.logit_grads[i][j];
            if (g == 0.0) continue;
            const auto& x = bag.instances[j];
            auto& wg = grads.weights[i];
            for (std::size_t u = 0; u < x.size(); ++u) wg[u] += g * x[u];
            grads.bias[i] += g;
        }
    }
    return grads;
}

TrainResult train(const std::vector<Bag>& bags, const TrainConfig& config) {
    if (bags.empty()) {
        throw Error(ErrorCode::insufficient_data, "no bags to train on");
    }
    std::set<std::size_t> classes;
    std::size_t max_label = 0;
    std::size_t dim = bags.front().instances.empty() ? 0 : bags.front().instances.front().size();
    for (const Bag& bag : bags) {
        if (bag.instances.empty()) {
            throw Error(ErrorCode::insufficient_data, "bag '" + bag.bag_id + "' is empty");
        }
        classes.insert(bag.label);
        max_label = std::max(max_label, bag.label);
        for (const auto& inst : bag.instances) {
            if (inst.size() != dim) {
                throw Error(ErrorCode::dimension_mismatch,
                            "instance dimension mismatch in bag '" + bag.bag_id + "'");
            }
        }
    }
    if (classes.size() < 2) {
        throw Error(ErrorCode::insufficient_data, "training needs at least 2 represented classes");
    }
    if (config.bag_size == 0) {
        throw Error(ErrorCode::invalid_argument, "bag_size must be positive");
    }

    TrainResult result;
    MILModel& model = result.model;
    model.aggregator = config.aggregator;
    model.weights.assign(max_label + 1, std::vector<double>(dim, 0.0));
    model.bias.assign(max_label + 1, 0.0);

    struct Step {
        std::size_t bag_index;
        std::vector<std::size_t> members;
    };

    Rng rng(config.seed);
    result.epoch_loss.reserve(config.epochs);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<Step> steps;
        for (std::size_t b = 0; b < bags.size(); ++b) {
            std::vector<std::size_t> order(bags[b].instances.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            for (std::size_t begin = 0; begin < order.size(); begin += config.bag_size) {
                std::size_t end = std::min(order.size(), begin + config.bag_size);
                steps.push_back({b, {order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end)}});
            }
        }
        rng.shuffle(steps);

        double loss_sum = 0.0;
        Bag chunk;
        for (const Step& step : steps) {
            const Bag& source = bags[step.bag_index];
            chunk.bag_id = source.bag_id;
            chunk.label = source.label;
            chunk.instances.clear();
            for (std::size_t idx : step.members) chunk.instances.push_back(source.instances[idx]);

            ForwardTrace trace = forward_bag(model, chunk);
            loss_sum += bag_loss(trace, chunk.label);
            BagGradients grads = backward_bag(model, trace, chunk);
            for (std::size_t c = 0; c < model.class_count(); ++c) {
                auto& w = model.weights[c];
                const auto& wg = grads.weights[c];
                for (std::size_t u = 0; u < dim; ++u) w[u] -= config.learning_rate * wg[u];
                model.bias[c] -= config.learning_rate * grads.bias[c];
            }
        }
        result.epoch_loss.push_back(steps.empty() ? 0.0
                                                  : loss_sum / static_cast<double>(steps.size()));
    }
    return result;
}

std::vector<std::vector<double>> score_instances(
    const MILModel& model, const std::vector<std::vector<double>>& instances) {
    std::vector<std::vector<double>> scores;
    scores.reserve(instances.size());
    for (const auto& instance : instances) {
        scores.push_back(stable_softmax(instance_logits(model, instance)));
    }
    return scores;
}

OutlierSplit remove_outliers(const MILModel& model, std::size_t query_class,
                             const std::vector<std::vector<double>>& instances,
                             double outlier_threshold) {
    if (query_class >= model.class_count()) {
        throw Error(ErrorCode::invalid_argument, "query class out of range");
    }
    OutlierSplit split;
    std::vector<std::vector<double>> scores = score_instances(model, instances);
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (scores[i][query_class] < outlier_threshold) {
            split.outliers.push_back(i);
        } else {
            split.kept.push_back(i);
        }
    }
    return split;
}

std::size_t classify(const MILModel& model, std::span<const double> instance) {
    std::vector<double> logits = instance_logits(model, instance);
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
        if (logits[c] > logits[best]) best = c;
    }
    return best;
}

std::string model_to_json(const MILModel& model) {
    nlohmann::json doc{{"format", "polysense-mil"},
                       {"class_count", model.class_count()},
                       {"feature_dim", model.feature_dim()},
                       {"aggregator", aggregator_to_string(model.aggregator)},
                       {"weights", model.weights},
                       {"bias", model.bias},
                       {"class_names", model.class_names}};
    return doc.dump(2) + "\n";
}

MILModel model_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("model JSON: ") + e.what());
    }
    MILModel model;
    try {
        model.aggregator = aggregator_from_string(doc.at("aggregator").get<std::string>());
        model.weights = doc.at("weights").get<std::vector<std::vector<double>>>();
        model.bias = doc.at("bias").get<std::vector<double>>();
        if (doc.contains("class_names")) {
            model.class_names = doc["class_names"].get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("model JSON: ") + e.what());
    }
    if (model.weights.size() != model.bias.size()) {
        throw Error(ErrorCode::dimension_mismatch, "model weights and bias disagree on classes");
    }
    for (const auto& row : model.weights) {
        if (row.size() != model.feature_dim()) {
            throw Error(ErrorCode::dimension_mismatch, "model weight rows have uneven dims");
        }
        for (double v : row) {
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::non_finite, "model weights contain a non-finite value");
            }
        }
    }
    for (double v : model.bias) {
        if (!std::isfinite(v)) {
            throw Error(ErrorCode::non_finite, "model bias contains a non-finite value");
        }
    }
    return model;
}

void save_model(const MILModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io_error, "cannot open '" + path + "' for writing");
    out << model_to_json(model);
}

MILModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io_error, "cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return model_from_json(buffer.str());
}

}  // namespace poly::dmil
