#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "poly/common.hpp"

namespace poly::dmil {

enum class Aggregator { max, avg, lse };

Aggregator aggregator_from_string(const std::string& name);
std::string aggregator_to_string(Aggregator aggregator);

/// A labeled group of instance features; in this pipeline one text query's
/// sampled images form a bag.
struct Bag {
    std::string bag_id;
    std::vector<std::vector<double>> instances;
    std::size_t label = 0;  // one-hot position
};

/// Linear per-instance scorer plus the logit aggregator: instance features go
/// to per-class logits, the aggregator folds a bag's logit columns into one
/// bag-level logit vector.
struct MILModel {
    std::vector<std::vector<double>> weights;  // class_count x feature_dim
    std::vector<double> bias;                  // class_count
    Aggregator aggregator = Aggregator::max;
    std::vector<std::string> class_names;

    std::size_t class_count() const { return weights.size(); }
    std::size_t feature_dim() const { return weights.empty() ? 0 : weights.front().size(); }
};

struct ForwardTrace {
    std::vector<std::vector<double>> logits;    // class_count x instance_count
    std::vector<double> aggregated;             // class_count
    std::vector<double> probabilities;          // softmax of aggregated
    std::vector<std::size_t> argmax_index;      // per class; max aggregator only
    std::size_t instance_count = 0;
};

struct BagGradients {
    std::vector<std::vector<double>> weights;      // same shape as model weights
    std::vector<double> bias;
    std::vector<std::vector<double>> logit_grads;  // class_count x instance_count
};

struct TrainConfig {
    double learning_rate = 0.001;
    std::size_t epochs = 100;
    std::size_t bag_size = 5;  // instances sampled per training step
    std::uint64_t seed = 1;
    Aggregator aggregator = Aggregator::max;
};

struct TrainResult {
    MILModel model;
    std::vector<double> epoch_loss;
};

ForwardTrace forward_bag(const MILModel& model, const Bag& bag);

/// Cross-entropy of the trace against the bag's one-hot label.
double bag_loss(const ForwardTrace& trace, std::size_t label);

/// Backpropagates the cross-entropy through the aggregator into the scorer
/// parameters. For max, gradient flows only through each class's argmax
/// instance; avg spreads uniformly; lse weights instances by their share of
/// the aggregated mass.
BagGradients backward_bag(const MILModel& model, const ForwardTrace& trace, const Bag& bag);

/// Plain SGD over seeded bag shuffles. Each epoch partitions every bag's
/// shuffled instances into chunks of bag_size and applies one update per
/// chunk; one monolithic bag per query would leave SGD with almost no steps.
TrainResult train(const std::vector<Bag>& bags, const TrainConfig& config);

/// Per-instance softmax probabilities (each instance scored as a singleton).
std::vector<std::vector<double>> score_instances(const MILModel& model,
                                                 const std::vector<std::vector<double>>& instances);

struct OutlierSplit {
    std::vector<std::size_t> kept;
    std::vector<std::size_t> outliers;
};

/// Flags instances whose probability under the query's class falls below the
/// threshold. The split is exhaustive and disjoint over input indices.
OutlierSplit remove_outliers(const MILModel& model, std::size_t query_class,
                             const std::vector<std::vector<double>>& instances,
                             double outlier_threshold);

/// Argmax sense of a single instance; ties resolve to the lowest index.
std::size_t classify(const MILModel& model, std::span<const double> instance);

std::string model_to_json(const MILModel& model);
MILModel model_from_json(const std::string& text);
void save_model(const MILModel& model, const std::string& path);
MILModel load_model(const std::string& path);

}  // namespace poly::dmil
