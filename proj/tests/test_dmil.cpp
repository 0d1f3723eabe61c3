#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "poly/dmil.hpp"

using namespace poly;
using namespace poly::dmil;

namespace {

MILModel random_model(Rng& rng, std::size_t classes, std::size_t dim, Aggregator aggregator) {
    MILModel model;
    model.aggregator = aggregator;
    model.weights.assign(classes, std::vector<double>(dim));
    model.bias.assign(classes, 0.0);
    for (auto& row : model.weights) {
        for (double& v : row) v = rng.normal();
    }
    for (double& b : model.bias) b = 0.3 * rng.normal();
    return model;
}

Bag random_bag(Rng& rng, std::size_t instances, std::size_t dim, std::size_t label) {
    Bag bag;
    bag.bag_id = "bag";
    bag.label = label;
    bag.instances.assign(instances, std::vector<double>(dim));
    for (auto& x : bag.instances) {
        for (double& v : x) v = rng.normal();
    }
    return bag;
}

double model_loss(const MILModel& model, const Bag& bag) {
    return bag_loss(forward_bag(model, bag), bag.label);
}

// FD check of backward_bag against bag_loss(forward_bag(...)) for every
// scorer parameter; returns the max relative error
double max_gradient_error(const MILModel& model, const Bag& bag, double step) {
    ForwardTrace trace = forward_bag(model, bag);
    BagGradients grads = backward_bag(model, trace, bag);
    double worst = 0.0;
    for (std::size_t c = 0; c < model.class_count(); ++c) {
        for (std::size_t u = 0; u < model.feature_dim(); ++u) {
            double numeric = oracles::central_difference(
                [&](double w) {
                    MILModel perturbed = model;
                    perturbed.weights[c][u] = w;
                    return model_loss(perturbed, bag);
                },
                model.weights[c][u], step);
            worst = std::max(worst, oracles::relative_error(grads.weights[c][u], numeric));
        }
        double numeric = oracles::central_difference(
            [&](double b) {
                MILModel perturbed = model;
                perturbed.bias[c] = b;
                return model_loss(perturbed, bag);
            },
            model.bias[c], step);
        worst = std::max(worst, oracles::relative_error(grads.bias[c], numeric));
    }
    return worst;
}

// smallest top-two logit gap across classes; FD near a max kink is meaningless
double min_top_gap(const ForwardTrace& trace) {
    double gap = 1e300;
    for (const auto& row : trace.logits) {
        if (row.size() < 2) continue;
        double best = -1e300, second = -1e300;
        for (double v : row) {
            if (v > best) {
                second = best;
                best = v;
            } else if (v > second) {
                second = v;
            }
        }
        gap = std::min(gap, best - second);
    }
    return gap;
}

}  // namespace

TEST_CASE("a singleton bag aggregates to its only logit column") {
    Rng rng(51);
    MILModel model = random_model(rng, 3, 4, Aggregator::max);
    Bag bag = random_bag(rng, 1, 4, 0);
    ForwardTrace trace = forward_bag(model, bag);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(trace.aggregated[c] == trace.logits[c][0]);
        CHECK(trace.argmax_index[c] == 0);
    }
}

TEST_CASE("zero logits give a uniform distribution") {
    MILModel model;
    model.aggregator = Aggregator::max;
    model.weights.assign(4, std::vector<double>(3, 0.0));
    model.bias.assign(4, 0.0);
    Bag bag;
    bag.label = 0;
    bag.instances = {{1.0, -2.0, 0.5}, {0.0, 0.0, 1.0}};
    ForwardTrace trace = forward_bag(model, bag);
    for (double p : trace.probabilities) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(bag_loss(trace, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("the lse aggregator of a single zero logit is ln 2") {
    MILModel model;
    model.aggregator = Aggregator::lse;
    model.weights.assign(2, std::vector<double>(2, 0.0));
    model.bias.assign(2, 0.0);
    Bag bag;
    bag.label = 0;
    bag.instances = {{0.7, -0.7}};
    ForwardTrace trace = forward_bag(model, bag);
    CHECK(trace.aggregated[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(trace.aggregated[1] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("probabilities always sum to one, even for extreme logits") {
    Rng rng(53);
    for (int trial = 0; trial < 30; ++trial) {
        MILModel model = random_model(rng, 2 + rng.uniform_index(4), 3,
                                      trial % 2 ? Aggregator::avg : Aggregator::lse);
        for (double& b : model.bias) b = rng.uniform(-1e4, 1e4);
        Bag bag = random_bag(rng, 1 + rng.uniform_index(5), 3, 0);
        ForwardTrace trace = forward_bag(model, bag);
        double sum = 0.0;
        for (double p : trace.probabilities) {
            CHECK(std::isfinite(p));
            sum += p;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("a perfectly confident correct trace has zero loss and zero gradients") {
    MILModel model;
    model.aggregator = Aggregator::max;
    model.weights = {{800.0}, {-800.0}};  // exp(-1600) underflows to exactly 0
    model.bias = {0.0, 0.0};
    Bag bag;
    bag.label = 0;
    bag.instances = {{1.0}};
    ForwardTrace trace = forward_bag(model, bag);
    CHECK(trace.probabilities[0] == 1.0);
    CHECK(trace.probabilities[1] == 0.0);
    CHECK(bag_loss(trace, 0) == 0.0);
    BagGradients grads = backward_bag(model, trace, bag);
    for (const auto& row : grads.weights) {
        for (double g : row) CHECK(g == 0.0);
    }
    for (double g : grads.bias) CHECK(g == 0.0);
}

TEST_CASE("bag loss matches the naive cross-entropy formula") {
    Rng rng(54);
    for (int trial = 0; trial < 20; ++trial) {
        MILModel model = random_model(rng, 3, 4, Aggregator::avg);
        Bag bag = random_bag(rng, 3, 4, rng.uniform_index(3));
        ForwardTrace trace = forward_bag(model, bag);
        double expected = -std::log(trace.probabilities[bag.label]);
        CHECK(bag_loss(trace, bag.label) == doctest::Approx(expected).epsilon(1e-14));
    }
}

TEST_CASE("max-aggregator gradients route only through the argmax instance") {
    Rng rng(55);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t classes = 2 + rng.uniform_index(4);
        MILModel model = random_model(rng, classes, 3, Aggregator::max);
        std::size_t instances = 2 + rng.uniform_index(5);
        std::size_t label = rng.uniform_index(classes);
        Bag bag = random_bag(rng, instances, 3, label);
        ForwardTrace trace = forward_bag(model, bag);
        BagGradients grads = backward_bag(model, trace, bag);
        for (std::size_t c = 0; c < classes; ++c) {
            std::size_t nonzero = 0;
            for (std::size_t j = 0; j < bag.instances.size(); ++j) {
                if (grads.logit_grads[c][j] != 0.0) {
                    ++nonzero;
                    CHECK(j == trace.argmax_index[c]);
                }
            }
            CHECK(nonzero == 1);
        }
    }
}

TEST_CASE("analytic gradients match central differences for every aggregator") {
    Rng rng(56);
    for (Aggregator aggregator : {Aggregator::max, Aggregator::avg, Aggregator::lse}) {
        int checked = 0;
        while (checked < 15) {
            std::size_t classes = 2 + rng.uniform_index(4);
            std::size_t dim = 1 + rng.uniform_index(8);
            MILModel model = random_model(rng, classes, dim, aggregator);
            std::size_t instances = 1 + rng.uniform_index(6);
            std::size_t label = rng.uniform_index(classes);
            Bag bag = random_bag(rng, instances, dim, label);
            ForwardTrace trace = forward_bag(model, bag);
            if (aggregator == Aggregator::max && min_top_gap(trace) < 5e-2) continue;
            CHECK(max_gradient_error(model, bag, 1e-3) < 1e-4);
            ++checked;
        }
    }
}

TEST_CASE("loss is invariant under instance permutations") {
    Rng rng(57);
    for (Aggregator aggregator : {Aggregator::max, Aggregator::avg, Aggregator::lse}) {
        MILModel model = random_model(rng, 3, 4, aggregator);
        Bag bag = random_bag(rng, 6, 4, 1);
        double reference = model_loss(model, bag);
        Bag shuffled = bag;
        for (int trial = 0; trial < 5; ++trial) {
            rng.shuffle(shuffled.instances);
            CHECK(model_loss(model, shuffled) == doctest::Approx(reference).epsilon(1e-12));
        }
    }
}

TEST_CASE("max routing follows the argmax instance value across permutations") {
    Rng rng(58);
    MILModel model = random_model(rng, 2, 3, Aggregator::max);
    Bag bag = random_bag(rng, 5, 3, 0);
    ForwardTrace trace = forward_bag(model, bag);
    std::vector<std::vector<double>> routed;
    for (std::size_t c = 0; c < 2; ++c) routed.push_back(bag.instances[trace.argmax_index[c]]);

    Bag shuffled = bag;
    rng.shuffle(shuffled.instances);
    ForwardTrace strace = forward_bag(model, shuffled);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(shuffled.instances[strace.argmax_index[c]] == routed[c]);
    }
}

namespace {

// Gaussian senses with a fraction of uniform noise instances per bag
std::vector<Bag> synthetic_bags(Rng& rng, std::size_t bags_per_class,
                                std::size_t instances_per_bag, double noise_fraction,
                                std::size_t classes = 3) {
    const std::vector<std::vector<double>> all_centers = {{4.0, 0.0, 0.0, 0.0},
                                                          {0.0, 4.0, 0.0, 0.0},
                                                          {0.0, 0.0, 4.0, 0.0},
                                                          {0.0, 0.0, 0.0, 4.0}};
    const std::vector<std::vector<double>> centers(all_centers.begin(),
                                                   all_centers.begin() + classes);
    std::vector<Bag> bags;
    for (std::size_t c = 0; c < centers.size(); ++c) {
        for (std::size_t b = 0; b < bags_per_class; ++b) {
            Bag bag;
            bag.bag_id = "bag_" + std::to_string(c) + "_" + std::to_string(b);
            bag.label = c;
            for (std::size_t i = 0; i < instances_per_bag; ++i) {
                std::vector<double> x(4);
                if (rng.uniform01() < noise_fraction) {
                    for (double& v : x) v = rng.uniform(-0.5, 0.5);
                } else {
                    for (std::size_t d = 0; d < 4; ++d) x[d] = centers[c][d] + rng.normal();
                }
                bag.instances.push_back(std::move(x));
            }
            bags.push_back(std::move(bag));
        }
    }
    return bags;
}

}  // namespace

TEST_CASE("training separates noisy synthetic senses") {
    Rng rng(59);
    std::vector<Bag> train_bags = synthetic_bags(rng, 4, 25, 0.2);
    TrainConfig config;
    config.seed = 6;
    config.aggregator = Aggregator::max;
    TrainResult trained = train(train_bags, config);

    std::vector<Bag> test_bags = synthetic_bags(rng, 10, 5, 0.0);
    std::size_t correct = 0;
    for (const Bag& bag : test_bags) {
        ForwardTrace trace = forward_bag(trained.model, bag);
        std::size_t best = 0;
        for (std::size_t c = 1; c < trace.probabilities.size(); ++c) {
            if (trace.probabilities[c] > trace.probabilities[best]) best = c;
        }
        correct += best == bag.label ? 1 : 0;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(test_bags.size()) >= 0.95);
}

TEST_CASE("training epoch losses trend downward on separable bags") {
    Rng rng(60);
    std::vector<Bag> bags = synthetic_bags(rng, 4, 20, 0.0);
    TrainConfig config;
    config.seed = 7;
    config.epochs = 40;
    TrainResult trained = train(bags, config);
    REQUIRE(trained.epoch_loss.size() == 40);
    for (std::size_t e = 1; e < trained.epoch_loss.size(); ++e) {
        CHECK(trained.epoch_loss[e] <= trained.epoch_loss[e - 1] * 1.05 + 1e-9);
    }
    CHECK(trained.epoch_loss.back() < trained.epoch_loss.front());
}

TEST_CASE("a zero learning rate leaves parameters untouched") {
    Rng rng(61);
    std::vector<Bag> bags = synthetic_bags(rng, 2, 10, 0.0);
    TrainConfig config;
    config.learning_rate = 0.0;
    config.epochs = 5;
    TrainResult trained = train(bags, config);
    for (const auto& row : trained.model.weights) {
        for (double v : row) CHECK(v == 0.0);
    }
    for (double b : trained.model.bias) CHECK(b == 0.0);
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
    Rng rng(62);
    std::vector<Bag> bags = synthetic_bags(rng, 3, 15, 0.1);
    TrainConfig config;
    config.seed = 1234;
    TrainResult a = train(bags, config);
    TrainResult b = train(bags, config);
    CHECK(model_to_json(a.model) == model_to_json(b.model));
    CHECK(a.epoch_loss == b.epoch_loss);
}

TEST_CASE("training refuses single-class data") {
    Rng rng(63);
    std::vector<Bag> bags = synthetic_bags(rng, 2, 10, 0.0);
    std::erase_if(bags, [](const Bag& bag) { return bag.label != 0; });
    TrainConfig config;
    CHECK_THROWS_AS(train(bags, config), Error);
}

TEST_CASE("instance scoring is consistent with singleton bags") {
    Rng rng(64);
    MILModel model = random_model(rng, 3, 4, Aggregator::max);
    std::vector<std::vector<double>> instances = {{1.0, 0.0, -1.0, 2.0}, {0.1, 0.2, 0.3, 0.4}};
    auto scores = score_instances(model, instances);
    REQUIRE(scores.size() == 2);
    for (std::size_t i = 0; i < instances.size(); ++i) {
        Bag bag;
        bag.label = 0;
        bag.instances = {instances[i]};
        ForwardTrace trace = forward_bag(model, bag);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(scores[i][c] == doctest::Approx(trace.probabilities[c]).epsilon(1e-14));
        }
    }

    MILModel zero;
    zero.aggregator = Aggregator::max;
    zero.weights.assign(5, std::vector<double>(2, 0.0));
    zero.bias.assign(5, 0.0);
    auto uniform = score_instances(zero, {{1.0, 2.0}});
    for (double p : uniform[0]) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("outlier removal partitions instances exhaustively") {
    // four senses: with theta 0.3 above chance level 0.25, near-uniform
    // probability vectors get flagged
    Rng rng(65);
    std::vector<Bag> bags = synthetic_bags(rng, 4, 25, 0.0, 4);
    TrainConfig config;
    config.seed = 77;
    TrainResult trained = train(bags, config);

    // all instances at the class cluster stay at theta 0.3
    std::vector<std::vector<double>> clean;
    for (int i = 0; i < 30; ++i) {
        std::vector<double> x = {4.0, 0.0, 0.0, 0.0};
        for (double& v : x) v += rng.normal();
        clean.push_back(std::move(x));
    }
    OutlierSplit split = remove_outliers(trained.model, 0, clean, 0.3);
    CHECK(split.outliers.empty());
    CHECK(split.kept.size() == clean.size());

    // theta 0 removes nothing even for garbage instances
    std::vector<std::vector<double>> garbage(10, std::vector<double>{0.0, 0.0, 0.0, 0.0});
    OutlierSplit none = remove_outliers(trained.model, 0, garbage, 0.0);
    CHECK(none.outliers.empty());

    // planted off-cluster instances get flagged
    std::vector<std::vector<double>> mixed = clean;
    std::size_t planted = 10;
    for (std::size_t i = 0; i < planted; ++i) {
        std::vector<double> x(4);
        for (double& v : x) v = rng.uniform(-0.3, 0.3);
        mixed.push_back(std::move(x));
    }
    OutlierSplit flagged = remove_outliers(trained.model, 0, mixed, 0.3);
    std::size_t caught = 0;
    for (std::size_t idx : flagged.outliers) caught += idx >= clean.size() ? 1 : 0;
    CHECK(static_cast<double>(caught) / static_cast<double>(planted) >= 0.8);
    CHECK(flagged.kept.size() + flagged.outliers.size() == mixed.size());
}

TEST_CASE("classification breaks ties toward the lowest class index") {
    MILModel model;
    model.aggregator = Aggregator::max;
    model.weights = {{1.0, 0.0}, {-1.0, 0.0}};
    model.bias = {0.0, 0.0};
    // instance orthogonal to both weight rows: logits tie at zero
    CHECK(classify(model, std::vector<double>{0.0, 3.0}) == 0);
    CHECK(classify(model, std::vector<double>{2.0, 0.0}) == 0);
    CHECK(classify(model, std::vector<double>{-2.0, 0.0}) == 1);
}

TEST_CASE("classification agrees with the instance-score argmax") {
    Rng rng(66);
    MILModel model = random_model(rng, 4, 5, Aggregator::max);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(5);
        for (double& v : x) v = rng.normal();
        auto scores = score_instances(model, {x});
        std::size_t best = 0;
        for (std::size_t c = 1; c < 4; ++c) {
            if (scores[0][c] > scores[0][best]) best = c;
        }
        CHECK(classify(model, x) == best);
    }
}

TEST_CASE("models round-trip through JSON") {
    Rng rng(67);
    for (Aggregator aggregator : {Aggregator::max, Aggregator::avg, Aggregator::lse}) {
        MILModel model = random_model(rng, 3, 6, aggregator);
        model.class_names = {"kw a", "kw b", "kw c"};
        MILModel back = model_from_json(model_to_json(model));
        CHECK(back.weights == model.weights);
        CHECK(back.bias == model.bias);
        CHECK(back.aggregator == model.aggregator);
        CHECK(back.class_names == model.class_names);
    }
    CHECK_THROWS_AS(model_from_json("{"), Error);
    CHECK_THROWS_AS(aggregator_from_string("median"), Error);
}
