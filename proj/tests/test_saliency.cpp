#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "poly/saliency.hpp"

using namespace poly;
using namespace poly::saliency;
using poly::feature_store::FeatureMapBank;

namespace {

// two classes with disjoint active channels; trivially separable after GAP
FeatureMapBank separable_bank(Rng& rng, std::map<std::string, std::size_t>& labels,
                              std::size_t per_class) {
    FeatureMapBank bank(4, 3, 3);
    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            std::vector<double> cells(4 * 9, 0.0);
            for (std::size_t u = 0; u < 4; ++u) {
                bool active = (u < 2) == (c == 0);
                for (std::size_t p = 0; p < 9; ++p) {
                    cells[u * 9 + p] = active ? 2.0 + 0.2 * rng.normal() : 0.2 * rng.normal();
                }
            }
            std::string id = "s" + std::to_string(c) + "_" + std::to_string(i);
            bank.add(id, cells);
            labels[id] = c;
        }
    }
    return bank;
}

Grid grid_from(std::vector<double> cells, std::size_t height, std::size_t width) {
    Grid grid;
    grid.height = height;
    grid.width = width;
    grid.cells = std::move(cells);
    return grid;
}

Mask mask_from(std::vector<std::uint8_t> cells, std::size_t height, std::size_t width) {
    Mask mask;
    mask.height = height;
    mask.width = width;
    mask.cells = std::move(cells);
    return mask;
}

GapHead random_head(Rng& rng, std::size_t classes, std::size_t channels) {
    GapHead head;
    head.class_count = classes;
    head.channel_count = channels;
    head.weights.assign(classes, std::vector<double>(channels));
    head.bias.assign(classes, 0.0);
    for (auto& row : head.weights) {
        for (double& v : row) v = rng.normal();
    }
    for (double& b : head.bias) b = 0.3 * rng.normal();
    return head;
}

}  // namespace

TEST_CASE("the head learns disjoint-channel classes") {
    Rng rng(31);
    std::map<std::string, std::size_t> labels;
    FeatureMapBank bank = separable_bank(rng, labels, 25);
    GapHyper hyper;
    hyper.seed = 5;
    GapTrainResult trained = train_gap_head(bank, labels, 2, hyper);

    std::size_t correct = 0;
    for (const auto& [id, label] : labels) {
        correct += gap_head_argmax(trained.head, gap_pool(bank, id)) == label ? 1 : 0;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(labels.size()) >= 0.98);
    CHECK(trained.epoch_loss.front() > trained.epoch_loss.back());
}

TEST_CASE("a zero head starts at the uniform-softmax loss") {
    Rng rng(32);
    std::map<std::string, std::size_t> labels;
    FeatureMapBank bank = separable_bank(rng, labels, 4);
    GapHead zero;
    zero.class_count = 2;
    zero.channel_count = 4;
    zero.weights.assign(2, std::vector<double>(4, 0.0));
    zero.bias.assign(2, 0.0);
    CHECK(gap_head_loss(zero, bank, labels) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    GapHead zero3 = zero;
    zero3.class_count = 3;
    zero3.weights.assign(3, std::vector<double>(4, 0.0));
    zero3.bias.assign(3, 0.0);
    CHECK(gap_sample_loss(zero3, gap_pool(bank, labels.begin()->first), 0) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("the logit gradient is probabilities minus the one-hot label") {
    Rng rng(33);
    GapHead head = random_head(rng, 3, 5);
    std::vector<double> pooled = {0.4, -1.1, 2.0, 0.0, 0.7};
    std::vector<double> probs = gap_head_probabilities(head, pooled);
    GapGradient grad = gap_head_gradient(head, pooled, 1);
    for (std::size_t c = 0; c < 3; ++c) {
        double expected = probs[c] - (c == 1 ? 1.0 : 0.0);
        CHECK(grad.bias[c] == doctest::Approx(expected).epsilon(1e-14));
        for (std::size_t u = 0; u < 5; ++u) {
            CHECK(grad.weights[c][u] == doctest::Approx(expected * pooled[u]).epsilon(1e-14));
        }
    }
}

TEST_CASE("head gradients match central finite differences") {
    Rng rng(34);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t classes = 2 + rng.uniform_index(3);
        std::size_t channels = 1 + rng.uniform_index(5);
        GapHead head = random_head(rng, classes, channels);
        std::vector<double> pooled(channels);
        for (double& v : pooled) v = rng.normal();
        std::size_t label = rng.uniform_index(classes);
        GapGradient grad = gap_head_gradient(head, pooled, label);

        const double step = 1e-3;
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t u = 0; u < channels; ++u) {
                double numeric = oracles::central_difference(
                    [&](double w) {
                        GapHead perturbed = head;
                        perturbed.weights[c][u] = w;
                        return gap_sample_loss(perturbed, pooled, label);
                    },
                    head.weights[c][u], step);
                CHECK(oracles::relative_error(grad.weights[c][u], numeric) < 1e-4);
            }
            double numeric = oracles::central_difference(
                [&](double b) {
                    GapHead perturbed = head;
                    perturbed.bias[c] = b;
                    return gap_sample_loss(perturbed, pooled, label);
                },
                head.bias[c], step);
            CHECK(oracles::relative_error(grad.bias[c], numeric) < 1e-4);
        }
    }
}

TEST_CASE("training needs at least two represented classes") {
    Rng rng(35);
    std::map<std::string, std::size_t> labels;
    FeatureMapBank bank = separable_bank(rng, labels, 3);
    std::map<std::string, std::size_t> one_class;
    one_class[labels.begin()->first] = 0;
    GapHyper hyper;
    CHECK_THROWS_AS(train_gap_head(bank, one_class, 2, hyper), Error);
    std::map<std::string, std::size_t> missing = {{"ghost", 0}, {"phantom", 1}};
    CHECK_THROWS_AS(train_gap_head(bank, missing, 2, hyper), Error);
}

TEST_CASE("a single-channel unit weight reproduces the channel") {
    FeatureMapBank bank(1, 2, 3);
    std::vector<double> cells = {1.0, -2.0, 3.0, 4.0, 0.5, -0.5};
    bank.add("img", cells);
    GapHead head;
    head.class_count = 2;
    head.channel_count = 1;
    head.weights = {{1.0}, {0.0}};
    head.bias = {0.0, 0.0};
    Grid map = compute_saliency_map(bank, "img", head, 0);
    CHECK(map.cells == cells);
    Grid zero = compute_saliency_map(bank, "img", head, 1);
    for (double v : zero.cells) CHECK(v == 0.0);
}

TEST_CASE("saliency maps match the naive triple-loop oracle") {
    Rng rng(36);
    FeatureMapBank bank(5, 4, 3);
    std::vector<double> cells(5 * 12);
    for (double& v : cells) v = rng.normal();
    bank.add("img", cells);
    GapHead head = random_head(rng, 2, 5);
    Grid map = compute_saliency_map(bank, "img", head, 1);
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 3; ++x) {
            double expected = 0.0;
            for (std::size_t u = 0; u < 5; ++u) {
                expected += head.weights[1][u] * cells[u * 12 + y * 3 + x];
            }
            CHECK(map.at(y, x) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("saliency is linear in the head weights") {
    Rng rng(37);
    FeatureMapBank bank(3, 3, 3);
    std::vector<double> cells(27);
    for (double& v : cells) v = rng.normal();
    bank.add("img", cells);

    GapHead w1 = random_head(rng, 1, 3);
    GapHead w2 = random_head(rng, 1, 3);
    const double a = 1.7, b = -0.4;
    GapHead combined = w1;
    for (std::size_t u = 0; u < 3; ++u) {
        combined.weights[0][u] = a * w1.weights[0][u] + b * w2.weights[0][u];
    }
    Grid m1 = compute_saliency_map(bank, "img", w1, 0);
    Grid m2 = compute_saliency_map(bank, "img", w2, 0);
    Grid mc = compute_saliency_map(bank, "img", combined, 0);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(mc.cells[i] == doctest::Approx(a * m1.cells[i] + b * m2.cells[i]).epsilon(1e-10));
    }
}

TEST_CASE("a bimodal map thresholds between its modes") {
    std::vector<double> cells(16, 0.1);
    for (std::size_t i = 8; i < 16; ++i) cells[i] = 0.9;
    Grid map = grid_from(cells, 4, 4);
    double threshold = otsu_threshold(map);
    double in_original_units = 0.1 + (0.9 - 0.1) * threshold;
    CHECK(in_original_units > 0.1);
    CHECK(in_original_units < 0.9);
    Mask mask = binarize(map, threshold);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(mask.cells[i] == (cells[i] == 0.9 ? 1 : 0));
    }
}

TEST_CASE("OTSU equals the exhaustive 256-candidate oracle") {
    Rng rng(38);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t h = 2 + rng.uniform_index(15);
        std::size_t w = 2 + rng.uniform_index(15);
        std::vector<double> cells(h * w);
        for (double& v : cells) v = rng.uniform(-3.0, 3.0);
        Grid map = grid_from(cells, h, w);
        CHECK(otsu_threshold(map) == oracles::exhaustive_otsu(map));
    }
}

TEST_CASE("OTSU rejects constant maps") {
    Grid map = grid_from(std::vector<double>(9, 1.5), 3, 3);
    try {
        otsu_threshold(map);
        FAIL("expected degenerate map");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::degenerate_input);
    }
}

TEST_CASE("masks are invariant under affine rescaling of the map") {
    Rng rng(39);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> cells(36);
        for (double& v : cells) v = rng.normal();
        Grid map = grid_from(cells, 6, 6);
        Grid scaled = map;
        double a = rng.uniform(0.1, 5.0), b = rng.uniform(-10.0, 10.0);
        for (double& v : scaled.cells) v = a * v + b;
        Mask m1 = binarize(map, otsu_threshold(map));
        Mask m2 = binarize(scaled, otsu_threshold(scaled));
        CHECK(m1.cells == m2.cells);
    }
}

TEST_CASE("an all-true mask spans the whole grid") {
    Mask mask = mask_from(std::vector<std::uint8_t>(12, 1), 3, 4);
    BBox box = largest_component_bbox(mask);
    CHECK(box == BBox{0, 0, 3, 2});
}

TEST_CASE("a single true cell gives a one-cell box") {
    Mask mask = mask_from(std::vector<std::uint8_t>(24, 0), 4, 6);
    mask.set(2, 3, true);
    BBox box = largest_component_bbox(mask);
    CHECK(box == BBox{3, 2, 3, 2});
}

TEST_CASE("largest components match the flood-fill oracle") {
    Rng rng(40);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t h = 2 + rng.uniform_index(12);
        std::size_t w = 2 + rng.uniform_index(12);
        std::vector<std::uint8_t> cells(h * w);
        bool any = false;
        for (auto& c : cells) {
            c = rng.uniform01() < 0.4 ? 1 : 0;
            any = any || c;
        }
        if (!any) cells[rng.uniform_index(cells.size())] = 1;
        Mask mask = mask_from(cells, h, w);
        BBox box = largest_component_bbox(mask);
        oracles::Component expected = oracles::largest_component(mask);
        CHECK(box.x_min == expected.x_min);
        CHECK(box.x_max == expected.x_max);
        CHECK(box.y_min == expected.y_min);
        CHECK(box.y_max == expected.y_max);
    }
}

TEST_CASE("boxes carry no all-false border slack") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint8_t> cells(64);
        bool any = false;
        for (auto& c : cells) {
            c = rng.uniform01() < 0.3 ? 1 : 0;
            any = any || c;
        }
        if (!any) cells[5] = 1;
        Mask mask = mask_from(cells, 8, 8);
        BBox box = largest_component_bbox(mask);
        bool top = false, bottom = false, left = false, right = false;
        for (std::size_t x = box.x_min; x <= box.x_max; ++x) {
            top = top || mask.at(box.y_min, x);
            bottom = bottom || mask.at(box.y_max, x);
        }
        for (std::size_t y = box.y_min; y <= box.y_max; ++y) {
            left = left || mask.at(y, box.x_min);
            right = right || mask.at(y, box.x_max);
        }
        CHECK(top);
        CHECK(bottom);
        CHECK(left);
        CHECK(right);
    }
}

TEST_CASE("an all-false mask is an error") {
    Mask mask = mask_from(std::vector<std::uint8_t>(9, 0), 3, 3);
    CHECK_THROWS_AS(largest_component_bbox(mask), Error);
}

TEST_CASE("a full-map box reduces instance extraction to GAP") {
    Rng rng(42);
    FeatureMapBank bank(3, 4, 4);
    std::vector<double> cells(48);
    for (double& v : cells) v = rng.normal();
    bank.add("img", cells);
    std::vector<double> instance = extract_instance(bank, "img", BBox{0, 0, 3, 3});
    std::vector<double> pooled = gap_pool(bank, "img");
    for (std::size_t u = 0; u < 3; ++u) {
        CHECK(instance[u] == doctest::Approx(pooled[u]).epsilon(1e-12));
    }
}

TEST_CASE("a one-cell box extracts that map column") {
    FeatureMapBank bank(2, 2, 2);
    bank.add("img", {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0});
    std::vector<double> instance = extract_instance(bank, "img", BBox{1, 0, 1, 0});
    CHECK(instance == std::vector<double>{2.0, 6.0});
    CHECK_THROWS_AS(extract_instance(bank, "img", BBox{1, 0, 2, 0}), Error);
}

TEST_CASE("instance extraction matches brute-force pooling") {
    Rng rng(43);
    FeatureMapBank bank(4, 5, 6);
    std::vector<double> cells(4 * 30);
    for (double& v : cells) v = rng.normal();
    bank.add("img", cells);
    BBox box{1, 2, 4, 3};
    std::vector<double> instance = extract_instance(bank, "img", box);
    for (std::size_t u = 0; u < 4; ++u) {
        double sum = 0.0;
        int count = 0;
        for (std::size_t y = box.y_min; y <= box.y_max; ++y) {
            for (std::size_t x = box.x_min; x <= box.x_max; ++x) {
                sum += cells[u * 30 + y * 6 + x];
                ++count;
            }
        }
        CHECK(instance[u] == doctest::Approx(sum / count).epsilon(1e-12));
    }
}

TEST_CASE("batch extraction is deterministic across thread counts") {
    Rng rng(44);
    std::map<std::string, std::size_t> labels;
    FeatureMapBank bank = separable_bank(rng, labels, 6);
    GapHyper hyper;
    hyper.seed = 9;
    GapTrainResult trained = train_gap_head(bank, labels, 2, hyper);
    auto serial = extract_all(bank, trained.head, labels, 1);
    auto threaded = extract_all(bank, trained.head, labels, 3);
    REQUIRE(serial.size() == threaded.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].image_id == threaded[i].image_id);
        CHECK(serial[i].instance_feature == threaded[i].instance_feature);
        CHECK(serial[i].bbox == threaded[i].bbox);
    }
}
