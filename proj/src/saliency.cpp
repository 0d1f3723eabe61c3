#include "poly/saliency.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>

namespace poly::saliency {

namespace {

constexpr std::size_t kOtsuBins = 256;

std::vector<double> softmax(const std::vector<double>& logits) {
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

std::vector<double> head_logits(const GapHead& head, std::span<const double> pooled) {
    if (pooled.size() != head.channel_count) {
        throw Error(ErrorCode::dimension_mismatch,
                    "pooled vector dim " + std::to_string(pooled.size()) +
                        " does not match head channels " + std::to_string(head.channel_count));
    }
    std::vector<double> logits(head.class_count);
    for (std::size_t c = 0; c < head.class_count; ++c) {
        double z = head.bias[c];
        const auto& w = head.weights[c];
        for (std::size_t u = 0; u < head.channel_count; ++u) z += w[u] * pooled[u];
        logits[c] = z;
    }
    return logits;
}

}  // namespace

std::vector<double> gap_pool(const feature_store::FeatureMapBank& bank,
                             const std::string& image_id) {
    const std::vector<double>& map = bank.get(image_id);
    const std::size_t channels = bank.channels();
    const std::size_t area = bank.height() * bank.width();
    std::vector<double> pooled(channels, 0.0);
    for (std::size_t u = 0; u < channels; ++u) {
        double sum = 0.0;
        const double* plane = map.data() + u * area;
        for (std::size_t i = 0; i < area; ++i) sum += plane[i];
        pooled[u] = sum / static_cast<double>(area);
    }
    return pooled;
}

GapTrainResult train_gap_head(const feature_store::FeatureMapBank& maps,
                              const std::map<std::string, std::size_t>& labels,
                              std::size_t class_count, const GapHyper& hyper) {
    if (class_count < 2) {
        throw Error(ErrorCode::insufficient_data, "head training needs at least 2 classes");
    }
    if (labels.empty()) {
        throw Error(ErrorCode::insufficient_data, "head training needs labeled maps");
    }

    struct Sample {
        std::vector<double> pooled;
        std::size_t label;
    };
    std::vector<Sample> samples;
    samples.reserve(labels.size());
    std::vector<bool> class_seen(class_count, false);
    for (const auto& [image_id, label] : labels) {
        if (label >= class_count) {
            throw Error(ErrorCode::invalid_argument,
                        "label " + std::to_string(label) + " out of range for '" + image_id + "'");
        }
        samples.push_back({gap_pool(maps, image_id), label});
        class_seen[label] = true;
    }
    std::size_t seen = 0;
    for (bool s : class_seen) seen += s ? 1 : 0;
    if (seen < 2) {
        throw Error(ErrorCode::insufficient_data, "labels cover fewer than 2 classes");
    }

    GapTrainResult result;
    GapHead& head = result.head;
    head.class_count = class_count;
    head.channel_count = maps.channels();
    head.weights.assign(class_count, std::vector<double>(head.channel_count, 0.0));
    head.bias.assign(class_count, 0.0);

    Rng rng(hyper.seed);
    result.epoch_loss.reserve(hyper.epochs);
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(samples);
        double loss_sum = 0.0;
        for (const Sample& s : samples) {
            loss_sum += gap_sample_loss(head, s.pooled, s.label);
            GapGradient grad = gap_head_gradient(head, s.pooled, s.label);
            for (std::size_t c = 0; c < class_count; ++c) {
                auto& w = head.weights[c];
                for (std::size_t u = 0; u < head.channel_count; ++u) {
                    w[u] -= hyper.learning_rate * (grad.weights[c][u] + hyper.l2 * w[u]);
                }
                head.bias[c] -= hyper.learning_rate * grad.bias[c];
            }
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(samples.size()));
    }
    return result;
}

double gap_sample_loss(const GapHead& head, std::span<const double> pooled, std::size_t label) {
    if (label >= head.class_count) {
        throw Error(ErrorCode::invalid_argument, "label out of range");
    }
    std::vector<double> probs = softmax(head_logits(head, pooled));
    return -std::log(std::max(probs[label], 1e-300));
}

GapGradient gap_head_gradient(const GapHead& head, std::span<const double> pooled,
                              std::size_t label) {
    if (label >= head.class_count) {
        throw Error(ErrorCode::invalid_argument, "label out of range");
    }
    std::vector<double> probs = softmax(head_logits(head, pooled));
    GapGradient grad;
    grad.weights.assign(head.class_count, std::vector<double>(head.channel_count, 0.0));
    grad.bias.assign(head.class_count, 0.0);
    for (std::size_t c = 0; c < head.class_count; ++c) {
        double err = probs[c] - (c == label ? 1.0 : 0.0);
        for (std::size_t u = 0; u < head.channel_count; ++u) {
            grad.weights[c][u] = err * pooled[u];
        }
        grad.bias[c] = err;
    }
    return grad;
}

double gap_head_loss(const GapHead& head, const feature_store::FeatureMapBank& maps,
                     const std::map<std::string, std::size_t>& labels) {
    if (labels.empty()) {
        throw Error(ErrorCode::insufficient_data, "loss over an empty label set");
    }
    double loss_sum = 0.0;
    for (const auto& [image_id, label] : labels) {
        std::vector<double> probs = gap_head_probabilities(head, gap_pool(maps, image_id));
        loss_sum += -std::log(std::max(probs.at(label), 1e-300));
    }
    return loss_sum / static_cast<double>(labels.size());
}

std::vector<double> gap_head_probabilities(const GapHead& head, std::span<const double> pooled) {
    return softmax(head_logits(head, pooled));
}

std::size_t gap_head_argmax(const GapHead& head, std::span<const double> pooled) {
    std::vector<double> logits = head_logits(head, pooled);
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
        if (logits[c] > logits[best]) best = c;
    }
    return best;
}

Grid compute_saliency_map(const feature_store::FeatureMapBank& maps, const std::string& image_id,
                          const GapHead& head, std::size_t class_index) {
    if (maps.channels() != head.channel_count) {
        throw Error(ErrorCode::dimension_mismatch,
                    "map channels " + std::to_string(maps.channels()) +
                        " do not match head channels " + std::to_string(head.channel_count));
    }
    if (class_index >= head.class_count) {
        throw Error(ErrorCode::invalid_argument, "class index out of range");
    }
    const std::vector<double>& map = maps.get(image_id);
    const std::size_t area = maps.height() * maps.width();
    Grid grid;
    grid.height = maps.height();
    grid.width = maps.width();
    grid.cells.assign(area, 0.0);
    const auto& w = head.weights[class_index];
    for (std::size_t u = 0; u < maps.channels(); ++u) {
        const double* plane = map.data() + u * area;
        for (std::size_t i = 0; i < area; ++i) grid.cells[i] += w[u] * plane[i];
    }
    return grid;
}

double otsu_threshold(const Grid& map) {
    if (map.cells.size() < 2) {
        throw Error(ErrorCode::insufficient_data, "OTSU needs at least 2 cells");
    }
    auto [min_it, max_it] = std::minmax_element(map.cells.begin(), map.cells.end());
    const double lo = *min_it, hi = *max_it;
    if (!(hi > lo)) {
        throw Error(ErrorCode::degenerate_input, "OTSU is undefined on a constant map");
    }
    const double range = hi - lo;

    std::array<std::uint64_t, kOtsuBins> histogram{};
    for (double v : map.cells) {
        double normalized = (v - lo) / range;
        auto bin = static_cast<std::size_t>(normalized * static_cast<double>(kOtsuBins));
        if (bin >= kOtsuBins) bin = kOtsuBins - 1;
        ++histogram[bin];
    }

    const double total = static_cast<double>(map.cells.size());
    double grand_sum = 0.0;
    for (std::size_t b = 0; b < kOtsuBins; ++b) {
        grand_sum += static_cast<double>(b) * static_cast<double>(histogram[b]);
    }

    // candidate k splits bins [0, k) | [k, 256); variance uses bin indices
    double best_variance = -1.0;
    std::size_t best_k = 1;
    double below_count = 0.0;
    double below_sum = 0.0;
    for (std::size_t k = 1; k < kOtsuBins; ++k) {
        below_count += static_cast<double>(histogram[k - 1]);
        below_sum += static_cast<double>(k - 1) * static_cast<double>(histogram[k - 1]);
        double above_count = total - below_count;
        if (below_count == 0.0 || above_count == 0.0) continue;
        double mean_below = below_sum / below_count;
        double mean_above = (grand_sum - below_sum) / above_count;
        double variance =
            (below_count / total) * (above_count / total) * (mean_below - mean_above) *
            (mean_below - mean_above);
        if (variance > best_variance) {
            best_variance = variance;
            best_k = k;
        }
    }
    return static_cast<double>(best_k) / static_cast<double>(kOtsuBins);
}

Mask binarize(const Grid& map, double threshold) {
    auto [min_it, max_it] = std::minmax_element(map.cells.begin(), map.cells.end());
    const double lo = *min_it, hi = *max_it;
    if (!(hi > lo)) {
        throw Error(ErrorCode::degenerate_input, "cannot binarize a constant map");
    }
    Mask mask;
    mask.height = map.height;
    mask.width = map.width;
    mask.cells.assign(map.cells.size(), 0);
    for (std::size_t i = 0; i < map.cells.size(); ++i) {
        double normalized = (map.cells[i] - lo) / (hi - lo);
        mask.cells[i] = normalized >= threshold ? 1 : 0;
    }
    return mask;
}

ComponentInfo largest_component(const Mask& mask) {
    const std::size_t h = mask.height, w = mask.width;
    std::vector<std::uint8_t> visited(h * w, 0);
    bool found = false;
    std::size_t best_size = 0;
    BBox best{};

    std::deque<std::pair<std::size_t, std::size_t>> frontier;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t idx = y * w + x;
            if (!mask.cells[idx] || visited[idx]) continue;

            // BFS one component; scan order guarantees the seed is its
            // lexicographically smallest (y, x) cell, so first-wins ties
            // match the contract
            std::size_t size = 0;
            BBox box{x, y, x, y};
            visited[idx] = 1;
            frontier.clear();
            frontier.emplace_back(y, x);
            while (!frontier.empty()) {
                auto [cy, cx] = frontier.front();
                frontier.pop_front();
                ++size;
                box.x_min = std::min(box.x_min, cx);
                box.x_max = std::max(box.x_max, cx);
                box.y_min = std::min(box.y_min, cy);
                box.y_max = std::max(box.y_max, cy);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        std::size_t ny = cy + static_cast<std::size_t>(dy);
                        std::size_t nx = cx + static_cast<std::size_t>(dx);
                        if (ny >= h || nx >= w) continue;  // wrapped negatives land here too
                        std::size_t nidx = ny * w + nx;
                        if (!mask.cells[nidx] || visited[nidx]) continue;
                        visited[nidx] = 1;
                        frontier.emplace_back(ny, nx);
                    }
                }
            }
            if (size > best_size) {
                best_size = size;
                best = box;
                found = true;
            }
        }
    }
    if (!found) {
        throw Error(ErrorCode::degenerate_input, "mask has no true cells");
    }
    return ComponentInfo{best_size, best};
}

BBox largest_component_bbox(const Mask& mask) { return largest_component(mask).bbox; }

std::vector<double> extract_instance(const feature_store::FeatureMapBank& maps,
                                     const std::string& image_id, const BBox& bbox) {
    if (bbox.x_max >= maps.width() || bbox.y_max >= maps.height() || bbox.x_min > bbox.x_max ||
        bbox.y_min > bbox.y_max) {
        throw Error(ErrorCode::invalid_argument, "bounding box outside the map");
    }
    const std::vector<double>& map = maps.get(image_id);
    const std::size_t area = maps.height() * maps.width();
    const double cell_count =
        static_cast<double>((bbox.x_max - bbox.x_min + 1) * (bbox.y_max - bbox.y_min + 1));
    std::vector<double> instance(maps.channels(), 0.0);
    for (std::size_t u = 0; u < maps.channels(); ++u) {
        const double* plane = map.data() + u * area;
        double sum = 0.0;
        for (std::size_t y = bbox.y_min; y <= bbox.y_max; ++y) {
            for (std::size_t x = bbox.x_min; x <= bbox.x_max; ++x) {
                sum += plane[y * maps.width() + x];
            }
        }
        instance[u] = sum / cell_count;
    }
    return instance;
}

SaliencyResult extract_saliency_instance(const feature_store::FeatureMapBank& maps,
                                         const std::string& image_id, const GapHead& head,
                                         const std::map<std::string, std::size_t>& labels) {
    SaliencyResult result;
    result.image_id = image_id;
    auto it = labels.find(image_id);
    result.class_index =
        it != labels.end() ? it->second : gap_head_argmax(head, gap_pool(maps, image_id));
    result.map = compute_saliency_map(maps, image_id, head, result.class_index);
    result.threshold = otsu_threshold(result.map);
    result.mask = binarize(result.map, result.threshold);
    result.bbox = largest_component_bbox(result.mask);
    result.instance_feature = extract_instance(maps, image_id, result.bbox);
    return result;
}

std::vector<SaliencyResult> extract_all(const feature_store::FeatureMapBank& maps,
                                        const GapHead& head,
                                        const std::map<std::string, std::size_t>& labels,
                                        unsigned threads) {
    std::vector<std::string> ids;
    ids.reserve(maps.size());
    for (const auto& [id, values] : maps.maps()) ids.push_back(id);

    std::vector<SaliencyResult> results(ids.size());
    std::vector<std::string> failures(ids.size());
    parallel_for(ids.size(), threads, [&](std::size_t i) {
        try {
            results[i] = extract_saliency_instance(maps, ids[i], head, labels);
        } catch (const std::exception& e) {
            failures[i] = e.what();
        }
    });
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!failures[i].empty()) {
            throw Error(ErrorCode::degenerate_input,
                        "saliency extraction failed for '" + ids[i] + "': " + failures[i]);
        }
    }
    return results;
}

}  // namespace poly::saliency
