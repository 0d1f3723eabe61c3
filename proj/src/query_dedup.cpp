#include "poly/query_dedup.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace poly::query_dedup {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

double LinearScorer::score(std::span<const double> x) const {
    if (x.size() != weights.size()) {
        throw Error(ErrorCode::dimension_mismatch,
                    "scorer expects dim " + std::to_string(weights.size()) + ", got " +
                        std::to_string(x.size()));
    }
    double z = bias;
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * x[i];
    return sigmoid(z);
}

LinearScorer train_binary_scorer(const std::vector<std::vector<double>>& pos,
                                 const std::vector<std::vector<double>>& neg,
                                 const ScorerHyper& hyper) {
    if (pos.empty() || neg.empty()) {
        throw Error(ErrorCode::insufficient_data, "both classes need at least one sample");
    }
    const std::size_t dim = pos.front().size();
    for (const auto& v : pos) {
        if (v.size() != dim)
            throw Error(ErrorCode::dimension_mismatch, "positive sample dimension mismatch");
    }
    for (const auto& v : neg) {
        if (v.size() != dim)
            throw Error(ErrorCode::dimension_mismatch, "negative sample dimension mismatch");
    }

    bool degenerate = true;
    for (const auto& v : pos) {
        if (v != pos.front()) { degenerate = false; break; }
    }
    if (degenerate) {
        for (const auto& v : neg) {
            if (v != pos.front()) { degenerate = false; break; }
        }
    }
    if (degenerate) {
        std::cerr << "[polysense] warning: all training vectors identical across classes, "
                     "scorer will stay near chance\n";
    }

    struct Sample {
        const std::vector<double>* x;
        double y;
    };
    std::vector<Sample> samples;
    samples.reserve(pos.size() + neg.size());
    for (const auto& v : pos) samples.push_back({&v, 1.0});
    for (const auto& v : neg) samples.push_back({&v, 0.0});

    LinearScorer scorer;
    scorer.weights.assign(dim, 0.0);
    scorer.degenerate = degenerate;

    Rng rng(hyper.seed);
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(samples);
        for (const Sample& s : samples) {
            double z = scorer.bias;
            for (std::size_t i = 0; i < dim; ++i) z += scorer.weights[i] * (*s.x)[i];
            double err = s.y - sigmoid(z);
            for (std::size_t i = 0; i < dim; ++i) {
                scorer.weights[i] +=
                    hyper.learning_rate * (err * (*s.x)[i] - hyper.l2 * scorer.weights[i]);
            }
            scorer.bias += hyper.learning_rate * err;
        }
    }
    return scorer;
}

double mean_confidence(const LinearScorer& scorer,
                       const std::vector<std::vector<double>>& validation) {
    if (validation.empty()) {
        throw Error(ErrorCode::insufficient_data, "mean_confidence over an empty validation set");
    }
    double sum = 0.0;
    for (const auto& x : validation) sum += scorer.score(x);
    return sum / static_cast<double>(validation.size());
}

double distinctness_from_confidence(double confidence, double alpha, double beta) {
    if (beta <= 0.0) {
        throw Error(ErrorCode::invalid_argument, "beta must be positive");
    }
    return 1.0 - std::exp(-beta * (confidence - alpha));
}

double distinctness(std::size_t query_a, std::size_t query_b,
                    const std::vector<std::vector<std::vector<double>>>& query_images,
                    const DedupParams& params) {
    if (query_a == query_b) return 0.0;
    const auto& images_a = query_images.at(query_a);
    const auto& images_b = query_images.at(query_b);
    if (images_a.size() < 2 || images_b.size() < 2) {
        throw Error(ErrorCode::insufficient_data,
                    "each query needs at least 2 images to split for distinctness");
    }

    auto split = [&](const std::vector<std::vector<double>>& images, std::uint64_t salt) {
        std::vector<std::size_t> order(images.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_seed(params.seed, salt, query_a * 0x10001 + query_b));
        rng.shuffle(order);
        std::size_t train_count = std::max<std::size_t>(
            1, std::min(images.size() - 1,
                        static_cast<std::size_t>(std::floor(
                            params.train_fraction * static_cast<double>(images.size())))));
        std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> out;
        for (std::size_t i = 0; i < order.size(); ++i) {
            (i < train_count ? out.first : out.second).push_back(images[order[i]]);
        }
        return out;
    };

    auto [train_a, val_a] = split(images_a, 0xa);
    auto [train_b, val_b] = split(images_b, 0xb);

    ScorerHyper hyper = params.scorer;
    hyper.seed = mix_seed(params.seed, 0x5c0, query_a * 0x10001 + query_b);
    LinearScorer scorer = train_binary_scorer(train_a, train_b, hyper);
    scorer.trained_on = {std::to_string(query_a), std::to_string(query_b)};

    // confidence of each held-out half under its own class; the scorer gives
    // P(class a), so class b reads the complement
    double conf_a = mean_confidence(scorer, val_a);
    double conf_b = 1.0 - mean_confidence(scorer, val_b);
    return distinctness_from_confidence((conf_a + conf_b) / 2.0, params.alpha, params.beta);
}

void SelectionProblem::validate() const {
    const std::size_t n = relevance.size();
    if (distinctness.size() != n) {
        throw Error(ErrorCode::dimension_mismatch, "distinctness matrix size mismatch");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (distinctness[i].size() != n) {
            throw Error(ErrorCode::dimension_mismatch, "distinctness matrix is not square");
        }
        if (distinctness[i][i] != 0.0) {
            throw Error(ErrorCode::invalid_argument, "distinctness diagonal must be zero");
        }
        if (relevance[i] < 0.0 || relevance[i] > 1.0 || !std::isfinite(relevance[i])) {
            throw Error(ErrorCode::invalid_argument, "relevance entries must lie in [0, 1]");
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(distinctness[i][j])) {
                throw Error(ErrorCode::non_finite, "distinctness entries must be finite");
            }
            if (distinctness[i][j] != distinctness[j][i]) {
                throw Error(ErrorCode::invalid_argument, "distinctness matrix must be symmetric");
            }
        }
    }
}

SelectionProblem build_selection_problem(const std::vector<std::uint64_t>& match_scores,
                                         const std::vector<std::vector<std::vector<double>>>& query_images,
                                         const DedupParams& params) {
    const std::size_t n = match_scores.size();
    if (query_images.size() != n) {
        throw Error(ErrorCode::dimension_mismatch,
                    "match score and image list counts disagree");
    }
    if (n < 2) {
        throw Error(ErrorCode::insufficient_data, "selection needs at least 2 queries");
    }

    SelectionProblem problem;
    problem.relevance_weight = params.relevance_weight;
    std::uint64_t max_score = *std::max_element(match_scores.begin(), match_scores.end());
    problem.relevance.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        problem.relevance[i] =
            max_score == 0 ? 0.0
                           : static_cast<double>(match_scores[i]) / static_cast<double>(max_score);
    }
    problem.distinctness.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            double d = distinctness(a, b, query_images, params);
            problem.distinctness[a][b] = d;
            problem.distinctness[b][a] = d;
        }
    }
    return problem;
}

double selection_objective(const SelectionProblem& problem, const std::vector<int>& gamma) {
    const std::size_t n = problem.size();
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!gamma[i]) continue;
        value += problem.relevance_weight * problem.relevance[i];
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i && gamma[j]) value += problem.distinctness[i][j];
        }
    }
    return value;
}

namespace {

// One ascent run from a box start point; with the zero diagonal each
// coordinate update is exact, so the run stops at a vertex.
std::vector<int> coordinate_ascent(const SelectionProblem& problem, std::vector<double> point) {
    const std::size_t n = problem.size();
    std::vector<int> gamma(n, 0);
    constexpr std::size_t kMaxSweeps = 200;
    bool changed = true;
    bool first = true;
    for (std::size_t sweep = 0; sweep < kMaxSweeps && (changed || first); ++sweep) {
        changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            double coefficient = problem.relevance_weight * problem.relevance[i];
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) coefficient += 2.0 * problem.distinctness[i][j] * point[j];
            }
            double updated = coefficient >= 0.0 ? 1.0 : 0.0;
            if (updated != point[i]) changed = true;
            point[i] = updated;
        }
        first = false;
    }
    for (std::size_t i = 0; i < n; ++i) gamma[i] = point[i] >= 0.5 ? 1 : 0;
    return gamma;
}

bool lex_greater(const std::vector<int>& a, const std::vector<int>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return a[i] > b[i];
    }
    return false;
}

}  // namespace

SelectionSolution select_queries(const SelectionProblem& problem, std::size_t restarts,
                                 std::uint64_t seed) {
    problem.validate();
    const std::size_t n = problem.size();

    std::vector<std::vector<double>> starts;
    starts.push_back(std::vector<double>(n, 1.0));
    starts.push_back(std::vector<double>(n, 0.0));
    Rng rng(seed);
    for (std::size_t r = 0; r < restarts; ++r) {
        std::vector<double> point(n);
        for (double& v : point) v = rng.uniform01();
        starts.push_back(std::move(point));
    }

    SelectionSolution best;
    bool have_best = false;
    for (const auto& start : starts) {
        std::vector<int> gamma = coordinate_ascent(problem, start);
        double objective = selection_objective(problem, gamma);
        bool better = !have_best || objective > best.objective ||
                      (objective == best.objective && lex_greater(gamma, best.selected));
        if (better) {
            best.selected = gamma;
            best.objective = objective;
            best.relaxed.assign(gamma.begin(), gamma.end());
            have_best = true;
        }
    }
    return best;
}

SelectionSolution exhaustive_select(const SelectionProblem& problem) {
    problem.validate();
    const std::size_t n = problem.size();
    if (n > 20) {
        throw Error(ErrorCode::invalid_argument,
                    "exhaustive_select refuses instances larger than 20 queries");
    }

    SelectionSolution best;
    bool have_best = false;
    std::vector<int> gamma(n, 0);
    const std::uint64_t limit = 1ULL << n;
    for (std::uint64_t mask = 0; mask < limit; ++mask) {
        for (std::size_t i = 0; i < n; ++i) gamma[i] = (mask >> i) & 1 ? 1 : 0;
        double objective = selection_objective(problem, gamma);
        bool better = !have_best || objective > best.objective ||
                      (objective == best.objective && lex_greater(best.selected, gamma));
        if (better) {
            best.selected = gamma;
            best.objective = objective;
            best.relaxed.assign(gamma.begin(), gamma.end());
            have_best = true;
        }
    }
    return best;
}

}  // namespace poly::query_dedup
