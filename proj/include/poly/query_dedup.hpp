#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "poly/common.hpp"

namespace poly::query_dedup {

struct ScorerHyper {
    double l2 = 1e-3;
    double learning_rate = 0.05;
    std::size_t epochs = 100;
    std::uint64_t seed = 1;
};

/// Probabilistic linear scorer: score(x) = sigmoid(w.x + b), the pairwise
/// classifier used to measure how separable two queries' image sets are.
struct LinearScorer {
    std::vector<double> weights;
    double bias = 0.0;
    std::pair<std::string, std::string> trained_on;
    bool degenerate = false;  // all training vectors identical across classes

    double score(std::span<const double> x) const;
};

struct DedupParams {
    double alpha = 0.6;
    double beta = 30.0;
    double relevance_weight = 1.0;  // scaling of the relevance term
    double train_fraction = 0.5;    // train/validation split
    ScorerHyper scorer;
    std::uint64_t seed = 1;
};

/// The query-selection instance: relevance vector, symmetric zero-diagonal
/// distinctness matrix, and the relevance scaling weight.
struct SelectionProblem {
    std::vector<double> relevance;           // normalized match scores, in [0, 1]
    std::vector<std::vector<double>> distinctness;
    double relevance_weight = 1.0;

    std::size_t size() const { return relevance.size(); }
    void validate() const;
};

struct SelectionSolution {
    std::vector<double> relaxed;   // box point reached by the solver
    std::vector<int> selected;     // 1 = keep, from thresholding relaxed at 0.5
    double objective = 0.0;        // evaluated on the binary vector
};

/// L2-regularized logistic regression fit by seeded SGD; pos scores toward 1,
/// neg toward 0. Deterministic given hyper.seed.
LinearScorer train_binary_scorer(const std::vector<std::vector<double>>& pos,
                                 const std::vector<std::vector<double>>& neg,
                                 const ScorerHyper& hyper);

/// Arithmetic mean of scorer outputs over a validation set.
double mean_confidence(const LinearScorer& scorer,
                       const std::vector<std::vector<double>>& validation);

/// Saturating transform of mean classifier confidence: strictly increasing,
/// zero exactly at alpha, and sharply negative below it so that visually
/// similar query pairs are penalized.
double distinctness_from_confidence(double confidence, double alpha, double beta);

/// Distinctness of one unordered query pair: split both image sets, train a
/// shared scorer on the training halves, average the two held-out confidences
/// and apply the saturating transform. Symmetric by construction.
double distinctness(std::size_t query_a, std::size_t query_b,
                    const std::vector<std::vector<std::vector<double>>>& query_images,
                    const DedupParams& params);

/// Fills the full matrix over all unordered pairs and normalizes the match
/// scores into the relevance vector (division by the max score).
SelectionProblem build_selection_problem(const std::vector<std::uint64_t>& match_scores,
                                         const std::vector<std::vector<std::vector<double>>>& query_images,
                                         const DedupParams& params);

/// Box-relaxed maximization of relevance_weight * phi.gamma + gamma^T D gamma
/// by coordinate ascent with multiple restarts. With a zero diagonal the
/// objective is linear in each coordinate, so every ascent run terminates at
/// a vertex of the box. Coordinate ties resolve to 1 (keep the query);
/// equal-objective runs resolve to the lexicographically largest vector,
/// which keeps lower-indexed queries.
SelectionSolution select_queries(const SelectionProblem& problem, std::size_t restarts,
                                 std::uint64_t seed);

/// Exact maximizer by enumeration of all 2^N binary vectors (N <= 20).
/// Objective ties resolve to the lexicographically smallest vector.
SelectionSolution exhaustive_select(const SelectionProblem& problem);

/// Objective value of a binary selection vector.
double selection_objective(const SelectionProblem& problem, const std::vector<int>& gamma);

}  // namespace poly::query_dedup
