#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "poly/common.hpp"
#include "poly/corpus.hpp"

namespace poly::query_match {

struct MatchParams {
    double similarity_threshold = 0.75;  // cosine cut in [-1, 1]
    std::size_t top_n = 10;
    std::size_t per_query_images = 5;
    unsigned threads = 1;
};

/// Per-image match counts for one candidate query plus their accumulated sum.
struct MatchCounts {
    std::vector<std::uint64_t> per_image;
    std::uint64_t total = 0;
};

/// Cosine similarity; a zero vector is similar to nothing (returns 0).
double cosine(std::span<const double> a, std::span<const double> b);

/// Number of pool vectors whose cosine similarity with `image` reaches the
/// threshold.
std::uint64_t match_count_single(std::span<const double> image,
                                 const std::vector<std::vector<double>>& pool,
                                 double similarity_threshold);

/// Counts matches of every query image against the keyword pool and
/// accumulates the total.
MatchCounts accumulate_counts(const std::vector<std::vector<double>>& query_images,
                              const std::vector<std::vector<double>>& pool,
                              double similarity_threshold, unsigned threads = 1);

/// Keeps the top_n scored candidates by match score (descending), breaking
/// ties by corpus_count descending then query_text ascending. Zero-score
/// candidates are dropped even if the result ends up shorter than top_n.
std::vector<corpus::CandidateQuery> rank_candidates(
    std::vector<corpus::CandidateQuery> candidates, std::size_t top_n);

}  // namespace poly::query_match
