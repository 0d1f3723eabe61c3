#include "poly/query_match.hpp"

#include <algorithm>
#include <cmath>

namespace poly::query_match {

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::dimension_mismatch,
                    "cosine: vectors of size " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::uint64_t match_count_single(std::span<const double> image,
                                 const std::vector<std::vector<double>>& pool,
                                 double similarity_threshold) {
    if (similarity_threshold < -1.0 || similarity_threshold > 1.0) {
        throw Error(ErrorCode::invalid_argument, "similarity threshold must lie in [-1, 1]");
    }
    std::uint64_t count = 0;
    for (const auto& candidate : pool) {
        if (cosine(image, candidate) >= similarity_threshold) ++count;
    }
    return count;
}

MatchCounts accumulate_counts(const std::vector<std::vector<double>>& query_images,
                              const std::vector<std::vector<double>>& pool,
                              double similarity_threshold, unsigned threads) {
    if (query_images.empty()) {
        throw Error(ErrorCode::insufficient_data, "accumulate_counts: no query images");
    }
    MatchCounts counts;
    counts.per_image.assign(query_images.size(), 0);
    parallel_for(query_images.size(), threads, [&](std::size_t i) {
        counts.per_image[i] = match_count_single(query_images[i], pool, similarity_threshold);
    });
    for (std::uint64_t c : counts.per_image) counts.total += c;
    return counts;
}

std::vector<corpus::CandidateQuery> rank_candidates(
    std::vector<corpus::CandidateQuery> candidates, std::size_t top_n) {
    for (const auto& c : candidates) {
        if (!c.match_score) {
            throw Error(ErrorCode::invalid_argument,
                        "rank_candidates: candidate '" + c.query_text + "' has no match score");
        }
    }
    std::erase_if(candidates,
                  [](const corpus::CandidateQuery& c) { return *c.match_score == 0; });
    std::sort(candidates.begin(), candidates.end(),
              [](const corpus::CandidateQuery& a, const corpus::CandidateQuery& b) {
                  if (*a.match_score != *b.match_score) return *a.match_score > *b.match_score;
                  if (a.corpus_count != b.corpus_count) return a.corpus_count > b.corpus_count;
                  return a.query_text < b.query_text;
              });
    if (candidates.size() > top_n) candidates.resize(top_n);
    return candidates;
}

}  // namespace poly::query_match
