#include <doctest.h>

#include "oracles.hpp"
#include "poly/query_match.hpp"

using namespace poly;
using namespace poly::query_match;

namespace {

std::vector<std::vector<double>> random_vectors(Rng& rng, std::size_t count, std::size_t dim) {
    std::vector<std::vector<double>> out(count, std::vector<double>(dim));
    for (auto& v : out) {
        for (double& x : v) x = rng.normal();
    }
    return out;
}

}  // namespace

TEST_CASE("an image matches every copy of itself") {
    std::vector<double> x = {1.0, 2.0, 3.0};
    std::vector<std::vector<double>> pool(5, x);
    CHECK(match_count_single(x, pool, 0.9) == 5);
}

TEST_CASE("orthogonal pools contribute no matches") {
    std::vector<double> x = {1.0, 0.0};
    std::vector<std::vector<double>> pool = {{0.0, 1.0}, {0.0, -2.0}, {0.0, 5.0}};
    CHECK(match_count_single(x, pool, 0.5) == 0);
}

TEST_CASE("zero vectors are similar to nothing") {
    CHECK(cosine(std::vector<double>{0.0, 0.0}, std::vector<double>{3.0, 4.0}) == 0.0);
}

TEST_CASE("cosine rejects mismatched dimensions") {
    CHECK_THROWS_AS(cosine(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), Error);
}

TEST_CASE("single-image counting matches the brute-force oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 25; ++trial) {
        auto pool = random_vectors(rng, 3 + rng.uniform_index(30), 4);
        auto query = random_vectors(rng, 1, 4);
        double tau = rng.uniform(-0.5, 0.9);
        CHECK(match_count_single(query[0], pool, tau) ==
              oracles::brute_force_match_total(query, pool, tau));
    }
}

TEST_CASE("all-orthogonal query images accumulate a zero total") {
    // queries absent from the pool's visual space score zero
    std::vector<std::vector<double>> query = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}};
    std::vector<std::vector<double>> pool = {{0.0, 0.0, 1.0}, {0.0, 0.0, -4.0}};
    MatchCounts counts = accumulate_counts(query, pool, 0.5);
    CHECK(counts.total == 0);
    CHECK(counts.per_image == std::vector<std::uint64_t>{0, 0});
}

TEST_CASE("one shared image yields exactly one match at a high threshold") {
    std::vector<double> shared = {0.3, -1.2, 0.8};
    std::vector<std::vector<double>> query = {{5.0, 0.1, -0.2}, shared};
    std::vector<std::vector<double>> pool = {shared, {-5.0, 0.0, 0.1}};
    MatchCounts counts = accumulate_counts(query, pool, 0.99);
    CHECK(counts.total == 1);
}

TEST_CASE("accumulated totals match the brute-force oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 25; ++trial) {
        auto query = random_vectors(rng, 1 + rng.uniform_index(6), 5);
        auto pool = random_vectors(rng, 1 + rng.uniform_index(40), 5);
        double tau = rng.uniform(-0.9, 0.9);
        MatchCounts counts = accumulate_counts(query, pool, tau);
        CHECK(counts.total == oracles::brute_force_match_total(query, pool, tau));
        std::uint64_t sum = 0;
        for (auto c : counts.per_image) sum += c;
        CHECK(counts.total == sum);
    }
}

TEST_CASE("totals are invariant under pool and query permutations") {
    Rng rng(7);
    auto query = random_vectors(rng, 5, 4);
    auto pool = random_vectors(rng, 17, 4);
    std::uint64_t reference = accumulate_counts(query, pool, 0.2).total;
    for (int trial = 0; trial < 5; ++trial) {
        rng.shuffle(query);
        rng.shuffle(pool);
        CHECK(accumulate_counts(query, pool, 0.2).total == reference);
    }
}

TEST_CASE("totals are monotone non-increasing in the threshold") {
    Rng rng(8);
    auto query = random_vectors(rng, 4, 6);
    auto pool = random_vectors(rng, 30, 6);
    std::uint64_t previous = UINT64_MAX;
    for (int step = 0; step <= 10; ++step) {
        double tau = -1.0 + 0.2 * step;
        std::uint64_t total = accumulate_counts(query, pool, tau).total;
        CHECK(total <= previous);
        previous = total;
    }
}

TEST_CASE("threaded counting agrees with single-threaded") {
    Rng rng(9);
    auto query = random_vectors(rng, 9, 5);
    auto pool = random_vectors(rng, 33, 5);
    MatchCounts single = accumulate_counts(query, pool, 0.1, 1);
    MatchCounts threaded = accumulate_counts(query, pool, 0.1, 4);
    CHECK(single.per_image == threaded.per_image);
    CHECK(single.total == threaded.total);
}

namespace {

corpus::CandidateQuery scored(const std::string& text, std::uint64_t corpus_count,
                              std::uint64_t score) {
    corpus::CandidateQuery q;
    q.keyword = "kw";
    q.query_text = text;
    q.corpus_count = corpus_count;
    q.match_score = score;
    return q;
}

}  // namespace

TEST_CASE("ranking keeps the top N and drops zero scores") {
    std::vector<corpus::CandidateQuery> candidates = {
        scored("kw a", 1, 7),
        scored("kw b", 9, 5),
        scored("kw c", 2, 5),
        scored("kw d", 100, 0),
    };
    auto ranked = rank_candidates(candidates, 3);
    REQUIRE(ranked.size() == 3);
    CHECK(ranked[0].query_text == "kw a");
    CHECK(ranked[1].query_text == "kw b");  // corpus count breaks the 5-5 tie
    CHECK(ranked[2].query_text == "kw c");
}

TEST_CASE("ranking with all-zero scores returns nothing") {
    std::vector<corpus::CandidateQuery> candidates = {scored("kw a", 5, 0), scored("kw b", 9, 0)};
    CHECK(rank_candidates(candidates, 5).empty());
}

TEST_CASE("ranking matches a full sort oracle on random candidates") {
    Rng rng(10);
    std::vector<corpus::CandidateQuery> candidates;
    for (int i = 0; i < 50; ++i) {
        candidates.push_back(scored("kw q" + std::to_string(i), rng.uniform_index(10),
                                    rng.uniform_index(6)));
    }
    auto ranked = rank_candidates(candidates, 10);

    auto oracle = candidates;
    std::erase_if(oracle, [](const auto& c) { return *c.match_score == 0; });
    std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
        if (*a.match_score != *b.match_score) return *a.match_score > *b.match_score;
        if (a.corpus_count != b.corpus_count) return a.corpus_count > b.corpus_count;
        return a.query_text < b.query_text;
    });
    oracle.resize(std::min<std::size_t>(10, oracle.size()));
    REQUIRE(ranked.size() == oracle.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        CHECK(ranked[i].query_text == oracle[i].query_text);
    }
}

TEST_CASE("ranking refuses unscored candidates") {
    corpus::CandidateQuery unscored;
    unscored.query_text = "kw x";
    CHECK_THROWS_AS(rank_candidates({unscored}, 3), Error);
}
