#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "poly/common.hpp"

namespace poly::corpus {

/// One dependency record from the n-gram corpus file.
struct NgramEntry {
    std::string modifier;
    std::string head;
    std::string pos_tag;
    std::uint64_t count = 0;
};

/// A modifier+keyword text query proposed for one visual sense.
struct CandidateQuery {
    std::string keyword;
    std::string modifier;
    std::string query_text;  // "<keyword> <modifier>", lowercase
    std::uint64_t corpus_count = 0;
    std::optional<std::uint64_t> match_score;  // filled by the match stage
};

struct ParseResult {
    std::vector<NgramEntry> entries;
    std::size_t malformed_lines = 0;
    std::size_t total_lines = 0;

    /// True when the file had records but none parsed.
    bool all_malformed() const { return malformed_lines > 0 && entries.empty(); }
};

/// Parses a 4-field TSV corpus stream: modifier, head, pos_tag, count.
/// Malformed lines are counted and skipped; blank lines are ignored.
/// Throws ErrorCode::decode_error on non-UTF-8 input.
ParseResult parse_ngram_file(std::istream& source);

/// Filters entries to NOUN modifiers of `keyword` (case-insensitive head
/// match), aggregates duplicate modifiers by summing counts, and orders the
/// result by corpus_count descending, modifier ascending. Multi-token
/// modifiers and modifiers equal to the keyword are skipped.
std::vector<CandidateQuery> discover_candidates(const std::string& keyword,
                                                const std::vector<NgramEntry>& entries);

std::string candidates_to_json(const std::vector<CandidateQuery>& candidates);
std::vector<CandidateQuery> candidates_from_json(const std::string& text);

}  // namespace poly::corpus
