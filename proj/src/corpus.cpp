#include "poly/corpus.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace poly::corpus {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
    return std::string(s.substr(b, e - b));
}

bool parse_count(const std::string& text, std::uint64_t& out) {
    if (text.empty()) return false;
    std::uint64_t value = 0;
    for (char c : text) {
        if (c < '0' || c > '9') return false;
        std::uint64_t digit = static_cast<std::uint64_t>(c - '0');
        if (value > (UINT64_MAX - digit) / 10) return false;
        value = value * 10 + digit;
    }
    out = value;
    return true;
}

bool has_whitespace(const std::string& s) {
    return s.find(' ') != std::string::npos || s.find('\t') != std::string::npos;
}

}  // namespace

ParseResult parse_ngram_file(std::istream& source) {
    std::ostringstream buffer;
    buffer << source.rdbuf();
    std::string text = buffer.str();
    if (!is_valid_utf8(text)) {
        throw Error(ErrorCode::decode_error, "corpus stream is not valid UTF-8");
    }

    ParseResult result;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        ++result.total_lines;

        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 4) {
            ++result.malformed_lines;
            continue;
        }
        NgramEntry entry;
        entry.modifier = trim(fields[0]);
        entry.head = trim(fields[1]);
        entry.pos_tag = trim(fields[2]);
        if (entry.modifier.empty() || entry.head.empty() ||
            !parse_count(trim(fields[3]), entry.count)) {
            ++result.malformed_lines;
            continue;
        }
        result.entries.push_back(std::move(entry));
    }
    return result;
}

std::vector<CandidateQuery> discover_candidates(const std::string& keyword,
                                                const std::vector<NgramEntry>& entries) {
    if (keyword.empty()) {
        throw Error(ErrorCode::invalid_argument, "keyword must be non-empty");
    }
    const std::string kw = ascii_lower(keyword);

    std::map<std::string, std::uint64_t> counts;
    for (const NgramEntry& entry : entries) {
        if (entry.pos_tag != "NOUN") continue;
        if (ascii_lower(entry.head) != kw) continue;
        std::string modifier = ascii_lower(entry.modifier);
        // single-token modifiers only; a modifier equal to the keyword would
        // repeat it inside query_text
        if (has_whitespace(modifier) || modifier == kw) continue;
        if (entry.count == 0) continue;
        counts[modifier] += entry.count;
    }

    std::vector<CandidateQuery> candidates;
    candidates.reserve(counts.size());
    for (const auto& [modifier, count] : counts) {
        CandidateQuery q;
        q.keyword = kw;
        q.modifier = modifier;
        q.query_text = kw + " " + modifier;
        q.corpus_count = count;
        candidates.push_back(std::move(q));
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const CandidateQuery& a, const CandidateQuery& b) {
                  if (a.corpus_count != b.corpus_count) return a.corpus_count > b.corpus_count;
                  return a.modifier < b.modifier;
              });
    return candidates;
}

std::string candidates_to_json(const std::vector<CandidateQuery>& candidates) {
    nlohmann::json arr = nlohmann::json::array();
    for (const CandidateQuery& q : candidates) {
        nlohmann::json item{{"keyword", q.keyword},
                            {"modifier", q.modifier},
                            {"query_text", q.query_text},
                            {"corpus_count", q.corpus_count}};
        if (q.match_score) item["match_score"] = *q.match_score;
        arr.push_back(std::move(item));
    }
    return arr.dump(2) + "\n";
}

std::vector<CandidateQuery> candidates_from_json(const std::string& text) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("candidate JSON: ") + e.what());
    }
    if (!arr.is_array()) {
        throw Error(ErrorCode::malformed_json, "candidate JSON must be an array");
    }
    std::vector<CandidateQuery> out;
    out.reserve(arr.size());
    for (const auto& item : arr) {
        try {
            CandidateQuery q;
            q.keyword = item.at("keyword").get<std::string>();
            q.modifier = item.at("modifier").get<std::string>();
            q.query_text = item.at("query_text").get<std::string>();
            q.corpus_count = item.at("corpus_count").get<std::uint64_t>();
            if (item.contains("match_score") && !item["match_score"].is_null()) {
                q.match_score = item["match_score"].get<std::uint64_t>();
            }
            out.push_back(std::move(q));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::malformed_json, std::string("candidate JSON: ") + e.what());
        }
    }
    return out;
}

}  // namespace poly::corpus
