#include "poly/common.hpp"

namespace poly {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::decode_error: return "decode_error";
        case ErrorCode::bad_magic: return "bad_magic";
        case ErrorCode::unsupported_version: return "unsupported_version";
        case ErrorCode::truncated: return "truncated";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::duplicate_id: return "duplicate_id";
        case ErrorCode::malformed_json: return "malformed_json";
        case ErrorCode::missing_record: return "missing_record";
        case ErrorCode::insufficient_data: return "insufficient_data";
        case ErrorCode::degenerate_input: return "degenerate_input";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::config_error: return "config_error";
        case ErrorCode::io_error: return "io_error";
    }
    return "unknown";
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt_a, std::uint64_t salt_b) {
    Rng rng(base ^ (salt_a * 0xd1342543de82ef95ULL) ^ (salt_b * 0xaf251af3b0f025b5ULL));
    return rng.next_u64();
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

bool is_valid_utf8(std::string_view bytes) {
    std::size_t i = 0;
    const std::size_t n = bytes.size();
    while (i < n) {
        unsigned char c = static_cast<unsigned char>(bytes[i]);
        std::size_t extra;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xe0) == 0xc0) {
            extra = 1;
            cp = c & 0x1f;
        } else if ((c & 0xf0) == 0xe0) {
            extra = 2;
            cp = c & 0x0f;
        } else if ((c & 0xf8) == 0xf0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= n) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            unsigned char cc = static_cast<unsigned char>(bytes[i + k]);
            if ((cc & 0xc0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3f);
        }
        // overlong encodings, surrogates, out-of-range
        if (extra == 1 && cp < 0x80) return false;
        if (extra == 2 && cp < 0x800) return false;
        if (extra == 3 && cp < 0x10000) return false;
        if (cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
        i += extra + 1;
    }
    return true;
}

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

}  // namespace poly
