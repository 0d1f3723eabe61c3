#include "poly/feature_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace poly::feature_store {

namespace {

constexpr char kMagic[5] = {'P', 'O', 'L', 'Y', '1'};
constexpr std::uint8_t kVersionVectors = 1;
constexpr std::uint8_t kVersionMaps = 2;

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

bool get_bytes(std::istream& in, void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(in.gcount()) == n;
}

bool get_u64(std::istream& in, std::uint64_t& v) {
    unsigned char bytes[8];
    if (!get_bytes(in, bytes, 8)) return false;
    v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
    return true;
}

bool get_u32(std::istream& in, std::uint32_t& v) {
    unsigned char bytes[4];
    if (!get_bytes(in, bytes, 4)) return false;
    v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[i];
    return true;
}

bool get_f32(std::istream& in, float& v) {
    std::uint32_t bits;
    if (!get_u32(in, bits)) return false;
    std::memcpy(&v, &bits, 4);
    return true;
}

void check_row(const std::string& image_id, const std::vector<double>& values,
               std::size_t expected, const char* what) {
    if (values.size() != expected) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string(what) + " for '" + image_id + "' has " +
                        std::to_string(values.size()) + " values, expected " +
                        std::to_string(expected));
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw Error(ErrorCode::non_finite,
                        std::string(what) + " for '" + image_id + "' contains a non-finite value");
        }
    }
}

std::uint8_t read_header_prefix(std::istream& source) {
    char magic[5];
    if (!get_bytes(source, magic, 5)) {
        throw Error(ErrorCode::truncated, "stream shorter than magic");
    }
    if (std::memcmp(magic, kMagic, 5) != 0) {
        throw Error(ErrorCode::bad_magic, "stream does not start with POLY1 magic");
    }
    unsigned char version;
    if (!get_bytes(source, &version, 1)) {
        throw Error(ErrorCode::truncated, "stream ends before version byte");
    }
    return version;
}

struct CountingBuf {
    std::ostream& out;
    std::streampos begin;
    explicit CountingBuf(std::ostream& o) : out(o), begin(o.tellp()) {}
    std::size_t written() const {
        std::streampos end = out.tellp();
        if (begin == std::streampos(-1) || end == std::streampos(-1)) return 0;
        return static_cast<std::size_t>(end - begin);
    }
};

void write_record_values(std::ostream& sink, const std::string& id,
                         const std::vector<double>& values, const char* what) {
    put_u32(sink, static_cast<std::uint32_t>(id.size()));
    sink.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (double v : values) {
        float f = static_cast<float>(v);
        if (!std::isfinite(f)) {
            throw Error(ErrorCode::non_finite, std::string(what) + " for '" + id +
                                                   "' does not fit a 32-bit float");
        }
        put_f32(sink, f);
    }
}

std::vector<double> read_record_values(std::istream& source, std::size_t count,
                                       std::size_t record_index, std::string& id_out) {
    std::uint32_t id_len;
    if (!get_u32(source, id_len)) {
        throw Error(ErrorCode::truncated,
                    "record " + std::to_string(record_index) + ": missing id length");
    }
    std::string id(id_len, '\0');
    if (id_len > 0 && !get_bytes(source, id.data(), id_len)) {
        throw Error(ErrorCode::truncated,
                    "record " + std::to_string(record_index) + ": truncated id");
    }
    if (!is_valid_utf8(id)) {
        throw Error(ErrorCode::decode_error,
                    "record " + std::to_string(record_index) + ": id is not valid UTF-8");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        float f;
        if (!get_f32(source, f)) {
            throw Error(ErrorCode::truncated, "record " + std::to_string(record_index) + " ('" +
                                                  id + "'): truncated values");
        }
        if (!std::isfinite(f)) {
            throw Error(ErrorCode::non_finite, "record " + std::to_string(record_index) + " ('" +
                                                   id + "'): non-finite value");
        }
        values[i] = static_cast<double>(f);
    }
    id_out = std::move(id);
    return values;
}

}  // namespace

void FeatureBank::add(const std::string& image_id, std::vector<double> values) {
    if (dim_ == 0 && rows_.empty()) dim_ = values.size();
    check_row(image_id, values, dim_, "feature row");
    auto [it, inserted] = rows_.emplace(image_id, std::move(values));
    (void)it;
    if (!inserted) {
        throw Error(ErrorCode::duplicate_id, "duplicate feature row id '" + image_id + "'");
    }
}

const std::vector<double>& FeatureBank::get(const std::string& image_id) const {
    auto it = rows_.find(image_id);
    if (it == rows_.end()) {
        throw Error(ErrorCode::missing_record, "feature bank has no row '" + image_id + "'");
    }
    return it->second;
}

void FeatureMapBank::add(const std::string& image_id, std::vector<double> values) {
    check_row(image_id, values, cells_per_map(), "feature map");
    auto [it, inserted] = maps_.emplace(image_id, std::move(values));
    (void)it;
    if (!inserted) {
        throw Error(ErrorCode::duplicate_id, "duplicate feature map id '" + image_id + "'");
    }
}

const std::vector<double>& FeatureMapBank::get(const std::string& image_id) const {
    auto it = maps_.find(image_id);
    if (it == maps_.end()) {
        throw Error(ErrorCode::missing_record, "feature map bank has no map '" + image_id + "'");
    }
    return it->second;
}

std::size_t write_feature_bank(const FeatureBank& bank, std::ostream& sink) {
    CountingBuf counter(sink);
    sink.write(kMagic, 5);
    sink.put(static_cast<char>(kVersionVectors));
    put_u64(sink, bank.size());
    put_u64(sink, bank.dim());
    for (const auto& [id, values] : bank.rows()) {
        write_record_values(sink, id, values, "feature row");
    }
    if (!sink) throw Error(ErrorCode::io_error, "write failed on feature bank sink");
    return counter.written();
}

FeatureBank read_feature_bank(std::istream& source) {
    std::uint8_t version = read_header_prefix(source);
    if (version != kVersionVectors) {
        throw Error(ErrorCode::unsupported_version,
                    "expected POLY1 version 1 (vectors), got version " + std::to_string(version));
    }
    std::uint64_t count, dim;
    if (!get_u64(source, count) || !get_u64(source, dim)) {
        throw Error(ErrorCode::truncated, "stream ends inside header");
    }
    FeatureBank bank(static_cast<std::size_t>(dim));
    for (std::uint64_t r = 0; r < count; ++r) {
        std::string id;
        std::vector<double> values =
            read_record_values(source, static_cast<std::size_t>(dim), static_cast<std::size_t>(r), id);
        bank.add(id, std::move(values));
    }
    return bank;
}

std::size_t write_feature_map_bank(const FeatureMapBank& bank, std::ostream& sink) {
    CountingBuf counter(sink);
    sink.write(kMagic, 5);
    sink.put(static_cast<char>(kVersionMaps));
    put_u64(sink, bank.size());
    put_u64(sink, bank.channels());
    put_u64(sink, bank.height());
    put_u64(sink, bank.width());
    for (const auto& [id, values] : bank.maps()) {
        write_record_values(sink, id, values, "feature map");
    }
    if (!sink) throw Error(ErrorCode::io_error, "write failed on feature map sink");
    return counter.written();
}

FeatureMapBank read_feature_map_bank(std::istream& source) {
    std::uint8_t version = read_header_prefix(source);
    if (version != kVersionMaps) {
        throw Error(ErrorCode::unsupported_version,
                    "expected POLY1 version 2 (maps), got version " + std::to_string(version));
    }
    std::uint64_t count, channels, height, width;
    if (!get_u64(source, count) || !get_u64(source, channels) || !get_u64(source, height) ||
        !get_u64(source, width)) {
        throw Error(ErrorCode::truncated, "stream ends inside header");
    }
    FeatureMapBank bank(static_cast<std::size_t>(channels), static_cast<std::size_t>(height),
                        static_cast<std::size_t>(width));
    for (std::uint64_t r = 0; r < count; ++r) {
        std::string id;
        std::vector<double> values =
            read_record_values(source, bank.cells_per_map(), static_cast<std::size_t>(r), id);
        bank.add(id, std::move(values));
    }
    return bank;
}

void save_feature_bank(const FeatureBank& bank, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io_error, "cannot open '" + path + "' for writing");
    write_feature_bank(bank, out);
}

FeatureBank load_feature_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open '" + path + "'");
    return read_feature_bank(in);
}

void save_feature_map_bank(const FeatureMapBank& bank, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io_error, "cannot open '" + path + "' for writing");
    write_feature_map_bank(bank, out);
}

FeatureMapBank load_feature_map_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open '" + path + "'");
    return read_feature_map_bank(in);
}

std::vector<ImageRecord> load_manifest(std::istream& source) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(source);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_json, std::string("manifest: ") + e.what());
    }
    if (!arr.is_array()) {
        throw Error(ErrorCode::malformed_json, "manifest must be a JSON array");
    }
    std::vector<ImageRecord> records;
    records.reserve(arr.size());
    std::set<std::string> seen;
    for (const auto& item : arr) {
        ImageRecord rec;
        try {
            rec.image_id = item.at("image_id").get<std::string>();
            if (item.contains("source_query") && !item["source_query"].is_null()) {
                rec.source_query = item["source_query"].get<std::string>();
            }
            if (item.contains("label") && !item["label"].is_null()) {
                rec.label = item["label"].get<int>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::malformed_json, std::string("manifest record: ") + e.what());
        }
        if (!seen.insert(rec.image_id).second) {
            throw Error(ErrorCode::duplicate_id,
                        "manifest contains duplicate image_id '" + rec.image_id + "'");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<ImageRecord> load_manifest_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io_error, "cannot open '" + path + "'");
    return load_manifest(in);
}

std::string manifest_to_json(const std::vector<ImageRecord>& records) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ImageRecord& rec : records) {
        nlohmann::json item{{"image_id", rec.image_id}};
        if (rec.source_query) item["source_query"] = *rec.source_query;
        if (rec.label) item["label"] = *rec.label;
        arr.push_back(std::move(item));
    }
    return arr.dump(2) + "\n";
}

}  // namespace poly::feature_store
