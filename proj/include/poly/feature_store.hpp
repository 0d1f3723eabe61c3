#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poly/common.hpp"

namespace poly::feature_store {

struct ImageRecord {
    std::string image_id;
    std::optional<std::string> source_query;
    std::optional<int> label;  // ground-truth sense, evaluation only
};

/// Dense per-image feature vectors, all of one dimension. Values are held as
/// doubles in memory and stored as 32-bit floats on disk.
class FeatureBank {
public:
    FeatureBank() = default;
    explicit FeatureBank(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }

    void add(const std::string& image_id, std::vector<double> values);
    bool contains(const std::string& image_id) const { return rows_.count(image_id) > 0; }

    /// Throws ErrorCode::missing_record when absent; lookups never skip.
    const std::vector<double>& get(const std::string& image_id) const;

    const std::map<std::string, std::vector<double>>& rows() const { return rows_; }

    bool operator==(const FeatureBank& other) const = default;

private:
    std::size_t dim_ = 0;
    std::map<std::string, std::vector<double>> rows_;
};

/// Conv feature maps: per image a channels x height x width tensor,
/// channel-major then row-major within a channel.
class FeatureMapBank {
public:
    FeatureMapBank() = default;
    FeatureMapBank(std::size_t channels, std::size_t height, std::size_t width)
        : channels_(channels), height_(height), width_(width) {}

    std::size_t channels() const { return channels_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t cells_per_map() const { return channels_ * height_ * width_; }
    std::size_t size() const { return maps_.size(); }

    void add(const std::string& image_id, std::vector<double> values);
    bool contains(const std::string& image_id) const { return maps_.count(image_id) > 0; }
    const std::vector<double>& get(const std::string& image_id) const;

    const std::map<std::string, std::vector<double>>& maps() const { return maps_; }

    bool operator==(const FeatureMapBank& other) const = default;

private:
    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::map<std::string, std::vector<double>> maps_;
};

/// POLY1 container, version 1: magic "POLY1", version byte, record count and
/// dim as little-endian u64, then per record a u32-length-prefixed UTF-8 id
/// followed by dim little-endian IEEE-754 floats. Returns bytes written.
std::size_t write_feature_bank(const FeatureBank& bank, std::ostream& sink);
FeatureBank read_feature_bank(std::istream& source);

/// POLY1 version 2 reuses the container with a three-dimension header
/// (channels, height, width) and C*H*W floats per record.
std::size_t write_feature_map_bank(const FeatureMapBank& bank, std::ostream& sink);
FeatureMapBank read_feature_map_bank(std::istream& source);

// Path convenience wrappers.
void save_feature_bank(const FeatureBank& bank, const std::string& path);
FeatureBank load_feature_bank(const std::string& path);
void save_feature_map_bank(const FeatureMapBank& bank, const std::string& path);
FeatureMapBank load_feature_map_bank(const std::string& path);

/// Parses a JSON array of image records, preserving file order.
/// Duplicate image ids are an error.
std::vector<ImageRecord> load_manifest(std::istream& source);
std::vector<ImageRecord> load_manifest_file(const std::string& path);
std::string manifest_to_json(const std::vector<ImageRecord>& records);

}  // namespace poly::feature_store
