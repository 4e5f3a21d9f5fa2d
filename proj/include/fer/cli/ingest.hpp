#pragma once

// FER2013-layout CSV ("emotion,pixels,Usage") and landmark sidecar files.
// A sample's id is its 0-based data-row index in the CSV (header excluded,
// rejected rows included); the sidecar keys landmarks by the same id.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fer/dataset.hpp"

namespace fer::cli {

struct RowRejection {
    std::size_t line = 0;  // 1-based line in the source file
    std::string reason;
};

struct CsvRow {
    std::uint64_t id = 0;
    std::size_t line = 0;
    std::size_t label = 0;
    GrayImage image;
    Split split = Split::Train;
};

struct CsvIngest {
    std::vector<CsvRow> rows;
    std::vector<RowRejection> rejections;
    std::size_t data_rows = 0;  // == rows.size() + rejections.size()
};

/// Blank lines are ignored; every other line after the header becomes a row
/// or a rejection.
CsvIngest ingest_csv(std::istream& in);

struct LandmarkIngest {
    std::map<std::uint64_t, LandmarkSet> landmarks;
    std::vector<RowRejection> rejections;
    std::vector<std::string> warnings;
};

/// Lines of `id x1 y1 ... x68 y68`; duplicate ids keep the first record.
LandmarkIngest ingest_landmarks(std::istream& in);

struct DatasetManifest {
    std::string csv_path;
    std::string landmark_path;
    std::map<Split, std::size_t> split_counts;
    std::size_t sample_count = 0;
    std::size_t rejected_rows = 0;
    std::size_t missing_landmarks = 0;  // valid rows excluded for lack of landmarks
    std::uint64_t digest = 0;           // FNV-1a over both files' bytes
};

struct LoadedData {
    DatasetManifest manifest;
    Dataset samples;  // sorted by id
    std::vector<RowRejection> csv_rejections;
    std::vector<RowRejection> landmark_rejections;
    std::vector<std::string> warnings;
};

/// Throws std::runtime_error when a file cannot be read.
LoadedData load_dataset(const std::filesystem::path& csv_path, const std::filesystem::path& landmark_path);

/// Writers for the two formats. Landmark ids are the row positions in `data`,
/// matching the ids a re-ingest of the CSV assigns.
void write_fer_csv(std::ostream& out, const Dataset& data);
void write_landmarks(std::ostream& out, const Dataset& data);

std::string usage_name(Split split);
std::optional<Split> parse_usage(std::string_view usage);

}  // namespace fer::cli
