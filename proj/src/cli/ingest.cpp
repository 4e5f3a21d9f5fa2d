#include "fer/cli/ingest.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "fer/rng.hpp"

namespace fer::cli {
namespace {

constexpr std::string_view kHeader = "emotion,pixels,Usage";

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_ws(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) {
            ++i;
        }
        const std::size_t start = i;
        while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r') {
            ++i;
        }
        if (i > start) {
            out.push_back(s.substr(start, i - start));
        }
    }
    return out;
}

template <typename N>
bool parse_exact(std::string_view text, N& value)
{
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    return ec == std::errc{} && ptr == text.data() + text.size();
}

/// Parses one data row; returns a diagnostic on failure.
std::optional<std::string> parse_row(std::string_view line, CsvRow& row)
{
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string_view::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string_view::npos || line.find(',', c2 + 1) != std::string_view::npos) {
        return "expected 3 comma-separated fields (emotion,pixels,Usage)";
    }
    const std::string_view label_text = trim(line.substr(0, c1));
    const std::string_view pixel_text = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string_view usage_text = trim(line.substr(c2 + 1));

    int label = -1;
    if (!parse_exact(label_text, label)) {
        return "emotion '" + std::string(label_text) + "' is not an integer";
    }
    if (label < 0 || label > 6) {
        return "emotion " + std::to_string(label) + " outside 0-6";
    }
    const auto split = parse_usage(usage_text);
    if (!split) {
        return "unknown Usage '" + std::string(usage_text) + "' (expected Training, PublicTest or PrivateTest)";
    }
    const std::vector<std::string_view> tokens = split_ws(pixel_text);
    if (tokens.size() != kImagePixels) {
        return "expected 2304 pixel values, found " + std::to_string(tokens.size());
    }
    std::vector<std::uint8_t> raw(kImagePixels);
    for (std::size_t i = 0; i < kImagePixels; ++i) {
        int v = -1;
        if (!parse_exact(tokens[i], v) || v < 0 || v > 255) {
            return "pixel " + std::to_string(i) + " ('" + std::string(tokens[i]) + "') is not an integer in 0-255";
        }
        raw[i] = static_cast<std::uint8_t>(v);
    }
    row.label = static_cast<std::size_t>(label);
    row.split = *split;
    row.image = preprocess_image(raw, kImageSide, kImageSide);
    return std::nullopt;
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string usage_name(Split split)
{
    switch (split) {
    case Split::Train:
        return "Training";
    case Split::PublicTest:
        return "PublicTest";
    case Split::FinalTest:
        return "PrivateTest";
    }
    return "Training";
}

std::optional<Split> parse_usage(std::string_view usage)
{
    if (usage == "Training") {
        return Split::Train;
    }
    if (usage == "PublicTest") {
        return Split::PublicTest;
    }
    if (usage == "PrivateTest") {
        return Split::FinalTest;
    }
    return std::nullopt;
}

CsvIngest ingest_csv(std::istream& in)
{
    CsvIngest out;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view text = trim(line);
        if (text.empty()) {
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            if (text == kHeader) {
                continue;
            }
            out.rejections.push_back({line_no, "missing header: expected \"emotion,pixels,Usage\""});
            ++out.data_rows;
            continue;
        }
        CsvRow row;
        row.id = out.data_rows++;
        row.line = line_no;
        if (auto err = parse_row(text, row)) {
            out.rejections.push_back({line_no, std::move(*err)});
            continue;
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

LandmarkIngest ingest_landmarks(std::istream& in)
{
    LandmarkIngest out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::vector<std::string_view> fields = split_ws(line);
        if (fields.empty()) {
            continue;
        }
        if (fields.size() != 1 + kLandmarkDim) {
            out.rejections.push_back({line_no, "expected id + 136 coordinates, found " +
                                                   std::to_string(fields.size()) + " fields"});
            continue;
        }
        std::uint64_t id = 0;
        if (!parse_exact(fields[0], id)) {
            out.rejections.push_back({line_no, "id '" + std::string(fields[0]) + "' is not a non-negative integer"});
            continue;
        }
        LandmarkSet lm{};
        bool ok = true;
        for (std::size_t p = 0; p < kLandmarkCount && ok; ++p) {
            for (std::size_t axis = 0; axis < 2 && ok; ++axis) {
                const std::string_view tok = fields[1 + 2 * p + axis];
                double v = 0.0;
                if (!parse_exact(tok, v) || !std::isfinite(v)) {
                    out.rejections.push_back({line_no, "coordinate '" + std::string(tok) + "' is not a finite real"});
                    ok = false;
                    break;
                }
                (axis == 0 ? lm[p].x : lm[p].y) = v;
            }
        }
        if (!ok) {
            continue;
        }
        if (!out.landmarks.emplace(id, lm).second) {
            out.warnings.push_back("line " + std::to_string(line_no) + ": duplicate landmark id " +
                                   std::to_string(id) + " ignored; first record kept");
            out.rejections.push_back({line_no, "duplicate id " + std::to_string(id)});
        }
    }
    return out;
}

LoadedData load_dataset(const std::filesystem::path& csv_path, const std::filesystem::path& landmark_path)
{
    const std::string csv_bytes = read_file(csv_path);
    const std::string lm_bytes = read_file(landmark_path);
    std::istringstream csv_stream(csv_bytes);
    std::istringstream lm_stream(lm_bytes);
    CsvIngest csv = ingest_csv(csv_stream);
    LandmarkIngest lms = ingest_landmarks(lm_stream);

    LoadedData data;
    data.manifest.csv_path = csv_path.string();
    data.manifest.landmark_path = landmark_path.string();
    data.manifest.digest = fnv1a(csv_bytes) ^ splitmix64(fnv1a(lm_bytes));
    data.manifest.rejected_rows = csv.rejections.size();
    data.csv_rejections = std::move(csv.rejections);
    data.landmark_rejections = std::move(lms.rejections);
    data.warnings = std::move(lms.warnings);

    for (CsvRow& row : csv.rows) {
        const auto it = lms.landmarks.find(row.id);
        if (it == lms.landmarks.end()) {
            ++data.manifest.missing_landmarks;
            continue;
        }
        try {
            data.samples.push_back(make_sample(row.id, std::move(row.image), it->second, row.label, row.split));
        } catch (const std::invalid_argument& e) {
            data.csv_rejections.push_back({row.line, e.what()});
            ++data.manifest.rejected_rows;
            continue;
        }
        ++data.manifest.split_counts[row.split];
    }
    if (data.manifest.missing_landmarks > 0) {
        data.warnings.push_back(std::to_string(data.manifest.missing_landmarks) +
                                " sample(s) excluded for lack of landmarks");
    }
    data.manifest.sample_count = data.samples.size();
    return data;
}

void write_fer_csv(std::ostream& out, const Dataset& data)
{
    out << kHeader << '\n';
    for (const MultimodalSample& s : data) {
        out << s.label << ',';
        const auto px = s.image.pixels();
        for (std::size_t i = 0; i < px.size(); ++i) {
            out << (i == 0 ? "" : " ") << std::lround(px[i] * 255.0);
        }
        out << ',' << usage_name(s.split) << '\n';
    }
}

void write_landmarks(std::ostream& out, const Dataset& data)
{
    std::ostringstream buf;
    buf.precision(17);
    for (std::size_t row = 0; row < data.size(); ++row) {
        const MultimodalSample& s = data[row];
        buf << row;
        for (const Point2& p : s.landmarks) {
            buf << ' ' << p.x << ' ' << p.y;
        }
        buf << '\n';
    }
    out << buf.str();
}

}  // namespace fer::cli
