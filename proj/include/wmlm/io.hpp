#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "wmlm/evaluation.hpp"
#include "wmlm/matrix.hpp"
#include "wmlm/probe.hpp"
#include "wmlm/util.hpp"

// File formats: flat key=value config, newline-delimited JSON minimal pairs,
// CSV psychometric measures, 10-column dependency parses, and portable
// graymap heatmaps. Parsing is strict: malformed input errors with a line
// number, nothing is silently skipped.

namespace wmlm {

// ---------------------------------------------------------------------------
// Generic text IO.
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open file: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw user_error("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw user_error("failed writing file: " + path);
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

// Training corpus as raw text.
inline std::string read_corpus(const std::string& path) {
    auto text = read_file(path);
    if (text.empty()) throw user_error("corpus file is empty: " + path);
    return text;
}

// ---------------------------------------------------------------------------
// Flat key=value run configuration with '#' comments. Unknown keys are the
// caller's job to reject (the allowed set depends on the subcommand).
// ---------------------------------------------------------------------------

struct RunConfig {
    std::map<std::string, std::string> values;

    bool has(const std::string& key) const { return values.count(key) > 0; }

    const std::string& get(const std::string& key) const {
        const auto it = values.find(key);
        if (it == values.end()) {
            throw user_error("config: missing required key '" + key + "'");
        }
        return it->second;
    }

    void reject_unknown(const std::set<std::string>& allowed) const {
        for (const auto& [key, value] : values) {
            if (!allowed.count(key)) {
                throw user_error("config: unknown key '" + key + "'");
            }
        }
    }
};

inline RunConfig parse_config_file(const std::string& path) {
    RunConfig config;
    const auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string_view line = lines[i];
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw user_error("config " + path + ":" + std::to_string(i + 1) +
                             ": expected key = value, got '" +
                             std::string(line) + "'");
        }
        const auto key = std::string(trim(line.substr(0, eq)));
        const auto value = std::string(trim(line.substr(eq + 1)));
        if (key.empty()) {
            throw user_error("config " + path + ":" + std::to_string(i + 1) +
                             ": empty key");
        }
        if (config.values.count(key)) {
            throw user_error("config " + path + ":" + std::to_string(i + 1) +
                             ": duplicate key '" + key + "'");
        }
        config.values[key] = value;
    }
    return config;
}

// ---------------------------------------------------------------------------
// Minimal pairs: one JSON object per line with exactly the fields
// uid, phenomenon, sentence_good, sentence_bad.
// ---------------------------------------------------------------------------

inline std::vector<MinimalPairRecord> read_pairs(const std::string& path) {
    const auto lines = read_lines(path);
    std::vector<MinimalPairRecord> records;
    std::set<std::string> seen_uids;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(lines[i]);
        } catch (const nlohmann::json::exception& e) {
            throw user_error("pairs " + path + ":" + std::to_string(i + 1) +
                             ": " + e.what());
        }
        if (!parsed.is_object() || parsed.size() != 4 ||
            !parsed.contains("uid") || !parsed.contains("phenomenon") ||
            !parsed.contains("sentence_good") ||
            !parsed.contains("sentence_bad")) {
            throw user_error(
                "pairs " + path + ":" + std::to_string(i + 1) +
                ": expected exactly the fields uid, phenomenon, "
                "sentence_good, sentence_bad");
        }
        MinimalPairRecord record;
        try {
            record.uid = parsed.at("uid").get<std::string>();
            record.phenomenon = parsed.at("phenomenon").get<std::string>();
            record.sentence_good =
                parsed.at("sentence_good").get<std::string>();
            record.sentence_bad = parsed.at("sentence_bad").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw user_error("pairs " + path + ":" + std::to_string(i + 1) +
                             ": " + e.what());
        }
        if (record.sentence_good.empty() || record.sentence_bad.empty()) {
            throw user_error("pairs " + path + ":" + std::to_string(i + 1) +
                             ": empty sentence");
        }
        if (!seen_uids.insert(record.uid).second) {
            throw user_error("pairs " + path + ":" + std::to_string(i + 1) +
                             ": duplicate uid '" + record.uid + "'");
        }
        records.push_back(std::move(record));
    }
    if (records.empty()) {
        std::cerr << "warning: no records in pairs file " << path << "\n";
    }
    return records;
}

inline void write_pairs(const std::string& path,
                        std::span<const MinimalPairRecord> records) {
    std::string out;
    for (const auto& record : records) {
        nlohmann::json j{{"uid", record.uid},
                         {"phenomenon", record.phenomenon},
                         {"sentence_good", record.sentence_good},
                         {"sentence_bad", record.sentence_bad}};
        out += j.dump();
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Psychometric measures: CSV with header
// sentence_id,word_index,word,measure,value.
// ---------------------------------------------------------------------------

struct MeasureRow {
    std::size_t sentence_id = 0;
    std::size_t word_index = 0;
    std::string word;
    std::string measure;
    double value = 0.0;
};

inline std::vector<MeasureRow> read_measures(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.empty() ||
        trim(lines[0]) != "sentence_id,word_index,word,measure,value") {
        throw user_error("measures " + path +
                         ":1: expected header "
                         "'sentence_id,word_index,word,measure,value'");
    }
    std::vector<MeasureRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        const auto parts = split(lines[i], ',');
        if (parts.size() != 5) {
            throw user_error("measures " + path + ":" + std::to_string(i + 1) +
                             ": expected 5 comma-separated fields");
        }
        MeasureRow row;
        row.sentence_id = static_cast<std::size_t>(
            parse_int(parts[0], "sentence_id"));
        row.word_index =
            static_cast<std::size_t>(parse_int(parts[1], "word_index"));
        row.word = std::string(parts[2]);
        row.measure = std::string(parts[3]);
        row.value = parse_double(parts[4], "value");
        if (!std::isfinite(row.value)) {
            throw user_error("measures " + path + ":" + std::to_string(i + 1) +
                             ": non-finite value");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Dependency parses: 10 tab-separated columns, one token per line, blank
// line between sentences. Columns used: 1 index, 2 form, 7 head, 8 relation.
// ---------------------------------------------------------------------------

inline std::vector<ParsedSentence> read_parses(const std::string& path) {
    const auto lines = read_lines(path);
    std::vector<ParsedSentence> sentences;
    ParsedSentence current;
    std::size_t expected_index = 1;

    auto flush = [&](std::size_t line_no) {
        if (current.tokens.empty()) return;
        try {
            tree_distances(current);  // validates the head structure
        } catch (const user_error& e) {
            throw user_error("parses " + path + ":" + std::to_string(line_no) +
                             ": " + e.what());
        }
        sentences.push_back(std::move(current));
        current = {};
        expected_index = 1;
    };

    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) {
            flush(i + 1);
            continue;
        }
        const auto parts = split(lines[i], '\t');
        if (parts.size() != 10) {
            throw user_error("parses " + path + ":" + std::to_string(i + 1) +
                             ": expected 10 tab-separated columns, got " +
                             std::to_string(parts.size()));
        }
        const auto index =
            static_cast<std::size_t>(parse_int(parts[0], "token index"));
        if (index != expected_index) {
            throw user_error("parses " + path + ":" + std::to_string(i + 1) +
                             ": token index " + std::to_string(index) +
                             " out of order");
        }
        ++expected_index;
        const auto head = parse_int(parts[6], "head index");
        if (head < 0) {
            throw user_error("parses " + path + ":" + std::to_string(i + 1) +
                             ": negative head index");
        }
        current.tokens.emplace_back(parts[1]);
        current.heads.push_back(static_cast<int>(head));
        current.relations.emplace_back(parts[7]);
    }
    flush(lines.size());
    if (sentences.empty()) {
        throw user_error("parses " + path + ": no sentences");
    }
    return sentences;
}

inline void write_parses(const std::string& path,
                         std::span<const ParsedSentence> sentences) {
    std::string out;
    for (const auto& sentence : sentences) {
        for (std::size_t i = 0; i < sentence.size(); ++i) {
            out += std::to_string(i + 1);
            out += '\t';
            out += sentence.tokens[i];
            out += "\t_\t_\t_\t_\t";
            out += std::to_string(sentence.heads[i]);
            out += '\t';
            out += sentence.relations[i];
            out += "\t_\t_\n";
        }
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Word-frequency covariate: natural-log corpus frequency with add-one
// smoothing. Constant shifts are absorbed by the regression intercept.
// ---------------------------------------------------------------------------

class FrequencyTable {
public:
    explicit FrequencyTable(std::span<const std::string> lines) {
        for (const auto& line : lines) {
            std::size_t i = 0;
            while (i < line.size()) {
                if (is_token_whitespace(static_cast<unsigned char>(line[i]))) {
                    ++i;
                    continue;
                }
                std::size_t start = i;
                while (i < line.size() &&
                       !is_token_whitespace(
                           static_cast<unsigned char>(line[i]))) {
                    ++i;
                }
                counts_[line.substr(start, i - start)] += 1;
            }
        }
    }

    double log_frequency(const std::string& word) const {
        const auto it = counts_.find(word);
        const std::int64_t count = it == counts_.end() ? 0 : it->second;
        return std::log(1.0 + static_cast<double>(count));
    }

private:
    std::unordered_map<std::string, std::int64_t> counts_;
};

// ---------------------------------------------------------------------------
// Portable graymap heatmaps: binary P5, one pixel per matrix cell (times an
// integer upscale factor), value 0 -> black, 1 -> white.
// ---------------------------------------------------------------------------

template <class T>
void write_pgm(const std::string& path, const Matrix<T>& values,
               int upscale = 1) {
    if (upscale < 1) throw user_error("write_pgm: upscale must be >= 1");
    const std::size_t scale = static_cast<std::size_t>(upscale);
    const std::size_t width = values.cols() * scale;
    const std::size_t height = values.rows() * scale;
    std::string out = "P5\n" + std::to_string(width) + " " +
                      std::to_string(height) + "\n255\n";
    out.reserve(out.size() + width * height);
    for (std::size_t i = 0; i < values.rows(); ++i) {
        std::string row_bytes;
        row_bytes.reserve(width);
        for (std::size_t j = 0; j < values.cols(); ++j) {
            double v = static_cast<double>(values(i, j));
            v = std::min(1.0, std::max(0.0, v));
            const auto pixel =
                static_cast<unsigned char>(std::lround(v * 255.0));
            row_bytes.append(scale, static_cast<char>(pixel));
        }
        for (std::size_t repeat = 0; repeat < scale; ++repeat) {
            out += row_bytes;
        }
    }
    write_file(path, out);
}

// Reads back a P5 graymap (for tests and inspection).
inline std::pair<std::size_t, std::size_t> read_pgm(
    const std::string& path, std::vector<unsigned char>& pixels) {
    const auto bytes = read_file(path);
    std::istringstream header(bytes.substr(0, 64));
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
    header >> magic >> width >> height >> maxval;
    if (magic != "P5" || maxval != 255 || width == 0 || height == 0) {
        throw user_error("not a P5 graymap: " + path);
    }
    const auto data_start =
        static_cast<std::size_t>(header.tellg()) + 1;  // single whitespace
    if (bytes.size() < data_start + width * height) {
        throw user_error("truncated graymap: " + path);
    }
    pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_start),
                  bytes.begin() +
                      static_cast<std::ptrdiff_t>(data_start + width * height));
    return {width, height};
}

template <class T>
void write_matrix_csv(const std::string& path, const Matrix<T>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.rows(); ++i) {
        for (std::size_t j = 0; j < values.cols(); ++j) {
            if (j) out += ',';
            out += format_double(static_cast<double>(values(i, j)));
        }
        out += '\n';
    }
    write_file(path, out);
}

inline Matrix<double> read_matrix_csv(const std::string& path) {
    const auto lines = read_lines(path);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        std::vector<double> row;
        for (const auto part : split(lines[i], ',')) {
            row.push_back(parse_double(part, "matrix entry"));
        }
        if (!rows.empty() && row.size() != rows[0].size()) {
            throw user_error("matrix " + path + ":" + std::to_string(i + 1) +
                             ": ragged row");
        }
        rows.push_back(std::move(row));
    }
    Matrix<double> out(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            out(i, j) = rows[i][j];
        }
    }
    return out;
}

}  // namespace wmlm
