#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wmlm/util.hpp"

// Byte-level byte-pair encoding. The base alphabet is the 256 byte values,
// so any input is encodable without an unknown token. Merges never cross
// pre-token boundaries, where a pre-token is a maximal run of non-whitespace
// bytes together with all immediately preceding whitespace; this keeps every
// token inside a single whitespace-delimited word, which the scoring module
// relies on for word alignment.

namespace wmlm {

inline bool is_token_whitespace(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' ||
           c == '\f';
}

// Splits text into pre-tokens. Concatenating the pieces reproduces the text.
inline std::vector<std::string_view> pre_tokenize(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        // whitespace run, then the word it attaches to
        while (i < text.size() &&
               is_token_whitespace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i == text.size()) break;  // trailing whitespace: own pre-token
        while (i < text.size() &&
               !is_token_whitespace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        out.push_back(text.substr(start, i - start));
        start = i;
    }
    if (start < text.size()) {
        out.push_back(text.substr(start));
    }
    return out;
}

struct Vocab {
    static constexpr std::int32_t bos_id = 256;
    static constexpr std::int32_t pad_id = 257;
    static constexpr std::int32_t first_merge_id = 258;

    // Merge k (in training order) creates token id first_merge_id + k from
    // the two parent ids.
    std::vector<std::pair<std::int32_t, std::int32_t>> merges;
    // id -> byte string; specials decode to empty.
    std::vector<std::string> token_bytes;
    // (left,right) -> index into merges, for encoding.
    std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> merge_rank;

    Vocab() { reset_base(); }

    void reset_base() {
        merges.clear();
        merge_rank.clear();
        token_bytes.assign(static_cast<std::size_t>(first_merge_id), {});
        for (int b = 0; b < 256; ++b) {
            token_bytes[static_cast<std::size_t>(b)] =
                std::string(1, static_cast<char>(b));
        }
        // bos/pad have no byte representation
    }

    std::int32_t size() const {
        return static_cast<std::int32_t>(token_bytes.size());
    }

    void add_merge(std::int32_t left, std::int32_t right) {
        merge_rank[{left, right}] = merges.size();
        merges.emplace_back(left, right);
        token_bytes.push_back(token_bytes[static_cast<std::size_t>(left)] +
                              token_bytes[static_cast<std::size_t>(right)]);
    }

    const std::string& bytes_of(std::int32_t id) const {
        if (id < 0 || id >= size()) {
            throw user_error("unknown token id " + std::to_string(id));
        }
        return token_bytes[static_cast<std::size_t>(id)];
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw user_error("cannot write vocab file: " + path);
        out << "wmlm-bpe v1 vocab_size=" << size() << "\n";
        out << "specials bos=" << bos_id << " pad=" << pad_id << "\n";
        for (const auto& [left, right] : merges) {
            out << left << ' ' << right << "\n";
        }
        if (!out) throw user_error("failed writing vocab file: " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw user_error("cannot open vocab file: " + path);
        std::string line;
        if (!std::getline(in, line)) {
            throw user_error("vocab file is empty: " + path);
        }
        int declared = 0;
        if (std::sscanf(line.c_str(), "wmlm-bpe v1 vocab_size=%d", &declared) !=
            1) {
            throw user_error("bad vocab header in " + path + ": '" + line + "'");
        }
        if (!std::getline(in, line) ||
            line != "specials bos=256 pad=257") {
            throw user_error("bad vocab specials line in " + path);
        }
        Vocab vocab;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto parts = split(line, ' ');
            if (parts.size() != 2) {
                throw user_error("bad merge line in " + path + ": '" + line +
                                 "'");
            }
            const auto left = parse_int(parts[0], "merge left id");
            const auto right = parse_int(parts[1], "merge right id");
            if (left < 0 || left >= vocab.size() || right < 0 ||
                right >= vocab.size()) {
                throw user_error("merge references unknown id in " + path +
                                 ": '" + line + "'");
            }
            vocab.add_merge(static_cast<std::int32_t>(left),
                            static_cast<std::int32_t>(right));
        }
        if (vocab.size() != declared) {
            throw user_error("vocab size mismatch in " + path + ": header says " +
                             std::to_string(declared) + ", merges give " +
                             std::to_string(vocab.size()));
        }
        return vocab;
    }
};

namespace detail {

// Applies one merge rule to a symbol sequence, left to right, non-overlapping.
inline void apply_merge(std::vector<std::int32_t>& syms, std::int32_t left,
                        std::int32_t right, std::int32_t merged) {
    std::size_t write = 0;
    std::size_t read = 0;
    while (read < syms.size()) {
        if (read + 1 < syms.size() && syms[read] == left &&
            syms[read + 1] == right) {
            syms[write++] = merged;
            read += 2;
        } else {
            syms[write++] = syms[read++];
        }
    }
    syms.resize(write);
}

inline std::vector<std::int32_t> bytes_to_symbols(std::string_view piece) {
    std::vector<std::int32_t> syms;
    syms.reserve(piece.size());
    for (const char c : piece) {
        syms.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
    }
    return syms;
}

}  // namespace detail

// Greedy highest-frequency pair merging until vocab_size is reached or no
// pair occurs twice. Ties break lexicographically on the pair's bytes, so
// training is fully deterministic.
inline Vocab train_bpe(std::string_view corpus, std::int32_t vocab_size) {
    if (corpus.empty()) throw user_error("train_bpe: empty corpus");
    if (vocab_size <= Vocab::first_merge_id) {
        throw user_error("train_bpe: vocab_size must exceed " +
                         std::to_string(Vocab::first_merge_id) +
                         " (bytes + specials)");
    }

    Vocab vocab;

    // Distinct pre-tokens with counts; merges operate on these only.
    struct Word {
        std::vector<std::int32_t> syms;
        std::int64_t count = 0;
    };
    std::vector<Word> words;
    {
        std::unordered_map<std::string, std::size_t> index;
        for (const auto piece : pre_tokenize(corpus)) {
            const auto [it, inserted] =
                index.try_emplace(std::string(piece), words.size());
            if (inserted) {
                words.push_back({detail::bytes_to_symbols(piece), 1});
            } else {
                words[it->second].count += 1;
            }
        }
    }

    std::unordered_set<std::string> existing_bytes(vocab.token_bytes.begin(),
                                                   vocab.token_bytes.end());

    while (vocab.size() < vocab_size) {
        // Count adjacent pairs across all distinct pre-tokens.
        std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> counts;
        for (const auto& word : words) {
            for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
                counts[{word.syms[i], word.syms[i + 1]}] += word.count;
            }
        }

        std::optional<std::pair<std::int32_t, std::int32_t>> best;
        std::int64_t best_count = 1;  // a pair must occur at least twice
        for (const auto& [pair, count] : counts) {
            if (count < best_count) continue;
            // A merge whose byte string collides with an existing token would
            // break the token<->id bijection; skip those pairs.
            const std::string joined =
                vocab.bytes_of(pair.first) + vocab.bytes_of(pair.second);
            if (existing_bytes.count(joined)) continue;
            if (count > best_count) {
                best = pair;
                best_count = count;
                continue;
            }
            // Tie: lexicographically smallest (left bytes, right bytes).
            const auto& cur_left = vocab.bytes_of(best->first);
            const auto& cur_right = vocab.bytes_of(best->second);
            const auto& new_left = vocab.bytes_of(pair.first);
            const auto& new_right = vocab.bytes_of(pair.second);
            if (std::pair(new_left, new_right) < std::pair(cur_left, cur_right)) {
                best = pair;
            }
        }
        if (!best) break;

        const std::int32_t merged = vocab.size();
        existing_bytes.insert(vocab.bytes_of(best->first) +
                              vocab.bytes_of(best->second));
        vocab.add_merge(best->first, best->second);
        for (auto& word : words) {
            detail::apply_merge(word.syms, best->first, best->second, merged);
        }
    }
    return vocab;
}

// Applies merges in training order within each pre-token.
inline std::vector<std::int32_t> encode(std::string_view text,
                                        const Vocab& vocab) {
    std::vector<std::int32_t> out;
    out.reserve(text.size() / 2 + 1);
    for (const auto piece : pre_tokenize(text)) {
        auto syms = detail::bytes_to_symbols(piece);
        while (syms.size() > 1) {
            std::size_t best_rank = vocab.merges.size();
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                const auto it = vocab.merge_rank.find({syms[i], syms[i + 1]});
                if (it != vocab.merge_rank.end() && it->second < best_rank) {
                    best_rank = it->second;
                }
            }
            if (best_rank == vocab.merges.size()) break;
            const auto [left, right] = vocab.merges[best_rank];
            detail::apply_merge(
                syms, left, right,
                Vocab::first_merge_id + static_cast<std::int32_t>(best_rank));
        }
        out.insert(out.end(), syms.begin(), syms.end());
    }
    return out;
}

// Caching wrapper for bulk corpus tokenization (pre-tokens repeat heavily).
inline std::vector<std::int32_t> encode_with_cache(
    std::string_view text, const Vocab& vocab,
    std::unordered_map<std::string, std::vector<std::int32_t>>& cache) {
    std::vector<std::int32_t> out;
    out.reserve(text.size() / 2 + 1);
    for (const auto piece : pre_tokenize(text)) {
        auto [it, inserted] = cache.try_emplace(std::string(piece));
        if (inserted) {
            it->second = encode(piece, vocab);
        }
        out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
}

inline std::string decode(std::span<const std::int32_t> ids,
                          const Vocab& vocab) {
    std::string out;
    for (const std::int32_t id : ids) {
        out += vocab.bytes_of(id);  // specials contribute nothing
    }
    return out;
}

}  // namespace wmlm
