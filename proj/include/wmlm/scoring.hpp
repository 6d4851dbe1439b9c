#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wmlm/bpe_tokenizer.hpp"
#include "wmlm/checkpoint.hpp"

// Sentence scoring: BOS is prepended so the first real token is scored, log
// probabilities are accumulated in nats, and per-token surprisals are
// reported in bits. Word surprisals sum the subword surprisals inside each
// whitespace-delimited word; byte-level BPE never lets a token span two
// words (see bpe_tokenizer.hpp), so the assignment is a partition.

namespace wmlm {

struct ScoredSentence {
    std::string text;
    std::vector<std::int32_t> token_ids;        // without BOS
    std::vector<double> token_surprisal_bits;   // one per token, >= 0
    std::vector<std::string> words;             // whitespace-delimited
    std::vector<double> word_surprisal_bits;    // one per word
    double logprob_nats = 0.0;                  // <= 0
};

namespace detail {

inline constexpr double ln2 = std::numbers::ln2;

// Maps each token (by byte span) to a word index. Tokens are attributed to
// the word containing their first non-whitespace byte; whitespace-only
// tokens attach to the following word (trailing ones to the last word).
inline std::vector<std::size_t> align_tokens_to_words(
    std::string_view text, std::span<const std::int32_t> ids,
    const Vocab& vocab, std::size_t n_words) {
    // Word start/end byte offsets.
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t i = 0;
    while (i < text.size()) {
        if (is_token_whitespace(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        std::size_t start = i;
        while (i < text.size() &&
               !is_token_whitespace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        spans.emplace_back(start, i);
    }
    if (spans.size() != n_words) {
        throw numeric_error("word alignment: span count mismatch");
    }

    std::vector<std::size_t> assignment(ids.size());
    std::size_t offset = 0;
    std::size_t word = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const auto& bytes = vocab.bytes_of(ids[k]);
        // First non-whitespace byte of this token.
        std::size_t first = offset;
        std::size_t scan = 0;
        while (scan < bytes.size() &&
               is_token_whitespace(static_cast<unsigned char>(bytes[scan]))) {
            ++scan;
        }
        const bool all_ws = scan == bytes.size();
        first = offset + scan;

        while (word + 1 < spans.size() && first >= spans[word + 1].first) {
            ++word;
        }
        if (!all_ws && (first < spans[word].first || first >= spans[word].second)) {
            // By construction of the byte-level tokenizer this cannot happen;
            // assert anyway.
            throw numeric_error("word alignment: token crosses a word boundary");
        }
        assignment[k] = word;
        offset += bytes.size();
    }
    return assignment;
}

}  // namespace detail

// Full scoring record for one sentence. The model's vocabulary must cover
// the tokenizer's (equality is the normal case; a larger model vocabulary
// only wastes rows).
inline ScoredSentence score_sentence(const Checkpoint& checkpoint,
                                     const Vocab& vocab,
                                     std::string_view text) {
    if (text.empty()) throw user_error("score_sentence: empty sentence");
    if (vocab.size() > checkpoint.model.vocab_size) {
        throw user_error("score_sentence: tokenizer vocabulary (" +
                         std::to_string(vocab.size()) +
                         ") exceeds model vocabulary (" +
                         std::to_string(checkpoint.model.vocab_size) + ")");
    }

    ScoredSentence scored;
    scored.text = std::string(text);
    scored.token_ids = encode(text, vocab);
    if (scored.token_ids.empty()) {
        throw user_error("score_sentence: sentence produced no tokens");
    }
    if (scored.token_ids.size() + 1 >
        static_cast<std::size_t>(checkpoint.model.max_context)) {
        throw user_error("score_sentence: sentence is too long (" +
                         std::to_string(scored.token_ids.size()) +
                         " tokens + BOS exceeds max_context " +
                         std::to_string(checkpoint.model.max_context) + ")");
    }

    std::vector<std::int32_t> sequence;
    sequence.reserve(scored.token_ids.size() + 1);
    sequence.push_back(Vocab::bos_id);
    sequence.insert(sequence.end(), scored.token_ids.begin(),
                    scored.token_ids.end());

    const auto record = forward(checkpoint.model, checkpoint.params, sequence);

    // logits row t predicts sequence position t+1, i.e. token_ids[t].
    double total_nats = 0.0;
    scored.token_surprisal_bits.reserve(scored.token_ids.size());
    for (std::size_t t = 0; t < scored.token_ids.size(); ++t) {
        const auto row = record.logits.row(t);
        double max_v = -std::numeric_limits<double>::infinity();
        for (const float v : row) max_v = std::max(max_v, static_cast<double>(v));
        double sum = 0.0;
        for (const float v : row) {
            sum += std::exp(static_cast<double>(v) - max_v);
        }
        const double lse = max_v + std::log(sum);
        const double log_p =
            static_cast<double>(
                row[static_cast<std::size_t>(scored.token_ids[t])]) -
            lse;
        total_nats += log_p;
        scored.token_surprisal_bits.push_back(-log_p / detail::ln2);
    }
    scored.logprob_nats = total_nats;

    // Whitespace-delimited words and their summed subword surprisals.
    {
        std::size_t i = 0;
        while (i < scored.text.size()) {
            if (is_token_whitespace(
                    static_cast<unsigned char>(scored.text[i]))) {
                ++i;
                continue;
            }
            std::size_t start = i;
            while (i < scored.text.size() &&
                   !is_token_whitespace(
                       static_cast<unsigned char>(scored.text[i]))) {
                ++i;
            }
            scored.words.push_back(scored.text.substr(start, i - start));
        }
    }
    if (!scored.words.empty()) {
        const auto assignment = detail::align_tokens_to_words(
            scored.text, scored.token_ids, vocab, scored.words.size());
        scored.word_surprisal_bits.assign(scored.words.size(), 0.0);
        for (std::size_t k = 0; k < assignment.size(); ++k) {
            scored.word_surprisal_bits[assignment[k]] +=
                scored.token_surprisal_bits[k];
        }
    }
    return scored;
}

// Total log probability, nats.
inline double sentence_logprob(const Checkpoint& checkpoint, const Vocab& vocab,
                               std::string_view text) {
    return score_sentence(checkpoint, vocab, text).logprob_nats;
}

// Per-word surprisals, bits.
inline std::vector<double> word_surprisals(const Checkpoint& checkpoint,
                                           const Vocab& vocab,
                                           std::string_view text) {
    auto scored = score_sentence(checkpoint, vocab, text);
    if (scored.words.empty()) {
        throw user_error("word_surprisals: sentence has no words");
    }
    return std::move(scored.word_surprisal_bits);
}

}  // namespace wmlm
