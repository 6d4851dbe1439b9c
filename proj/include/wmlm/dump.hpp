#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wmlm/io.hpp"
#include "wmlm/scoring.hpp"

// Attention-pattern export: per (layer, head) a CSV matrix file and a
// grayscale graymap heatmap. The dump runs the raw token sequence without
// BOS, so the matrices are exactly the per-head attention over the
// sentence's own tokens (a one-token sentence gives 1x1 matrices).

namespace wmlm {

struct AttentionDump {
    std::string sentence;
    std::vector<std::string> tokens;  // decoded token strings
    std::vector<std::vector<Matrix<float>>> attention;  // [layer][head]
};

inline AttentionDump attn_dump(const Checkpoint& checkpoint, const Vocab& vocab,
                               std::string_view sentence,
                               const std::string& out_dir, int upscale = 1) {
    if (sentence.empty()) throw user_error("attn_dump: empty sentence");
    if (vocab.size() > checkpoint.model.vocab_size) {
        throw user_error("attn_dump: tokenizer vocabulary exceeds the model's");
    }
    AttentionDump dump;
    dump.sentence = std::string(sentence);
    const auto ids = encode(sentence, vocab);
    if (ids.empty()) throw user_error("attn_dump: sentence produced no tokens");
    if (ids.size() > static_cast<std::size_t>(checkpoint.model.max_context)) {
        throw user_error("attn_dump: sentence is too long (" +
                         std::to_string(ids.size()) + " tokens, max_context " +
                         std::to_string(checkpoint.model.max_context) + ")");
    }
    for (const auto id : ids) {
        dump.tokens.push_back(vocab.bytes_of(id));
    }

    const auto record = forward(checkpoint.model, checkpoint.params, ids,
                                CaptureFlags{.attention = true});
    dump.attention = record.attention;

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw user_error("attn_dump: cannot create directory " + out_dir +
                         ": " + ec.message());
    }

    std::string token_list;
    for (const auto& token : dump.tokens) {
        token_list += escape_bytes(token);
        token_list += '\n';
    }
    write_file(out_dir + "/tokens.txt", token_list);

    for (std::size_t layer = 0; layer < dump.attention.size(); ++layer) {
        for (std::size_t head = 0; head < dump.attention[layer].size(); ++head) {
            const std::string stem = out_dir + "/layer" + std::to_string(layer) +
                                     "_head" + std::to_string(head);
            write_matrix_csv(stem + ".csv", dump.attention[layer][head]);
            write_pgm(stem + ".pgm", dump.attention[layer][head], upscale);
        }
    }
    return dump;
}

}  // namespace wmlm
