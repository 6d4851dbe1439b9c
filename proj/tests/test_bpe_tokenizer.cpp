#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "wmlm/bpe_tokenizer.hpp"

using namespace wmlm;

namespace {

std::string random_bytes(Rng& rng, std::size_t max_len) {
    const std::size_t len = uniform_below(rng, max_len + 1);
    std::string s(len, '\0');
    for (auto& c : s) c = static_cast<char>(uniform_below(rng, 256));
    return s;
}

}  // namespace

TEST_CASE("pre_tokenize partitions text") {
    const std::string text = "  the cat\tsat \n on";
    const auto pieces = pre_tokenize(text);
    std::string joined;
    for (const auto p : pieces) joined += std::string(p);
    REQUIRE(joined == text);
    REQUIRE(pieces[0] == "  the");
    REQUIRE(pieces[1] == " cat");
    REQUIRE(pieces[2] == "\tsat");
    REQUIRE(pieces[3] == " \n on");

    REQUIRE(pre_tokenize("").empty());
    const auto trailing = pre_tokenize("a  ");
    REQUIRE(trailing.size() == 2);
    REQUIRE(trailing[1] == "  ");
}

TEST_CASE("train_bpe first merge on repeated byte") {
    const auto vocab = train_bpe("aaaa", 259);
    REQUIRE(vocab.merges.size() == 1);
    REQUIRE(vocab.merges[0] == std::pair<std::int32_t, std::int32_t>('a', 'a'));
    REQUIRE(vocab.bytes_of(Vocab::first_merge_id) == "aa");
}

TEST_CASE("train_bpe all-distinct bytes gives zero merges") {
    const auto vocab = train_bpe("abcdefg", 300);
    REQUIRE(vocab.merges.empty());
    REQUIRE(vocab.size() == Vocab::first_merge_id);
}

TEST_CASE("train_bpe determinism") {
    const std::string corpus =
        "the cat sat on the mat the cat ran to the man and the cat sat";
    const auto a = train_bpe(corpus, 280);
    const auto b = train_bpe(corpus, 280);
    REQUIRE(a.merges == b.merges);
    REQUIRE(a.token_bytes == b.token_bytes);
}

TEST_CASE("train_bpe input validation") {
    REQUIRE_THROWS_AS(train_bpe("", 300), user_error);
    REQUIRE_THROWS_AS(train_bpe("abc", 258), user_error);
    REQUIRE_THROWS_AS(train_bpe("abc", 10), user_error);
}

TEST_CASE("encode/decode roundtrip on text") {
    const std::string corpus =
        "the quick brown fox jumps over the lazy dog and the quick cat";
    const auto vocab = train_bpe(corpus, 290);
    for (const std::string& s :
         {std::string("the quick fox"), std::string(""),
          std::string("unseen bytes \xff\x01 here"), corpus}) {
        const auto ids = encode(s, vocab);
        REQUIRE(decode(ids, vocab) == s);
    }
    REQUIRE(encode("", vocab).empty());
}

TEST_CASE("roundtrip fuzz over random byte strings") {
    const auto vocab =
        train_bpe("banana bandana ban banana and a bandana", 300);
    Rng rng(99);
    for (int trial = 0; trial < 10000; ++trial) {
        const auto s = random_bytes(rng, 256);
        const auto ids = encode(s, vocab);
        REQUIRE(decode(ids, vocab) == s);
        for (const auto id : ids) {
            REQUIRE(id != Vocab::bos_id);
            REQUIRE(id != Vocab::pad_id);
        }
    }
}

TEST_CASE("leading space yields a different encoding") {
    const auto vocab = train_bpe("cat cat cat scatter cat", 280);
    const auto bare = encode("cat", vocab);
    const auto spaced = encode(" cat", vocab);
    REQUIRE(bare != spaced);
    REQUIRE(decode(bare, vocab) == "cat");
    REQUIRE(decode(spaced, vocab) == " cat");
}

TEST_CASE("merges never cross pre-token boundaries") {
    // "ab" repeats but always split across words: no merge may span the gap.
    const auto vocab = train_bpe("xa bxa bxa bx", 300);
    for (const auto& bytes : vocab.token_bytes) {
        if (bytes.size() < 2) continue;
        // A token that contains a non-leading whitespace byte would have
        // crossed a word boundary.
        for (std::size_t i = 1; i < bytes.size(); ++i) {
            const bool ws =
                is_token_whitespace(static_cast<unsigned char>(bytes[i]));
            const bool prefix_all_ws = [&] {
                for (std::size_t j = 0; j <= i; ++j) {
                    if (!is_token_whitespace(
                            static_cast<unsigned char>(bytes[j]))) {
                        return false;
                    }
                }
                return true;
            }();
            if (ws) REQUIRE(prefix_all_ws);
        }
    }
}

TEST_CASE("decode rejects unknown ids") {
    const auto vocab = train_bpe("aa aa", 259);
    const std::int32_t bad = vocab.size();
    REQUIRE_THROWS_AS(decode(std::vector<std::int32_t>{bad}, vocab), user_error);
    REQUIRE_THROWS_AS(decode(std::vector<std::int32_t>{-1}, vocab), user_error);
    // Specials decode to empty bytes.
    REQUIRE(decode(std::vector<std::int32_t>{Vocab::bos_id, Vocab::pad_id},
                   vocab) == "");
}

TEST_CASE("vocab file save/load is bit-exact") {
    const std::string corpus =
        "she sells sea shells by the sea shore and the shells she sells";
    const auto vocab = train_bpe(corpus, 300);
    const auto path =
        (std::filesystem::temp_directory_path() / "wmlm_vocab_test.txt")
            .string();
    vocab.save(path);
    const auto loaded = Vocab::load(path);
    REQUIRE(loaded.merges == vocab.merges);
    REQUIRE(loaded.token_bytes == vocab.token_bytes);

    // Re-saving produces identical bytes.
    const auto path2 =
        (std::filesystem::temp_directory_path() / "wmlm_vocab_test2.txt")
            .string();
    loaded.save(path2);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
    const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
    REQUIRE(bytes_a == bytes_b);
    std::remove(path.c_str());
    std::remove(path2.c_str());

    REQUIRE_THROWS_AS(Vocab::load("/nonexistent/vocab.txt"), user_error);
}

TEST_CASE("encode_with_cache matches plain encode") {
    const auto vocab = train_bpe("red fish blue fish one fish two fish", 290);
    std::unordered_map<std::string, std::vector<std::int32_t>> cache;
    for (const std::string& s :
         {std::string("one red fish"), std::string("two blue fish"),
          std::string("one red fish")}) {
        REQUIRE(encode_with_cache(s, vocab, cache) == encode(s, vocab));
    }
    REQUIRE(!cache.empty());
}
