#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "test_support.hpp"
#include "wmlm/probe.hpp"

using namespace wmlm;
using namespace wmlm_test;

namespace {

ParsedSentence chain(std::size_t n) {
    // 1 <- 2 <- 3 <- ... : word i headed by word i-1, word 0 is root.
    ParsedSentence sentence;
    sentence.tokens.resize(n, "w");
    sentence.relations.assign(n, "dep");
    sentence.heads.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        sentence.heads[i] = static_cast<int>(i);  // 0 for the first word
    }
    return sentence;
}

double tree_weight(const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                   const Matrix<double>& weights) {
    double total = 0.0;
    for (const auto& [u, v] : edges) total += weights(u, v);
    return total;
}

}  // namespace

TEST_CASE("tree distances on a chain") {
    const auto sentence = chain(3);
    const auto dist = tree_distances(sentence);
    REQUIRE(dist(0, 2) == 2.0);
    REQUIRE(dist(2, 0) == 2.0);
    REQUIRE(dist(0, 1) == 1.0);
    REQUIRE(dist(1, 2) == 1.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(dist(i, i) == 0.0);
}

TEST_CASE("tree distances on a star") {
    ParsedSentence star;
    star.tokens = {"root", "a", "b", "c"};
    star.heads = {0, 1, 1, 1};
    star.relations = {"root", "dep", "dep", "dep"};
    const auto dist = tree_distances(star);
    for (std::size_t child = 1; child < 4; ++child) {
        REQUIRE(dist(0, child) == 1.0);
        for (std::size_t other = 1; other < 4; ++other) {
            if (other != child) REQUIRE(dist(child, other) == 2.0);
        }
    }
}

TEST_CASE("tree distances match a BFS oracle on random trees") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sentence = random_parsed_sentence(8, rng);
        const auto dist = tree_distances(sentence);
        // Oracle: BFS over the edge list, independent of head bookkeeping.
        std::vector<std::vector<std::size_t>> adjacency(8);
        for (const auto& [child, head] : sentence.edges()) {
            adjacency[child].push_back(head);
            adjacency[head].push_back(child);
        }
        for (std::size_t start = 0; start < 8; ++start) {
            std::vector<double> oracle(8, -1.0);
            std::vector<std::size_t> queue{start};
            oracle[start] = 0.0;
            for (std::size_t qi = 0; qi < queue.size(); ++qi) {
                const auto u = queue[qi];
                for (const auto v : adjacency[u]) {
                    if (oracle[v] < 0.0) {
                        oracle[v] = oracle[u] + 1.0;
                        queue.push_back(v);
                    }
                }
            }
            for (std::size_t v = 0; v < 8; ++v) {
                REQUIRE(dist(start, v) == oracle[v]);
            }
        }
    }
}

TEST_CASE("tree distances reject invalid head structures") {
    ParsedSentence cyclic;
    cyclic.tokens = {"a", "b", "c"};
    cyclic.heads = {0, 3, 2};  // b <-> c cycle, disconnected from the root
    cyclic.relations = {"root", "dep", "dep"};
    REQUIRE_THROWS_AS(tree_distances(cyclic), user_error);

    ParsedSentence two_roots;
    two_roots.tokens = {"a", "b"};
    two_roots.heads = {0, 0};
    two_roots.relations = {"root", "root"};
    REQUIRE_THROWS_AS(tree_distances(two_roots), user_error);

    ParsedSentence self_head;
    self_head.tokens = {"a", "b"};
    self_head.heads = {0, 2};
    self_head.relations = {"root", "dep"};
    REQUIRE_THROWS_AS(tree_distances(self_head), user_error);
}

TEST_CASE("probe_predict basics") {
    Matrix<double> zero(4, 8, 0.0);
    Matrix<double> hidden(3, 8, 0.0);
    hidden(1, 2) = 5.0;
    const auto all_zero = probe_predict(zero, hidden);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            REQUIRE(all_zero(i, j) == 0.0);
        }
    }

    // 2-D hand example: B = identity, h1 = (0,0), h2 = (3,4) -> 25.
    Matrix<double> identity(2, 2, 0.0);
    identity(0, 0) = 1.0;
    identity(1, 1) = 1.0;
    Matrix<double> points(2, 2, 0.0);
    points(1, 0) = 3.0;
    points(1, 1) = 4.0;
    const auto dist = probe_predict(identity, points);
    REQUIRE(dist(0, 1) == 25.0);
    REQUIRE(dist(1, 0) == 25.0);
    REQUIRE(dist(0, 0) == 0.0);

    Matrix<double> wrong(2, 3, 0.0);
    REQUIRE_THROWS_AS(probe_predict(wrong, points), std::invalid_argument);
}

TEST_CASE("predicted distances form a squared pseudo-metric") {
    Rng rng(23);
    Matrix<double> projection(4, 8);
    for (std::size_t i = 0; i < projection.size(); ++i) {
        projection.data()[i] = gaussian(rng);
    }
    Matrix<double> hidden(6, 8);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        hidden.data()[i] = gaussian(rng);
    }
    const auto dist = probe_predict(projection, hidden);
    for (std::size_t i = 0; i < 6; ++i) {
        REQUIRE(dist(i, i) == 0.0);
        for (std::size_t j = 0; j < 6; ++j) {
            REQUIRE(dist(i, j) >= 0.0);
            REQUIRE(dist(i, j) == dist(j, i));
        }
    }
}

TEST_CASE("mst_decode: two nodes give the single edge") {
    Matrix<double> dist(2, 2, 0.0);
    dist(0, 1) = 3.5;
    dist(1, 0) = 3.5;
    const auto edges = mst_decode(dist);
    REQUIRE(edges.size() == 1);
    REQUIRE(edges[0] == std::pair<std::size_t, std::size_t>{0, 1});
    Matrix<double> single(1, 1, 0.0);
    REQUIRE_THROWS_AS(mst_decode(single), std::invalid_argument);
}

TEST_CASE("mst_decode recovers trees from their path metrics") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + uniform_below(rng, 6);
        const auto sentence = random_parsed_sentence(n, rng);
        const auto metric = tree_distances(sentence);
        const auto decoded = mst_decode(metric);
        std::set<std::pair<std::size_t, std::size_t>> expected;
        for (const auto& [child, head] : sentence.edges()) {
            expected.insert({std::min(child, head), std::max(child, head)});
        }
        REQUIRE(decoded.size() == expected.size());
        for (const auto& [u, v] : decoded) {
            REQUIRE(expected.count({std::min(u, v), std::max(u, v)}) == 1);
        }
    }
}

TEST_CASE("mst_decode matches brute force over all spanning trees") {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + uniform_below(rng, 4);  // n in 2..5
        Matrix<double> weights(n, n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double w = uniform01(rng);
                weights(i, j) = w;
                weights(j, i) = w;
            }
        }
        const auto decoded = mst_decode(weights);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& tree : all_trees(n)) {
            best = std::min(best, tree_weight(tree, weights));
        }
        REQUIRE(tree_weight(decoded, weights) ==
                Catch::Approx(best).margin(1e-12));
    }
}

TEST_CASE("mst_decode deterministic tie-breaking") {
    // All weights equal: Kruskal must pick (0,1), (0,2), ..., (0,n-1).
    Matrix<double> weights(4, 4, 1.0);
    for (std::size_t i = 0; i < 4; ++i) weights(i, i) = 0.0;
    const auto edges = mst_decode(weights);
    const std::vector<std::pair<std::size_t, std::size_t>> expected = {
        {0, 1}, {0, 2}, {0, 3}};
    REQUIRE(edges == expected);
}

TEST_CASE("uuas scoring") {
    ParsedSentence sentence;
    sentence.tokens = {"dog", "chased", "cat", "quickly", "."};
    sentence.heads = {2, 0, 2, 2, 2};
    sentence.relations = {"nsubj", "root", "dobj", "advmod", "punct"};

    SECTION("gold against itself is exactly 1.0") {
        const auto gold_edges = sentence.edges();
        const auto scored = uuas(gold_edges, sentence);
        REQUIRE(scored.score == 1.0);
        REQUIRE(scored.n_gold == 3);  // punct edge excluded
    }

    SECTION("3 of 4 edges recovered gives 0.75 with punctuation kept") {
        std::vector<std::pair<std::size_t, std::size_t>> predicted = {
            {0, 1}, {1, 2}, {1, 4}};
        const auto scored = uuas(predicted, sentence, "", false);
        REQUIRE(scored.n_gold == 4);
        REQUIRE(scored.score == 0.75);
    }

    SECTION("relation filter isolates single gold edges") {
        std::vector<std::pair<std::size_t, std::size_t>> predicted = {{0, 1}};
        const auto nsubj = uuas(predicted, sentence, "nsubj");
        REQUIRE(nsubj.n_gold == 1);
        REQUIRE(nsubj.score == 1.0);
        const auto dobj = uuas(predicted, sentence, "dobj");
        REQUIRE(dobj.n_gold == 1);
        REQUIRE(dobj.score == 0.0);
    }

    SECTION("root pseudo-relation scores edges incident to the root word") {
        std::vector<std::pair<std::size_t, std::size_t>> predicted = {
            {0, 1}, {2, 3}};
        const auto scored = uuas(predicted, sentence, "root");
        REQUIRE(scored.n_gold == 3);  // nsubj, dobj, advmod all touch the root
        REQUIRE(scored.n_matched == 1);
    }

    SECTION("word-set mismatch is rejected") {
        std::vector<std::pair<std::size_t, std::size_t>> bad = {{0, 9}};
        REQUIRE_THROWS_AS(uuas(bad, sentence), std::invalid_argument);
    }
}

TEST_CASE("probe training finds planted structure") {
    Rng rng(47);
    std::vector<ProbeSample> train_samples, val_samples;
    for (int s = 0; s < 120; ++s) {
        const std::size_t n = 5 + uniform_below(rng, 4);  // 5..8 words
        const auto sentence = random_parsed_sentence(n, rng);
        ProbeSample sample{planted_hiddens(sentence, 16),
                           tree_distances(sentence)};
        if (s < 100) {
            train_samples.push_back(std::move(sample));
        } else {
            val_samples.push_back(std::move(sample));
        }
    }
    ProbeTrainOptions options;
    options.k_probe = 8;
    options.epochs = 30;
    options.seed = 5;
    const auto probe = train_probe(train_samples, val_samples, options);
    INFO("epochs run: " << probe.epochs_run
                        << " final train loss: " << probe.final_train_loss);
    REQUIRE(probe.final_train_loss <= 0.05);
}

TEST_CASE("probe training on zero targets sends B to zero") {
    Rng rng(53);
    std::vector<ProbeSample> train_samples, val_samples;
    for (int s = 0; s < 40; ++s) {
        const std::size_t n = 4 + uniform_below(rng, 3);
        Matrix<double> hidden(n, 8);
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            hidden.data()[i] = gaussian(rng);
        }
        ProbeSample sample{std::move(hidden), Matrix<double>(n, n, 0.0)};
        if (s < 32) {
            train_samples.push_back(std::move(sample));
        } else {
            val_samples.push_back(std::move(sample));
        }
    }
    ProbeTrainOptions options;
    options.k_probe = 4;
    options.epochs = 30;
    options.seed = 2;
    const auto probe = train_probe(train_samples, val_samples, options);
    REQUIRE(probe.final_train_loss <= 0.05);
    double frob = 0.0;
    for (std::size_t i = 0; i < probe.projection.size(); ++i) {
        frob += probe.projection.data()[i] * probe.projection.data()[i];
    }
    REQUIRE(std::sqrt(frob) < 0.5);
}

TEST_CASE("probe training is deterministic") {
    Rng rng(59);
    std::vector<ProbeSample> train_samples, val_samples;
    for (int s = 0; s < 12; ++s) {
        const auto sentence = random_parsed_sentence(5, rng);
        ProbeSample sample{planted_hiddens(sentence, 8),
                           tree_distances(sentence)};
        if (s < 10) {
            train_samples.push_back(std::move(sample));
        } else {
            val_samples.push_back(std::move(sample));
        }
    }
    ProbeTrainOptions options;
    options.k_probe = 4;
    options.epochs = 5;
    options.seed = 7;
    const auto a = train_probe(train_samples, val_samples, options);
    const auto b = train_probe(train_samples, val_samples, options);
    REQUIRE(a.projection == b.projection);
}

TEST_CASE("probe training input validation") {
    std::vector<ProbeSample> one;
    one.push_back({Matrix<double>(3, 8, 0.1), Matrix<double>(3, 3, 1.0)});
    std::vector<ProbeSample> val = one;
    REQUIRE_THROWS_AS(train_probe(one, val, {}), user_error);

    std::vector<ProbeSample> two = one;
    two.push_back({Matrix<double>(4, 8, 0.1), Matrix<double>(4, 4, 1.0)});
    REQUIRE_THROWS_AS(train_probe(two, std::vector<ProbeSample>{}, {}),
                      user_error);

    ProbeTrainOptions too_big;
    too_big.k_probe = 64;  // exceeds d = 8
    REQUIRE_THROWS_AS(train_probe(two, val, too_big), user_error);
}

TEST_CASE("layer sweep over a toy checkpoint") {
    const auto vocab = train_bpe("wa wb wc wd we wf wg wa wb wc wd", 280);
    Checkpoint checkpoint;
    checkpoint.model.n_layers = 1;
    checkpoint.model.d_model = 16;
    checkpoint.model.n_heads = 2;
    checkpoint.model.max_context = 48;
    checkpoint.model.vocab_size = vocab.size();
    checkpoint.params = init_parameters<float>(checkpoint.model, 99);

    const std::vector<std::string> lexicon = {"wa", "wb", "wc", "wd",
                                              "we", "wf", "wg"};
    Rng rng(61);
    auto make_sentence = [&](std::size_t n) {
        auto sentence = random_parsed_sentence(n, rng);
        for (auto& token : sentence.tokens) {
            token = lexicon[uniform_below(rng, lexicon.size())];
        }
        // Give the relation labels the sweep reports on.
        const std::vector<std::string> labels = {"nsubj", "dobj", "prep",
                                                 "attr", "det"};
        for (std::size_t i = 0; i < n; ++i) {
            if (sentence.heads[i] != 0) {
                sentence.relations[i] = labels[uniform_below(rng, labels.size())];
            } else {
                sentence.relations[i] = "root";
            }
        }
        return sentence;
    };

    ProbeCorpusSplits splits;
    for (int i = 0; i < 8; ++i) splits.train.push_back(make_sentence(5));
    for (int i = 0; i < 2; ++i) splits.validation.push_back(make_sentence(5));
    for (int i = 0; i < 3; ++i) splits.test.push_back(make_sentence(5));

    ProbeTrainOptions options;
    options.k_probe = 8;
    options.epochs = 2;
    options.seed = 3;
    const auto rows = layer_sweep(checkpoint, vocab, splits, options);

    // 1-layer model: layers {0 (embeddings), 1}, six rows each.
    REQUIRE(rows.size() == 2 * 6);
    std::set<int> layers;
    for (const auto& row : rows) {
        layers.insert(row.layer);
        REQUIRE(row.uuas >= 0.0);
        REQUIRE(row.uuas <= 1.0);
    }
    REQUIRE(layers == std::set<int>{0, 1});
    REQUIRE(rows[0].relation == "overall");
}
