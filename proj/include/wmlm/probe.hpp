#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "wmlm/matrix.hpp"
#include "wmlm/scoring.hpp"
#include "wmlm/trainer.hpp"

// Structural probe: a linear projection B trained so squared L2 distances
// between projected hidden states approximate dependency-tree path
// distances. Trees are decoded from predicted distances with a minimum
// spanning tree and scored as unlabeled unrooted attachment (UUAS).

namespace wmlm {

// ---------------------------------------------------------------------------
// Parsed sentences and tree distances.
// ---------------------------------------------------------------------------

struct ParsedSentence {
    std::vector<std::string> tokens;     // word forms
    std::vector<int> heads;              // 1-based head index; 0 = root
    std::vector<std::string> relations;  // dependency label per word

    std::size_t size() const { return tokens.size(); }

    bool is_punct(std::size_t i) const { return relations[i] == "punct"; }

    // Undirected gold edges (child, head), 0-based.
    std::vector<std::pair<std::size_t, std::size_t>> edges() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t i = 0; i < heads.size(); ++i) {
            if (heads[i] > 0) {
                out.emplace_back(i, static_cast<std::size_t>(heads[i] - 1));
            }
        }
        return out;
    }
};

// Path-length matrix of the dependency tree: BFS from every node. Rejects
// head structures that are not a single rooted tree.
inline Matrix<double> tree_distances(const ParsedSentence& sentence) {
    const std::size_t n = sentence.size();
    if (n == 0) throw user_error("tree_distances: empty sentence");
    if (sentence.heads.size() != n || sentence.relations.size() != n) {
        throw user_error("tree_distances: field length mismatch");
    }
    std::size_t n_roots = 0;
    std::vector<std::vector<std::size_t>> adjacency(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int head = sentence.heads[i];
        if (head == 0) {
            ++n_roots;
            continue;
        }
        if (head < 0 || static_cast<std::size_t>(head) > n) {
            throw user_error("tree_distances: head index out of range");
        }
        const auto parent = static_cast<std::size_t>(head - 1);
        if (parent == i) {
            throw user_error("tree_distances: token is its own head");
        }
        adjacency[i].push_back(parent);
        adjacency[parent].push_back(i);
    }
    if (n_roots != 1) {
        throw user_error("tree_distances: expected exactly one root, found " +
                         std::to_string(n_roots));
    }

    Matrix<double> dist(n, n, -1.0);
    for (std::size_t start = 0; start < n; ++start) {
        std::deque<std::size_t> queue{start};
        dist(start, start) = 0.0;
        while (!queue.empty()) {
            const std::size_t u = queue.front();
            queue.pop_front();
            for (const std::size_t v : adjacency[u]) {
                if (dist(start, v) < 0.0) {
                    dist(start, v) = dist(start, u) + 1.0;
                    queue.push_back(v);
                }
            }
        }
        for (std::size_t v = 0; v < n; ++v) {
            if (dist(start, v) < 0.0) {
                throw user_error(
                    "tree_distances: head structure is disconnected or cyclic");
            }
        }
    }
    return dist;
}

// ---------------------------------------------------------------------------
// Probe prediction and training.
// ---------------------------------------------------------------------------

struct DistanceProbe {
    Matrix<double> projection;  // k_probe x d
    int layer = 0;
    int k_probe = 0;
    int hidden_dim = 0;
    int epochs_run = 0;
    bool stopped_early = false;
    double best_validation_loss = 0.0;
    double final_train_loss = 0.0;
};

// Predicted squared distances: d_B(h_i, h_j)^2 = ||B (h_i - h_j)||^2.
inline Matrix<double> probe_predict(const Matrix<double>& projection,
                                    const Matrix<double>& hidden) {
    if (projection.cols() != hidden.cols()) {
        throw std::invalid_argument("probe_predict: dimension mismatch (B is " +
                                    std::to_string(projection.rows()) + "x" +
                                    std::to_string(projection.cols()) +
                                    ", hidden has width " +
                                    std::to_string(hidden.cols()) + ")");
    }
    const std::size_t n = hidden.rows();
    const std::size_t k = projection.rows();
    const std::size_t d = hidden.cols();

    Matrix<double> projected(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < k; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                acc += projection(r, c) * hidden(i, c);
            }
            projected(i, r) = acc;
        }
    }
    Matrix<double> dist(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < k; ++r) {
                const double diff = projected(i, r) - projected(j, r);
                acc += diff * diff;
            }
            dist(i, j) = acc;
            dist(j, i) = acc;
        }
    }
    return dist;
}

struct ProbeSample {
    Matrix<double> hidden;  // n_words x d
    Matrix<double> target;  // n_words x n_words tree distances
};

struct ProbeTrainOptions {
    int k_probe = 64;
    int epochs = 30;
    double learning_rate = 1e-3;
    int patience = 3;  // epochs without validation improvement
    std::uint64_t seed = 0;
};

namespace detail {

// Mean L1 between predicted squared distances and targets over unordered
// pairs, normalized per sentence by its pair count.
inline double probe_loss(const Matrix<double>& projection,
                         std::span<const ProbeSample> samples) {
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& sample : samples) {
        const std::size_t n = sample.hidden.rows();
        if (n < 2) continue;
        const auto predicted = probe_predict(projection, sample.hidden);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                acc += std::abs(predicted(i, j) - sample.target(i, j));
            }
        }
        total += acc / (static_cast<double>(n) * (n - 1) / 2.0);
        ++counted;
    }
    if (counted == 0) throw user_error("probe_loss: no scorable sentences");
    return total / static_cast<double>(counted);
}

}  // namespace detail

// Adam on B with per-sentence steps, early stopping on validation loss.
// Returns the best-validation snapshot of B.
inline DistanceProbe train_probe(std::span<const ProbeSample> train_samples,
                                 std::span<const ProbeSample> validation,
                                 ProbeTrainOptions options = {}) {
    if (train_samples.size() < 2) {
        throw user_error("train_probe: need at least 2 training sentences");
    }
    if (validation.empty()) {
        throw user_error("train_probe: empty validation split");
    }
    if (options.k_probe < 1 || options.epochs < 1 ||
        !(options.learning_rate > 0.0) || options.patience < 1) {
        throw user_error("train_probe: invalid options");
    }
    const std::size_t d = train_samples[0].hidden.cols();
    for (const auto& sample : train_samples) {
        if (sample.hidden.cols() != d ||
            sample.target.rows() != sample.hidden.rows()) {
            throw user_error("train_probe: inconsistent sample shapes");
        }
    }
    const auto k = static_cast<std::size_t>(options.k_probe);
    if (k > d) {
        throw user_error("train_probe: k_probe exceeds hidden dimension");
    }

    Rng rng(options.seed);
    Matrix<double> projection(k, d);
    for (std::size_t idx = 0; idx < projection.size(); ++idx) {
        projection.data()[idx] = 0.05 * gaussian(rng);
    }

    Matrix<double> adam_m(k, d, 0.0), adam_v(k, d, 0.0);
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step = 0;

    DistanceProbe probe;
    probe.k_probe = options.k_probe;
    probe.hidden_dim = static_cast<int>(d);
    probe.best_validation_loss = std::numeric_limits<double>::infinity();
    Matrix<double> best_projection = projection;
    int epochs_since_best = 0;

    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        const auto order =
            epoch_order(train_samples.size(), options.seed, epoch);
        for (const std::size_t index : order) {
            const auto& sample = train_samples[index];
            const std::size_t n = sample.hidden.rows();
            if (n < 2) continue;
            const double inv_pairs =
                1.0 / (static_cast<double>(n) * (n - 1) / 2.0);

            // Projected rows for the current B.
            Matrix<double> projected(n, k);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t r = 0; r < k; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        acc += projection(r, c) * sample.hidden(i, c);
                    }
                    projected(i, r) = acc;
                }
            }

            // dL/dB = (1/np) sum sgn(q - t) 2 (B delta) delta^T.
            Matrix<double> grad(k, d, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i + 1; j < n; ++j) {
                    double q = 0.0;
                    for (std::size_t r = 0; r < k; ++r) {
                        const double diff = projected(i, r) - projected(j, r);
                        q += diff * diff;
                    }
                    const double residual = q - sample.target(i, j);
                    if (residual == 0.0) continue;
                    const double sign = residual > 0.0 ? 1.0 : -1.0;
                    const double scale = 2.0 * sign * inv_pairs;
                    for (std::size_t r = 0; r < k; ++r) {
                        const double pdiff =
                            projected(i, r) - projected(j, r);
                        for (std::size_t c = 0; c < d; ++c) {
                            grad(r, c) += scale * pdiff *
                                          (sample.hidden(i, c) -
                                           sample.hidden(j, c));
                        }
                    }
                }
            }

            ++step;
            const double bias1 =
                1.0 - std::pow(beta1, static_cast<double>(step));
            const double bias2 =
                1.0 - std::pow(beta2, static_cast<double>(step));
            for (std::size_t idx = 0; idx < projection.size(); ++idx) {
                const double g = grad.data()[idx];
                adam_m.data()[idx] = beta1 * adam_m.data()[idx] +
                                     (1.0 - beta1) * g;
                adam_v.data()[idx] = beta2 * adam_v.data()[idx] +
                                     (1.0 - beta2) * g * g;
                projection.data()[idx] -=
                    options.learning_rate * (adam_m.data()[idx] / bias1) /
                    (std::sqrt(adam_v.data()[idx] / bias2) + eps);
            }
        }

        const double val_loss = detail::probe_loss(projection, validation);
        if (!std::isfinite(val_loss)) {
            throw numeric_error("train_probe: validation loss diverged");
        }
        probe.epochs_run = epoch;
        if (val_loss < probe.best_validation_loss) {
            probe.best_validation_loss = val_loss;
            best_projection = projection;
            epochs_since_best = 0;
        } else {
            ++epochs_since_best;
            if (epochs_since_best >= options.patience) {
                probe.stopped_early = true;
                break;
            }
        }
    }

    probe.projection = std::move(best_projection);
    probe.final_train_loss = detail::probe_loss(probe.projection, train_samples);
    return probe;
}

// ---------------------------------------------------------------------------
// Minimum spanning tree decoding (Kruskal with deterministic tie-break).
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::size_t, std::size_t>> mst_decode(
    const Matrix<double>& distances) {
    const std::size_t n = distances.rows();
    if (n < 2) throw std::invalid_argument("mst_decode: need n >= 2");
    if (distances.cols() != n) {
        throw std::invalid_argument("mst_decode: matrix must be square");
    }
    struct Edge {
        double weight;
        std::size_t u, v;
    };
    std::vector<Edge> edges;
    edges.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (distances(i, j) < 0.0 ||
                !std::isfinite(distances(i, j))) {
                throw std::invalid_argument(
                    "mst_decode: weights must be finite and non-negative");
            }
            edges.push_back({distances(i, j), i, j});
        }
    }
    // Ties prefer the lexicographically smallest (u, v).
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        if (a.weight != b.weight) return a.weight < b.weight;
        if (a.u != b.u) return a.u < b.u;
        return a.v < b.v;
    });

    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };

    std::vector<std::pair<std::size_t, std::size_t>> tree;
    for (const auto& edge : edges) {
        const std::size_t ru = find(edge.u), rv = find(edge.v);
        if (ru == rv) continue;
        parent[ru] = rv;
        tree.emplace_back(edge.u, edge.v);
        if (tree.size() == n - 1) break;
    }
    return tree;
}

// ---------------------------------------------------------------------------
// UUAS.
// ---------------------------------------------------------------------------

struct UuasScore {
    double score = 0.0;
    std::size_t n_gold = 0;
    std::size_t n_matched = 0;
};

// Recall of gold edges by the predicted undirected edge set. With a relation
// filter, only gold edges bearing that label count; the pseudo-relation
// "root" selects the gold edges incident to the root word (an approximation:
// the score itself is unrooted). Punctuation edges are excluded from gold
// unless exclude_punct is false.
inline UuasScore uuas(
    std::span<const std::pair<std::size_t, std::size_t>> predicted,
    const ParsedSentence& gold, const std::string& relation_filter = "",
    bool exclude_punct = true) {
    const std::size_t n = gold.size();
    std::set<std::pair<std::size_t, std::size_t>> predicted_set;
    for (const auto& [u, v] : predicted) {
        if (u >= n || v >= n) {
            throw std::invalid_argument("uuas: predicted edge out of range");
        }
        predicted_set.insert({std::min(u, v), std::max(u, v)});
    }

    std::size_t root = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (gold.heads[i] == 0) root = i;
    }

    UuasScore result;
    for (std::size_t i = 0; i < n; ++i) {
        if (gold.heads[i] == 0) continue;
        const auto head = static_cast<std::size_t>(gold.heads[i] - 1);
        if (exclude_punct && (gold.is_punct(i) || gold.is_punct(head))) {
            continue;
        }
        if (!relation_filter.empty()) {
            if (relation_filter == "root") {
                if (i != root && head != root) continue;
            } else if (gold.relations[i] != relation_filter) {
                continue;
            }
        }
        ++result.n_gold;
        if (predicted_set.count({std::min(i, head), std::max(i, head)})) {
            ++result.n_matched;
        }
    }
    result.score = result.n_gold == 0
                       ? 0.0
                       : static_cast<double>(result.n_matched) /
                             static_cast<double>(result.n_gold);
    return result;
}

// ---------------------------------------------------------------------------
// Per-layer sweep over a checkpoint.
// ---------------------------------------------------------------------------

struct LayerSweepRow {
    int layer = 0;
    std::string relation;  // "overall" or a dependency label
    double uuas = 0.0;
    std::size_t n_gold = 0;
};

inline const std::vector<std::string>& sweep_relations() {
    static const std::vector<std::string> relations = {"nsubj", "dobj", "prep",
                                                       "attr", "root"};
    return relations;
}

// Word-level hidden states for every layer (0 = embeddings+positions):
// token vectors averaged within each whitespace word, BOS prepended as in
// scoring.
inline std::vector<Matrix<double>> word_hidden_states(
    const Checkpoint& checkpoint, const Vocab& vocab,
    const ParsedSentence& sentence) {
    std::string text;
    for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
        if (i) text += ' ';
        text += sentence.tokens[i];
    }
    const auto ids = encode(text, vocab);
    if (ids.empty()) throw user_error("word_hidden_states: empty sentence");
    if (ids.size() + 1 >
        static_cast<std::size_t>(checkpoint.model.max_context)) {
        throw user_error("word_hidden_states: sentence too long (" +
                         std::to_string(ids.size()) + " tokens + BOS)");
    }
    std::vector<std::int32_t> sequence;
    sequence.push_back(Vocab::bos_id);
    sequence.insert(sequence.end(), ids.begin(), ids.end());
    const auto record = forward(checkpoint.model, checkpoint.params, sequence,
                                CaptureFlags{.hidden = true});

    const auto assignment = detail::align_tokens_to_words(
        text, ids, vocab, sentence.tokens.size());
    std::vector<std::size_t> tokens_per_word(sentence.tokens.size(), 0);
    for (const auto w : assignment) ++tokens_per_word[w];

    const auto d = static_cast<std::size_t>(checkpoint.model.d_model);
    std::vector<Matrix<double>> layers;
    layers.reserve(record.hidden.size());
    for (const auto& hidden : record.hidden) {
        Matrix<double> words(sentence.tokens.size(), d, 0.0);
        for (std::size_t k = 0; k < assignment.size(); ++k) {
            // Row k+1: the BOS occupies position 0.
            for (std::size_t c = 0; c < d; ++c) {
                words(assignment[k], c) +=
                    static_cast<double>(hidden(k + 1, c));
            }
        }
        for (std::size_t w = 0; w < sentence.tokens.size(); ++w) {
            for (std::size_t c = 0; c < d; ++c) {
                words(w, c) /= static_cast<double>(tokens_per_word[w]);
            }
        }
        layers.push_back(std::move(words));
    }
    return layers;
}

struct ProbeCorpusSplits {
    std::vector<ParsedSentence> train;
    std::vector<ParsedSentence> validation;
    std::vector<ParsedSentence> test;
};

// One probe per layer, evaluated on the test split per relation and overall
// (micro-averaged over gold edges pooled across test sentences).
inline std::vector<LayerSweepRow> layer_sweep(const Checkpoint& checkpoint,
                                              const Vocab& vocab,
                                              const ProbeCorpusSplits& splits,
                                              ProbeTrainOptions options = {},
                                              bool exclude_punct = true) {
    if (splits.train.size() < 2 || splits.validation.empty() ||
        splits.test.empty()) {
        throw user_error(
            "layer_sweep: need non-empty train/validation/test splits");
    }
    const int n_layers = checkpoint.model.n_layers;

    // Hidden states once per sentence, all layers.
    auto extract = [&](const std::vector<ParsedSentence>& sentences) {
        std::vector<std::vector<Matrix<double>>> hiddens;
        hiddens.reserve(sentences.size());
        for (const auto& sentence : sentences) {
            hiddens.push_back(word_hidden_states(checkpoint, vocab, sentence));
        }
        return hiddens;
    };
    const auto train_hiddens = extract(splits.train);
    const auto val_hiddens = extract(splits.validation);
    const auto test_hiddens = extract(splits.test);

    auto samples_at = [&](const std::vector<ParsedSentence>& sentences,
                          const std::vector<std::vector<Matrix<double>>>& all,
                          int layer) {
        std::vector<ProbeSample> samples;
        samples.reserve(sentences.size());
        for (std::size_t s = 0; s < sentences.size(); ++s) {
            samples.push_back(
                {all[s][static_cast<std::size_t>(layer)],
                 tree_distances(sentences[s])});
        }
        return samples;
    };

    std::vector<LayerSweepRow> rows;
    for (int layer = 0; layer <= n_layers; ++layer) {
        const auto train_samples = samples_at(splits.train, train_hiddens, layer);
        const auto val_samples =
            samples_at(splits.validation, val_hiddens, layer);
        auto layer_options = options;
        const auto probe = train_probe(train_samples, val_samples, layer_options);

        // Pool matches over the test split.
        std::map<std::string, std::pair<std::size_t, std::size_t>> pooled;
        std::pair<std::size_t, std::size_t> pooled_overall{0, 0};
        for (std::size_t s = 0; s < splits.test.size(); ++s) {
            const auto& sentence = splits.test[s];
            const auto& hidden = test_hiddens[s][static_cast<std::size_t>(layer)];

            // Drop punctuation words before decoding.
            std::vector<std::size_t> kept;
            for (std::size_t i = 0; i < sentence.size(); ++i) {
                if (!exclude_punct || !sentence.is_punct(i)) kept.push_back(i);
            }
            if (kept.size() < 2) continue;
            Matrix<double> sub_hidden(kept.size(), hidden.cols());
            for (std::size_t i = 0; i < kept.size(); ++i) {
                for (std::size_t c = 0; c < hidden.cols(); ++c) {
                    sub_hidden(i, c) = hidden(kept[i], c);
                }
            }
            const auto predicted =
                probe_predict(probe.projection, sub_hidden);
            auto edges = mst_decode(predicted);
            for (auto& [u, v] : edges) {
                u = kept[u];
                v = kept[v];
            }
            const auto overall = uuas(edges, sentence, "", exclude_punct);
            pooled_overall.first += overall.n_matched;
            pooled_overall.second += overall.n_gold;
            for (const auto& relation : sweep_relations()) {
                const auto scored = uuas(edges, sentence, relation, exclude_punct);
                pooled[relation].first += scored.n_matched;
                pooled[relation].second += scored.n_gold;
            }
        }

        auto emit = [&](const std::string& relation,
                        std::pair<std::size_t, std::size_t> counts) {
            LayerSweepRow row;
            row.layer = layer;
            row.relation = relation;
            row.n_gold = counts.second;
            row.uuas = counts.second == 0
                           ? 0.0
                           : static_cast<double>(counts.first) /
                                 static_cast<double>(counts.second);
            rows.push_back(row);
        };
        emit("overall", pooled_overall);
        for (const auto& relation : sweep_relations()) {
            emit(relation, pooled[relation]);
        }
    }
    return rows;
}

}  // namespace wmlm
