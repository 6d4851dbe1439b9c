#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlm/evaluation.hpp"
#include "wmlm/io.hpp"
#include "wmlm/probe.hpp"
#include "wmlm/scoring.hpp"
#include "wmlm/util.hpp"

// Synthetic dataset generators: subject-verb agreement minimal pairs (with a
// matching training corpus), word-level psychometric measures generated from
// a reference model's surprisal with recorded ground-truth coefficients, and
// a template dependency treebank. Everything is a pure function of the seed.

namespace wmlm {

// ---------------------------------------------------------------------------
// Subject-verb agreement grammar.
// ---------------------------------------------------------------------------

namespace synth {

struct NounEntry {
    const char* singular;
    const char* plural;
};
struct VerbEntry {
    const char* singular;  // agrees with a singular subject ("runs")
    const char* plural;    // agrees with a plural subject ("run")
};

inline const std::vector<NounEntry>& nouns() {
    static const std::vector<NounEntry> entries = {
        {"dog", "dogs"},     {"cat", "cats"},   {"bird", "birds"},
        {"horse", "horses"}, {"frog", "frogs"}, {"cow", "cows"},
        {"pig", "pigs"},     {"hen", "hens"},   {"rat", "rats"},
        {"owl", "owls"},
    };
    return entries;
}

inline const std::vector<VerbEntry>& verbs() {
    static const std::vector<VerbEntry> entries = {
        {"runs", "run"},     {"sleeps", "sleep"}, {"jumps", "jump"},
        {"sings", "sing"},   {"walks", "walk"},   {"barks", "bark"},
        {"swims", "swim"},   {"waits", "wait"},
    };
    return entries;
}

inline const std::vector<const char*>& prepositions() {
    static const std::vector<const char*> entries = {"near", "behind",
                                                     "beside", "above"};
    return entries;
}

struct AgreementSentence {
    std::string good;
    std::string bad;
    std::string phenomenon;
};

// One agreement item: subject number uniform, verb inflection flipped in the
// ungrammatical variant. The "pp" phenomenon inserts a prepositional
// distractor noun of random number between subject and verb.
inline AgreementSentence sample_agreement(Rng& rng) {
    const auto& noun = nouns()[uniform_below(rng, nouns().size())];
    const auto& verb = verbs()[uniform_below(rng, verbs().size())];
    const bool plural_subject = uniform_below(rng, 2) == 1;
    const char* subject = plural_subject ? noun.plural : noun.singular;
    const char* verb_good = plural_subject ? verb.plural : verb.singular;
    const char* verb_bad = plural_subject ? verb.singular : verb.plural;

    AgreementSentence item;
    if (uniform_below(rng, 2) == 0) {
        item.phenomenon = "sv_agreement_simple";
        item.good = std::string("the ") + subject + " " + verb_good;
        item.bad = std::string("the ") + subject + " " + verb_bad;
    } else {
        item.phenomenon = "sv_agreement_pp";
        const auto& distractor = nouns()[uniform_below(rng, nouns().size())];
        const char* dword = uniform_below(rng, 2) == 1 ? distractor.plural
                                                       : distractor.singular;
        const char* prep =
            prepositions()[uniform_below(rng, prepositions().size())];
        const std::string middle =
            std::string(" ") + prep + " the " + dword + " ";
        item.good = std::string("the ") + subject + middle + verb_good;
        item.bad = std::string("the ") + subject + middle + verb_bad;
    }
    return item;
}

}  // namespace synth

struct AgreementDataset {
    std::vector<MinimalPairRecord> pairs;
    std::vector<std::string> corpus;  // grammatical training sentences
};

inline AgreementDataset gen_agreement_pairs(std::uint64_t seed,
                                            std::size_t n_pairs,
                                            std::size_t corpus_sentences) {
    if (n_pairs < 1) throw user_error("gen_agreement_pairs: size must be >= 1");
    AgreementDataset dataset;
    Rng pair_rng(mix_seed(seed, 1));
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const auto item = synth::sample_agreement(pair_rng);
        char uid[32];
        std::snprintf(uid, sizeof(uid), "pair-%06zu", i);
        dataset.pairs.push_back(
            {uid, item.phenomenon, item.good, item.bad});
    }
    Rng corpus_rng(mix_seed(seed, 2));
    dataset.corpus.reserve(corpus_sentences);
    for (std::size_t i = 0; i < corpus_sentences; ++i) {
        dataset.corpus.push_back(synth::sample_agreement(corpus_rng).good);
    }
    return dataset;
}

// ---------------------------------------------------------------------------
// Psychometric measures: value = b0 + b_len*length + b_freq*logfreq
// + b_surp*surprisal + noise. The reference model's surprisals come from the
// supplied checkpoint, which must be the same model the harness later
// evaluates, or coefficient recovery is impossible.
// ---------------------------------------------------------------------------

struct PsychGroundTruth {
    std::string measure;
    double b0 = 0.0;
    double b_len = 0.0;
    double b_freq = 0.0;
    double b_surp = 0.0;
    double noise_sd = 0.0;
};

struct PsychDataset {
    std::vector<std::string> sentences;
    std::vector<MeasureRow> measures;
    std::vector<PsychGroundTruth> truth;
};

inline PsychDataset gen_psych_measures(const Checkpoint& checkpoint,
                                       const Vocab& vocab, std::uint64_t seed,
                                       std::size_t n_sentences,
                                       double noise_sd = 0.3) {
    if (n_sentences < 1) {
        throw user_error("gen_psych_measures: size must be >= 1");
    }
    if (noise_sd < 0.0) {
        throw user_error("gen_psych_measures: noise must be >= 0");
    }
    PsychDataset dataset;
    Rng rng(mix_seed(seed, 3));
    for (std::size_t i = 0; i < n_sentences; ++i) {
        dataset.sentences.push_back(synth::sample_agreement(rng).good);
    }
    const FrequencyTable frequencies(dataset.sentences);

    const std::vector<std::string> measure_names = {"rt_first", "rt_gaze",
                                                    "erp_n400"};
    Rng coef_rng(mix_seed(seed, 4));
    for (const auto& name : measure_names) {
        PsychGroundTruth truth;
        truth.measure = name;
        truth.b0 = 80.0 + 120.0 * uniform01(coef_rng);
        truth.b_len = 1.0 + 4.0 * uniform01(coef_rng);
        truth.b_freq = -8.0 + 6.0 * uniform01(coef_rng);
        truth.b_surp = 2.0 + 10.0 * uniform01(coef_rng);
        truth.noise_sd = noise_sd;
        dataset.truth.push_back(truth);
    }

    Rng noise_rng(mix_seed(seed, 5));
    for (std::size_t s = 0; s < dataset.sentences.size(); ++s) {
        const auto scored =
            score_sentence(checkpoint, vocab, dataset.sentences[s]);
        for (std::size_t w = 0; w < scored.words.size(); ++w) {
            const double length =
                static_cast<double>(scored.words[w].size());
            const double logfreq = frequencies.log_frequency(scored.words[w]);
            const double surprisal = scored.word_surprisal_bits[w];
            for (const auto& truth : dataset.truth) {
                MeasureRow row;
                row.sentence_id = s;
                row.word_index = w;
                row.word = scored.words[w];
                row.measure = truth.measure;
                row.value = truth.b0 + truth.b_len * length +
                            truth.b_freq * logfreq + truth.b_surp * surprisal +
                            truth.noise_sd * gaussian(noise_rng);
                dataset.measures.push_back(std::move(row));
            }
        }
    }
    return dataset;
}

inline void write_measures(const std::string& path,
                           std::span<const MeasureRow> rows) {
    std::string out = "sentence_id,word_index,word,measure,value\n";
    for (const auto& row : rows) {
        out += std::to_string(row.sentence_id);
        out += ',';
        out += std::to_string(row.word_index);
        out += ',';
        out += row.word;
        out += ',';
        out += row.measure;
        out += ',';
        out += format_double(row.value);
        out += '\n';
    }
    write_file(path, out);
}

inline void write_ground_truth(const std::string& path,
                               std::span<const PsychGroundTruth> truth) {
    std::string out = "measure,b0,b_len,b_freq,b_surp,noise_sd\n";
    for (const auto& t : truth) {
        out += t.measure;
        out += ',';
        out += format_double(t.b0);
        out += ',';
        out += format_double(t.b_len);
        out += ',';
        out += format_double(t.b_freq);
        out += ',';
        out += format_double(t.b_surp);
        out += ',';
        out += format_double(t.noise_sd);
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Template treebank over the relations {nsubj, dobj, prep, attr, root} plus
// det/pobj/punct. Every sentence ends in a period attached to the root.
// ---------------------------------------------------------------------------

inline std::vector<ParsedSentence> gen_parsed_corpus(std::uint64_t seed,
                                                     std::size_t n_sentences) {
    if (n_sentences < 1) {
        throw user_error("gen_parsed_corpus: size must be >= 1");
    }
    static const std::vector<const char*> tverbs = {"chased", "saw", "liked",
                                                    "found"};
    static const std::vector<const char*> iverbs = {"slept", "ran", "jumped"};

    Rng rng(mix_seed(seed, 6));
    std::vector<ParsedSentence> sentences;
    sentences.reserve(n_sentences);
    for (std::size_t s = 0; s < n_sentences; ++s) {
        const auto& n1 = synth::nouns()[uniform_below(rng, synth::nouns().size())];
        const auto& n2 = synth::nouns()[uniform_below(rng, synth::nouns().size())];
        ParsedSentence sentence;
        switch (uniform_below(rng, 4)) {
            case 0: {  // the N V .
                const char* verb = iverbs[uniform_below(rng, iverbs.size())];
                sentence.tokens = {"the", n1.singular, verb, "."};
                sentence.heads = {2, 3, 0, 3};
                sentence.relations = {"det", "nsubj", "root", "punct"};
                break;
            }
            case 1: {  // the N V the N2 .
                const char* verb = tverbs[uniform_below(rng, tverbs.size())];
                sentence.tokens = {"the", n1.singular, verb,
                                   "the", n2.singular, "."};
                sentence.heads = {2, 3, 0, 5, 3, 3};
                sentence.relations = {"det", "nsubj", "root",
                                      "det", "dobj",  "punct"};
                break;
            }
            case 2: {  // the N is a N2 .
                sentence.tokens = {"the", n1.singular, "is",
                                   "a",   n2.singular, "."};
                sentence.heads = {2, 3, 0, 5, 3, 3};
                sentence.relations = {"det", "nsubj", "root",
                                      "det", "attr",  "punct"};
                break;
            }
            default: {  // the N V prep the N2 .
                const char* verb = iverbs[uniform_below(rng, iverbs.size())];
                const char* prep = synth::prepositions()[uniform_below(
                    rng, synth::prepositions().size())];
                sentence.tokens = {"the", n1.singular, verb, prep,
                                   "the", n2.singular, "."};
                sentence.heads = {2, 3, 0, 3, 6, 4, 3};
                sentence.relations = {"det",  "nsubj", "root", "prep",
                                      "det",  "pobj",  "punct"};
                break;
            }
        }
        sentences.push_back(std::move(sentence));
    }
    return sentences;
}

}  // namespace wmlm
