#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wmlm/dump.hpp"
#include "wmlm/evaluation.hpp"
#include "wmlm/io.hpp"
#include "wmlm/probe.hpp"
#include "wmlm/scoring.hpp"
#include "wmlm/synthetic.hpp"
#include "wmlm/trainer.hpp"

// Command-line surface. Exit codes: 0 success, 1 user error (bad flags,
// missing files, malformed data), 2 internal error.

namespace wmlm::cli {

namespace detail {

inline std::string hash_file(const std::string& path) {
    return to_hex(fnv1a64(read_file(path)));
}

struct LoadedModel {
    Checkpoint checkpoint;
    Vocab vocab;
};

inline LoadedModel load_model(const std::string& checkpoint_path,
                              const std::string& vocab_path) {
    LoadedModel loaded{Checkpoint::load(checkpoint_path),
                       Vocab::load(vocab_path)};
    const auto actual = hash_file(vocab_path);
    if (loaded.checkpoint.tokenizer_hash != actual) {
        throw user_error("tokenizer mismatch: checkpoint was trained with "
                         "vocab hash " +
                         loaded.checkpoint.tokenizer_hash + ", but " +
                         vocab_path + " hashes to " + actual);
    }
    return loaded;
}

inline void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
}

inline void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) {
        throw user_error("cannot create directory " + path + ": " +
                         ec.message());
    }
}

// BOS-prefixed token stream over corpus lines.
inline std::vector<std::int32_t> corpus_token_stream(
    const std::vector<std::string>& lines, const Vocab& vocab) {
    std::vector<std::int32_t> stream;
    std::unordered_map<std::string, std::vector<std::int32_t>> cache;
    for (const auto& line : lines) {
        if (trim(line).empty()) continue;
        stream.push_back(Vocab::bos_id);
        const auto ids = encode_with_cache(line, vocab, cache);
        stream.insert(stream.end(), ids.begin(), ids.end());
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string corpus, tokenizer, out, config_path, loss_log;
    ModelConfig model;
    TrainConfig train;
};

inline int run_tok_train(const std::string& corpus_path,
                         const std::string& out_path, int vocab_size) {
    const auto corpus = read_corpus(corpus_path);
    const auto vocab = train_bpe(corpus, vocab_size);
    ensure_parent_dir(out_path);
    vocab.save(out_path);
    std::cout << "trained tokenizer: " << vocab.size() << " tokens ("
              << vocab.merges.size() << " merges) -> " << out_path << "\n";
    return 0;
}

// Applies config-file values for keys the command line did not set.
inline void apply_train_config(const RunConfig& config,
                               const std::set<std::string>& cli_given,
                               TrainArgs& args) {
    static const std::set<std::string> allowed = {
        "corpus",        "tokenizer",      "out",
        "loss_log",      "n_layers",       "d_model",
        "n_heads",       "max_context",    "untied_head",
        "constraint",    "learning_rate",  "weight_decay",
        "batch_size",    "grad_clip_max_norm", "epochs",
        "seed",          "sequence_length", "adam_beta1",
        "adam_beta2",    "adam_epsilon",   "checkpoint_every_steps",
    };
    config.reject_unknown(allowed);
    auto take = [&](const char* key, auto&& apply) {
        if (!cli_given.count(key) && config.has(key)) apply(config.get(key));
    };
    take("corpus", [&](const std::string& v) { args.corpus = v; });
    take("tokenizer", [&](const std::string& v) { args.tokenizer = v; });
    take("out", [&](const std::string& v) { args.out = v; });
    take("loss_log", [&](const std::string& v) { args.loss_log = v; });
    take("n_layers", [&](const std::string& v) {
        args.model.n_layers = static_cast<int>(parse_int(v, "n_layers"));
    });
    take("d_model", [&](const std::string& v) {
        args.model.d_model = static_cast<int>(parse_int(v, "d_model"));
    });
    take("n_heads", [&](const std::string& v) {
        args.model.n_heads = static_cast<int>(parse_int(v, "n_heads"));
    });
    take("max_context", [&](const std::string& v) {
        args.model.max_context = static_cast<int>(parse_int(v, "max_context"));
    });
    take("untied_head", [&](const std::string& v) {
        if (v != "true" && v != "false") {
            throw user_error("config: untied_head must be true or false");
        }
        args.model.untied_head = v == "true";
    });
    take("constraint", [&](const std::string& v) {
        args.model.constraint = ConstraintSpec::parse(v);
    });
    take("learning_rate", [&](const std::string& v) {
        args.train.learning_rate = parse_double(v, "learning_rate");
    });
    take("weight_decay", [&](const std::string& v) {
        args.train.weight_decay = parse_double(v, "weight_decay");
    });
    take("batch_size", [&](const std::string& v) {
        args.train.batch_size = static_cast<int>(parse_int(v, "batch_size"));
    });
    take("grad_clip_max_norm", [&](const std::string& v) {
        args.train.grad_clip_max_norm = parse_double(v, "grad_clip_max_norm");
    });
    take("epochs", [&](const std::string& v) {
        args.train.epochs = static_cast<int>(parse_int(v, "epochs"));
    });
    take("seed", [&](const std::string& v) {
        args.train.seed = static_cast<std::uint64_t>(parse_int(v, "seed"));
    });
    take("sequence_length", [&](const std::string& v) {
        args.train.sequence_length =
            static_cast<int>(parse_int(v, "sequence_length"));
    });
    take("adam_beta1", [&](const std::string& v) {
        args.train.adam_beta1 = parse_double(v, "adam_beta1");
    });
    take("adam_beta2", [&](const std::string& v) {
        args.train.adam_beta2 = parse_double(v, "adam_beta2");
    });
    take("adam_epsilon", [&](const std::string& v) {
        args.train.adam_epsilon = parse_double(v, "adam_epsilon");
    });
    take("checkpoint_every_steps", [&](const std::string& v) {
        args.train.checkpoint_every_steps =
            static_cast<int>(parse_int(v, "checkpoint_every_steps"));
    });
}

inline int run_train(TrainArgs& args, const std::set<std::string>& cli_given) {
    if (!args.config_path.empty()) {
        apply_train_config(parse_config_file(args.config_path), cli_given,
                           args);
    }
    if (args.corpus.empty()) throw user_error("train: missing corpus path");
    if (args.tokenizer.empty()) {
        throw user_error("train: missing tokenizer path");
    }
    if (args.out.empty()) throw user_error("train: missing output path");

    const auto vocab = Vocab::load(args.tokenizer);
    args.model.vocab_size = vocab.size();
    args.model.validate();
    args.train.validate();

    const auto lines = read_lines(args.corpus);
    const auto stream = corpus_token_stream(lines, vocab);
    if (stream.empty()) throw user_error("train: corpus is empty");

    ensure_parent_dir(args.out);
    if (!args.loss_log.empty()) ensure_parent_dir(args.loss_log);
    const auto result = wmlm::train(args.model, args.train, stream,
                                    hash_file(args.tokenizer), args.out,
                                    args.loss_log);
    if (result.diverged) {
        std::cerr << "training diverged (non-finite loss) after "
                  << result.steps
                  << " steps; the last saved checkpoint is retained\n";
        return 2;
    }
    std::cout << "trained " << result.steps << " steps, final loss "
              << format_double(result.final_loss) << " nats -> " << args.out
              << "\n";
    return 0;
}

inline int run_score(const std::string& checkpoint_path,
                     const std::string& tokenizer_path,
                     const std::string& input_path,
                     const std::string& out_path) {
    const auto loaded = load_model(checkpoint_path, tokenizer_path);
    const auto lines = read_lines(input_path);

    std::ostringstream out;
    std::size_t scored_count = 0, attempted = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        ++attempted;
        try {
            const auto scored =
                score_sentence(loaded.checkpoint, loaded.vocab, lines[i]);
            for (std::size_t w = 0; w < scored.words.size(); ++w) {
                out << i << '\t' << w << '\t' << scored.words[w] << '\t'
                    << format_double(scored.word_surprisal_bits[w]) << '\n';
            }
            out << "# sentence\t" << i << "\tlogprob_nats="
                << format_double(scored.logprob_nats)
                << "\ttokens=" << scored.token_ids.size()
                << "\twords=" << scored.words.size() << '\n';
            ++scored_count;
        } catch (const user_error& e) {
            std::cerr << "line " << (i + 1) << " skipped: " << e.what()
                      << "\n";
        }
    }
    if (out_path.empty()) {
        std::cout << out.str();
    } else {
        ensure_parent_dir(out_path);
        write_file(out_path, out.str());
    }
    if (attempted > 0 && scored_count == 0) {
        std::cerr << "no sentence could be scored\n";
        return 1;
    }
    return 0;
}

inline int run_eval_blimp(const std::string& checkpoint_path,
                          const std::string& tokenizer_path,
                          const std::string& pairs_path,
                          const std::string& out_path) {
    const auto loaded = load_model(checkpoint_path, tokenizer_path);
    const auto records = read_pairs(pairs_path);
    const auto result =
        eval_minimal_pairs(loaded.checkpoint, loaded.vocab, records);

    std::string csv = "phenomenon,n_scored,n_correct,n_excluded,accuracy\n";
    for (const auto& [phenomenon, tally] : result.per_phenomenon) {
        csv += phenomenon + ',' + std::to_string(tally.n_scored) + ',' +
               std::to_string(tally.n_correct) + ',' +
               std::to_string(tally.n_excluded) + ',' +
               format_double(tally.accuracy()) + '\n';
    }
    csv += "overall," + std::to_string(result.overall.n_scored) + ',' +
           std::to_string(result.overall.n_correct) + ',' +
           std::to_string(result.overall.n_excluded) + ',' +
           format_double(result.overall.accuracy()) + '\n';
    if (!out_path.empty()) {
        ensure_parent_dir(out_path);
        write_file(out_path, csv);
    } else {
        std::cout << csv;
    }

    for (const auto& uid : result.excluded_uids) {
        std::cerr << "excluded: " << uid << "\n";
    }
    std::cout << "overall accuracy "
              << format_double(result.overall.accuracy()) << " ("
              << result.overall.n_correct << "/" << result.overall.n_scored
              << " scored, " << result.overall.n_excluded << " excluded)\n";
    return 0;
}

inline int run_eval_psycho(const std::string& checkpoint_path,
                           const std::string& tokenizer_path,
                           const std::string& sentences_path,
                           const std::string& measures_path,
                           const std::string& freq_corpus_path,
                           const std::string& out_path) {
    const auto loaded = load_model(checkpoint_path, tokenizer_path);
    const auto sentences = read_lines(sentences_path);
    const auto measure_rows = read_measures(measures_path);
    const FrequencyTable frequencies(
        freq_corpus_path.empty() ? sentences : read_lines(freq_corpus_path));

    // Score each referenced sentence once.
    std::map<std::size_t, ScoredSentence> scored;
    for (const auto& row : measure_rows) {
        if (row.sentence_id >= sentences.size()) {
            throw user_error("measures reference sentence_id " +
                             std::to_string(row.sentence_id) + " but " +
                             sentences_path + " has only " +
                             std::to_string(sentences.size()) + " lines");
        }
        if (!scored.count(row.sentence_id)) {
            scored.emplace(row.sentence_id,
                           score_sentence(loaded.checkpoint, loaded.vocab,
                                          sentences[row.sentence_id]));
        }
    }

    // One regression dataset per measure.
    std::map<std::string, RegressionDataset> datasets;
    for (const auto& row : measure_rows) {
        const auto& sentence = scored.at(row.sentence_id);
        if (row.word_index >= sentence.words.size()) {
            throw user_error("measures reference word_index " +
                             std::to_string(row.word_index) +
                             " beyond sentence " +
                             std::to_string(row.sentence_id));
        }
        if (sentence.words[row.word_index] != row.word) {
            throw user_error("measures word mismatch at sentence " +
                             std::to_string(row.sentence_id) + " word " +
                             std::to_string(row.word_index) + ": file says '" +
                             row.word + "', sentence has '" +
                             sentence.words[row.word_index] + "'");
        }
        auto& dataset = datasets[row.measure];
        dataset.measure = row.measure;
        RegressionRow reg;
        reg.word_id = std::to_string(row.sentence_id) + ":" +
                      std::to_string(row.word_index);
        reg.value = row.value;
        reg.word_length =
            static_cast<double>(sentence.words[row.word_index].size());
        reg.log_frequency =
            frequencies.log_frequency(sentence.words[row.word_index]);
        reg.surprisal_bits = sentence.word_surprisal_bits[row.word_index];
        dataset.rows.push_back(std::move(reg));
    }
    if (datasets.empty()) throw user_error("no measures to evaluate");

    std::string csv =
        "measure,n,ll_base,ll_full,delta_ll,delta_ll_per_1000,coef_surprisal\n";
    std::vector<double> deltas;
    for (const auto& [name, dataset] : datasets) {
        const auto result = delta_loglik(dataset);
        deltas.push_back(result.delta);
        csv += name + ',' + std::to_string(result.n) + ',' +
               format_double(result.base_ll) + ',' +
               format_double(result.full_ll) + ',' +
               format_double(result.delta) + ',' +
               format_double(result.delta_per_1000) + ',' +
               format_double(result.full_coefficients[3]) + '\n';
    }
    const double mean_delta = aggregate_delta(deltas);
    csv += "mean,,,," + format_double(mean_delta) + ",,\n";
    if (!out_path.empty()) {
        ensure_parent_dir(out_path);
        write_file(out_path, csv);
    } else {
        std::cout << csv;
    }
    std::cout << "mean delta log-likelihood " << format_double(mean_delta)
              << " across " << deltas.size() << " measures\n";
    return 0;
}

inline int run_probe(const std::string& checkpoint_path,
                     const std::string& tokenizer_path,
                     const std::string& parses_path,
                     const std::string& out_path, ProbeTrainOptions options,
                     bool include_punct) {
    const auto loaded = load_model(checkpoint_path, tokenizer_path);
    const auto sentences = read_parses(parses_path);
    if (sentences.size() < 5) {
        throw user_error("probe: need at least 5 parsed sentences, got " +
                         std::to_string(sentences.size()));
    }

    // Deterministic 80/10/10 split.
    auto order = epoch_order(sentences.size(), options.seed, 0);
    ProbeCorpusSplits splits;
    const std::size_t n_train =
        std::max<std::size_t>(2, sentences.size() * 8 / 10);
    const std::size_t n_val = std::max<std::size_t>(
        1, (sentences.size() - n_train) / 2);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& sentence = sentences[order[i]];
        if (i < n_train) {
            splits.train.push_back(sentence);
        } else if (i < n_train + n_val) {
            splits.validation.push_back(sentence);
        } else {
            splits.test.push_back(sentence);
        }
    }
    if (splits.test.empty()) {
        throw user_error("probe: corpus too small for a test split");
    }

    const auto rows = layer_sweep(loaded.checkpoint, loaded.vocab, splits,
                                  options, !include_punct);
    std::string csv = "layer,relation,uuas,n_gold_edges\n";
    double best_overall = -1.0;
    int best_layer = 0;
    for (const auto& row : rows) {
        csv += std::to_string(row.layer) + ',' + row.relation + ',' +
               format_double(row.uuas) + ',' + std::to_string(row.n_gold) +
               '\n';
        if (row.relation == "overall" && row.uuas > best_overall) {
            best_overall = row.uuas;
            best_layer = row.layer;
        }
    }
    if (!out_path.empty()) {
        ensure_parent_dir(out_path);
        write_file(out_path, csv);
    } else {
        std::cout << csv;
    }
    std::cout << "best layer " << best_layer << " with overall UUAS "
              << format_double(best_overall) << " (train/val/test = "
              << splits.train.size() << "/" << splits.validation.size() << "/"
              << splits.test.size() << ")\n";
    return 0;
}

inline int run_attn_dump(const std::string& checkpoint_path,
                         const std::string& tokenizer_path,
                         const std::string& sentence,
                         const std::string& out_dir, int upscale) {
    const auto loaded = load_model(checkpoint_path, tokenizer_path);
    const auto dump =
        attn_dump(loaded.checkpoint, loaded.vocab, sentence, out_dir, upscale);
    std::cout << "dumped " << dump.attention.size() << " layers x "
              << (dump.attention.empty() ? 0 : dump.attention[0].size())
              << " heads over " << dump.tokens.size() << " tokens -> "
              << out_dir << "\n";
    return 0;
}

inline int run_gen_synth(const std::string& kind, std::uint64_t seed,
                         std::size_t size, const std::string& out_dir,
                         std::size_t corpus_size, double noise,
                         const std::string& checkpoint_path,
                         const std::string& tokenizer_path) {
    ensure_dir(out_dir);
    if (kind == "agreement-pairs") {
        const auto dataset = gen_agreement_pairs(seed, size, corpus_size);
        write_pairs(out_dir + "/pairs.jsonl", dataset.pairs);
        std::string corpus;
        for (const auto& line : dataset.corpus) {
            corpus += line;
            corpus += '\n';
        }
        write_file(out_dir + "/corpus.txt", corpus);
        std::cout << "wrote " << dataset.pairs.size() << " pairs and "
                  << dataset.corpus.size() << " corpus sentences -> "
                  << out_dir << "\n";
        return 0;
    }
    if (kind == "psych-measures") {
        if (checkpoint_path.empty() || tokenizer_path.empty()) {
            throw user_error(
                "gen-synth psych-measures needs --checkpoint and --tokenizer "
                "(the reference model whose surprisal generates the measures)");
        }
        const auto loaded = load_model(checkpoint_path, tokenizer_path);
        const auto dataset = gen_psych_measures(loaded.checkpoint,
                                                loaded.vocab, seed, size, noise);
        std::string sentences;
        for (const auto& line : dataset.sentences) {
            sentences += line;
            sentences += '\n';
        }
        write_file(out_dir + "/sentences.txt", sentences);
        write_measures(out_dir + "/measures.csv", dataset.measures);
        write_ground_truth(out_dir + "/ground_truth.csv", dataset.truth);
        std::cout << "wrote " << dataset.sentences.size() << " sentences, "
                  << dataset.measures.size() << " measure rows -> " << out_dir
                  << "\n";
        return 0;
    }
    if (kind == "parsed-corpus") {
        const auto sentences = gen_parsed_corpus(seed, size);
        write_parses(out_dir + "/parses.conll", sentences);
        std::cout << "wrote " << sentences.size() << " parsed sentences -> "
                  << out_dir << "\n";
        return 0;
    }
    throw user_error("unknown gen-synth kind '" + kind +
                     "' (expected agreement-pairs, psych-measures or "
                     "parsed-corpus)");
}

}  // namespace detail

// Builds and runs the CLI. Separated from main() so tests can invoke it.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"working-memory constrained language modeling toolkit"};
    app.require_subcommand(1);

    // tok-train --------------------------------------------------------
    std::string tok_corpus, tok_out;
    int tok_vocab_size = 2000;
    auto* tok_train = app.add_subcommand(
        "tok-train", "train a byte-level BPE tokenizer on a corpus");
    tok_train->add_option("--corpus", tok_corpus, "training text file")
        ->required();
    tok_train->add_option("--out", tok_out, "output vocab file")->required();
    tok_train->add_option("--vocab-size", tok_vocab_size,
                          "total vocabulary size (bytes + specials + merges)");

    // train ------------------------------------------------------------
    detail::TrainArgs train_args;
    std::string train_constraint = "none";
    auto* train_cmd = app.add_subcommand(
        "train", "train a model from scratch on a tokenized corpus");
    train_cmd->add_option("--corpus", train_args.corpus, "training text file");
    train_cmd->add_option("--tokenizer", train_args.tokenizer, "vocab file");
    train_cmd->add_option("--out", train_args.out, "checkpoint output path");
    train_cmd->add_option("--config", train_args.config_path,
                          "key = value config file (flags override)");
    train_cmd->add_option("--loss-log", train_args.loss_log,
                          "per-step loss log path");
    train_cmd->add_option("--n-layers", train_args.model.n_layers, "layers");
    train_cmd->add_option("--d-model", train_args.model.d_model,
                          "embedding width");
    train_cmd->add_option("--n-heads", train_args.model.n_heads,
                          "attention heads");
    train_cmd->add_option("--max-context", train_args.model.max_context,
                          "maximum sequence length");
    train_cmd->add_flag("--untied-head", train_args.model.untied_head,
                        "use a separate output projection");
    train_cmd->add_option("--constraint", train_constraint,
                          "attention constraint, e.g. fixed_window:W=5");
    train_cmd->add_option("--learning-rate", train_args.train.learning_rate,
                          "AdamW learning rate");
    train_cmd->add_option("--weight-decay", train_args.train.weight_decay,
                          "decoupled weight decay");
    train_cmd->add_option("--batch-size", train_args.train.batch_size,
                          "sequences per step");
    train_cmd->add_option("--grad-clip", train_args.train.grad_clip_max_norm,
                          "global gradient-norm clip");
    train_cmd->add_option("--epochs", train_args.train.epochs, "epochs");
    train_cmd->add_option("--seed", train_args.train.seed, "RNG seed");
    train_cmd->add_option("--sequence-length",
                          train_args.train.sequence_length,
                          "training chunk length");
    train_cmd->add_option("--checkpoint-every",
                          train_args.train.checkpoint_every_steps,
                          "checkpoint every N steps (0 = each epoch)");

    // score ------------------------------------------------------------
    std::string score_ckpt, score_tok, score_input, score_out;
    auto* score_cmd = app.add_subcommand(
        "score", "word surprisals and log probabilities for sentences");
    score_cmd->add_option("--checkpoint", score_ckpt, "model checkpoint")
        ->required();
    score_cmd->add_option("--tokenizer", score_tok, "vocab file")->required();
    score_cmd
        ->add_option("--input", score_input, "newline-delimited sentences")
        ->required();
    score_cmd->add_option("--out", score_out,
                          "output TSV (default: standard output)");

    // eval-blimp -------------------------------------------------------
    std::string blimp_ckpt, blimp_tok, blimp_pairs, blimp_out;
    auto* blimp_cmd = app.add_subcommand(
        "eval-blimp", "minimal-pair accuracy by linguistic phenomenon");
    blimp_cmd->add_option("--checkpoint", blimp_ckpt, "model checkpoint")
        ->required();
    blimp_cmd->add_option("--tokenizer", blimp_tok, "vocab file")->required();
    blimp_cmd->add_option("--pairs", blimp_pairs, "JSONL minimal pairs")
        ->required();
    blimp_cmd->add_option("--out", blimp_out,
                          "accuracy CSV (default: standard output)");

    // eval-psycho ------------------------------------------------------
    std::string psy_ckpt, psy_tok, psy_sentences, psy_measures, psy_freq,
        psy_out;
    auto* psy_cmd = app.add_subcommand(
        "eval-psycho",
        "delta log-likelihood of surprisal against psychometric measures");
    psy_cmd->add_option("--checkpoint", psy_ckpt, "model checkpoint")
        ->required();
    psy_cmd->add_option("--tokenizer", psy_tok, "vocab file")->required();
    psy_cmd->add_option("--sentences", psy_sentences,
                        "newline-delimited sentences")
        ->required();
    psy_cmd->add_option("--measures", psy_measures, "measures CSV")->required();
    psy_cmd->add_option("--freq-corpus", psy_freq,
                        "corpus for the frequency covariate "
                        "(default: the sentences file)");
    psy_cmd->add_option("--out", psy_out,
                        "per-measure CSV (default: standard output)");

    // probe ------------------------------------------------------------
    std::string probe_ckpt, probe_tok, probe_parses, probe_out;
    ProbeTrainOptions probe_options;
    bool probe_include_punct = false;
    auto* probe_cmd = app.add_subcommand(
        "probe", "structural probe layer sweep with per-relation UUAS");
    probe_cmd->add_option("--checkpoint", probe_ckpt, "model checkpoint")
        ->required();
    probe_cmd->add_option("--tokenizer", probe_tok, "vocab file")->required();
    probe_cmd->add_option("--parses", probe_parses,
                          "10-column dependency file")
        ->required();
    probe_cmd->add_option("--out", probe_out,
                          "UUAS CSV (default: standard output)");
    probe_cmd->add_option("--k-probe", probe_options.k_probe,
                          "probe dimensionality");
    probe_cmd->add_option("--epochs", probe_options.epochs, "probe epochs");
    probe_cmd->add_option("--lr", probe_options.learning_rate,
                          "probe learning rate");
    probe_cmd->add_option("--patience", probe_options.patience,
                          "early-stop patience in epochs");
    probe_cmd->add_option("--seed", probe_options.seed,
                          "split/init seed");
    probe_cmd->add_flag("--include-punct", probe_include_punct,
                        "keep punctuation in gold edges and decoding");

    // attn-dump --------------------------------------------------------
    std::string dump_ckpt, dump_tok, dump_out;
    std::string dump_sentence =
        "The trophy would not fit in the brown suitcase because it was too "
        "small.";
    int dump_upscale = 1;
    auto* dump_cmd = app.add_subcommand(
        "attn-dump", "export per-head attention matrices and heatmaps");
    dump_cmd->add_option("--checkpoint", dump_ckpt, "model checkpoint")
        ->required();
    dump_cmd->add_option("--tokenizer", dump_tok, "vocab file")->required();
    dump_cmd->add_option("--sentence", dump_sentence, "sentence to analyze");
    dump_cmd->add_option("--out", dump_out, "output directory")->required();
    dump_cmd->add_option("--upscale", dump_upscale,
                         "integer pixel upscale factor");

    // gen-synth --------------------------------------------------------
    std::string synth_kind, synth_out, synth_ckpt, synth_tok;
    std::uint64_t synth_seed = 0;
    std::size_t synth_size = 0, synth_corpus_size = 2000;
    double synth_noise = 0.3;
    auto* synth_cmd = app.add_subcommand(
        "gen-synth",
        "generate synthetic datasets (agreement-pairs, psych-measures, "
        "parsed-corpus)");
    synth_cmd->add_option("--kind", synth_kind, "dataset kind")->required();
    synth_cmd->add_option("--seed", synth_seed, "RNG seed");
    synth_cmd->add_option("--size", synth_size, "number of items")->required();
    synth_cmd->add_option("--out", synth_out, "output directory")->required();
    synth_cmd->add_option("--corpus-size", synth_corpus_size,
                          "training sentences for agreement-pairs");
    synth_cmd->add_option("--noise", synth_noise,
                          "measure noise SD for psych-measures");
    synth_cmd->add_option("--checkpoint", synth_ckpt,
                          "reference model for psych-measures");
    synth_cmd->add_option("--tokenizer", synth_tok,
                          "reference tokenizer for psych-measures");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << app.help();
        return 1;
    }

    try {
        if (tok_train->parsed()) {
            return detail::run_tok_train(tok_corpus, tok_out, tok_vocab_size);
        }
        if (train_cmd->parsed()) {
            std::set<std::string> given;
            static const std::map<std::string, std::string> flag_to_key = {
                {"--corpus", "corpus"},
                {"--tokenizer", "tokenizer"},
                {"--out", "out"},
                {"--loss-log", "loss_log"},
                {"--n-layers", "n_layers"},
                {"--d-model", "d_model"},
                {"--n-heads", "n_heads"},
                {"--max-context", "max_context"},
                {"--untied-head", "untied_head"},
                {"--constraint", "constraint"},
                {"--learning-rate", "learning_rate"},
                {"--weight-decay", "weight_decay"},
                {"--batch-size", "batch_size"},
                {"--grad-clip", "grad_clip_max_norm"},
                {"--epochs", "epochs"},
                {"--seed", "seed"},
                {"--sequence-length", "sequence_length"},
                {"--checkpoint-every", "checkpoint_every_steps"},
            };
            for (const auto& [flag, key] : flag_to_key) {
                if (train_cmd->count(flag) > 0) given.insert(key);
            }
            if (given.count("constraint")) {
                train_args.model.constraint =
                    ConstraintSpec::parse(train_constraint);
            }
            return detail::run_train(train_args, given);
        }
        if (score_cmd->parsed()) {
            return detail::run_score(score_ckpt, score_tok, score_input,
                                     score_out);
        }
        if (blimp_cmd->parsed()) {
            return detail::run_eval_blimp(blimp_ckpt, blimp_tok, blimp_pairs,
                                          blimp_out);
        }
        if (psy_cmd->parsed()) {
            return detail::run_eval_psycho(psy_ckpt, psy_tok, psy_sentences,
                                           psy_measures, psy_freq, psy_out);
        }
        if (probe_cmd->parsed()) {
            return detail::run_probe(probe_ckpt, probe_tok, probe_parses,
                                     probe_out, probe_options,
                                     probe_include_punct);
        }
        if (dump_cmd->parsed()) {
            return detail::run_attn_dump(dump_ckpt, dump_tok, dump_sentence,
                                         dump_out, dump_upscale);
        }
        if (synth_cmd->parsed()) {
            return detail::run_gen_synth(synth_kind, synth_seed, synth_size,
                                         synth_out, synth_corpus_size,
                                         synth_noise, synth_ckpt, synth_tok);
        }
    } catch (const user_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 2;  // unreachable: a subcommand is required
}

}  // namespace wmlm::cli
