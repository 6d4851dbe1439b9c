#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "wmlm/checkpoint.hpp"
#include "wmlm/train_config.hpp"
#include "wmlm/transformer.hpp"

// Training loop: contiguous fixed-length chunking with per-epoch seeded
// shuffling, global-norm gradient clipping, and bias-corrected AdamW with
// decoupled weight decay (layer-norm parameters and biases undecayed).

namespace wmlm {

// Chunks a token stream into non-overlapping sequences of fixed length; the
// final partial chunk is dropped.
inline std::vector<std::vector<std::int32_t>> chunk_stream(
    std::span<const std::int32_t> stream, int sequence_length) {
    if (sequence_length < 2) {
        throw user_error("chunk_stream: sequence_length must be >= 2");
    }
    const auto len = static_cast<std::size_t>(sequence_length);
    if (stream.size() < len) {
        throw user_error("chunk_stream: token stream shorter than one sequence (" +
                         std::to_string(stream.size()) + " < " +
                         std::to_string(len) + ")");
    }
    std::vector<std::vector<std::int32_t>> sequences;
    sequences.reserve(stream.size() / len);
    for (std::size_t start = 0; start + len <= stream.size(); start += len) {
        sequences.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                               stream.begin() +
                                   static_cast<std::ptrdiff_t>(start + len));
    }
    return sequences;
}

// Deterministic per-epoch shuffle order over n sequences.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                            int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    deterministic_shuffle(order, rng);
    return order;
}

using TokenBatch = std::vector<std::vector<std::int32_t>>;

// Chunk, shuffle per epoch, group into batches. The final partial batch of
// sequences is kept.
inline std::vector<TokenBatch> make_batches(std::span<const std::int32_t> stream,
                                            int sequence_length, int batch_size,
                                            std::uint64_t seed, int epoch) {
    if (batch_size < 1) throw user_error("make_batches: batch_size must be >= 1");
    const auto sequences = chunk_stream(stream, sequence_length);
    const auto order = epoch_order(sequences.size(), seed, epoch);
    std::vector<TokenBatch> batches;
    const auto bs = static_cast<std::size_t>(batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
        TokenBatch batch;
        for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i) {
            batch.push_back(sequences[order[i]]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

// Global L2-norm clipping: if the norm exceeds max_norm every gradient is
// scaled by max_norm / norm. Returns the pre-clip norm.
template <class T>
double clip_gradients(const ModelConfig& config, Parameters<T>& grads,
                      double max_norm) {
    if (!(max_norm > 0.0)) {
        throw std::invalid_argument("clip_gradients: max_norm must be > 0");
    }
    double sum_sq = 0.0;
    for_each_tensor(config, grads, [&](const TensorRef<T>& ref) {
        for (const T g : ref.data) {
            const double d = static_cast<double>(g);
            sum_sq += d * d;
        }
    });
    const double norm = std::sqrt(sum_sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for_each_tensor(config, grads, [&](const TensorRef<T>& ref) {
            for (T& g : ref.data) {
                g = static_cast<T>(static_cast<double>(g) * scale);
            }
        });
    }
    return norm;
}

// One bias-corrected AdamW update (step is 1-based). Weight decay is
// decoupled: applied directly to the parameters, scaled by the learning
// rate, never added to the gradients.
template <class T>
void adamw_step(const ModelConfig& config, Parameters<T>& params,
                const Parameters<T>& grads, AdamState<T>& state,
                const TrainConfig& train, std::int64_t step) {
    if (step < 1) throw std::invalid_argument("adamw_step: step must be >= 1");
    const double bias1 =
        1.0 - std::pow(train.adam_beta1, static_cast<double>(step));
    const double bias2 =
        1.0 - std::pow(train.adam_beta2, static_cast<double>(step));

    std::vector<TensorRef<T>> param_refs, m_refs, v_refs;
    std::vector<TensorRef<const T>> grad_refs;
    for_each_tensor(config, params,
                    [&](const TensorRef<T>& ref) { param_refs.push_back(ref); });
    for_each_tensor(config, grads, [&](const TensorRef<const T>& ref) {
        grad_refs.push_back(ref);
    });
    for_each_tensor(config, state.m,
                    [&](const TensorRef<T>& ref) { m_refs.push_back(ref); });
    for_each_tensor(config, state.v,
                    [&](const TensorRef<T>& ref) { v_refs.push_back(ref); });

    for (std::size_t t = 0; t < param_refs.size(); ++t) {
        const auto& g = grad_refs[t];
        for (const T gv : g.data) {
            if (!std::isfinite(static_cast<double>(gv))) {
                throw numeric_error("adamw_step: non-finite gradient in '" +
                                    g.name + "'");
            }
        }
        auto& p = param_refs[t];
        auto& m = m_refs[t];
        auto& v = v_refs[t];
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gv = static_cast<double>(g.data[i]);
            const double mv =
                train.adam_beta1 * static_cast<double>(m.data[i]) +
                (1.0 - train.adam_beta1) * gv;
            const double vv =
                train.adam_beta2 * static_cast<double>(v.data[i]) +
                (1.0 - train.adam_beta2) * gv * gv;
            m.data[i] = static_cast<T>(mv);
            v.data[i] = static_cast<T>(vv);
            const double m_hat = mv / bias1;
            const double v_hat = vv / bias2;
            double update =
                train.learning_rate * m_hat /
                (std::sqrt(v_hat) + train.adam_epsilon);
            if (p.decays) {
                update += train.learning_rate * train.weight_decay *
                          static_cast<double>(p.data[i]);
            }
            p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) - update);
        }
    }
}

struct TrainResult {
    Checkpoint checkpoint;
    std::int64_t steps = 0;
    double final_loss = 0.0;
    bool diverged = false;
};

// Full training run. Loss is logged one line per step as
// "step<TAB>epoch<TAB>loss_nats" (appended). A checkpoint is written at the
// end of each epoch (or every checkpoint_every_steps) and at the end; on a
// non-finite loss the run aborts, leaving the last good checkpoint on disk.
inline TrainResult train(const ModelConfig& model_config,
                         const TrainConfig& train_config,
                         std::span<const std::int32_t> token_stream,
                         const std::string& tokenizer_hash,
                         const std::string& checkpoint_path,
                         const std::string& loss_log_path = "") {
    model_config.validate();
    train_config.validate();

    std::ofstream loss_log;
    if (!loss_log_path.empty()) {
        loss_log.open(loss_log_path, std::ios::app);
        if (!loss_log) {
            throw user_error("cannot open loss log: " + loss_log_path);
        }
    }

    Checkpoint checkpoint;
    checkpoint.model = model_config;
    checkpoint.train = train_config;
    checkpoint.tokenizer_hash = tokenizer_hash;
    checkpoint.params = init_parameters<float>(model_config, train_config.seed);
    checkpoint.moments = AdamState<float>{zero_parameters<float>(model_config),
                                          zero_parameters<float>(model_config)};

    TrainResult result;
    std::int64_t step = 0;
    bool wrote_any = false;
    auto save_checkpoint = [&] {
        if (checkpoint_path.empty()) return;
        checkpoint.step = step;
        checkpoint.save(checkpoint_path);
        wrote_any = true;
    };

    for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
        const auto batches =
            make_batches(token_stream, train_config.sequence_length,
                         train_config.batch_size, train_config.seed, epoch);
        for (const auto& batch : batches) {
            auto back = backward(model_config, checkpoint.params, batch);
            if (!std::isfinite(back.loss)) {
                // Divergence: keep the last good checkpoint on disk.
                result.diverged = true;
                result.steps = step;
                result.checkpoint = std::move(checkpoint);
                return result;
            }
            clip_gradients(model_config, back.grads,
                           train_config.grad_clip_max_norm);
            ++step;
            adamw_step(model_config, checkpoint.params, back.grads,
                       *checkpoint.moments, train_config, step);
            result.final_loss = back.loss;
            if (loss_log.is_open()) {
                loss_log << step << '\t' << epoch << '\t'
                         << format_double(back.loss) << '\n';
            }
            if (train_config.checkpoint_every_steps > 0 &&
                step % train_config.checkpoint_every_steps == 0) {
                save_checkpoint();
            }
        }
        if (train_config.checkpoint_every_steps == 0) {
            save_checkpoint();
        }
    }

    if (!wrote_any || checkpoint.step != step) {
        save_checkpoint();
    }
    result.steps = step;
    result.checkpoint = std::move(checkpoint);
    return result;
}

}  // namespace wmlm
