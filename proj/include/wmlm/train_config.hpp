#pragma once

#include <cstdint>

#include "wmlm/util.hpp"

namespace wmlm {

struct TrainConfig {
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    int batch_size = 64;  // sequences per step
    double grad_clip_max_norm = 1.0;
    int epochs = 5;
    std::uint64_t seed = 0;
    int sequence_length = 64;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    // 0 = checkpoint at the end of each epoch; otherwise every N steps.
    int checkpoint_every_steps = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw user_error("train config: learning_rate must be > 0");
        }
        if (weight_decay < 0.0) {
            throw user_error("train config: weight_decay must be >= 0");
        }
        if (batch_size < 1) {
            throw user_error("train config: batch_size must be >= 1");
        }
        if (!(grad_clip_max_norm > 0.0)) {
            throw user_error("train config: grad_clip_max_norm must be > 0");
        }
        if (epochs < 1) throw user_error("train config: epochs must be >= 1");
        if (sequence_length < 2) {
            throw user_error("train config: sequence_length must be >= 2");
        }
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) ||
            !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
            throw user_error("train config: adam betas must be in (0,1)");
        }
        if (!(adam_epsilon > 0.0)) {
            throw user_error("train config: adam_epsilon must be > 0");
        }
        if (checkpoint_every_steps < 0) {
            throw user_error("train config: checkpoint_every_steps must be >= 0");
        }
    }
};

}  // namespace wmlm
