#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wmlm/attention_constraints.hpp"
#include "wmlm/matrix.hpp"
#include "wmlm/util.hpp"

// Decoder-only transformer: pre-norm residual blocks, learned absolute
// positions, tanh-approximated GELU, and the constraint hook inside every
// attention head. Forward and backward are plain deterministic loops; with
// T = double the analytic gradients are finite-difference checkable.

namespace wmlm {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int max_context = 64;
    int vocab_size = 0;
    bool untied_head = false;
    ConstraintSpec constraint;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || max_context < 1 ||
            vocab_size < 1) {
            throw user_error("model config: all dimensions must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw user_error("model config: d_model must be divisible by n_heads");
        }
        constraint.validate();
    }
};

template <class T>
struct LayerParams {
    std::vector<T> ln1_gain, ln1_bias;
    Matrix<T> w_query, w_key, w_value, w_out;  // d x d, input-major
    std::vector<T> b_query, b_key, b_value, b_out;
    std::vector<T> ln2_gain, ln2_bias;
    Matrix<T> w_fc;    // d x 4d
    std::vector<T> b_fc;
    Matrix<T> w_proj;  // 4d x d
    std::vector<T> b_proj;
};

template <class T>
struct Parameters {
    Matrix<T> token_embedding;     // V x d; also the output head when tied
    Matrix<T> position_embedding;  // max_context x d
    std::vector<LayerParams<T>> layers;
    std::vector<T> lnf_gain, lnf_bias;
    Matrix<T> lm_head;  // V x d, present only when untied
    T w_primacy{};      // constraint learnables, used by the
    T w_recency{};      // primacy/recency family
};

// ---------------------------------------------------------------------------
// Named tensor traversal: optimizer, clipping, checkpointing and the
// gradient checker all walk parameters through this single order.
// ---------------------------------------------------------------------------

template <class T>
struct TensorRef {
    std::string name;
    std::span<T> data;
    std::vector<std::size_t> dims;
    bool decays;  // weight decay applies (layer norms and biases do not)
};

template <class T, class Fn>
void for_each_tensor(const ModelConfig& config, Parameters<T>& params, Fn&& fn) {
    auto mat = [&](const std::string& name, Matrix<T>& m, bool decays) {
        fn(TensorRef<T>{name, std::span<T>(m.data(), m.size()),
                        {m.rows(), m.cols()}, decays});
    };
    auto vec = [&](const std::string& name, std::vector<T>& v, bool decays) {
        fn(TensorRef<T>{name, std::span<T>(v.data(), v.size()), {v.size()},
                        decays});
    };
    mat("tok_emb", params.token_embedding, true);
    mat("pos_emb", params.position_embedding, true);
    for (int l = 0; l < config.n_layers; ++l) {
        auto& layer = params.layers[static_cast<std::size_t>(l)];
        const std::string p = "layer" + std::to_string(l) + ".";
        vec(p + "ln1.gain", layer.ln1_gain, false);
        vec(p + "ln1.bias", layer.ln1_bias, false);
        mat(p + "attn.w_query", layer.w_query, true);
        vec(p + "attn.b_query", layer.b_query, false);
        mat(p + "attn.w_key", layer.w_key, true);
        vec(p + "attn.b_key", layer.b_key, false);
        mat(p + "attn.w_value", layer.w_value, true);
        vec(p + "attn.b_value", layer.b_value, false);
        mat(p + "attn.w_out", layer.w_out, true);
        vec(p + "attn.b_out", layer.b_out, false);
        vec(p + "ln2.gain", layer.ln2_gain, false);
        vec(p + "ln2.bias", layer.ln2_bias, false);
        mat(p + "mlp.w_fc", layer.w_fc, true);
        vec(p + "mlp.b_fc", layer.b_fc, false);
        mat(p + "mlp.w_proj", layer.w_proj, true);
        vec(p + "mlp.b_proj", layer.b_proj, false);
    }
    vec("lnf.gain", params.lnf_gain, false);
    vec("lnf.bias", params.lnf_bias, false);
    if (config.untied_head) {
        mat("lm_head", params.lm_head, true);
    }
    if (config.constraint.has_key_bias()) {
        fn(TensorRef<T>{"constraint.w_primacy",
                        std::span<T>(&params.w_primacy, 1), {1}, true});
        fn(TensorRef<T>{"constraint.w_recency",
                        std::span<T>(&params.w_recency, 1), {1}, true});
    }
}

template <class T, class Fn>
void for_each_tensor(const ModelConfig& config, const Parameters<T>& params,
                     Fn&& fn) {
    for_each_tensor(config, const_cast<Parameters<T>&>(params),
                    [&](const TensorRef<T>& ref) {
                        fn(TensorRef<const T>{
                            ref.name,
                            std::span<const T>(ref.data.data(), ref.data.size()),
                            ref.dims, ref.decays});
                    });
}

template <class T>
Parameters<T> zero_parameters(const ModelConfig& config) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    Parameters<T> params;
    params.token_embedding = Matrix<T>(v, d);
    params.position_embedding =
        Matrix<T>(static_cast<std::size_t>(config.max_context), d);
    params.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& layer : params.layers) {
        layer.ln1_gain.assign(d, T{0});
        layer.ln1_bias.assign(d, T{0});
        layer.w_query = Matrix<T>(d, d);
        layer.w_key = Matrix<T>(d, d);
        layer.w_value = Matrix<T>(d, d);
        layer.w_out = Matrix<T>(d, d);
        layer.b_query.assign(d, T{0});
        layer.b_key.assign(d, T{0});
        layer.b_value.assign(d, T{0});
        layer.b_out.assign(d, T{0});
        layer.ln2_gain.assign(d, T{0});
        layer.ln2_bias.assign(d, T{0});
        layer.w_fc = Matrix<T>(d, 4 * d);
        layer.b_fc.assign(4 * d, T{0});
        layer.w_proj = Matrix<T>(4 * d, d);
        layer.b_proj.assign(d, T{0});
    }
    params.lnf_gain.assign(d, T{0});
    params.lnf_bias.assign(d, T{0});
    if (config.untied_head) {
        params.lm_head = Matrix<T>(v, d);
    }
    return params;
}

// normal(0, 0.02) for embeddings and projection weights, zeros for biases,
// ones for layer-norm gains; w_primacy/w_recency start at 0.5 where learned.
template <class T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
    auto params = zero_parameters<T>(config);
    Rng rng(seed);
    for_each_tensor(config, params, [&](const TensorRef<T>& ref) {
        if (ref.name.starts_with("constraint.")) return;
        const bool ln = ref.name.find("ln") != std::string::npos;
        const bool bias = ref.name.find(".b_") != std::string::npos;
        if (ln || bias) return;  // gains/biases handled below
        for (T& x : ref.data) {
            x = static_cast<T>(0.02 * gaussian(rng));
        }
    });
    for (auto& layer : params.layers) {
        std::fill(layer.ln1_gain.begin(), layer.ln1_gain.end(), T{1});
        std::fill(layer.ln2_gain.begin(), layer.ln2_gain.end(), T{1});
    }
    std::fill(params.lnf_gain.begin(), params.lnf_gain.end(), T{1});
    if (config.constraint.learns_primacy()) params.w_primacy = T{0.5};
    if (config.constraint.learns_recency()) params.w_recency = T{0.5};
    return params;
}

template <class T>
std::size_t parameter_count(const ModelConfig& config,
                            const Parameters<T>& params) {
    std::size_t n = 0;
    for_each_tensor(config, params,
                    [&](const TensorRef<const T>& ref) { n += ref.data.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

struct CaptureFlags {
    bool attention = false;  // post-constraint Probs matrices per layer/head
    bool hidden = false;     // residual stream: index 0 = embeddings+positions
};

template <class T>
struct ForwardRecord {
    Matrix<T> logits;  // L x V
    std::vector<std::vector<Matrix<T>>> attention;  // [layer][head]
    std::vector<Matrix<T>> hidden;                  // [0 .. n_layers]
};

namespace detail {

template <class T>
struct LayerNormCache {
    Matrix<T> input;
    std::vector<double> rstd;
    Matrix<T> output;
};

template <class T>
void layer_norm(const Matrix<T>& input, const std::vector<T>& gain,
                const std::vector<T>& bias, LayerNormCache<T>& cache) {
    constexpr double eps = 1e-5;
    const std::size_t rows = input.rows(), d = input.cols();
    cache.input = input;
    cache.rstd.assign(rows, 0.0);
    cache.output = Matrix<T>(rows, d);
    for (std::size_t t = 0; t < rows; ++t) {
        const auto row = input.row(t);
        double mean = 0.0;
        for (const T v : row) mean += static_cast<double>(v);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (const T v : row) {
            const double c = static_cast<double>(v) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        cache.rstd[t] = rstd;
        auto out = cache.output.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(row[j]) - mean) * rstd;
            out[j] = static_cast<T>(xhat * static_cast<double>(gain[j]) +
                                    static_cast<double>(bias[j]));
        }
    }
}

// dgain/dbias accumulated; returns dinput.
template <class T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache,
                              const std::vector<T>& gain, const Matrix<T>& dout,
                              std::vector<T>& dgain, std::vector<T>& dbias) {
    const std::size_t rows = cache.input.rows(), d = cache.input.cols();
    Matrix<T> dinput(rows, d);
    for (std::size_t t = 0; t < rows; ++t) {
        const double rstd = cache.rstd[t];
        const auto in = cache.input.row(t);
        const auto dy = dout.row(t);
        double mean = 0.0;
        for (const T v : in) mean += static_cast<double>(v);
        mean /= static_cast<double>(d);

        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(in[j]) - mean) * rstd;
            const double dxhat =
                static_cast<double>(dy[j]) * static_cast<double>(gain[j]);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[j] += static_cast<T>(static_cast<double>(dy[j]) * xhat);
            dbias[j] += dy[j];
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        auto dx = dinput.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(in[j]) - mean) * rstd;
            const double dxhat =
                static_cast<double>(dy[j]) * static_cast<double>(gain[j]);
            dx[j] = static_cast<T>(
                rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat));
        }
    }
    return dinput;
}

inline double gelu_tanh(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_tanh_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// out (rows x n) = a (rows x m) @ b (m x n) [+ bias]
template <class T>
Matrix<T> affine(const Matrix<T>& a, const Matrix<T>& b,
                 const std::vector<T>& bias) {
    const std::size_t rows = a.rows(), m = a.cols(), n = b.cols();
    Matrix<T> out(rows, n);
    for (std::size_t i = 0; i < rows; ++i) {
        auto out_row = out.row(i);
        if (!bias.empty()) {
            for (std::size_t j = 0; j < n; ++j) out_row[j] = bias[j];
        }
        const auto a_row = a.row(i);
        for (std::size_t k = 0; k < m; ++k) {
            const T av = a_row[k];
            const auto b_row = b.row(k);
            for (std::size_t j = 0; j < n; ++j) {
                out_row[j] += av * b_row[j];
            }
        }
    }
    return out;
}

// Backward of affine: accumulates dW, db; returns dA.
template <class T>
Matrix<T> affine_backward(const Matrix<T>& a, const Matrix<T>& w,
                          const Matrix<T>& dout, Matrix<T>& dw,
                          std::vector<T>& db) {
    const std::size_t rows = a.rows(), m = a.cols(), n = w.cols();
    Matrix<T> da(rows, m);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto dout_row = dout.row(i);
        const auto a_row = a.row(i);
        if (!db.empty()) {
            for (std::size_t j = 0; j < n; ++j) db[j] += dout_row[j];
        }
        for (std::size_t k = 0; k < m; ++k) {
            auto dw_row = dw.row(k);
            const T av = a_row[k];
            T acc{};
            const auto w_row = w.row(k);
            for (std::size_t j = 0; j < n; ++j) {
                dw_row[j] += av * dout_row[j];
                acc += dout_row[j] * w_row[j];
            }
            da(i, k) = acc;
        }
    }
    return da;
}

template <class T>
struct BlockCache {
    LayerNormCache<T> ln1;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs_pre;   // per head, post-softmax
    std::vector<Matrix<T>> probs_post;  // per head, post-constraint
    Matrix<T> attn_mix;                 // heads concatenated, pre out-proj
    Matrix<T> x_after_attn;
    LayerNormCache<T> ln2;
    Matrix<T> fc_pre, fc_act;
};

template <class T>
struct ForwardCache {
    Matrix<T> x0;
    std::vector<BlockCache<T>> blocks;
    LayerNormCache<T> lnf;
    Matrix<T> logits;
};

// The constraint spec with the learnable scalars patched in from params.
template <class T>
ConstraintSpec effective_constraint(const ModelConfig& config,
                                    const Parameters<T>& params) {
    ConstraintSpec spec = config.constraint;
    if (spec.has_key_bias()) {
        spec.w_primacy =
            spec.learns_primacy() ? static_cast<double>(params.w_primacy) : 0.0;
        spec.w_recency =
            spec.learns_recency() ? static_cast<double>(params.w_recency) : 0.0;
    }
    return spec;
}

template <class T>
void forward_cached(const ModelConfig& config, const Parameters<T>& params,
                    std::span<const std::int32_t> ids, ForwardCache<T>& cache) {
    config.validate();
    const std::size_t length = ids.size();
    if (length == 0) throw user_error("forward: empty input");
    if (length > static_cast<std::size_t>(config.max_context)) {
        throw user_error("forward: sequence length " + std::to_string(length) +
                         " exceeds max_context " +
                         std::to_string(config.max_context));
    }
    for (const auto id : ids) {
        if (id < 0 || id >= config.vocab_size) {
            throw user_error("forward: token id " + std::to_string(id) +
                             " out of range");
        }
    }

    const auto d = static_cast<std::size_t>(config.d_model);
    const auto heads = static_cast<std::size_t>(config.n_heads);
    const auto dh = static_cast<std::size_t>(config.d_head());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const ConstraintSpec spec = effective_constraint(config, params);
    const auto stage = spec.required_stage();

    cache.x0 = Matrix<T>(length, d);
    for (std::size_t t = 0; t < length; ++t) {
        const auto tok = params.token_embedding.row(
            static_cast<std::size_t>(ids[t]));
        const auto pos = params.position_embedding.row(t);
        auto out = cache.x0.row(t);
        for (std::size_t j = 0; j < d; ++j) out[j] = tok[j] + pos[j];
    }

    cache.blocks.assign(static_cast<std::size_t>(config.n_layers), {});
    Matrix<T> x = cache.x0;
    for (int l = 0; l < config.n_layers; ++l) {
        auto& block = cache.blocks[static_cast<std::size_t>(l)];
        const auto& layer = params.layers[static_cast<std::size_t>(l)];

        layer_norm(x, layer.ln1_gain, layer.ln1_bias, block.ln1);
        block.q = affine(block.ln1.output, layer.w_query, layer.b_query);
        block.k = affine(block.ln1.output, layer.w_key, layer.b_key);
        block.v = affine(block.ln1.output, layer.w_value, layer.b_value);

        block.probs_pre.assign(heads, {});
        block.probs_post.assign(heads, {});
        block.attn_mix = Matrix<T>(length, d);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            AttentionMatrix<T> scores{
                Matrix<T>(length, length, neg_inf<T>), AttnStage::Logits};
            for (std::size_t i = 0; i < length; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dot += static_cast<double>(block.q(i, off + c)) *
                               static_cast<double>(block.k(j, off + c));
                    }
                    scores.data(i, j) = static_cast<T>(dot * scale);
                }
            }
            if (stage && *stage == AttnStage::Logits) {
                scores = apply_constraint(spec, scores);
            }
            for (std::size_t i = 0; i < length; ++i) {
                softmax_row(scores.data.row(i));
            }
            scores.stage = AttnStage::Probs;
            block.probs_pre[h] = scores.data;
            if (stage && *stage == AttnStage::Probs) {
                scores = apply_constraint(spec, scores);
            }
            block.probs_post[h] = scores.data;

            const auto& probs = block.probs_post[h];
            for (std::size_t i = 0; i < length; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    const T p = probs(i, j);
                    if (p == T{0}) continue;
                    for (std::size_t c = 0; c < dh; ++c) {
                        block.attn_mix(i, off + c) += p * block.v(j, off + c);
                    }
                }
            }
        }

        const Matrix<T> attn_out =
            affine(block.attn_mix, layer.w_out, layer.b_out);
        block.x_after_attn = x;
        for (std::size_t idx = 0; idx < x.size(); ++idx) {
            block.x_after_attn.data()[idx] =
                x.data()[idx] + attn_out.data()[idx];
        }

        layer_norm(block.x_after_attn, layer.ln2_gain, layer.ln2_bias,
                   block.ln2);
        block.fc_pre = affine(block.ln2.output, layer.w_fc, layer.b_fc);
        block.fc_act = block.fc_pre;
        for (std::size_t idx = 0; idx < block.fc_act.size(); ++idx) {
            block.fc_act.data()[idx] = static_cast<T>(
                gelu_tanh(static_cast<double>(block.fc_pre.data()[idx])));
        }
        const Matrix<T> mlp_out =
            affine(block.fc_act, layer.w_proj, layer.b_proj);
        x = block.x_after_attn;
        for (std::size_t idx = 0; idx < x.size(); ++idx) {
            x.data()[idx] += mlp_out.data()[idx];
        }
    }

    layer_norm(x, params.lnf_gain, params.lnf_bias, cache.lnf);

    const auto& head_matrix =
        config.untied_head ? params.lm_head : params.token_embedding;
    const auto v_size = static_cast<std::size_t>(config.vocab_size);
    cache.logits = Matrix<T>(length, v_size);
    for (std::size_t t = 0; t < length; ++t) {
        const auto f_row = cache.lnf.output.row(t);
        for (std::size_t v = 0; v < v_size; ++v) {
            const auto e_row = head_matrix.row(v);
            T acc{};
            for (std::size_t j = 0; j < d; ++j) acc += f_row[j] * e_row[j];
            cache.logits(t, v) = acc;
        }
    }
}

}  // namespace detail

template <class T>
ForwardRecord<T> forward(const ModelConfig& config, const Parameters<T>& params,
                         std::span<const std::int32_t> ids,
                         CaptureFlags capture = {}) {
    detail::ForwardCache<T> cache;
    detail::forward_cached(config, params, ids, cache);
    ForwardRecord<T> record;
    record.logits = std::move(cache.logits);
    if (capture.attention) {
        record.attention.reserve(cache.blocks.size());
        for (auto& block : cache.blocks) {
            record.attention.push_back(std::move(block.probs_post));
        }
    }
    if (capture.hidden) {
        record.hidden.push_back(std::move(cache.x0));
        for (std::size_t l = 0; l < cache.blocks.size(); ++l) {
            // Residual stream after block l: input of the next LN1, i.e. the
            // lnf input for the last block.
            if (l + 1 < cache.blocks.size()) {
                record.hidden.push_back(cache.blocks[l + 1].ln1.input);
            } else {
                record.hidden.push_back(cache.lnf.input);
            }
        }
    }
    return record;
}

// Mean negative log-likelihood in nats per scored position. Targets are the
// inputs shifted left by one; the final position is excluded.
template <class T>
double cross_entropy_loss(const Matrix<T>& logits,
                          std::span<const std::int32_t> targets) {
    if (logits.rows() < 2) {
        throw user_error("cross_entropy_loss: need at least 2 positions");
    }
    if (targets.size() != logits.rows() - 1) {
        throw user_error("cross_entropy_loss: targets must have length L-1");
    }
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto target = targets[t];
        if (target < 0 || static_cast<std::size_t>(target) >= logits.cols()) {
            throw user_error("cross_entropy_loss: target id out of range");
        }
        const auto row = logits.row(t);
        double max_v = -std::numeric_limits<double>::infinity();
        for (const T v : row) max_v = std::max(max_v, static_cast<double>(v));
        double sum = 0.0;
        for (const T v : row) sum += std::exp(static_cast<double>(v) - max_v);
        const double lse = max_v + std::log(sum);
        total += lse - static_cast<double>(row[static_cast<std::size_t>(target)]);
    }
    return total / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Backward pass: mean loss over all scored positions of the batch, gradients
// for every parameter including the constraint learnables.
// ---------------------------------------------------------------------------

template <class T>
struct BackwardResult {
    double loss = 0.0;
    Parameters<T> grads;
};

namespace detail {

// Backward through a probs-stage constraint (renormalized mix/reweight).
// probs_pre is the softmax output P, probs_post the constrained P'.
template <class T>
Matrix<T> constraint_probs_backward(const ConstraintSpec& spec,
                                    const Matrix<T>& probs_pre,
                                    const Matrix<T>& probs_post,
                                    const Matrix<T>& dpost) {
    const std::size_t n = probs_pre.rows();
    Matrix<T> dpre(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        // Recompute the pre-renormalization row sum S_i.
        double row_sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double p = static_cast<double>(probs_pre(i, j));
            if (spec.kind == ConstraintKind::ExponentialDecay) {
                row_sum += (1.0 - spec.alpha) * p +
                           spec.alpha * exp_decay_kernel(i, j, spec.lambda);
            } else {
                row_sum += p * logistic_weight(logistic_distance(i, j),
                                               spec.k_steep, spec.m_mid);
            }
        }
        double dot = 0.0;  // sum_k dP'_ik P'_ik
        for (std::size_t j = 0; j <= i; ++j) {
            dot += static_cast<double>(dpost(i, j)) *
                   static_cast<double>(probs_post(i, j));
        }
        for (std::size_t j = 0; j <= i; ++j) {
            const double dmixed =
                (static_cast<double>(dpost(i, j)) - dot) / row_sum;
            if (spec.kind == ConstraintKind::ExponentialDecay) {
                dpre(i, j) = static_cast<T>((1.0 - spec.alpha) * dmixed);
            } else {
                dpre(i, j) = static_cast<T>(
                    dmixed * logistic_weight(logistic_distance(i, j),
                                             spec.k_steep, spec.m_mid));
            }
        }
    }
    return dpre;
}

}  // namespace detail

template <class T>
BackwardResult<T> backward(const ModelConfig& config,
                           const Parameters<T>& params,
                           std::span<const std::vector<std::int32_t>> batch) {
    if (batch.empty()) throw user_error("backward: empty batch");
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto heads = static_cast<std::size_t>(config.n_heads);
    const auto dh = static_cast<std::size_t>(config.d_head());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const ConstraintSpec spec = detail::effective_constraint(config, params);
    const auto stage = spec.required_stage();

    std::size_t total_positions = 0;
    for (const auto& ids : batch) {
        if (ids.size() < 2) {
            throw user_error("backward: sequences must have length >= 2");
        }
        total_positions += ids.size() - 1;
    }

    BackwardResult<T> result;
    result.grads = zero_parameters<T>(config);
    auto& grads = result.grads;
    double loss_sum = 0.0;

    detail::ForwardCache<T> cache;
    for (const auto& ids : batch) {
        detail::forward_cached(config, params, ids, cache);
        const std::size_t length = ids.size();
        const std::size_t scored = length - 1;
        const auto v_size = static_cast<std::size_t>(config.vocab_size);

        // Softmax cross-entropy gradient, averaged over all scored positions
        // in the batch.
        Matrix<T> dlogits(length, v_size);
        const double inv_n = 1.0 / static_cast<double>(total_positions);
        for (std::size_t t = 0; t < scored; ++t) {
            const auto row = cache.logits.row(t);
            const auto target = static_cast<std::size_t>(ids[t + 1]);
            double max_v = -std::numeric_limits<double>::infinity();
            for (const T v : row) max_v = std::max(max_v, static_cast<double>(v));
            double sum = 0.0;
            for (const T v : row) {
                sum += std::exp(static_cast<double>(v) - max_v);
            }
            const double lse = max_v + std::log(sum);
            loss_sum += lse - static_cast<double>(row[target]);
            auto drow = dlogits.row(t);
            for (std::size_t v = 0; v < v_size; ++v) {
                const double p =
                    std::exp(static_cast<double>(row[v]) - lse);
                drow[v] = static_cast<T>(
                    (p - (v == target ? 1.0 : 0.0)) * inv_n);
            }
        }

        // Output head (tied or untied).
        const auto& head_matrix =
            config.untied_head ? params.lm_head : params.token_embedding;
        auto& dhead =
            config.untied_head ? grads.lm_head : grads.token_embedding;
        Matrix<T> df(length, d);
        for (std::size_t t = 0; t < scored; ++t) {
            const auto drow = dlogits.row(t);
            const auto f_row = cache.lnf.output.row(t);
            auto df_row = df.row(t);
            for (std::size_t v = 0; v < v_size; ++v) {
                const T g = drow[v];
                if (g == T{0}) continue;
                const auto e_row = head_matrix.row(v);
                auto de_row = dhead.row(v);
                for (std::size_t j = 0; j < d; ++j) {
                    df_row[j] += g * e_row[j];
                    de_row[j] += g * f_row[j];
                }
            }
        }

        Matrix<T> dx = detail::layer_norm_backward(
            cache.lnf, params.lnf_gain, df, grads.lnf_gain,
            grads.lnf_bias);

        for (int l = config.n_layers - 1; l >= 0; --l) {
            auto& block = cache.blocks[static_cast<std::size_t>(l)];
            const auto& layer = params.layers[static_cast<std::size_t>(l)];
            auto& glayer = grads.layers[static_cast<std::size_t>(l)];

            // MLP branch.
            Matrix<T> dact = detail::affine_backward(
                block.fc_act, layer.w_proj, dx, glayer.w_proj,
                glayer.b_proj);
            for (std::size_t idx = 0; idx < dact.size(); ++idx) {
                dact.data()[idx] = static_cast<T>(
                    static_cast<double>(dact.data()[idx]) *
                    detail::gelu_tanh_grad(
                        static_cast<double>(block.fc_pre.data()[idx])));
            }
            Matrix<T> dln2 = detail::affine_backward(
                block.ln2.output, layer.w_fc, dact, glayer.w_fc,
                glayer.b_fc);
            const Matrix<T> dx_attn_from_mlp = detail::layer_norm_backward(
                block.ln2, layer.ln2_gain, dln2, glayer.ln2_gain,
                glayer.ln2_bias);
            // Residual: dx flows around the MLP too.
            for (std::size_t idx = 0; idx < dx.size(); ++idx) {
                dx.data()[idx] += dx_attn_from_mlp.data()[idx];
            }

            // Attention branch.
            Matrix<T> dmix = detail::affine_backward(
                block.attn_mix, layer.w_out, dx, glayer.w_out,
                glayer.b_out);

            const std::size_t length_l = dmix.rows();
            Matrix<T> dq(length_l, d), dk(length_l, d), dv(length_l, d);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dh;
                const auto& post = block.probs_post[h];
                const auto& pre = block.probs_pre[h];

                Matrix<T> dpost(length_l, length_l);
                for (std::size_t i = 0; i < length_l; ++i) {
                    for (std::size_t j = 0; j <= i; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            acc += static_cast<double>(dmix(i, off + c)) *
                                   static_cast<double>(block.v(j, off + c));
                        }
                        dpost(i, j) = static_cast<T>(acc);
                        const T p = post(i, j);
                        if (p != T{0}) {
                            for (std::size_t c = 0; c < dh; ++c) {
                                dv(j, off + c) += p * dmix(i, off + c);
                            }
                        }
                    }
                }

                Matrix<T> dpre =
                    (stage && *stage == AttnStage::Probs)
                        ? detail::constraint_probs_backward(spec, pre, post,
                                                            dpost)
                        : std::move(dpost);

                // Softmax backward; masked entries have pre == 0 so they
                // contribute nothing.
                Matrix<T> dscores(length_l, length_l);
                for (std::size_t i = 0; i < length_l; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        dot += static_cast<double>(dpre(i, j)) *
                               static_cast<double>(pre(i, j));
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        dscores(i, j) = static_cast<T>(
                            static_cast<double>(pre(i, j)) *
                            (static_cast<double>(dpre(i, j)) - dot));
                    }
                }

                // Key-position bias: gradient to the learnable scalars.
                if (spec.has_key_bias()) {
                    const auto& weights = PositionWeightCache::get(length_l);
                    for (std::size_t j = 0; j < length_l; ++j) {
                        double db = 0.0;
                        for (std::size_t i = j; i < length_l; ++i) {
                            db += static_cast<double>(dscores(i, j));
                        }
                        if (spec.learns_primacy()) {
                            grads.w_primacy +=
                                static_cast<T>(db * weights.primacy[j]);
                        }
                        if (spec.learns_recency()) {
                            grads.w_recency +=
                                static_cast<T>(db * weights.recency[j]);
                        }
                    }
                }

                for (std::size_t i = 0; i < length_l; ++i) {
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double g =
                            static_cast<double>(dscores(i, j)) * scale;
                        if (g == 0.0) continue;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dq(i, off + c) += static_cast<T>(
                                g * static_cast<double>(block.k(j, off + c)));
                            dk(j, off + c) += static_cast<T>(
                                g * static_cast<double>(block.q(i, off + c)));
                        }
                    }
                }
            }

            Matrix<T> dln1(length_l, d);
            auto accumulate = [&](const Matrix<T>& dproj, const Matrix<T>& w,
                                  Matrix<T>& dw, std::vector<T>& db) {
                const Matrix<T> da = detail::affine_backward(
                    block.ln1.output, w, dproj, dw, db);
                for (std::size_t idx = 0; idx < dln1.size(); ++idx) {
                    dln1.data()[idx] += da.data()[idx];
                }
            };
            accumulate(dq, layer.w_query, glayer.w_query, glayer.b_query);
            accumulate(dk, layer.w_key, glayer.w_key, glayer.b_key);
            accumulate(dv, layer.w_value, glayer.w_value, glayer.b_value);

            const Matrix<T> dx_from_ln1 = detail::layer_norm_backward(
                block.ln1, layer.ln1_gain, dln1, glayer.ln1_gain,
                glayer.ln1_bias);
            for (std::size_t idx = 0; idx < dx.size(); ++idx) {
                dx.data()[idx] += dx_from_ln1.data()[idx];
            }
        }

        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto dx_row = dx.row(t);
            auto dtok =
                grads.token_embedding.row(static_cast<std::size_t>(ids[t]));
            auto dpos = grads.position_embedding.row(t);
            for (std::size_t j = 0; j < d; ++j) {
                dtok[j] += dx_row[j];
                dpos[j] += dx_row[j];
            }
        }
    }

    result.loss = loss_sum / static_cast<double>(total_positions);

    for_each_tensor(config, grads, [&](const TensorRef<T>& ref) {
        for (const T v : ref.data) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw numeric_error("non-finite gradient in tensor '" +
                                    ref.name + "'");
            }
        }
    });
    return result;
}

}  // namespace wmlm
