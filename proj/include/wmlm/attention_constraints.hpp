#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wmlm/matrix.hpp"
#include "wmlm/util.hpp"

// Working-memory attention constraints. All four mechanisms transform a
// per-head attention matrix: the fixed window and primacy/recency bias act
// on pre-softmax logits, the two decay mechanisms act on post-softmax
// probabilities and renormalize each row back to a distribution.

namespace wmlm {

enum class AttnStage { Logits, Probs };

// L x L causal attention matrix, tagged with whether entries are pre-softmax
// logits or post-softmax probabilities. Entries above the diagonal are -inf
// (Logits) or exactly 0 (Probs).
template <class T>
struct AttentionMatrix {
    Matrix<T> data;
    AttnStage stage = AttnStage::Logits;

    std::size_t length() const { return data.rows(); }
};

template <class T>
inline constexpr T neg_inf = -std::numeric_limits<T>::infinity();

// ---------------------------------------------------------------------------
// ConstraintSpec: tagged selection of one mechanism plus its parameters.
// ---------------------------------------------------------------------------

enum class ConstraintKind {
    None,
    FixedWindow,
    PrimacyRecency,
    PrimacyOnly,
    RecencyOnly,
    ExponentialDecay,
    LogisticDecay,
};

struct ConstraintSpec {
    ConstraintKind kind = ConstraintKind::None;

    int window = 0;           // FixedWindow: W >= 1
    double w_primacy = 0.0;   // PrimacyRecency family: learnable scalars;
    double w_recency = 0.0;   // current values are carried here when applying
    double lambda = 0.0;      // ExponentialDecay: decay rate > 0
    double alpha = 0.0;       // ExponentialDecay: mixing weight in [0,1]
    double k_steep = 0.0;     // LogisticDecay: steepness > 0
    double m_mid = 0.0;       // LogisticDecay: midpoint distance > 0

    static ConstraintSpec none() { return {}; }

    static ConstraintSpec fixed_window(int w) {
        ConstraintSpec s;
        s.kind = ConstraintKind::FixedWindow;
        s.window = w;
        s.validate();
        return s;
    }

    static ConstraintSpec primacy_recency(double wp = 0.5, double wr = 0.5) {
        ConstraintSpec s;
        s.kind = ConstraintKind::PrimacyRecency;
        s.w_primacy = wp;
        s.w_recency = wr;
        s.validate();
        return s;
    }

    static ConstraintSpec primacy_only(double wp = 0.5) {
        ConstraintSpec s;
        s.kind = ConstraintKind::PrimacyOnly;
        s.w_primacy = wp;
        s.validate();
        return s;
    }

    static ConstraintSpec recency_only(double wr = 0.5) {
        ConstraintSpec s;
        s.kind = ConstraintKind::RecencyOnly;
        s.w_recency = wr;
        s.validate();
        return s;
    }

    static ConstraintSpec exponential_decay(double lambda, double alpha) {
        ConstraintSpec s;
        s.kind = ConstraintKind::ExponentialDecay;
        s.lambda = lambda;
        s.alpha = alpha;
        s.validate();
        return s;
    }

    static ConstraintSpec logistic_decay(double k, double m) {
        ConstraintSpec s;
        s.kind = ConstraintKind::LogisticDecay;
        s.k_steep = k;
        s.m_mid = m;
        s.validate();
        return s;
    }

    void validate() const {
        switch (kind) {
            case ConstraintKind::None:
                break;
            case ConstraintKind::FixedWindow:
                if (window < 1) {
                    throw std::invalid_argument("fixed_window: W must be >= 1");
                }
                break;
            case ConstraintKind::PrimacyRecency:
            case ConstraintKind::PrimacyOnly:
            case ConstraintKind::RecencyOnly:
                if (!std::isfinite(w_primacy) || !std::isfinite(w_recency)) {
                    throw std::invalid_argument(
                        "primacy/recency weights must be finite");
                }
                break;
            case ConstraintKind::ExponentialDecay:
                if (!(lambda > 0.0)) {
                    throw std::invalid_argument("exp_decay: lambda must be > 0");
                }
                if (!(alpha >= 0.0 && alpha <= 1.0)) {
                    throw std::invalid_argument(
                        "exp_decay: alpha must be in [0,1]");
                }
                break;
            case ConstraintKind::LogisticDecay:
                if (!(k_steep > 0.0)) {
                    throw std::invalid_argument("logistic: k must be > 0");
                }
                if (!(m_mid > 0.0)) {
                    throw std::invalid_argument("logistic: m must be > 0");
                }
                break;
        }
    }

    // Which stage the mechanism consumes; nullopt for None (identity at
    // either stage).
    std::optional<AttnStage> required_stage() const {
        switch (kind) {
            case ConstraintKind::None:
                return std::nullopt;
            case ConstraintKind::FixedWindow:
            case ConstraintKind::PrimacyRecency:
            case ConstraintKind::PrimacyOnly:
            case ConstraintKind::RecencyOnly:
                return AttnStage::Logits;
            case ConstraintKind::ExponentialDecay:
            case ConstraintKind::LogisticDecay:
                return AttnStage::Probs;
        }
        return std::nullopt;
    }

    bool learns_primacy() const {
        return kind == ConstraintKind::PrimacyRecency ||
               kind == ConstraintKind::PrimacyOnly;
    }

    bool learns_recency() const {
        return kind == ConstraintKind::PrimacyRecency ||
               kind == ConstraintKind::RecencyOnly;
    }

    bool has_key_bias() const {
        return kind == ConstraintKind::PrimacyRecency ||
               kind == ConstraintKind::PrimacyOnly ||
               kind == ConstraintKind::RecencyOnly;
    }

    // Canonical text encoding, e.g. "fixed_window:W=5",
    // "exp_decay:lambda=82.86,alpha=0.37", "logistic:k=0.4,m=12",
    // "primacy_recency", "none". Round-trips exactly through parse().
    std::string encode() const {
        switch (kind) {
            case ConstraintKind::None:
                return "none";
            case ConstraintKind::FixedWindow:
                return "fixed_window:W=" + std::to_string(window);
            case ConstraintKind::PrimacyRecency:
                return "primacy_recency";
            case ConstraintKind::PrimacyOnly:
                return "primacy_only";
            case ConstraintKind::RecencyOnly:
                return "recency_only";
            case ConstraintKind::ExponentialDecay:
                return "exp_decay:lambda=" + format_double(lambda) +
                       ",alpha=" + format_double(alpha);
            case ConstraintKind::LogisticDecay:
                return "logistic:k=" + format_double(k_steep) +
                       ",m=" + format_double(m_mid);
        }
        return "none";
    }

    static ConstraintSpec parse(std::string_view text);
};

inline ConstraintSpec ConstraintSpec::parse(std::string_view text) {
    const std::string_view s = trim(text);
    const std::size_t colon = s.find(':');
    const std::string_view name = s.substr(0, colon);
    std::unordered_map<std::string, std::string> kv;
    if (colon != std::string_view::npos) {
        for (const auto part : split(s.substr(colon + 1), ',')) {
            const auto eq = part.find('=');
            if (eq == std::string_view::npos) {
                throw user_error("constraint parameter missing '=': '" +
                                 std::string(part) + "'");
            }
            const auto key = std::string(trim(part.substr(0, eq)));
            if (kv.count(key)) {
                throw user_error("duplicate constraint parameter '" + key + "'");
            }
            kv[key] = std::string(trim(part.substr(eq + 1)));
        }
    }

    auto take = [&](const char* key) {
        const auto it = kv.find(key);
        if (it == kv.end()) {
            throw user_error("constraint '" + std::string(name) +
                             "' missing parameter '" + key + "'");
        }
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto finish = [&](ConstraintSpec spec) {
        if (!kv.empty()) {
            throw user_error("constraint '" + std::string(name) +
                             "' has unexpected parameter '" +
                             kv.begin()->first + "'");
        }
        spec.validate();
        return spec;
    };

    try {
        if (name == "none") {
            return finish(ConstraintSpec::none());
        }
        if (name == "fixed_window") {
            const long long w = parse_int(take("W"), "W");
            if (w < 1 || w > std::numeric_limits<int>::max()) {
                throw user_error("fixed_window: W out of range");
            }
            return finish(ConstraintSpec::fixed_window(static_cast<int>(w)));
        }
        if (name == "primacy_recency") {
            return finish(ConstraintSpec::primacy_recency());
        }
        if (name == "primacy_only") {
            return finish(ConstraintSpec::primacy_only());
        }
        if (name == "recency_only") {
            return finish(ConstraintSpec::recency_only());
        }
        if (name == "exp_decay") {
            const double lambda = parse_double(take("lambda"), "lambda");
            const double alpha = parse_double(take("alpha"), "alpha");
            return finish(ConstraintSpec::exponential_decay(lambda, alpha));
        }
        if (name == "logistic") {
            const double k = parse_double(take("k"), "k");
            const double m = parse_double(take("m"), "m");
            return finish(ConstraintSpec::logistic_decay(k, m));
        }
    } catch (const std::invalid_argument& e) {
        throw user_error(std::string("invalid constraint: ") + e.what());
    }
    throw user_error("unknown constraint kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Kernel helpers shared between forward application and backprop.
// ---------------------------------------------------------------------------

// Logistic distance weight w(d) = 1 / (1 + e^(k (d - m))).
inline double logistic_weight(double distance, double k_steep, double m_mid) {
    return 1.0 / (1.0 + std::exp(k_steep * (distance - m_mid)));
}

// Query/key distance used by the logistic mechanism: d = max(1, i - j + 1).
inline double logistic_distance(std::size_t i, std::size_t j) {
    return static_cast<double>(i >= j ? i - j + 1 : 1);
}

// Exponential kernel e^(-|i-j| lambda).
inline double exp_decay_kernel(std::size_t i, std::size_t j, double lambda) {
    const double d = static_cast<double>(i >= j ? i - j : j - i);
    return std::exp(-d * lambda);
}

// ---------------------------------------------------------------------------
// Stable softmax over one row. -inf entries map to exactly 0; a row whose
// only finite entry is the diagonal yields a one-hot without NaN.
// ---------------------------------------------------------------------------

template <class T>
void softmax_row(std::span<T> row) {
    double max_v = -std::numeric_limits<double>::infinity();
    for (const T v : row) {
        const double d = static_cast<double>(v);
        if (d > max_v) max_v = d;
    }
    if (!std::isfinite(max_v)) {
        throw numeric_error("softmax: row has no finite entry");
    }
    double sum = 0.0;
    for (T& v : row) {
        const double e = std::exp(static_cast<double>(v) - max_v);
        v = static_cast<T>(e);
        sum += e;
    }
    for (T& v : row) {
        v = static_cast<T>(static_cast<double>(v) / sum);
    }
}

// ---------------------------------------------------------------------------
// Mechanism 1: fixed attention window.
// ---------------------------------------------------------------------------

// Additive mask: entry (i,j) is 0 iff max(0, i-W+1) <= j <= i, else -inf.
template <class T = double>
Matrix<T> fixed_window_mask(std::size_t length, int window) {
    if (length == 0) throw std::invalid_argument("fixed_window_mask: L == 0");
    if (window < 1) throw std::invalid_argument("fixed_window_mask: W < 1");
    Matrix<T> mask(length, length, neg_inf<T>);
    for (std::size_t i = 0; i < length; ++i) {
        const std::size_t w = static_cast<std::size_t>(window);
        const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
        for (std::size_t j = lo; j <= i; ++j) {
            mask(i, j) = T{0};
        }
    }
    return mask;
}

template <class T>
AttentionMatrix<T> apply_additive_mask(const AttentionMatrix<T>& scores,
                                       const Matrix<T>& mask) {
    if (scores.stage != AttnStage::Logits) {
        throw std::invalid_argument(
            "apply_additive_mask: input must be Logits-stage");
    }
    if (!scores.data.same_shape(mask)) {
        throw std::invalid_argument("apply_additive_mask: shape mismatch");
    }
    AttentionMatrix<T> out{scores.data, AttnStage::Logits};
    const std::size_t n = out.data.size();
    for (std::size_t idx = 0; idx < n; ++idx) {
        out.data.data()[idx] += mask.data()[idx];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mechanism 2: primacy/recency key bias.
// ---------------------------------------------------------------------------

// p_i = e^(-i/L) / sum_j e^(-j/L): normalized, strictly decreasing in i.
inline std::vector<double> primacy_weights(std::size_t length) {
    if (length == 0) throw std::invalid_argument("primacy_weights: L == 0");
    std::vector<double> w(length);
    double sum = 0.0;
    for (std::size_t i = 0; i < length; ++i) {
        w[i] = std::exp(-static_cast<double>(i) / static_cast<double>(length));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

// r_i = e^(-(L-1-i)/L) / sum_j e^(-(L-1-j)/L): mirror image of the primacy
// weights, strictly increasing in i.
inline std::vector<double> recency_weights(std::size_t length) {
    if (length == 0) throw std::invalid_argument("recency_weights: L == 0");
    std::vector<double> w(length);
    double sum = 0.0;
    for (std::size_t i = 0; i < length; ++i) {
        w[i] = std::exp(-static_cast<double>(length - 1 - i) /
                        static_cast<double>(length));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

// b_i = w_primacy * p_i + w_recency * r_i. Added to logits per key column.
inline std::vector<double> primacy_recency_bias(std::span<const double> primacy,
                                                std::span<const double> recency,
                                                double w_primacy,
                                                double w_recency) {
    if (primacy.size() != recency.size()) {
        throw std::invalid_argument("primacy_recency_bias: length mismatch");
    }
    if (!std::isfinite(w_primacy) || !std::isfinite(w_recency)) {
        throw std::invalid_argument("primacy_recency_bias: non-finite weight");
    }
    std::vector<double> bias(primacy.size());
    for (std::size_t i = 0; i < bias.size(); ++i) {
        bias[i] = w_primacy * primacy[i] + w_recency * recency[i];
    }
    return bias;
}

// Per-L cache of the normalized position weights. Entries are allocated once
// and never evicted, so returned references stay valid for concurrent
// readers.
class PositionWeightCache {
public:
    struct Entry {
        std::vector<double> primacy;
        std::vector<double> recency;
    };

    static const Entry& get(std::size_t length) {
        static std::mutex mu;
        static std::unordered_map<std::size_t, std::unique_ptr<Entry>> cache;
        std::lock_guard<std::mutex> lock(mu);
        auto& slot = cache[length];
        if (!slot) {
            slot = std::make_unique<Entry>(
                Entry{primacy_weights(length), recency_weights(length)});
        }
        return *slot;
    }
};

// Adds b_j to every key column of a Logits-stage matrix. -inf entries stay
// -inf, so causality is unaffected.
template <class T>
AttentionMatrix<T> apply_key_bias(const AttentionMatrix<T>& scores,
                                  std::span<const double> bias) {
    if (scores.stage != AttnStage::Logits) {
        throw std::invalid_argument("apply_key_bias: input must be Logits-stage");
    }
    if (bias.size() != scores.length()) {
        throw std::invalid_argument("apply_key_bias: length mismatch");
    }
    AttentionMatrix<T> out{scores.data, AttnStage::Logits};
    for (std::size_t i = 0; i < out.length(); ++i) {
        auto row = out.data.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += static_cast<T>(bias[j]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probs-stage input validation shared by the decay mechanisms.
// ---------------------------------------------------------------------------

template <class T>
void check_row_stochastic(const AttentionMatrix<T>& probs, double tol,
                          const char* who) {
    if (probs.stage != AttnStage::Probs) {
        throw std::invalid_argument(std::string(who) +
                                    ": input must be Probs-stage");
    }
    const std::size_t n = probs.length();
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(probs.data(i, j));
            if (j > i && v != 0.0) {
                throw std::invalid_argument(std::string(who) +
                                            ": non-causal input");
            }
            if (v < -tol || v > 1.0 + tol) {
                throw std::invalid_argument(std::string(who) +
                                            ": entry outside [0,1]");
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > tol) {
            throw std::invalid_argument(std::string(who) +
                                        ": row not stochastic");
        }
    }
}

// ---------------------------------------------------------------------------
// Mechanism 3: exponential decay mixing.
// a'_ij = (1-alpha) a_ij + alpha e^(-|i-j| lambda) over j <= i, rows
// renormalized to sum to 1.
// ---------------------------------------------------------------------------

template <class T>
AttentionMatrix<T> exponential_decay_mix(const AttentionMatrix<T>& probs,
                                         double lambda, double alpha) {
    if (!(lambda > 0.0)) {
        throw std::invalid_argument("exponential_decay_mix: lambda <= 0");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument(
            "exponential_decay_mix: alpha outside [0,1]");
    }
    check_row_stochastic(probs, 1e-4, "exponential_decay_mix");

    const std::size_t n = probs.length();
    AttentionMatrix<T> out{Matrix<T>(n, n, T{0}), AttnStage::Probs};
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double mixed =
                (1.0 - alpha) * static_cast<double>(probs.data(i, j)) +
                alpha * exp_decay_kernel(i, j, lambda);
            out.data(i, j) = static_cast<T>(mixed);
            sum += mixed;
        }
        if (!(sum > 0.0)) {
            throw numeric_error("exponential_decay_mix: zero row mass");
        }
        for (std::size_t j = 0; j <= i; ++j) {
            out.data(i, j) =
                static_cast<T>(static_cast<double>(out.data(i, j)) / sum);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mechanism 4: logistic decay reweighting.
// w_ij = 1 / (1 + e^(k (d_ij - m))) with d_ij = max(1, i-j+1);
// a'_ij = a_ij * w_ij, rows renormalized.
// ---------------------------------------------------------------------------

template <class T>
AttentionMatrix<T> logistic_decay_reweight(const AttentionMatrix<T>& probs,
                                           double k_steep, double m_mid) {
    if (!(k_steep > 0.0)) {
        throw std::invalid_argument("logistic_decay_reweight: k <= 0");
    }
    if (!(m_mid > 0.0)) {
        throw std::invalid_argument("logistic_decay_reweight: m <= 0");
    }
    check_row_stochastic(probs, 1e-4, "logistic_decay_reweight");

    const std::size_t n = probs.length();
    AttentionMatrix<T> out{Matrix<T>(n, n, T{0}), AttnStage::Probs};
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double w =
                logistic_weight(logistic_distance(i, j), k_steep, m_mid);
            const double v = static_cast<double>(probs.data(i, j)) * w;
            out.data(i, j) = static_cast<T>(v);
            sum += v;
        }
        if (!(sum > 0.0)) {
            throw numeric_error("logistic_decay_reweight: zero row mass");
        }
        for (std::size_t j = 0; j <= i; ++j) {
            out.data(i, j) =
                static_cast<T>(static_cast<double>(out.data(i, j)) / sum);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dispatch. Stage mismatches are contract violations, never coerced.
// ---------------------------------------------------------------------------

template <class T>
AttentionMatrix<T> apply_constraint(const ConstraintSpec& spec,
                                    const AttentionMatrix<T>& scores) {
    spec.validate();
    if (const auto required = spec.required_stage();
        required && *required != scores.stage) {
        throw std::invalid_argument(
            "apply_constraint: '" + spec.encode() + "' requires " +
            (*required == AttnStage::Logits ? "Logits" : "Probs") +
            "-stage input");
    }
    switch (spec.kind) {
        case ConstraintKind::None:
            return scores;
        case ConstraintKind::FixedWindow:
            return apply_additive_mask(
                scores, fixed_window_mask<T>(scores.length(), spec.window));
        case ConstraintKind::PrimacyRecency:
        case ConstraintKind::PrimacyOnly:
        case ConstraintKind::RecencyOnly: {
            const auto& weights = PositionWeightCache::get(scores.length());
            const auto bias =
                primacy_recency_bias(weights.primacy, weights.recency,
                                     spec.learns_primacy() ? spec.w_primacy : 0.0,
                                     spec.learns_recency() ? spec.w_recency : 0.0);
            return apply_key_bias(scores, bias);
        }
        case ConstraintKind::ExponentialDecay:
            return exponential_decay_mix(scores, spec.lambda, spec.alpha);
        case ConstraintKind::LogisticDecay:
            return logistic_decay_reweight(scores, spec.k_steep, spec.m_mid);
    }
    return scores;
}

}  // namespace wmlm
