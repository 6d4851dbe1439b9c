#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "wmlm/matrix.hpp"
#include "wmlm/scoring.hpp"

// The two evaluation harnesses: minimal-pair grammaticality accuracy and
// delta log-likelihood of surprisal over a covariate-only regression
// baseline.

namespace wmlm {

// ---------------------------------------------------------------------------
// Minimal pairs.
// ---------------------------------------------------------------------------

struct MinimalPairRecord {
    std::string uid;
    std::string phenomenon;
    std::string sentence_good;
    std::string sentence_bad;
};

struct PairTally {
    std::size_t n_scored = 0;
    std::size_t n_correct = 0;
    std::size_t n_excluded = 0;

    double accuracy() const {
        return n_scored == 0
                   ? 0.0
                   : static_cast<double>(n_correct) /
                         static_cast<double>(n_scored);
    }
};

struct PairEvalResult {
    std::map<std::string, PairTally> per_phenomenon;
    PairTally overall;  // micro-average
    std::vector<std::string> excluded_uids;
};

// Correct iff logprob(good) > logprob(bad); exact ties count as incorrect.
// Unscoreable sentences (e.g. overlength) exclude the pair from the
// denominators and are reported separately.
inline PairEvalResult eval_minimal_pairs(
    const Checkpoint& checkpoint, const Vocab& vocab,
    std::span<const MinimalPairRecord> records) {
    PairEvalResult result;
    for (const auto& record : records) {
        auto& tally = result.per_phenomenon[record.phenomenon];
        double good = 0.0, bad = 0.0;
        try {
            good = sentence_logprob(checkpoint, vocab, record.sentence_good);
            bad = sentence_logprob(checkpoint, vocab, record.sentence_bad);
        } catch (const user_error&) {
            tally.n_excluded += 1;
            result.overall.n_excluded += 1;
            result.excluded_uids.push_back(record.uid);
            continue;
        }
        tally.n_scored += 1;
        result.overall.n_scored += 1;
        if (good > bad) {
            tally.n_correct += 1;
            result.overall.n_correct += 1;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ordinary least squares with Gaussian ML log-likelihood.
// ---------------------------------------------------------------------------

struct rank_deficient_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct OlsFit {
    std::vector<double> coefficients;  // one per design column
    double sigma2 = 0.0;               // ML residual variance, floored
    double log_likelihood = 0.0;
    std::size_t n = 0;
    std::size_t p = 0;
};

inline constexpr double ols_variance_floor = 1e-12;

// Householder QR solve of min ||y - X b||. The design matrix is expected to
// carry its own intercept column.
inline OlsFit ols_fit(const Matrix<double>& design,
                      std::span<const double> y) {
    const std::size_t n = design.rows(), p = design.cols();
    if (p == 0) throw std::invalid_argument("ols_fit: empty design matrix");
    if (y.size() != n) throw std::invalid_argument("ols_fit: y length mismatch");
    if (n <= p) {
        throw user_error("ols_fit: need more rows than predictors (n=" +
                         std::to_string(n) + ", p=" + std::to_string(p) + ")");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(y[i])) {
            throw user_error("ols_fit: non-finite response value");
        }
        for (std::size_t j = 0; j < p; ++j) {
            if (!std::isfinite(design(i, j))) {
                throw user_error("ols_fit: non-finite design value");
            }
        }
    }

    Matrix<double> r = design;
    std::vector<double> qty(y.begin(), y.end());

    for (std::size_t k = 0; k < p; ++k) {
        // Householder vector for column k below the diagonal.
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += r(i, k) * r(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            r(k, k) = 0.0;
            continue;  // exactly dependent column; caught by the rank check
        }
        const double alpha = r(k, k) >= 0.0 ? -norm : norm;
        std::vector<double> v(n - k);
        v[0] = r(k, k) - alpha;
        for (std::size_t i = k + 1; i < n; ++i) v[i - k] = r(i, k);
        double vnorm2 = 0.0;
        for (const double x : v) vnorm2 += x * x;
        r(k, k) = alpha;
        for (std::size_t i = k + 1; i < n; ++i) r(i, k) = 0.0;
        if (vnorm2 == 0.0) continue;

        for (std::size_t j = k + 1; j < p; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < n; ++i) dot += v[i - k] * r(i, j);
            const double factor = 2.0 * dot / vnorm2;
            for (std::size_t i = k; i < n; ++i) r(i, j) -= factor * v[i - k];
        }
        double dot = 0.0;
        for (std::size_t i = k; i < n; ++i) dot += v[i - k] * qty[i];
        const double factor = 2.0 * dot / vnorm2;
        for (std::size_t i = k; i < n; ++i) qty[i] -= factor * v[i - k];
    }

    double max_diag = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
        max_diag = std::max(max_diag, std::abs(r(k, k)));
    }
    for (std::size_t k = 0; k < p; ++k) {
        if (std::abs(r(k, k)) <= 1e-10 * max_diag) {
            throw rank_deficient_error(
                "ols_fit: design matrix is rank deficient (column " +
                std::to_string(k) + ")");
        }
    }

    OlsFit fit;
    fit.n = n;
    fit.p = p;
    fit.coefficients.assign(p, 0.0);
    for (std::size_t k = p; k-- > 0;) {
        double acc = qty[k];
        for (std::size_t j = k + 1; j < p; ++j) {
            acc -= r(k, j) * fit.coefficients[j];
        }
        fit.coefficients[k] = acc / r(k, k);
    }

    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double pred = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            pred += design(i, j) * fit.coefficients[j];
        }
        const double res = y[i] - pred;
        rss += res * res;
    }
    fit.sigma2 = std::max(rss / static_cast<double>(n), ols_variance_floor);
    fit.log_likelihood =
        -0.5 * static_cast<double>(n) *
        (std::log(2.0 * std::numbers::pi * fit.sigma2) + 1.0);
    return fit;
}

// ---------------------------------------------------------------------------
// Nested-model delta log-likelihood.
// ---------------------------------------------------------------------------

struct RegressionRow {
    std::string word_id;
    double value = 0.0;           // psychometric measure
    double word_length = 0.0;     // characters
    double log_frequency = 0.0;   // natural log, add-one smoothed
    double surprisal_bits = 0.0;
};

struct RegressionDataset {
    std::string measure;
    std::vector<RegressionRow> rows;
};

struct DeltaLogLik {
    double base_ll = 0.0;
    double full_ll = 0.0;
    double delta = 0.0;           // full - base; >= 0 up to rounding
    double delta_per_1000 = 0.0;  // delta scaled to 1000 observations
    std::vector<double> full_coefficients;  // intercept, length, logfreq,
                                            // surprisal
    std::size_t n = 0;
};

// LL(intercept + length + log_frequency + surprisal) minus
// LL(intercept + length + log_frequency). An added column that is exactly
// collinear with the base design cannot reduce the residual sum of squares,
// so a rank-deficient full fit yields delta = 0 with the base coefficients.
inline DeltaLogLik delta_loglik(const RegressionDataset& dataset) {
    const std::size_t n = dataset.rows.size();
    if (n < 6) {
        throw user_error("delta_loglik: need at least p+2 = 6 rows, got " +
                         std::to_string(n));
    }
    Matrix<double> base(n, 3);
    Matrix<double> full(n, 4);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = dataset.rows[i];
        base(i, 0) = 1.0;
        base(i, 1) = row.word_length;
        base(i, 2) = row.log_frequency;
        full(i, 0) = 1.0;
        full(i, 1) = row.word_length;
        full(i, 2) = row.log_frequency;
        full(i, 3) = row.surprisal_bits;
        y[i] = row.value;
    }

    const OlsFit base_fit = ols_fit(base, y);
    DeltaLogLik out;
    out.n = n;
    out.base_ll = base_fit.log_likelihood;
    try {
        const OlsFit full_fit = ols_fit(full, y);
        out.full_ll = full_fit.log_likelihood;
        out.full_coefficients = full_fit.coefficients;
    } catch (const rank_deficient_error&) {
        out.full_ll = base_fit.log_likelihood;
        out.full_coefficients = base_fit.coefficients;
        out.full_coefficients.push_back(0.0);
    }
    out.delta = out.full_ll - out.base_ll;
    out.delta_per_1000 = out.delta / static_cast<double>(n) * 1000.0;
    return out;
}

// Arithmetic mean across psychometric measures.
inline double aggregate_delta(std::span<const double> deltas) {
    if (deltas.empty()) {
        throw user_error("aggregate_delta: no measures");
    }
    double sum = 0.0;
    for (const double d : deltas) sum += d;
    return sum / static_cast<double>(deltas.size());
}

}  // namespace wmlm
