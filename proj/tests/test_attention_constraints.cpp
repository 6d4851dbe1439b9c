#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "wmlm/attention_constraints.hpp"

using namespace wmlm;

namespace {

// Random causal row-stochastic matrix for fuzzing the Probs-stage mechanisms.
AttentionMatrix<double> random_stochastic(std::size_t length, Rng& rng) {
    AttentionMatrix<double> m{Matrix<double>(length, length, 0.0),
                              AttnStage::Probs};
    for (std::size_t i = 0; i < length; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            m.data(i, j) = -std::log(1.0 - uniform01(rng));
            sum += m.data(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) m.data(i, j) /= sum;
    }
    return m;
}

AttentionMatrix<double> uniform_logits(std::size_t length, double value = 0.0) {
    AttentionMatrix<double> m{Matrix<double>(length, length, value),
                              AttnStage::Logits};
    return m;
}

}  // namespace

TEST_CASE("fixed_window_mask enumerated allowed sets") {
    // L=4, W=2: allowed key sets per row are {0}, {0,1}, {1,2}, {2,3}.
    const auto mask = fixed_window_mask<double>(4, 2);
    const std::vector<std::vector<int>> allowed = {{0}, {0, 1}, {1, 2}, {2, 3}};
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            const bool in = std::find(allowed[i].begin(), allowed[i].end(),
                                      static_cast<int>(j)) != allowed[i].end();
            if (in) {
                REQUIRE(mask(i, j) == 0.0);
            } else {
                REQUIRE(std::isinf(mask(i, j)));
                REQUIRE(mask(i, j) < 0.0);
            }
        }
    }
}

TEST_CASE("fixed_window_mask W >= L equals the plain causal mask") {
    for (std::size_t length = 1; length <= 32; ++length) {
        for (const int window : {static_cast<int>(length),
                                 static_cast<int>(length) + 1, 64, 1000}) {
            const auto mask = fixed_window_mask<double>(length, window);
            for (std::size_t i = 0; i < length; ++i) {
                for (std::size_t j = 0; j < length; ++j) {
                    if (j <= i) {
                        REQUIRE(mask(i, j) == 0.0);
                    } else {
                        REQUIRE(std::isinf(mask(i, j)));
                    }
                }
            }
        }
    }
}

TEST_CASE("fixed_window_mask degenerate and error cases") {
    const auto single = fixed_window_mask<double>(1, 1);
    REQUIRE(single.rows() == 1);
    REQUIRE(single(0, 0) == 0.0);
    REQUIRE_THROWS_AS(fixed_window_mask<double>(0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(fixed_window_mask<double>(4, 0), std::invalid_argument);
}

TEST_CASE("apply_additive_mask identity and stage checks") {
    auto logits = uniform_logits(3, 1.25);
    logits.data(2, 0) = -0.5;
    const Matrix<double> zero_mask(3, 3, 0.0);
    const auto out = apply_additive_mask(logits, zero_mask);
    REQUIRE(out.data == logits.data);

    AttentionMatrix<double> probs{Matrix<double>(3, 3, 0.0), AttnStage::Probs};
    REQUIRE_THROWS_AS(apply_additive_mask(probs, zero_mask),
                      std::invalid_argument);
    const Matrix<double> wrong(2, 2, 0.0);
    REQUIRE_THROWS_AS(apply_additive_mask(logits, wrong), std::invalid_argument);
}

TEST_CASE("apply_additive_mask one-hot row after softmax") {
    // All -inf except the diagonal: softmax must give an exact one-hot.
    auto logits = uniform_logits(4, 0.3);
    Matrix<double> mask(4, 4, neg_inf<double>);
    for (std::size_t i = 0; i < 4; ++i) mask(i, i) = 0.0;
    auto masked = apply_additive_mask(logits, mask);
    for (std::size_t i = 0; i < 4; ++i) {
        softmax_row(masked.data.row(i));
        for (std::size_t j = 0; j < 4; ++j) {
            REQUIRE(masked.data(i, j) == (i == j ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("windowed softmax of uniform logits") {
    // (L=4, W=2) on uniform logits: rows [1], [.5,.5], [0,.5,.5], [0,0,.5,.5].
    auto masked =
        apply_additive_mask(uniform_logits(4), fixed_window_mask<double>(4, 2));
    const std::vector<std::vector<double>> expect = {
        {1, 0, 0, 0}, {0.5, 0.5, 0, 0}, {0, 0.5, 0.5, 0}, {0, 0, 0.5, 0.5}};
    for (std::size_t i = 0; i < 4; ++i) {
        softmax_row(masked.data.row(i));
        for (std::size_t j = 0; j < 4; ++j) {
            REQUIRE(masked.data(i, j) == Catch::Approx(expect[i][j]).margin(1e-15));
        }
    }
}

TEST_CASE("softmax shift invariance") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t length = 1 + uniform_below(rng, 16);
        std::vector<double> base(length), shifted(length);
        const double c = 20.0 * (uniform01(rng) - 0.5);
        for (std::size_t j = 0; j < length; ++j) {
            base[j] = 4.0 * (uniform01(rng) - 0.5);
            shifted[j] = base[j] + c;
        }
        softmax_row(std::span<double>(base));
        softmax_row(std::span<double>(shifted));
        for (std::size_t j = 0; j < length; ++j) {
            REQUIRE(base[j] == Catch::Approx(shifted[j]).margin(1e-12));
        }
    }
}

TEST_CASE("primacy weights: frozen values and properties") {
    // L=1 normalizes to [1].
    REQUIRE(primacy_weights(1) == std::vector<double>{1.0});

    // L=3, evaluated with long double as the independent route:
    // p_i = e^(-i/3) / sum.
    long double sum = 0.0L;
    long double raw[3];
    for (int i = 0; i < 3; ++i) {
        raw[i] = std::exp(-static_cast<long double>(i) / 3.0L);
        sum += raw[i];
    }
    const auto p3 = primacy_weights(3);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(p3[static_cast<std::size_t>(i)] ==
                Catch::Approx(static_cast<double>(raw[i] / sum)).margin(1e-14));
    }
    // Frozen to 4 decimal places.
    REQUIRE(p3[0] == Catch::Approx(0.4484).margin(5e-5));
    REQUIRE(p3[1] == Catch::Approx(0.3213).margin(5e-5));
    REQUIRE(p3[2] == Catch::Approx(0.2302).margin(5e-5));

    for (const std::size_t length : {2u, 5u, 17u, 64u}) {
        const auto p = primacy_weights(length);
        double total = 0.0;
        for (std::size_t i = 0; i < length; ++i) {
            REQUIRE(p[i] > 0.0);
            if (i > 0) REQUIRE(p[i] < p[i - 1]);
            total += p[i];
        }
        REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
    }
    REQUIRE_THROWS_AS(primacy_weights(0), std::invalid_argument);
}

TEST_CASE("recency weights mirror primacy") {
    const auto r3 = recency_weights(3);
    REQUIRE(r3[0] == Catch::Approx(0.2302).margin(5e-5));
    REQUIRE(r3[1] == Catch::Approx(0.3213).margin(5e-5));
    REQUIRE(r3[2] == Catch::Approx(0.4484).margin(5e-5));

    for (std::size_t length = 1; length <= 128; ++length) {
        const auto p = primacy_weights(length);
        const auto r = recency_weights(length);
        double total = 0.0;
        for (std::size_t i = 0; i < length; ++i) {
            REQUIRE(r[i] ==
                    Catch::Approx(p[length - 1 - i]).margin(1e-12));
            total += r[i];
        }
        REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
    }
    REQUIRE_THROWS_AS(recency_weights(0), std::invalid_argument);
}

TEST_CASE("primacy_recency_bias combination") {
    const auto p = primacy_weights(3);
    const auto r = recency_weights(3);

    const auto zero = primacy_recency_bias(p, r, 0.0, 0.0);
    for (const double b : zero) REQUIRE(b == 0.0);

    const auto ponly = primacy_recency_bias(p, r, 1.0, 0.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(ponly[i] == p[i]);

    const auto mixed = primacy_recency_bias(p, r, 0.5, 0.5);
    REQUIRE(mixed[0] == Catch::Approx(0.3393).margin(5e-5));
    REQUIRE(mixed[1] == Catch::Approx(0.3213).margin(5e-5));
    REQUIRE(mixed[2] == Catch::Approx(0.3393).margin(5e-5));

    const auto p2 = primacy_weights(2);
    REQUIRE_THROWS_AS(primacy_recency_bias(p2, r, 1.0, 1.0),
                      std::invalid_argument);
}

TEST_CASE("position weight cache matches direct computation") {
    const auto& entry = PositionWeightCache::get(19);
    REQUIRE(entry.primacy == primacy_weights(19));
    REQUIRE(entry.recency == recency_weights(19));
    // Second lookup returns the same entry.
    REQUIRE(&PositionWeightCache::get(19) == &entry);
}

TEST_CASE("exponential_decay_mix basics") {
    Rng rng(11);
    const auto probs = random_stochastic(6, rng);

    // alpha = 0 leaves the matrix unchanged up to renormalization noise.
    const auto same = exponential_decay_mix(probs, 1.0, 0.0);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            REQUIRE(same.data(i, j) ==
                    Catch::Approx(probs.data(i, j)).margin(1e-12));
        }
    }

    // The paper's lambda makes the kernel numerically one-hot at the
    // diagonal: e^(-82.86) < 1e-35.
    REQUIRE(std::exp(-82.86) < 1e-35);
    const double alpha = 0.37;
    const auto mixed = exponential_decay_mix(probs, 82.86, alpha);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double expect =
                (1.0 - alpha) * probs.data(i, j) + (i == j ? alpha : 0.0);
            sum += expect;
        }
        for (std::size_t j = 0; j <= i; ++j) {
            const double expect =
                ((1.0 - alpha) * probs.data(i, j) + (i == j ? alpha : 0.0)) /
                sum;
            REQUIRE(mixed.data(i, j) == Catch::Approx(expect).margin(1e-12));
        }
    }

    REQUIRE_THROWS_AS(exponential_decay_mix(probs, 1.0, 1.5),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(exponential_decay_mix(probs, 0.0, 0.5),
                      std::invalid_argument);
    AttentionMatrix<double> bad{Matrix<double>(3, 3, 0.2), AttnStage::Probs};
    REQUIRE_THROWS_AS(exponential_decay_mix(bad, 1.0, 0.5),
                      std::invalid_argument);
}

TEST_CASE("exponential kernel monotone decreasing in distance") {
    for (const double lambda : {0.05, 0.5, 2.0}) {
        double prev = exp_decay_kernel(10, 10, lambda);
        for (std::size_t j = 9; j + 1 > 0 && j < 10; --j) {
            const double cur = exp_decay_kernel(10, j, lambda);
            REQUIRE(cur < prev);
            prev = cur;
        }
    }
}

TEST_CASE("logistic weight values and monotonicity") {
    // w(d = m) is exactly 0.5.
    REQUIRE(logistic_weight(12.0, 0.4, 12.0) == 0.5);
    REQUIRE(logistic_weight(7.0, 1.3, 7.0) == 0.5);

    // Frozen double-precision evaluations of w at k=0.4, m=12.
    REQUIRE(logistic_weight(1.0, 0.4, 12.0) ==
            Catch::Approx(0.9878715650157257).epsilon(1e-12));
    REQUIRE(logistic_weight(23.0, 0.4, 12.0) ==
            Catch::Approx(0.012128434984274233).epsilon(1e-12));
    // Logistic symmetry: w(m+x) = 1 - w(m-x).
    REQUIRE(logistic_weight(23.0, 0.4, 12.0) ==
            Catch::Approx(1.0 - logistic_weight(1.0, 0.4, 12.0)).margin(1e-15));

    double prev = logistic_weight(1.0, 0.4, 12.0);
    for (int d = 2; d <= 64; ++d) {
        const double cur = logistic_weight(d, 0.4, 12.0);
        REQUIRE(cur < prev);
        prev = cur;
    }
}

TEST_CASE("logistic_decay_reweight contract") {
    Rng rng(13);
    const auto probs = random_stochastic(8, rng);
    const auto out = logistic_decay_reweight(probs, 0.4, 12.0);
    for (std::size_t i = 0; i < 8; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double w = logistic_weight(logistic_distance(i, j), 0.4, 12.0);
            sum += probs.data(i, j) * w;
        }
        for (std::size_t j = 0; j < 8; ++j) {
            if (j > i) {
                REQUIRE(out.data(i, j) == 0.0);
            } else {
                const double w =
                    logistic_weight(logistic_distance(i, j), 0.4, 12.0);
                REQUIRE(out.data(i, j) ==
                        Catch::Approx(probs.data(i, j) * w / sum).margin(1e-12));
            }
        }
    }
    REQUIRE_THROWS_AS(logistic_decay_reweight(probs, 0.0, 12.0),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(logistic_decay_reweight(probs, 0.4, 0.0),
                      std::invalid_argument);
}

TEST_CASE("row stochasticity fuzz across Probs-stage mechanisms") {
    Rng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t length = 1 + uniform_below(rng, 64);
        const auto probs = random_stochastic(length, rng);
        const auto viaExp = exponential_decay_mix(
            probs, 0.1 + 5.0 * uniform01(rng), uniform01(rng));
        const auto viaLogi = logistic_decay_reweight(
            probs, 0.05 + 2.0 * uniform01(rng), 1.0 + 20.0 * uniform01(rng));
        for (const auto* m : {&viaExp, &viaLogi}) {
            for (std::size_t i = 0; i < length; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < length; ++j) {
                    if (j > i) {
                        REQUIRE(m->data(i, j) == 0.0);  // causality preserved
                    }
                    REQUIRE(m->data(i, j) >= 0.0);
                    sum += m->data(i, j);
                }
                REQUIRE(std::abs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("apply_constraint dispatch and stage contract") {
    Rng rng(3);
    const auto logits = uniform_logits(5, 0.7);
    const auto probs = random_stochastic(5, rng);

    SECTION("none is the identity at either stage") {
        REQUIRE(apply_constraint(ConstraintSpec::none(), logits).data ==
                logits.data);
        REQUIRE(apply_constraint(ConstraintSpec::none(), probs).data ==
                probs.data);
    }

    SECTION("fixed window equals mask-then-apply") {
        const auto via_spec =
            apply_constraint(ConstraintSpec::fixed_window(5), logits);
        const auto direct =
            apply_additive_mask(logits, fixed_window_mask<double>(5, 5));
        REQUIRE(via_spec.data == direct.data);
    }

    SECTION("primacy_only equals primacy_recency with w_recency = 0") {
        auto frozen = ConstraintSpec::primacy_recency(0.5, 0.0);
        const auto a = apply_constraint(ConstraintSpec::primacy_only(0.5), logits);
        const auto b = apply_constraint(frozen, logits);
        REQUIRE(a.data == b.data);
    }

    SECTION("stage mismatch is rejected") {
        REQUIRE_THROWS_AS(apply_constraint(ConstraintSpec::fixed_window(2), probs),
                          std::invalid_argument);
        REQUIRE_THROWS_AS(
            apply_constraint(ConstraintSpec::logistic_decay(0.4, 12.0), logits),
            std::invalid_argument);
        REQUIRE_THROWS_AS(
            apply_constraint(ConstraintSpec::exponential_decay(82.86, 0.37),
                             logits),
            std::invalid_argument);
        REQUIRE_THROWS_AS(apply_constraint(ConstraintSpec::primacy_recency(), probs),
                          std::invalid_argument);
    }
}

TEST_CASE("constraint spec text encoding round-trips") {
    const std::vector<std::string> encodings = {
        "none",
        "fixed_window:W=5",
        "primacy_recency",
        "primacy_only",
        "recency_only",
        "exp_decay:lambda=82.86,alpha=0.37",
        "logistic:k=0.4,m=12",
    };
    for (const auto& text : encodings) {
        const auto spec = ConstraintSpec::parse(text);
        REQUIRE(spec.encode() == text);
        // Parsing the re-encoding yields the same spec again.
        REQUIRE(ConstraintSpec::parse(spec.encode()).encode() == text);
    }
    // "m=12.0" parses to the same value and re-encodes shortest.
    REQUIRE(ConstraintSpec::parse("logistic:k=0.4,m=12.0").m_mid == 12.0);
    REQUIRE(ConstraintSpec::parse("exp_decay:lambda=82.86,alpha=0.37").lambda ==
            82.86);
}

TEST_CASE("constraint spec parse rejects malformed input") {
    REQUIRE_THROWS_AS(ConstraintSpec::parse("fixed_window"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("fixed_window:W=0"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("fixed_window:W=2,x=1"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("none:W=1"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("exp_decay:lambda=1"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("exp_decay:lambda=1,alpha=2"),
                      user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("logistic:k=-1,m=3"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("magic"), user_error);
    REQUIRE_THROWS_AS(ConstraintSpec::parse("exp_decay:lambda=1,lambda=2,alpha=0.1"),
                      user_error);
}
