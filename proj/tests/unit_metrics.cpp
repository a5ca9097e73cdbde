#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "metabridge/metrics.hpp"
#include "metabridge/rng.hpp"

using metabridge::metrics::pr_auc;
using metabridge::metrics::recall_at_precision;
using metabridge::metrics::ScoredSet;

namespace {

// ---------------------------------------------------------------------------
// Brute-force oracles.  Both recompute every quantity from scratch by O(n^2)
// counting, with no sorting and no shared code with the implementation.
// ---------------------------------------------------------------------------

// Rank of item i under "descending score, ties by ascending index": the
// number of items that precede it.
int rank_of(const ScoredSet& s, std::size_t i) {
    int before = 0;
    for (std::size_t j = 0; j < s.score.size(); ++j) {
        if (s.score[j] > s.score[i] || (s.score[j] == s.score[i] && j < i)) {
            ++before;
        }
    }
    return before;
}

double oracle_average_precision(const ScoredSet& s) {
    const auto n = s.score.size();
    double total_pos = 0.0;
    for (int lab : s.label) total_pos += lab;
    // Walk rank positions in ascending order; at each positive, recount the
    // positives ranked at or before it.
    double ap = 0.0;
    for (std::size_t pos = 0; pos < n; ++pos) {
        std::size_t item = n;  // the item whose rank is `pos`
        for (std::size_t i = 0; i < n; ++i) {
            if (static_cast<std::size_t>(rank_of(s, i)) == pos) {
                item = i;
                break;
            }
        }
        REQUIRE(item < n);
        if (s.label[item] != 1) continue;
        double pos_at_or_before = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (s.label[i] == 1 && static_cast<std::size_t>(rank_of(s, i)) <= pos) {
                pos_at_or_before += 1.0;
            }
        }
        const double precision = pos_at_or_before / static_cast<double>(pos + 1);
        ap += precision / total_pos;
    }
    return ap;
}

double oracle_recall_at_precision(const ScoredSet& s, double min_precision) {
    double total_pos = 0.0;
    for (int lab : s.label) total_pos += lab;
    double best = 0.0;
    // Every distinct score is a candidate threshold; predict positive when
    // score >= threshold.
    for (std::size_t t = 0; t < s.score.size(); ++t) {
        const double thr = s.score[t];
        double tp = 0.0;
        double predicted = 0.0;
        for (std::size_t i = 0; i < s.score.size(); ++i) {
            if (s.score[i] >= thr) {
                predicted += 1.0;
                if (s.label[i] == 1) tp += 1.0;
            }
        }
        const double precision = tp / predicted;
        if (precision >= min_precision) {
            best = std::max(best, tp / total_pos);
        }
    }
    return best;
}

ScoredSet random_set(metabridge::Rng& rng) {
    const int64_t n = 1 + rng.uniform_int(50);
    ScoredSet s;
    const bool gridded = rng.uniform() < 0.5;  // force ties half the time
    bool any_pos = false;
    for (int64_t i = 0; i < n; ++i) {
        double sc = gridded ? 0.1 * static_cast<double>(rng.uniform_int(11))
                            : rng.uniform(0.001, 0.999);
        int lab = rng.uniform() < 0.4 ? 1 : 0;
        any_pos = any_pos || lab == 1;
        s.score.push_back(sc);
        s.label.push_back(lab);
    }
    if (!any_pos) {
        s.label[static_cast<std::size_t>(rng.uniform_int(n))] = 1;
    }
    return s;
}

}  // namespace

TEST_CASE("average precision on worked examples") {
    CHECK(pr_auc({{0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}}) == doctest::Approx(1.0).epsilon(1e-15));
    // Positives hit at ranks 1 and 3: contributions 0.5*1 + 0.5*(2/3).
    CHECK(pr_auc({{0.9, 0.8, 0.7, 0.1}, {1, 0, 1, 0}}) ==
          doctest::Approx(5.0 / 6.0).epsilon(1e-15));
    // Single record.
    CHECK(pr_auc({{0.4}, {1}}) == doctest::Approx(1.0));
}

TEST_CASE("average precision with fully tied scores follows the documented order") {
    // Ties broken by ascending index, so this is ranked (neg, pos, pos).
    ScoredSet s{{0.5, 0.5, 0.5}, {0, 1, 1}};
    const double expected = (1.0 / 2.0 + 2.0 / 3.0) / 2.0;  // 7/12
    CHECK(pr_auc(s) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(pr_auc(s) == oracle_average_precision(s));
}

TEST_CASE("recall at precision on worked examples") {
    ScoredSet perfect{{0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}};
    CHECK(recall_at_precision(perfect, 0.8) == doctest::Approx(1.0));
    // Only the top-1 cut reaches precision 0.8.
    ScoredSet mixed{{0.9, 0.8, 0.7, 0.1}, {1, 0, 1, 0}};
    CHECK(recall_at_precision(mixed, 0.8) == doctest::Approx(0.5));
    // Top-scored item negative: no cut reaches precision 1.
    ScoredSet topneg{{0.9, 0.5}, {0, 1}};
    CHECK(recall_at_precision(topneg, 1.0) == doctest::Approx(0.0));
}

TEST_CASE("tied scores cannot be split by a threshold") {
    // Items 2 and 3 share a score; the only realizable cuts are top-1, top-3,
    // top-4.  A per-position sweep would wrongly report recall 0.5 at
    // precision 1.0 via an impossible top-2 cut.
    ScoredSet s{{0.9, 0.7, 0.7, 0.1}, {1, 1, 0, 0}};
    CHECK(recall_at_precision(s, 1.0) == doctest::Approx(0.5));
    CHECK(recall_at_precision(s, 1.0) == oracle_recall_at_precision(s, 1.0));
    CHECK(recall_at_precision(s, 2.0 / 3.0) == doctest::Approx(1.0));
}

TEST_CASE("both metrics agree exactly with brute-force oracles on random sets") {
    metabridge::Rng rng(20260815u);
    for (int trial = 0; trial < 200; ++trial) {
        ScoredSet s = random_set(rng);
        CAPTURE(trial);
        CHECK(pr_auc(s) == oracle_average_precision(s));
        for (double p : {0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 1.0}) {
            CAPTURE(p);
            CHECK(recall_at_precision(s, p) == oracle_recall_at_precision(s, p));
        }
    }
}

TEST_CASE("strictly increasing score transforms change neither metric") {
    metabridge::Rng rng(7u);
    for (int trial = 0; trial < 50; ++trial) {
        ScoredSet s = random_set(rng);
        ScoredSet t = s;
        for (double& sc : t.score) sc = sc * sc * sc + 2.0 * sc;  // strictly increasing
        CHECK(pr_auc(s) == pr_auc(t));
        for (double p : {0.5, 0.8, 0.95}) {
            CHECK(recall_at_precision(s, p) == recall_at_precision(t, p));
        }
    }
}

TEST_CASE("recall at precision is non-increasing in the precision floor") {
    metabridge::Rng rng(99u);
    for (int trial = 0; trial < 50; ++trial) {
        ScoredSet s = random_set(rng);
        double prev = 1.0;
        for (int step = 1; step <= 20; ++step) {
            const double p = 0.05 * static_cast<double>(step);
            const double r = recall_at_precision(s, p);
            CHECK(r <= prev + 1e-15);
            prev = r;
        }
    }
}

TEST_CASE("metric preconditions are enforced") {
    CHECK_THROWS_WITH_AS(pr_auc({{0.4, 0.2}, {0, 0}}),
                         "undefined PR-AUC: no positive labels", std::invalid_argument);
    CHECK_THROWS_AS(pr_auc({{}, {}}), std::invalid_argument);
    CHECK_THROWS_AS(pr_auc({{0.5}, {1, 0}}), std::invalid_argument);
    CHECK_THROWS_AS(pr_auc({{0.5}, {2}}), std::invalid_argument);
    CHECK_THROWS_AS(recall_at_precision({{0.5}, {1}}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(recall_at_precision({{0.5}, {1}}, 1.5), std::invalid_argument);
}
