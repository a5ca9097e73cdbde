#include "metabridge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace metabridge::metrics {

void ScoredSet::validate() const {
    if (score.size() != label.size()) {
        throw std::invalid_argument(
            "scored set has " + std::to_string(score.size()) + " scores but " +
            std::to_string(label.size()) + " labels");
    }
    if (score.empty()) {
        throw std::invalid_argument("scored set is empty");
    }
    for (std::size_t i = 0; i < score.size(); ++i) {
        if (!std::isfinite(score[i])) {
            throw std::invalid_argument("non-finite score at index " + std::to_string(i));
        }
        if (label[i] != 0 && label[i] != 1) {
            throw std::invalid_argument("label at index " + std::to_string(i) +
                                        " is " + std::to_string(label[i]) +
                                        "; expected 0 or 1");
        }
    }
}

int64_t ScoredSet::positives() const {
    return std::accumulate(label.begin(), label.end(), int64_t{0});
}

namespace {

// Indices sorted by descending score; ties keep ascending original index.
std::vector<std::size_t> ranking(const ScoredSet& s) {
    std::vector<std::size_t> order(s.score.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return s.score[a] > s.score[b];
    });
    return order;
}

void require_positive(const ScoredSet& s) {
    s.validate();
    if (s.positives() == 0) {
        throw std::invalid_argument("undefined PR-AUC: no positive labels");
    }
}

}  // namespace

double pr_auc(const ScoredSet& s) {
    require_positive(s);
    const std::vector<std::size_t> order = ranking(s);
    const double total_pos = static_cast<double>(s.positives());
    double seen_pos = 0.0;
    double ap = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (s.label[order[k]] == 1) {
            seen_pos += 1.0;
            const double precision = seen_pos / static_cast<double>(k + 1);
            ap += precision / total_pos;
        }
    }
    return ap;
}

double recall_at_precision(const ScoredSet& s, double min_precision) {
    require_positive(s);
    if (!(min_precision > 0.0 && min_precision <= 1.0)) {
        throw std::invalid_argument("min_precision must lie in (0, 1]; got " +
                                    std::to_string(min_precision));
    }
    const std::vector<std::size_t> order = ranking(s);
    const double total_pos = static_cast<double>(s.positives());
    double seen_pos = 0.0;
    double best_recall = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        seen_pos += (s.label[order[k]] == 1) ? 1.0 : 0.0;
        // A threshold can only sit between distinct score values, so the
        // top-(k+1) cut is realizable only if the next score is strictly
        // smaller (or the cut covers the whole set).
        const bool boundary = (k + 1 == order.size()) ||
                              (s.score[order[k + 1]] < s.score[order[k]]);
        if (!boundary) {
            continue;
        }
        const double precision = seen_pos / static_cast<double>(k + 1);
        if (precision >= min_precision) {
            best_recall = std::max(best_recall, seen_pos / total_pos);
        }
    }
    return best_recall;
}

}  // namespace metabridge::metrics
