#pragma once

#include <cstdint>
#include <vector>

namespace metabridge::metrics {

// Parallel (score, label) lists for ranking metrics.  `score` is the model's
// probability that a record is incorrect; `label` is 1 for incorrect records
// (the positive class) and 0 for correct ones.
struct ScoredSet {
    std::vector<double> score;
    std::vector<int> label;

    // Throws std::invalid_argument if sizes differ, the set is empty, labels
    // are outside {0, 1}, or scores are non-finite.
    void validate() const;

    int64_t size() const { return static_cast<int64_t>(score.size()); }
    int64_t positives() const;
};

// Area under the precision-recall curve in its average-precision form:
// records are ranked by descending score (ties broken by ascending original
// index) and AP = sum over positive-hit ranks k of P@k / (total positives).
// Throws std::invalid_argument ("undefined PR-AUC") when there is no
// positive label.
double pr_auc(const ScoredSet& s);

// Maximum recall over all distinct score thresholds t (predict positive when
// score >= t) whose precision is at least `min_precision`.  Returns 0 when no
// threshold qualifies.  Tied scores cannot be split by any threshold, so cuts
// are evaluated only at distinct-score boundaries.  `min_precision` must lie
// in (0, 1]; requires at least one positive label (same error as pr_auc).
double recall_at_precision(const ScoredSet& s, double min_precision);

}  // namespace metabridge::metrics
