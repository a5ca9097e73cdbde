#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metabridge/data.hpp"
#include "metabridge/meta.hpp"
#include "metabridge/metrics.hpp"
#include "metabridge/params.hpp"

namespace metabridge::eval {

/// Default precision floors for the recall report.
inline constexpr std::array<double, 4> kRecallGrid{0.7, 0.8, 0.9, 0.95};

struct CategoryResult {
    std::string category_id;
    double pr_auc = 0.0;
    bool defined = false;  // false when the category's query set has no positive
    int64_t n_query = 0;
};

/// One scored query record, kept so reports can be recomputed offline.
struct ScoreRow {
    std::string category_id;
    std::string product_id;
    double score = 0.0;
    int label = 0;
};

struct SplitMetrics {
    double pooled_pr_auc = 0.0;
    std::vector<double> grid;       // precision floors evaluated
    std::vector<double> recall_at;  // aligned with grid
    double macro_pr_auc = 0.0;      // mean over categories with defined PR-AUC
    std::vector<CategoryResult> per_category;
    std::vector<ScoreRow> rows;  // every (category, record, score, label) in order
};

struct RepeatedMetrics {
    std::vector<SplitMetrics> runs;
    double mean_pr_auc = 0.0;
    double std_pr_auc = 0.0;  // population standard deviation over runs
    std::vector<double> mean_recall_at;
    std::vector<double> std_recall_at;
    double mean_macro_pr_auc = 0.0;
    double std_macro_pr_auc = 0.0;
};

/// Adapt-then-predict over every category of `part` (in sorted category
/// order; category index ci draws its episode from stream
/// mix_seed(seed, kEpisode, ci)), pool all query scores, and compute PR-AUC
/// plus recall at each precision floor in `grid`. Throws if the pooled scores
/// contain no positive label.
SplitMetrics evaluate_part(const diff::ParamSet& params,
                           const std::map<std::string, std::vector<data::ProductRecord>>& part,
                           const meta::MetaConfig& cfg, const data::Vocab& vocab,
                           uint64_t seed, std::span<const double> grid = kRecallGrid);

/// `repeats` independent evaluate_part runs (run r uses seed
/// mix_seed(seed, kEval, r)) with mean and population standard deviation of
/// every headline metric.
RepeatedMetrics evaluate_repeated(const diff::ParamSet& params,
                                  const std::map<std::string, std::vector<data::ProductRecord>>& part,
                                  const meta::MetaConfig& cfg, const data::Vocab& vocab,
                                  uint64_t seed, int64_t repeats,
                                  std::span<const double> grid = kRecallGrid);

/// Metrics report as one pretty-printed JSON document: headline PR-AUC and
/// R@P (mean +- std over runs), per-category means, and an echo of the
/// configuration and seed.
std::string metrics_report_json(const RepeatedMetrics& rm, const meta::MetaConfig& cfg,
                                uint64_t seed);

}  // namespace metabridge::eval
