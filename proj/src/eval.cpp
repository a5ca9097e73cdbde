#include "metabridge/eval.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

#include "metabridge/parallel.hpp"
#include "metabridge/rng.hpp"
#include "metabridge/version.hpp"

namespace metabridge::eval {

namespace {

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd out;
    if (xs.empty()) return out;
    for (double x : xs) out.mean += x;
    out.mean /= static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(sq / static_cast<double>(xs.size()));
    return out;
}

}  // namespace

SplitMetrics evaluate_part(const diff::ParamSet& params,
                           const std::map<std::string, std::vector<data::ProductRecord>>& part,
                           const meta::MetaConfig& cfg, const data::Vocab& vocab,
                           uint64_t seed, std::span<const double> grid) {
    cfg.validate();
    if (part.empty()) {
        throw std::invalid_argument("evaluate_part: the split has no categories");
    }
    std::vector<data::Episode> episodes;
    episodes.reserve(part.size());
    {
        uint64_t ci = 0;
        for (const auto& [cat, pool] : part) {
            episodes.push_back(data::sample_episode(pool, cat, cfg.n_support, cfg.n_query,
                                                    mix_seed(seed, rngtag::kEpisode, ci)));
            ++ci;
        }
    }
    std::vector<std::vector<double>> scores(episodes.size());
    parallel_for_indexed(static_cast<int64_t>(episodes.size()), cfg.threads, [&](int64_t i) {
        const auto s = static_cast<std::size_t>(i);
        scores[s] = meta::predict(params, episodes[s].support, episodes[s].query, cfg, vocab);
    });

    SplitMetrics out;
    out.grid.assign(grid.begin(), grid.end());
    metrics::ScoredSet pooled;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const data::Episode& ep = episodes[e];
        metrics::ScoredSet per_cat;
        for (std::size_t k = 0; k < scores[e].size(); ++k) {
            const int label = *ep.query[k].label;
            pooled.score.push_back(scores[e][k]);
            pooled.label.push_back(label);
            per_cat.score.push_back(scores[e][k]);
            per_cat.label.push_back(label);
            out.rows.push_back({ep.category_id, ep.query[k].product_id, scores[e][k], label});
        }
        CategoryResult cr;
        cr.category_id = ep.category_id;
        cr.n_query = per_cat.size();
        cr.defined = per_cat.positives() > 0;
        cr.pr_auc = cr.defined ? metrics::pr_auc(per_cat) : 0.0;
        out.per_category.push_back(std::move(cr));
    }
    out.pooled_pr_auc = metrics::pr_auc(pooled);
    for (double p : grid) {
        out.recall_at.push_back(metrics::recall_at_precision(pooled, p));
    }
    double macro = 0.0;
    int64_t defined = 0;
    for (const CategoryResult& cr : out.per_category) {
        if (cr.defined) {
            macro += cr.pr_auc;
            ++defined;
        }
    }
    out.macro_pr_auc = defined > 0 ? macro / static_cast<double>(defined) : 0.0;
    return out;
}

RepeatedMetrics evaluate_repeated(
    const diff::ParamSet& params,
    const std::map<std::string, std::vector<data::ProductRecord>>& part,
    const meta::MetaConfig& cfg, const data::Vocab& vocab, uint64_t seed, int64_t repeats,
    std::span<const double> grid) {
    if (repeats < 1) {
        throw std::invalid_argument("repeats must be at least 1");
    }
    RepeatedMetrics out;
    for (int64_t r = 0; r < repeats; ++r) {
        out.runs.push_back(evaluate_part(params, part, cfg, vocab,
                                         mix_seed(seed, rngtag::kEval, static_cast<uint64_t>(r)),
                                         grid));
    }
    std::vector<double> pooled;
    std::vector<double> macro;
    for (const SplitMetrics& m : out.runs) {
        pooled.push_back(m.pooled_pr_auc);
        macro.push_back(m.macro_pr_auc);
    }
    const MeanStd p = mean_std(pooled);
    out.mean_pr_auc = p.mean;
    out.std_pr_auc = p.std;
    const MeanStd mac = mean_std(macro);
    out.mean_macro_pr_auc = mac.mean;
    out.std_macro_pr_auc = mac.std;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        std::vector<double> rs;
        for (const SplitMetrics& m : out.runs) rs.push_back(m.recall_at[i]);
        const MeanStd ms = mean_std(rs);
        out.mean_recall_at.push_back(ms.mean);
        out.std_recall_at.push_back(ms.std);
    }
    return out;
}

std::string metrics_report_json(const RepeatedMetrics& rm, const meta::MetaConfig& cfg,
                                uint64_t seed) {
    nlohmann::json j;
    j["tool"] = kToolString;
    j["metric"] = "pr_auc_average_precision";
    j["aggregation"] = "pooled_micro";
    j["repeats"] = rm.runs.size();
    j["seed"] = seed;
    j["pr_auc"] = {{"mean", rm.mean_pr_auc}, {"std", rm.std_pr_auc}};
    {
        std::vector<double> runs;
        for (const SplitMetrics& m : rm.runs) runs.push_back(m.pooled_pr_auc);
        j["pr_auc"]["runs"] = runs;
    }
    j["macro_pr_auc"] = {{"mean", rm.mean_macro_pr_auc}, {"std", rm.std_macro_pr_auc}};
    nlohmann::json rp = nlohmann::json::object();
    const std::vector<double> grid =
        rm.runs.empty() ? std::vector<double>(kRecallGrid.begin(), kRecallGrid.end())
                        : rm.runs.front().grid;
    for (std::size_t i = 0; i < grid.size() && i < rm.mean_recall_at.size(); ++i) {
        char key[16];
        std::snprintf(key, sizeof key, "%.2f", grid[i]);
        rp[key] = {{"mean", rm.mean_recall_at[i]}, {"std", rm.std_recall_at[i]}};
    }
    j["r_at_p"] = std::move(rp);

    // Per-category means across runs (the category sets are identical).
    if (!rm.runs.empty()) {
        nlohmann::json cats = nlohmann::json::array();
        for (std::size_t c = 0; c < rm.runs.front().per_category.size(); ++c) {
            std::vector<double> vals;
            for (const SplitMetrics& m : rm.runs) {
                if (m.per_category[c].defined) vals.push_back(m.per_category[c].pr_auc);
            }
            const MeanStd ms = mean_std(vals);
            cats.push_back({{"category", rm.runs.front().per_category[c].category_id},
                            {"pr_auc_mean", ms.mean},
                            {"pr_auc_std", ms.std},
                            {"defined_runs", vals.size()}});
        }
        j["per_category"] = std::move(cats);
    }

    j["config"] = {{"alpha", cfg.alpha},
                   {"beta", cfg.beta},
                   {"lambda", cfg.lambda},
                   {"inner_steps", cfg.inner_steps},
                   {"meta_batch", cfg.meta_batch},
                   {"epochs", cfg.epochs},
                   {"n_support", cfg.n_support},
                   {"n_query", cfg.n_query},
                   {"order", meta::to_string(cfg.order)},
                   {"variant", meta::to_string(cfg.variant)},
                   {"resample_support", cfg.resample_support},
                   {"d_model", cfg.encoder.d_model},
                   {"n_heads", cfg.encoder.n_heads},
                   {"n_layers", cfg.encoder.n_layers},
                   {"ffn_mult", cfg.encoder.ffn_mult},
                   {"dropout", cfg.encoder.dropout},
                   {"max_profile_len", cfg.encoder.max_profile_len},
                   {"max_value_len", cfg.encoder.max_value_len}};
    return j.dump(2) + "\n";
}

}  // namespace metabridge::eval
