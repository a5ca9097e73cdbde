// Python bindings for the few-shot attribute-validation engine.
//
// The module mirrors the C++ surface that the command-line tool is built
// from: synthetic data generation and splitting, vocabulary handling,
// episodic meta-training, adaptation, prediction, ranking metrics, and
// checkpoint IO. Parameter sets cross the boundary as dict[str, Tensor].

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "metabridge/data.hpp"
#include "metabridge/encoder.hpp"
#include "metabridge/eval.hpp"
#include "metabridge/latent.hpp"
#include "metabridge/meta.hpp"
#include "metabridge/metrics.hpp"
#include "metabridge/params.hpp"
#include "metabridge/tensor.hpp"
#include "metabridge/version.hpp"

namespace py = pybind11;

namespace {

using metabridge::Tensor;

Tensor tensor_from_values(const std::vector<double>& values,
                          std::optional<std::vector<int64_t>> shape) {
    metabridge::Shape s;
    if (shape.has_value()) {
        s.assign(shape->begin(), shape->end());
    } else {
        s = {static_cast<int64_t>(values.size())};
    }
    Tensor t = Tensor::zeros(s);
    if (t.size() != static_cast<int64_t>(values.size())) {
        throw std::invalid_argument("Tensor: shape does not match the number of values");
    }
    for (int64_t i = 0; i < t.size(); ++i) t[i] = values[static_cast<std::size_t>(i)];
    return t;
}

metabridge::metrics::ScoredSet scored_set(const std::vector<double>& scores,
                                          const std::vector<int>& labels) {
    metabridge::metrics::ScoredSet s;
    s.score = scores;
    s.label = labels;
    return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Few-shot textual attribute validation: meta-trained dual-encoder "
              "scorer with a latent distribution bridge";
    m.attr("__version__") = metabridge::kToolVersion;
    m.attr("TOOL") = metabridge::kToolString;

    // ----------------------------------------------------------------- data
    py::class_<metabridge::data::ProductRecord>(m, "ProductRecord")
        .def(py::init([](std::string category_id, std::string product_id, std::string profile,
                         std::string value, std::optional<int> label) {
                 metabridge::data::ProductRecord r;
                 r.category_id = std::move(category_id);
                 r.product_id = std::move(product_id);
                 r.profile = std::move(profile);
                 r.value = std::move(value);
                 r.label = label;
                 return r;
             }),
             py::arg("category_id"), py::arg("product_id"), py::arg("profile"),
             py::arg("value"), py::arg("label") = std::nullopt)
        .def_readwrite("category_id", &metabridge::data::ProductRecord::category_id)
        .def_readwrite("product_id", &metabridge::data::ProductRecord::product_id)
        .def_readwrite("profile", &metabridge::data::ProductRecord::profile)
        .def_readwrite("value", &metabridge::data::ProductRecord::value)
        .def_readwrite("label", &metabridge::data::ProductRecord::label)
        .def("__repr__", [](const metabridge::data::ProductRecord& r) {
            return "ProductRecord(" + r.category_id + "/" + r.product_id + ")";
        });

    py::class_<metabridge::data::Episode>(m, "Episode")
        .def_readonly("category_id", &metabridge::data::Episode::category_id)
        .def_readonly("support", &metabridge::data::Episode::support)
        .def_readonly("query", &metabridge::data::Episode::query);

    py::class_<metabridge::data::DatasetSplit>(m, "DatasetSplit")
        .def_readonly("train", &metabridge::data::DatasetSplit::train)
        .def_readonly("val", &metabridge::data::DatasetSplit::val)
        .def_readonly("test", &metabridge::data::DatasetSplit::test);

    py::class_<metabridge::data::Vocab>(m, "Vocab")
        .def(py::init<>())
        .def(py::init<const std::vector<std::string>&>(), py::arg("tokens"))
        .def("id_of", &metabridge::data::Vocab::id_of, py::arg("token"))
        .def("token_of", &metabridge::data::Vocab::token_of, py::arg("id"))
        .def("contains", &metabridge::data::Vocab::contains, py::arg("token"))
        .def("__len__", &metabridge::data::Vocab::size)
        .def("save", &metabridge::data::Vocab::save, py::arg("path"))
        .def_static("load", &metabridge::data::Vocab::load, py::arg("path"));

    m.def("tokenize", &metabridge::data::tokenize, py::arg("text"));
    m.def("generate_synthetic", &metabridge::data::generate_synthetic, py::arg("n_categories"),
          py::arg("per_category"), py::arg("vocab_size"), py::arg("noise_rate"),
          py::arg("seed"));
    m.def("load_jsonl", &metabridge::data::load_jsonl, py::arg("path"));
    m.def("save_jsonl", &metabridge::data::save_jsonl, py::arg("path"), py::arg("records"));
    m.def(
        "split_by_category",
        [](const std::vector<metabridge::data::ProductRecord>& records,
           const std::vector<int64_t>& ratio, uint64_t seed) {
            if (ratio.size() != 3) {
                throw std::invalid_argument("ratio must have exactly three entries");
            }
            return metabridge::data::split_by_category(records, {ratio[0], ratio[1], ratio[2]},
                                                       seed);
        },
        py::arg("records"), py::arg("ratio"), py::arg("seed"));
    m.def("sample_episode", &metabridge::data::sample_episode, py::arg("pool"),
          py::arg("category_id"), py::arg("n_support"), py::arg("n_query"), py::arg("seed"));
    m.def("build_vocab", &metabridge::data::build_vocab, py::arg("records"),
          py::arg("min_freq"));

    // --------------------------------------------------------------- tensor
    py::class_<Tensor>(m, "Tensor")
        .def(py::init(&tensor_from_values), py::arg("values"),
             py::arg("shape") = std::nullopt)
        .def_property_readonly("shape",
                               [](const Tensor& t) {
                                   const metabridge::Shape& s = t.shape();
                                   return std::vector<int64_t>(s.begin(), s.end());
                               })
        .def_property_readonly("values",
                               [](const Tensor& t) {
                                   std::vector<double> out(static_cast<std::size_t>(t.size()));
                                   for (int64_t i = 0; i < t.size(); ++i) {
                                       out[static_cast<std::size_t>(i)] = t[i];
                                   }
                                   return out;
                               })
        .def("__len__", [](const Tensor& t) { return t.size(); });

    // -------------------------------------------------------------- configs
    py::class_<metabridge::enc::EncoderConfig>(m, "EncoderConfig")
        .def(py::init<>())
        .def_readwrite("d_model", &metabridge::enc::EncoderConfig::d_model)
        .def_readwrite("n_heads", &metabridge::enc::EncoderConfig::n_heads)
        .def_readwrite("n_layers", &metabridge::enc::EncoderConfig::n_layers)
        .def_readwrite("ffn_mult", &metabridge::enc::EncoderConfig::ffn_mult)
        .def_readwrite("dropout", &metabridge::enc::EncoderConfig::dropout)
        .def_readwrite("max_profile_len", &metabridge::enc::EncoderConfig::max_profile_len)
        .def_readwrite("max_value_len", &metabridge::enc::EncoderConfig::max_value_len)
        .def("validate", &metabridge::enc::EncoderConfig::validate);

    py::enum_<metabridge::meta::GradOrder>(m, "GradOrder")
        .value("FIRST", metabridge::meta::GradOrder::kFirst)
        .value("SECOND", metabridge::meta::GradOrder::kSecond);

    py::enum_<metabridge::meta::VariantMode>(m, "VariantMode")
        .value("FULL", metabridge::meta::VariantMode::kFull)
        .value("MAML", metabridge::meta::VariantMode::kMaml)
        .value("STOCHASTIC_MAML", metabridge::meta::VariantMode::kStochasticMaml)
        .value("KL_FIXED_VARIANCE", metabridge::meta::VariantMode::kKlFixedVariance);

    py::class_<metabridge::meta::MetaConfig>(m, "MetaConfig")
        .def(py::init<>())
        .def_readwrite("encoder", &metabridge::meta::MetaConfig::encoder)
        .def_readwrite("alpha", &metabridge::meta::MetaConfig::alpha)
        .def_readwrite("beta", &metabridge::meta::MetaConfig::beta)
        .def_readwrite("lambda_", &metabridge::meta::MetaConfig::lambda)
        .def_readwrite("inner_steps", &metabridge::meta::MetaConfig::inner_steps)
        .def_readwrite("meta_batch", &metabridge::meta::MetaConfig::meta_batch)
        .def_readwrite("epochs", &metabridge::meta::MetaConfig::epochs)
        .def_readwrite("n_support", &metabridge::meta::MetaConfig::n_support)
        .def_readwrite("n_query", &metabridge::meta::MetaConfig::n_query)
        .def_readwrite("order", &metabridge::meta::MetaConfig::order)
        .def_readwrite("variant", &metabridge::meta::MetaConfig::variant)
        .def_readwrite("resample_support", &metabridge::meta::MetaConfig::resample_support)
        .def_readwrite("seed", &metabridge::meta::MetaConfig::seed)
        .def_readwrite("threads", &metabridge::meta::MetaConfig::threads)
        .def("validate", &metabridge::meta::MetaConfig::validate);

    // ----------------------------------------------------------- meta model
    py::class_<metabridge::meta::EpisodeLoss>(m, "EpisodeLoss")
        .def_readonly("total", &metabridge::meta::EpisodeLoss::total)
        .def_readonly("inference", &metabridge::meta::EpisodeLoss::inference)
        .def_readonly("bridge", &metabridge::meta::EpisodeLoss::bridge);

    py::class_<metabridge::meta::AdaptedModel>(m, "AdaptedModel")
        .def_readonly("params", &metabridge::meta::AdaptedModel::params)
        .def_readonly("category_id", &metabridge::meta::AdaptedModel::category_id)
        .def_readonly("base_checkpoint_id", &metabridge::meta::AdaptedModel::base_checkpoint_id)
        .def_readonly("inner_steps", &metabridge::meta::AdaptedModel::inner_steps)
        .def_readonly("beta", &metabridge::meta::AdaptedModel::beta);

    py::class_<metabridge::meta::EpochRecord>(m, "EpochRecord")
        .def_readonly("epoch", &metabridge::meta::EpochRecord::epoch)
        .def_readonly("train_loss", &metabridge::meta::EpochRecord::train_loss)
        .def_readonly("val_pr_auc", &metabridge::meta::EpochRecord::val_pr_auc)
        .def_readonly("is_best", &metabridge::meta::EpochRecord::is_best);

    py::class_<metabridge::meta::TrainResult>(m, "TrainResult")
        .def_readonly("final_params", &metabridge::meta::TrainResult::final_params)
        .def_readonly("best_params", &metabridge::meta::TrainResult::best_params)
        .def_readonly("history", &metabridge::meta::TrainResult::history)
        .def_readonly("best_val_pr_auc", &metabridge::meta::TrainResult::best_val_pr_auc)
        .def_readonly("best_epoch", &metabridge::meta::TrainResult::best_epoch);

    m.def("init_params", &metabridge::enc::init_params, py::arg("encoder_config"),
          py::arg("vocab_size"), py::arg("seed"));
    m.def("support_entropy_loss", &metabridge::meta::support_entropy_loss, py::arg("params"),
          py::arg("support"), py::arg("config"), py::arg("vocab"), py::arg("training"),
          py::arg("rng_seed"));
    m.def("episode_loss", &metabridge::meta::episode_loss, py::arg("params"),
          py::arg("episode"), py::arg("config"), py::arg("vocab"), py::arg("training"),
          py::arg("rng_seed"));
    m.def("adapt", &metabridge::meta::adapt, py::arg("params"), py::arg("support"),
          py::arg("config"), py::arg("vocab"), py::arg("training"), py::arg("rng_seed"),
          py::arg("category_id") = "", py::arg("base_checkpoint_id") = "");
    m.def("train", &metabridge::meta::train, py::arg("config"), py::arg("split"),
          py::arg("vocab"), py::arg("on_epoch") = nullptr,
          "Full episodic training loop; returns best/final parameters and the epoch history.");
    m.def("predict", &metabridge::meta::predict, py::arg("params"), py::arg("support"),
          py::arg("query"), py::arg("config"), py::arg("vocab"),
          "Adapt on the support set, then score each query record (probability incorrect).");

    m.def("save_checkpoint", &metabridge::diff::save_checkpoint, py::arg("dir"),
          py::arg("params"), py::arg("as_f32") = false);
    m.def("load_checkpoint", &metabridge::diff::load_checkpoint, py::arg("dir"));

    // ----------------------------------------------------------- latent ops
    m.def(
        "kl_divergence",
        [](const std::vector<double>& mu_q, const std::vector<double>& logsigma_q,
           const std::vector<double>& mu_p, const std::vector<double>& logsigma_p) {
            if (mu_q.size() != logsigma_q.size() || mu_q.size() != mu_p.size() ||
                mu_q.size() != logsigma_p.size()) {
                throw std::invalid_argument("kl_divergence: mismatched lengths");
            }
            return metabridge::latent::kl_divergence(
                {tensor_from_values(mu_q, std::nullopt),
                 tensor_from_values(logsigma_q, std::nullopt)},
                {tensor_from_values(mu_p, std::nullopt),
                 tensor_from_values(logsigma_p, std::nullopt)});
        },
        py::arg("mu_q"), py::arg("logsigma_q"), py::arg("mu_p"), py::arg("logsigma_p"),
        "Closed-form KL between diagonal Gaussians given as flat parameter lists.");

    // -------------------------------------------------------------- metrics
    m.def(
        "pr_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return metabridge::metrics::pr_auc(scored_set(scores, labels));
        },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "recall_at_precision",
        [](const std::vector<double>& scores, const std::vector<int>& labels,
           double min_precision) {
            return metabridge::metrics::recall_at_precision(scored_set(scores, labels),
                                                            min_precision);
        },
        py::arg("scores"), py::arg("labels"), py::arg("min_precision"));

    // ------------------------------------------------------------ evaluation
    py::class_<metabridge::eval::CategoryResult>(m, "CategoryResult")
        .def_readonly("category_id", &metabridge::eval::CategoryResult::category_id)
        .def_readonly("pr_auc", &metabridge::eval::CategoryResult::pr_auc)
        .def_readonly("defined", &metabridge::eval::CategoryResult::defined)
        .def_readonly("n_query", &metabridge::eval::CategoryResult::n_query);

    py::class_<metabridge::eval::ScoreRow>(m, "ScoreRow")
        .def_readonly("category_id", &metabridge::eval::ScoreRow::category_id)
        .def_readonly("product_id", &metabridge::eval::ScoreRow::product_id)
        .def_readonly("score", &metabridge::eval::ScoreRow::score)
        .def_readonly("label", &metabridge::eval::ScoreRow::label);

    py::class_<metabridge::eval::SplitMetrics>(m, "SplitMetrics")
        .def_readonly("pooled_pr_auc", &metabridge::eval::SplitMetrics::pooled_pr_auc)
        .def_readonly("grid", &metabridge::eval::SplitMetrics::grid)
        .def_readonly("recall_at", &metabridge::eval::SplitMetrics::recall_at)
        .def_readonly("macro_pr_auc", &metabridge::eval::SplitMetrics::macro_pr_auc)
        .def_readonly("per_category", &metabridge::eval::SplitMetrics::per_category)
        .def_readonly("rows", &metabridge::eval::SplitMetrics::rows);

    py::class_<metabridge::eval::RepeatedMetrics>(m, "RepeatedMetrics")
        .def_readonly("runs", &metabridge::eval::RepeatedMetrics::runs)
        .def_readonly("mean_pr_auc", &metabridge::eval::RepeatedMetrics::mean_pr_auc)
        .def_readonly("std_pr_auc", &metabridge::eval::RepeatedMetrics::std_pr_auc)
        .def_readonly("mean_recall_at", &metabridge::eval::RepeatedMetrics::mean_recall_at)
        .def_readonly("std_recall_at", &metabridge::eval::RepeatedMetrics::std_recall_at)
        .def_readonly("mean_macro_pr_auc",
                      &metabridge::eval::RepeatedMetrics::mean_macro_pr_auc)
        .def_readonly("std_macro_pr_auc", &metabridge::eval::RepeatedMetrics::std_macro_pr_auc);

    m.def(
        "evaluate_part",
        [](const metabridge::diff::ParamSet& params,
           const std::map<std::string, std::vector<metabridge::data::ProductRecord>>& part,
           const metabridge::meta::MetaConfig& cfg, const metabridge::data::Vocab& vocab,
           uint64_t seed, const std::vector<double>& grid) {
            return metabridge::eval::evaluate_part(params, part, cfg, vocab, seed,
                                                   std::span<const double>(grid));
        },
        py::arg("params"), py::arg("part"), py::arg("config"), py::arg("vocab"),
        py::arg("seed"),
        py::arg("grid") = std::vector<double>{0.7, 0.8, 0.9, 0.95});
    m.def(
        "evaluate_repeated",
        [](const metabridge::diff::ParamSet& params,
           const std::map<std::string, std::vector<metabridge::data::ProductRecord>>& part,
           const metabridge::meta::MetaConfig& cfg, const metabridge::data::Vocab& vocab,
           uint64_t seed, int64_t repeats, const std::vector<double>& grid) {
            return metabridge::eval::evaluate_repeated(params, part, cfg, vocab, seed, repeats,
                                                       std::span<const double>(grid));
        },
        py::arg("params"), py::arg("part"), py::arg("config"), py::arg("vocab"),
        py::arg("seed"), py::arg("repeats"),
        py::arg("grid") = std::vector<double>{0.7, 0.8, 0.9, 0.95});
    m.def("metrics_report_json", &metabridge::eval::metrics_report_json, py::arg("metrics"),
          py::arg("config"), py::arg("seed"));
}
