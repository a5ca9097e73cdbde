// Command-line entry point: synthetic data generation, meta-training,
// evaluation, test-time adaptation, and batch scoring, wired for
// byte-reproducible runs (no timestamps or machine state in any artifact).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "metabridge/data.hpp"
#include "metabridge/eval.hpp"
#include "metabridge/meta.hpp"
#include "metabridge/parallel.hpp"
#include "metabridge/params.hpp"
#include "metabridge/runconfig.hpp"
#include "metabridge/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using metabridge::kToolString;
using metabridge::cli::RunConfig;

namespace {

// ---- shared plumbing -------------------------------------------------------

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Registers one string option per config key (e.g. --meta.alpha) that queues
/// a (key, value) pair; `extra` adds short aliases for frequently used keys.
void add_config_flags(CLI::App* cmd, Overrides& sink,
                      const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    for (const std::string& key : metabridge::cli::config_keys()) {
        cmd->add_option_function<std::string>(
            "--" + key,
            [&sink, key](const std::string& value) { sink.emplace_back(key, value); },
            metabridge::cli::key_help(key));
    }
    for (const auto& [flag, key] : extra) {
        cmd->add_option_function<std::string>(
            flag,
            [&sink, key = key](const std::string& value) { sink.emplace_back(key, value); },
            "alias for --" + key);
    }
}

RunConfig resolve_config(const std::string& config_file, const Overrides& overrides) {
    RunConfig rc;
    if (!config_file.empty()) metabridge::cli::load_config_file(rc, config_file);
    for (const auto& [key, value] : overrides) metabridge::cli::apply_key(rc, key, value);
    return rc;
}

/// Copy with the invocation-specific paths cleared: persisted configs carry
/// the model and protocol settings, not where one machine kept its files
/// (actual paths are recorded in run.json), so identical runs stay
/// byte-identical wherever they are written.
RunConfig portable(RunConfig rc) {
    rc.data_path.clear();
    rc.out_dir.clear();
    return rc;
}

void write_text(const fs::path& path, const std::string& text) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json config_as_json(const RunConfig& rc) {
    json j = json::object();
    for (const auto& [key, value] : metabridge::cli::config_echo(rc)) j[key] = value;
    return j;
}

json base_manifest(const std::string& command, const RunConfig& rc) {
    json j;
    j["tool"] = kToolString;
    j["command"] = command;
    j["config"] = config_as_json(rc);
    return j;
}

/// A self-contained model directory: tensors, vocabulary, and the resolved
/// config, so downstream commands need nothing but --ckpt.
void write_model_dir(const fs::path& dir, const metabridge::diff::ParamSet& params,
                     const metabridge::data::Vocab& vocab, const RunConfig& rc) {
    metabridge::diff::save_checkpoint(dir, params);
    vocab.save(dir / "vocab.tsv");
    metabridge::cli::save_config_file(rc, dir / "config.ini");
}

struct LoadedModel {
    metabridge::diff::ParamSet params;
    metabridge::data::Vocab vocab;
    RunConfig rc;
};

LoadedModel load_model_dir(const fs::path& dir) {
    LoadedModel m;
    metabridge::cli::load_config_file(m.rc, dir / "config.ini");
    m.vocab = metabridge::data::Vocab::load(dir / "vocab.tsv");
    m.params = metabridge::diff::load_checkpoint(dir);
    return m;
}

metabridge::data::DatasetSplit split_dataset(
    const std::vector<metabridge::data::ProductRecord>& records, const RunConfig& rc) {
    return metabridge::data::split_by_category(
        records, {rc.ratio_train, rc.ratio_val, rc.ratio_test}, rc.split_seed);
}

const std::map<std::string, std::vector<metabridge::data::ProductRecord>>& pick_part(
    const metabridge::data::DatasetSplit& split, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    return split.test;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int64_t categories = 50;
    int64_t per_category = 110;
    int64_t vocab_size = 400;
    double noise = 0.0;
    uint64_t seed = 7;
};

void run_synth(const SynthArgs& a) {
    const auto records = metabridge::data::generate_synthetic(a.categories, a.per_category,
                                                              a.vocab_size, a.noise, a.seed);
    fs::create_directories(a.out);
    metabridge::data::save_jsonl(fs::path(a.out) / "records.jsonl", records);

    std::set<std::string> cats;
    int64_t positive = 0;
    int64_t negative = 0;
    for (const auto& r : records) {
        cats.insert(r.category_id);
        if (r.label && *r.label == 1) {
            ++positive;
        } else {
            ++negative;
        }
    }
    json manifest;
    manifest["tool"] = kToolString;
    manifest["command"] = "synth";
    manifest["parameters"] = {{"categories", a.categories},
                              {"per_category", a.per_category},
                              {"vocab_size", a.vocab_size},
                              {"noise", a.noise},
                              {"seed", a.seed}};
    manifest["records"] = records.size();
    manifest["categories_generated"] = cats.size();
    manifest["labels"] = {{"positive", positive}, {"negative", negative}};
    manifest["outputs"] = {{"records", "records.jsonl"}};
    write_json(fs::path(a.out) / "manifest.json", manifest);
    std::printf("wrote %zu records over %zu categories to %s\n", records.size(), cats.size(),
                (fs::path(a.out) / "records.jsonl").string().c_str());
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config_file;
    std::string data;
    std::string out;
    int64_t threads = 1;
    Overrides overrides;
};

void run_train(const TrainArgs& a) {
    RunConfig rc = resolve_config(a.config_file, a.overrides);
    if (!a.data.empty()) rc.data_path = a.data;
    rc.out_dir = a.out;
    rc.meta.threads = a.threads;
    rc.validate();
    if (rc.data_path.empty()) {
        throw std::invalid_argument("no input data: pass --data or set data.path");
    }

    const auto records = metabridge::data::load_jsonl(rc.data_path);
    const auto split = split_dataset(records, rc);
    const auto vocab = metabridge::data::build_vocab(records, rc.vocab_min_freq);

    const auto result = metabridge::meta::train(
        rc.meta, split, vocab, [](const metabridge::meta::EpochRecord& e) {
            std::printf("epoch %4lld  train_loss %10.6f  val_pr_auc %.4f%s\n",
                        static_cast<long long>(e.epoch), e.train_loss, e.val_pr_auc,
                        e.is_best ? "  *" : "");
            std::fflush(stdout);
        });

    const fs::path out(a.out);
    fs::create_directories(out);
    metabridge::cli::save_config_file(portable(rc), out / "config.ini");
    {
        std::string lines;
        for (const auto& e : result.history) {
            lines += json{{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_pr_auc", e.val_pr_auc},
                          {"is_best", e.is_best}}
                         .dump();
            lines += "\n";
        }
        write_text(out / "history.jsonl", lines);
    }
    write_model_dir(out / "best", result.best_params, vocab, portable(rc));
    write_model_dir(out / "final", result.final_params, vocab, portable(rc));

    json manifest = base_manifest("train", rc);
    manifest["inputs"] = {{"data", rc.data_path},
                          {"config_file", a.config_file}};
    manifest["data"] = {{"records", records.size()},
                        {"train_categories", split.train.size()},
                        {"val_categories", split.val.size()},
                        {"test_categories", split.test.size()},
                        {"vocab_size", vocab.size()}};
    manifest["result"] = {{"epochs_run", result.history.size()},
                          {"best_epoch", result.best_epoch},
                          {"best_val_pr_auc", result.best_val_pr_auc}};
    manifest["outputs"] = {{"best", "best"},
                           {"final", "final"},
                           {"history", "history.jsonl"},
                           {"config", "config.ini"}};
    write_json(out / "run.json", manifest);
    std::printf("best val_pr_auc %.4f at epoch %lld; checkpoints under %s\n",
                result.best_val_pr_auc, static_cast<long long>(result.best_epoch),
                out.string().c_str());
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string out;
    std::string dump_scores;
    int64_t threads = 1;
    Overrides overrides;
};

void run_eval(const EvalArgs& a) {
    LoadedModel m = load_model_dir(a.ckpt);
    for (const auto& [key, value] : a.overrides) metabridge::cli::apply_key(m.rc, key, value);
    if (!a.data.empty()) m.rc.data_path = a.data;
    m.rc.out_dir = a.out;
    m.rc.meta.threads = a.threads;
    m.rc.validate();
    if (m.rc.data_path.empty()) {
        throw std::invalid_argument("no input data: pass --data or set data.path");
    }

    const auto records = metabridge::data::load_jsonl(m.rc.data_path);
    const auto split = split_dataset(records, m.rc);
    const auto& part = pick_part(split, m.rc.split);
    const auto rm = metabridge::eval::evaluate_repeated(m.params, part, m.rc.meta, m.vocab,
                                                        m.rc.meta.seed, m.rc.repeats,
                                                        m.rc.r_at_p);

    const fs::path out(a.out);
    fs::create_directories(out);
    const std::string report =
        metabridge::eval::metrics_report_json(rm, m.rc.meta, m.rc.meta.seed);
    write_text(out / "metrics.json", report);

    if (!a.dump_scores.empty()) {
        std::string lines;
        for (std::size_t r = 0; r < rm.runs.size(); ++r) {
            for (const auto& row : rm.runs[r].rows) {
                lines += json{{"run", r},
                              {"category_id", row.category_id},
                              {"product_id", row.product_id},
                              {"score", row.score},
                              {"label", row.label}}
                             .dump();
                lines += "\n";
            }
        }
        write_text(a.dump_scores, lines);
    }

    json manifest = base_manifest("eval", m.rc);
    manifest["inputs"] = {{"ckpt", a.ckpt}, {"data", m.rc.data_path}};
    manifest["outputs"] = {{"metrics", "metrics.json"},
                           {"scores", a.dump_scores}};
    write_json(out / "run.json", manifest);

    std::printf("split=%s categories=%zu repeats=%lld\n", m.rc.split.c_str(), part.size(),
                static_cast<long long>(m.rc.repeats));
    std::printf("pr_auc        %.4f +- %.4f\n", rm.mean_pr_auc, rm.std_pr_auc);
    std::printf("macro_pr_auc  %.4f +- %.4f\n", rm.mean_macro_pr_auc, rm.std_macro_pr_auc);
    for (std::size_t i = 0; i < m.rc.r_at_p.size(); ++i) {
        std::printf("r@p=%.2f      %.4f +- %.4f\n", m.rc.r_at_p[i], rm.mean_recall_at[i],
                    rm.std_recall_at[i]);
    }
}

// ---- adapt -----------------------------------------------------------------

struct AdaptArgs {
    std::string ckpt;
    std::string support;
    std::string out;
    int64_t threads = 1;
    Overrides overrides;
};

void run_adapt(const AdaptArgs& a) {
    LoadedModel m = load_model_dir(a.ckpt);
    for (const auto& [key, value] : a.overrides) metabridge::cli::apply_key(m.rc, key, value);
    m.rc.out_dir = a.out;
    m.rc.meta.threads = a.threads;
    m.rc.validate();

    const auto support = metabridge::data::load_jsonl(a.support);
    if (support.empty()) {
        throw std::invalid_argument("support file '" + a.support + "' has no records");
    }
    const std::string category = support.front().category_id;
    for (const auto& r : support) {
        if (r.category_id != category) {
            throw std::invalid_argument("support records span categories '" + category +
                                        "' and '" + r.category_id +
                                        "'; adaptation is per category");
        }
    }

    const auto adapted = metabridge::meta::adapt(m.params, support, m.rc.meta, m.vocab,
                                                 /*training=*/false, m.rc.meta.seed, category,
                                                 a.ckpt);
    const fs::path out(a.out);
    write_model_dir(out, adapted.params, m.vocab, portable(m.rc));

    json manifest = base_manifest("adapt", m.rc);
    manifest["inputs"] = {{"ckpt", a.ckpt}, {"support", a.support}};
    manifest["adaptation"] = {{"category_id", adapted.category_id},
                              {"base_checkpoint", adapted.base_checkpoint_id},
                              {"inner_steps", adapted.inner_steps},
                              {"beta", adapted.beta},
                              {"support_records", support.size()}};
    write_json(out / "run.json", manifest);
    std::printf("adapted to category '%s' with %lld step(s); model under %s\n",
                category.c_str(), static_cast<long long>(adapted.inner_steps),
                out.string().c_str());
}

// ---- infer -----------------------------------------------------------------

struct InferArgs {
    std::string ckpt;
    std::string input;
    std::string output;
    int64_t threads = 1;
};

void run_infer(const InferArgs& a) {
    LoadedModel m = load_model_dir(a.ckpt);
    m.rc.meta.threads = a.threads;
    m.rc.validate();
    const auto records = metabridge::data::load_jsonl(a.input);

    // Scores come from the checkpoint as-is: no support set and no adaptation
    // here (point `adapt` output at --ckpt for category-adapted scoring).
    // Record scores are row-independent, so chunking is exact.
    metabridge::meta::MetaConfig cfg = m.rc.meta;
    cfg.inner_steps = 0;
    constexpr int64_t kChunk = 128;
    const int64_t n = static_cast<int64_t>(records.size());
    const int64_t n_chunks = (n + kChunk - 1) / kChunk;
    std::vector<std::vector<double>> chunk_scores(static_cast<std::size_t>(n_chunks));
    metabridge::parallel_for_indexed(n_chunks, cfg.threads, [&](int64_t c) {
        const int64_t lo = c * kChunk;
        const int64_t hi = std::min<int64_t>(lo + kChunk, n);
        const std::vector<metabridge::data::ProductRecord> chunk(
            records.begin() + lo, records.begin() + hi);
        chunk_scores[static_cast<std::size_t>(c)] =
            metabridge::meta::predict(m.params, {}, chunk, cfg, m.vocab);
    });

    std::string lines;
    int64_t k = 0;
    for (const auto& chunk : chunk_scores) {
        for (double score : chunk) {
            lines += json{{"category_id", records[static_cast<std::size_t>(k)].category_id},
                          {"product_id", records[static_cast<std::size_t>(k)].product_id},
                          {"score", score}}
                         .dump();
            lines += "\n";
            ++k;
        }
    }
    write_text(a.output, lines);

    json manifest = base_manifest("infer", m.rc);
    manifest["inputs"] = {{"ckpt", a.ckpt}, {"input", a.input}};
    manifest["records"] = records.size();
    manifest["outputs"] = {{"scores", a.output}};
    write_json(a.output + ".manifest.json", manifest);
    std::printf("scored %zu records -> %s\n", records.size(), a.output.c_str());
}

// ---- wiring ----------------------------------------------------------------

int run_cli(int argc, char** argv) {
    CLI::App app{
        "Few-shot textual attribute validation: episodic meta-training of a dual-encoder "
        "scorer with a latent distribution bridge"};
    app.set_version_flag("--version", std::string(kToolString));
    app.require_subcommand(1);

    SynthArgs sa;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic validation dataset");
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--categories", sa.categories, "number of categories");
    synth->add_option("--per-category", sa.per_category, "records per category");
    synth->add_option("--vocab-size", sa.vocab_size, "words per category pool");
    synth->add_option("--noise", sa.noise, "label noise rate in [0, 0.5)");
    synth->add_option("--seed", sa.seed, "generator seed");
    synth->callback([&sa] { run_synth(sa); });

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "Meta-train across categories");
    train->add_option("--config", ta.config_file, "flat key = value config file");
    train->add_option("--data", ta.data, "JSONL record file (overrides data.path)");
    train->add_option("--out", ta.out, "output directory")->required();
    train->add_option("--threads", ta.threads, "worker threads (results are identical)");
    add_config_flags(train, ta.overrides, {{"--seed", "meta.seed"}});
    train->callback([&ta] { run_train(ta); });

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "Score a data split with a trained model");
    eval->add_option("--ckpt", ea.ckpt, "model directory from train/adapt")->required();
    eval->add_option("--data", ea.data, "JSONL record file (overrides data.path)");
    eval->add_option("--out", ea.out, "output directory")->required();
    eval->add_option("--dump-scores", ea.dump_scores,
                     "also write every (run, record, score, label) to this JSONL file");
    eval->add_option("--threads", ea.threads, "worker threads (results are identical)");
    add_config_flags(eval, ea.overrides,
                     {{"--split", "eval.split"},
                      {"--repeats", "eval.repeats"},
                      {"--r-at-p", "eval.r_at_p"},
                      {"--seed", "meta.seed"}});
    eval->callback([&ea] { run_eval(ea); });

    AdaptArgs aa;
    CLI::App* adapt =
        app.add_subcommand("adapt", "Adapt a trained model to one category's support set");
    adapt->add_option("--ckpt", aa.ckpt, "model directory from train")->required();
    adapt->add_option("--support", aa.support, "JSONL support records (labels ignored)")
        ->required();
    adapt->add_option("--out", aa.out, "output model directory")->required();
    adapt->add_option("--threads", aa.threads, "worker threads (results are identical)");
    add_config_flags(adapt, aa.overrides,
                     {{"--inner-steps", "meta.inner_steps"}, {"--beta", "meta.beta"}});
    adapt->callback([&aa] { run_adapt(aa); });

    InferArgs ia;
    CLI::App* infer =
        app.add_subcommand("infer", "Score records with a model directory, no adaptation");
    infer->add_option("--ckpt", ia.ckpt, "model directory from train/adapt")->required();
    infer->add_option("--input", ia.input, "JSONL records to score")->required();
    infer->add_option("--output", ia.output, "output JSONL score file")->required();
    infer->add_option("--threads", ia.threads, "worker threads (results are identical)");
    infer->callback([&ia] { run_infer(ia); });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
