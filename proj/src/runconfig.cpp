#include "metabridge/runconfig.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace metabridge::cli {

namespace {

std::string trim(const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int64_t parse_i64(const std::string& v) {
    int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw std::invalid_argument("'" + v + "' is not an integer");
    }
    return out;
}

uint64_t parse_u64(const std::string& v) {
    uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw std::invalid_argument("'" + v + "' is not a non-negative integer");
    }
    return out;
}

double parse_f64(const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw std::invalid_argument("'" + v + "' is not a number");
    }
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("'" + v + "' is not a boolean (true/false/1/0)");
}

std::vector<double> parse_f64_list(const std::string& v) {
    std::vector<double> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
        out.push_back(parse_f64(trim(item)));
    }
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list of numbers");
    return out;
}

std::string fmt_i64(int64_t x) { return std::to_string(x); }
std::string fmt_u64(uint64_t x) { return std::to_string(x); }

// Shortest decimal that round-trips to the same double.
std::string fmt_f64(double x) {
    char buf[32];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    (void)ec;
    return std::string(buf, p);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_f64_list(const std::vector<double>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i > 0) out += ",";
        out += fmt_f64(xs[i]);
    }
    return out;
}

struct Entry {
    const char* key;
    const char* help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<Entry>& schema() {
    static const std::vector<Entry> table = {
        {"meta.alpha", "outer-loop Adam step size",
         [](RunConfig& c, const std::string& v) { c.meta.alpha = parse_f64(v); },
         [](const RunConfig& c) { return fmt_f64(c.meta.alpha); }},
        {"meta.beta", "inner-loop gradient-descent step size",
         [](RunConfig& c, const std::string& v) { c.meta.beta = parse_f64(v); },
         [](const RunConfig& c) { return fmt_f64(c.meta.beta); }},
        {"meta.lambda", "weight of the distribution-bridging term",
         [](RunConfig& c, const std::string& v) { c.meta.lambda = parse_f64(v); },
         [](const RunConfig& c) { return fmt_f64(c.meta.lambda); }},
        {"meta.inner_steps", "adaptation steps per episode",
         [](RunConfig& c, const std::string& v) { c.meta.inner_steps = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.inner_steps); }},
        {"meta.meta_batch", "categories per outer step",
         [](RunConfig& c, const std::string& v) { c.meta.meta_batch = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.meta_batch); }},
        {"meta.epochs", "outer training epochs",
         [](RunConfig& c, const std::string& v) { c.meta.epochs = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.epochs); }},
        {"meta.n_support", "unlabeled support records per episode",
         [](RunConfig& c, const std::string& v) { c.meta.n_support = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.n_support); }},
        {"meta.n_query", "labeled query records per episode",
         [](RunConfig& c, const std::string& v) { c.meta.n_query = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.n_query); }},
        {"meta.order", "meta-gradient order: first | second",
         [](RunConfig& c, const std::string& v) { c.meta.order = meta::parse_grad_order(v); },
         [](const RunConfig& c) { return meta::to_string(c.meta.order); }},
        {"meta.variant", "full | maml | stochastic_maml | kl_fixed_variance",
         [](RunConfig& c, const std::string& v) { c.meta.variant = meta::parse_variant(v); },
         [](const RunConfig& c) { return meta::to_string(c.meta.variant); }},
        {"meta.resample_support", "redraw each episode's support half every epoch",
         [](RunConfig& c, const std::string& v) { c.meta.resample_support = parse_bool(v); },
         [](const RunConfig& c) { return fmt_bool(c.meta.resample_support); }},
        {"meta.seed", "master seed for init, sampling, and noise",
         [](RunConfig& c, const std::string& v) { c.meta.seed = parse_u64(v); },
         [](const RunConfig& c) { return fmt_u64(c.meta.seed); }},
        {"encoder.d_model", "embedding width",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.d_model = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.d_model); }},
        {"encoder.n_heads", "attention heads",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.n_heads = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.n_heads); }},
        {"encoder.n_layers", "encoder layers per tower",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.n_layers = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.n_layers); }},
        {"encoder.ffn_mult", "feedforward width multiplier",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.ffn_mult = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.ffn_mult); }},
        {"encoder.dropout", "dropout rate during training",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.dropout = parse_f64(v); },
         [](const RunConfig& c) { return fmt_f64(c.meta.encoder.dropout); }},
        {"encoder.max_profile_len", "profile truncation length (tokens)",
         [](RunConfig& c, const std::string& v) {
             c.meta.encoder.max_profile_len = parse_i64(v);
         },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.max_profile_len); }},
        {"encoder.max_value_len", "value truncation length (tokens)",
         [](RunConfig& c, const std::string& v) { c.meta.encoder.max_value_len = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.meta.encoder.max_value_len); }},
        {"data.path", "JSONL record file",
         [](RunConfig& c, const std::string& v) { c.data_path = v; },
         [](const RunConfig& c) { return c.data_path; }},
        {"data.ratio_train", "train share of the category split",
         [](RunConfig& c, const std::string& v) { c.ratio_train = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.ratio_train); }},
        {"data.ratio_val", "validation share of the category split",
         [](RunConfig& c, const std::string& v) { c.ratio_val = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.ratio_val); }},
        {"data.ratio_test", "test share of the category split",
         [](RunConfig& c, const std::string& v) { c.ratio_test = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.ratio_test); }},
        {"data.split_seed", "seed for the category split shuffle",
         [](RunConfig& c, const std::string& v) { c.split_seed = parse_u64(v); },
         [](const RunConfig& c) { return fmt_u64(c.split_seed); }},
        {"data.vocab_min_freq", "minimum token frequency for the vocabulary",
         [](RunConfig& c, const std::string& v) { c.vocab_min_freq = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.vocab_min_freq); }},
        {"out.dir", "output directory",
         [](RunConfig& c, const std::string& v) { c.out_dir = v; },
         [](const RunConfig& c) { return c.out_dir; }},
        {"eval.repeats", "independent evaluation repeats",
         [](RunConfig& c, const std::string& v) { c.repeats = parse_i64(v); },
         [](const RunConfig& c) { return fmt_i64(c.repeats); }},
        {"eval.split", "which split to score: train | val | test",
         [](RunConfig& c, const std::string& v) { c.split = v; },
         [](const RunConfig& c) { return c.split; }},
        {"eval.r_at_p", "comma-separated precision floors for the recall report",
         [](RunConfig& c, const std::string& v) { c.r_at_p = parse_f64_list(v); },
         [](const RunConfig& c) { return fmt_f64_list(c.r_at_p); }},
    };
    return table;
}

const Entry& find_entry(const std::string& key) {
    for (const Entry& e : schema()) {
        if (key == e.key) return e;
    }
    throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
    meta.validate();
    if (ratio_train < 1 || ratio_val < 1 || ratio_test < 1) {
        throw std::invalid_argument("split ratio components must all be positive");
    }
    if (vocab_min_freq < 1) {
        throw std::invalid_argument("data.vocab_min_freq must be at least 1");
    }
    if (repeats < 1) {
        throw std::invalid_argument("eval.repeats must be at least 1");
    }
    if (split != "train" && split != "val" && split != "test") {
        throw std::invalid_argument("eval.split must be train, val, or test");
    }
    if (r_at_p.empty()) {
        throw std::invalid_argument("eval.r_at_p must not be empty");
    }
    for (double p : r_at_p) {
        if (!(p > 0.0 && p <= 1.0)) {
            throw std::invalid_argument("eval.r_at_p entries must lie in (0, 1]");
        }
    }
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const Entry& e : schema()) out.emplace_back(e.key);
        return out;
    }();
    return keys;
}

std::string key_help(const std::string& key) { return find_entry(key).help; }

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const Entry& e = find_entry(key);
    try {
        e.set(cfg, value);
    } catch (const std::invalid_argument& err) {
        throw std::invalid_argument("config key '" + key + "': " + err.what());
    }
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const Entry& e : schema()) out[e.key] = e.get(cfg);
    return out;
}

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config file '" + path.string() + "'");
    }
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        const auto where = [&] { return path.string() + ":" + std::to_string(lineno); };
        if (eq == std::string::npos) {
            throw std::invalid_argument(where() + ": expected `key = value`");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument(where() + ": empty key");
        }
        try {
            apply_key(cfg, key, value);
        } catch (const std::invalid_argument& err) {
            throw std::invalid_argument(where() + ": " + err.what());
        }
    }
}

void save_config_file(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
    if (!out) {
        throw std::runtime_error("cannot write config file '" + path.string() + "'");
    }
    const auto echo = config_echo(cfg);
    for (const std::string& key : config_keys()) {
        out << key << " = " << echo.at(key) << "\n";
    }
    if (!out) {
        throw std::runtime_error("failed writing config file '" + path.string() + "'");
    }
}

}  // namespace metabridge::cli
