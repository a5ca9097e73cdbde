#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "metabridge/data.hpp"
#include "metabridge/encoder.hpp"
#include "metabridge/graph.hpp"
#include "metabridge/latent.hpp"
#include "metabridge/meta.hpp"
#include "metabridge/params.hpp"
#include "metabridge/rng.hpp"

using metabridge::Rng;
using metabridge::Shape;
using metabridge::Tensor;
using metabridge::mix_seed;
using metabridge::data::Episode;
using metabridge::data::ProductRecord;
using metabridge::data::Vocab;
using metabridge::diff::GradMap;
using metabridge::diff::ParamSet;
using metabridge::meta::AdaptedModel;
using metabridge::meta::EpisodeGradient;
using metabridge::meta::EpisodeLoss;
using metabridge::meta::GradOrder;
using metabridge::meta::MetaConfig;
using metabridge::meta::VariantMode;

namespace rngtag = metabridge::rngtag;

namespace {

// --- shared fixture ----------------------------------------------------------

MetaConfig micro_config() {
    MetaConfig cfg;
    cfg.encoder.d_model = 4;
    cfg.encoder.n_heads = 2;
    cfg.encoder.n_layers = 1;
    cfg.encoder.ffn_mult = 2;
    cfg.encoder.dropout = 0.3;
    cfg.encoder.max_profile_len = 24;
    cfg.encoder.max_value_len = 8;
    cfg.n_support = 6;
    cfg.n_query = 4;
    cfg.inner_steps = 1;
    cfg.meta_batch = 2;
    return cfg;
}

struct Fixture {
    std::vector<ProductRecord> records;
    std::map<std::string, std::vector<ProductRecord>> pools;
    Vocab vocab;

    Fixture()
        : records(metabridge::data::generate_synthetic(6, 40, 60, 0.0, 7)),
          vocab(metabridge::data::build_vocab(records, 1)) {
        for (const ProductRecord& r : records) pools[r.category_id].push_back(r);
    }

    Episode episode(const std::string& cat, int64_t n, int64_t k, uint64_t seed) const {
        return metabridge::data::sample_episode(pools.at(cat), cat, n, k, seed);
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, ta] : a) {
        const auto it = b.find(name);
        if (it == b.end() || ta.values() != it->second.values()) return false;
    }
    return true;
}

// --- by-hand forward pass (value level, no graph) -----------------------------

std::vector<int32_t> hand_ids(const Vocab& v, const std::string& text, int64_t max_len) {
    std::vector<int32_t> ids{Vocab::kCls};
    for (const std::string& tok : metabridge::data::tokenize(text)) {
        ids.push_back(v.id_of(tok));
    }
    if (static_cast<int64_t>(ids.size()) > max_len) {
        ids.resize(static_cast<size_t>(max_len));
    }
    return ids;
}

// mu head applied by plain loops to the concatenated CLS pair.
std::vector<double> hand_mu(const ParamSet& p, const MetaConfig& cfg, const Vocab& v,
                            const ProductRecord& r) {
    const int64_t d = cfg.encoder.d_model;
    const Tensor hp = metabridge::enc::encode_sequence(
        p, cfg.encoder, hand_ids(v, r.profile, cfg.encoder.max_profile_len), "profile");
    const Tensor hv = metabridge::enc::encode_sequence(
        p, cfg.encoder, hand_ids(v, r.value, cfg.encoder.max_value_len), "value");
    std::vector<double> pair(static_cast<size_t>(2 * d));
    for (int64_t i = 0; i < d; ++i) {
        pair[static_cast<size_t>(i)] = hp[i];
        pair[static_cast<size_t>(d + i)] = hv[i];
    }
    const Tensor& w = p.at("enc/head/wmu");
    const Tensor& b = p.at("enc/head/bmu");
    std::vector<double> mu(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < 2 * d; ++i) acc += pair[static_cast<size_t>(i)] * w[i * d + j];
        mu[static_cast<size_t>(j)] = acc + b[j];
    }
    return mu;
}

std::array<double, 2> hand_probs(const ParamSet& p, const std::vector<double>& z) {
    const Tensor& w = p.at("dec/wo");
    const Tensor& b = p.at("dec/bo");
    const int64_t d = static_cast<int64_t>(z.size());
    std::array<double, 2> logits{};
    for (int64_t c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (int64_t i = 0; i < d; ++i) acc += z[static_cast<size_t>(i)] * w[i * 2 + c];
        logits[static_cast<size_t>(c)] = acc + b[c];
    }
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m);
    const double e1 = std::exp(logits[1] - m);
    return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

double hand_entropy(const std::array<double, 2>& p) {
    double h = 0.0;
    for (double x : p) h -= x * std::log(std::max(x, 1e-12));
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("uniform decoder output gives entropy ln 2") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 11);
    p.at("dec/wo") = Tensor::zeros({cfg.encoder.d_model, 2});
    p.at("dec/bo") = Tensor::zeros({2});
    const auto& support = f.pools.begin()->second;
    for (bool training : {false, true}) {
        const double loss = metabridge::meta::support_entropy_loss(p, support, cfg, f.vocab,
                                                                   training, 99);
        CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    }
}

TEST_CASE("saturated decoder output gives near-zero entropy") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 11);
    p.at("dec/wo") = Tensor::zeros({cfg.encoder.d_model, 2});
    const auto& support = f.pools.begin()->second;

    // Class distribution (1 - 1e-12, 1e-12).
    Tensor bias = Tensor::zeros({2});
    bias[0] = std::log(1e12);
    p.at("dec/bo") = bias;
    CHECK(metabridge::meta::support_entropy_loss(p, support, cfg, f.vocab, false, 0) <= 1e-10);

    // Fully saturated: the losing class underflows to exactly zero.
    bias[0] = 1500.0;
    bias[1] = -1500.0;
    p.at("dec/bo") = bias;
    CHECK(metabridge::meta::support_entropy_loss(p, support, cfg, f.vocab, false, 0) == 0.0);
}

TEST_CASE("support entropy equals record-by-record recomputation") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 3);
    std::vector<ProductRecord> support(f.pools.begin()->second.begin(),
                                       f.pools.begin()->second.begin() + 5);

    // Oracle A: by-hand value-level forward per record, then a plain mean.
    double by_hand = 0.0;
    for (const ProductRecord& r : support) {
        by_hand += hand_entropy(hand_probs(p, hand_mu(p, cfg, f.vocab, r)));
    }
    by_hand /= static_cast<double>(support.size());
    const double batch = metabridge::meta::support_entropy_loss(p, support, cfg, f.vocab,
                                                                /*training=*/false, 0);
    CHECK(batch == doctest::Approx(by_hand).epsilon(1e-12));

    // Oracle B: mean of singleton-batch evaluations (exact, via the padding
    // invariance of the encoder).
    double singleton_mean = 0.0;
    for (const ProductRecord& r : support) {
        singleton_mean += metabridge::meta::support_entropy_loss(p, {r}, cfg, f.vocab, false, 0);
    }
    singleton_mean /= static_cast<double>(support.size());
    CHECK(batch == doctest::Approx(singleton_mean).epsilon(1e-15));
}

TEST_CASE("adapt with zero step size or zero steps is the identity") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 5);
    const auto& support = f.pools.begin()->second;

    MetaConfig zero_beta = cfg;
    zero_beta.beta = 0.0;
    zero_beta.inner_steps = 2;
    AdaptedModel a = metabridge::meta::adapt(p, support, zero_beta, f.vocab, true, 42, "c", "b");
    CHECK(params_equal(a.params, p));
    CHECK(a.category_id == "c");
    CHECK(a.base_checkpoint_id == "b");
    CHECK(a.inner_steps == 2);

    MetaConfig zero_steps = cfg;
    zero_steps.inner_steps = 0;
    AdaptedModel b = metabridge::meta::adapt(p, {}, zero_steps, f.vocab, true, 42);
    CHECK(params_equal(b.params, p));
}

TEST_CASE("one adaptation step does not increase the support entropy at small step sizes") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 17);
    const auto& support = f.pools.begin()->second;
    const double before = metabridge::meta::support_entropy_loss(p, support, cfg, f.vocab,
                                                                 false, 0);
    for (double beta : {1e-3, 1e-4}) {
        MetaConfig c = cfg;
        c.beta = beta;
        c.inner_steps = 1;
        AdaptedModel a = metabridge::meta::adapt(p, support, c, f.vocab, /*training=*/false, 0);
        const double after = metabridge::meta::support_entropy_loss(a.params, support, c,
                                                                    f.vocab, false, 0);
        CHECK(after <= before + 1e-9);
    }
}

TEST_CASE("episode loss at lambda zero matches the independent plain-MAML path") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 0.0;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 23);
    int i = 0;
    for (const auto& [cat, pool] : f.pools) {
        if (++i > 3) break;
        Episode ep = f.episode(cat, 6, 4, 1000 + static_cast<uint64_t>(i));
        const EpisodeLoss general =
            metabridge::meta::episode_loss(p, ep, cfg, f.vocab, /*training=*/false, 7);
        const EpisodeLoss independent =
            metabridge::meta::maml_episode_loss(p, ep, cfg, f.vocab, false, 7);
        MetaConfig mcfg = cfg;
        mcfg.variant = VariantMode::kMaml;
        const EpisodeLoss variant =
            metabridge::meta::episode_loss(p, ep, mcfg, f.vocab, false, 7);
        CHECK(std::abs(general.total - independent.total) <= 1e-12);
        CHECK(variant.total == independent.total);
        CHECK(general.bridge == 0.0);
    }
}

TEST_CASE("identical support and query distributions zero the bridging term") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 1.0;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 29);
    Episode ep = f.episode(f.pools.begin()->first, 5, 5, 77);
    // Feed the query records to both halves (support labels stripped).
    ep.support.clear();
    for (ProductRecord r : ep.query) {
        r.label.reset();
        ep.support.push_back(std::move(r));
    }
    const EpisodeLoss l = metabridge::meta::episode_loss(p, ep, cfg, f.vocab,
                                                         /*training=*/false, 5);
    CHECK(l.bridge == 0.0);
    CHECK(l.total == l.inference);
}

TEST_CASE("episode loss is additive in lambda and continuous at zero") {
    const Fixture& f = fixture();
    ParamSet p;
    Episode ep = fixture().episode(fixture().pools.begin()->first, 6, 4, 301);
    MetaConfig cfg = micro_config();
    p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 31);

    cfg.lambda = 1.0;
    EpisodeLoss l1 = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 9);
    CHECK(l1.total == l1.inference + l1.bridge);

    cfg.lambda = 2.5;
    EpisodeLoss l25 = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 9);
    CHECK(l25.total == l25.inference + 2.5 * l25.bridge);
    CHECK(l25.inference == l1.inference);
    CHECK(l25.bridge == l1.bridge);

    cfg.lambda = 1e-9;
    EpisodeLoss leps = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 9);
    cfg.lambda = 0.0;
    EpisodeLoss l0 = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 9);
    CHECK(std::abs(leps.total - l0.total) <= 1e-9 * (1.0 + l1.bridge));
}

TEST_CASE("kl_fixed_variance bridging term is half the squared distance of pooled means") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.variant = VariantMode::kKlFixedVariance;
    cfg.lambda = 1.0;
    cfg.inner_steps = 0;  // oracle recomputes at the base parameters
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 37);
    Episode ep = f.episode(f.pools.begin()->first, 6, 4, 53);

    const EpisodeLoss l = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 0);

    const int64_t d = cfg.encoder.d_model;
    std::vector<double> qbar(static_cast<size_t>(d), 0.0);
    std::vector<double> sbar(static_cast<size_t>(d), 0.0);
    for (const ProductRecord& r : ep.query) {
        const std::vector<double> mu = hand_mu(p, cfg, f.vocab, r);
        for (int64_t j = 0; j < d; ++j) qbar[static_cast<size_t>(j)] += mu[static_cast<size_t>(j)];
    }
    for (const ProductRecord& r : ep.support) {
        const std::vector<double> mu = hand_mu(p, cfg, f.vocab, r);
        for (int64_t j = 0; j < d; ++j) sbar[static_cast<size_t>(j)] += mu[static_cast<size_t>(j)];
    }
    double half_sq = 0.0;
    Tensor qt = Tensor::zeros({1, d});
    Tensor st = Tensor::zeros({1, d});
    for (int64_t j = 0; j < d; ++j) {
        qbar[static_cast<size_t>(j)] /= static_cast<double>(ep.query.size());
        sbar[static_cast<size_t>(j)] /= static_cast<double>(ep.support.size());
        const double diff = qbar[static_cast<size_t>(j)] - sbar[static_cast<size_t>(j)];
        half_sq += 0.5 * diff * diff;
        qt[j] = qbar[static_cast<size_t>(j)];
        st[j] = sbar[static_cast<size_t>(j)];
    }
    CHECK(l.bridge == doctest::Approx(half_sq).epsilon(1e-9));

    // Cross-check against the general closed-form KL with log-sigma forced to 0.
    const double general_kl = metabridge::latent::kl_divergence(
        {qt, Tensor::zeros({1, d})}, {st, Tensor::zeros({1, d})});
    CHECK(l.bridge == doctest::Approx(general_kl).epsilon(1e-9));
    CHECK(l.total == l.inference + l.bridge);
}

TEST_CASE("second-order gradients follow the hand-derived chain rule on a toy bilevel problem") {
    // Inner loss a*w^2, one step of gradient descent with step size beta,
    // outer loss b*w'^2 at w' = w(1 - 2ab beta ... ) — hand derivation:
    //   w' = w - beta*2aw = w(1 - 2a beta)
    //   dL/dw (second order)  = 2b w' (1 - 2a beta)
    //   dL/dw (first order)   = 2b w'          (identity inner Jacobian)
    const double w0 = 1.7, a = 0.35, b = 1.2, beta = 0.25;
    metabridge::diff::Graph g;
    const auto w = g.leaf(Tensor::scalar(w0));
    const auto inner = g.scale(g.mul(w, w), a);
    const std::vector<metabridge::diff::ValueId> wrt{w};
    const auto ginner = g.backward(inner, wrt);
    REQUIRE(ginner[0] != metabridge::diff::kNoValue);
    const auto w_adapted = g.sub(w, g.scale(ginner[0], beta));
    const auto outer = g.scale(g.mul(w_adapted, w_adapted), b);
    const auto gouter = g.backward(outer, wrt);
    REQUIRE(gouter[0] != metabridge::diff::kNoValue);

    const double w_prime = w0 * (1.0 - 2.0 * a * beta);
    CHECK(g.val(w_adapted).item() == doctest::Approx(w_prime).epsilon(1e-14));
    CHECK(g.val(gouter[0]).item() ==
          doctest::Approx(2.0 * b * w_prime * (1.0 - 2.0 * a * beta)).epsilon(1e-12));

    // First order: the adapted value enters a fresh graph as a leaf.
    metabridge::diff::Graph g2;
    const auto w2 = g2.leaf(Tensor::scalar(w_prime));
    const auto outer2 = g2.scale(g2.mul(w2, w2), b);
    const auto gfirst = g2.backward(outer2, std::vector<metabridge::diff::ValueId>{w2});
    CHECK(g2.val(gfirst[0]).item() == doctest::Approx(2.0 * b * w_prime).epsilon(1e-12));
}

namespace {

double max_grad_gap(const GradMap& a, const GradMap& b) {
    double worst = 0.0;
    for (const auto& [name, ta] : a) {
        const Tensor& tb = b.at(name);
        for (int64_t i = 0; i < ta.size(); ++i) {
            worst = std::max(worst, std::abs(ta[i] - tb[i]));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("first- and second-order meta-gradients converge as the inner step size shrinks") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 1.0;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 41);
    Episode ep = f.episode(f.pools.begin()->first, 5, 3, 99);

    auto gap_at = [&](double beta) {
        MetaConfig c1 = cfg;
        c1.beta = beta;
        c1.order = GradOrder::kFirst;
        MetaConfig c2 = c1;
        c2.order = GradOrder::kSecond;
        const EpisodeGradient g1 = metabridge::meta::episode_gradient(p, ep, c1, f.vocab, 13);
        const EpisodeGradient g2 = metabridge::meta::episode_gradient(p, ep, c2, f.vocab, 13);
        CHECK(g1.loss.total == doctest::Approx(g2.loss.total).epsilon(1e-12));
        return max_grad_gap(g1.grads, g2.grads);
    };

    const double gap_large = gap_at(4e-3);
    const double c = gap_large / 4e-3;  // measured linear coefficient
    CHECK(gap_at(2e-3) <= 2.0 * c * 2e-3 + 1e-12);
    CHECK(gap_at(1e-3) <= 2.0 * c * 1e-3 + 1e-12);
}

TEST_CASE("second-order episode gradient matches finite differences of the bilevel objective") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 1.0;
    cfg.beta = 0.05;
    cfg.order = GradOrder::kSecond;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 43);
    Episode ep = f.episode(std::next(f.pools.begin())->first, 4, 3, 111);
    const uint64_t seed = 17;

    const EpisodeGradient eg = metabridge::meta::episode_gradient(p, ep, cfg, f.vocab, seed);
    CHECK(eg.loss.total ==
          metabridge::meta::episode_loss(p, ep, cfg, f.vocab, /*training=*/true, seed).total);

    Rng pick(2026);
    const std::vector<std::string> names{"enc/emb",  "enc/head/wmu",
                                         "enc/head/wsigma", "dec/wo",
                                         "enc/profile/l0/attn/wq", "enc/value/l0/ffn/w1"};
    for (const std::string& name : names) {
        REQUIRE(p.count(name) == 1);
        const int64_t idx = pick.uniform_int(p.at(name).size());
        const double h = 1e-5;
        ParamSet plus = p, minus = p;
        plus.at(name)[idx] += h;
        minus.at(name)[idx] -= h;
        const double fd = (metabridge::meta::episode_loss(plus, ep, cfg, f.vocab, true, seed).total -
                           metabridge::meta::episode_loss(minus, ep, cfg, f.vocab, true, seed).total) /
                          (2.0 * h);
        const double an = eg.grads.at(name)[idx];
        CAPTURE(name);
        CAPTURE(idx);
        CHECK(std::abs(fd - an) <= 1e-3 * std::max({1.0, std::abs(fd), std::abs(an)}));
    }
}

TEST_CASE("first-order episode gradient is the query gradient at the adapted parameters") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 1.0;
    cfg.beta = 0.05;
    cfg.order = GradOrder::kFirst;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 47);
    Episode ep = f.episode(f.pools.begin()->first, 4, 3, 121);
    const uint64_t seed = 19;

    const EpisodeGradient eg = metabridge::meta::episode_gradient(p, ep, cfg, f.vocab, seed);
    const ParamSet adapted =
        metabridge::meta::adapt(p, ep.support, cfg, f.vocab, /*training=*/true, seed).params;

    // The outer objective as a function of the ADAPTED parameters: the same
    // episode with zero inner steps (identical outer rng streams).
    MetaConfig outer_only = cfg;
    outer_only.inner_steps = 0;
    Rng pick(31);
    for (const std::string& name : std::vector<std::string>{"enc/emb", "dec/wo", "enc/head/bmu"}) {
        const int64_t idx = pick.uniform_int(p.at(name).size());
        const double h = 1e-5;
        ParamSet plus = adapted, minus = adapted;
        plus.at(name)[idx] += h;
        minus.at(name)[idx] -= h;
        const double fd =
            (metabridge::meta::episode_loss(plus, ep, outer_only, f.vocab, true, seed).total -
             metabridge::meta::episode_loss(minus, ep, outer_only, f.vocab, true, seed).total) /
            (2.0 * h);
        const double an = eg.grads.at(name)[idx];
        CAPTURE(name);
        CHECK(std::abs(fd - an) <= 1e-3 * std::max({1.0, std::abs(fd), std::abs(an)}));
    }
}

TEST_CASE("meta_step leaves parameters unchanged when all gradients vanish") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.lambda = 0.0;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 53);
    // Frozen decoder: probabilities saturate to exactly (1, 0) for every
    // record, and every query label is 0, so the loss plateau is exact.
    p.at("dec/wo") = Tensor::zeros({cfg.encoder.d_model, 2});
    Tensor bias = Tensor::zeros({2});
    bias[0] = 1500.0;
    bias[1] = -1500.0;
    p.at("dec/bo") = bias;

    Episode ep = f.episode(f.pools.begin()->first, 6, 4, 61);
    Episode all_correct = ep;
    all_correct.query.clear();
    for (const ProductRecord& r : f.pools.begin()->second) {
        if (r.label == 0) {
            all_correct.query.push_back(r);
            if (all_correct.query.size() == 3) break;
        }
    }
    REQUIRE(all_correct.query.size() == 3);

    std::vector<Episode> batch{all_correct};
    const auto out = metabridge::meta::meta_step(p, batch, cfg, f.vocab, {}, 71);
    CHECK(out.batch_loss == 0.0);
    CHECK(params_equal(out.params, p));
    CHECK(out.opt.step == 1);
}

TEST_CASE("duplicating an episode doubles its summed gradient contribution") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.variant = VariantMode::kMaml;   // no latent sampling
    cfg.encoder.dropout = 0.0;          // no dropout: slots become bit-identical
    cfg.alpha = 1e-3;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 59);
    Episode ep = f.episode(f.pools.begin()->first, 5, 3, 67);

    const uint64_t step_seed = 81;
    const EpisodeGradient slot0 = metabridge::meta::episode_gradient(
        p, ep, cfg, f.vocab, mix_seed(step_seed, rngtag::kEpisode, 0));
    const EpisodeGradient slot1 = metabridge::meta::episode_gradient(
        p, ep, cfg, f.vocab, mix_seed(step_seed, rngtag::kEpisode, 1));
    CHECK(max_grad_gap(slot0.grads, slot1.grads) == 0.0);

    GradMap doubled = slot0.grads;
    for (auto& [name, t] : doubled) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] += slot0.grads.at(name)[i];
    }
    const auto [manual_params, manual_state] = metabridge::diff::adam_step(p, doubled, {}, cfg.alpha);
    std::vector<Episode> batch{ep, ep};
    const auto stepped = metabridge::meta::meta_step(p, batch, cfg, f.vocab, {}, step_seed);
    CHECK(params_equal(stepped.params, manual_params));
    CHECK(stepped.batch_loss == doctest::Approx(slot0.loss.total).epsilon(1e-15));
}

TEST_CASE("meta_step is deterministic") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 61);
    std::vector<Episode> batch{f.episode(f.pools.begin()->first, 5, 3, 1),
                               f.episode(std::next(f.pools.begin())->first, 5, 3, 2)};
    const auto a = metabridge::meta::meta_step(p, batch, cfg, f.vocab, {}, 5);
    const auto b = metabridge::meta::meta_step(p, batch, cfg, f.vocab, {}, 5);
    CHECK(params_equal(a.params, b.params));
    CHECK(a.batch_loss == b.batch_loss);

    MetaConfig wide = cfg;
    wide.threads = 4;
    const auto c = metabridge::meta::meta_step(p, batch, wide, f.vocab, {}, 5);
    CHECK(params_equal(a.params, c.params));
    CHECK(a.batch_loss == c.batch_loss);
}

TEST_CASE("training is a pure function of config, data, and seed") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.alpha = 1e-3;
    cfg.epochs = 2;
    cfg.meta_batch = 2;
    cfg.n_support = 6;
    cfg.n_query = 3;
    cfg.seed = 97;

    metabridge::data::DatasetSplit split;
    int i = 0;
    for (const auto& [cat, pool] : f.pools) {
        if (i < 4) {
            split.train[cat] = pool;
        } else {
            split.val[cat] = pool;
        }
        ++i;
    }

    const auto run1 = metabridge::meta::train(cfg, split, f.vocab);
    const auto run2 = metabridge::meta::train(cfg, split, f.vocab);
    REQUIRE(run1.history.size() == 2);
    CHECK(params_equal(run1.final_params, run2.final_params));
    CHECK(params_equal(run1.best_params, run2.best_params));
    for (std::size_t e = 0; e < run1.history.size(); ++e) {
        CHECK(run1.history[e].train_loss == run2.history[e].train_loss);
        CHECK(run1.history[e].val_pr_auc == run2.history[e].val_pr_auc);
        CHECK(run1.history[e].is_best == run2.history[e].is_best);
    }
    CHECK(run1.best_epoch == run2.best_epoch);
    CHECK(run1.history[0].is_best);  // first epoch always seeds the best checkpoint
    for (const auto& rec : run1.history) {
        CHECK(std::isfinite(rec.train_loss));
        CHECK(rec.val_pr_auc >= 0.0);
        CHECK(rec.val_pr_auc <= 1.0);
    }

    // Support resampling stays deterministic.
    MetaConfig rcfg = cfg;
    rcfg.resample_support = true;
    const auto run3 = metabridge::meta::train(rcfg, split, f.vocab);
    const auto run4 = metabridge::meta::train(rcfg, split, f.vocab);
    CHECK(params_equal(run3.final_params, run4.final_params));
}

TEST_CASE("zero epochs returns the initialization") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.epochs = 0;
    cfg.n_support = 6;
    cfg.n_query = 3;
    cfg.seed = 101;
    metabridge::data::DatasetSplit split;
    split.train[f.pools.begin()->first] = f.pools.begin()->second;

    const auto out = metabridge::meta::train(cfg, split, f.vocab);
    const ParamSet init = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), cfg.seed);
    CHECK(params_equal(out.final_params, init));
    CHECK(params_equal(out.best_params, init));
    CHECK(out.history.empty());
    CHECK(out.best_epoch == -1);
}

TEST_CASE("predict is deterministic, in range, and support-blind at zero inner steps") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 103);
    Episode a = f.episode(f.pools.begin()->first, 6, 4, 201);
    Episode b = f.episode(std::next(f.pools.begin())->first, 6, 4, 202);

    const auto s1 = metabridge::meta::predict(p, a.support, a.query, cfg, f.vocab);
    const auto s2 = metabridge::meta::predict(p, a.support, a.query, cfg, f.vocab);
    REQUIRE(s1.size() == a.query.size());
    CHECK(s1 == s2);
    for (double s : s1) {
        CHECK(s > 0.0);
        CHECK(s < 1.0);
    }

    MetaConfig frozen = cfg;
    frozen.inner_steps = 0;
    const auto ya = metabridge::meta::predict(p, a.support, b.query, frozen, f.vocab);
    const auto yb = metabridge::meta::predict(p, b.support, b.query, frozen, f.vocab);
    CHECK(ya == yb);
}

TEST_CASE("repeated meta_steps on a fixed episode descend without divergence") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    cfg.alpha = 2e-3;
    cfg.beta = 0.1;
    cfg.lambda = 1.0;
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 107);
    Episode ep = f.episode(f.pools.begin()->first, 6, 4, 301);
    std::vector<Episode> batch{ep};

    const uint64_t step_seed = 555;
    const uint64_t loss_seed = mix_seed(step_seed, rngtag::kEpisode, 0);
    const double initial =
        metabridge::meta::episode_loss(p, ep, cfg, f.vocab, /*training=*/true, loss_seed).total;
    metabridge::diff::AdamState opt;
    double last = initial;
    for (int step = 0; step < 50; ++step) {
        auto out = metabridge::meta::meta_step(p, batch, cfg, f.vocab, opt, step_seed);
        p = std::move(out.params);
        opt = std::move(out.opt);
        last = metabridge::meta::episode_loss(p, ep, cfg, f.vocab, true, loss_seed).total;
        CHECK(last <= 10.0 * initial + 1e-9);
    }
    CHECK(last < initial);
}

TEST_CASE("unlabeled query records are rejected") {
    const Fixture& f = fixture();
    MetaConfig cfg = micro_config();
    ParamSet p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 109);
    Episode ep = f.episode(f.pools.begin()->first, 5, 3, 401);
    ep.query[1].label.reset();
    CHECK_THROWS_AS(metabridge::meta::episode_loss(p, ep, cfg, f.vocab, false, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(metabridge::meta::episode_gradient(p, ep, cfg, f.vocab, 0),
                    std::invalid_argument);
}

TEST_CASE("variant and order names round-trip") {
    using metabridge::meta::parse_grad_order;
    using metabridge::meta::parse_variant;
    for (const char* name : {"full", "maml", "stochastic_maml", "kl_fixed_variance"}) {
        CHECK(metabridge::meta::to_string(parse_variant(name)) == name);
    }
    for (const char* name : {"first", "second"}) {
        CHECK(metabridge::meta::to_string(parse_grad_order(name)) == name);
    }
    CHECK_THROWS_AS(parse_variant("fulll"), std::invalid_argument);
    CHECK_THROWS_AS(parse_grad_order("third"), std::invalid_argument);
}

TEST_CASE("stochastic variants still produce finite losses and gradients") {
    const Fixture& f = fixture();
    ParamSet p;
    Episode ep = fixture().episode(fixture().pools.begin()->first, 5, 3, 501);
    for (VariantMode mode : {VariantMode::kFull, VariantMode::kStochasticMaml,
                             VariantMode::kKlFixedVariance, VariantMode::kMaml}) {
        MetaConfig cfg = micro_config();
        cfg.variant = mode;
        if (p.empty()) p = metabridge::enc::init_params(cfg.encoder, f.vocab.size(), 113);
        const EpisodeGradient eg = metabridge::meta::episode_gradient(p, ep, cfg, f.vocab, 23);
        CHECK(std::isfinite(eg.loss.total));
        CHECK(std::isfinite(eg.loss.inference));
        CHECK(std::isfinite(eg.loss.bridge));
        if (mode == VariantMode::kMaml || mode == VariantMode::kStochasticMaml) {
            CHECK(eg.loss.bridge == 0.0);
            CHECK(eg.loss.total == eg.loss.inference);
        }
        double norm = 0.0;
        for (const auto& [name, t] : eg.grads) {
            for (int64_t i = 0; i < t.size(); ++i) norm += t[i] * t[i];
        }
        CHECK(std::isfinite(norm));
        CHECK(norm > 0.0);
    }
}
