#include <doctest.h>

#include <cmath>
#include <map>

#include "sapo/envs.hpp"
#include "sapo/policy.hpp"

using namespace sapo;

namespace {

EpisodeState state_with(std::vector<TokenId> prompt, std::vector<TokenId> generated) {
    EpisodeState s;
    s.prompt = std::move(prompt);
    s.generated = std::move(generated);
    return s;
}

EnvSpec tiny_tree_spec() {
    EnvSpec spec;
    spec.kind = "tiny-tree";
    spec.vocab_size = 2;
    spec.max_len = 3;
    return spec;
}

PolicyParams random_policy(const FeatureSpec& fs, int vocab, uint64_t seed, double scale = 0.5) {
    PolicyParams p = make_policy(fs, vocab);
    Rng rng(seed);
    for (double& w : p.weights) w = scale * rng.next_gaussian();
    return p;
}

}  // namespace

TEST_CASE("zero weights give the uniform distribution") {
    PolicyParams p = make_policy({2, 64}, 4);
    EpisodeState s = state_with({0, 1}, {2});
    TokenDistribution dist = policy_logits(p, s);
    for (double lp : dist.logprobs) {
        CHECK(lp == doctest::Approx(-std::log(4.0)).epsilon(1e-12));
    }
    CHECK(dist.entropy() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK(token_logprob(p, s, 1) == doctest::Approx(-1.386294).epsilon(1e-6));
}

TEST_CASE("logprobs are shift invariant and normalized") {
    FeatureSpec fs{2, 128};
    PolicyParams p = random_policy(fs, 5, 42);
    EpisodeState s = state_with({1, 3}, {0, 4});

    TokenDistribution before = policy_logits(p, s);
    double total = 0.0;
    for (double lp : before.logprobs) total += std::exp(lp);
    CHECK(std::abs(total - 1.0) <= 1e-12);

    // add a constant to every logit via one active feature row
    std::vector<int> feats;
    active_features(fs, s, feats);
    PolicyParams shifted = p;
    for (int v = 0; v < 5; ++v) shifted.weights[static_cast<size_t>(feats[0]) * 5 + v] += 3.7;
    TokenDistribution after = policy_logits(shifted, s);
    for (int v = 0; v < 5; ++v) {
        CHECK(after.logprobs[v] == doctest::Approx(before.logprobs[v]).epsilon(1e-12));
    }
}

TEST_CASE("analytic logprob gradient matches central finite differences") {
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        FeatureSpec fs{2, 32};
        const int vocab = 3 + static_cast<int>(rng.next_below(4));
        PolicyParams p = random_policy(fs, vocab, rng.next_u64());
        std::vector<TokenId> gen;
        const int len = static_cast<int>(rng.next_below(4));
        for (int i = 0; i < len; ++i) gen.push_back(static_cast<TokenId>(rng.next_below(vocab)));
        EpisodeState s = state_with({static_cast<TokenId>(rng.next_below(vocab))}, gen);
        TokenId token = static_cast<TokenId>(rng.next_below(vocab));

        auto [lp, grad] = token_logprob_and_grad(p, s, token);
        CHECK(std::isfinite(lp));

        const double h = 1e-6;
        // probe every weight touched by an active feature plus a few untouched ones
        std::vector<int> feats;
        active_features(fs, s, feats);
        for (int f : feats) {
            for (int v = 0; v < vocab; ++v) {
                const size_t i = static_cast<size_t>(f) * vocab + v;
                PolicyParams pp = p;
                pp.weights[i] += h;
                double fp = token_logprob(pp, s, token);
                pp.weights[i] -= 2 * h;
                double fm = token_logprob(pp, s, token);
                double numeric = (fp - fm) / (2 * h);
                double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-8});
                worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
            }
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("expected score is the zero vector") {
    FeatureSpec fs{2, 64};
    PolicyParams p = random_policy(fs, 4, 99);
    EpisodeState s = state_with({2, 1}, {3});
    std::vector<double> acc(p.weights.size(), 0.0);
    TokenDistribution dist = policy_logits(p, s);
    for (TokenId v = 0; v < 4; ++v) {
        auto [lp, grad] = token_logprob_and_grad(p, s, v);
        const double prob = std::exp(dist.logprobs[v]);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += prob * grad[i];
    }
    for (double g : acc) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("token_entropy covers uniform, one-hot, and a hand-computed case") {
    PolicyParams uniform = make_policy({2, 64}, 4);
    EpisodeState s = state_with({0}, {});
    CHECK(token_entropy(uniform, s) == doctest::Approx(1.386294).epsilon(1e-6));

    TokenDistribution one_hot;
    one_hot.logits = {200.0, 0.0};
    one_hot.logprobs = {0.0, -200.0};
    CHECK(one_hot.entropy() == doctest::Approx(0.0).epsilon(1e-9));

    // probabilities (0.75, 0.25): direct -sum p ln p evaluation
    TokenDistribution skew;
    skew.logits = {std::log(3.0), 0.0};
    const double lse = std::log(std::exp(skew.logits[0]) + 1.0);
    skew.logprobs = {skew.logits[0] - lse, -lse};
    const double oracle = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
    CHECK(skew.entropy() == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(skew.entropy() == doctest::Approx(0.562335).epsilon(1e-6));
}

TEST_CASE("sampling is deterministic per seed") {
    Env env = make_env(tiny_tree_spec(), 4);
    PolicyParams p = random_policy({2, 64}, 2, 5);
    Rng r1(123), r2(123);
    Trajectory a = sample_trajectory(env, p, r1);
    Trajectory b = sample_trajectory(env, p, r2);
    CHECK(a.tokens == b.tokens);
    CHECK(a.old_logprobs == b.old_logprobs);  // bitwise
    CHECK(a.entropies == b.entropies);
    CHECK(a.reward == b.reward);
}

TEST_CASE("a near-deterministic policy samples the argmax path") {
    Env env = make_env(tiny_tree_spec(), 4);
    PolicyParams p = make_policy({2, 64}, 2);
    // push every state toward token 1
    for (int f = 0; f < 64; ++f) p.weights[static_cast<size_t>(f) * 2 + 1] = 60.0;
    Rng rng(0);
    Trajectory traj = sample_trajectory(env, p, rng);
    CHECK(traj.tokens == std::vector<TokenId>{1, 1, 1});
    double total_lp = 0.0;
    for (double lp : traj.old_logprobs) total_lp += lp;
    CHECK(std::abs(total_lp) <= 1e-9);
    for (double h : traj.entropies) CHECK(h <= 1e-9);
}

TEST_CASE("uniform sampling frequencies match enumeration probabilities") {
    Env env = make_env(tiny_tree_spec(), 8);
    PolicyParams uniform = make_policy({2, 32}, 2);

    std::map<std::vector<TokenId>, int> counts;
    const int samples = 10000;
    for (int i = 0; i < samples; ++i) {
        Rng rng = Rng::substream(99, 0, static_cast<uint64_t>(i));
        counts[sample_trajectory(env, uniform, rng).tokens]++;
    }
    auto rows = enumerate_trajectories(env, policy_distribution(uniform), 3);
    REQUIRE(rows.size() == 8);
    for (const auto& [traj, prob] : rows) {
        const double freq = static_cast<double>(counts[traj.tokens]) / samples;
        CHECK(std::abs(freq - prob) <= 0.02);
    }
}

TEST_CASE("recorded entropies stay inside [0, ln vocab]") {
    EnvSpec spec;
    spec.kind = "chain-arith";
    spec.vocab_size = 13;
    spec.max_len = 5;
    spec.task_params = {{"n", 5}, {"modulus", 10}};
    Env env = make_env(spec, 2);
    const double cap = std::log(13.0);
    for (uint64_t i = 0; i < 50; ++i) {
        PolicyParams p = random_policy({2, 128}, 13, i, 2.0);
        Rng rng = Rng::substream(3, i, 0);
        Trajectory traj = sample_trajectory(env, p, rng);
        for (double h : traj.entropies) {
            CHECK(h >= 0.0);
            CHECK(h <= cap + 1e-12);
        }
        for (double lp : traj.old_logprobs) CHECK(lp <= 0.0);
    }
}
