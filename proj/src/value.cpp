#include "sapo/value.hpp"

namespace sapo {

ValueParams make_value(const ValueFeatureSpec& spec) {
    if (spec.base.window < 1 || spec.base.dim < 1) throw ConfigError("feature spec must be positive");
    if (spec.max_len < 1) throw ConfigError("max_len must be >= 1");
    ValueParams p;
    p.feature_spec = spec;
    p.weights.assign(static_cast<size_t>(spec.base.dim) + 1, 0.0);
    return p;
}

double value_predict(const ValueParams& params, const EpisodeState& state) {
    std::vector<int> feats;
    active_features(params.feature_spec.base, state, feats);
    double v = 0.0;
    for (int f : feats) v += params.weights[f];
    double pos = static_cast<double>(state.generated.size()) / params.feature_spec.max_len;
    v += params.weights.back() * pos;
    return v;
}

ValueLossResult value_loss_and_grad(const ValueParams& params,
                                    const std::vector<EpisodeState>& boundary_states,
                                    const std::vector<double>& returns) {
    if (boundary_states.empty()) throw ContractError("value loss needs at least one boundary state");
    if (boundary_states.size() != returns.size()) {
        throw ContractError("boundary_states and returns length mismatch");
    }
    const size_t M = boundary_states.size();
    ValueLossResult res;
    res.grad.assign(params.weights.size(), 0.0);

    std::vector<int> feats;
    for (size_t m = 0; m < M; ++m) {
        const EpisodeState& s = boundary_states[m];
        double pred = value_predict(params, s);
        double err = pred - returns[m];
        res.loss += err * err;

        double coeff = 2.0 * err / static_cast<double>(M);
        active_features(params.feature_spec.base, s, feats);
        for (int f : feats) res.grad[f] += coeff;
        double pos = static_cast<double>(s.generated.size()) / params.feature_spec.max_len;
        res.grad.back() += coeff * pos;
    }
    res.loss /= static_cast<double>(M);
    return res;
}

}  // namespace sapo
