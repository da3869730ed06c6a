#pragma once

#include <vector>

#include "sapo/common.hpp"
#include "sapo/envs.hpp"
#include "sapo/policy.hpp"

namespace sapo {

// Value features = the policy's hashed window features plus one real-valued
// normalized-position feature generated_len / max_len. max_len is part of the
// feature definition so predictions are well-defined for lone states.
struct ValueFeatureSpec {
    FeatureSpec base;
    int max_len = 1;
};

// Linear value head; weights has base.dim entries plus one position weight.
struct ValueParams {
    std::vector<double> weights;
    ValueFeatureSpec feature_spec;
};

ValueParams make_value(const ValueFeatureSpec& spec);

double value_predict(const ValueParams& params, const EpisodeState& state);

struct ValueLossResult {
    double loss = 0.0;
    std::vector<double> grad;
};

// Mean squared error over the supplied boundary states only:
// loss = (1/M) sum_m (V(s_m) - R_m)^2, with its exact gradient. States not in
// the list contribute nothing.
ValueLossResult value_loss_and_grad(const ValueParams& params,
                                    const std::vector<EpisodeState>& boundary_states,
                                    const std::vector<double>& returns);

}  // namespace sapo
