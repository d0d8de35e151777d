#pragma once

#include <cstdint>
#include <limits>

#include "qtz/graph/rewrites.hpp"

namespace qtz {

// Training-loop configuration. quant_delay gates the onset of simulated
// quantization; freeze_bn_delay switches batch norm (and activation-range
// tracking) from batch statistics to the frozen long-term averages.
struct TrainConfig {
    double learning_rate = 0.01;
    std::int64_t total_steps = 1000;
    std::int64_t batch_size = 32;
    std::int64_t quant_delay = 0;
    std::int64_t freeze_bn_delay = std::numeric_limits<std::int64_t>::max();
    double ema_decay = 0.999;
    bool ema_enabled = true;
    bool stochastic_weights = false;

    Scheme weight_scheme = Scheme::SymmetricSigned;
    bool weight_narrow = false;
    bool weight_per_channel = true;
    int weight_bits = 8;
    int act_bits = 8;

    std::uint64_t rng_seed = 1;
    double bn_momentum = 0.9;
    double act_momentum = 0.99;

    // Jitter experiment: fold with batch statistics instead of the corrected
    // scheme (the baseline the correction is measured against).
    bool naive_bn_fold = false;

    std::int64_t eval_every = 0;    // 0: only final
    std::int64_t eval_samples = 0;  // 0: whole eval set

    void validate() const {
        if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (quant_delay < 0) throw ConfigError("quant_delay must be >= 0");
        if (freeze_bn_delay < quant_delay)
            throw ConfigError("freeze_bn_delay must be >= quant_delay");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0,1)");
        if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
            throw ConfigError("bn_momentum must be in (0,1]");
        if (!(act_momentum > 0.0 && act_momentum < 1.0))
            throw ConfigError("act_momentum must be in (0,1)");
        if (weight_bits != 4 && weight_bits != 8) throw ConfigError("weight_bits must be 4 or 8");
        if (act_bits != 4 && act_bits != 8) throw ConfigError("act_bits must be 4 or 8");
    }

    QuantConfig quant_config() const {
        QuantConfig q;
        q.weight_scheme = weight_scheme;
        q.weight_narrow = weight_narrow;
        q.weight_per_channel = weight_per_channel;
        q.weight_bits = weight_bits;
        q.act_bits = act_bits;
        return q;
    }
};

}  // namespace qtz
