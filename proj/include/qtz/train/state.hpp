#pragma once

#include <map>
#include <string>
#include <vector>

#include "qtz/quant/params.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

// Per-tensor moving min/max used for activation range estimation. The first
// observation initializes directly; later ones blend with momentum m:
// moving <- m*moving + (1-m)*batch. Ranges are zero-relaxed at use.
struct CalibrationStats {
    double moving_min = 0.0;
    double moving_max = 0.0;
    double momentum = 0.99;
    std::int64_t sample_count = 0;

    void update(double batch_min, double batch_max) {
        if (sample_count == 0) {
            moving_min = batch_min;
            moving_max = batch_max;
        } else {
            moving_min = momentum * moving_min + (1.0 - momentum) * batch_min;
            moving_max = momentum * moving_max + (1.0 - momentum) * batch_max;
        }
        ++sample_count;
    }

    RangeSpec range() const { return relax_range({moving_min, moving_max}); }
};

// Observe a tensor's min/max into the stats (update_activation_ranges).
void update_activation_ranges(CalibrationStats& stats, const Tensor& t);

// EMA of a parameter set: ema <- decay*ema + (1-decay)*current.
void ema_update(std::map<std::string, Tensor>& ema, const std::map<std::string, Tensor>& params,
                const std::vector<std::string>& names, double decay);

}  // namespace qtz
