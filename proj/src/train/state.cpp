#include "qtz/train/state.hpp"

#include <algorithm>

#include "qtz/common.hpp"

namespace qtz {

void update_activation_ranges(CalibrationStats& stats, const Tensor& t) {
    if (t.numel() == 0) throw NoData("update_activation_ranges: empty tensor");
    double lo = t[0], hi = t[0];
    for (std::int64_t i = 1; i < t.numel(); ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
    }
    stats.update(lo, hi);
}

void ema_update(std::map<std::string, Tensor>& ema, const std::map<std::string, Tensor>& params,
                const std::vector<std::string>& names, double decay) {
    for (const std::string& name : names) {
        const Tensor& p = params.at(name);
        auto it = ema.find(name);
        if (it == ema.end()) {
            ema[name] = p;
            continue;
        }
        Tensor& e = it->second;
        for (std::int64_t i = 0; i < p.numel(); ++i) e[i] = decay * e[i] + (1.0 - decay) * p[i];
    }
}

}  // namespace qtz
