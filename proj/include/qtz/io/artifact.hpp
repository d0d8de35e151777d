#pragma once

#include <map>
#include <optional>
#include <string>

#include "qtz/graph/graph.hpp"
#include "qtz/runtime/qmodel.hpp"
#include "qtz/train/state.hpp"
#include "qtz/train/trainer.hpp"

namespace qtz {

// Model artifacts are a JSON manifest (graph definition, tensor table,
// quantizer parameters, format version "qtz-v1") plus a raw little-endian
// blob file with 64-byte aligned sections. Float models/checkpoints use the
// .qtzg extension, integer models .qtzm; the blob sits next to the manifest
// as <path>.bin.

struct TrainingExtras {
    std::int64_t step = 0;
    bool bn_frozen = false;
    std::map<std::string, CalibrationStats> act_stats;
    std::map<std::string, Tensor> ema;
};

void save_float_model(const std::string& path, const Graph& g,
                      const TrainingExtras* extras = nullptr);

struct LoadedModel {
    Graph graph;
    std::optional<TrainingExtras> extras;
};
LoadedModel load_float_model(const std::string& path);

void save_quantized_model(const std::string& path, const QuantizedModel& qm);
QuantizedModel load_quantized_model(const std::string& path);

// "float", "quantized" or "weights-only" (reads the manifest's kind field).
std::string artifact_kind(const std::string& path);

void save_ranges_json(const std::string& path, const std::map<std::string, RangeSpec>& ranges);
std::map<std::string, RangeSpec> load_ranges_json(const std::string& path);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// byte size of the weight payload sections (u8/i8 codes or f32 weights) and of
// the whole artifact (manifest + blob); used for the size-reduction report
struct ArtifactSizes {
    std::uint64_t weight_payload = 0;
    std::uint64_t total = 0;
};
ArtifactSizes artifact_sizes(const std::string& path);

}  // namespace qtz
