#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sflow/data.hpp"
#include "sflow/model.hpp"

namespace sflow {

struct SampleRequest {
    std::vector<std::pair<Image, std::vector<int>>> conditions;  // any count
    std::vector<int> prompt;  // unpadded; padded to the model budget internally
    PromptSpanTable spans;
    int steps = 20;
    uint64_t seed = 0;
    bool static_routing = true;
    bool dynamic_routing = true;
    bool per_head_affinity = false;
    bool audit = false;
    int trace_stride = 0;  // 0 = no trace; k = record every k-th step
};

struct TraceEntry {
    int step_index = 0;
    float t = 0.0f;
    int layer = 0;
    AffinityMatrix affinity;
    RoutingAssignment assignment;
};

struct AffinityTrace {
    SequenceLayout layout;
    int grid = 0;
    int recorded_steps = 0;
    std::vector<TraceEntry> entries;

    bool empty() const { return entries.empty(); }
};

struct SampleResult {
    Image image;  // pixel values clamped to [0, 1]
    AffinityTrace trace;
};

/// Deterministic Euler integration of the learned velocity field from t = 1
/// down to t = 0, starting from seeded unit-Gaussian noise.
SampleResult run_sample(const Model& model, const SampleRequest& request);

/// One PGM heatmap per (recorded step, layer, condition) where pixel (y, x)
/// holds 255 * affinity of the noise token at that grid cell, plus trace.json
/// with the assignments. Empty traces rejected.
void export_trace(const AffinityTrace& trace, const std::string& dir);

}  // namespace sflow
