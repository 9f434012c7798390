#pragma once

#include <string>
#include <vector>

#include "sflow/layout.hpp"
#include "sflow/rng.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

enum class LoraGate { None, Subject, Image };

/// Which LoRA pathway a token row activates. Prompt rows keep the frozen base
/// projection untouched.
LoraGate lora_gate(const SegmentKind& kind);

/// One low-rank adapter: delta(x) = (alpha / rank) * (x * down) * up.
/// up starts at zero so the initial delta vanishes.
struct LoraBranch {
    int rank = 0;
    float alpha = 0.0f;
    Tensor down;  // d_in x rank
    Tensor up;    // rank x d_out

    static LoraBranch init(int d_in, int d_out, int rank, Rng& rng);
    int64_t parameter_count() const { return down.size() + up.size(); }
};

/// Adapter pair for one projection site. The subject branch rank must exceed
/// the image branch rank.
struct LoraSite {
    std::string name;
    int d_in = 0;
    int d_out = 0;
    LoraBranch subject;
    LoraBranch image;
};

enum class LoraPolicy {
    DualBranch,     // segment-gated subject/image pathways, prompt frozen
    SingleUniform,  // ablation: one adapter applied to every row
};

struct GatedLoraSet {
    LoraPolicy policy = LoraPolicy::DualBranch;
    std::vector<LoraSite> sites;

    LoraSite& add_site(const std::string& name, int d_in, int d_out, int subject_rank,
                       int image_rank, Rng& rng);

    /// Deep copy with fresh storage for every branch tensor (worker replicas).
    GatedLoraSet clone() const;
    /// Copies branch values from another structurally identical set.
    void copy_values_from(const GatedLoraSet& other);
};

/// Row-gated projection: base * x per row plus the delta of the branch the
/// row's segment activates. Rows gated None are bit-identical to the base
/// projection output.
Tensor gated_project(Graph& g, const Tensor& x, const std::vector<SegmentKind>& labels,
                     const Tensor& base_w, const LoraSite& site, LoraPolicy policy);

/// Only branch matrices; base weights are never trainable.
std::vector<Tensor> trainable_parameters(GatedLoraSet& set);

}  // namespace sflow
