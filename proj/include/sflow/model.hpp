#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sflow/image.hpp"
#include "sflow/layout.hpp"
#include "sflow/lora.hpp"
#include "sflow/routing.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

struct ModelConfig {
    int d = 64;
    int heads = 4;
    int layers = 4;
    int patch = 4;
    int image_edge = 32;
    int cond_edge = 16;
    int vocab = 33;
    int max_m = 16;    // prompt token budget
    int m_prime = 4;   // condition-text token budget
    int ffn_mult = 4;
    int subject_rank = 8;
    int image_rank = 2;

    int patch_dim() const { return patch * patch * 3; }
    int grid() const { return image_edge / patch; }
    int cond_grid() const { return cond_edge / patch; }
    int n() const { return grid() * grid(); }
    int n_prime() const { return cond_grid() * cond_grid(); }
    int head_dim() const { return d / heads; }

    SequenceLayout layout_for(int c) const {
        return build_layout(c, n_prime(), m_prime, max_m, n());
    }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
    Tensor mod_w, mod_b;  // t embedding -> (shift1, scale1, gate1, shift2, scale2, gate2)
};

struct ModelParams {
    Tensor token_emb;
    Tensor patch_w, patch_b;
    Tensor time_w1, time_b1, time_w2, time_b2;
    std::vector<BlockParams> blocks;
    Tensor final_mod_w, final_mod_b;  // t embedding -> (shift, scale)
    Tensor head_w, head_b;

    /// Stable manifest order used by checkpoints and the frozen-base audit.
    std::vector<std::pair<std::string, Tensor>> named() const;
};

struct Model {
    ModelConfig config;
    ModelParams params;
    GatedLoraSet lora;

    static Model init(const ModelConfig& config, uint64_t seed);
    /// Shares frozen base storage, deep-copies LoRA branches.
    Model worker_clone() const;
    void set_base_trainable(bool trainable);
};

/// Deterministic map from diffusion time to a d-vector (sinusoidal features
/// through a 2-layer projection).
struct TimestepEmbedding {
    float t = 0.0f;
    Tensor embedding;  // 1 x d
};
TimestepEmbedding timestep_embedding(Graph& g, const Model& model, float t);

// ---- patch handling ----

/// Image -> (H/patch)*(W/patch) rows of patch*patch*3 raw values.
Tensor patchify_raw(const Image& img, int patch);
/// Inverse of patchify_raw for a square grid of tokens.
Image unpatchify_raw(const Tensor& tokens, int patch, int edge);

// ---- positions ----

/// 2-D position of a sequence index: noise tokens on the target grid,
/// condition-k image tokens shifted right by (k+1)*image_edge, text tokens on
/// sequential out-of-grid rows.
std::pair<float, float> token_position(const SequenceLayout& layout,
                                       const ModelConfig& config, int index);
/// L x d constant feature tensor, half the channels for each axis.
Tensor position_features(const SequenceLayout& layout, const ModelConfig& config);

// ---- attention blocks ----

struct RoutingOptions {
    bool static_routing = true;
    bool dynamic_routing = true;
    bool per_head_affinity = false;
    bool audit = false;
    /// When set, layer k uses the given assignment instead of recomputing it.
    /// Pins the piecewise-smooth branch for probing (finite differences).
    const std::vector<RoutingAssignment>* frozen_assignments = nullptr;
};

struct AffinityRecord {
    int layer = 0;
    AffinityMatrix affinity;
    RoutingAssignment assignment;
};

struct BlockContext {
    ModelConfig config;
    SequenceLayout layout;
    PromptSpanTable spans;
    const std::vector<SegmentKind>* labels = nullptr;
    const FlowMask* static_mask = nullptr;  // null = fully open
    RoutingOptions opts;
    std::vector<AffinityRecord>* trace = nullptr;
    int layer_index = 0;
};

/// One pre-norm block: adaptive modulation, multi-head masked attention with
/// per-layer dynamic routing, gated feed-forward, residuals.
Tensor mma_block(Graph& g, const Tensor& x, const BlockParams& bp, const LoraSite* sites,
                 LoraPolicy policy, const Tensor& t_emb, BlockContext& ctx);

// ---- full forward ----

struct ModelInputs {
    std::vector<Image> cond_images;
    std::vector<std::vector<int>> cond_text;
    std::vector<int> prompt;  // padded to max_m
    PromptSpanTable spans;
    Image noisy;
    float t = 0.0f;

    int conditions() const { return static_cast<int>(cond_images.size()); }
};

/// Predicted velocity over noise tokens, n x patch_dim, graph-connected.
Tensor forward_velocity(Graph& g, const Model& model, const ModelInputs& inputs,
                        const RoutingOptions& opts,
                        std::vector<AffinityRecord>* trace = nullptr);

/// Values-only unpatchify of a velocity token tensor.
Image velocity_image(const Tensor& velocity_tokens, const ModelConfig& config);

}  // namespace sflow
