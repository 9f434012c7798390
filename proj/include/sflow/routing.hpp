#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "sflow/layout.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

/// L x L attention flow matrix in boolean form; true blocks a token pair.
/// Converts to the additive form (0 / kBlocked) consumed by softmax_masked.
struct FlowMask {
    SequenceLayout layout;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> blocked;

    static FlowMask open(const SequenceLayout& layout);

    Tensor to_additive() const;
    int64_t blocked_count() const;
    bool is_blocked(int i, int j) const { return blocked(i, j); }
};

/// Noise-token x condition affinity scores, entries in [0, 1].
struct AffinityMatrix {
    Mat values;  // n x c

    int tokens() const { return static_cast<int>(values.rows()); }
    int conditions() const { return static_cast<int>(values.cols()); }
};

/// Chosen condition per noise token (background tokens included).
struct RoutingAssignment {
    std::vector<int> chosen;  // length n, each in [0, c)
};

/// Fixed mask decoupling the prompt from all condition tokens and isolating
/// condition blocks from each other, both directions. Everything else,
/// including noise <-> condition flow, stays open.
FlowMask build_static_mask(const SequenceLayout& layout);

/// Row-softmax(Q K^T / sqrt(d)) between noise-token queries and prompt-token
/// keys. Plain values, no gradient participation. m = 0 rejected.
Mat compute_similarity(const Mat& q_noise, const Mat& k_prompt, int d);

/// Span-averaged similarity: affinity(i, k) = mean of S(i, p_k .. p_k+l_k).
AffinityMatrix compute_affinity(const Mat& similarity, const PromptSpanTable& spans,
                                int conditions);

/// Argmax over conditions per noise token; ties break toward the smallest
/// condition index.
RoutingAssignment route(const AffinityMatrix& affinity);

/// Per-step mask: noise row i blocks condition column j iff
/// floor(j / l_prime) differs from the assigned condition. One-directional;
/// condition -> noise stays open.
FlowMask build_dynamic_mask(const RoutingAssignment& assignment,
                            const SequenceLayout& layout);

/// Elementwise union of blocking constraints. Layout mismatch rejected.
FlowMask combine(const FlowMask& a, const FlowMask& b);

/// For each noise row, the number of unblocked condition columns and whether
/// they all fall inside one condition block. Used by the step audit.
struct NoiseRowAudit {
    int open_condition_columns = 0;
    bool single_block = true;
};
std::vector<NoiseRowAudit> audit_noise_rows(const FlowMask& mask);

// Inspection exports.
void write_mask_pgm(const FlowMask& mask, const std::string& path);
void write_affinity_pgm(const AffinityMatrix& affinity, int condition, int grid_edge,
                        const std::string& path);
std::string affinity_to_json(const AffinityMatrix& affinity);

}  // namespace sflow
