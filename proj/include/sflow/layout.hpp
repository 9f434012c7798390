#pragma once

#include <vector>

namespace sflow {

/// Index bookkeeping for the composite token sequence
///   [cond image 0; cond text 0; ...; cond image c-1; cond text c-1; prompt; noise].
/// All per-condition sizes are uniform.
struct SequenceLayout {
    int c = 0;        // condition count
    int n_prime = 0;  // condition-image tokens per condition
    int m_prime = 0;  // condition-text tokens per condition
    int m = 0;        // prompt tokens
    int n = 0;        // noise tokens

    int l_prime() const { return m_prime + n_prime; }
    int l() const { return m + n; }
    int total() const { return c * l_prime() + l(); }

    int cond_begin(int k) const { return k * l_prime(); }
    int cond_image_begin(int k) const { return cond_begin(k); }
    int cond_text_begin(int k) const { return cond_begin(k) + n_prime; }
    int prompt_begin() const { return c * l_prime(); }
    int noise_begin() const { return prompt_begin() + m; }

    bool operator==(const SequenceLayout&) const = default;
};

SequenceLayout build_layout(int c, int n_prime, int m_prime, int m, int n);

struct SegmentKind {
    enum Kind { ConditionImage, ConditionText, Prompt, Noise };
    Kind kind = Prompt;
    int condition = -1;  // valid for the two condition kinds

    bool is_condition() const { return kind == ConditionImage || kind == ConditionText; }
    bool operator==(const SegmentKind&) const = default;
};

/// Total classification of sequence index -> segment. Out-of-range rejected.
SegmentKind classify(const SequenceLayout& layout, int index);

/// floor(j / l_prime) for a column inside the condition region; out-of-region
/// rejected.
int condition_of_column(const SequenceLayout& layout, int j);

struct PromptSpan {
    int start = 0;   // p_k, index within the prompt segment
    int length = 0;  // l_k
};

/// Per-condition ranges of the prompt mentioning each condition subject.
struct PromptSpanTable {
    std::vector<PromptSpan> spans;

    int count() const { return static_cast<int>(spans.size()); }
    /// Enforces 0 <= p_k, p_k + l_k <= m, l_k >= 1, pairwise disjoint.
    void validate(int m) const;
};

std::vector<SegmentKind> segment_labels(const SequenceLayout& layout);

}  // namespace sflow
