#include "sflow/layout.hpp"

#include "sflow/tensor.hpp"

namespace sflow {

SequenceLayout build_layout(int c, int n_prime, int m_prime, int m, int n) {
    if (c < 0 || n_prime < 0 || m_prime < 0 || m < 0 || n < 0)
        throw DataError("build_layout: negative extent");
    return SequenceLayout{c, n_prime, m_prime, m, n};
}

SegmentKind classify(const SequenceLayout& layout, int index) {
    if (index < 0 || index >= layout.total())
        throw DataError("classify: index out of range");
    if (index < layout.prompt_begin()) {
        const int k = index / layout.l_prime();
        const int within = index - layout.cond_begin(k);
        if (within < layout.n_prime) return {SegmentKind::ConditionImage, k};
        return {SegmentKind::ConditionText, k};
    }
    if (index < layout.noise_begin()) return {SegmentKind::Prompt, -1};
    return {SegmentKind::Noise, -1};
}

int condition_of_column(const SequenceLayout& layout, int j) {
    if (j < 0 || j >= layout.prompt_begin())
        throw DataError("condition_of_column: column outside condition region");
    return j / layout.l_prime();
}

void PromptSpanTable::validate(int m) const {
    std::vector<char> used(static_cast<size_t>(m), 0);
    for (const PromptSpan& s : spans) {
        if (s.length < 1) throw DataError("prompt span: empty span");
        if (s.start < 0 || s.start + s.length > m)
            throw DataError("prompt span: range outside prompt");
        for (int i = s.start; i < s.start + s.length; ++i) {
            if (used[static_cast<size_t>(i)]) throw DataError("prompt span: overlap");
            used[static_cast<size_t>(i)] = 1;
        }
    }
}

std::vector<SegmentKind> segment_labels(const SequenceLayout& layout) {
    std::vector<SegmentKind> labels;
    labels.reserve(static_cast<size_t>(layout.total()));
    for (int i = 0; i < layout.total(); ++i) labels.push_back(classify(layout, i));
    return labels;
}

}  // namespace sflow
