#include "sflow/routing.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

#include "sflow/image.hpp"

namespace sflow {

FlowMask FlowMask::open(const SequenceLayout& layout) {
    FlowMask m;
    m.layout = layout;
    m.blocked.setConstant(layout.total(), layout.total(), false);
    return m;
}

Tensor FlowMask::to_additive() const {
    const int L = layout.total();
    Tensor t = Tensor::zeros({L, L});
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            if (blocked(i, j)) t.mat()(i, j) = kBlocked;
    return t;
}

int64_t FlowMask::blocked_count() const { return blocked.cast<int64_t>().sum(); }

FlowMask build_static_mask(const SequenceLayout& layout) {
    FlowMask mask = FlowMask::open(layout);
    const int lp = layout.l_prime();
    const int cond_end = layout.prompt_begin();
    const int prompt_end = cond_end + layout.m;

    // Prompt-condition decoupling, both directions.
    for (int i = cond_end; i < prompt_end; ++i)
        for (int j = 0; j < cond_end; ++j) {
            mask.blocked(i, j) = true;
            mask.blocked(j, i) = true;
        }
    // Inter-condition isolation.
    for (int a = 0; a < layout.c; ++a)
        for (int b = 0; b < layout.c; ++b) {
            if (a == b) continue;
            for (int i = a * lp; i < (a + 1) * lp; ++i)
                for (int j = b * lp; j < (b + 1) * lp; ++j) mask.blocked(i, j) = true;
        }
    return mask;
}

Mat compute_similarity(const Mat& q_noise, const Mat& k_prompt, int d) {
    if (k_prompt.rows() == 0) throw DataError("compute_similarity: no prompt tokens");
    if (d <= 0 || q_noise.cols() != d || k_prompt.cols() != d)
        throw DataError("compute_similarity: feature extent mismatch");
    const int n = static_cast<int>(q_noise.rows());
    const int m = static_cast<int>(k_prompt.rows());
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));

    Mat s(n, m);
    for (int i = 0; i < n; ++i) {
        double maxv = -std::numeric_limits<double>::infinity();
        std::vector<double> z(static_cast<size_t>(m));
        for (int j = 0; j < m; ++j) {
            double dot = 0.0;
            for (int t = 0; t < d; ++t)
                dot += static_cast<double>(q_noise(i, t)) * k_prompt(j, t);
            z[static_cast<size_t>(j)] = dot * inv;
            maxv = std::max(maxv, z[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (int j = 0; j < m; ++j) denom += std::exp(z[static_cast<size_t>(j)] - maxv);
        for (int j = 0; j < m; ++j)
            s(i, j) = static_cast<float>(std::exp(z[static_cast<size_t>(j)] - maxv) / denom);
    }
    return s;
}

AffinityMatrix compute_affinity(const Mat& similarity, const PromptSpanTable& spans,
                                int conditions) {
    if (conditions < 1) throw DataError("compute_affinity: need at least one condition");
    if (spans.count() != conditions)
        throw DataError("compute_affinity: span count differs from condition count");
    spans.validate(static_cast<int>(similarity.cols()));

    AffinityMatrix aff;
    aff.values.resize(similarity.rows(), conditions);
    for (int k = 0; k < conditions; ++k) {
        const PromptSpan& span = spans.spans[static_cast<size_t>(k)];
        for (int i = 0; i < similarity.rows(); ++i) {
            double acc = 0.0;
            for (int z = 0; z < span.length; ++z) acc += similarity(i, span.start + z);
            aff.values(i, k) = static_cast<float>(acc / span.length);
        }
    }
    return aff;
}

RoutingAssignment route(const AffinityMatrix& affinity) {
    if (affinity.conditions() < 1) throw DataError("route: empty affinity");
    RoutingAssignment out;
    out.chosen.resize(static_cast<size_t>(affinity.tokens()));
    for (int i = 0; i < affinity.tokens(); ++i) {
        int best = 0;
        for (int k = 1; k < affinity.conditions(); ++k)
            if (affinity.values(i, k) > affinity.values(i, best)) best = k;
        out.chosen[static_cast<size_t>(i)] = best;
    }
    return out;
}

FlowMask build_dynamic_mask(const RoutingAssignment& assignment,
                            const SequenceLayout& layout) {
    if (static_cast<int>(assignment.chosen.size()) != layout.n)
        throw DataError("build_dynamic_mask: assignment length differs from noise count");
    FlowMask mask = FlowMask::open(layout);
    const int lp = layout.l_prime();
    const int cond_cols = layout.prompt_begin();
    const int noise0 = layout.noise_begin();
    for (int t = 0; t < layout.n; ++t) {
        const int a = assignment.chosen[static_cast<size_t>(t)];
        if (a < 0 || a >= layout.c)
            throw DataError("build_dynamic_mask: assignment out of range");
        for (int j = 0; j < cond_cols; ++j)
            if (j / lp != a) mask.blocked(noise0 + t, j) = true;
    }
    return mask;
}

FlowMask combine(const FlowMask& a, const FlowMask& b) {
    if (!(a.layout == b.layout)) throw DataError("combine: layout mismatch");
    FlowMask out;
    out.layout = a.layout;
    out.blocked = a.blocked || b.blocked;
    return out;
}

std::vector<NoiseRowAudit> audit_noise_rows(const FlowMask& mask) {
    const SequenceLayout& layout = mask.layout;
    std::vector<NoiseRowAudit> audits(static_cast<size_t>(layout.n));
    const int cond_cols = layout.prompt_begin();
    for (int t = 0; t < layout.n; ++t) {
        const int row = layout.noise_begin() + t;
        int open = 0, first_block = -1;
        bool single = true;
        for (int j = 0; j < cond_cols; ++j) {
            if (mask.blocked(row, j)) continue;
            ++open;
            const int block = condition_of_column(layout, j);
            if (first_block < 0)
                first_block = block;
            else if (block != first_block)
                single = false;
        }
        audits[static_cast<size_t>(t)] = {open, single};
    }
    return audits;
}

void write_mask_pgm(const FlowMask& mask, const std::string& path) {
    const int L = mask.layout.total();
    std::vector<uint8_t> px(static_cast<size_t>(L) * L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            px[static_cast<size_t>(i) * L + j] = mask.blocked(i, j) ? 0 : 255;
    write_pgm(path, L, L, px);
}

void write_affinity_pgm(const AffinityMatrix& affinity, int condition, int grid_edge,
                        const std::string& path) {
    if (condition < 0 || condition >= affinity.conditions())
        throw DataError("write_affinity_pgm: condition out of range");
    if (grid_edge * grid_edge != affinity.tokens())
        throw DataError("write_affinity_pgm: token count is not a square grid");
    std::vector<uint8_t> px(static_cast<size_t>(affinity.tokens()));
    for (int y = 0; y < grid_edge; ++y)
        for (int x = 0; x < grid_edge; ++x) {
            const float v = affinity.values(y * grid_edge + x, condition);
            const int g = static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0f, 1.0f)));
            px[static_cast<size_t>(y) * grid_edge + x] = static_cast<uint8_t>(g);
        }
    write_pgm(path, grid_edge, grid_edge, px);
}

std::string affinity_to_json(const AffinityMatrix& affinity) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < affinity.tokens(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < affinity.conditions(); ++k) row.push_back(affinity.values(i, k));
        rows.push_back(std::move(row));
    }
    return rows.dump();
}

}  // namespace sflow
