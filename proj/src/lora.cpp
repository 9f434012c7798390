#include "sflow/lora.hpp"

#include <cmath>

namespace sflow {

LoraGate lora_gate(const SegmentKind& kind) {
    switch (kind.kind) {
        case SegmentKind::Prompt: return LoraGate::None;
        case SegmentKind::Noise: return LoraGate::Image;
        case SegmentKind::ConditionImage:
        case SegmentKind::ConditionText: return LoraGate::Subject;
    }
    throw DataError("lora_gate: unknown segment kind");
}

LoraBranch LoraBranch::init(int d_in, int d_out, int rank, Rng& rng) {
    if (rank < 1) throw DataError("lora: rank must be >= 1");
    LoraBranch b;
    b.rank = rank;
    b.alpha = static_cast<float>(rank);  // unit effective scale alpha / rank = 1
    b.down = Tensor::zeros({d_in, rank}, true);
    const float stddev = 1.0f / std::sqrt(static_cast<float>(d_in));
    for (auto& v : b.down.values()) v = rng.normal_float(0.0f, stddev);
    b.up = Tensor::zeros({rank, d_out}, true);
    return b;
}

LoraSite& GatedLoraSet::add_site(const std::string& name, int d_in, int d_out,
                                 int subject_rank, int image_rank, Rng& rng) {
    if (subject_rank <= image_rank)
        throw DataError("lora: subject rank must exceed image rank");
    LoraSite site;
    site.name = name;
    site.d_in = d_in;
    site.d_out = d_out;
    site.subject = LoraBranch::init(d_in, d_out, subject_rank, rng);
    site.image = LoraBranch::init(d_in, d_out, image_rank, rng);
    sites.push_back(std::move(site));
    return sites.back();
}

GatedLoraSet GatedLoraSet::clone() const {
    GatedLoraSet out;
    out.policy = policy;
    out.sites.reserve(sites.size());
    for (const LoraSite& s : sites) {
        LoraSite c = s;
        c.subject.down = s.subject.down.clone();
        c.subject.up = s.subject.up.clone();
        c.image.down = s.image.down.clone();
        c.image.up = s.image.up.clone();
        out.sites.push_back(std::move(c));
    }
    return out;
}

void GatedLoraSet::copy_values_from(const GatedLoraSet& other) {
    if (other.sites.size() != sites.size()) throw DataError("lora: structure mismatch");
    for (size_t i = 0; i < sites.size(); ++i) {
        auto copy = [](Tensor& dst, const Tensor& src) {
            std::copy(src.values().begin(), src.values().end(), dst.values().begin());
        };
        copy(sites[i].subject.down, other.sites[i].subject.down);
        copy(sites[i].subject.up, other.sites[i].subject.up);
        copy(sites[i].image.down, other.sites[i].image.down);
        copy(sites[i].image.up, other.sites[i].image.up);
    }
}

namespace {

Tensor branch_delta(Graph& g, const Tensor& rows, const LoraBranch& b) {
    Tensor low = matmul(g, rows, b.down);
    Tensor delta = matmul(g, low, b.up);
    return scale(g, delta, b.alpha / static_cast<float>(b.rank));
}

}  // namespace

Tensor gated_project(Graph& g, const Tensor& x, const std::vector<SegmentKind>& labels,
                     const Tensor& base_w, const LoraSite& site, LoraPolicy policy) {
    if (static_cast<int>(labels.size()) != x.rows())
        throw DataError("gated_project: label count differs from row count");
    Tensor y = matmul(g, x, base_w);

    if (policy == LoraPolicy::SingleUniform) {
        std::vector<uint8_t> all(labels.size(), 1);
        return add_rows(g, y, branch_delta(g, x, site.subject), all);
    }

    std::vector<uint8_t> subject_rows(labels.size(), 0), image_rows(labels.size(), 0);
    bool any_subject = false, any_image = false;
    for (size_t i = 0; i < labels.size(); ++i) {
        switch (lora_gate(labels[i])) {
            case LoraGate::Subject:
                subject_rows[i] = 1;
                any_subject = true;
                break;
            case LoraGate::Image:
                image_rows[i] = 1;
                any_image = true;
                break;
            case LoraGate::None: break;
        }
    }
    if (any_subject) {
        Tensor xs = mask_rows(g, x, subject_rows);
        y = add_rows(g, y, branch_delta(g, xs, site.subject), subject_rows);
    }
    if (any_image) {
        Tensor xi = mask_rows(g, x, image_rows);
        y = add_rows(g, y, branch_delta(g, xi, site.image), image_rows);
    }
    return y;
}

std::vector<Tensor> trainable_parameters(GatedLoraSet& set) {
    std::vector<Tensor> params;
    for (LoraSite& site : set.sites) {
        params.push_back(site.subject.down);
        params.push_back(site.subject.up);
        if (set.policy == LoraPolicy::DualBranch) {
            params.push_back(site.image.down);
            params.push_back(site.image.up);
        }
    }
    return params;
}

}  // namespace sflow
