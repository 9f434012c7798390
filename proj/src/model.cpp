#include "sflow/model.hpp"

#include <cmath>

namespace sflow {

void ModelConfig::validate() const {
    if (d <= 0 || heads <= 0 || layers <= 0 || patch <= 0)
        throw DataError("config: extents must be positive");
    if (d % heads != 0) throw DataError("config: d must be divisible by heads");
    if (d % 4 != 0) throw DataError("config: d must be divisible by 4");
    if (image_edge % patch != 0 || cond_edge % patch != 0)
        throw DataError("config: edges must be divisible by patch");
    if (cond_edge > image_edge)
        throw DataError("config: condition edge must not exceed image edge");
    if (vocab < 1 || max_m < 1 || m_prime < 0)
        throw DataError("config: token budgets invalid");
    if (image_rank < 1 || subject_rank <= image_rank)
        throw DataError("config: subject rank must exceed image rank");
}

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, float stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.normal_float(0.0f, stddev);
    return t;
}

}  // namespace

Model Model::init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Model model;
    model.config = config;

    const int d = config.d;
    const int hidden = d * config.ffn_mult;
    const float wstd = 1.0f / std::sqrt(static_cast<float>(d));

    Rng rng(derive_seed(seed, 0));
    ModelParams& p = model.params;
    p.token_emb = randn({config.vocab, d}, rng, 1.0f);
    // Patch embedding with orthonormal rows; the velocity head is its
    // transpose so pixel content maps in and out of the residual stream
    // through aligned subspaces. Both stay frozen.
    p.patch_w = randn({config.patch_dim(), d}, rng, 1.0f);
    {
        MatMap w = p.patch_w.mat();
        for (int i = 0; i < w.rows(); ++i) {
            for (int j = 0; j < i; ++j) w.row(i) -= w.row(i).dot(w.row(j)) * w.row(j);
            w.row(i) /= w.row(i).norm();
        }
    }
    p.patch_b = Tensor::zeros({d});
    p.time_w1 = randn({d, d}, rng, wstd);
    p.time_b1 = Tensor::zeros({d});
    p.time_w2 = randn({d, d}, rng, wstd);
    p.time_b2 = Tensor::zeros({d});

    p.blocks.resize(static_cast<size_t>(config.layers));
    for (BlockParams& b : p.blocks) {
        b.wq = randn({d, d}, rng, wstd);
        b.bq = Tensor::zeros({d});
        b.wk = randn({d, d}, rng, wstd);
        b.bk = Tensor::zeros({d});
        b.wv = randn({d, d}, rng, wstd);
        b.bv = Tensor::zeros({d});
        b.wo = randn({d, d}, rng, wstd);
        b.bo = Tensor::zeros({d});
        b.w1 = randn({d, hidden}, rng, wstd);
        b.b1 = Tensor::zeros({hidden});
        b.w2 = randn({hidden, d}, rng, 1.0f / std::sqrt(static_cast<float>(hidden)));
        b.b2 = Tensor::zeros({d});
        b.mod_w = randn({d, 6 * d}, rng, 0.02f);
        b.mod_b = Tensor::zeros({6 * d});
        // residual gates start at one, shifts and scales at zero
        for (int j = 2 * d; j < 3 * d; ++j) b.mod_b.data()[j] = 1.0f;
        for (int j = 5 * d; j < 6 * d; ++j) b.mod_b.data()[j] = 1.0f;
    }

    p.final_mod_w = randn({d, 2 * d}, rng, 0.02f);
    p.final_mod_b = Tensor::zeros({2 * d});
    p.head_w = Tensor::zeros({d, config.patch_dim()});
    p.head_w.mat() = p.patch_w.mat().transpose();
    p.head_b = Tensor::zeros({config.patch_dim()});

    Rng lora_rng(derive_seed(seed, 1));
    for (int i = 0; i < config.layers; ++i) {
        const std::string prefix = "block" + std::to_string(i) + ".";
        model.lora.add_site(prefix + "q", d, d, config.subject_rank, config.image_rank,
                            lora_rng);
        model.lora.add_site(prefix + "k", d, d, config.subject_rank, config.image_rank,
                            lora_rng);
        model.lora.add_site(prefix + "v", d, d, config.subject_rank, config.image_rank,
                            lora_rng);
        model.lora.add_site(prefix + "o", d, d, config.subject_rank, config.image_rank,
                            lora_rng);
        model.lora.add_site(prefix + "ff1", d, hidden, config.subject_rank,
                            config.image_rank, lora_rng);
        model.lora.add_site(prefix + "ff2", hidden, d, config.subject_rank,
                            config.image_rank, lora_rng);
    }
    return model;
}

Model Model::worker_clone() const {
    Model clone;
    clone.config = config;
    clone.params = params;  // shallow: frozen base storage is shared
    clone.lora = lora.clone();
    return clone;
}

void Model::set_base_trainable(bool trainable) {
    // Tensor handles share storage, so flipping the flag reaches the model.
    for (auto& [name, tensor] : params.named()) tensor.set_needs_grad(trainable);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("token_emb", token_emb);
    out.emplace_back("patch.w", patch_w);
    out.emplace_back("patch.b", patch_b);
    out.emplace_back("time.w1", time_w1);
    out.emplace_back("time.b1", time_b1);
    out.emplace_back("time.w2", time_w2);
    out.emplace_back("time.b2", time_b2);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "block" + std::to_string(i) + ".";
        const BlockParams& b = blocks[i];
        out.emplace_back(prefix + "wq", b.wq);
        out.emplace_back(prefix + "bq", b.bq);
        out.emplace_back(prefix + "wk", b.wk);
        out.emplace_back(prefix + "bk", b.bk);
        out.emplace_back(prefix + "wv", b.wv);
        out.emplace_back(prefix + "bv", b.bv);
        out.emplace_back(prefix + "wo", b.wo);
        out.emplace_back(prefix + "bo", b.bo);
        out.emplace_back(prefix + "w1", b.w1);
        out.emplace_back(prefix + "b1", b.b1);
        out.emplace_back(prefix + "w2", b.w2);
        out.emplace_back(prefix + "b2", b.b2);
        out.emplace_back(prefix + "mod_w", b.mod_w);
        out.emplace_back(prefix + "mod_b", b.mod_b);
    }
    out.emplace_back("final.mod_w", final_mod_w);
    out.emplace_back("final.mod_b", final_mod_b);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

// ---- timestep embedding ----

TimestepEmbedding timestep_embedding(Graph& g, const Model& model, float t) {
    const int d = model.config.d;
    Tensor feats = Tensor::zeros({1, d});
    const int half = d / 2;
    const float v = t * 1000.0f;
    for (int k = 0; k < half; ++k) {
        const float freq =
            std::exp(-std::log(10000.0f) * static_cast<float>(k) / static_cast<float>(half));
        feats.data()[k] = std::sin(v * freq);
        feats.data()[half + k] = std::cos(v * freq);
    }
    const ModelParams& p = model.params;
    Tensor h = gelu(g, add_rowvec(g, matmul(g, feats, p.time_w1), p.time_b1));
    Tensor emb = add_rowvec(g, matmul(g, h, p.time_w2), p.time_b2);
    return {t, emb};
}

// ---- patch handling ----

Tensor patchify_raw(const Image& img, int patch) {
    if (img.h % patch != 0 || img.w % patch != 0)
        throw DataError("patchify: image edges must be divisible by patch");
    const int gy = img.h / patch, gx = img.w / patch;
    Tensor out = Tensor::zeros({gy * gx, patch * patch * 3});
    for (int ty = 0; ty < gy; ++ty)
        for (int tx = 0; tx < gx; ++tx) {
            float* row = out.data() + static_cast<size_t>(ty * gx + tx) * out.cols();
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < 3; ++c)
                        row[(py * patch + px) * 3 + c] =
                            img.at(ty * patch + py, tx * patch + px, c);
        }
    return out;
}

Image unpatchify_raw(const Tensor& tokens, int patch, int edge) {
    const int grid = edge / patch;
    if (tokens.rows() != grid * grid || tokens.cols() != patch * patch * 3)
        throw DataError("unpatchify: token shape mismatch");
    Image img = Image::filled(edge, edge, 0, 0, 0);
    for (int ty = 0; ty < grid; ++ty)
        for (int tx = 0; tx < grid; ++tx) {
            const float* row =
                tokens.data() + static_cast<size_t>(ty * grid + tx) * tokens.cols();
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < 3; ++c)
                        img.at(ty * patch + py, tx * patch + px, c) =
                            row[(py * patch + px) * 3 + c];
        }
    return img;
}

// ---- positions ----

std::pair<float, float> token_position(const SequenceLayout& layout,
                                       const ModelConfig& config, int index) {
    const SegmentKind kind = classify(layout, index);
    switch (kind.kind) {
        case SegmentKind::Noise: {
            const int t = index - layout.noise_begin();
            const int gx = config.grid();
            return {static_cast<float>((t / gx) * config.patch),
                    static_cast<float>((t % gx) * config.patch)};
        }
        case SegmentKind::ConditionImage: {
            const int t = index - layout.cond_image_begin(kind.condition);
            const int gx = config.cond_grid();
            const float off = static_cast<float>((kind.condition + 1) * config.image_edge);
            return {static_cast<float>((t / gx) * config.patch),
                    static_cast<float>((t % gx) * config.patch) + off};
        }
        case SegmentKind::ConditionText: {
            const int q = index - layout.cond_text_begin(kind.condition);
            return {static_cast<float>(config.image_edge + q),
                    static_cast<float>((kind.condition + 1) * config.image_edge)};
        }
        case SegmentKind::Prompt: {
            const int q = index - layout.prompt_begin();
            return {static_cast<float>(config.image_edge + q), 0.0f};
        }
    }
    throw DataError("token_position: unreachable");
}

Tensor position_features(const SequenceLayout& layout, const ModelConfig& config) {
    const int d = config.d;
    const int half = d / 2;
    const int pairs = half / 2;
    Tensor out = Tensor::zeros({layout.total(), d});
    for (int i = 0; i < layout.total(); ++i) {
        const auto [row, col] = token_position(layout, config, i);
        float* f = out.data() + static_cast<size_t>(i) * d;
        for (int k = 0; k < pairs; ++k) {
            const float freq = std::exp(-std::log(10000.0f) * static_cast<float>(k) /
                                        static_cast<float>(pairs));
            f[2 * k] = std::sin(row * freq);
            f[2 * k + 1] = std::cos(row * freq);
            f[half + 2 * k] = std::sin(col * freq);
            f[half + 2 * k + 1] = std::cos(col * freq);
        }
    }
    return out;
}

// ---- attention block ----

namespace {

// Per-head value matrices of the noise-query and prompt-key slices.
Mat rows_block(const Tensor& t, int row0, int rows, int col0, int cols) {
    Mat out(rows, cols);
    out = t.mat().block(row0, col0, rows, cols);
    return out;
}

struct ComputedMasks {
    std::vector<Tensor> additive;  // size 1 (shared) or heads
    bool per_head = false;
};

void audit_or_throw(const FlowMask& mask, bool dynamic_on) {
    const SequenceLayout& lt = mask.layout;
    if (lt.c < 1) return;
    const int expected = dynamic_on ? lt.l_prime() : lt.c * lt.l_prime();
    for (const NoiseRowAudit& a : audit_noise_rows(mask)) {
        if (a.open_condition_columns != expected || (dynamic_on && !a.single_block))
            throw NumericError("mask audit: noise row has " +
                               std::to_string(a.open_condition_columns) +
                               " open condition columns, expected " +
                               std::to_string(expected));
    }
}

ComputedMasks effective_masks(const Tensor& q, const Tensor& k, BlockContext& ctx,
                              const ModelConfig& config) {
    const SequenceLayout& lt = ctx.layout;
    const int c = lt.c;
    ComputedMasks out;

    if (ctx.opts.frozen_assignments != nullptr && c >= 1 && ctx.opts.dynamic_routing) {
        const auto& frozen = *ctx.opts.frozen_assignments;
        if (ctx.layer_index >= static_cast<int>(frozen.size()))
            throw DataError("forward: missing frozen assignment for layer");
        FlowMask static_mask2 = ctx.static_mask ? *ctx.static_mask : FlowMask::open(lt);
        FlowMask combined = combine(
            static_mask2,
            build_dynamic_mask(frozen[static_cast<size_t>(ctx.layer_index)], lt));
        out.additive.push_back(combined.to_additive());
        return out;
    }

    const bool want_affinity = c >= 1 && (ctx.opts.dynamic_routing || ctx.trace != nullptr);
    if (!want_affinity) {
        if (ctx.static_mask == nullptr) {
            out.additive.push_back(Tensor::zeros({lt.total(), lt.total()}));
        } else {
            if (ctx.opts.audit) audit_or_throw(*ctx.static_mask, false);
            out.additive.push_back(ctx.static_mask->to_additive());
        }
        return out;
    }

    const int dh = config.head_dim();
    const int n = lt.n, m = lt.m;
    const int noise0 = lt.noise_begin(), prompt0 = lt.prompt_begin();

    // Head-averaged similarity (and per-head copies when requested).
    std::vector<Mat> per_head_s;
    Mat mean_s = Mat::Zero(n, m);
    for (int h = 0; h < config.heads; ++h) {
        Mat qh = rows_block(q, noise0, n, h * dh, dh);
        Mat kh = rows_block(k, prompt0, m, h * dh, dh);
        Mat s = compute_similarity(qh, kh, dh);
        mean_s += s;
        if (ctx.opts.per_head_affinity) per_head_s.push_back(std::move(s));
    }
    mean_s /= static_cast<float>(config.heads);

    AffinityMatrix affinity = compute_affinity(mean_s, ctx.spans, c);
    RoutingAssignment assignment = route(affinity);
    if (ctx.trace) ctx.trace->push_back({ctx.layer_index, affinity, assignment});

    FlowMask static_mask = ctx.static_mask ? *ctx.static_mask : FlowMask::open(lt);
    if (!ctx.opts.dynamic_routing) {
        if (ctx.opts.audit) audit_or_throw(static_mask, false);
        out.additive.push_back(static_mask.to_additive());
        return out;
    }

    if (ctx.opts.per_head_affinity) {
        out.per_head = true;
        for (int h = 0; h < config.heads; ++h) {
            AffinityMatrix ah = compute_affinity(per_head_s[static_cast<size_t>(h)],
                                                 ctx.spans, c);
            FlowMask combined = combine(static_mask, build_dynamic_mask(route(ah), lt));
            if (ctx.opts.audit) audit_or_throw(combined, true);
            out.additive.push_back(combined.to_additive());
        }
    } else {
        FlowMask combined = combine(static_mask, build_dynamic_mask(assignment, lt));
        if (ctx.opts.audit) audit_or_throw(combined, true);
        out.additive.push_back(combined.to_additive());
    }
    return out;
}

}  // namespace

Tensor mma_block(Graph& g, const Tensor& x, const BlockParams& bp, const LoraSite* sites,
                 LoraPolicy policy, const Tensor& t_emb, BlockContext& ctx) {
    const ModelConfig& config = ctx.config;
    const int d = config.d;
    const int dh = config.head_dim();
    const std::vector<SegmentKind>& labels = *ctx.labels;

    // Adaptive modulation parameters for both sub-layers.
    Tensor mod = add_rowvec(g, matmul(g, t_emb, bp.mod_w), bp.mod_b);
    Tensor shift1 = slice_cols(g, mod, 0, d);
    Tensor scale1 = add_scalar(g, slice_cols(g, mod, d, d), 1.0f);
    Tensor gate1 = slice_cols(g, mod, 2 * d, d);
    Tensor shift2 = slice_cols(g, mod, 3 * d, d);
    Tensor scale2 = add_scalar(g, slice_cols(g, mod, 4 * d, d), 1.0f);
    Tensor gate2 = slice_cols(g, mod, 5 * d, d);

    Tensor h = layer_norm(g, x, scale1, shift1);
    Tensor q = add_rowvec(g, gated_project(g, h, labels, bp.wq, sites[0], policy), bp.bq);
    Tensor k = add_rowvec(g, gated_project(g, h, labels, bp.wk, sites[1], policy), bp.bk);
    Tensor v = add_rowvec(g, gated_project(g, h, labels, bp.wv, sites[2], policy), bp.bv);

    ComputedMasks masks = effective_masks(q, k, ctx, config);

    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(config.heads));
    for (int head = 0; head < config.heads; ++head) {
        Tensor qh = slice_cols(g, q, head * dh, dh);
        Tensor kh = slice_cols(g, k, head * dh, dh);
        Tensor vh = slice_cols(g, v, head * dh, dh);
        Tensor logits = scale(g, matmul_nt(g, qh, kh), inv_sqrt_dh);
        const Tensor& mask =
            masks.per_head ? masks.additive[static_cast<size_t>(head)] : masks.additive[0];
        Tensor probs = softmax_masked(g, logits, mask);
        head_outputs.push_back(matmul(g, probs, vh));
    }
    Tensor attn = concat_cols(g, head_outputs);
    Tensor attn_out =
        add_rowvec(g, gated_project(g, attn, labels, bp.wo, sites[3], policy), bp.bo);
    Tensor x1 = add(g, x, mul_rowvec(g, attn_out, gate1));

    Tensor h2 = layer_norm(g, x1, scale2, shift2);
    Tensor f = add_rowvec(g, gated_project(g, h2, labels, bp.w1, sites[4], policy), bp.b1);
    f = gelu(g, f);
    f = add_rowvec(g, gated_project(g, f, labels, bp.w2, sites[5], policy), bp.b2);
    return add(g, x1, mul_rowvec(g, f, gate2));
}

// ---- full forward ----

Tensor forward_velocity(Graph& g, const Model& model, const ModelInputs& inputs,
                        const RoutingOptions& opts, std::vector<AffinityRecord>* trace) {
    const ModelConfig& config = model.config;
    const ModelParams& p = model.params;
    const int c = inputs.conditions();

    if (static_cast<int>(inputs.cond_text.size()) != c)
        throw DataError("forward: condition image/text count mismatch");
    if (static_cast<int>(inputs.prompt.size()) != config.max_m)
        throw DataError("forward: prompt must be padded to the token budget");
    if (c > 0 && inputs.spans.count() != c)
        throw DataError("forward: need one prompt span per condition");
    inputs.spans.validate(config.max_m);
    if (inputs.noisy.h != config.image_edge || inputs.noisy.w != config.image_edge)
        throw DataError("forward: noisy image extent mismatch");
    for (const Image& ci : inputs.cond_images)
        if (ci.h != config.cond_edge || ci.w != config.cond_edge)
            throw DataError("forward: condition image extent mismatch");
    for (const auto& ids : inputs.cond_text)
        if (static_cast<int>(ids.size()) != config.m_prime)
            throw DataError("forward: condition prompt must have m_prime tokens");

    const SequenceLayout layout = config.layout_for(c);
    const std::vector<SegmentKind> labels = segment_labels(layout);

    // Token assembly: [cond image k; cond text k]..., prompt, noise.
    std::vector<Tensor> parts;
    parts.reserve(static_cast<size_t>(2 * c + 2));
    for (int k = 0; k < c; ++k) {
        Tensor raw = patchify_raw(inputs.cond_images[static_cast<size_t>(k)], config.patch);
        parts.push_back(add_rowvec(g, matmul(g, raw, p.patch_w), p.patch_b));
        parts.push_back(embedding_rows(g, p.token_emb, inputs.cond_text[static_cast<size_t>(k)]));
    }
    parts.push_back(embedding_rows(g, p.token_emb, inputs.prompt));
    Tensor noise_raw = patchify_raw(inputs.noisy, config.patch);
    parts.push_back(add_rowvec(g, matmul(g, noise_raw, p.patch_w), p.patch_b));
    Tensor x = concat_rows(g, parts);
    x = add(g, x, position_features(layout, config));

    TimestepEmbedding t_emb = timestep_embedding(g, model, inputs.t);

    FlowMask static_mask;
    const bool have_static = c > 0 && opts.static_routing;
    if (have_static) static_mask = build_static_mask(layout);

    BlockContext ctx;
    ctx.config = config;
    ctx.layout = layout;
    ctx.spans = inputs.spans;
    ctx.labels = &labels;
    ctx.static_mask = have_static ? &static_mask : nullptr;
    ctx.opts = opts;
    ctx.trace = trace;
    for (int layer = 0; layer < config.layers; ++layer) {
        ctx.layer_index = layer;
        x = mma_block(g, x, p.blocks[static_cast<size_t>(layer)],
                      model.lora.sites.data() + static_cast<size_t>(layer) * 6,
                      model.lora.policy, t_emb.embedding, ctx);
    }

    Tensor final_mod = add_rowvec(g, matmul(g, t_emb.embedding, p.final_mod_w), p.final_mod_b);
    Tensor final_shift = slice_cols(g, final_mod, 0, config.d);
    Tensor final_scale = add_scalar(g, slice_cols(g, final_mod, config.d, config.d), 1.0f);
    Tensor noise_tokens = slice_rows(g, x, layout.noise_begin(), layout.n);
    Tensor normed = layer_norm(g, noise_tokens, final_scale, final_shift);
    return add_rowvec(g, matmul(g, normed, p.head_w), p.head_b);
}

Image velocity_image(const Tensor& velocity_tokens, const ModelConfig& config) {
    return unpatchify_raw(velocity_tokens, config.patch, config.image_edge);
}

}  // namespace sflow
