// Acceptance suite: one pass/fail line per criterion. Run with no arguments
// for the full battery or with --only k[,k...] for a subset. Criterion 8
// performs three complete default-scale trainings and takes the longest.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "sflow/checkpoint.hpp"
#include "sflow/metrics.hpp"
#include "sflow/sampler.hpp"
#include "sflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace sflow;

namespace {

int g_threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
std::string g_workdir;

struct Check {
    bool ok = true;
    std::ostringstream detail;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            detail << (detail.str().empty() ? "" : "; ") << what;
        }
    }
};

std::string workdir(const std::string& leaf) {
    const std::string dir = g_workdir + "/" + leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

ModelConfig tiny_config(int layers = 2) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.layers = layers;
    cfg.patch = 2;
    cfg.image_edge = 8;
    cfg.cond_edge = 4;
    cfg.vocab = vocab::size();
    cfg.max_m = 16;
    cfg.m_prime = 4;
    cfg.ffn_mult = 2;
    cfg.subject_rank = 2;
    cfg.image_rank = 1;
    return cfg;
}

ModelInputs random_inputs(const ModelConfig& cfg, int c, Rng& rng) {
    ModelInputs in;
    for (int k = 0; k < c; ++k) {
        Image img = Image::filled(cfg.cond_edge, cfg.cond_edge, 0, 0, 0);
        for (auto& v : img.px) v = rng.uniform_float();
        in.cond_images.push_back(std::move(img));
        std::vector<int> ids(static_cast<size_t>(cfg.m_prime));
        for (int& id : ids) id = rng.uniform_int(cfg.vocab);
        in.cond_text.push_back(std::move(ids));
        in.spans.spans.push_back({k * cfg.m_prime, cfg.m_prime});
    }
    in.prompt.resize(static_cast<size_t>(cfg.max_m));
    for (int& id : in.prompt) id = rng.uniform_int(cfg.vocab);
    in.noisy = Image::filled(cfg.image_edge, cfg.image_edge, 0, 0, 0);
    for (auto& v : in.noisy.px) v = rng.normal_float();
    in.t = 0.3f + 0.4f * rng.uniform_float();
    return in;
}

// Independent brute-force of the static blocking index ranges.
bool static_blocked_ref(const SequenceLayout& lt, int i, int j) {
    const int lp = lt.l_prime();
    const int cond = lt.c * lp;
    const bool i_prompt = i >= cond && i < cond + lt.m;
    const bool j_prompt = j >= cond && j < cond + lt.m;
    if (i_prompt && j < cond) return true;
    if (i < cond && j_prompt) return true;
    if (i < cond && j < cond && i / lp != j / lp) return true;
    return false;
}

bool dynamic_blocked_ref(const SequenceLayout& lt, const std::vector<int>& assign, int i,
                         int j) {
    const int lp = lt.l_prime();
    const int cond = lt.c * lp;
    if (i < cond + lt.m || i >= cond + lt.m + lt.n) return false;
    if (j >= cond) return false;
    return j / lp != assign[static_cast<size_t>(i - cond - lt.m)];
}

// ---- criterion 1 ----

bool criterion_mask_enumeration(std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    Check check;
    Rng rng(0xC1);
    for (int trial = 0; trial < 200; ++trial) {
        const int c = rng.uniform_int(5);
        SequenceLayout lt =
            build_layout(c, 1 + rng.uniform_int(12), 1 + rng.uniform_int(12),
                         1 + rng.uniform_int(12), 1 + rng.uniform_int(12));
        FlowMask stat = build_static_mask(lt);
        for (int i = 0; i < lt.total() && check.ok; ++i)
            for (int j = 0; j < lt.total() && check.ok; ++j)
                check.expect(stat.blocked(i, j) == static_blocked_ref(lt, i, j),
                             "static mask disagrees with enumeration");
        if (c < 1) continue;
        std::vector<int> assign(static_cast<size_t>(lt.n));
        for (int& a : assign) a = rng.uniform_int(c);
        FlowMask dyn = build_dynamic_mask(RoutingAssignment{assign}, lt);
        for (int i = 0; i < lt.total() && check.ok; ++i)
            for (int j = 0; j < lt.total() && check.ok; ++j)
                check.expect(dyn.blocked(i, j) == dynamic_blocked_ref(lt, assign, i, j),
                             "dynamic mask disagrees with enumeration");
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    check.expect(elapsed < 10.0, "runtime exceeded 10 s");
    out << "200 layouts enumerated in " << elapsed << " s";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 2 ----

bool criterion_blocked_invariance(std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    Check check;
    Rng rng(0xC2);
    for (int trial = 0; trial < 50; ++trial) {
        ModelConfig cfg = tiny_config(1);
        Model model = Model::init(cfg, 1000 + static_cast<uint64_t>(trial));
        // Randomize LoRA so both branches are live.
        for (LoraSite& site : model.lora.sites) {
            for (auto& v : site.subject.up.values()) v = rng.normal_float(0, 0.2f);
            for (auto& v : site.image.up.values()) v = rng.normal_float(0, 0.2f);
        }
        const int c = 2 + rng.uniform_int(2);
        SequenceLayout lt = cfg.layout_for(c);
        auto labels = segment_labels(lt);
        FlowMask stat = build_static_mask(lt);
        PromptSpanTable spans;
        for (int k = 0; k < c; ++k) spans.spans.push_back({k * 2, 2});

        Tensor x = Tensor::zeros({lt.total(), cfg.d});
        for (auto& v : x.values()) v = rng.normal_float();

        auto run_block = [&](const Tensor& input, std::vector<AffinityRecord>* trace) {
            Graph g;
            g.set_recording(false);
            TimestepEmbedding te = timestep_embedding(g, model, 0.5f);
            BlockContext ctx;
            ctx.config = cfg;
            ctx.layout = lt;
            ctx.spans = spans;
            ctx.labels = &labels;
            ctx.static_mask = &stat;
            ctx.opts = RoutingOptions{};
            ctx.trace = trace;
            return mma_block(g, input, model.params.blocks[0], model.lora.sites.data(),
                             model.lora.policy, te.embedding, ctx);
        };

        std::vector<AffinityRecord> trace1, trace2;
        Tensor y1 = run_block(x, &trace1);

        // Perturb every token of one condition block: its Q, K and V rows all
        // change, and every row that blocks this block must be untouched.
        const int victim = rng.uniform_int(c);
        Tensor x2 = x.clone();
        for (int i = lt.cond_begin(victim); i < lt.cond_begin(victim) + lt.l_prime(); ++i)
            for (int j = 0; j < cfg.d; ++j)
                x2.mat()(i, j) += 1.0f + rng.uniform_float() * 100.0f;
        Tensor y2 = run_block(x2, &trace2);

        check.expect(trace1[0].assignment.chosen == trace2[0].assignment.chosen,
                     "routing moved under a condition-block perturbation");
        for (int i = 0; i < lt.total(); ++i) {
            const SegmentKind kind = classify(lt, i);
            bool expect_invariant = false;
            if (kind.kind == SegmentKind::Prompt) expect_invariant = true;
            if (kind.is_condition() && kind.condition != victim) expect_invariant = true;
            if (kind.kind == SegmentKind::Noise)
                expect_invariant =
                    trace1[0].assignment.chosen[static_cast<size_t>(i - lt.noise_begin())] !=
                    victim;
            if (expect_invariant)
                check.expect(std::memcmp(y1.mat().row(i).data(), y2.mat().row(i).data(),
                                         static_cast<size_t>(cfg.d) * sizeof(float)) == 0,
                             "blocked-row output changed at bit level");
        }
        if (!check.ok) break;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    check.expect(elapsed < 30.0, "runtime exceeded 30 s");
    out << "50 perturbation trials in " << elapsed << " s";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 3 ----

bool criterion_subset_attention(std::ostream& out) {
    Check check;
    Rng rng(0xC3);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 3 + rng.uniform_int(20);
        const int dh = 4 + rng.uniform_int(12);
        Graph g;
        Tensor q = Tensor::zeros({n, dh}), k = Tensor::zeros({n, dh}),
               v = Tensor::zeros({n, dh});
        for (auto& x : q.values()) x = rng.normal_float();
        for (auto& x : k.values()) x = rng.normal_float();
        for (auto& x : v.values()) x = rng.normal_float();
        Tensor mask = Tensor::zeros({n, n});
        std::vector<std::vector<bool>> blocked(static_cast<size_t>(n),
                                               std::vector<bool>(static_cast<size_t>(n)));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j && rng.uniform() < 0.4) {
                    mask.mat()(i, j) = kBlocked;
                    blocked[static_cast<size_t>(i)][static_cast<size_t>(j)] = true;
                }

        Tensor logits =
            scale(g, matmul_nt(g, q, k), 1.0f / std::sqrt(static_cast<float>(dh)));
        Tensor probs = softmax_masked(g, logits, mask);
        Tensor attn = matmul(g, probs, v);

        auto dm = [&](const Tensor& t) {
            oracle::DMat m = oracle::dmat(t.rows(), t.cols());
            for (int i = 0; i < t.rows(); ++i)
                for (int j = 0; j < t.cols(); ++j)
                    m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.mat()(i, j);
            return m;
        };
        oracle::DMat ref = oracle::attention_subset_ref(dm(q), dm(k), dm(v), blocked);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dh; ++j)
                worst = std::max(worst,
                                 std::abs(attn.mat()(i, j) -
                                          ref[static_cast<size_t>(i)][static_cast<size_t>(j)]));
    }
    check.expect(worst < 1e-5, "max deviation from the 64-bit oracle too large");
    out << "100 cases, max |diff| " << worst;
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 4 ----

bool criterion_routing_bijectivity(std::ostream& out) {
    Check check;
    const std::string dir = workdir("c4_smoke");
    TrainConfig cfg;
    cfg.model = ModelConfig{};  // default desk-scale model
    cfg.stage_iters = {10, 25, 15};
    cfg.batch = 4;
    cfg.seed = 4;
    cfg.threads = g_threads;
    cfg.debug_audit = true;  // audit throws on any bijectivity violation
    Corpus corpus = generate_corpus(26, 1, 4, cfg.model.cond_edge, cfg.model.image_edge);
    try {
        TrainResult result = train(cfg, corpus, dir);
        check.expect(result.diptych_samples > 0, "smoke run never trained a diptych");

        // Inference steps are audited as well.
        LoadedCheckpoint ckpt = load_checkpoint(result.checkpoint_paths[2]);
        SampleRequest req;
        const SingleSample& a = corpus.entries[0].sample;
        const SingleSample& b = corpus.entries[12].sample;
        TrainingSample pair = make_diptych(a, b);
        for (auto& cond : pair.conditions) req.conditions.push_back(cond);
        req.prompt = pair.target_prompt;
        req.spans = pair.spans;
        req.steps = 8;
        req.audit = true;
        run_sample(ckpt.model, req);
    } catch (const NumericError& e) {
        check.expect(false, std::string("mask audit failed: ") + e.what());
    }
    out << "50 audited training iterations plus an audited c=2 sampling run";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 5 ----

bool criterion_gradients(std::ostream& out) {
    Check check;
    ModelConfig cfg = tiny_config(2);
    Model model = Model::init(cfg, 5005);
    model.set_base_trainable(true);
    Rng rng(0xC5);
    for (LoraSite& site : model.lora.sites) {
        for (auto& v : site.subject.up.values()) v = rng.normal_float(0, 0.1f);
        for (auto& v : site.image.up.values()) v = rng.normal_float(0, 0.1f);
    }
    ModelInputs in = random_inputs(cfg, 2, rng);
    in.spans = PromptSpanTable{{{0, 4}, {4, 4}}};
    Tensor target = Tensor::zeros({cfg.n(), cfg.patch_dim()});
    for (auto& v : target.values()) v = rng.normal_float();

    // Analytic gradients with live routing.
    RoutingOptions live;
    std::vector<AffinityRecord> records;
    Graph g;
    Tensor vel = forward_velocity(g, model, in, live, &records);
    Tensor loss = mse(g, vel, target);
    g.backward(loss);

    // Finite differences probe the branch the analytic gradient lives on, so
    // the per-layer routing decision is pinned to its operating point.
    std::vector<RoutingAssignment> frozen;
    for (const AffinityRecord& rec : records) frozen.push_back(rec.assignment);
    check.expect(static_cast<int>(frozen.size()) == cfg.layers,
                 "expected one routing record per layer");
    RoutingOptions pinned = live;
    pinned.frozen_assignments = &frozen;

    auto loss_value = [&]() {
        Graph g2;
        g2.set_recording(false);
        Tensor v = forward_velocity(g2, model, in, pinned);
        double acc = 0.0;
        for (int64_t i = 0; i < v.size(); ++i) {
            const double d = static_cast<double>(v.data()[i]) - target.data()[i];
            acc += d * d;
        }
        return acc / static_cast<double>(v.size());
    };
    // The pinned branch agrees with the live forward at the operating point.
    check.expect(std::abs(loss_value() - loss.data()[0]) < 1e-7,
                 "frozen-routing loss differs at the operating point");

    std::vector<float*> params;
    std::vector<float> analytic;
    auto collect = [&](Tensor t) {
        t.ensure_grad();
        for (int64_t i = 0; i < t.size(); ++i) {
            params.push_back(t.data() + i);
            analytic.push_back(t.grad_data()[i]);
        }
    };
    for (auto& [name, tensor] : model.params.named()) collect(tensor);
    for (Tensor& t : trainable_parameters(model.lora)) collect(t);

    auto stats = oracle::gradcheck(params, analytic, loss_value, 1e-2f, 1e-4, 1e-3);
    const double rate = static_cast<double>(stats.passed) / stats.total;
    check.expect(rate >= 0.99, "agreement below 99%");
    out << stats.passed << "/" << stats.total << " parameters agree ("
        << 100.0 * rate << "%), worst rel err " << stats.worst;
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 6 ----

bool criterion_lora_contracts(std::ostream& out) {
    Check check;
    Rng rng(0xC6);
    ModelConfig cfg = tiny_config(2);

    // (a) zero up-matrices leave the base model output exactly intact,
    // independent of the down-matrix values.
    {
        Model a = Model::init(cfg, 66);
        Model b = Model::init(cfg, 66);
        for (LoraSite& site : b.lora.sites) {
            std::fill(site.subject.down.values().begin(), site.subject.down.values().end(),
                      0.0f);
            std::fill(site.image.down.values().begin(), site.image.down.values().end(), 0.0f);
        }
        ModelInputs in = random_inputs(cfg, 2, rng);
        in.spans = PromptSpanTable{{{0, 4}, {4, 4}}};
        Graph g;
        g.set_recording(false);
        Tensor va = forward_velocity(g, a, in, RoutingOptions{});
        Tensor vb = forward_velocity(g, b, in, RoutingOptions{});
        for (int64_t i = 0; i < va.size(); ++i)
            check.expect(va.data()[i] == vb.data()[i], "zero-init delta is not exactly zero");
    }

    // (b) prompt rows of every gated projection are invariant to all LoRA
    // weights (the gate keeps them on the frozen base path).
    {
        Model model = Model::init(cfg, 67);
        SequenceLayout lt = cfg.layout_for(2);
        auto labels = segment_labels(lt);
        Tensor x = Tensor::zeros({lt.total(), cfg.d});
        for (auto& v : x.values()) v = rng.normal_float();

        const BlockParams& bp = model.params.blocks[0];
        const Tensor* weights[] = {&bp.wq, &bp.wk, &bp.wv, &bp.wo};
        for (int site_idx = 0; site_idx < 4; ++site_idx) {
            LoraSite& site = model.lora.sites[static_cast<size_t>(site_idx)];
            Graph g;
            g.set_recording(false);
            Tensor before =
                gated_project(g, x, labels, *weights[site_idx], site, model.lora.policy);
            for (auto& v : site.subject.up.values()) v = rng.normal_float();
            for (auto& v : site.subject.down.values()) v = rng.normal_float();
            for (auto& v : site.image.up.values()) v = rng.normal_float();
            for (auto& v : site.image.down.values()) v = rng.normal_float();
            Tensor after =
                gated_project(g, x, labels, *weights[site_idx], site, model.lora.policy);
            for (int i = lt.prompt_begin(); i < lt.prompt_begin() + lt.m; ++i)
                check.expect(
                    std::memcmp(before.mat().row(i).data(), after.mat().row(i).data(),
                                static_cast<size_t>(cfg.d) * sizeof(float)) == 0,
                    "prompt row moved under LoRA weight changes");
        }
    }

    // (c) frozen base across a full (short) training run.
    {
        const std::string dir = workdir("c6_train");
        TrainConfig tc;
        tc.model = cfg;
        tc.stage_iters = {8, 6, 6};
        tc.batch = 4;
        tc.seed = 68;
        tc.threads = 1;
        Corpus corpus = generate_corpus(26, 1, 68, cfg.cond_edge, cfg.image_edge);
        Model init_model = Model::init(cfg, derive_seed(tc.seed, 0xA11CE));
        const uint64_t before = base_parameter_hash(init_model);
        TrainResult result = train(tc, corpus, dir);
        LoadedCheckpoint final = load_checkpoint(result.checkpoint_paths[2]);
        check.expect(base_parameter_hash(final.model) == before,
                     "frozen base parameters changed during training");
    }
    out << "zero-init equality, prompt-row invariance, frozen base hash";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 7 ----

bool criterion_curriculum(std::ostream& out) {
    Check check;
    Corpus corpus = generate_corpus(64, 2, 7, 16, 32);
    Rng rng(0xC7);
    int diptychs = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        if (curriculum_batch(2, corpus, rng).condition_count() == 2) ++diptychs;
    const double fraction = static_cast<double>(diptychs) / draws;
    check.expect(fraction >= 0.78 && fraction <= 0.82,
                 "stage-2 diptych fraction outside 0.80 +/- 0.02");

    int same_category = 0;
    const int stage3_draws = 2000;
    for (int i = 0; i < stage3_draws; ++i) {
        TrainingSample s = curriculum_batch(3, corpus, rng);
        if (s.pairing == Pairing::SameCategory && s.condition_count() == 2) ++same_category;
    }
    check.expect(same_category == stage3_draws, "stage-3 draw was not a same-category pair");
    out << "stage-2 fraction " << fraction << ", stage-3 same-category "
        << same_category << "/" << stage3_draws;
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 8 ----

struct AblationScores {
    double full = 0.0;
    double no_dynamic = 0.0;
    double no_diptych = 0.0;
};

double same_category_attr_rate(const Model& model, bool dynamic_routing,
                               const Corpus& corpus) {
    EvalOptions options;
    options.cases_per_scenario = 32;
    options.seeds = 4;
    options.steps = 20;
    options.seed = 8;
    options.threads = g_threads;
    EvalVariant variant{"variant", &model, dynamic_routing};
    return eval_scenario(variant, corpus, "c2_same_category", options, nullptr).attr_match;
}

bool criterion_directional_ablation(std::ostream& out) {
    Check check;
    const std::string dir = workdir("c8_ablation");

    // Canonical data pathway: the corpus goes through the on-disk format
    // exactly as the CLI pipeline would produce it.
    const uint64_t data_seed = 42;
    write_dataset(dir + "/data", generate_corpus(512, 4, data_seed, 16, 32), data_seed);
    Corpus corpus = load_dataset(dir + "/data");

    // Ablations follow the module-removal protocol: each variant is trained
    // AND sampled with its mechanism removed.
    auto train_variant = [&](const std::string& name, bool dynamic, bool diptych) {
        TrainConfig cfg;  // default desk-scale config: 2000/1000/1000, batch 8
        cfg.seed = 42;
        cfg.threads = g_threads;
        cfg.dynamic_routing = dynamic;
        cfg.diptych = diptych;
        TrainResult result = train(cfg, corpus, dir + "/" + name);
        return result.checkpoint_paths.back();
    };

    const auto t0 = std::chrono::steady_clock::now();
    const std::string full_ckpt = train_variant("full", true, true);
    const std::string nodyn_ckpt = train_variant("no_dynamic", false, true);
    const std::string nodip_ckpt = train_variant("no_diptych", true, false);
    const double train_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    LoadedCheckpoint full = load_checkpoint(full_ckpt);
    LoadedCheckpoint nodyn = load_checkpoint(nodyn_ckpt);
    LoadedCheckpoint nodip = load_checkpoint(nodip_ckpt);

    AblationScores scores;
    scores.full = same_category_attr_rate(full.model, true, corpus);
    scores.no_dynamic = same_category_attr_rate(nodyn.model, false, corpus);
    scores.no_diptych = same_category_attr_rate(nodip.model, true, corpus);

    // Supplementary context: the inference-only ablation on the full model.
    const double full_routing_off = same_category_attr_rate(full.model, false, corpus);

    check.expect(scores.full > scores.no_dynamic,
                 "full model does not beat the no-dynamic-routing variant");
    check.expect(scores.no_diptych < scores.no_dynamic &&
                     scores.no_diptych < scores.full,
                 "no-diptych variant is not the lowest");
    out << "attr match on 32 same-category cases x 4 seeds: full " << scores.full
        << ", no-dynamic-routing " << scores.no_dynamic << ", no-diptych "
        << scores.no_diptych << "; inference-only routing ablation of the full model: "
        << scores.full << " on vs " << full_routing_off << " off (training "
        << train_time << " s)";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 9 ----

bool criterion_scalability(std::ostream& out) {
    Check check;
    const std::string dir = workdir("c9_scale");
    TrainConfig cfg;
    cfg.model = ModelConfig{};
    cfg.stage_iters = {40, 40, 20};  // c <= 2 training throughout
    cfg.batch = 4;
    cfg.seed = 9;
    cfg.threads = g_threads;
    Corpus corpus = generate_corpus(48, 1, 9, cfg.model.cond_edge, cfg.model.image_edge);
    TrainResult result = train(cfg, corpus, dir);
    LoadedCheckpoint ckpt = load_checkpoint(result.checkpoint_paths[2]);

    // Three conditions at inference although training only ever saw two.
    SampleRequest req;
    std::vector<std::vector<int>> mentions;
    std::vector<int> picks = {0, 1, 2};
    std::vector<int> seen_categories;
    for (int idx : picks) {
        const SingleSample& s = corpus.entries[static_cast<size_t>(idx)].sample;
        std::vector<int> mention = s.cond_prompt;
        for (int cat : seen_categories)
            if (cat == s.spec.category) mention[0] = vocab::Another;
        seen_categories.push_back(s.spec.category);
        req.conditions.emplace_back(s.cond, mention);
        mentions.push_back(mention);
    }
    auto [prompt, spans] = multi_subject_prompt(mentions);
    req.prompt = prompt;
    req.spans = spans;
    req.steps = 6;
    req.seed = 99;
    req.audit = true;  // well-formed masks enforced at every step
    req.trace_stride = 1;

    SampleResult first = run_sample(ckpt.model, req);
    SampleResult second = run_sample(ckpt.model, req);
    check.expect(std::memcmp(first.image.px.data(), second.image.px.data(),
                             first.image.px.size() * sizeof(float)) == 0,
                 "c=3 sampling is not deterministic");

    const std::string trace_dir = dir + "/trace";
    export_trace(first.trace, trace_dir);
    size_t pgm_count = 0;
    for (const auto& e : fs::directory_iterator(trace_dir))
        if (e.path().extension() == ".pgm") ++pgm_count;
    const size_t expected = static_cast<size_t>(req.steps) *
                            static_cast<size_t>(ckpt.model.config.layers) * 3u;
    check.expect(pgm_count == expected, "trace heatmap count != steps*layers*c");
    out << "c=3 sampling deterministic, " << pgm_count << " heatmaps (expected "
        << expected << ")";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

// ---- criterion 10 ----

bool criterion_determinism(std::ostream& out) {
    Check check;
    const std::string dir = workdir("c10_determinism");

    // Dataset bytes.
    Corpus corpus_a = generate_corpus(24, 2, 1234, 16, 32);
    write_dataset(dir + "/ds_a", corpus_a, 1234);
    Corpus corpus_b = generate_corpus(24, 2, 1234, 16, 32);
    write_dataset(dir + "/ds_b", corpus_b, 1234);
    std::vector<std::string> rels;
    for (const auto& e : fs::recursive_directory_iterator(dir + "/ds_a"))
        if (e.is_regular_file())
            rels.push_back(fs::relative(e.path(), dir + "/ds_a").string());
    check.expect(!rels.empty(), "dataset produced no files");
    for (const std::string& rel : rels)
        check.expect(file_bytes(dir + "/ds_a/" + rel) == file_bytes(dir + "/ds_b/" + rel),
                     "dataset bytes differ for " + rel);

    // loss.csv in single-threaded mode.
    TrainConfig cfg;
    cfg.model = ModelConfig{};
    cfg.stage_iters = {8, 6, 6};
    cfg.batch = 4;
    cfg.seed = 77;
    cfg.threads = 1;
    Corpus corpus = load_dataset(dir + "/ds_a");
    TrainResult ra = train(cfg, corpus, dir + "/tr_a");
    TrainResult rb = train(cfg, corpus, dir + "/tr_b");
    check.expect(file_bytes(dir + "/tr_a/loss.csv") == file_bytes(dir + "/tr_b/loss.csv"),
                 "loss.csv differs between identical runs");
    check.expect(file_bytes(ra.checkpoint_paths[2]) == file_bytes(rb.checkpoint_paths[2]),
                 "final checkpoints differ");

    // Sampled image bytes. Entries 0 and 2 belong to distinct subjects.
    LoadedCheckpoint ckpt = load_checkpoint(ra.checkpoint_paths[2]);
    TrainingSample pair =
        make_diptych(corpus.entries[0].sample, corpus.entries[2].sample);
    SampleRequest req;
    for (auto& cond : pair.conditions) req.conditions.push_back(cond);
    req.prompt = pair.target_prompt;
    req.spans = pair.spans;
    req.steps = 10;
    req.seed = 5;
    SampleResult sa = run_sample(ckpt.model, req);
    SampleResult sb = run_sample(ckpt.model, req);
    write_png(dir + "/img_a.png", sa.image);
    write_png(dir + "/img_b.png", sb.image);
    check.expect(file_bytes(dir + "/img_a.png") == file_bytes(dir + "/img_b.png"),
                 "sampled image bytes differ");
    out << "dataset, loss.csv, checkpoint and image bytes reproduce";
    if (!check.ok) out << " [" << check.detail.str() << "]";
    return check.ok;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    g_workdir = (fs::temp_directory_path() / "sflow_acceptance").string();
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string part;
            while (std::getline(ss, part, ',')) only.insert(std::stoi(part));
        } else if (arg == "--workdir" && i + 1 < argc) {
            g_workdir = argv[++i];
        } else if (arg == "--threads" && i + 1 < argc) {
            g_threads = std::stoi(argv[++i]);
        } else {
            std::cerr << "usage: sflow_acceptance [--only k,k,...] [--workdir DIR]"
                         " [--threads N]\n";
            return 1;
        }
    }
    fs::create_directories(g_workdir);

    struct Entry {
        int id;
        const char* name;
        std::function<bool(std::ostream&)> run;
    };
    const std::vector<Entry> criteria = {
        {1, "mask enumeration oracle", criterion_mask_enumeration},
        {2, "blocked-token invariance", criterion_blocked_invariance},
        {3, "subset-attention equivalence", criterion_subset_attention},
        {4, "routing bijectivity", criterion_routing_bijectivity},
        {5, "gradient correctness", criterion_gradients},
        {6, "LoRA contracts", criterion_lora_contracts},
        {7, "curriculum statistics", criterion_curriculum},
        {8, "directional ablation", criterion_directional_ablation},
        {9, "scalability smoke", criterion_scalability},
        {10, "determinism", criterion_determinism},
    };

    bool all_ok = true;
    for (const Entry& entry : criteria) {
        if (!only.empty() && !only.count(entry.id)) continue;
        std::ostringstream detail;
        bool ok = false;
        try {
            ok = entry.run(detail);
        } catch (const std::exception& e) {
            detail << "exception: " << e.what();
        }
        all_ok = all_ok && ok;
        std::cout << "CRITERION " << entry.id << " (" << entry.name
                  << "): " << (ok ? "PASS" : "FAIL") << " - " << detail.str() << "\n"
                  << std::flush;
    }
    return all_ok ? 0 : 1;
}
