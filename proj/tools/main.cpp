#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include "sflow/checkpoint.hpp"
#include "sflow/metrics.hpp"
#include "sflow/sampler.hpp"
#include "sflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace sflow;

namespace {

constexpr const char* kVersion = "0.1.0";

void write_manifest(const std::string& path, const std::string& subcommand,
                    uint64_t seed, const nlohmann::json& config,
                    const std::vector<std::string>& artifacts) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    nlohmann::json manifest = {{"tool", "sflow"},
                               {"version", kVersion},
                               {"subcommand", subcommand},
                               {"seed", seed},
                               {"config", config},
                               {"artifacts", artifacts}};
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest " + path);
    f << manifest.dump(2) << "\n";
}

struct CondArg {
    Image image;
    std::vector<int> mention;
};

CondArg parse_cond(const std::string& arg) {
    const size_t colon = arg.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= arg.size())
        throw DataError("--cond expects IMAGE.png:\"prompt words\", got '" + arg + "'");
    CondArg out;
    out.image = read_png(arg.substr(0, colon));
    out.mention = tokenize(arg.substr(colon + 1));
    if (out.mention.empty()) throw DataError("--cond prompt is empty in '" + arg + "'");
    return out;
}

SampleRequest build_request(const Model& model, const std::vector<std::string>& cond_args,
                            const std::string& prompt_text, int steps, uint64_t seed,
                            bool no_static, bool no_dynamic, bool per_head, bool audit,
                            int trace_stride) {
    SampleRequest req;
    std::vector<std::vector<int>> mentions;
    for (const std::string& arg : cond_args) {
        CondArg cond = parse_cond(arg);
        if (static_cast<int>(cond.mention.size()) != model.config.m_prime)
            throw DataError("condition prompt must have " +
                            std::to_string(model.config.m_prime) + " tokens");
        mentions.push_back(cond.mention);
        req.conditions.emplace_back(std::move(cond.image), std::move(cond.mention));
    }
    req.prompt = tokenize(prompt_text);
    if (req.prompt.empty()) throw DataError("--prompt is empty");
    req.spans = match_mention_spans(req.prompt, mentions);
    req.steps = steps;
    req.seed = seed;
    req.static_routing = !no_static;
    req.dynamic_routing = !no_dynamic;
    req.per_head_affinity = per_head;
    req.audit = audit;
    req.trace_stride = trace_stride;
    return req;
}

void print_mask_summary(const FlowMask& stat, const FlowMask* dyn,
                        const FlowMask& combined) {
    const SequenceLayout& lt = combined.layout;
    const int cond_end = lt.prompt_begin();
    const int prompt_end = cond_end + lt.m;
    int64_t prompt_to_cond = 0, cond_to_prompt = 0, cond_to_cond = 0, noise_to_cond = 0;
    for (int i = 0; i < lt.total(); ++i)
        for (int j = 0; j < lt.total(); ++j) {
            if (!combined.blocked(i, j)) continue;
            const bool i_cond = i < cond_end, j_cond = j < cond_end;
            const bool i_prompt = i >= cond_end && i < prompt_end;
            const bool j_prompt = j >= cond_end && j < prompt_end;
            const bool i_noise = i >= prompt_end;
            if (i_prompt && j_cond)
                ++prompt_to_cond;
            else if (i_cond && j_prompt)
                ++cond_to_prompt;
            else if (i_cond && j_cond)
                ++cond_to_cond;
            else if (i_noise && j_cond)
                ++noise_to_cond;
        }
    std::cout << "layout: c=" << lt.c << " n'=" << lt.n_prime << " m'=" << lt.m_prime
              << " m=" << lt.m << " n=" << lt.n << " L=" << lt.total() << "\n";
    std::cout << "blocked prompt->condition: " << prompt_to_cond << "\n";
    std::cout << "blocked condition->prompt: " << cond_to_prompt << "\n";
    std::cout << "blocked condition->condition: " << cond_to_cond << "\n";
    std::cout << "blocked noise->condition (dynamic): " << noise_to_cond << "\n";
    std::cout << "blocked static total: " << stat.blocked_count() << "\n";
    if (dyn) std::cout << "blocked dynamic total: " << dyn->blocked_count() << "\n";
    std::cout << "blocked combined total: " << combined.blocked_count() << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"Desk-scale multi-subject customization lab: a toy diffusion "
                 "transformer with static and dynamic attention routing"};
    app.require_subcommand(1);

    // ---- build-dataset ----
    auto* build = app.add_subcommand("build-dataset", "Generate the synthetic corpus");
    std::string bd_out;
    int bd_subjects = 512, bd_renders = 4, bd_cond_edge = 16, bd_target_edge = 32;
    uint64_t bd_seed = 0;
    build->add_option("--out", bd_out, "output directory")->required();
    build->add_option("--subjects", bd_subjects, "number of subjects");
    build->add_option("--renders", bd_renders, "target renders per subject");
    build->add_option("--seed", bd_seed, "master seed");
    build->add_option("--cond-edge", bd_cond_edge, "condition image edge");
    build->add_option("--target-edge", bd_target_edge, "target image edge");
    build->callback([&] {
        fs::create_directories(bd_out);
        write_manifest(bd_out + "/manifest.json", "build-dataset", bd_seed,
                       {{"subjects", bd_subjects},
                        {"renders", bd_renders},
                        {"cond_edge", bd_cond_edge},
                        {"target_edge", bd_target_edge}},
                       {bd_out});
        Corpus corpus =
            generate_corpus(bd_subjects, bd_renders, bd_seed, bd_cond_edge, bd_target_edge);
        write_dataset(bd_out, corpus, bd_seed);
        std::cout << "wrote " << corpus.entries.size() << " samples to " << bd_out << "\n";
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "Train LoRA branches over the curriculum");
    std::string tr_data, tr_out, tr_config_path, tr_iters;
    bool tr_no_static = false, tr_no_dynamic = false, tr_no_diptych = false;
    bool tr_no_dual = false, tr_audit = false;
    uint64_t tr_seed = 0;
    int tr_batch = 0, tr_threads = -1;
    double tr_lr = 0.0;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--config", tr_config_path, "JSON training config");
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "master seed");
    tr->add_option("--iters", tr_iters, "stage iterations a,b,c");
    auto* tr_batch_opt = tr->add_option("--batch", tr_batch, "batch size");
    auto* tr_lr_opt = tr->add_option("--lr", tr_lr, "learning rate");
    auto* tr_threads_opt =
        tr->add_option("--threads", tr_threads, "worker threads (1 = bit-reproducible)");
    tr->add_flag("--no-static-routing", tr_no_static, "disable the static attention mask");
    tr->add_flag("--no-dynamic-routing", tr_no_dynamic, "disable per-step routing");
    tr->add_flag("--no-diptych", tr_no_diptych, "train on single-subject draws only");
    tr->add_flag("--no-dual-lora", tr_no_dual, "one uniform adapter instead of the pair");
    tr->add_flag("--debug-audit", tr_audit, "audit masks every step");
    tr->callback([&] {
        TrainConfig cfg =
            tr_config_path.empty() ? TrainConfig{} : load_train_config(tr_config_path);
        if (!tr_iters.empty()) {
            std::array<int, 3> iters{};
            if (std::sscanf(tr_iters.c_str(), "%d,%d,%d", &iters[0], &iters[1],
                            &iters[2]) != 3)
                throw DataError("--iters expects three comma-separated counts");
            cfg.stage_iters = iters;
        }
        if (!tr_seed_opt->empty()) cfg.seed = tr_seed;
        if (!tr_batch_opt->empty()) cfg.batch = tr_batch;
        if (!tr_lr_opt->empty()) cfg.lr = static_cast<float>(tr_lr);
        if (!tr_threads_opt->empty()) cfg.threads = tr_threads;
        if (tr_no_static) cfg.static_routing = false;
        if (tr_no_dynamic) cfg.dynamic_routing = false;
        if (tr_no_diptych) cfg.diptych = false;
        if (tr_no_dual) cfg.dual_lora = false;
        if (tr_audit) cfg.debug_audit = true;

        fs::create_directories(tr_out);
        write_manifest(tr_out + "/manifest.json", "train", cfg.seed,
                       nlohmann::json::parse(train_config_json(cfg)),
                       {tr_out + "/loss.csv", tr_out + "/ckpt_stage3.sfck"});
        Corpus corpus = load_dataset(tr_data);
        TrainResult result = train(cfg, corpus, tr_out);
        std::cout << "trained " << result.loss_trace.size() << " iterations; checkpoints:\n";
        for (const std::string& path : result.checkpoint_paths)
            std::cout << "  " << path << "\n";
    });

    // ---- sample ----
    auto* sm = app.add_subcommand("sample", "Generate an image from a checkpoint");
    std::string sm_ckpt, sm_prompt, sm_out, sm_trace_dir;
    std::vector<std::string> sm_conds;
    int sm_steps = 20, sm_trace_stride = 5;
    uint64_t sm_seed = 0;
    bool sm_no_static = false, sm_no_dynamic = false, sm_per_head = false, sm_audit = false;
    sm->add_option("--ckpt", sm_ckpt, "checkpoint file")->required();
    sm->add_option("--cond", sm_conds, "condition IMAGE.png:\"prompt\" (repeatable)");
    sm->add_option("--prompt", sm_prompt, "target prompt")->required();
    sm->add_option("--steps", sm_steps, "integration steps");
    sm->add_option("--seed", sm_seed, "sampling seed");
    sm->add_option("--out", sm_out, "output PNG")->required();
    sm->add_option("--trace", sm_trace_dir, "affinity trace directory");
    sm->add_option("--trace-stride", sm_trace_stride, "record every k-th step");
    sm->add_flag("--no-static-routing", sm_no_static, "disable the static mask");
    sm->add_flag("--no-dynamic-routing", sm_no_dynamic, "disable dynamic routing");
    sm->add_flag("--per-head-routing", sm_per_head, "route each head separately");
    sm->add_flag("--audit", sm_audit, "audit masks every step");
    sm->callback([&] {
        LoadedCheckpoint ckpt = load_checkpoint(sm_ckpt);
        SampleRequest req = build_request(
            ckpt.model, sm_conds, sm_prompt, sm_steps, sm_seed, sm_no_static, sm_no_dynamic,
            sm_per_head, sm_audit, sm_trace_dir.empty() ? 0 : sm_trace_stride);
        write_manifest(sm_out + ".manifest.json", "sample", sm_seed,
                       {{"ckpt", sm_ckpt},
                        {"prompt", sm_prompt},
                        {"conditions", sm_conds},
                        {"steps", sm_steps},
                        {"static_routing", req.static_routing},
                        {"dynamic_routing", req.dynamic_routing},
                        {"layout",
                         {{"c", static_cast<int>(req.conditions.size())},
                          {"n_prime", ckpt.model.config.n_prime()},
                          {"m_prime", ckpt.model.config.m_prime},
                          {"m", ckpt.model.config.max_m},
                          {"n", ckpt.model.config.n()}}}},
                       {sm_out});
        SampleResult result = run_sample(ckpt.model, req);
        write_png(sm_out, result.image);
        if (!sm_trace_dir.empty()) export_trace(result.trace, sm_trace_dir);
        std::cout << "wrote " << sm_out << "\n";
    });

    // ---- trace-affinity ----
    auto* ta = app.add_subcommand("trace-affinity",
                                  "Sample while exporting per-layer affinity heatmaps");
    std::string ta_ckpt, ta_prompt, ta_out, ta_image;
    std::vector<std::string> ta_conds;
    int ta_steps = 20, ta_stride = 5;
    uint64_t ta_seed = 0;
    bool ta_no_dynamic = false;
    ta->add_option("--ckpt", ta_ckpt, "checkpoint file")->required();
    ta->add_option("--cond", ta_conds, "condition IMAGE.png:\"prompt\" (repeatable)")
        ->required();
    ta->add_option("--prompt", ta_prompt, "target prompt")->required();
    ta->add_option("--steps", ta_steps, "integration steps");
    ta->add_option("--stride", ta_stride, "record every k-th step");
    ta->add_option("--seed", ta_seed, "sampling seed");
    ta->add_option("--out", ta_out, "trace directory")->required();
    ta->add_option("--image", ta_image, "also write the sampled PNG here");
    ta->add_flag("--no-dynamic-routing", ta_no_dynamic, "disable dynamic routing");
    ta->callback([&] {
        LoadedCheckpoint ckpt = load_checkpoint(ta_ckpt);
        SampleRequest req = build_request(ckpt.model, ta_conds, ta_prompt, ta_steps, ta_seed,
                                          false, ta_no_dynamic, false, false, ta_stride);
        fs::create_directories(ta_out);
        write_manifest(ta_out + "/manifest.json", "trace-affinity", ta_seed,
                       {{"ckpt", ta_ckpt},
                        {"prompt", ta_prompt},
                        {"conditions", ta_conds},
                        {"steps", ta_steps},
                        {"stride", ta_stride}},
                       {ta_out});
        SampleResult result = run_sample(ckpt.model, req);
        export_trace(result.trace, ta_out);
        if (!ta_image.empty()) write_png(ta_image, result.image);
        std::cout << "wrote " << result.trace.entries.size() << " trace entries to "
                  << ta_out << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Run the ablation evaluation suite");
    std::string ev_ckpt, ev_ckpt_nodiptych, ev_ckpt_nobias, ev_data, ev_out;
    int ev_cases = 8, ev_seeds = 4, ev_steps = 20, ev_threads = 0;
    uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "full-model checkpoint")->required();
    ev->add_option("--ckpt-no-diptych", ev_ckpt_nodiptych, "no-diptych ablation checkpoint");
    ev->add_option("--ckpt-no-bias-mitigation", ev_ckpt_nobias,
                   "no-bias-mitigation ablation checkpoint");
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "metrics CSV path")->required();
    ev->add_option("--cases", ev_cases, "cases per scenario");
    ev->add_option("--seeds", ev_seeds, "seeds per case");
    ev->add_option("--steps", ev_steps, "sampler steps");
    ev->add_option("--seed", ev_seed, "evaluation seed");
    ev->add_option("--threads", ev_threads, "worker threads");
    ev->callback([&] {
        write_manifest(ev_out + ".manifest.json", "eval", ev_seed,
                       {{"ckpt", ev_ckpt},
                        {"ckpt_no_diptych", ev_ckpt_nodiptych},
                        {"ckpt_no_bias_mitigation", ev_ckpt_nobias},
                        {"cases", ev_cases},
                        {"seeds", ev_seeds},
                        {"steps", ev_steps}},
                       {ev_out});
        Corpus corpus = load_dataset(ev_data);
        LoadedCheckpoint full = load_checkpoint(ev_ckpt);

        std::vector<LoadedCheckpoint> extra;
        extra.reserve(2);
        std::vector<EvalVariant> variants;
        variants.push_back({"full", &full.model, true});
        variants.push_back({"no-dynamic-routing", &full.model, false});
        if (!ev_ckpt_nodiptych.empty()) {
            extra.push_back(load_checkpoint(ev_ckpt_nodiptych));
            variants.push_back({"no-diptych", &extra.back().model, true});
        }
        if (!ev_ckpt_nobias.empty()) {
            extra.push_back(load_checkpoint(ev_ckpt_nobias));
            variants.push_back({"no-bias-mitigation", &extra.back().model, true});
        }
        EvalOptions options;
        options.cases_per_scenario = ev_cases;
        options.seeds = ev_seeds;
        options.steps = ev_steps;
        options.seed = ev_seed;
        options.threads = ev_threads > 0
                              ? ev_threads
                              : static_cast<int>(
                                    std::max(1u, std::thread::hardware_concurrency()));

        std::ofstream csv(ev_out);
        if (!csv) throw DataError("cannot write " + ev_out);
        std::vector<MetricsRow> table = eval_suite(variants, corpus, options, &csv);

        std::cout << std::left << std::setw(22) << "variant" << std::setw(20) << "scenario"
                  << std::setw(14) << "identity_sim" << "attr_match\n";
        for (const MetricsRow& row : table)
            std::cout << std::left << std::setw(22) << row.variant << std::setw(20)
                      << row.scenario << std::setw(14) << std::setprecision(4)
                      << row.identity_sim << std::setprecision(4) << row.attr_match
                      << "\n";
        std::cout << "wrote " << ev_out << "\n";
    });

    // ---- inspect-mask ----
    auto* im = app.add_subcommand("inspect-mask", "Render the attention flow matrix");
    int im_c = 2, im_np = 16, im_mp = 4, im_m = 16, im_n = 64;
    std::string im_assignment, im_out;
    im->add_option("--c", im_c, "condition count");
    im->add_option("--n-prime", im_np, "condition image tokens per condition");
    im->add_option("--m-prime", im_mp, "condition text tokens per condition");
    im->add_option("--m", im_m, "prompt tokens");
    im->add_option("--n", im_n, "noise tokens");
    im->add_option("--assignment", im_assignment, "JSON file with per-noise-token choices");
    im->add_option("--out", im_out, "output PGM")->required();
    im->callback([&] {
        SequenceLayout layout = build_layout(im_c, im_np, im_mp, im_m, im_n);
        FlowMask stat = build_static_mask(layout);
        FlowMask combined = stat;
        FlowMask dyn = FlowMask::open(layout);
        bool have_dyn = false;
        if (!im_assignment.empty()) {
            std::ifstream f(im_assignment);
            if (!f) throw DataError("cannot open assignment file " + im_assignment);
            nlohmann::json j;
            try {
                f >> j;
            } catch (const nlohmann::json::exception& e) {
                throw DataError(std::string("malformed assignment file: ") + e.what());
            }
            if (!j.is_array()) throw DataError("assignment file must hold a JSON array");
            RoutingAssignment assignment;
            assignment.chosen = j.get<std::vector<int>>();
            dyn = build_dynamic_mask(assignment, layout);
            combined = combine(stat, dyn);
            have_dyn = true;
        }
        write_mask_pgm(combined, im_out);
        print_mask_summary(stat, have_dyn ? &dyn : nullptr, combined);
        std::cout << "wrote " << im_out << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
