#include "sflow/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "sflow/checkpoint.hpp"

namespace sflow {

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("config: cannot open " + path);
    nlohmann::json j;
    f >> j;
    TrainConfig c;
    if (j.contains("stage_iters")) {
        const auto iters = j.at("stage_iters").get<std::vector<int>>();
        if (iters.size() != 3) throw DataError("config: stage_iters needs 3 entries");
        std::copy(iters.begin(), iters.end(), c.stage_iters.begin());
    }
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.static_routing = j.value("static_routing", c.static_routing);
    c.dynamic_routing = j.value("dynamic_routing", c.dynamic_routing);
    c.diptych = j.value("diptych", c.diptych);
    c.dual_lora = j.value("dual_lora", c.dual_lora);
    c.threads = j.value("threads", c.threads);
    c.debug_audit = j.value("debug_audit", c.debug_audit);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    return c;
}

std::string train_config_json(const TrainConfig& c) {
    nlohmann::json j = {{"stage_iters", c.stage_iters},
                        {"batch", c.batch},
                        {"lr", c.lr},
                        {"seed", c.seed},
                        {"static_routing", c.static_routing},
                        {"dynamic_routing", c.dynamic_routing},
                        {"diptych", c.diptych},
                        {"dual_lora", c.dual_lora},
                        {"threads", c.threads},
                        {"debug_audit", c.debug_audit},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"model", c.model}};
    return j.dump(2);
}

FlowState FlowState::make(const Image& target, Rng& rng) {
    FlowState s;
    s.x0 = target;
    float t = 0.0f;
    do {
        t = rng.uniform_float();
    } while (t <= 0.0f);
    s.t = t;
    s.noise = Image::filled(target.h, target.w, 0, 0, 0);
    for (auto& v : s.noise.px) v = rng.normal_float();
    s.xt = Image::filled(target.h, target.w, 0, 0, 0);
    for (size_t i = 0; i < s.xt.px.size(); ++i)
        s.xt.px[i] = (1.0f - t) * s.x0.px[i] + t * s.noise.px[i];
    return s;
}

Tensor flow_loss(Graph& g, const Model& model, const TrainingSample& sample,
                 const FlowState& flow, const RoutingOptions& opts) {
    ModelInputs inputs;
    for (const auto& [image, tokens] : sample.conditions) {
        inputs.cond_images.push_back(image);
        inputs.cond_text.push_back(tokens);
    }
    inputs.prompt = pad_prompt(sample.target_prompt, model.config.max_m);
    inputs.spans = sample.spans;
    inputs.noisy = flow.xt;
    inputs.t = flow.t;

    Tensor predicted = forward_velocity(g, model, inputs, opts);

    Image vimg = Image::filled(flow.x0.h, flow.x0.w, 0, 0, 0);
    for (size_t i = 0; i < vimg.px.size(); ++i)
        vimg.px[i] = flow.noise.px[i] - flow.x0.px[i];
    Tensor target_tokens = patchify_raw(vimg, model.config.patch);
    return mse(g, predicted, target_tokens);
}

// ---- Adam ----

namespace {

struct AdamState {
    std::vector<std::vector<float>> m, v;
    int64_t step = 0;
};

void adam_step(std::vector<Tensor>& params, AdamState& state, const TrainConfig& cfg,
               float grad_scale) {
    if (state.m.empty()) {
        for (Tensor& p : params) {
            state.m.emplace_back(static_cast<size_t>(p.size()), 0.0f);
            state.v.emplace_back(static_cast<size_t>(p.size()), 0.0f);
        }
    }
    state.step += 1;
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.step));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        p.ensure_grad();
        float* m = state.m[i].data();
        float* v = state.v[i].data();
        float* w = p.data();
        const float* grad = p.grad_data();
        for (int64_t k = 0; k < p.size(); ++k) {
            const float gk = grad[k] * grad_scale;
            m[k] = cfg.beta1 * m[k] + (1.0f - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0f - cfg.beta2) * gk * gk;
            const float mhat = m[k] / bc1;
            const float vhat = v[k] / bc2;
            w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

}  // namespace

// ---- training loop ----

TrainResult train(const TrainConfig& config, const Corpus& corpus,
                  const std::string& out_dir) {
    config.model.validate();
    if (corpus.entries.empty()) throw DataError("train: corpus is empty");
    if (corpus.cond_edge != config.model.cond_edge ||
        corpus.target_edge != config.model.image_edge)
        throw DataError("train: corpus image extents do not match the model config");
    if (config.model.vocab < vocab::size())
        throw DataError("train: model vocabulary smaller than the token set");
    if (config.batch < 1) throw DataError("train: batch must be >= 1");

    std::filesystem::create_directories(out_dir);

    Model model = Model::init(config.model, derive_seed(config.seed, 0xA11CE));
    model.lora.policy = config.dual_lora ? LoraPolicy::DualBranch : LoraPolicy::SingleUniform;
    std::vector<Tensor> main_params = trainable_parameters(model.lora);

    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    const int threads =
        config.threads > 0 ? config.threads : std::max(1, std::min(config.batch, hw));

    std::vector<Model> workers;
    workers.reserve(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) workers.push_back(model.worker_clone());
    std::vector<std::vector<Tensor>> worker_params;
    for (Model& wm : workers) worker_params.push_back(trainable_parameters(wm.lora));

    RoutingOptions opts;
    opts.static_routing = config.static_routing;
    opts.dynamic_routing = config.dynamic_routing;
    opts.audit = config.debug_audit;

    AdamState adam;
    TrainResult result;
    std::ofstream loss_csv(out_dir + "/loss.csv");
    loss_csv << "iter,stage,loss\n";

    int64_t global_iter = 0;
    for (int stage = 1; stage <= 3; ++stage) {
        const int iters = config.stage_iters[static_cast<size_t>(stage - 1)];
        const int effective_stage = config.diptych ? stage : 1;

        for (int it = 0; it < iters; ++it, ++global_iter) {
            std::vector<double> slot_loss(static_cast<size_t>(config.batch), 0.0);
            std::vector<uint8_t> slot_is_diptych(static_cast<size_t>(config.batch), 0);

            auto run_slots = [&](int worker_id) {
                Model& wm = workers[static_cast<size_t>(worker_id)];
                for (int slot = worker_id; slot < config.batch; slot += threads) {
                    Rng rng(derive_seed(config.seed,
                                        0xB0000000ull +
                                            static_cast<uint64_t>(global_iter) *
                                                static_cast<uint64_t>(config.batch) +
                                            static_cast<uint64_t>(slot)));
                    TrainingSample sample = curriculum_batch(effective_stage, corpus, rng);
                    slot_is_diptych[static_cast<size_t>(slot)] =
                        sample.condition_count() == 2 ? 1 : 0;
                    FlowState flow = FlowState::make(sample.target, rng);
                    Graph g;
                    Tensor loss = flow_loss(g, wm, sample, flow, opts);
                    slot_loss[static_cast<size_t>(slot)] = loss.data()[0];
                    g.backward(loss);
                }
            };

            if (threads == 1) {
                run_slots(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < threads; ++w) pool.emplace_back(run_slots, w);
                for (std::thread& t : pool) t.join();
            }

            double batch_loss = 0.0;
            for (int slot = 0; slot < config.batch; ++slot) {
                batch_loss += slot_loss[static_cast<size_t>(slot)];
                if (slot_is_diptych[static_cast<size_t>(slot)])
                    result.diptych_samples += 1;
                else
                    result.single_samples += 1;
            }
            batch_loss /= config.batch;
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at iteration " +
                                   std::to_string(global_iter + 1));

            // Fixed-order gradient reduction into the canonical parameters.
            for (size_t pi = 0; pi < main_params.size(); ++pi) {
                Tensor& p = main_params[pi];
                p.ensure_grad();
                for (auto& wparams : worker_params) {
                    Tensor& wp = wparams[pi];
                    if (!wp.has_grad()) continue;
                    for (int64_t k = 0; k < p.size(); ++k)
                        p.grad_data()[k] += wp.grad_data()[k];
                }
            }
            adam_step(main_params, adam, config, 1.0f / static_cast<float>(config.batch));
            for (Tensor& p : main_params) p.zero_grad();
            for (size_t w = 0; w < workers.size(); ++w) {
                workers[w].lora.copy_values_from(model.lora);
                for (Tensor& wp : worker_params[w]) wp.zero_grad();
            }

            result.loss_trace.push_back(batch_loss);
            loss_csv << (global_iter + 1) << "," << stage << "," << batch_loss << "\n";
        }

        const std::string path = out_dir + "/ckpt_stage" + std::to_string(stage) + ".sfck";
        save_checkpoint(path, model, CheckpointMeta{stage, global_iter, config.seed});
        result.checkpoint_paths.push_back(path);
    }
    return result;
}

}  // namespace sflow
