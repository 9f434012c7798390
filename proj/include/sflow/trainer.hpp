#pragma once

#include <array>
#include <string>
#include <vector>

#include "sflow/data.hpp"
#include "sflow/model.hpp"

namespace sflow {

struct TrainConfig {
    std::array<int, 3> stage_iters = {2000, 1000, 1000};
    int batch = 8;
    float lr = 3e-3f;  // tuned for the frozen random-init backbone
    uint64_t seed = 0;
    bool static_routing = true;
    bool dynamic_routing = true;
    bool diptych = true;      // off: stages 2-3 fall back to single-subject draws
    bool dual_lora = true;    // off: one uniform adapter, prompt rows included
    int threads = 0;          // 0 = hardware concurrency; 1 = strict bit-reproducible
    bool debug_audit = false; // per-step mask audit
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    ModelConfig model;
};

TrainConfig load_train_config(const std::string& path);
std::string train_config_json(const TrainConfig& config);

/// Rectified-flow state in pixel space: x_t = (1 - t) x0 + t eps with t
/// uniform on (0, 1) and unit-Gaussian eps.
struct FlowState {
    Image x0;
    Image noise;
    Image xt;
    float t = 0.0f;

    static FlowState make(const Image& target, Rng& rng);
};

/// Mean squared error between the predicted velocity and (eps - x0) over
/// noise-token pixels only.
Tensor flow_loss(Graph& g, const Model& model, const TrainingSample& sample,
                 const FlowState& flow, const RoutingOptions& opts);

struct TrainResult {
    std::vector<std::string> checkpoint_paths;  // one per stage boundary
    std::vector<double> loss_trace;             // batch mean per iteration
    int64_t single_samples = 0;
    int64_t diptych_samples = 0;
};

/// Three-stage curriculum training of the LoRA branches with Adam; the base
/// model stays frozen. Writes loss.csv and a checkpoint per stage boundary
/// into out_dir. Aborts with NumericError on a non-finite loss.
TrainResult train(const TrainConfig& config, const Corpus& corpus,
                  const std::string& out_dir);

}  // namespace sflow
