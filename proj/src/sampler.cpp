#include "sflow/sampler.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace sflow {

SampleResult run_sample(const Model& model, const SampleRequest& request) {
    const ModelConfig& config = model.config;
    const int c = static_cast<int>(request.conditions.size());
    if (request.steps < 1) throw DataError("sample: steps must be >= 1");
    if (request.spans.count() != c)
        throw DataError("sample: span count differs from condition count");
    request.spans.validate(static_cast<int>(request.prompt.size()));

    ModelInputs inputs;
    for (const auto& [image, tokens] : request.conditions) {
        inputs.cond_images.push_back(image);
        inputs.cond_text.push_back(tokens);
    }
    inputs.prompt = pad_prompt(request.prompt, config.max_m);
    inputs.spans = request.spans;

    RoutingOptions opts;
    opts.static_routing = request.static_routing;
    opts.dynamic_routing = request.dynamic_routing;
    opts.per_head_affinity = request.per_head_affinity;
    opts.audit = request.audit;

    SampleResult result;
    result.trace.layout = config.layout_for(c);
    result.trace.grid = config.grid();

    Rng rng(derive_seed(request.seed, 0x5A3D1E));
    Image x = Image::filled(config.image_edge, config.image_edge, 0, 0, 0);
    for (auto& v : x.px) v = rng.normal_float();

    const float dt = 1.0f / static_cast<float>(request.steps);
    for (int step = 0; step < request.steps; ++step) {
        const float t = 1.0f - static_cast<float>(step) * dt;
        inputs.noisy = x;
        inputs.t = t;

        const bool record =
            request.trace_stride > 0 && step % request.trace_stride == 0;
        std::vector<AffinityRecord> records;
        Graph g;
        g.set_recording(false);
        Tensor velocity =
            forward_velocity(g, model, inputs, opts, record ? &records : nullptr);
        if (record && !records.empty()) {
            result.trace.recorded_steps += 1;
            for (AffinityRecord& rec : records)
                result.trace.entries.push_back(
                    {step, t, rec.layer, std::move(rec.affinity), std::move(rec.assignment)});
        }

        Image v = velocity_image(velocity, config);
        for (size_t i = 0; i < x.px.size(); ++i) x.px[i] -= dt * v.px[i];
    }

    for (auto& v : x.px) v = std::clamp(v, 0.0f, 1.0f);
    result.image = std::move(x);
    return result;
}

void export_trace(const AffinityTrace& trace, const std::string& dir) {
    if (trace.empty()) throw DataError("export_trace: trace is empty");
    std::filesystem::create_directories(dir);

    nlohmann::json entries = nlohmann::json::array();
    for (const TraceEntry& entry : trace.entries) {
        for (int k = 0; k < entry.affinity.conditions(); ++k) {
            char name[64];
            std::snprintf(name, sizeof(name), "t%03d_l%d_c%d.pgm", entry.step_index,
                          entry.layer, k);
            write_affinity_pgm(entry.affinity, k, trace.grid, dir + "/" + name);
        }
        entries.push_back({{"step", entry.step_index},
                           {"t", entry.t},
                           {"layer", entry.layer},
                           {"assignment", entry.assignment.chosen}});
    }

    nlohmann::json meta = {{"layout",
                            {{"c", trace.layout.c},
                             {"n_prime", trace.layout.n_prime},
                             {"m_prime", trace.layout.m_prime},
                             {"m", trace.layout.m},
                             {"n", trace.layout.n}}},
                           {"grid", trace.grid},
                           {"recorded_steps", trace.recorded_steps},
                           {"entries", entries}};
    std::ofstream f(dir + "/trace.json");
    if (!f) throw DataError("export_trace: cannot write trace.json");
    f << meta.dump(2) << "\n";
}

}  // namespace sflow
