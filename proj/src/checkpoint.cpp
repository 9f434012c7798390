#include "sflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

namespace sflow {

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d", c.d},
                       {"heads", c.heads},
                       {"layers", c.layers},
                       {"patch", c.patch},
                       {"image_edge", c.image_edge},
                       {"cond_edge", c.cond_edge},
                       {"vocab", c.vocab},
                       {"max_m", c.max_m},
                       {"m_prime", c.m_prime},
                       {"ffn_mult", c.ffn_mult},
                       {"subject_rank", c.subject_rank},
                       {"image_rank", c.image_rank}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.patch = j.value("patch", c.patch);
    c.image_edge = j.value("image_edge", c.image_edge);
    c.cond_edge = j.value("cond_edge", c.cond_edge);
    c.vocab = j.value("vocab", c.vocab);
    c.max_m = j.value("max_m", c.max_m);
    c.m_prime = j.value("m_prime", c.m_prime);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.subject_rank = j.value("subject_rank", c.subject_rank);
    c.image_rank = j.value("image_rank", c.image_rank);
}

namespace {

std::vector<std::pair<std::string, Tensor>> all_named(const Model& model) {
    std::vector<std::pair<std::string, Tensor>> named = model.params.named();
    for (const LoraSite& site : model.lora.sites) {
        named.emplace_back("lora.subject." + site.name + ".down", site.subject.down);
        named.emplace_back("lora.subject." + site.name + ".up", site.subject.up);
        named.emplace_back("lora.image." + site.name + ".down", site.image.down);
        named.emplace_back("lora.image." + site.name + ".up", site.image.up);
    }
    return named;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const CheckpointMeta& meta) {
    const auto named = all_named(model);

    nlohmann::json manifest = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& [key, tensor] : named) {
        manifest.push_back({{"key", key}, {"shape", tensor.shape()}, {"offset", offset}});
        offset += tensor.size();
    }
    nlohmann::json header = {
        {"format", "sflow-checkpoint"},
        {"version", 1},
        {"config", model.config},
        // condition count varies per request; the per-condition budgets do not
        {"token_layout",
         {{"n_prime", model.config.n_prime()},
          {"m_prime", model.config.m_prime},
          {"m", model.config.max_m},
          {"n", model.config.n()}}},
        {"stage", meta.stage},
        {"step", meta.step},
        {"seed", meta.seed},
        {"lora_policy",
         model.lora.policy == LoraPolicy::DualBranch ? "dual_branch" : "single_uniform"},
        {"manifest", manifest}};
    const std::string header_str = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    const uint64_t header_len = header_str.size();
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [key, tensor] : named)
        f.write(reinterpret_cast<const char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.size() * sizeof(float)));
    if (!f) throw DataError("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    uint64_t header_len = 0;
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!f || header_len == 0 || header_len > (1u << 20))
        throw DataError("load_checkpoint: corrupt header length");
    std::string header_str(header_len, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw DataError("load_checkpoint: truncated header");

    nlohmann::json header = nlohmann::json::parse(header_str);
    if (header.value("format", "") != "sflow-checkpoint")
        throw DataError("load_checkpoint: not a checkpoint file");

    LoadedCheckpoint out;
    ModelConfig config = header.at("config").get<ModelConfig>();
    out.meta.stage = header.value("stage", 0);
    out.meta.step = header.value("step", 0);
    out.meta.seed = header.value("seed", 0ull);
    out.model = Model::init(config, out.meta.seed);
    out.model.lora.policy = header.value("lora_policy", "dual_branch") == "single_uniform"
                                ? LoraPolicy::SingleUniform
                                : LoraPolicy::DualBranch;

    auto named = all_named(out.model);
    std::unordered_map<std::string, Tensor> by_key;
    for (auto& [key, tensor] : named) by_key.emplace(key, tensor);

    size_t seen = 0;
    for (const auto& entry : header.at("manifest")) {
        const std::string key = entry.at("key").get<std::string>();
        auto it = by_key.find(key);
        if (it == by_key.end())
            throw DataError("load_checkpoint: unknown parameter " + key);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != it->second.shape())
            throw DataError("load_checkpoint: shape mismatch for " + key);
        f.read(reinterpret_cast<char*>(it->second.data()),
               static_cast<std::streamsize>(it->second.size() * sizeof(float)));
        if (!f) throw DataError("load_checkpoint: truncated blob at " + key);
        ++seen;
    }
    if (seen != by_key.size())
        throw DataError("load_checkpoint: manifest is missing parameters");
    return out;
}

uint64_t base_parameter_hash(const Model& model) {
    uint64_t hash = 1469598103934665603ull;
    for (const auto& [name, tensor] : model.params.named()) {
        const auto* bytes = reinterpret_cast<const uint8_t*>(tensor.data());
        for (int64_t i = 0; i < tensor.size() * static_cast<int64_t>(sizeof(float)); ++i) {
            hash ^= bytes[i];
            hash *= 1099511628211ull;
        }
    }
    return hash;
}

}  // namespace sflow
