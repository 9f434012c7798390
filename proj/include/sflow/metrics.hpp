#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sflow/data.hpp"
#include "sflow/model.hpp"

namespace sflow {

/// Cosine similarity of fixed seeded random-projection embeddings on a common
/// 16x16 grid. Identical inputs give exactly 1, a degenerate all-zero input
/// gives 0.
double identity_similarity(const Image& gen_region, const Image& ref_image);

struct RegionEntry {
    int condition = 0;
    int y0 = 0, x0 = 0, h = 0, w = 0;  // located region (blob box or strip fallback)
    int dominant_color = -1;           // palette index, -1 when nothing detected
    float texture_score = 0.0f;        // mean local luminance gradient
    bool color_match = false;
};

struct RegionReport {
    std::vector<RegionEntry> entries;
    double match_rate() const;
};

/// Locates one color blob per condition (ordered left to right by centroid)
/// and compares each blob's palette color against the expected spec color.
RegionReport attribute_match(const Image& gen, const std::vector<SubjectSpec>& specs);

struct EvalVariant {
    std::string name;
    const Model* model = nullptr;
    bool dynamic_routing = true;  // inference-time switch
};

struct EvalOptions {
    int cases_per_scenario = 8;
    int seeds = 4;
    int steps = 20;
    uint64_t seed = 0;
    int threads = 1;
};

struct MetricsRow {
    std::string variant;
    std::string scenario;
    double identity_sim = 0.0;
    double attr_match = 0.0;
};

/// One variant on one scenario ("c1", "c2_random", "c2_same_category", "c3"),
/// averaged over cases and seeds. When csv is given, one detail row per seed.
MetricsRow eval_scenario(const EvalVariant& variant, const Corpus& corpus,
                         const std::string& scenario, const EvalOptions& options,
                         std::ostream* csv);

/// Rows = variants x {c1, c2_random, c2_same_category, c3}, averaged over
/// cases and seeds. When csv is given, one detail row per (variant, scenario,
/// seed) with columns variant,scenario,seed,identity_sim,attr_match.
std::vector<MetricsRow> eval_suite(const std::vector<EvalVariant>& variants,
                                   const Corpus& corpus, const EvalOptions& options,
                                   std::ostream* csv);

}  // namespace sflow
