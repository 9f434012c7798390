#include "sflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <thread>

#include "sflow/sampler.hpp"

namespace sflow {

namespace {

constexpr int kEmbedGrid = 16;
constexpr int kEmbedDim = 256;

const std::vector<float>& projection_matrix() {
    static const std::vector<float> matrix = [] {
        Rng rng(0x1D5EEDULL);  // fixed across runs by construction
        std::vector<float> m(static_cast<size_t>(kEmbedDim) * kEmbedGrid * kEmbedGrid * 3);
        for (auto& v : m) v = rng.normal_float();
        return m;
    }();
    return matrix;
}

std::vector<double> embed(const Image& img) {
    const Image resized = (img.h == kEmbedGrid && img.w == kEmbedGrid)
                              ? img
                              : resize_bilinear(img, kEmbedGrid, kEmbedGrid);
    const std::vector<float>& proj = projection_matrix();
    const size_t in_dim = resized.px.size();
    std::vector<double> out(kEmbedDim, 0.0);
    for (int row = 0; row < kEmbedDim; ++row) {
        double acc = 0.0;
        const float* w = proj.data() + static_cast<size_t>(row) * in_dim;
        for (size_t i = 0; i < in_dim; ++i) acc += static_cast<double>(w[i]) * resized.px[i];
        out[static_cast<size_t>(row)] = acc;
    }
    return out;
}

}  // namespace

double identity_similarity(const Image& gen_region, const Image& ref_image) {
    const std::vector<double> a = embed(gen_region);
    const std::vector<double> b = embed(ref_image);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    if (na == nb && dot == na) return 1.0;
    if (na == nb && dot == -na) return -1.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// ---- region detection ----

double RegionReport::match_rate() const {
    if (entries.empty()) return 0.0;
    double matched = 0.0;
    for (const RegionEntry& e : entries) matched += e.color_match ? 1.0 : 0.0;
    return matched / static_cast<double>(entries.size());
}

namespace {

float luminance(const Image& img, int y, int x) {
    return 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
}

float texture_score_of(const Image& img, int y0, int x0, int h, int w) {
    double acc = 0.0;
    int count = 0;
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) {
            if (x + 1 < x0 + w) {
                acc += std::abs(luminance(img, y, x + 1) - luminance(img, y, x));
                ++count;
            }
            if (y + 1 < y0 + h) {
                acc += std::abs(luminance(img, y + 1, x) - luminance(img, y, x));
                ++count;
            }
        }
    return count > 0 ? static_cast<float>(acc / count) : 0.0f;
}

struct ColorBlob {
    int color = -1;
    double weight = 0.0;
    double centroid_x = 0.0;
    int y0 = 0, x0 = 0, y1 = -1, x1 = -1;
    bool has_pixels() const { return y1 >= y0 && x1 >= x0 && weight > 0.0; }
};

}  // namespace

RegionReport attribute_match(const Image& gen, const std::vector<SubjectSpec>& specs) {
    const int c = static_cast<int>(specs.size());
    std::vector<ColorBlob> blobs(static_cast<size_t>(vocab::kColors));
    for (int color = 0; color < vocab::kColors; ++color) {
        blobs[static_cast<size_t>(color)].color = color;
        blobs[static_cast<size_t>(color)].y0 = gen.h;
        blobs[static_cast<size_t>(color)].x0 = gen.w;
    }

    // Soft nearest-palette vote per pixel. Each color is matched in its full
    // and texture-darkened tone so shading cannot leak votes to a neighboring
    // palette entry. Near-gray pixels do not vote: the background family is
    // low-chroma by construction and the dark palette tones would otherwise
    // soak up its mass.
    constexpr float kDarkTone = 0.55f;
    constexpr float kMinChroma = 0.12f;
    for (int y = 0; y < gen.h; ++y)
        for (int x = 0; x < gen.w; ++x) {
            const float cmax = std::max({gen.at(y, x, 0), gen.at(y, x, 1), gen.at(y, x, 2)});
            const float cmin = std::min({gen.at(y, x, 0), gen.at(y, x, 1), gen.at(y, x, 2)});
            if (cmax - cmin < kMinChroma) continue;
            int best = 0;
            float best_d2 = 1e9f;
            for (int color = 0; color < vocab::kColors; ++color) {
                const auto& rgb = palette_rgb(color);
                for (const float tone : {1.0f, kDarkTone}) {
                    const float dr = gen.at(y, x, 0) - tone * rgb[0];
                    const float dg = gen.at(y, x, 1) - tone * rgb[1];
                    const float db = gen.at(y, x, 2) - tone * rgb[2];
                    const float d2 = dr * dr + dg * dg + db * db;
                    if (d2 < best_d2) {
                        best_d2 = d2;
                        best = color;
                    }
                }
            }
            const float w = std::max(0.0f, 1.0f - 3.0f * std::sqrt(best_d2));
            if (w <= 0.0f) continue;
            ColorBlob& blob = blobs[static_cast<size_t>(best)];
            blob.weight += w;
            blob.centroid_x += w * x;
            blob.y0 = std::min(blob.y0, y);
            blob.x0 = std::min(blob.x0, x);
            blob.y1 = std::max(blob.y1, y);
            blob.x1 = std::max(blob.x1, x);
        }

    std::vector<const ColorBlob*> detected;
    for (const ColorBlob& blob : blobs)
        if (blob.has_pixels()) detected.push_back(&blob);
    std::sort(detected.begin(), detected.end(), [](const ColorBlob* a, const ColorBlob* b) {
        if (a->weight != b->weight) return a->weight > b->weight;
        return a->color < b->color;
    });
    if (static_cast<int>(detected.size()) > c) detected.resize(static_cast<size_t>(c));
    std::sort(detected.begin(), detected.end(), [](const ColorBlob* a, const ColorBlob* b) {
        return a->centroid_x / a->weight < b->centroid_x / b->weight;
    });

    RegionReport report;
    for (int k = 0; k < c; ++k) {
        RegionEntry entry;
        entry.condition = k;
        if (k < static_cast<int>(detected.size())) {
            const ColorBlob& blob = *detected[static_cast<size_t>(k)];
            entry.dominant_color = blob.color;
            entry.y0 = blob.y0;
            entry.x0 = blob.x0;
            entry.h = blob.y1 - blob.y0 + 1;
            entry.w = blob.x1 - blob.x0 + 1;
        } else {
            // No blob found: fall back to the k-th vertical strip.
            entry.dominant_color = -1;
            entry.y0 = 0;
            entry.h = gen.h;
            entry.w = gen.w / c;
            entry.x0 = k * entry.w;
            if (entry.w < 1) {
                entry.w = gen.w;
                entry.x0 = 0;
            }
        }
        entry.texture_score = texture_score_of(gen, entry.y0, entry.x0, entry.h, entry.w);
        entry.color_match = entry.dominant_color == specs[static_cast<size_t>(k)].color;
        report.entries.push_back(entry);
    }
    return report;
}

// ---- evaluation suite ----

namespace {

struct EvalCase {
    std::vector<int> entry_indices;  // corpus entries, one per condition
};

const CorpusEntry& entry_of(const Corpus& corpus, int idx) {
    return corpus.entries[static_cast<size_t>(idx)];
}

// One representative entry per subject.
std::vector<int> subject_representatives(const Corpus& corpus) {
    std::vector<int> reps;
    int last_subject = -1;
    for (size_t i = 0; i < corpus.entries.size(); ++i) {
        if (corpus.entries[i].subject_index != last_subject) {
            reps.push_back(static_cast<int>(i));
            last_subject = corpus.entries[i].subject_index;
        }
    }
    return reps;
}

bool colors_distinct(const Corpus& corpus, const std::vector<int>& picks, int candidate) {
    for (int idx : picks)
        if (entry_of(corpus, idx).sample.spec.color ==
            entry_of(corpus, candidate).sample.spec.color)
            return false;
    return true;
}

std::vector<EvalCase> build_cases(const Corpus& corpus, const std::string& scenario,
                                  int count, Rng& rng) {
    const std::vector<int> reps = subject_representatives(corpus);
    if (reps.empty()) throw DataError("eval: corpus has no subjects");
    auto pick_rep = [&]() { return reps[static_cast<size_t>(
        rng.uniform_int(static_cast<int>(reps.size())))]; };

    std::vector<EvalCase> cases;
    for (int i = 0; i < count; ++i) {
        EvalCase ec;
        if (scenario == "c1") {
            ec.entry_indices = {pick_rep()};
        } else if (scenario == "c2_random" || scenario == "c3") {
            const int want = scenario == "c3" ? 3 : 2;
            ec.entry_indices.push_back(pick_rep());
            int guard = 0;
            while (static_cast<int>(ec.entry_indices.size()) < want && guard < 4000) {
                const int cand = pick_rep();
                ++guard;
                bool distinct_subject = true;
                for (int idx : ec.entry_indices)
                    if (entry_of(corpus, idx).subject_index ==
                        entry_of(corpus, cand).subject_index)
                        distinct_subject = false;
                if (!distinct_subject) continue;
                if (guard < 2000 && !colors_distinct(corpus, ec.entry_indices, cand))
                    continue;
                ec.entry_indices.push_back(cand);
            }
            if (static_cast<int>(ec.entry_indices.size()) < want)
                throw DataError("eval: corpus too small for scenario " + scenario);
        } else if (scenario == "c2_same_category") {
            const std::vector<int> cats = corpus.pairable_categories();
            if (cats.empty()) throw DataError("eval: no same-category pairs available");
            int guard = 0;
            while (guard++ < 4000) {
                const int cat = cats[static_cast<size_t>(
                    rng.uniform_int(static_cast<int>(cats.size())))];
                const auto& pool = corpus.by_category[static_cast<size_t>(cat)];
                const int a = pool[static_cast<size_t>(
                    rng.uniform_int(static_cast<int>(pool.size())))];
                const int b = pool[static_cast<size_t>(
                    rng.uniform_int(static_cast<int>(pool.size())))];
                if (entry_of(corpus, a).subject_index == entry_of(corpus, b).subject_index)
                    continue;
                if (guard < 2000 && entry_of(corpus, a).sample.spec.color ==
                                        entry_of(corpus, b).sample.spec.color)
                    continue;
                ec.entry_indices = {a, b};
                break;
            }
            if (ec.entry_indices.empty())
                throw DataError("eval: cannot build same-category case");
        } else {
            throw DataError("eval: unknown scenario " + scenario);
        }
        cases.push_back(std::move(ec));
    }
    return cases;
}

SampleRequest request_for_case(const Corpus& corpus, const EvalCase& ec, int steps,
                               uint64_t seed, bool dynamic_routing) {
    std::vector<std::vector<int>> mentions;
    std::vector<int> seen_categories;
    SampleRequest req;
    for (int idx : ec.entry_indices) {
        const SingleSample& s = entry_of(corpus, idx).sample;
        std::vector<int> mention = s.cond_prompt;
        for (int cat : seen_categories)
            if (cat == s.spec.category) mention[0] = vocab::Another;
        seen_categories.push_back(s.spec.category);
        req.conditions.emplace_back(s.cond, mention);
        mentions.push_back(std::move(mention));
    }
    auto [prompt, spans] = multi_subject_prompt(mentions);
    req.prompt = std::move(prompt);
    req.spans = std::move(spans);
    req.steps = steps;
    req.seed = seed;
    req.dynamic_routing = dynamic_routing;
    return req;
}

struct CaseOutcome {
    double identity = 0.0;
    double attr = 0.0;
};

CaseOutcome evaluate_case(const Model& model, const Corpus& corpus, const EvalCase& ec,
                          const SampleRequest& req) {
    SampleResult sample = run_sample(model, req);
    std::vector<SubjectSpec> specs;
    for (int idx : ec.entry_indices) specs.push_back(entry_of(corpus, idx).sample.spec);
    RegionReport report = attribute_match(sample.image, specs);

    double identity = 0.0;
    for (size_t k = 0; k < specs.size(); ++k) {
        const RegionEntry& e = report.entries[k];
        Image region = crop(sample.image, e.y0, e.x0, std::max(1, e.h), std::max(1, e.w));
        identity +=
            identity_similarity(region, entry_of(corpus, ec.entry_indices[k]).sample.cond);
    }
    return {identity / static_cast<double>(specs.size()), report.match_rate()};
}

}  // namespace

namespace {

size_t scenario_index(const std::string& scenario) {
    static const std::vector<std::string> kScenarios = {"c1", "c2_random",
                                                        "c2_same_category", "c3"};
    for (size_t i = 0; i < kScenarios.size(); ++i)
        if (kScenarios[i] == scenario) return i;
    throw DataError("eval: unknown scenario " + scenario);
}

}  // namespace

MetricsRow eval_scenario(const EvalVariant& variant, const Corpus& corpus,
                         const std::string& scenario, const EvalOptions& options,
                         std::ostream* csv) {
    if (!variant.model) throw DataError("eval: variant has no model");
    Rng case_rng(derive_seed(options.seed, 0xCA5E00 + scenario_index(scenario)));
    const std::vector<EvalCase> cases =
        build_cases(corpus, scenario, options.cases_per_scenario, case_rng);

    const size_t jobs = cases.size() * static_cast<size_t>(options.seeds);
    std::vector<CaseOutcome> outcomes(jobs);
    auto run_range = [&](size_t begin, size_t end) {
        for (size_t j = begin; j < end; ++j) {
            const size_t case_idx = j / static_cast<size_t>(options.seeds);
            const int seed_idx = static_cast<int>(j % static_cast<size_t>(options.seeds));
            SampleRequest req = request_for_case(
                corpus, cases[case_idx], options.steps,
                derive_seed(options.seed,
                            0xE0000 + case_idx * 101 + static_cast<size_t>(seed_idx)),
                variant.dynamic_routing);
            outcomes[j] = evaluate_case(*variant.model, corpus, cases[case_idx], req);
        }
    };
    const int threads = std::max(1, options.threads);
    if (threads == 1 || jobs < 2) {
        run_range(0, jobs);
    } else {
        std::vector<std::thread> pool;
        const size_t chunk =
            (jobs + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
        for (int w = 0; w < threads; ++w) {
            const size_t begin = static_cast<size_t>(w) * chunk;
            const size_t end = std::min(jobs, begin + chunk);
            if (begin < end) pool.emplace_back(run_range, begin, end);
        }
        for (std::thread& t : pool) t.join();
    }

    MetricsRow row;
    row.variant = variant.name;
    row.scenario = scenario;
    for (int seed_idx = 0; seed_idx < options.seeds; ++seed_idx) {
        double identity = 0.0, attr = 0.0;
        for (size_t case_idx = 0; case_idx < cases.size(); ++case_idx) {
            const CaseOutcome& oc = outcomes[case_idx * static_cast<size_t>(options.seeds) +
                                             static_cast<size_t>(seed_idx)];
            identity += oc.identity;
            attr += oc.attr;
        }
        identity /= static_cast<double>(cases.size());
        attr /= static_cast<double>(cases.size());
        if (csv)
            *csv << variant.name << "," << scenario << "," << seed_idx << "," << identity
                 << "," << attr << "\n";
        row.identity_sim += identity;
        row.attr_match += attr;
    }
    row.identity_sim /= options.seeds;
    row.attr_match /= options.seeds;
    return row;
}

std::vector<MetricsRow> eval_suite(const std::vector<EvalVariant>& variants,
                                   const Corpus& corpus, const EvalOptions& options,
                                   std::ostream* csv) {
    static const std::vector<std::string> kScenarios = {"c1", "c2_random",
                                                        "c2_same_category", "c3"};
    if (csv) *csv << "variant,scenario,seed,identity_sim,attr_match\n";
    std::vector<MetricsRow> table;
    for (const EvalVariant& variant : variants)
        for (const std::string& scenario : kScenarios)
            table.push_back(eval_scenario(variant, corpus, scenario, options, csv));
    return table;
}

}  // namespace sflow
