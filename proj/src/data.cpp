#include "sflow/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sflow/tensor.hpp"

namespace fs = std::filesystem;

namespace sflow {

namespace vocab {

namespace {
const std::vector<std::string> kNames = {
    // special
    "pad", "a", "another", "left", "right", "and",
    // colors
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta", "pink",
    "brown", "teal", "lime",
    // textures
    "solid", "striped", "dotted",
    // categories
    "ball", "cup", "hat", "star", "fish", "tree", "boat", "house", "heart", "moon",
    "cross", "ring"};
constexpr int kColorBase = 6;
constexpr int kTextureBase = kColorBase + kColors;
constexpr int kCategoryBase = kTextureBase + kTextures;
}  // namespace

int color_token(int color) {
    if (color < 0 || color >= kColors) throw DataError("vocab: color out of range");
    return kColorBase + color;
}
int texture_token(int texture) {
    if (texture < 0 || texture >= kTextures) throw DataError("vocab: texture out of range");
    return kTextureBase + texture;
}
int category_token(int category) {
    if (category < 0 || category >= kCategories)
        throw DataError("vocab: category out of range");
    return kCategoryBase + category;
}
int size() { return static_cast<int>(kNames.size()); }

const std::string& name(int token) {
    if (token < 0 || token >= size()) throw DataError("vocab: token out of range");
    return kNames[static_cast<size_t>(token)];
}

int id(const std::string& word) {
    std::string lower = word;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (int i = 0; i < size(); ++i)
        if (kNames[static_cast<size_t>(i)] == lower) return i;
    throw DataError("vocab: unknown word '" + word + "'");
}

}  // namespace vocab

const std::array<float, 3>& palette_rgb(int color) {
    static const std::array<std::array<float, 3>, vocab::kColors> kPalette = {{
        {0.90f, 0.10f, 0.10f},  // red
        {0.10f, 0.75f, 0.15f},  // green
        {0.12f, 0.20f, 0.90f},  // blue
        {0.95f, 0.88f, 0.10f},  // yellow
        {0.55f, 0.12f, 0.82f},  // purple
        {0.95f, 0.52f, 0.05f},  // orange
        {0.08f, 0.82f, 0.85f},  // cyan
        {0.90f, 0.10f, 0.80f},  // magenta
        {0.97f, 0.55f, 0.72f},  // pink
        {0.55f, 0.30f, 0.08f},  // brown
        {0.05f, 0.50f, 0.45f},  // teal
        {0.62f, 0.90f, 0.10f},  // lime
    }};
    if (color < 0 || color >= vocab::kColors) throw DataError("palette: color out of range");
    return kPalette[static_cast<size_t>(color)];
}

// ---- shape rasterization ----

namespace {

bool inside_shape(int category, float u, float v) {
    switch (category) {
        case 0:  // ball
            return u * u + v * v <= 1.0f;
        case 1: {  // cup
            const bool body = std::abs(u) <= 0.62f && v >= -0.45f && v <= 0.85f;
            const float du = u - 0.78f, dv = v - 0.1f;
            const float r2 = du * du + dv * dv;
            const bool handle = u > 0.6f && r2 >= 0.03f && r2 <= 0.15f;
            return body || handle;
        }
        case 2: {  // hat
            const bool brim = std::abs(u) <= 0.95f && v >= 0.45f && v <= 0.75f;
            const float eu = u / 0.55f, ev = (v - 0.05f) / 0.62f;
            const bool dome = eu * eu + ev * ev <= 1.0f && v <= 0.5f;
            return brim || dome;
        }
        case 3: {  // star
            const float r = std::sqrt(u * u + v * v);
            const float theta = std::atan2(v, u);
            const float spike = 0.5f * (1.0f + std::cos(5.0f * theta - 1.5707964f));
            return r <= 0.38f + 0.62f * spike * spike;
        }
        case 4: {  // fish
            const float eu = (u + 0.18f) / 0.68f, ev = v / 0.42f;
            const bool body = eu * eu + ev * ev <= 1.0f;
            const bool tail = u >= 0.4f && u <= 0.95f && std::abs(v) <= (u - 0.4f) * 0.75f;
            return body || tail;
        }
        case 5: {  // tree
            const bool canopy =
                v >= -0.95f && v <= 0.45f && std::abs(u) <= 0.62f * (v + 0.95f) / 1.4f;
            const bool trunk = std::abs(u) <= 0.14f && v > 0.45f && v <= 0.95f;
            return canopy || trunk;
        }
        case 6: {  // boat
            const bool hull =
                v >= 0.25f && v <= 0.75f && std::abs(u) <= 0.9f - 0.7f * (v - 0.25f);
            const bool sail =
                v >= -0.9f && v <= 0.15f && u >= 0.0f && u <= 0.65f * (v + 0.9f) / 1.05f;
            const bool mast = std::abs(u) <= 0.05f && v >= -0.9f && v <= 0.25f;
            return hull || sail || mast;
        }
        case 7: {  // house
            const bool box = std::abs(u) <= 0.68f && v >= -0.05f && v <= 0.9f;
            const bool roof =
                v >= -0.8f && v < -0.05f && std::abs(u) <= 0.95f * (v + 0.8f) / 0.75f;
            return box || roof;
        }
        case 8: {  // heart
            const float lu = u + 0.38f, ru = u - 0.38f, cv = v + 0.3f;
            const bool lobes = lu * lu + cv * cv <= 0.2f || ru * ru + cv * cv <= 0.2f;
            const bool tip =
                v >= -0.05f && v <= 0.92f && std::abs(u) <= 0.8f * (0.92f - v) / 0.97f;
            return lobes || tip;
        }
        case 9: {  // moon
            const float du = u - 0.42f;
            return u * u + v * v <= 1.0f && du * du + v * v >= 0.5f;
        }
        case 10:  // cross
            return (std::abs(u) <= 0.28f && std::abs(v) <= 0.95f) ||
                   (std::abs(v) <= 0.28f && std::abs(u) <= 0.95f);
        case 11: {  // ring
            const float r2 = u * u + v * v;
            return r2 >= 0.45f && r2 <= 1.0f;
        }
        default: throw DataError("inside_shape: bad category");
    }
}

std::vector<uint8_t> rasterize(int category, int edge, float cx, float cy, float s) {
    std::vector<uint8_t> mask(static_cast<size_t>(edge) * edge, 0);
    for (int y = 0; y < edge; ++y)
        for (int x = 0; x < edge; ++x) {
            const float u = (static_cast<float>(x) + 0.5f - cx) / s;
            const float v = (static_cast<float>(y) + 0.5f - cy) / s;
            if (inside_shape(category, u, v))
                mask[static_cast<size_t>(y) * edge + x] = 1;
        }
    return mask;
}

double coverage_of(const std::vector<uint8_t>& mask) {
    size_t count = 0;
    for (uint8_t m : mask) count += m;
    return static_cast<double>(count) / static_cast<double>(mask.size());
}

// Scale chosen so that the subject covers the requested frame fraction.
std::vector<uint8_t> rasterize_with_coverage(int category, int edge, float cx, float cy,
                                             double target) {
    float lo = 0.18f * edge, hi = 0.95f * edge;
    for (int it = 0; it < 18; ++it) {
        const float mid = 0.5f * (lo + hi);
        if (coverage_of(rasterize(category, edge, cx, cy, mid)) < target)
            lo = mid;
        else
            hi = mid;
    }
    std::vector<uint8_t> mask = rasterize(category, edge, cx, cy, 0.5f * (lo + hi));
    double cov = coverage_of(mask);
    if (cov < 0.30 || cov > 0.70) {
        // Clipping can make coverage non-monotone near the extremes; fall back
        // to a scan for the closest admissible scale.
        double best_err = 1e9;
        for (int i = 0; i < 48; ++i) {
            const float s = (0.18f + 0.016f * static_cast<float>(i)) * edge;
            std::vector<uint8_t> cand = rasterize(category, edge, cx, cy, s);
            const double c = coverage_of(cand);
            const double err = std::abs(c - target);
            if (c >= 0.30 && c <= 0.70 && err < best_err) {
                best_err = err;
                mask = std::move(cand);
            }
        }
    }
    return mask;
}

void paint_subject(Image& img, const std::vector<uint8_t>& mask, int color, int texture) {
    const auto& rgb = palette_rgb(color);
    const float dark = 0.55f;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (!mask[static_cast<size_t>(y) * img.w + x]) continue;
            bool darker = false;
            if (texture == 1) darker = (y % 4) >= 2;                      // striped
            if (texture == 2) darker = (y % 4) < 2 && (x % 4) < 2;        // dotted
            const float f = darker ? dark : 1.0f;
            img.at(y, x, 0) = rgb[0] * f;
            img.at(y, x, 1) = rgb[1] * f;
            img.at(y, x, 2) = rgb[2] * f;
        }
}

Image muted_background(int edge, Rng& rng) {
    const float base = 0.18f + 0.24f * rng.uniform_float();
    const float jr = (rng.uniform_float() - 0.5f) * 0.07f;
    const float jg = (rng.uniform_float() - 0.5f) * 0.07f;
    const float jb = (rng.uniform_float() - 0.5f) * 0.07f;
    const float grad = (rng.uniform_float() - 0.5f) * 0.1f;
    Image img = Image::filled(edge, edge, 0, 0, 0);
    for (int y = 0; y < edge; ++y) {
        const float dy = grad * (static_cast<float>(y) / static_cast<float>(edge - 1) - 0.5f);
        for (int x = 0; x < edge; ++x) {
            img.at(y, x, 0) = std::clamp(base + jr + dy, 0.0f, 1.0f);
            img.at(y, x, 1) = std::clamp(base + jg + dy, 0.0f, 1.0f);
            img.at(y, x, 2) = std::clamp(base + jb + dy, 0.0f, 1.0f);
        }
    }
    return img;
}

}  // namespace

SingleSample render_subject(const SubjectSpec& spec, int cond_edge, int target_edge,
                            int render_index) {
    SingleSample out;
    out.spec = spec;

    {
        Rng rng(derive_seed(spec.seed, 10));
        const float cx = cond_edge * (0.5f + 0.06f * (rng.uniform_float() - 0.5f));
        const float cy = cond_edge * (0.5f + 0.06f * (rng.uniform_float() - 0.5f));
        const double target = 0.38 + 0.17 * rng.uniform();
        out.cond = Image::filled(cond_edge, cond_edge, 0.86f, 0.86f, 0.88f);
        paint_subject(out.cond, rasterize_with_coverage(spec.category, cond_edge, cx, cy, target),
                      spec.color, spec.texture);
    }
    {
        Rng rng(derive_seed(spec.seed, 100 + static_cast<uint64_t>(render_index)));
        out.target = muted_background(target_edge, rng);
        const float cx = target_edge * (0.5f + 0.22f * (rng.uniform_float() - 0.5f));
        const float cy = target_edge * (0.5f + 0.22f * (rng.uniform_float() - 0.5f));
        const double target = 0.34 + 0.24 * rng.uniform();
        paint_subject(out.target,
                      rasterize_with_coverage(spec.category, target_edge, cx, cy, target),
                      spec.color, spec.texture);
    }

    out.cond_prompt = {vocab::A, vocab::color_token(spec.color),
                       vocab::texture_token(spec.texture),
                       vocab::category_token(spec.category)};
    out.target_prompt = out.cond_prompt;
    return out;
}

TrainingSample make_single(const SingleSample& s) {
    TrainingSample out;
    out.conditions.emplace_back(s.cond, s.cond_prompt);
    out.target = s.target;
    out.target_prompt = s.target_prompt;
    out.spans.spans = {{0, static_cast<int>(s.target_prompt.size())}};
    out.pairing = Pairing::Single;
    return out;
}

TrainingSample make_diptych(const SingleSample& a, const SingleSample& b) {
    if (a.spec == b.spec) throw DataError("make_diptych: subjects must be distinct");
    if (a.target.h != b.target.h || a.target.w != b.target.w)
        throw DataError("make_diptych: target extents differ");

    const bool same_category = a.spec.category == b.spec.category;
    std::vector<int> right_mention = b.cond_prompt;
    if (same_category) right_mention[0] = vocab::Another;

    TrainingSample out;
    out.conditions.emplace_back(a.cond, a.cond_prompt);
    out.conditions.emplace_back(b.cond, right_mention);
    out.target = downscale_width_half(concat_horizontal(a.target, b.target));

    out.target_prompt.push_back(vocab::Left);
    const int p0 = static_cast<int>(out.target_prompt.size());
    out.target_prompt.insert(out.target_prompt.end(), a.cond_prompt.begin(),
                             a.cond_prompt.end());
    out.target_prompt.push_back(vocab::Right);
    const int p1 = static_cast<int>(out.target_prompt.size());
    out.target_prompt.insert(out.target_prompt.end(), right_mention.begin(),
                             right_mention.end());
    out.spans.spans = {{p0, static_cast<int>(a.cond_prompt.size())},
                       {p1, static_cast<int>(right_mention.size())}};
    out.pairing = same_category ? Pairing::SameCategory : Pairing::Random;
    return out;
}

// ---- corpus ----

void Corpus::rebuild_index() {
    by_category.assign(static_cast<size_t>(vocab::kCategories), {});
    for (size_t i = 0; i < entries.size(); ++i)
        by_category[static_cast<size_t>(entries[i].sample.spec.category)].push_back(
            static_cast<int>(i));
}

std::vector<int> Corpus::pairable_categories() const {
    std::vector<int> out;
    for (size_t cat = 0; cat < by_category.size(); ++cat) {
        int first_subject = -1;
        for (int idx : by_category[cat]) {
            const int subject = entries[static_cast<size_t>(idx)].subject_index;
            if (first_subject < 0)
                first_subject = subject;
            else if (subject != first_subject) {
                out.push_back(static_cast<int>(cat));
                break;
            }
        }
    }
    return out;
}

Corpus generate_corpus(int subjects, int renders_per_subject, uint64_t seed, int cond_edge,
                       int target_edge) {
    if (subjects < 1 || renders_per_subject < 1)
        throw DataError("generate_corpus: need at least one subject and render");
    Corpus corpus;
    corpus.cond_edge = cond_edge;
    corpus.target_edge = target_edge;
    Rng rng(derive_seed(seed, 1));
    for (int i = 0; i < subjects; ++i) {
        SubjectSpec spec;
        spec.category = i % vocab::kCategories;
        spec.color = rng.uniform_int(vocab::kColors);
        spec.texture = rng.uniform_int(vocab::kTextures);
        spec.seed = derive_seed(seed, 7000 + static_cast<uint64_t>(i));
        for (int r = 0; r < renders_per_subject; ++r)
            corpus.entries.push_back({i, r, render_subject(spec, cond_edge, target_edge, r)});
    }
    corpus.rebuild_index();
    return corpus;
}

TrainingSample curriculum_batch(int stage, const Corpus& corpus, Rng& rng) {
    if (corpus.entries.empty()) throw DataError("curriculum: empty corpus");
    auto pick = [&]() -> const CorpusEntry& {
        return corpus.entries[static_cast<size_t>(
            rng.uniform_int(static_cast<int>(corpus.entries.size())))];
    };

    switch (stage) {
        case 1: return make_single(pick().sample);
        case 2: {
            if (rng.uniform() >= 0.8) return make_single(pick().sample);
            const CorpusEntry& a = pick();
            for (int attempt = 0; attempt < 1000; ++attempt) {
                const CorpusEntry& b = pick();
                if (b.subject_index != a.subject_index)
                    return make_diptych(a.sample, b.sample);
            }
            throw DataError("curriculum: cannot pair distinct subjects");
        }
        case 3: {
            const std::vector<int> cats = corpus.pairable_categories();
            if (cats.empty())
                throw DataError("curriculum: no category holds two distinct subjects");
            const auto& pool = corpus.by_category[static_cast<size_t>(
                cats[static_cast<size_t>(rng.uniform_int(static_cast<int>(cats.size())))])];
            auto pick_in = [&]() -> const CorpusEntry& {
                return corpus.entries[static_cast<size_t>(
                    pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))])];
            };
            const CorpusEntry& a = pick_in();
            for (int attempt = 0; attempt < 1000; ++attempt) {
                const CorpusEntry& b = pick_in();
                if (b.subject_index != a.subject_index)
                    return make_diptych(a.sample, b.sample);
            }
            throw DataError("curriculum: cannot pair distinct subjects in category");
        }
        default: throw DataError("curriculum: stage must be 1, 2 or 3");
    }
}

// ---- on-disk dataset ----

namespace {

nlohmann::json spec_to_json(const SubjectSpec& spec) {
    return {{"category", vocab::name(vocab::category_token(spec.category))},
            {"color", vocab::name(vocab::color_token(spec.color))},
            {"texture", vocab::name(vocab::texture_token(spec.texture))},
            {"seed", spec.seed}};
}

SubjectSpec spec_from_json(const nlohmann::json& j) {
    SubjectSpec spec;
    spec.category = vocab::id(j.at("category").get<std::string>()) -
                    vocab::category_token(0);
    spec.color = vocab::id(j.at("color").get<std::string>()) - vocab::color_token(0);
    spec.texture = vocab::id(j.at("texture").get<std::string>()) - vocab::texture_token(0);
    spec.seed = j.at("seed").get<uint64_t>();
    return spec;
}

std::string sample_dir_name(int subject, int render) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04d_r%d", subject, render);
    return buf;
}

}  // namespace

void write_dataset(const std::string& dir, const Corpus& corpus, uint64_t seed) {
    fs::create_directories(dir);
    nlohmann::json index = {{"schema", 1},
                            {"seed", seed},
                            {"cond_edge", corpus.cond_edge},
                            {"target_edge", corpus.target_edge},
                            {"samples", corpus.entries.size()}};
    std::ofstream(dir + "/dataset.json") << index.dump(2) << "\n";

    for (const CorpusEntry& entry : corpus.entries) {
        const std::string sdir =
            dir + "/" + sample_dir_name(entry.subject_index, entry.render_index);
        fs::create_directories(sdir);
        write_png(sdir + "/cond_0.png", entry.sample.cond);
        write_png(sdir + "/target.png", entry.sample.target);
        nlohmann::json meta = {
            {"schema", 1},
            {"pairing", "single"},
            {"subject_index", entry.subject_index},
            {"render_index", entry.render_index},
            {"spec", spec_to_json(entry.sample.spec)},
            {"cond_prompts", nlohmann::json::array({entry.sample.cond_prompt})},
            {"target_prompt", entry.sample.target_prompt},
            {"spans", nlohmann::json::array(
                          {{0, static_cast<int>(entry.sample.target_prompt.size())}})},
            {"cond_edge", corpus.cond_edge},
            {"target_edge", corpus.target_edge}};
        std::ofstream(sdir + "/meta.json") << meta.dump(2) << "\n";
    }
}

Corpus load_dataset(const std::string& dir) {
    if (!fs::exists(dir + "/dataset.json"))
        throw DataError("load_dataset: " + dir + " has no dataset.json");
    nlohmann::json index;
    std::ifstream(dir + "/dataset.json") >> index;

    Corpus corpus;
    corpus.cond_edge = index.at("cond_edge").get<int>();
    corpus.target_edge = index.at("target_edge").get<int>();

    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());

    for (const std::string& name : names) {
        const std::string sdir = dir + "/" + name;
        if (!fs::exists(sdir + "/meta.json")) continue;
        nlohmann::json meta;
        std::ifstream(sdir + "/meta.json") >> meta;
        CorpusEntry entry;
        entry.subject_index = meta.at("subject_index").get<int>();
        entry.render_index = meta.at("render_index").get<int>();
        entry.sample.spec = spec_from_json(meta.at("spec"));
        entry.sample.cond = read_png(sdir + "/cond_0.png");
        entry.sample.target = read_png(sdir + "/target.png");
        entry.sample.cond_prompt = meta.at("cond_prompts")[0].get<std::vector<int>>();
        entry.sample.target_prompt = meta.at("target_prompt").get<std::vector<int>>();
        corpus.entries.push_back(std::move(entry));
    }
    if (corpus.entries.empty()) throw DataError("load_dataset: no samples in " + dir);
    corpus.rebuild_index();
    return corpus;
}

// ---- prompt templates ----

std::pair<std::vector<int>, PromptSpanTable> multi_subject_prompt(
    const std::vector<std::vector<int>>& mentions) {
    if (mentions.empty()) throw DataError("multi_subject_prompt: no mentions");
    std::vector<int> prompt;
    PromptSpanTable spans;
    if (mentions.size() == 1) {
        prompt = mentions[0];
        spans.spans = {{0, static_cast<int>(prompt.size())}};
        return {prompt, spans};
    }
    for (size_t k = 0; k < mentions.size(); ++k) {
        if (k == 0)
            prompt.push_back(vocab::Left);
        else if (k == 1)
            prompt.push_back(vocab::Right);
        else
            prompt.push_back(vocab::And);
        spans.spans.push_back(
            {static_cast<int>(prompt.size()), static_cast<int>(mentions[k].size())});
        prompt.insert(prompt.end(), mentions[k].begin(), mentions[k].end());
    }
    return {prompt, spans};
}

std::vector<int> pad_prompt(const std::vector<int>& prompt, int m) {
    if (static_cast<int>(prompt.size()) > m)
        throw DataError("pad_prompt: prompt exceeds the token budget");
    std::vector<int> out = prompt;
    out.resize(static_cast<size_t>(m), vocab::Pad);
    return out;
}

std::vector<int> tokenize(const std::string& phrase) {
    std::vector<int> tokens;
    std::string word;
    for (char ch : phrase + " ") {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!word.empty()) tokens.push_back(vocab::id(word));
            word.clear();
        } else {
            word.push_back(ch);
        }
    }
    return tokens;
}

PromptSpanTable match_mention_spans(const std::vector<int>& prompt,
                                    const std::vector<std::vector<int>>& mentions) {
    auto is_article = [](int t) { return t == vocab::A || t == vocab::Another; };
    std::vector<char> claimed(prompt.size(), 0);
    PromptSpanTable spans;
    for (const std::vector<int>& mention : mentions) {
        if (mention.empty()) throw DataError("match_mention_spans: empty mention");
        const int len = static_cast<int>(mention.size());
        int found = -1;
        for (int p = 0; p + len <= static_cast<int>(prompt.size()); ++p) {
            bool ok = true;
            for (int z = 0; z < len && ok; ++z) {
                if (claimed[static_cast<size_t>(p + z)]) ok = false;
                const int want = mention[static_cast<size_t>(z)];
                const int have = prompt[static_cast<size_t>(p + z)];
                if (want == have) continue;
                if (z == 0 && is_article(want) && is_article(have)) continue;
                ok = false;
            }
            if (ok) {
                found = p;
                break;
            }
        }
        if (found < 0)
            throw DataError("match_mention_spans: condition mention not found in prompt");
        for (int z = 0; z < len; ++z) claimed[static_cast<size_t>(found + z)] = 1;
        spans.spans.push_back({found, len});
    }
    return spans;
}

}  // namespace sflow
