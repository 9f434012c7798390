#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sflow/image.hpp"
#include "sflow/layout.hpp"
#include "sflow/rng.hpp"

namespace sflow {

// Closed synthetic token set: articles, column markers, colors, textures,
// categories. Span semantics survive without an external text encoder.
namespace vocab {

enum : int { Pad = 0, A = 1, Another = 2, Left = 3, Right = 4, And = 5 };

constexpr int kColors = 12;
constexpr int kTextures = 3;
constexpr int kCategories = 12;

int color_token(int color);
int texture_token(int texture);
int category_token(int category);
int size();

const std::string& name(int token);
/// Case-insensitive lookup; unknown words rejected.
int id(const std::string& word);

}  // namespace vocab

/// Saturated palette entry, far from the muted background family.
const std::array<float, 3>& palette_rgb(int color);

struct SubjectSpec {
    int category = 0;
    int color = 0;
    int texture = 0;
    uint64_t seed = 0;

    bool operator==(const SubjectSpec&) const = default;
};

struct SingleSample {
    SubjectSpec spec;
    Image cond;    // subject on a plain background
    Image target;  // same subject re-posed on a randomized background
    std::vector<int> cond_prompt;    // [article, color, texture, category]
    std::vector<int> target_prompt;  // single-subject mention
};

/// Deterministic render of one subject; the subject covers 30-70% of each
/// frame. render_index varies the target pose.
SingleSample render_subject(const SubjectSpec& spec, int cond_edge, int target_edge,
                            int render_index = 0);

enum class Pairing { Single, Random, SameCategory };

struct TrainingSample {
    std::vector<std::pair<Image, std::vector<int>>> conditions;  // (image, m' tokens)
    Image target;
    std::vector<int> target_prompt;  // unpadded template tokens
    PromptSpanTable spans;
    Pairing pairing = Pairing::Single;

    int condition_count() const { return static_cast<int>(conditions.size()); }
};

TrainingSample make_single(const SingleSample& s);
/// Two-column sample: concatenated targets downscaled back to the single
/// width, [LEFT mention RIGHT mention] prompt, ANOTHER article on the second
/// mention when categories collide. Identical specs rejected.
TrainingSample make_diptych(const SingleSample& a, const SingleSample& b);

struct CorpusEntry {
    int subject_index = 0;
    int render_index = 0;
    SingleSample sample;
};

struct Corpus {
    int cond_edge = 16;
    int target_edge = 32;
    std::vector<CorpusEntry> entries;
    std::vector<std::vector<int>> by_category;  // entry indices per category

    void rebuild_index();
    /// Categories containing at least two distinct subjects.
    std::vector<int> pairable_categories() const;
};

Corpus generate_corpus(int subjects, int renders_per_subject, uint64_t seed,
                       int cond_edge, int target_edge);

/// stage 1: singles; stage 2: 80% randomly paired diptychs, 20% singles;
/// stage 3: same-category diptychs only.
TrainingSample curriculum_batch(int stage, const Corpus& corpus, Rng& rng);

// On-disk dataset: one directory per sample holding cond_0.png, target.png,
// meta.json.
void write_dataset(const std::string& dir, const Corpus& corpus, uint64_t seed);
Corpus load_dataset(const std::string& dir);

/// [LEFT m0 RIGHT m1 AND m2 ...] template plus the mention span table.
std::pair<std::vector<int>, PromptSpanTable> multi_subject_prompt(
    const std::vector<std::vector<int>>& mentions);

std::vector<int> pad_prompt(const std::vector<int>& prompt, int m);

/// Tokenizes a whitespace-separated phrase against the closed vocabulary.
std::vector<int> tokenize(const std::string& phrase);

/// Locates each mention inside the prompt (left to right, articles A and
/// ANOTHER interchangeable in the leading slot) and returns the span table.
/// A mention that cannot be located is rejected.
PromptSpanTable match_mention_spans(const std::vector<int>& prompt,
                                    const std::vector<std::vector<int>>& mentions);

}  // namespace sflow
