#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "sflow/rng.hpp"
#include "sflow/routing.hpp"

using namespace sflow;

namespace {

// Brute-force enumeration of the blocked sets straight from the index-range
// definitions, written independently of FlowMask construction.
bool static_blocked_ref(const SequenceLayout& lt, int i, int j) {
    const int lp = lt.l_prime();
    const int cond = lt.c * lp;
    const bool i_prompt = i >= cond && i < cond + lt.m;
    const bool j_prompt = j >= cond && j < cond + lt.m;
    const bool i_cond = i < cond;
    const bool j_cond = j < cond;
    if ((i_prompt && j_cond) || (i_cond && j_prompt)) return true;
    if (i_cond && j_cond && (i / lp) != (j / lp)) return true;
    return false;
}

bool dynamic_blocked_ref(const SequenceLayout& lt, const std::vector<int>& assign, int i,
                         int j) {
    const int lp = lt.l_prime();
    const int cond = lt.c * lp;
    if (i < cond + lt.m || i >= cond + lt.m + lt.n) return false;
    if (j < 0 || j >= cond) return false;
    return (j / lp) != assign[static_cast<size_t>(i - cond - lt.m)];
}

}  // namespace

TEST_SUITE_BEGIN("routing");

TEST_CASE("static mask worked examples") {
    SequenceLayout lt = build_layout(2, 2, 1, 2, 3);
    FlowMask mask = build_static_mask(lt);
    // prompt x cond both directions + inter-condition both directions
    CHECK(mask.blocked_count() == 2 * (2 * 6) + 2 * (3 * 3));
    CHECK(mask.blocked_count() == 42);

    SequenceLayout one = build_layout(1, 2, 1, 2, 3);
    CHECK(build_static_mask(one).blocked_count() == 2 * 2 * 3);

    SequenceLayout zero = build_layout(0, 0, 0, 2, 3);
    CHECK(build_static_mask(zero).blocked_count() == 0);
}

TEST_CASE("static mask diagonal never blocked and symmetric blocks") {
    SequenceLayout lt = build_layout(3, 2, 2, 4, 5);
    FlowMask mask = build_static_mask(lt);
    for (int i = 0; i < lt.total(); ++i) CHECK_FALSE(mask.blocked(i, i));
    for (int i = 0; i < lt.total(); ++i)
        for (int j = 0; j < lt.total(); ++j) CHECK(mask.blocked(i, j) == mask.blocked(j, i));
}

TEST_CASE("static mask matches brute-force enumeration") {
    Rng rng(101);
    for (int trial = 0; trial < 40; ++trial) {
        SequenceLayout lt = build_layout(rng.uniform_int(5), 1 + rng.uniform_int(6),
                                         1 + rng.uniform_int(6), 1 + rng.uniform_int(6),
                                         1 + rng.uniform_int(6));
        FlowMask mask = build_static_mask(lt);
        for (int i = 0; i < lt.total(); ++i)
            for (int j = 0; j < lt.total(); ++j)
                CHECK(mask.blocked(i, j) == static_blocked_ref(lt, i, j));
    }
}

TEST_CASE("compute_similarity rows sum to one and match oracle") {
    SUBCASE("zero query row is uniform") {
        Mat q = Mat::Zero(1, 4);
        Mat k = Mat::Random(2, 4);
        Mat s = compute_similarity(q, k, 4);
        CHECK(s(0, 0) == doctest::Approx(0.5));
        CHECK(s(0, 1) == doctest::Approx(0.5));
    }
    SUBCASE("single prompt token forces ones") {
        Mat q = Mat::Random(3, 4);
        Mat k = Mat::Random(1, 4);
        Mat s = compute_similarity(q, k, 4);
        for (int i = 0; i < 3; ++i) CHECK(s(i, 0) == 1.0f);
    }
    SUBCASE("random case against 64-bit oracle") {
        Rng rng(7);
        Mat q(4, 8), k(5, 8);
        for (int i = 0; i < q.size(); ++i) q.data()[i] = rng.normal_float();
        for (int i = 0; i < k.size(); ++i) k.data()[i] = rng.normal_float();
        Mat s = compute_similarity(q, k, 8);

        oracle::DMat logits = oracle::dmat(4, 5);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) {
                double dot = 0.0;
                for (int z = 0; z < 8; ++z)
                    dot += static_cast<double>(q(i, z)) * k(j, z);
                logits[static_cast<size_t>(i)][static_cast<size_t>(j)] = dot / std::sqrt(8.0);
            }
        std::vector<std::vector<bool>> open(4, std::vector<bool>(5, false));
        oracle::DMat ref = oracle::softmax_subset_ref(logits, open);
        for (int i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 5; ++j) {
                CHECK(std::abs(s(i, j) - ref[static_cast<size_t>(i)][static_cast<size_t>(j)]) < 1e-6);
                sum += s(i, j);
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
    SUBCASE("empty prompt rejected") {
        Mat q = Mat::Random(2, 4);
        Mat k(0, 4);
        CHECK_THROWS_AS(compute_similarity(q, k, 4), DataError);
    }
}

TEST_CASE("compute_affinity span averaging") {
    Mat s(1, 2);
    s << 0.7f, 0.3f;
    AffinityMatrix a = compute_affinity(s, PromptSpanTable{{{0, 1}, {1, 1}}}, 2);
    CHECK(a.values(0, 0) == doctest::Approx(0.7));
    CHECK(a.values(0, 1) == doctest::Approx(0.3));

    Mat s2(1, 3);
    s2 << 0.6f, 0.1f, 0.3f;
    AffinityMatrix a2 = compute_affinity(s2, PromptSpanTable{{{0, 2}, {2, 1}}}, 2);
    CHECK(a2.values(0, 0) == doctest::Approx(0.35));
    CHECK(a2.values(0, 1) == doctest::Approx(0.3));

    Mat s3 = Mat::Constant(2, 4, 0.25f);
    AffinityMatrix a3 = compute_affinity(s3, PromptSpanTable{{{0, 2}, {2, 2}}}, 2);
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 2; ++k) CHECK(a3.values(i, k) == doctest::Approx(0.25));

    CHECK_THROWS_AS(compute_affinity(s3, PromptSpanTable{{{0, 0}, {2, 2}}}, 2), DataError);
}

TEST_CASE("affinity mass bounded by span coverage") {
    // sum_k l_k * affinity(i, k) <= 1 with equality iff spans tile the prompt.
    Rng rng(13);
    Mat q(6, 8), k(8, 8);
    for (int i = 0; i < q.size(); ++i) q.data()[i] = rng.normal_float();
    for (int i = 0; i < k.size(); ++i) k.data()[i] = rng.normal_float();
    Mat s = compute_similarity(q, k, 8);

    PromptSpanTable partial{{{0, 3}, {4, 2}}};
    AffinityMatrix ap = compute_affinity(s, partial, 2);
    for (int i = 0; i < 6; ++i) {
        const double mass = 3.0 * ap.values(i, 0) + 2.0 * ap.values(i, 1);
        CHECK(mass < 1.0 + 1e-6);
    }

    PromptSpanTable tiling{{{0, 5}, {5, 3}}};
    AffinityMatrix at = compute_affinity(s, tiling, 2);
    for (int i = 0; i < 6; ++i) {
        const double mass = 5.0 * at.values(i, 0) + 3.0 * at.values(i, 1);
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("route argmax with smallest-index tie break") {
    AffinityMatrix aff;
    aff.values.resize(3, 2);
    aff.values << 0.7f, 0.3f, 0.2f, 0.8f, 0.5f, 0.5f;
    RoutingAssignment r = route(aff);
    CHECK(r.chosen == std::vector<int>{0, 1, 0});
}

TEST_CASE("route matches brute-force max scan on random rows") {
    Rng rng(99);
    AffinityMatrix aff;
    aff.values.resize(100, 4);
    for (int i = 0; i < aff.values.size(); ++i)
        aff.values.data()[i] = rng.uniform_float();
    RoutingAssignment r = route(aff);
    for (int i = 0; i < 100; ++i) {
        int best = 0;
        for (int k = 1; k < 4; ++k)
            if (aff.values(i, k) > aff.values(i, best)) best = k;
        CHECK(r.chosen[static_cast<size_t>(i)] == best);
    }
}

TEST_CASE("route invariant under monotone row rescaling") {
    Rng rng(3);
    AffinityMatrix aff;
    aff.values.resize(40, 3);
    for (int i = 0; i < aff.values.size(); ++i)
        aff.values.data()[i] = rng.uniform_float();
    RoutingAssignment base = route(aff);

    AffinityMatrix scaled = aff;
    for (int i = 0; i < 40; ++i) {
        const float a = 0.1f + rng.uniform_float();  // per-row positive scale
        for (int k = 0; k < 3; ++k) scaled.values(i, k) = a * aff.values(i, k) * 0.5f;
    }
    CHECK(route(scaled).chosen == base.chosen);
}

TEST_CASE("dynamic mask worked example") {
    SequenceLayout lt = build_layout(2, 2, 1, 2, 3);
    RoutingAssignment assign{{0, 1, 0}};
    FlowMask mask = build_dynamic_mask(assign, lt);
    CHECK(mask.blocked_count() == 9);
    for (int j = 3; j <= 5; ++j) CHECK(mask.blocked(8, j));
    for (int j = 0; j <= 2; ++j) CHECK(mask.blocked(9, j));
    for (int j = 3; j <= 5; ++j) CHECK(mask.blocked(10, j));
    // condition -> noise stays open
    for (int i = 0; i < 6; ++i)
        for (int j = 8; j < 11; ++j) CHECK_FALSE(mask.blocked(i, j));
}

TEST_CASE("dynamic mask with one condition is empty") {
    SequenceLayout lt = build_layout(1, 2, 1, 2, 3);
    RoutingAssignment assign{{0, 0, 0}};
    CHECK(build_dynamic_mask(assign, lt).blocked_count() == 0);
}

TEST_CASE("dynamic mask keeps exactly l_prime condition columns per noise row") {
    SequenceLayout lt = build_layout(3, 2, 1, 2, 4);
    RoutingAssignment assign{{0, 0, 0, 0}};
    FlowMask mask = build_dynamic_mask(assign, lt);
    for (const NoiseRowAudit& audit : audit_noise_rows(mask)) {
        CHECK(audit.open_condition_columns == lt.l_prime());
        CHECK(audit.single_block);
    }
}

TEST_CASE("dynamic mask matches brute-force enumeration") {
    Rng rng(55);
    for (int trial = 0; trial < 40; ++trial) {
        SequenceLayout lt = build_layout(1 + rng.uniform_int(4), 1 + rng.uniform_int(5),
                                         1 + rng.uniform_int(5), 1 + rng.uniform_int(5),
                                         1 + rng.uniform_int(5));
        std::vector<int> assign(static_cast<size_t>(lt.n));
        for (int& a : assign) a = rng.uniform_int(lt.c);
        FlowMask mask = build_dynamic_mask(RoutingAssignment{assign}, lt);
        for (int i = 0; i < lt.total(); ++i)
            for (int j = 0; j < lt.total(); ++j)
                CHECK(mask.blocked(i, j) == dynamic_blocked_ref(lt, assign, i, j));
    }
}

TEST_CASE("combine is elementwise union") {
    SequenceLayout lt = build_layout(2, 2, 1, 2, 3);
    FlowMask empty = FlowMask::open(lt);
    FlowMask stat = build_static_mask(lt);
    CHECK(combine(empty, empty).blocked_count() == 0);
    CHECK(combine(stat, empty).blocked_count() == stat.blocked_count());

    FlowMask dyn = build_dynamic_mask(RoutingAssignment{{0, 1, 0}}, lt);
    FlowMask both = combine(stat, dyn);
    int64_t union_count = 0;
    for (int i = 0; i < lt.total(); ++i)
        for (int j = 0; j < lt.total(); ++j)
            if (stat.blocked(i, j) || dyn.blocked(i, j)) ++union_count;
    CHECK(both.blocked_count() == union_count);
    CHECK(both.blocked_count() == 51);

    SequenceLayout other = build_layout(2, 2, 1, 2, 4);
    CHECK_THROWS_AS(combine(stat, FlowMask::open(other)), DataError);
}

TEST_CASE("combined mask gives bijective routing per noise row") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        SequenceLayout lt = build_layout(1 + rng.uniform_int(4), 1 + rng.uniform_int(4),
                                         1 + rng.uniform_int(4), 1 + rng.uniform_int(4),
                                         1 + rng.uniform_int(4));
        std::vector<int> assign(static_cast<size_t>(lt.n));
        for (int& a : assign) a = rng.uniform_int(lt.c);
        FlowMask both =
            combine(build_static_mask(lt), build_dynamic_mask(RoutingAssignment{assign}, lt));
        for (const NoiseRowAudit& audit : audit_noise_rows(both)) {
            CHECK(audit.open_condition_columns == lt.l_prime());
            CHECK(audit.single_block);
        }
    }
}

TEST_CASE("affinity json export") {
    AffinityMatrix aff;
    aff.values.resize(2, 2);
    aff.values << 0.25f, 0.75f, 1.0f, 0.0f;
    CHECK(affinity_to_json(aff) == "[[0.25,0.75],[1.0,0.0]]");
}

TEST_SUITE_END();
