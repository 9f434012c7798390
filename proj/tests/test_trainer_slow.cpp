#include <doctest.h>

#include <filesystem>

#include "sflow/trainer.hpp"

using namespace sflow;

TEST_SUITE_BEGIN("trainer_slow");

TEST_CASE("fifty iterations reduce the loss for at least nine of ten seeds") {
    // Default desk-scale config; only the iteration budget is cut to 50.
    Corpus corpus = generate_corpus(24, 1, 101, 16, 32);
    int improved = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        TrainConfig cfg;
        cfg.stage_iters = {50, 0, 0};
        cfg.seed = seed;
        cfg.threads = 2;
        const std::string dir =
            (std::filesystem::temp_directory_path() / "sflow_smoke50").string();
        std::filesystem::remove_all(dir);
        TrainResult result = train(cfg, corpus, dir);
        REQUIRE(result.loss_trace.size() == 50);
        if (result.loss_trace[49] < result.loss_trace[0]) ++improved;
        std::filesystem::remove_all(dir);
    }
    CHECK(improved >= 9);
}

TEST_SUITE_END();
