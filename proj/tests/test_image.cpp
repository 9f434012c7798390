#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sflow/image.hpp"
#include "sflow/rng.hpp"
#include "sflow/tensor.hpp"

using namespace sflow;

namespace {
std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_SUITE_BEGIN("image");

TEST_CASE("png roundtrip preserves 8-bit quantized pixels") {
    Rng rng(77);
    Image img = Image::filled(13, 9, 0, 0, 0);
    for (auto& v : img.px) v = rng.uniform_float();

    const std::string path = temp_path("sflow_roundtrip.png");
    write_png(path, img);
    Image back = read_png(path);
    REQUIRE(back.h == img.h);
    REQUIRE(back.w == img.w);
    for (size_t i = 0; i < img.px.size(); ++i) {
        const float quantized = std::round(img.px[i] * 255.0f) / 255.0f;
        CHECK(back.px[i] == doctest::Approx(quantized).epsilon(1e-6));
    }
    std::remove(path.c_str());
}

TEST_CASE("png writer emits identical bytes for identical images") {
    Rng rng(78);
    Image img = Image::filled(8, 8, 0, 0, 0);
    for (auto& v : img.px) v = rng.uniform_float();
    const std::string p1 = temp_path("sflow_bytes1.png");
    const std::string p2 = temp_path("sflow_bytes2.png");
    write_png(p1, img);
    write_png(p2, img);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("read_png rejects garbage") {
    const std::string path = temp_path("sflow_garbage.png");
    std::ofstream(path) << "not a png";
    CHECK_THROWS_AS(read_png(path), DataError);
    std::remove(path.c_str());
}

TEST_CASE("pgm header and payload") {
    const std::string path = temp_path("sflow_test.pgm");
    write_pgm(path, 2, 3, {0, 128, 255, 1, 2, 3});
    std::ifstream f(path, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
    CHECK(contents == std::string("P5\n3 2\n255\n") + '\0' + '\x80' + '\xff' + '\x01' +
                          '\x02' + '\x03');
    std::remove(path.c_str());
}

TEST_CASE("horizontal concat then half downscale restores width") {
    Image a = Image::filled(4, 4, 1, 0, 0);
    Image b = Image::filled(4, 4, 0, 1, 0);
    Image wide = concat_horizontal(a, b);
    CHECK(wide.w == 8);
    Image half = downscale_width_half(wide);
    CHECK(half.w == 4);
    CHECK(half.at(0, 0, 0) == 1.0f);
    CHECK(half.at(0, 3, 1) == 1.0f);
}

TEST_CASE("bilinear resize endpoints") {
    Image img = Image::filled(2, 2, 0, 0, 0);
    img.at(0, 0, 0) = 1.0f;
    img.at(1, 1, 0) = 1.0f;
    Image up = resize_bilinear(img, 4, 4);
    CHECK(up.at(0, 0, 0) == 1.0f);
    CHECK(up.at(3, 3, 0) == 1.0f);
    CHECK(up.at(0, 3, 0) == 0.0f);
}

TEST_SUITE_END();
