#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "polarsynth/colormap.hpp"
#include "polarsynth/png_io.hpp"
#include "polarsynth/random.hpp"
#include "polarsynth/tensor_io.hpp"

using namespace polarsynth;
namespace fs = std::filesystem;

static fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "polarsynth_io_test";
    fs::create_directories(p);
    return p;
}

TEST_CASE("portable tensor round trip is bit exact") {
    Rng rng(5);
    io::Tensor t;
    t.shape = {2, 7, 5};
    t.axes = {"reim", "y", "x"};
    t.units = "m";
    t.extra["pitch"] = "3.5e-07";
    t.data.resize(70);
    for (auto& v : t.data) v = static_cast<float>(rng.normal());

    auto path = (tmpdir() / "t.ptns").string();
    io::write_tensor(path, t);
    auto r = io::read_tensor(path);
    CHECK(r.shape == t.shape);
    CHECK(r.axes == t.axes);
    CHECK(r.units == "m");
    CHECK(r.extra.at("pitch") == "3.5e-07");
    REQUIRE(r.data.size() == t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) CHECK(r.data[i] == t.data[i]);
}

TEST_CASE("tensor corruption is detected") {
    io::Tensor t;
    t.shape = {4, 4};
    t.axes = {"y", "x"};
    t.data.assign(16, 1.0f);
    auto path = (tmpdir() / "c.ptns").string();
    io::write_tensor(path, t);

    // truncate payload
    {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(path, std::ios::binary);
        out.write(all.data(), static_cast<std::streamsize>(all.size() - 8));
    }
    CHECK_THROWS_AS(io::read_tensor(path), IoError);

    // flip a payload byte under the checksum
    io::write_tensor(path, t);
    {
        std::fstream fio(path, std::ios::binary | std::ios::in | std::ios::out);
        fio.seekp(-2, std::ios::end);
        char b = 0x7f;
        fio.write(&b, 1);
    }
    CHECK_THROWS_AS(io::read_tensor(path), IoError);
}

TEST_CASE("complex grid tensor round trip") {
    CGrid g(3, 4);
    Rng rng(9);
    for (size_t i = 0; i < g.size(); ++i) g[i] = cplx(rng.normal(), rng.normal());
    auto t = io::tensor_from_cgrid(g);
    auto path = (tmpdir() / "cg.ptns").string();
    io::write_tensor(path, t);
    auto back = io::cgrid_from_tensor(io::read_tensor(path));
    for (size_t i = 0; i < g.size(); ++i) {
        CHECK(back[i].real() == doctest::Approx(g[i].real()).epsilon(1e-6));
        CHECK(back[i].imag() == doctest::Approx(g[i].imag()).epsilon(1e-6));
    }
}

TEST_CASE("png gray8 round trip") {
    RGrid img(13, 17);
    Rng rng(11);
    for (size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
    auto path = (tmpdir() / "g8.png").string();
    io::write_png_gray8(path, img);
    auto r = io::read_png(path);
    CHECK(r.width == 17);
    CHECK(r.height == 13);
    CHECK(r.channels == 1);
    for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 17; ++x)
            CHECK(std::abs(r.luma(y, x) - img(y, x)) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("png gray16 preserves fine quantization") {
    RGrid img(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img(y, x) = (y * 8 + x) / 64.0 + 1e-4;
    auto path = (tmpdir() / "g16.png").string();
    io::write_png_gray16(path, img);
    auto r = io::read_png(path);
    CHECK(r.bit_depth == 16);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            CHECK(std::abs(r.luma(y, x) - img(y, x)) <= 0.5 / 65535.0 + 1e-12);
}

TEST_CASE("png rgb8 round trip and luma") {
    RGrid r(4, 4, 0.2), g(4, 4, 0.4), b(4, 4, 0.8);
    auto path = (tmpdir() / "rgb.png").string();
    io::write_png_rgb8(path, r, g, b);
    auto img = io::read_png(path);
    CHECK(img.channels == 3);
    double want = 0.2126 * 0.2 + 0.7152 * 0.4 + 0.0722 * 0.8;
    CHECK(img.luma(2, 2) == doctest::Approx(want).epsilon(0.01));
}

TEST_CASE("png reader handles filtered scanlines") {
    // Hand-build a 3x3 gray8 PNG whose rows use filters Sub, Up, and Paeth,
    // then check the reconstruction against hand-computed values.
    namespace pd = io::pngdetail;
    std::vector<uint8_t> raw = {
        1, 10, 5, 5,   // Sub:   10, 15, 20
        2, 1, 2, 3,    // Up:    11, 17, 23
        4, 5, 0, 250,  // Paeth: 16, 33, 33+250-256=27? computed below
    };
    // expected row 3 via Paeth predictor:
    //   x=0: a=0,b=11,c=0   -> pred=11, v=16
    //   x=1: a=16,b=17,c=11 -> p=22, pa=6,pb=5,pc=11 -> pred=17, v=17
    //   x=2: a=17,b=23,c=17 -> p=23, pa=6,pb=0,pc=6  -> pred=23, v=(23+250)%256=17
    auto comp = pd::zlib_compress(raw);
    auto path = (tmpdir() / "filters.png").string();
    {
        std::ofstream f(path, std::ios::binary);
        static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
        f.write(reinterpret_cast<const char*>(sig), 8);
        std::vector<uint8_t> ihdr;
        pd::put_u32(ihdr, 3);
        pd::put_u32(ihdr, 3);
        ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});
        pd::write_chunk(f, "IHDR", ihdr);
        pd::write_chunk(f, "IDAT", comp);
        pd::write_chunk(f, "IEND", {});
    }
    auto img = io::read_png(path);
    auto px = [&](int y, int x) { return static_cast<int>(std::lround(img.luma(y, x) * 255)); };
    CHECK(px(0, 0) == 10);
    CHECK(px(0, 1) == 15);
    CHECK(px(0, 2) == 20);
    CHECK(px(1, 0) == 11);
    CHECK(px(1, 1) == 17);
    CHECK(px(1, 2) == 23);
    CHECK(px(2, 0) == 16);
    CHECK(px(2, 1) == 17);
    CHECK(px(2, 2) == 17);
}

TEST_CASE("signed colormap previews write valid PNGs") {
    RGrid img(6, 6, 0.0);
    img(1, 1) = 1.0;
    img(4, 4) = -0.5;
    auto path = (tmpdir() / "signed.png").string();
    io::write_signed_png(path, img);
    auto r = io::read_png(path);
    CHECK(r.channels == 3);
    // positive pixel is red-ish, negative is blue-ish, zero is white
    auto at = [&](int y, int x, int c) {
        return r.samples[(static_cast<size_t>(y) * r.width + x) * 3 + c];
    };
    CHECK(at(1, 1, 0) > 0.9);
    CHECK(at(1, 1, 2) < 0.1);
    CHECK(at(4, 4, 2) > 0.9);
    CHECK(at(4, 4, 0) < 0.6);
    CHECK(at(0, 0, 0) > 0.9);
    CHECK(at(0, 0, 2) > 0.9);
}
