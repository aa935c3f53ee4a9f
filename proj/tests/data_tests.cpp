#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "simsyn/data/dataset.hpp"
#include "simsyn/data/label_map.hpp"
#include "simsyn/data/synthetic.hpp"

using namespace simsyn;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("simsyn_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("encode_label_map") {
    SUBCASE("1x1 value 0, C=2") {
        GridU16 g{1, 1, {0}};
        Tensor<float> t = encode_label_map(g, 2);
        CHECK(t[0] == 1.0f);
        CHECK(t[1] == 0.0f);
    }
    SUBCASE("2x2 all ones, C=2") {
        GridU16 g{2, 2, {1, 1, 1, 1}};
        Tensor<float> t = encode_label_map(g, 2);
        for (Index i = 0; i < 4; ++i) {
            CHECK(t[i] == 0.0f);      // channel 0
            CHECK(t[4 + i] == 1.0f);  // channel 1
        }
    }
    SUBCASE("round trip on random 8x8, C=5") {
        Rng rng(3);
        GridU16 g{8, 8, {}};
        g.v.resize(64);
        for (auto& v : g.v) v = static_cast<std::uint16_t>(rng.uniform_int(5));
        Tensor<float> t = encode_label_map(g, 5);
        GridU16 back = decode_label_map(t);
        CHECK(back.v == g.v);
        // exactly one 1 per pixel
        for (Index p = 0; p < 64; ++p) {
            float s = 0;
            for (Index c = 0; c < 5; ++c) s += t[c * 64 + p];
            CHECK(s == 1.0f);
        }
    }
    SUBCASE("out-of-range id carries the pixel coordinate") {
        GridU16 g{2, 2, {0, 0, 0, 7}};
        try {
            encode_label_map(g, 4);
            FAIL("expected rejection");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("(1,1)") != std::string::npos);
        }
    }
}

TEST_CASE("compute_instance_offsets") {
    SUBCASE("single foreground pixel is its own center") {
        GridU16 inst{3, 3, {0, 0, 0, 0, 5, 0, 0, 0, 0}};
        Tensor<float> off = compute_instance_offsets(inst, 0);
        CHECK(off[0 * 9 + 4] == 0.0f);
        CHECK(off[1 * 9 + 4] == 0.0f);
    }
    SUBCASE("two-pixel horizontal instance at columns 3,4") {
        GridU16 inst{2, 8, {}};
        inst.v.assign(16, 0);
        inst.at(0, 3) = 1;
        inst.at(0, 4) = 1;
        Tensor<float> off = compute_instance_offsets(inst, 0);
        // center column 3.5 -> offsets +0.5 and -0.5 before normalization by max(H,W)=8
        CHECK(off[1 * 16 + 3] == doctest::Approx(0.5 / 8.0));
        CHECK(off[1 * 16 + 4] == doctest::Approx(-0.5 / 8.0));
        CHECK(off[0 * 16 + 3] == 0.0f);  // vertical: single-row instance
    }
    SUBCASE("all background yields zeros") {
        GridU16 inst{4, 4, {}};
        inst.v.assign(16, 0);
        Tensor<float> off = compute_instance_offsets(inst, 0);
        CHECK(off.array().abs().maxCoeff() == 0.0f);
    }
    SUBCASE("brute-force center-of-mass oracle and reconstruction") {
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            Index H = 4 + static_cast<Index>(rng.uniform_int(13));  // <=16
            Index W = 4 + static_cast<Index>(rng.uniform_int(13));
            GridU16 inst{H, W, {}};
            inst.v.resize(static_cast<size_t>(H * W));
            for (auto& v : inst.v) v = static_cast<std::uint16_t>(rng.uniform_int(4));  // ids 0..3
            Tensor<float> off = compute_instance_offsets(inst, 0);

            // Independent oracle: explicit mean over coordinates per id.
            for (int id = 1; id < 4; ++id) {
                double sy = 0, sx = 0, n = 0;
                for (Index y = 0; y < H; ++y)
                    for (Index x = 0; x < W; ++x)
                        if (inst.at(y, x) == id) {
                            sy += static_cast<double>(y);
                            sx += static_cast<double>(x);
                            n += 1;
                        }
                if (n == 0) continue;
                double cy = sy / n, cx = sx / n;
                double norm = static_cast<double>(std::max(H, W));
                for (Index y = 0; y < H; ++y)
                    for (Index x = 0; x < W; ++x)
                        if (inst.at(y, x) == id) {
                            double oy = off[0 * H * W + y * W + x];
                            double ox = off[1 * H * W + y * W + x];
                            CHECK(oy == doctest::Approx((cy - y) / norm).epsilon(1e-6));
                            CHECK(ox == doctest::Approx((cx - x) / norm).epsilon(1e-6));
                            // un-normalizing and adding reconstructs the center within 0.5 px
                            CHECK(std::abs(y + oy * norm - cy) < 0.5);
                            CHECK(std::abs(x + ox * norm - cx) < 0.5);
                        }
            }
        }
    }
}

TEST_CASE("class frequencies") {
    SUBCASE("spec examples") {
        std::vector<std::vector<int>> sets = {{0}, {0, 1}};
        auto f = compute_class_frequencies(sets, 2);
        CHECK(f[0] == 1.0);
        CHECK(f[1] == 0.5);
    }
    SUBCASE("empty dataset rejected") {
        CHECK_THROWS_AS(compute_class_frequencies({}, 3), DataError);
    }
    SUBCASE("randomized toy set matches exhaustive count") {
        Rng rng(23);
        std::vector<std::vector<int>> sets;
        for (int i = 0; i < 10; ++i) {
            std::set<int> s;
            s.insert(static_cast<int>(rng.uniform_int(4)));
            if (rng.uniform() < 0.6) s.insert(static_cast<int>(rng.uniform_int(4)));
            sets.emplace_back(s.begin(), s.end());
        }
        auto f = compute_class_frequencies(sets, 4);
        for (int c = 0; c < 4; ++c) {
            int count = 0;
            for (const auto& s : sets)
                if (std::find(s.begin(), s.end(), c) != s.end()) ++count;
            CHECK(f[static_cast<size_t>(c)] == doctest::Approx(count / 10.0));
        }
    }
}

TEST_CASE("balanced sampling weights") {
    SUBCASE("identical class sets give uniform weights") {
        std::vector<std::vector<int>> sets = {{0, 1}, {0, 1}, {0, 1}};
        auto f = compute_class_frequencies(sets, 2);
        auto w = compute_sampling_weights(sets, f);
        for (double v : w) CHECK(v == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("frequencies {1, 0.5} give (0.414, 0.586)") {
        std::vector<std::vector<int>> sets = {{0}, {0, 1}};
        auto f = compute_class_frequencies(sets, 2);
        auto w = compute_sampling_weights(sets, f);
        double expect1 = std::sqrt(2.0) / (1.0 + std::sqrt(2.0));
        CHECK(w[0] == doctest::Approx(1.0 - expect1).epsilon(1e-9));
        CHECK(w[1] == doctest::Approx(expect1).epsilon(1e-9));
        CHECK(w[0] + w[1] == doctest::Approx(1.0));
    }
    SUBCASE("single image gets probability 1") {
        std::vector<std::vector<int>> sets = {{2}};
        auto w = compute_sampling_weights(sets, compute_class_frequencies(sets, 3));
        CHECK(w[0] == doctest::Approx(1.0));
    }
    SUBCASE("image with no positive-frequency class rejected") {
        std::vector<double> f = {0.0, 0.5};
        CHECK_THROWS_AS(compute_sampling_weights({{0}}, f), DataError);
    }
    SUBCASE("balanced sampling raises the rare class expectation vs uniform") {
        std::vector<std::vector<int>> sets = {{0}, {0}, {0}, {0, 1}};
        auto f = compute_class_frequencies(sets, 2);
        auto w = compute_sampling_weights(sets, f);
        double uniform_rare = 1.0 / 4.0;
        double balanced_rare = w[3];
        CHECK(balanced_rare > uniform_rare);
    }
}

TEST_CASE("sample_batch") {
    SUBCASE("uniform weights, 1e6 draws within 2% relative") {
        std::vector<double> w(8, 1.0 / 8.0);
        Rng rng(5);
        auto draws = sample_batch(w, 1000000, rng);
        std::vector<Index> counts(8, 0);
        for (Index d : draws) counts[static_cast<size_t>(d)]++;
        for (Index c : counts)
            CHECK(std::abs(static_cast<double>(c) - 125000.0) / 125000.0 < 0.02);
    }
    SUBCASE("degenerate weight vector draws only index 0") {
        Rng rng(6);
        auto draws = sample_batch({1.0, 0.0}, 10000, rng);
        for (Index d : draws) CHECK(d == 0);
    }
    SUBCASE("fixed seed repeats the sequence") {
        Rng a(9), b(9);
        auto d1 = sample_batch({0.2, 0.3, 0.5}, 100, a);
        auto d2 = sample_batch({0.2, 0.3, 0.5}, 100, b);
        CHECK(d1 == d2);
    }
    SUBCASE("zero batch size rejected") {
        Rng rng(1);
        std::vector<double> w = {1.0};
        CHECK_THROWS(sample_batch(w, 0, rng));
    }
    SUBCASE("chi-square goodness of fit at alpha=0.01") {
        // df = 3 -> critical value 11.345.
        std::vector<double> w = {0.1, 0.2, 0.3, 0.4};
        Rng rng(31);
        const Index n = 1000000;
        auto draws = sample_batch(w, n, rng);
        std::vector<double> counts(4, 0);
        for (Index d : draws) counts[static_cast<size_t>(d)] += 1;
        double chi2 = 0;
        for (size_t i = 0; i < 4; ++i) {
            double expect = w[i] * static_cast<double>(n);
            chi2 += (counts[i] - expect) * (counts[i] - expect) / expect;
        }
        CHECK(chi2 < 11.345);
    }
}

TEST_CASE("synthetic dataset") {
    SUBCASE("byte-identical on re-render") {
        SyntheticSceneSpec spec;
        spec.num_classes = 4;
        spec.num_images = 4;
        spec.seed = 7;
        std::string r1 = temp_dir("synth_a"), r2 = temp_dir("synth_b");
        generate_synthetic_dataset(spec, r1);
        generate_synthetic_dataset(spec, r2);
        for (const char* sub : {"images", "labels", "instances"})
            for (int i = 0; i < 4; ++i) {
                char n[32];
                std::snprintf(n, sizeof(n), "%05d.png", i);
                auto b1 = file_bytes(r1 + "/" + sub + "/" + n);
                auto b2 = file_bytes(r2 + "/" + sub + "/" + n);
                CHECK(b1 == b2);
                CHECK(!b1.empty());
            }
    }
    SUBCASE("rarity profile controls appearance frequency") {
        SyntheticSceneSpec spec;
        spec.num_classes = 4;
        spec.num_images = 500;
        spec.rarity = {1.0, 0.9, 0.6, 0.1};
        spec.seed = 11;
        int count3 = 0;
        for (Index i = 0; i < spec.num_images; ++i) {
            RenderedScene s = render_scene(spec, i);
            bool has3 = false;
            for (auto v : s.labels.v) has3 = has3 || (v == 3);
            count3 += has3 ? 1 : 0;
        }
        double f3 = count3 / 500.0;
        CHECK(f3 >= 0.05);
        CHECK(f3 <= 0.15);
    }
    SUBCASE("oracle reproduces rendered labels exactly") {
        SyntheticSceneSpec spec;
        spec.num_classes = 5;
        spec.seed = 3;
        SyntheticOracle oracle(5);
        for (Index i = 0; i < 6; ++i) {
            RenderedScene s = render_scene(spec, i);
            GridU16 seg = oracle.segment(image_to_tensor(s.image));
            CHECK(seg.v == s.labels.v);
        }
    }
    SUBCASE("incomplete pairs are listed by id") {
        SyntheticSceneSpec spec;
        spec.num_classes = 3;
        spec.num_images = 4;
        spec.seed = 19;
        std::string root = temp_dir("synth_partial");
        generate_synthetic_dataset(spec, root);
        fs::remove(fs::path(root) / "labels" / "00002.png");
        fs::remove(fs::path(root) / "instances" / "00003.png");
        try {
            load_dataset(root, /*require_instances=*/true);
            FAIL("expected rejection");
        } catch (const DataError& e) {
            std::string msg = e.what();
            CHECK(msg.find("00002 (label)") != std::string::npos);
            CHECK(msg.find("00003 (instances)") != std::string::npos);
        }
    }
    SUBCASE("dataset round trip: index, manifest, loader, offsets") {
        SyntheticSceneSpec spec;
        spec.num_classes = 4;
        spec.num_images = 6;
        spec.seed = 13;
        std::string root = temp_dir("synth_load");
        DatasetIndex idx = generate_synthetic_dataset(spec, root);
        CHECK(idx.size() == 6);
        CHECK(idx.num_classes == 4);
        double wsum = 0;
        for (double w : idx.sampling_weights) wsum += w;
        CHECK(wsum == doctest::Approx(1.0));
        SampleLoader loader(idx, /*use_offsets=*/true);
        Sample s = loader.get(0);
        CHECK(s.image.shape() == Shape{3, 64, 64});
        CHECK(s.one_hot.shape() == Shape{4, 64, 64});
        CHECK(s.offsets.shape() == Shape{2, 64, 64});
        // one-hot column sums
        for (Index p = 0; p < 64 * 64; ++p) {
            float sum = 0;
            for (Index c = 0; c < 4; ++c) sum += s.one_hot[c * 64 * 64 + p];
            CHECK(sum == 1.0f);
        }
    }
}

TEST_CASE("png io round trips") {
    std::string root = temp_dir("png");
    SUBCASE("rgb") {
        ImageU8 img;
        img.height = 5;
        img.width = 7;
        img.rgb.resize(3 * 5 * 7);
        Rng rng(2);
        for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.uniform_int(256));
        write_rgb_png(root + "/a.png", img);
        ImageU8 back = read_rgb_png(root + "/a.png");
        CHECK(back.rgb == img.rgb);
    }
    SUBCASE("palette labels") {
        GridU16 g{4, 4, {}};
        g.v = {0, 1, 2, 3, 3, 2, 1, 0, 0, 0, 1, 1, 2, 2, 3, 3};
        Palette p = synthetic_palette(4);
        write_palette_png(root + "/l.png", g, p);
        Palette pback;
        GridU16 back = read_palette_png(root + "/l.png", &pback);
        CHECK(back.v == g.v);
        CHECK(pback.rgb == p.rgb);
    }
    SUBCASE("16-bit instances") {
        GridU16 g{3, 3, {0, 1, 2, 300, 40000, 5, 6, 7, 8}};
        write_gray16_png(root + "/i.png", g);
        CHECK(read_gray16_png(root + "/i.png").v == g.v);
    }
    SUBCASE("corrupt file rejected") {
        std::ofstream os(root + "/bad.png", std::ios::binary);
        os << "not a png";
        os.close();
        CHECK_THROWS_AS(read_rgb_png(root + "/bad.png"), DataError);
    }
}
