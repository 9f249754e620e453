#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "lwdl/config.hpp"
#include "lwdl/dataset.hpp"
#include "testutil.hpp"

using namespace lwdl;

TEST_CASE("spiral generation", "[data]") {
    SECTION("counts and split arithmetic") {
        Dataset ds = generate_spirals(100, 3, 0.1, 1);
        REQUIRE(ds.size() == 300);
        REQUIRE(ds.train_idx.size() == 240);
        REQUIRE(ds.test_idx.size() == 60);
        std::vector<char> seen(300, 0);
        for (std::size_t i : ds.train_idx) seen[i] = 1;
        for (std::size_t i : ds.test_idx) {
            REQUIRE(seen[i] == 0);  // disjoint
            seen[i] = 1;
        }
        for (char c : seen) REQUIRE(c == 1);  // exhaustive
    }
    SECTION("noiseless points lie exactly on their parametric arms") {
        const std::size_t n = 50, classes = 4;
        Dataset ds = generate_spirals(n, classes, 0.0, 7);
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t row = c * n + i;
                const double u = static_cast<double>(i) / static_cast<double>(n - 1);
                const double r = kSpiralInnerRadius + (1.0 - kSpiralInnerRadius) * u;
                const double angle = 2.0 * 3.14159265358979323846 *
                                     (kSpiralTurns * u + static_cast<double>(c) / classes);
                REQUIRE(std::abs(ds.inputs.at(row * 2 + 0) - r * std::cos(angle)) <= 1e-9);
                REQUIRE(std::abs(ds.inputs.at(row * 2 + 1) - r * std::sin(angle)) <= 1e-9);
            }
        }
    }
    SECTION("same seed reproduces identical bits") {
        Dataset a = generate_spirals(60, 5, 0.3, 99);
        Dataset b = generate_spirals(60, 5, 0.3, 99);
        REQUIRE(lwdl::testutil::bitwise_equal(a.inputs, b.inputs));
        REQUIRE(a.labels == b.labels);
        REQUIRE(a.train_idx == b.train_idx);
    }
    SECTION("degenerate sizes rejected") {
        REQUIRE_THROWS_AS(generate_spirals(1, 3, 0.1, 1), ValueError);
        REQUIRE_THROWS_AS(generate_spirals(10, 1, 0.1, 1), ValueError);
    }
}

namespace {

// Nearest-centroid accuracy on the test split, with centroids estimated on
// the train split: a model-free difficulty probe.
double nearest_centroid_accuracy(const Dataset& ds) {
    const std::size_t dim = ds.inputs.dim(1);
    std::vector<std::vector<double>> centroid(ds.num_classes, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(ds.num_classes, 0);
    for (std::size_t i : ds.train_idx) {
        const int c = ds.labels[i];
        for (std::size_t d = 0; d < dim; ++d) centroid[c][d] += ds.inputs.at(i * dim + d);
        ++count[c];
    }
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        for (double& v : centroid[c]) v /= static_cast<double>(count[c]);
    }
    std::size_t correct = 0;
    for (std::size_t i : ds.test_idx) {
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
            double d2 = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = ds.inputs.at(i * dim + d) - centroid[c][d];
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                arg = c;
            }
        }
        correct += static_cast<int>(arg) == ds.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.test_idx.size());
}

}  // namespace

TEST_CASE("blob generation", "[data]") {
    SECTION("huge separation is linearly solvable") {
        Dataset ds = generate_blobs(50, 4, 6, 100.0, 3);
        REQUIRE(nearest_centroid_accuracy(ds) == 1.0);
    }
    SECTION("more classes at equal separation are harder") {
        const double sep = 3.0;
        Dataset easy = generate_blobs(40, 10, 8, sep, 5);
        Dataset hard = generate_blobs(40, 50, 8, sep, 5);
        REQUIRE(nearest_centroid_accuracy(hard) < nearest_centroid_accuracy(easy));
    }
    SECTION("same seed reproduces identical bits") {
        Dataset a = generate_blobs(30, 5, 4, 4.0, 11);
        Dataset b = generate_blobs(30, 5, 4, 4.0, 11);
        REQUIRE(lwdl::testutil::bitwise_equal(a.inputs, b.inputs));
        REQUIRE(a.labels == b.labels);
    }
}

TEST_CASE("image dataset file format", "[data]") {
    const std::string path = "build/test_dataset.lwds";
    SECTION("round trip is bit-exact") {
        Rng rng(2);
        Dataset ds;
        ds.num_classes = 3;
        ds.inputs = lwdl::testutil::random_tensor(rng, {4, 1, 2, 2}, 0.0, 1.0);
        ds.labels = {0, 2, 1, 0};
        write_image_dataset(path, ds);
        Dataset loaded = load_image_dataset(path, 1);
        REQUIRE(lwdl::testutil::bitwise_equal(loaded.inputs, ds.inputs));
        REQUIRE(loaded.labels == ds.labels);
        REQUIRE(loaded.num_classes == 3);
        std::remove(path.c_str());
    }
    SECTION("hand-built two-sample file with known pixels") {
        std::string bytes;
        bytes.append("LWDS1", 5);
        lwdl::detail::put_u32(bytes, 2);  // N
        lwdl::detail::put_u32(bytes, 1);  // C
        lwdl::detail::put_u32(bytes, 1);  // H
        lwdl::detail::put_u32(bytes, 2);  // W
        lwdl::detail::put_u32(bytes, 2);  // classes
        for (double v : {0.25, 0.5, 0.75, 1.0}) lwdl::detail::put_f64(bytes, v);
        lwdl::detail::put_u16(bytes, 1);
        lwdl::detail::put_u16(bytes, 0);
        lwdl::detail::write_file_bytes(path, bytes);
        Dataset ds = load_image_dataset(path, 0);
        REQUIRE(ds.inputs.shape() == Shape{2, 1, 1, 2});
        REQUIRE(ds.inputs.values() == std::vector<double>{0.25, 0.5, 0.75, 1.0});
        REQUIRE(ds.labels == std::vector<int>{1, 0});
        std::remove(path.c_str());
    }
    SECTION("error contracts carry byte offsets") {
        std::string bytes;
        bytes.append("LWDS1", 5);
        lwdl::detail::put_u32(bytes, 0);  // N = 0
        lwdl::detail::put_u32(bytes, 1);
        lwdl::detail::put_u32(bytes, 1);
        lwdl::detail::put_u32(bytes, 1);
        lwdl::detail::put_u32(bytes, 2);
        lwdl::detail::write_file_bytes(path, bytes);
        REQUIRE_THROWS_WITH(load_image_dataset(path, 0),
                            Catch::Matchers::ContainsSubstring("empty dataset"));

        bytes[0] = 'A';
        lwdl::detail::write_file_bytes(path, bytes);
        REQUIRE_THROWS_WITH(load_image_dataset(path, 0),
                            Catch::Matchers::ContainsSubstring("magic"));

        // truncated pixel payload
        std::string good;
        good.append("LWDS1", 5);
        lwdl::detail::put_u32(good, 1);
        lwdl::detail::put_u32(good, 1);
        lwdl::detail::put_u32(good, 1);
        lwdl::detail::put_u32(good, 2);
        lwdl::detail::put_u32(good, 2);
        lwdl::detail::put_f64(good, 0.5);  // one of two pixels
        lwdl::detail::write_file_bytes(path, good);
        REQUIRE_THROWS_WITH(load_image_dataset(path, 0),
                            Catch::Matchers::ContainsSubstring("truncated") &&
                                Catch::Matchers::ContainsSubstring("byte offset"));

        // out-of-range label
        lwdl::detail::put_f64(good, 0.5);
        lwdl::detail::put_u16(good, 7);
        lwdl::detail::write_file_bytes(path, good);
        REQUIRE_THROWS_WITH(load_image_dataset(path, 0),
                            Catch::Matchers::ContainsSubstring("label 7") &&
                                Catch::Matchers::ContainsSubstring("byte offset"));
        std::remove(path.c_str());
    }
}

TEST_CASE("metrics csv round trip", "[data]") {
    const std::string path = "build/test_metrics.csv";
    std::vector<MetricsRecord> records;
    Rng rng(6);
    for (std::size_t e = 1; e <= 5; ++e) {
        MetricsRecord r;
        r.epoch = e;
        r.split = "test";
        r.loss = rng.uniform(0.0, 3.0);
        r.accuracy = rng.uniform(0.0, 1.0);
        r.jsd = {rng.uniform(0.0, 0.69), rng.uniform(0.0, 0.69)};
        r.alpha = {rng.uniform(1e-5, 1.0), rng.uniform(1e-5, 1.0)};
        records.push_back(r);
    }
    write_metrics_csv(path, records, 2);
    auto loaded = read_metrics_csv(path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        REQUIRE(loaded[i].epoch == records[i].epoch);
        REQUIRE(loaded[i].split == records[i].split);
        REQUIRE(loaded[i].loss == records[i].loss);
        REQUIRE(loaded[i].accuracy == records[i].accuracy);
        REQUIRE(loaded[i].jsd == records[i].jsd);
        REQUIRE(loaded[i].alpha == records[i].alpha);
    }
    std::remove(path.c_str());
}

TEST_CASE("run config parsing", "[data]") {
    SECTION("reference config parses, validates, and round-trips") {
        RunConfig cfg = parse_run_config_file("configs/cnn_reference.conf");
        validate_run_config(cfg);
        const std::string text = serialize_run_config(cfg);
        RunConfig again = parse_run_config(text);
        REQUIRE(serialize_run_config(again) == text);
    }
    SECTION("unknown keys are rejected by name") {
        const std::string text =
            "[dataset]\nkind = spirals\n\n[teacher]\ninput = 2\nlayer = dense 2 4\n\n"
            "[student]\ninput = 2\nlayer = dense 2 4\n\n[scheduler]\ngama = 0.9\n";
        REQUIRE_THROWS_WITH(parse_run_config(text),
                            Catch::Matchers::ContainsSubstring("gama") &&
                                Catch::Matchers::ContainsSubstring("unknown key"));
    }
    SECTION("validation names the offending field") {
        RunConfig cfg = parse_run_config_file("configs/cnn_reference.conf");
        cfg.training.batch_size = 0;
        REQUIRE_THROWS_WITH(validate_run_config(cfg),
                            Catch::Matchers::ContainsSubstring("[training] batch_size"));
        cfg = parse_run_config_file("configs/cnn_reference.conf");
        cfg.student.layers.push_back(cfg.student.layers.back());
        REQUIRE_THROWS_AS(validate_run_config(cfg), ConfigError);
    }
    SECTION("differentiable-maps modes resolve per flag") {
        RunConfig cfg = parse_run_config_file("configs/cnn_reference.conf");
        cfg.training.differentiable_maps = DifferentiableMapsMode::Auto;
        REQUIRE(resolve_differentiable_maps(cfg.training));
        cfg.training.differentiable_maps = DifferentiableMapsMode::Off;
        REQUIRE_FALSE(resolve_differentiable_maps(cfg.training));
    }
    SECTION("teacher must be at least as deep as the student") {
        RunConfig cfg = parse_run_config_file("configs/cnn_reference.conf");
        std::swap(cfg.teacher, cfg.student);
        REQUIRE_THROWS_WITH(validate_run_config(cfg),
                            Catch::Matchers::ContainsSubstring("at least as deep"));
    }
}
