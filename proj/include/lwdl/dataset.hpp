#pragma once

// Synthetic datasets (interleaved spirals, Gaussian blobs), the LWDS1 binary
// image-set format, deterministic train/test splits, and the per-epoch
// metrics CSV.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwdl/io.hpp"
#include "lwdl/rng.hpp"
#include "lwdl/tensor.hpp"

namespace lwdl {

struct Dataset {
    std::string name;
    std::uint64_t seed = 0;
    Tensor inputs;  // [N,features] or [N,C,H,W]
    std::vector<int> labels;
    std::size_t num_classes = 0;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;

    std::size_t size() const { return labels.size(); }

    Shape sample_shape() const {
        return Shape(inputs.shape().begin() + 1, inputs.shape().end());
    }
};

namespace detail {

// Seeded shuffle split; the test side takes exactly one fifth (floor).
inline void split_80_20(Dataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0xA11CE));
    rng.shuffle(order);
    const std::size_t test_count = n / 5;
    ds.test_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
    ds.train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
}

}  // namespace detail

// Spiral arms in the plane. Class c follows the parametric curve
//   r(u) = r0 + (1-r0)*u,  angle(u) = 2*pi*(turns*u + c/num_classes),
// for u in [0,1], with isotropic Gaussian noise of the given sigma. The
// inner radius keeps the arms apart near the center, where they would
// otherwise all collide into one unclassifiable blob.
inline constexpr double kSpiralTurns = 0.5;
inline constexpr double kSpiralInnerRadius = 0.25;

inline Dataset generate_spirals(std::size_t n_per_class, std::size_t num_classes,
                                double noise_sigma, std::uint64_t seed) {
    if (n_per_class < 2) throw ValueError("spirals: n_per_class must be at least 2");
    if (num_classes < 2) throw ValueError("spirals: num_classes must be at least 2");
    if (noise_sigma < 0.0) throw ValueError("spirals: noise_sigma must be non-negative");
    const std::size_t n = n_per_class * num_classes;
    Dataset ds;
    ds.name = "spirals";
    ds.seed = seed;
    ds.num_classes = num_classes;
    ds.inputs = Tensor(Shape{n, 2});
    ds.labels.resize(n);
    Rng rng(derive_seed(seed, 0x5B1));
    std::size_t row = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            const double u = static_cast<double>(i) / static_cast<double>(n_per_class - 1);
            const double r = kSpiralInnerRadius + (1.0 - kSpiralInnerRadius) * u;
            const double angle =
                2.0 * 3.14159265358979323846 *
                (kSpiralTurns * u + static_cast<double>(c) / static_cast<double>(num_classes));
            ds.inputs.at(row * 2 + 0) = r * std::cos(angle) + noise_sigma * rng.normal();
            ds.inputs.at(row * 2 + 1) = r * std::sin(angle) + noise_sigma * rng.normal();
            ds.labels[row] = static_cast<int>(c);
        }
    }
    detail::split_80_20(ds, seed);
    return ds;
}

// Gaussian clusters around class centroids placed on a sphere of radius
// `separation`; unit within-class noise, so larger separation means an
// easier task and more classes on the same sphere mean a harder one.
inline Dataset generate_blobs(std::size_t n_per_class, std::size_t num_classes, std::size_t dim,
                              double separation, std::uint64_t seed) {
    if (n_per_class < 2) throw ValueError("blobs: n_per_class must be at least 2");
    if (num_classes < 2) throw ValueError("blobs: num_classes must be at least 2");
    if (dim == 0) throw ValueError("blobs: dim must be positive");
    if (!(separation > 0.0)) throw ValueError("blobs: separation must be positive");
    const std::size_t n = n_per_class * num_classes;
    Dataset ds;
    ds.name = "blobs";
    ds.seed = seed;
    ds.num_classes = num_classes;
    ds.inputs = Tensor(Shape{n, dim});
    ds.labels.resize(n);
    Rng rng(derive_seed(seed, 0xB10B));
    std::vector<std::vector<double>> centroids(num_classes, std::vector<double>(dim));
    for (auto& c : centroids) {
        double norm2 = 0.0;
        for (double& v : c) {
            v = rng.normal();
            norm2 += v * v;
        }
        const double scale = separation / std::sqrt(norm2);
        for (double& v : c) v *= scale;
    }
    std::size_t row = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            for (std::size_t d = 0; d < dim; ++d) {
                ds.inputs.at(row * dim + d) = centroids[c][d] + rng.normal();
            }
            ds.labels[row] = static_cast<int>(c);
        }
    }
    detail::split_80_20(ds, seed);
    return ds;
}

// =====================================================================
//  LWDS1 binary image-set format
//  magic "LWDS1" | u32 N, C, H, W, num_classes | N*C*H*W f64 pixels | N u16 labels
// =====================================================================

inline constexpr char kDatasetMagic[] = "LWDS1";

inline void write_image_dataset(const std::string& path, const Dataset& ds) {
    if (ds.inputs.rank() != 4) {
        throw ShapeError("write_image_dataset: expected [N,C,H,W] inputs, got shape " +
                         shape_str(ds.inputs.shape()));
    }
    std::string bytes;
    bytes.append(kDatasetMagic, 5);
    detail::put_u32(bytes, static_cast<std::uint32_t>(ds.inputs.dim(0)));
    detail::put_u32(bytes, static_cast<std::uint32_t>(ds.inputs.dim(1)));
    detail::put_u32(bytes, static_cast<std::uint32_t>(ds.inputs.dim(2)));
    detail::put_u32(bytes, static_cast<std::uint32_t>(ds.inputs.dim(3)));
    detail::put_u32(bytes, static_cast<std::uint32_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) detail::put_f64(bytes, ds.inputs.at(i));
    for (int label : ds.labels) detail::put_u16(bytes, static_cast<std::uint16_t>(label));
    detail::write_file_bytes(path, bytes);
}

inline Dataset load_image_dataset(const std::string& path, std::uint64_t split_seed = 0) {
    detail::ByteReader r(detail::read_file_bytes(path), path);
    const std::string magic = r.take(5, "magic");
    if (magic != kDatasetMagic) {
        throw IOError(path + ": bad dataset magic at byte offset 0");
    }
    const std::uint32_t n = r.u32("sample count");
    const std::uint32_t c = r.u32("channel count");
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    const std::uint32_t classes = r.u32("class count");
    if (n == 0) throw IOError(path + ": empty dataset at byte offset " + std::to_string(r.offset()));
    if (c == 0 || h == 0 || w == 0 || classes == 0) {
        throw IOError(path + ": zero dimension in header at byte offset " + std::to_string(r.offset()));
    }
    Dataset ds;
    ds.name = "file:" + path;
    ds.seed = split_seed;
    ds.num_classes = classes;
    ds.inputs = Tensor(Shape{n, c, h, w});
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) ds.inputs.at(i) = r.f64("pixel");
    ds.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t at = r.offset();
        const std::uint16_t label = r.u16("label");
        if (label >= classes) {
            throw IOError(path + ": label " + std::to_string(label) + " out of range [0," +
                          std::to_string(classes) + ") at byte offset " + std::to_string(at));
        }
        ds.labels[i] = static_cast<int>(label);
    }
    r.expect_end("labels");
    detail::split_80_20(ds, split_seed);
    return ds;
}

// Reinterpret flat features as [C,H,W] images (for running conv stacks on
// generated data).
inline Dataset as_image_dataset(Dataset ds, const Shape& chw) {
    if (chw.size() != 3) throw ShapeError("as_image_dataset: expected [C,H,W] target shape");
    if (ds.inputs.rank() != 2 || ds.inputs.dim(1) != numel(chw)) {
        throw ShapeError("as_image_dataset: cannot view " + shape_str(ds.inputs.shape()) + " as " +
                         shape_str(chw) + " images");
    }
    const std::size_t n = ds.inputs.dim(0);
    ds.inputs = Tensor(Shape{n, chw[0], chw[1], chw[2]}, ds.inputs.values());
    return ds;
}

// Gather a batch by dataset indices.
inline std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& ds,
                                                        const std::vector<std::size_t>& indices) {
    Shape shape = ds.inputs.shape();
    shape[0] = indices.size();
    Tensor batch(shape);
    const std::size_t stride = ds.inputs.size() / ds.inputs.dim(0);
    std::vector<int> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = ds.inputs.data() + indices[i] * stride;
        std::copy(src, src + stride, batch.data() + i * stride);
        labels[i] = ds.labels[indices[i]];
    }
    return {std::move(batch), std::move(labels)};
}

// =====================================================================
//  Metrics CSV
// =====================================================================

struct MetricsRecord {
    std::size_t epoch = 0;
    std::string split = "test";
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> jsd;    // per crucial pair, pairing order
    std::vector<double> alpha;  // per crucial pair, pairing order
};

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string metrics_csv_header(std::size_t k) {
    std::string h = "epoch,split,loss,accuracy";
    for (std::size_t i = 0; i < k; ++i) h += ",jsd_" + std::to_string(i);
    for (std::size_t i = 0; i < k; ++i) h += ",alpha_" + std::to_string(i);
    return h;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records,
                              std::size_t k) {
    std::string out = metrics_csv_header(k) + "\n";
    for (const MetricsRecord& r : records) {
        if (r.jsd.size() != k || r.alpha.size() != k) {
            throw ValueError("metrics: record at epoch " + std::to_string(r.epoch) +
                             " has wrong column count");
        }
        out += std::to_string(r.epoch) + "," + r.split + "," + detail::format_double(r.loss) + "," +
               detail::format_double(r.accuracy);
        for (double v : r.jsd) out += "," + detail::format_double(v);
        for (double v : r.alpha) out += "," + detail::format_double(v);
        out += "\n";
    }
    detail::write_file_bytes(path, out);
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError(path + ": cannot open file");
    std::string line;
    if (!std::getline(in, line)) throw IOError(path + ": missing header row");
    std::size_t columns = 1;
    for (char ch : line) columns += ch == ',' ? 1 : 0;
    if (columns < 4 || (columns - 4) % 2 != 0) {
        throw IOError(path + ": malformed header '" + line + "'");
    }
    const std::size_t k = (columns - 4) / 2;
    std::vector<MetricsRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string tok;
        MetricsRecord r;
        auto next = [&]() {
            if (!std::getline(is, tok, ',')) throw IOError(path + ": short row '" + line + "'");
            return tok;
        };
        r.epoch = std::stoull(next());
        r.split = next();
        r.loss = std::stod(next());
        r.accuracy = std::stod(next());
        r.jsd.resize(k);
        for (double& v : r.jsd) v = std::stod(next());
        r.alpha.resize(k);
        for (double& v : r.alpha) v = std::stod(next());
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace lwdl
