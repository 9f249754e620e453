#pragma once

// Declarative layer stacks for teacher and student models. A layer is
// "crucial" when it changes the channel (conv) or feature (dense) count;
// those are the sites where teacher and student are compared. Crucial layers
// of two models are paired by identical post-activation output shape, in
// order of occurrence.

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lwdl/io.hpp"
#include "lwdl/rng.hpp"
#include "lwdl/tensor.hpp"

namespace lwdl {

enum class LayerKind { Dense, Conv2d, AvgPool2d, Flatten };

struct LayerDesc {
    LayerKind kind = LayerKind::Dense;
    std::size_t in = 0;       // input features (dense) / channels (conv)
    std::size_t out = 0;      // output features (dense) / channels (conv)
    std::size_t kernel = 0;   // conv / pool window
    std::size_t stride = 1;
    std::size_t padding = 0;  // conv only
    bool relu = false;
};

struct ModelSpec {
    std::vector<LayerDesc> layers;
    Shape input_shape;  // per-sample shape, e.g. {2} or {1,12,12}
    std::uint64_t seed = 0;
};

namespace detail {

inline std::string layer_desc_str(const LayerDesc& l) {
    std::ostringstream os;
    switch (l.kind) {
        case LayerKind::Dense:
            os << "dense " << l.in << " " << l.out;
            break;
        case LayerKind::Conv2d:
            os << "conv " << l.in << " " << l.out << " k" << l.kernel << " s" << l.stride << " p"
               << l.padding;
            break;
        case LayerKind::AvgPool2d:
            os << "avgpool k" << l.kernel << " s" << l.stride;
            break;
        case LayerKind::Flatten:
            os << "flatten";
            break;
    }
    if (l.relu) os << " relu";
    return os.str();
}

}  // namespace detail

// Per-sample output shape of one layer; throws when the input is incompatible.
inline Shape layer_output_shape(const LayerDesc& l, const Shape& in, std::size_t layer_index) {
    const auto fail = [&](const std::string& why) {
        throw ShapeError("layer " + std::to_string(layer_index) + " (" + detail::layer_desc_str(l) +
                         "): " + why + " for input shape " + shape_str(in));
    };
    switch (l.kind) {
        case LayerKind::Dense: {
            if (in.size() != 1) fail("dense layer expects a flat feature vector");
            if (in[0] != l.in) fail("expected " + std::to_string(l.in) + " input features");
            return Shape{l.out};
        }
        case LayerKind::Conv2d: {
            if (in.size() != 3) fail("conv layer expects [C,H,W] input");
            if (in[0] != l.in) fail("expected " + std::to_string(l.in) + " input channels");
            const std::size_t eff_h = in[1] + 2 * l.padding;
            const std::size_t eff_w = in[2] + 2 * l.padding;
            if (l.kernel == 0 || eff_h < l.kernel || eff_w < l.kernel) fail("kernel larger than input");
            return Shape{l.out, (eff_h - l.kernel) / l.stride + 1, (eff_w - l.kernel) / l.stride + 1};
        }
        case LayerKind::AvgPool2d: {
            if (in.size() != 3) fail("pool layer expects [C,H,W] input");
            if (l.kernel == 0 || in[1] < l.kernel || in[2] < l.kernel) fail("window larger than input");
            const std::size_t s = l.stride == 0 ? l.kernel : l.stride;
            return Shape{in[0], (in[1] - l.kernel) / s + 1, (in[2] - l.kernel) / s + 1};
        }
        case LayerKind::Flatten: {
            if (in.empty()) fail("flatten expects a non-empty shape");
            return Shape{numel(in)};
        }
    }
    fail("unknown layer kind");
    return {};
}

inline bool layer_is_crucial(const LayerDesc& l) {
    return (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) && l.in != l.out;
}

// Per-sample post-activation output shapes of every layer.
inline std::vector<Shape> spec_layer_shapes(const ModelSpec& spec) {
    if (spec.layers.empty()) throw ShapeError("model spec: no layers");
    if (spec.input_shape.empty()) throw ShapeError("model spec: missing input shape");
    std::vector<Shape> shapes;
    shapes.reserve(spec.layers.size());
    Shape cur = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        cur = layer_output_shape(spec.layers[i], cur, i);
        shapes.push_back(cur);
    }
    return shapes;
}

inline std::vector<std::size_t> spec_crucial_indices(const ModelSpec& spec) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (layer_is_crucial(spec.layers[i])) out.push_back(i);
    }
    return out;
}

inline void validate_spec(const ModelSpec& spec) {
    spec_layer_shapes(spec);  // throws on any incompatible adjacent pair
    if (spec_crucial_indices(spec).empty()) {
        throw ShapeError("model spec: no crucial layers (no layer changes its channel/feature count)");
    }
}

// =====================================================================
//  Model
// =====================================================================

struct Model {
    ModelSpec spec;
    struct LayerParams {
        Tensor weight;  // dense: [in,out], conv: [out,in,k,k]
        Tensor bias;    // dense: [out],    conv: [out]
        bool present = false;
    };
    std::vector<LayerParams> params;
    std::vector<std::size_t> crucial_indices;

    // Parameter tensors in declaration order (weight then bias per layer).
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (auto& p : params) {
            if (!p.present) continue;
            out.push_back(&p.weight);
            out.push_back(&p.bias);
        }
        return out;
    }

    std::vector<const Tensor*> parameters() const {
        std::vector<const Tensor*> out;
        for (const auto& p : params) {
            if (!p.present) continue;
            out.push_back(&p.weight);
            out.push_back(&p.bias);
        }
        return out;
    }
};

// He-uniform weights (limit sqrt(6/fan_in)), zero biases, drawn in layer
// declaration order from the spec seed.
inline Model build_model(const ModelSpec& spec) {
    validate_spec(spec);
    Model m;
    m.spec = spec;
    m.crucial_indices = spec_crucial_indices(spec);
    m.params.resize(spec.layers.size());
    Rng rng(spec.seed);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        auto& p = m.params[i];
        if (l.kind == LayerKind::Dense) {
            const double limit = std::sqrt(6.0 / static_cast<double>(l.in));
            p.weight = Tensor(Shape{l.in, l.out});
            for (std::size_t k = 0; k < p.weight.size(); ++k) {
                p.weight.at(k) = rng.uniform(-limit, limit);
            }
            p.bias = Tensor(Shape{l.out}, 0.0);
            p.present = true;
        } else if (l.kind == LayerKind::Conv2d) {
            const double limit = std::sqrt(6.0 / static_cast<double>(l.in * l.kernel * l.kernel));
            p.weight = Tensor(Shape{l.out, l.in, l.kernel, l.kernel});
            for (std::size_t k = 0; k < p.weight.size(); ++k) {
                p.weight.at(k) = rng.uniform(-limit, limit);
            }
            p.bias = Tensor(Shape{l.out}, 0.0);
            p.present = true;
        }
        if (p.present) {
            p.weight.set_requires_grad(true);
            p.bias.set_requires_grad(true);
        }
    }
    return m;
}

// Drop stale tape bindings on all parameters. Must run before a parameter
// handle outlives the tape it was watched on.
inline void release_parameters(Model& m) {
    for (Tensor* p : m.parameters()) p->detach_from_tape();
}

// Scope guard around a forward/backward episode on a local tape.
class ParameterRelease {
public:
    explicit ParameterRelease(Model& m) : model_(&m) {}
    ParameterRelease(const ParameterRelease&) = delete;
    ParameterRelease& operator=(const ParameterRelease&) = delete;
    ~ParameterRelease() { release_parameters(*model_); }

private:
    Model* model_;
};

struct ForwardResult {
    Tensor logits;
    std::map<std::size_t, Tensor> taps;  // layer index -> post-activation output
    // Filled only when tracing: per layer, the input it consumed and its
    // pre-activation output (for parameterless layers both equal the
    // post-activation flow).
    std::vector<Tensor> layer_inputs;
    std::vector<Tensor> layer_preacts;
};

// Forward pass over a batch, optionally recording on `tape` and capturing
// post-activation outputs at the requested crucial layers.
inline ForwardResult forward_with_taps(Model& model, Tape* tape, const Tensor& batch,
                                       const std::vector<std::size_t>& taps = {},
                                       bool trace = false) {
    const Shape& in_shape = model.spec.input_shape;
    if (batch.rank() != in_shape.size() + 1) {
        throw ShapeError("forward: batch shape " + shape_str(batch.shape()) +
                         " does not extend sample shape " + shape_str(in_shape));
    }
    for (std::size_t i = 0; i < in_shape.size(); ++i) {
        if (batch.dim(i + 1) != in_shape[i]) {
            throw ShapeError("forward: batch shape " + shape_str(batch.shape()) +
                             " does not extend sample shape " + shape_str(in_shape));
        }
    }
    for (std::size_t t : taps) {
        bool crucial = false;
        for (std::size_t c : model.crucial_indices) crucial = crucial || c == t;
        if (!crucial) {
            throw ValueError("forward: tap layer " + std::to_string(t) + " is not crucial");
        }
    }
    if (tape != nullptr) {
        for (Tensor* p : model.parameters()) tape->watch(*p);
    }

    ForwardResult res;
    Tensor x = batch;
    for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
        const LayerDesc& l = model.spec.layers[i];
        const auto& p = model.params[i];
        if (trace) res.layer_inputs.push_back(x);
        switch (l.kind) {
            case LayerKind::Dense:
                x = add(matmul(x, p.weight), p.bias);
                break;
            case LayerKind::Conv2d:
                x = add(conv2d(x, p.weight, l.stride, l.padding), reshape(p.bias, Shape{l.out, 1, 1}));
                break;
            case LayerKind::AvgPool2d:
                x = avg_pool2d(x, l.kernel, l.stride == 0 ? l.kernel : l.stride);
                break;
            case LayerKind::Flatten:
                x = flatten(x);
                break;
        }
        if (trace) res.layer_preacts.push_back(x);
        if (l.relu) x = relu(x);
        for (std::size_t t : taps) {
            if (t == i) res.taps.emplace(i, x);
        }
    }
    res.logits = x;
    return res;
}

inline Tensor forward(Model& model, const Tensor& batch) {
    return forward_with_taps(model, nullptr, batch).logits;
}

// =====================================================================
//  Crucial-layer pairing
// =====================================================================

struct LayerPairing {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (student layer, teacher layer)
    std::size_t k = 0;
};

// Order-preserving match of crucial layers by identical post-activation
// shape. When several teacher layers share a shape, the first unmatched one
// wins. Unmatched layers on either side are skipped.
inline LayerPairing pair_crucial_layers(const Model& student, const Model& teacher,
                                        const Tensor& sample) {
    if (sample.shape() != student.spec.input_shape || sample.shape() != teacher.spec.input_shape) {
        throw ShapeError("pairing: sample shape " + shape_str(sample.shape()) +
                         " not accepted by both models");
    }
    const auto s_shapes = spec_layer_shapes(student.spec);
    const auto t_shapes = spec_layer_shapes(teacher.spec);
    LayerPairing pairing;
    std::size_t t_cursor = 0;
    for (std::size_t s : student.crucial_indices) {
        for (std::size_t tj = t_cursor; tj < teacher.crucial_indices.size(); ++tj) {
            const std::size_t t = teacher.crucial_indices[tj];
            if (t_shapes[t] == s_shapes[s]) {
                pairing.pairs.emplace_back(s, t);
                t_cursor = tj + 1;
                break;
            }
        }
    }
    pairing.k = pairing.pairs.size();
    if (pairing.k == 0) {
        throw ShapeError("pairing: zero matches between student and teacher crucial layers");
    }
    return pairing;
}

// =====================================================================
//  Model spec text form and checkpoint file
// =====================================================================

inline std::string format_shape_compact(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out;
}

inline Shape parse_shape_compact(const std::string& text) {
    Shape s;
    std::string token;
    std::istringstream is(text);
    while (std::getline(is, token, 'x')) {
        if (token.empty()) throw ValueError("shape '" + text + "': empty dimension");
        s.push_back(static_cast<std::size_t>(std::stoull(token)));
    }
    if (s.empty()) throw ValueError("shape '" + text + "': no dimensions");
    return s;
}

inline std::string format_layer_line(const LayerDesc& l) { return detail::layer_desc_str(l); }

inline LayerDesc parse_layer_line(const std::string& line) {
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    LayerDesc l;
    auto read_size = [&](const char* what) {
        std::string tok;
        if (!(is >> tok)) throw ValueError("layer '" + line + "': missing " + what);
        try {
            return static_cast<std::size_t>(std::stoull(tok));
        } catch (...) {
            throw ValueError("layer '" + line + "': bad " + std::string(what) + " '" + tok + "'");
        }
    };
    auto read_tagged = [&](char tag, const char* what) {
        std::string tok;
        if (!(is >> tok) || tok.size() < 2 || tok[0] != tag) {
            throw ValueError("layer '" + line + "': expected " + std::string(what));
        }
        try {
            return static_cast<std::size_t>(std::stoull(tok.substr(1)));
        } catch (...) {
            throw ValueError("layer '" + line + "': bad " + std::string(what) + " '" + tok + "'");
        }
    };
    auto read_relu_flag = [&]() {
        std::string tok;
        if (!(is >> tok)) return false;
        if (tok == "relu") return true;
        throw ValueError("layer '" + line + "': unexpected token '" + tok + "'");
    };
    if (kind == "dense") {
        l.kind = LayerKind::Dense;
        l.in = read_size("input width");
        l.out = read_size("output width");
        l.relu = read_relu_flag();
    } else if (kind == "conv") {
        l.kind = LayerKind::Conv2d;
        l.in = read_size("input channels");
        l.out = read_size("output channels");
        l.kernel = read_tagged('k', "kernel (kN)");
        l.stride = read_tagged('s', "stride (sN)");
        l.padding = read_tagged('p', "padding (pN)");
        l.relu = read_relu_flag();
    } else if (kind == "avgpool") {
        l.kind = LayerKind::AvgPool2d;
        l.kernel = read_tagged('k', "kernel (kN)");
        l.stride = read_tagged('s', "stride (sN)");
    } else if (kind == "flatten") {
        l.kind = LayerKind::Flatten;
    } else {
        throw ValueError("layer '" + line + "': unknown layer kind '" + kind + "'");
    }
    std::string extra;
    if (is >> extra) throw ValueError("layer '" + line + "': unexpected token '" + extra + "'");
    return l;
}

inline std::string format_model_spec(const ModelSpec& spec) {
    std::ostringstream os;
    os << "input = " << format_shape_compact(spec.input_shape) << "\n";
    os << "seed = " << spec.seed << "\n";
    for (const LayerDesc& l : spec.layers) os << "layer = " << format_layer_line(l) << "\n";
    return os.str();
}

inline ModelSpec parse_model_spec_text(const std::string& text) {
    ModelSpec spec;
    bool have_input = false;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValueError("model spec line '" + line + "': expected key = value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "input") {
            spec.input_shape = parse_shape_compact(value);
            have_input = true;
        } else if (key == "seed") {
            spec.seed = std::stoull(value);
        } else if (key == "layer") {
            spec.layers.push_back(parse_layer_line(value));
        } else {
            throw ValueError("model spec: unknown key '" + key + "'");
        }
    }
    if (!have_input) throw ValueError("model spec: missing input shape");
    return spec;
}

inline constexpr char kCheckpointMagic[] = "LWDL1";

inline void save_model(const std::string& path, const Model& model) {
    std::string bytes;
    bytes.append(kCheckpointMagic, 5);
    const std::string spec_text = format_model_spec(model.spec);
    detail::put_u32(bytes, static_cast<std::uint32_t>(spec_text.size()));
    bytes += spec_text;
    for (const Tensor* p : model.parameters()) {
        for (std::size_t i = 0; i < p->size(); ++i) detail::put_f64(bytes, p->at(i));
    }
    detail::write_file_bytes(path, bytes);
}

inline Model load_model(const std::string& path) {
    detail::ByteReader r(detail::read_file_bytes(path), path);
    const std::string magic = r.take(5, "magic");
    if (magic != kCheckpointMagic) {
        throw IOError(path + ": bad checkpoint magic at byte offset 0");
    }
    const std::uint32_t spec_len = r.u32("spec length");
    const std::string spec_text = r.take(spec_len, "spec text");
    Model model = build_model(parse_model_spec_text(spec_text));
    for (Tensor* p : model.parameters()) {
        for (std::size_t i = 0; i < p->size(); ++i) p->at(i) = r.f64("parameter value");
    }
    r.expect_end("parameters");
    return model;
}

// FNV-1a over the exact parameter bytes; used to assert teacher immutability.
inline std::uint64_t parameter_checksum(const Model& model) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor* p : model.parameters()) {
        for (std::size_t i = 0; i < p->size(); ++i) {
            std::uint64_t bits;
            const double v = p->at(i);
            std::memcpy(&bits, &v, sizeof bits);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xFF;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

}  // namespace lwdl
