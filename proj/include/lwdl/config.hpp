#pragma once

// Run configuration: a flat, typed key = value text format with section
// headers. Unknown sections or keys are errors so hyperparameter typos fail
// loudly. The same text form round-trips through serialize_run_config.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwdl/dataset.hpp"
#include "lwdl/divergence.hpp"
#include "lwdl/maps.hpp"
#include "lwdl/network.hpp"
#include "lwdl/scheduler.hpp"

namespace lwdl {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::string kind = "spirals";  // spirals | blobs | file
    std::uint64_t seed = 0;
    std::size_t n_per_class = 100;
    std::size_t num_classes = 2;
    double noise_sigma = 0.0;     // spirals
    std::size_t dim = 2;          // blobs
    double separation = 4.0;      // blobs
    std::string path;             // file
    Shape image_shape;            // optional [C,H,W] view of generated features
};

enum class DifferentiableMapsMode { Auto, On, Off };

struct TrainingSection {
    MapKind method = MapKind::Attention;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    DifferentiableMapsMode differentiable_maps = DifferentiableMapsMode::Auto;
    std::size_t hessian_refresh = 5;
    std::size_t probe_batch = 64;
    std::size_t teacher_epochs = 100;
    double teacher_lr = 0.05;
};

struct OutputSection {
    std::string metrics = "out/metrics.csv";
    std::string checkpoint_dir = "out";
};

struct RunConfig {
    DatasetConfig dataset;
    ModelSpec teacher;
    ModelSpec student;
    DivergenceConfig divergence;
    SchedulerConfig scheduler;
    TrainingSection training;
    OutputSection output;
};

// Auto resolves to differentiable for every flavor; the hessian flavor
// falls back to detached refresh-cached maps when a crucial student layer
// is not dense (the closed-form route covers dense layers only).
inline bool resolve_differentiable_maps(const TrainingSection& t) {
    switch (t.differentiable_maps) {
        case DifferentiableMapsMode::Auto: return true;
        case DifferentiableMapsMode::On: return true;
        case DifferentiableMapsMode::Off: return false;
    }
    return false;
}

// =====================================================================
//  Parsing
// =====================================================================

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

struct ConfigField {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;

    std::string where() const { return "[" + section + "] " + key + " (line " + std::to_string(line) + ")"; }

    double as_double() const {
        try {
            std::size_t used = 0;
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (...) {
            throw ConfigError(where() + ": expected a number, got '" + value + "'");
        }
    }

    std::size_t as_size() const {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(value, &used);
            if (used != value.size()) throw std::invalid_argument("trailing");
            return static_cast<std::size_t>(v);
        } catch (...) {
            throw ConfigError(where() + ": expected a non-negative integer, got '" + value + "'");
        }
    }

    std::uint64_t as_u64() const { return static_cast<std::uint64_t>(as_size()); }
};

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    std::vector<detail::ConfigField> fields;
    {
        std::istringstream is(text);
        std::string raw;
        std::string section;
        int line_no = 0;
        while (std::getline(is, raw)) {
            ++line_no;
            const auto hash = raw.find('#');
            std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') {
                    throw ConfigError("line " + std::to_string(line_no) + ": malformed section header '" +
                                      line + "'");
                }
                section = detail::trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" +
                                  line + "'");
            }
            if (section.empty()) {
                throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
            }
            fields.push_back({section, detail::trim(line.substr(0, eq)),
                              detail::trim(line.substr(eq + 1)), line_no});
        }
    }

    RunConfig cfg;
    bool teacher_seen = false, student_seen = false;
    for (const auto& f : fields) {
        if (f.section == "dataset") {
            if (f.key == "kind") cfg.dataset.kind = f.value;
            else if (f.key == "seed") cfg.dataset.seed = f.as_u64();
            else if (f.key == "n_per_class") cfg.dataset.n_per_class = f.as_size();
            else if (f.key == "num_classes") cfg.dataset.num_classes = f.as_size();
            else if (f.key == "noise_sigma") cfg.dataset.noise_sigma = f.as_double();
            else if (f.key == "dim") cfg.dataset.dim = f.as_size();
            else if (f.key == "separation") cfg.dataset.separation = f.as_double();
            else if (f.key == "path") cfg.dataset.path = f.value;
            else if (f.key == "image_shape") cfg.dataset.image_shape = parse_shape_compact(f.value);
            else throw ConfigError(f.where() + ": unknown key");
        } else if (f.section == "teacher" || f.section == "student") {
            ModelSpec& spec = f.section == "teacher" ? cfg.teacher : cfg.student;
            (f.section == "teacher" ? teacher_seen : student_seen) = true;
            if (f.key == "input") spec.input_shape = parse_shape_compact(f.value);
            else if (f.key == "seed") spec.seed = f.as_u64();
            else if (f.key == "layer") {
                try {
                    spec.layers.push_back(parse_layer_line(f.value));
                } catch (const std::exception& e) {
                    throw ConfigError(f.where() + ": " + e.what());
                }
            } else {
                throw ConfigError(f.where() + ": unknown key");
            }
        } else if (f.section == "divergence") {
            if (f.key == "beta1") cfg.divergence.beta1 = f.as_double();
            else if (f.key == "beta2") cfg.divergence.beta2 = f.as_double();
            else if (f.key == "floor") cfg.divergence.floor = f.as_double();
            else throw ConfigError(f.where() + ": unknown key");
        } else if (f.section == "scheduler") {
            if (f.key == "mode") {
                if (f.value == "none") cfg.scheduler.mode = SchedulerMode::None;
                else if (f.value == "multistep") cfg.scheduler.mode = SchedulerMode::MultiStep;
                else if (f.value == "layerwise") cfg.scheduler.mode = SchedulerMode::Layerwise;
                else throw ConfigError(f.where() + ": expected none|multistep|layerwise");
            } else if (f.key == "base_lr") cfg.scheduler.base_lr = f.as_double();
            else if (f.key == "gamma") cfg.scheduler.gamma = f.as_double();
            else if (f.key == "epsilon") cfg.scheduler.epsilon = f.as_double();
            else if (f.key == "update_interval") cfg.scheduler.update_interval = f.as_size();
            else if (f.key == "milestones") {
                cfg.scheduler.milestones.clear();
                std::istringstream ms(f.value);
                std::string tok;
                while (ms >> tok) {
                    try {
                        cfg.scheduler.milestones.push_back(std::stoull(tok));
                    } catch (...) {
                        throw ConfigError(f.where() + ": bad milestone '" + tok + "'");
                    }
                }
            } else if (f.key == "multistep_factor") cfg.scheduler.multistep_factor = f.as_double();
            else if (f.key == "alpha_min") cfg.scheduler.alpha_min = f.as_double();
            else if (f.key == "alpha_max") cfg.scheduler.alpha_max = f.as_double();
            else if (f.key == "initial_eta") cfg.scheduler.initial_eta = f.as_double();
            else throw ConfigError(f.where() + ": unknown key");
        } else if (f.section == "training") {
            if (f.key == "method") {
                if (f.value == "attention") cfg.training.method = MapKind::Attention;
                else if (f.value == "jacobian") cfg.training.method = MapKind::Jacobian;
                else if (f.value == "hessian") cfg.training.method = MapKind::Hessian;
                else throw ConfigError(f.where() + ": expected attention|jacobian|hessian");
            } else if (f.key == "epochs") cfg.training.epochs = f.as_size();
            else if (f.key == "batch_size") cfg.training.batch_size = f.as_size();
            else if (f.key == "lambda") cfg.training.lambda = f.as_double();
            else if (f.key == "seed") cfg.training.seed = f.as_u64();
            else if (f.key == "differentiable_maps") {
                if (f.value == "auto") cfg.training.differentiable_maps = DifferentiableMapsMode::Auto;
                else if (f.value == "true") cfg.training.differentiable_maps = DifferentiableMapsMode::On;
                else if (f.value == "false") cfg.training.differentiable_maps = DifferentiableMapsMode::Off;
                else throw ConfigError(f.where() + ": expected auto|true|false");
            } else if (f.key == "hessian_refresh") cfg.training.hessian_refresh = f.as_size();
            else if (f.key == "probe_batch") cfg.training.probe_batch = f.as_size();
            else if (f.key == "teacher_epochs") cfg.training.teacher_epochs = f.as_size();
            else if (f.key == "teacher_lr") cfg.training.teacher_lr = f.as_double();
            else throw ConfigError(f.where() + ": unknown key");
        } else if (f.section == "output") {
            if (f.key == "metrics") cfg.output.metrics = f.value;
            else if (f.key == "checkpoint_dir") cfg.output.checkpoint_dir = f.value;
            else throw ConfigError(f.where() + ": unknown key");
        } else {
            throw ConfigError("[" + f.section + "] (line " + std::to_string(f.line) +
                              "): unknown section");
        }
    }
    if (!teacher_seen) throw ConfigError("[teacher]: section missing");
    if (!student_seen) throw ConfigError("[student]: section missing");
    return cfg;
}

inline RunConfig parse_run_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::ostringstream os;
    os << in.rdbuf();
    try {
        return parse_run_config(os.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// =====================================================================
//  Validation
// =====================================================================

inline void validate_run_config(const RunConfig& cfg) {
    const auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError(field + ": " + why);
    };

    if (cfg.dataset.kind != "spirals" && cfg.dataset.kind != "blobs" && cfg.dataset.kind != "file") {
        fail("[dataset] kind", "expected spirals|blobs|file, got '" + cfg.dataset.kind + "'");
    }
    if (cfg.dataset.kind != "file") {
        if (cfg.dataset.n_per_class < 2) fail("[dataset] n_per_class", "must be at least 2");
        if (cfg.dataset.num_classes < 2) fail("[dataset] num_classes", "must be at least 2");
    } else if (cfg.dataset.path.empty()) {
        fail("[dataset] path", "required when kind = file");
    }
    if (cfg.dataset.kind == "spirals" && cfg.dataset.noise_sigma < 0.0) {
        fail("[dataset] noise_sigma", "must be non-negative");
    }
    if (cfg.dataset.kind == "blobs") {
        if (cfg.dataset.dim == 0) fail("[dataset] dim", "must be positive");
        if (!(cfg.dataset.separation > 0.0)) fail("[dataset] separation", "must be positive");
    }
    if (!cfg.dataset.image_shape.empty() && cfg.dataset.image_shape.size() != 3) {
        fail("[dataset] image_shape", "expected CxHxW");
    }

    try {
        validate_spec(cfg.teacher);
    } catch (const std::exception& e) {
        fail("[teacher]", e.what());
    }
    try {
        validate_spec(cfg.student);
    } catch (const std::exception& e) {
        fail("[student]", e.what());
    }
    if (cfg.teacher.layers.size() < cfg.student.layers.size()) {
        fail("[teacher] layer", "teacher must be at least as deep as the student");
    }

    try {
        cfg.divergence.validate();
    } catch (const std::exception& e) {
        fail("[divergence]", e.what());
    }
    try {
        cfg.scheduler.validate();
    } catch (const std::exception& e) {
        fail("[scheduler]", e.what());
    }

    if (cfg.training.epochs == 0) fail("[training] epochs", "must be positive");
    if (cfg.training.batch_size == 0) fail("[training] batch_size", "must be positive");
    if (cfg.training.lambda < 0.0) fail("[training] lambda", "must be non-negative");
    if (cfg.training.hessian_refresh == 0) fail("[training] hessian_refresh", "must be positive");
    if (cfg.training.probe_batch == 0) fail("[training] probe_batch", "must be positive");
    if (!(cfg.training.teacher_lr > 0.0)) fail("[training] teacher_lr", "must be positive");
    if (cfg.output.metrics.empty()) fail("[output] metrics", "must not be empty");
    if (cfg.output.checkpoint_dir.empty()) fail("[output] checkpoint_dir", "must not be empty");

    // The two specs must agree with the dataset's sample geometry; checked
    // against generated metadata where it is known without building data.
    const Shape expected_input = !cfg.dataset.image_shape.empty()
                                     ? cfg.dataset.image_shape
                                     : (cfg.dataset.kind == "spirals" ? Shape{2}
                                        : cfg.dataset.kind == "blobs" ? Shape{cfg.dataset.dim}
                                                                      : Shape{});
    if (!expected_input.empty()) {
        if (cfg.teacher.input_shape != expected_input) {
            fail("[teacher] input", "input shape " + shape_str(cfg.teacher.input_shape) +
                                        " does not match dataset sample shape " +
                                        shape_str(expected_input));
        }
        if (cfg.student.input_shape != expected_input) {
            fail("[student] input", "input shape " + shape_str(cfg.student.input_shape) +
                                        " does not match dataset sample shape " +
                                        shape_str(expected_input));
        }
    }
    if (cfg.dataset.kind != "file") {
        const auto check_head = [&](const ModelSpec& spec, const char* which) {
            const auto shapes = spec_layer_shapes(spec);
            const Shape& out = shapes.back();
            if (out.size() != 1 || out[0] != cfg.dataset.num_classes) {
                fail(std::string("[") + which + "] layer",
                     "final output shape " + shape_str(out) + " does not produce " +
                         std::to_string(cfg.dataset.num_classes) + " class logits");
            }
        };
        check_head(cfg.teacher, "teacher");
        check_head(cfg.student, "student");
    }
}

// Builds the dataset described by the config.
inline Dataset build_dataset(const DatasetConfig& d) {
    Dataset ds;
    if (d.kind == "spirals") {
        ds = generate_spirals(d.n_per_class, d.num_classes, d.noise_sigma, d.seed);
    } else if (d.kind == "blobs") {
        ds = generate_blobs(d.n_per_class, d.num_classes, d.dim, d.separation, d.seed);
    } else if (d.kind == "file") {
        ds = load_image_dataset(d.path, d.seed);
    } else {
        throw ConfigError("[dataset] kind: unknown kind '" + d.kind + "'");
    }
    if (!d.image_shape.empty()) ds = as_image_dataset(std::move(ds), d.image_shape);
    return ds;
}

// =====================================================================
//  Serialization
// =====================================================================

inline std::string serialize_run_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "[dataset]\n";
    os << "kind = " << cfg.dataset.kind << "\n";
    os << "seed = " << cfg.dataset.seed << "\n";
    if (cfg.dataset.kind == "file") {
        os << "path = " << cfg.dataset.path << "\n";
    } else {
        os << "n_per_class = " << cfg.dataset.n_per_class << "\n";
        os << "num_classes = " << cfg.dataset.num_classes << "\n";
        if (cfg.dataset.kind == "spirals") {
            os << "noise_sigma = " << detail::format_double(cfg.dataset.noise_sigma) << "\n";
        } else {
            os << "dim = " << cfg.dataset.dim << "\n";
            os << "separation = " << detail::format_double(cfg.dataset.separation) << "\n";
        }
    }
    if (!cfg.dataset.image_shape.empty()) {
        os << "image_shape = " << format_shape_compact(cfg.dataset.image_shape) << "\n";
    }
    os << "\n[teacher]\n" << format_model_spec(cfg.teacher);
    os << "\n[student]\n" << format_model_spec(cfg.student);
    os << "\n[divergence]\n";
    os << "beta1 = " << detail::format_double(cfg.divergence.beta1) << "\n";
    os << "beta2 = " << detail::format_double(cfg.divergence.beta2) << "\n";
    os << "floor = " << detail::format_double(cfg.divergence.floor) << "\n";
    os << "\n[scheduler]\n";
    os << "mode = " << scheduler_mode_name(cfg.scheduler.mode) << "\n";
    os << "base_lr = " << detail::format_double(cfg.scheduler.base_lr) << "\n";
    os << "gamma = " << detail::format_double(cfg.scheduler.gamma) << "\n";
    os << "epsilon = " << detail::format_double(cfg.scheduler.epsilon) << "\n";
    os << "update_interval = " << cfg.scheduler.update_interval << "\n";
    os << "milestones =";
    for (std::size_t m : cfg.scheduler.milestones) os << " " << m;
    os << "\n";
    os << "multistep_factor = " << detail::format_double(cfg.scheduler.multistep_factor) << "\n";
    os << "alpha_min = " << detail::format_double(cfg.scheduler.alpha_min) << "\n";
    os << "alpha_max = " << detail::format_double(cfg.scheduler.alpha_max) << "\n";
    os << "initial_eta = " << detail::format_double(cfg.scheduler.initial_eta) << "\n";
    os << "\n[training]\n";
    os << "method = " << map_kind_name(cfg.training.method) << "\n";
    os << "epochs = " << cfg.training.epochs << "\n";
    os << "batch_size = " << cfg.training.batch_size << "\n";
    os << "lambda = " << detail::format_double(cfg.training.lambda) << "\n";
    os << "seed = " << cfg.training.seed << "\n";
    os << "differentiable_maps = "
       << (cfg.training.differentiable_maps == DifferentiableMapsMode::Auto
               ? "auto"
               : cfg.training.differentiable_maps == DifferentiableMapsMode::On ? "true" : "false")
       << "\n";
    os << "hessian_refresh = " << cfg.training.hessian_refresh << "\n";
    os << "probe_batch = " << cfg.training.probe_batch << "\n";
    os << "teacher_epochs = " << cfg.training.teacher_epochs << "\n";
    os << "teacher_lr = " << detail::format_double(cfg.training.teacher_lr) << "\n";
    os << "\n[output]\n";
    os << "metrics = " << cfg.output.metrics << "\n";
    os << "checkpoint_dir = " << cfg.output.checkpoint_dir << "\n";
    return os.str();
}

}  // namespace lwdl
