// Experiment driver: teacher pretraining, distillation runs, checkpoint
// evaluation, seed sweeps, and plot-ready metrics export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "lwdl/lwdl.hpp"

namespace {

using namespace lwdl;

std::string checkpoint_path(const RunConfig& cfg, const std::string& name) {
    return cfg.output.checkpoint_dir + "/" + name;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IOError(dir + ": cannot create directory (" + ec.message() + ")");
}

void ensure_parent_dir(const std::string& file) {
    const auto parent = std::filesystem::path(file).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
}

std::vector<MetricsRecord> to_metrics(const std::vector<EpochResult>& epochs, std::size_t k) {
    std::vector<MetricsRecord> records;
    records.reserve(epochs.size());
    for (const EpochResult& e : epochs) {
        MetricsRecord r;
        r.epoch = e.epoch;
        r.split = "test";
        r.loss = e.train_loss;
        r.accuracy = e.test_accuracy;
        r.jsd = e.per_layer_jsd;
        r.alpha = e.per_layer_alpha;
        r.jsd.resize(k, 0.0);
        r.alpha.resize(k, 0.0);
        records.push_back(std::move(r));
    }
    return records;
}

DistillationOptions options_from(const RunConfig& cfg) {
    DistillationOptions opt;
    opt.kind = cfg.training.method;
    opt.lambda = cfg.training.lambda;
    opt.differentiable_maps = resolve_differentiable_maps(cfg.training);
    opt.hessian_refresh = cfg.training.hessian_refresh;
    opt.epochs = cfg.training.epochs;
    opt.batch_size = cfg.training.batch_size;
    opt.seed = cfg.training.seed;
    opt.probe_batch = cfg.training.probe_batch;
    opt.divergence = cfg.divergence;
    opt.scheduler = cfg.scheduler;
    return opt;
}

// Loads the teacher checkpoint when present, otherwise trains and saves it.
Model obtain_teacher(const RunConfig& cfg, const Dataset& data, bool quiet = false) {
    const std::string path = checkpoint_path(cfg, "teacher.lwdl");
    if (std::filesystem::exists(path)) {
        Model teacher = load_model(path);
        if (!quiet) std::cout << "loaded teacher checkpoint " << path << "\n";
        return teacher;
    }
    Model teacher = train_teacher(cfg.teacher, data, cfg.training.teacher_epochs,
                                  cfg.training.teacher_lr, cfg.training.batch_size,
                                  cfg.training.seed);
    ensure_dir(cfg.output.checkpoint_dir);
    save_model(path, teacher);
    if (!quiet) {
        std::cout << "trained teacher (" << cfg.training.teacher_epochs << " epochs) -> " << path
                  << ", test accuracy "
                  << evaluate_accuracy(teacher, data, data.test_idx) << "\n";
    }
    return teacher;
}

int cmd_train_teacher(const std::string& config_path) {
    RunConfig cfg = parse_run_config_file(config_path);
    validate_run_config(cfg);
    Dataset data = build_dataset(cfg.dataset);
    std::vector<EpochResult> log;
    Model teacher = train_teacher(cfg.teacher, data, cfg.training.teacher_epochs,
                                  cfg.training.teacher_lr, cfg.training.batch_size,
                                  cfg.training.seed, &log);
    ensure_dir(cfg.output.checkpoint_dir);
    const std::string path = checkpoint_path(cfg, "teacher.lwdl");
    save_model(path, teacher);
    ensure_parent_dir(cfg.output.metrics);
    write_metrics_csv(cfg.output.metrics, to_metrics(log, 0), 0);
    const double acc = evaluate_accuracy(teacher, data, data.test_idx);
    std::cout << "teacher checkpoint: " << path << "\n";
    std::cout << "metrics: " << cfg.output.metrics << "\n";
    std::cout << "final test accuracy: " << acc << "\n";
    return 0;
}

int cmd_distill(const std::string& config_path) {
    RunConfig cfg = parse_run_config_file(config_path);
    validate_run_config(cfg);
    Dataset data = build_dataset(cfg.dataset);
    Model teacher = obtain_teacher(cfg, data);
    Model student = build_model(cfg.student);
    DistillationOutcome out = run_distillation(student, teacher, data, options_from(cfg));
    ensure_parent_dir(cfg.output.metrics);
    write_metrics_csv(cfg.output.metrics, to_metrics(out.epochs, out.pairing.k), out.pairing.k);
    ensure_dir(cfg.output.checkpoint_dir);
    std::ostringstream name;
    name << "student_" << map_kind_name(cfg.training.method) << "_"
         << scheduler_mode_name(cfg.scheduler.mode) << "_seed" << cfg.training.seed << ".lwdl";
    save_model(checkpoint_path(cfg, name.str()), student);
    std::cout << "student checkpoint: " << checkpoint_path(cfg, name.str()) << "\n";
    std::cout << "metrics: " << cfg.output.metrics << "\n";
    std::cout << "final test accuracy: " << out.epochs.back().test_accuracy << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path) {
    RunConfig cfg = parse_run_config_file(config_path);
    validate_run_config(cfg);
    Dataset data = build_dataset(cfg.dataset);
    Model model = load_model(checkpoint);
    std::cout << "test accuracy: " << evaluate_accuracy(model, data, data.test_idx) << "\n";
    std::cout << "train accuracy: " << evaluate_accuracy(model, data, data.train_idx) << "\n";
    return 0;
}

struct SweepCell {
    MapKind kind;
    SchedulerMode mode;
    std::vector<double> finals;  // one per seed

    double mean() const {
        double s = 0.0;
        for (double v : finals) s += v;
        return s / static_cast<double>(finals.size());
    }
    double stddev() const {
        const double m = mean();
        double s = 0.0;
        for (double v : finals) s += (v - m) * (v - m);
        return std::sqrt(s / static_cast<double>(finals.size()));
    }
};

int cmd_sweep(const std::string& config_path, const std::string& seeds_csv, unsigned jobs) {
    RunConfig cfg = parse_run_config_file(config_path);
    validate_run_config(cfg);
    std::vector<std::uint64_t> seeds;
    {
        std::istringstream is(seeds_csv);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            if (tok.empty()) continue;
            seeds.push_back(std::stoull(tok));
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds: expected a comma-separated list of seeds");

    Dataset data = build_dataset(cfg.dataset);
    Model teacher = obtain_teacher(cfg, data);
    const double teacher_acc = evaluate_accuracy(teacher, data, data.test_idx);

    const std::vector<MapKind> kinds{MapKind::Attention, MapKind::Jacobian, MapKind::Hessian};
    const std::vector<SchedulerMode> modes{SchedulerMode::None, SchedulerMode::MultiStep,
                                           SchedulerMode::Layerwise};
    struct Job {
        MapKind kind;
        SchedulerMode mode;
        std::uint64_t seed;
        std::size_t cell;
        std::size_t slot;
    };
    std::vector<SweepCell> cells;
    std::vector<Job> todo;
    for (MapKind kind : kinds) {
        for (SchedulerMode mode : modes) {
            cells.push_back(SweepCell{kind, mode, std::vector<double>(seeds.size(), 0.0)});
            for (std::size_t si = 0; si < seeds.size(); ++si) {
                todo.push_back(Job{kind, mode, seeds[si], cells.size() - 1, si});
            }
        }
    }

    std::mutex io_mutex;
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t at = next.fetch_add(1);
            if (at >= todo.size()) return;
            const Job& job = todo[at];
            RunConfig rc = cfg;
            rc.training.method = job.kind;
            rc.scheduler.mode = job.mode;
            rc.training.seed = job.seed;
            rc.student.seed = derive_seed(cfg.student.seed, job.seed);
            Model teacher_copy = teacher;  // parameters are read-only during runs
            Model student = build_model(rc.student);
            DistillationOutcome out = run_distillation(student, teacher_copy, data,
                                                       options_from(rc));
            std::ostringstream stem;
            stem << map_kind_name(job.kind) << "_" << scheduler_mode_name(job.mode) << "_seed"
                 << job.seed;
            const std::string metrics_path =
                cfg.output.metrics.substr(0, cfg.output.metrics.find_last_of('.')) + "_" +
                stem.str() + ".csv";
            {
                std::lock_guard<std::mutex> lock(io_mutex);
                ensure_parent_dir(metrics_path);
                write_metrics_csv(metrics_path, to_metrics(out.epochs, out.pairing.k),
                                  out.pairing.k);
                std::cout << stem.str() << ": final accuracy "
                          << out.epochs.back().test_accuracy << "\n";
            }
            cells[job.cell].finals[job.slot] = out.epochs.back().test_accuracy;
        }
    };
    const unsigned n_workers = std::max(1u, jobs);
    std::vector<std::thread> pool;
    for (unsigned i = 1; i < n_workers; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::ostringstream table;
    table << "method,scheduler,mean_final_accuracy,std_final_accuracy,seeds\n";
    for (const SweepCell& c : cells) {
        table << map_kind_name(c.kind) << "," << scheduler_mode_name(c.mode) << ","
              << detail::format_double(c.mean()) << "," << detail::format_double(c.stddev()) << ","
              << seeds.size() << "\n";
    }
    const std::string summary_path =
        cfg.output.metrics.substr(0, cfg.output.metrics.find_last_of('.')) + "_summary.csv";
    ensure_parent_dir(summary_path);
    detail::write_file_bytes(summary_path, table.str());
    std::cout << "\nteacher test accuracy: " << teacher_acc << "\n";
    std::cout << "summary (" << summary_path << "):\n" << table.str();
    return 0;
}

int cmd_plot_data(const std::string& metrics_path) {
    const auto records = read_metrics_csv(metrics_path);
    std::cout << "epoch,series,value\n";
    for (const MetricsRecord& r : records) {
        std::cout << r.epoch << ",loss," << detail::format_double(r.loss) << "\n";
        std::cout << r.epoch << ",accuracy," << detail::format_double(r.accuracy) << "\n";
        for (std::size_t i = 0; i < r.jsd.size(); ++i) {
            std::cout << r.epoch << ",jsd_" << i << "," << detail::format_double(r.jsd[i]) << "\n";
        }
        for (std::size_t i = 0; i < r.alpha.size(); ++i) {
            std::cout << r.epoch << ",alpha_" << i << "," << detail::format_double(r.alpha[i])
                      << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layer-wise distillation lab"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, metrics_path, seeds = "1,2,3,4,5";
    unsigned jobs = 1;

    auto* train = app.add_subcommand("train-teacher", "train the teacher model from a config");
    train->add_option("config", config_path, "run configuration file")->required();

    auto* distill = app.add_subcommand("distill", "run a distillation experiment from a config");
    distill->add_option("config", config_path, "run configuration file")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's dataset");
    eval->add_option("checkpoint", checkpoint, "model checkpoint file")->required();
    eval->add_option("config", config_path, "run configuration file")->required();

    auto* sweep = app.add_subcommand("sweep", "seed battery over method x scheduler grid");
    sweep->add_option("config", config_path, "run configuration file")->required();
    sweep->add_option("--seeds", seeds, "comma-separated training seeds");
    sweep->add_option("--jobs", jobs, "parallel workers (each run fully isolated)");

    auto* plot = app.add_subcommand("plot-data", "emit tidy long-format CSV for plotting");
    plot->add_option("metrics", metrics_path, "metrics CSV produced by a run")->required();

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train_teacher(config_path);
        if (distill->parsed()) return cmd_distill(config_path);
        if (eval->parsed()) return cmd_eval(checkpoint, config_path);
        if (sweep->parsed()) return cmd_sweep(config_path, seeds, jobs);
        if (plot->parsed()) return cmd_plot_data(metrics_path);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const lwdl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
