#pragma once

// Command-line front end. `run_cli` parses argv, runs one subcommand and
// returns the process exit code: 0 on success, 1 on a runtime failure
// (reported as `error[Category]: message`), 2 on a usage error.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "urbanst/urbanst.hpp"

namespace urbanst::cli {

inline constexpr const char* kToolName = "urbanst";
inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kManifestFile = "manifest.txt";

namespace fs = std::filesystem;

struct Manifest {
    std::string command;
    std::string config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

// Everything except `started_utc` and `elapsed_s` is a pure function of the
// invocation.
inline void write_manifest(const Manifest& m, const fs::path& dir, std::chrono::steady_clock::time_point t0) {
    KeyValueText t;
    t.add("tool", std::string(kToolName));
    t.add("version", std::string(kToolVersion));
    t.add("command", m.command);
    t.add("config", m.config.empty() ? std::string("-") : m.config);
    t.add("seed", m.seed);
    for (const auto& in : m.inputs) {
        t.add("input", in);
    }
    for (const auto& out : m.outputs) {
        t.add("output", out);
    }
    const std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    std::ostringstream stamp;
    stamp << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
    t.add("started_utc", stamp.str());
    t.add("elapsed_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    t.write_file(dir / kManifestFile);
}

inline std::vector<LatLon> read_coords_csv(const fs::path& file, const std::vector<std::string>& nodes) {
    std::ifstream in(file);
    if (!in) {
        throw IoError("cannot open " + file.string());
    }
    std::map<std::string, LatLon> table;
    std::string line;
    std::getline(in, line); // header: node,lat,lon
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (KeyValueText::trim(line).empty()) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 3) {
            throw FormatError(file.string() + ":" + std::to_string(row) + ": expected node,lat,lon");
        }
        table[cells[0]] = {KeyValueText::convert<double>(cells[1], "lat"), KeyValueText::convert<double>(cells[2], "lon")};
    }
    std::vector<LatLon> out;
    for (const auto& n : nodes) {
        const auto it = table.find(n);
        if (it == table.end()) {
            throw CoordError("no coordinates for node `" + n + "` in " + file.string());
        }
        check_coordinate(it->second);
        out.push_back(it->second);
    }
    return out;
}

inline std::pair<int, int> parse_grid_dims(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) {
        throw ConfigError("grid dimensions must look like WxH, got `" + s + "`");
    }
    const int w = KeyValueText::convert<int>(s.substr(0, x), "grid width");
    const int h = KeyValueText::convert<int>(s.substr(x + 1), "grid height");
    if (w <= 0 || h <= 0) {
        throw ConfigError("grid dimensions must be positive");
    }
    return {w, h};
}

inline KeyValueText read_config(const std::string& path) {
    return path.empty() ? KeyValueText{} : KeyValueText::read_file(path);
}

inline ClusterPlan plan_for(const Dataset& data, const ModelConfig& mc, const KeyValueText& cfg) {
    const auto mode = parse_fill_mode(cfg.get_or<std::string>("fill_mode", "binary_mask"));
    return build_clusters(data.x, mc.patch_slots, mode);
}

struct Options {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string command_line;
};

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct IngestArgs {
    std::vector<std::string> csv;
    std::string out;
    std::string name = "dataset";
    std::string coords;
    std::string grid;
    int target_dt = 0;
    std::string agg = "mean";
    double eps = 1e-8;
    std::size_t max_gap = 6;
};

inline void cmd_ingest(const IngestArgs& a, const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<CsvChannel> channels;
    for (const auto& f : a.csv) {
        channels.push_back(read_csv_channel(f));
    }
    Dataset data = dataset_from_csv(channels, a.name);
    if (!a.grid.empty()) {
        const auto [w, h] = parse_grid_dims(a.grid);
        if (static_cast<std::size_t>(w) * static_cast<std::size_t>(h) != data.x.nodes) {
            throw FormatError("grid " + a.grid + " does not hold " + std::to_string(data.x.nodes) + " nodes");
        }
        data.x.format = SpatialFormat::grid;
        data.x.grid_width = w;
        data.x.grid_height = h;
        data.x.sensor_coords.clear();
    } else if (!a.coords.empty()) {
        data.x.sensor_coords = read_coords_csv(a.coords, channels.front().node_names);
    } else {
        throw ConfigError("ingest needs --coords for sensor data or --grid for grid data");
    }
    if (a.target_dt > 0 && a.target_dt != data.x.dt_minutes) {
        data = resample(data, a.target_dt, parse_aggregation(a.agg));
    }
    KeyValueText report;
    report.add("nodes_in", data.x.nodes);
    if (data.x.format == SpatialFormat::sensor) {
        auto removal = remove_static_nodes(data, a.eps);
        for (std::size_t n = 0, k = 0; n < data.x.nodes; ++n) {
            if (k < removal.kept.size() && removal.kept[k] == n) {
                ++k;
            } else {
                report.add("removed_static_node", channels.front().node_names[n]);
            }
        }
        data = std::move(removal.data);
    } else {
        for (auto cell : mask_static_cells(data, a.eps)) {
            report.add("masked_static_cell", cell);
        }
    }
    data = clip_outliers(data);
    auto pre = precomplete(data, a.max_gap);
    for (const auto& [n, c] : pre.unobserved_slices) {
        report.add("unobserved_slice", std::to_string(n) + " " + std::to_string(c));
    }
    report.add("nodes_out", pre.data.x.nodes);
    report.add("steps_out", pre.data.x.steps);
    report.add("dt_minutes", pre.data.x.dt_minutes);
    save_dataset(pre.data, a.out);
    report.write_file(fs::path(a.out) / "ingest_report.txt");
    log << "ingested " << pre.data.x.nodes << " nodes x " << pre.data.x.steps << " steps into " << a.out << '\n';
    write_manifest({o.command_line, "", o.seed, a.csv, {a.out}}, a.out, t0);
}

inline void cmd_graph(const std::string& data_dir, const std::string& kind, double r, const std::string& out,
                      const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = load_dataset(data_dir);
    const auto adj = build_graph(data.x, parse_graph_kind(kind), r);
    save_adjacency(adj, out, r);
    std::size_t edges = 0;
    for (double w : adj.weights) {
        edges += w > 0.0 ? 1 : 0;
    }
    log << "graph " << kind << " over " << adj.nodes << " nodes, " << edges << " directed edges\n";
    write_manifest({o.command_line, "", o.seed, {data_dir}, {out}}, out, t0);
}

inline void cmd_cluster(const std::string& data_dir, std::size_t sp, const std::string& mode, const std::string& out,
                        const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = load_dataset(data_dir);
    const auto plan = build_clusters(data.x, sp, parse_fill_mode(mode));
    fs::create_directories(out);
    save_plan(plan, fs::path(out) / "plan.csv");
    log << plan.clusters.size() << " clusters of " << sp << " slots\n";
    write_manifest({o.command_line, "", o.seed, {data_dir}, {out}}, out, t0);
}

inline void cmd_pretrain(const std::vector<std::string>& data_dirs, const std::string& config, const std::string& out,
                         const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = read_config(config);
    const auto mc = ModelConfig::from_text(cfg);
    auto tc = TrainConfig::from_text(cfg);
    tc.seed = o.seed;
    std::vector<Dataset> datasets;
    std::vector<ClusterPlan> plans;
    for (const auto& d : data_dirs) {
        datasets.push_back(load_dataset(d));
        plans.push_back(plan_for(datasets.back(), mc, cfg));
    }
    std::vector<TrainSource> sources;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        sources.push_back(make_source(datasets[i], plans[i]));
    }
    const auto init = ModelState<float>::create(mc, o.seed);
    const auto result = train_corpus(init, sources, tc);
    fs::create_directories(out);
    save_checkpoint(result.model, fs::path(out) / "checkpoint");
    write_loss_csv(result.history, fs::path(out) / "loss.csv");
    for (const auto& r : result.history) {
        log << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << '\n';
    }
    log << "best epoch " << result.best_epoch << " val " << result.best_val_loss << '\n';
    write_manifest({o.command_line, config, o.seed, data_dirs, {out}}, out, t0);
}

inline void cmd_finetune(const std::string& checkpoint, const std::string& data_dir, double fraction,
                         const std::string& config, const std::string& out, const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = read_config(config);
    auto tc = TrainConfig::from_text(cfg);
    tc.seed = o.seed;
    const auto model = load_checkpoint<float>(checkpoint);
    const auto data = load_dataset(data_dir);
    const auto plan = plan_for(data, model.config, cfg);
    const auto result = finetune_fewshot(model, data, plan, fraction, tc);
    fs::create_directories(out);
    save_checkpoint(result.model, fs::path(out) / "checkpoint");
    write_loss_csv(result.history, fs::path(out) / "loss.csv");
    log << "fine-tuned on " << fraction << " of the train split; best val " << result.best_val_loss << '\n';
    write_manifest({o.command_line, config, o.seed, {checkpoint, data_dir}, {out}}, out, t0);
}

struct EvaluateArgs {
    std::string data;
    std::string checkpoint;
    std::string baseline;
    std::string adjacency;
    std::string protocol = "forecast_short";
    std::string shot = "zero";
    std::string config;
    double fraction = kFewShotFraction;
    std::string out;
};

inline void cmd_evaluate(const EvaluateArgs& a, const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = load_dataset(a.data);
    auto spec = ProtocolSpec::make(parse_task(a.protocol), parse_shot(a.shot));
    spec.few_shot_fraction = a.fraction;
    const auto cfg = read_config(a.config);
    std::unique_ptr<Subject> subject;
    std::vector<std::string> inputs{a.data};
    if (!a.checkpoint.empty() == !a.baseline.empty()) {
        throw ConfigError("evaluate needs exactly one of --checkpoint or --baseline");
    }
    if (!a.checkpoint.empty()) {
        auto model = load_checkpoint<float>(a.checkpoint);
        auto plan = plan_for(data, model.config, cfg);
        auto tc = TrainConfig::from_text(cfg);
        tc.seed = o.seed;
        subject = std::make_unique<ModelSubject<float>>(std::move(model), std::move(plan), tc);
        inputs.push_back(a.checkpoint);
    } else if (a.baseline == "ha") {
        subject = std::make_unique<HistoricalAverageSubject>();
    } else if (a.baseline == "mean") {
        subject = std::make_unique<MeanImputeSubject>();
    } else if (a.baseline == "knn") {
        AdjacencyMatrix adj;
        if (!a.adjacency.empty()) {
            adj = load_adjacency(a.adjacency);
            inputs.push_back(a.adjacency);
        } else {
            adj = build_graph(data.x, data.x.format == SpatialFormat::grid ? GraphKind::moore : GraphKind::gaussian);
        }
        subject = std::make_unique<KnnImputeSubject>(std::move(adj));
    } else if (a.baseline == "oracle") {
        subject = std::make_unique<OracleSubject>(data.x);
    } else {
        throw ConfigError("unknown baseline `" + a.baseline + "` (expected ha, mean, knn or oracle)");
    }
    const auto report = run_protocol(*subject, data, spec, o.seed);
    fs::create_directories(a.out);
    write_metrics_csv({report}, fs::path(a.out) / "metrics.csv");
    {
        std::ofstream table(fs::path(a.out) / "metrics.txt");
        table << metrics_table({report});
    }
    log << metrics_table({report});
    write_manifest({o.command_line, a.config, o.seed, inputs, {a.out}}, a.out, t0);
}

struct SynthArgs {
    std::size_t nodes = 32;
    std::size_t steps = 4000;
    std::size_t channels = 1;
    std::string kind = "sinusoid";
    bool shifted = false;
    int dt = 60;
    double noise = 0.1;
    std::string name = "synthetic";
    std::string out;
};

inline void cmd_synth(const SynthArgs& a, const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    SynthSpec spec;
    spec.kind = parse_synth_kind(a.kind);
    spec.nodes = a.nodes;
    spec.steps = a.steps;
    spec.channels = a.channels;
    spec.dt_minutes = a.dt;
    spec.noise_std = a.noise;
    spec.name = a.name;
    spec.seed = o.seed;
    if (a.shifted) {
        spec = shifted(spec);
        spec.noise_std = std::max(spec.noise_std, a.noise);
    }
    const auto data = make_synthetic(spec);
    save_dataset(data, a.out);
    log << "wrote " << a.kind << " dataset " << spec.name << " (" << a.nodes << " x " << a.steps << " x "
        << a.channels << ") to " << a.out << '\n';
    write_manifest({o.command_line, "", o.seed, {}, {a.out}}, a.out, t0);
}

inline int cmd_gradcheck(double tol, const std::string& out, const Options& o, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto reports = run_gradcheck_suite(o.seed, tol);
    bool ok = true;
    std::ostringstream csv;
    csv << "case,passed,max_rel_error,checked\n" << std::setprecision(6);
    for (const auto& r : reports) {
        ok = ok && r.passed;
        log << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(18) << r.name << " max_rel_error "
            << r.max_rel_error << " over " << r.checked << " entries\n";
        csv << r.name << ',' << (r.passed ? 1 : 0) << ',' << r.max_rel_error << ',' << r.checked << '\n';
    }
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(fs::path(out) / "gradcheck.csv") << csv.str();
        write_manifest({o.command_line, "", o.seed, {}, {out}}, out, t0);
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Spatio-temporal foundation-model toolkit: data curation, tokenization, training, evaluation",
                 kToolName};
    app.require_subcommand(1);
    Options opt;
    app.add_option("--seed", opt.seed, "Seed for every random choice")->default_val(0);
    app.add_option("--threads", opt.threads, "Worker thread cap")->default_val(1)->check(CLI::PositiveNumber);
    app.set_version_flag("--version", kToolVersion);

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "CSV tables -> curated dataset directory");
    c_ingest->add_option("--csv", ingest.csv, "One CSV per channel (timestamp column + node columns)")->required();
    c_ingest->add_option("--out", ingest.out, "Output dataset directory")->required();
    c_ingest->add_option("--name", ingest.name, "Dataset name");
    c_ingest->add_option("--coords", ingest.coords, "Sensor coordinates CSV: node,lat,lon");
    c_ingest->add_option("--grid", ingest.grid, "Grid dimensions WxH (nodes row-major)");
    c_ingest->add_option("--target-dt", ingest.target_dt, "Resample to this interval in minutes");
    c_ingest->add_option("--agg", ingest.agg, "Downsampling aggregation: mean or sum");
    c_ingest->add_option("--eps", ingest.eps, "Static-node variance threshold");
    c_ingest->add_option("--max-gap", ingest.max_gap, "Longest gap filled by pre-completion");

    std::string g_data, g_kind = "gaussian", g_out;
    double g_r = 0.5;
    auto* c_graph = app.add_subcommand("graph", "Build the adjacency matrix of a dataset");
    c_graph->add_option("--data", g_data, "Dataset directory")->required();
    c_graph->add_option("--kind", g_kind, "gaussian or moore");
    c_graph->add_option("--r", g_r, "Gaussian kernel threshold");
    c_graph->add_option("--out", g_out, "Output directory")->required();

    std::string k_data, k_mode = "binary_mask", k_out;
    std::size_t k_sp = 16;
    auto* c_cluster = app.add_subcommand("cluster", "Capacity-constrained KD-tree clustering");
    c_cluster->add_option("--data", k_data, "Dataset directory")->required();
    c_cluster->add_option("--sp", k_sp, "Slots per cluster")->check(CLI::PositiveNumber);
    c_cluster->add_option("--fill-mode", k_mode, "binary_mask or neighbor_fill");
    c_cluster->add_option("--out", k_out, "Output directory")->required();

    std::vector<std::string> p_data;
    std::string p_config, p_out;
    auto* c_pretrain = app.add_subcommand("pretrain", "Masked-reconstruction pre-training");
    c_pretrain->add_option("--data", p_data, "Dataset directory (repeatable)")->required();
    c_pretrain->add_option("--config", p_config, "key = value model/training configuration");
    c_pretrain->add_option("--out", p_out, "Output directory")->required();

    std::string f_ckpt, f_data, f_config, f_out;
    double f_fraction = kFewShotFraction;
    auto* c_finetune = app.add_subcommand("finetune", "Few-shot fine-tuning on a train-split prefix");
    c_finetune->add_option("--checkpoint", f_ckpt, "Checkpoint directory")->required();
    c_finetune->add_option("--data", f_data, "Dataset directory")->required();
    c_finetune->add_option("--fraction", f_fraction, "Fraction of the train split");
    c_finetune->add_option("--config", f_config, "key = value training configuration");
    c_finetune->add_option("--out", f_out, "Output directory")->required();

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Run an evaluation protocol");
    c_eval->add_option("--data", ev.data, "Dataset directory")->required();
    c_eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint directory");
    c_eval->add_option("--baseline", ev.baseline, "ha, mean, knn or oracle");
    c_eval->add_option("--adjacency", ev.adjacency, "Adjacency directory for knn");
    c_eval->add_option("--protocol", ev.protocol, "forecast_short, forecast_long, impute_point or impute_block");
    c_eval->add_option("--shot", ev.shot, "zero, few or full");
    c_eval->add_option("--fraction", ev.fraction, "Few-shot fraction of the train split");
    c_eval->add_option("--config", ev.config, "Fine-tuning configuration");
    c_eval->add_option("--out", ev.out, "Output directory")->required();

    SynthArgs sy;
    auto* c_synth = app.add_subcommand("synth", "Write a seeded synthetic dataset");
    c_synth->add_option("--nodes", sy.nodes, "Nodes on the ring")->check(CLI::PositiveNumber);
    c_synth->add_option("--steps", sy.steps, "Time steps")->check(CLI::PositiveNumber);
    c_synth->add_option("--channels", sy.channels, "Channels")->check(CLI::PositiveNumber);
    c_synth->add_option("--kind", sy.kind, "sinusoid or random_walk");
    c_synth->add_flag("--shifted", sy.shifted, "Use the distribution-shifted variant");
    c_synth->add_option("--dt", sy.dt, "Sampling interval in minutes");
    c_synth->add_option("--noise", sy.noise, "Noise standard deviation");
    c_synth->add_option("--name", sy.name, "Dataset name");
    c_synth->add_option("--out", sy.out, "Output directory")->required();

    double gc_tol = 1e-4;
    std::string gc_out;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    c_grad->add_option("--tol", gc_tol, "Relative tolerance");
    c_grad->add_option("--out", gc_out, "Optional output directory for gradcheck.csv");

    for (auto* sub : app.get_subcommands({})) {
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    for (int i = 0; i < argc; ++i) {
        opt.command_line += (i ? " " : "") + std::string(argv[i]);
    }
    try {
        if (c_ingest->parsed()) {
            cmd_ingest(ingest, opt, out);
        } else if (c_graph->parsed()) {
            cmd_graph(g_data, g_kind, g_r, g_out, opt, out);
        } else if (c_cluster->parsed()) {
            cmd_cluster(k_data, k_sp, k_mode, k_out, opt, out);
        } else if (c_pretrain->parsed()) {
            cmd_pretrain(p_data, p_config, p_out, opt, out);
        } else if (c_finetune->parsed()) {
            cmd_finetune(f_ckpt, f_data, f_fraction, f_config, f_out, opt, out);
        } else if (c_eval->parsed()) {
            cmd_evaluate(ev, opt, out);
        } else if (c_synth->parsed()) {
            cmd_synth(sy, opt, out);
        } else if (c_grad->parsed()) {
            return cmd_gradcheck(gc_tol, gc_out, opt, out);
        }
    } catch (const Error& e) {
        err << "error[" << e.category() << "]: " << e.what() << '\n';
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << "error[IoError]: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error[InternalError]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

} // namespace urbanst::cli
