// drift-ar: data synthesis, training, generation and analysis.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "driftar/cli/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace driftar;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

RunConfig resolve_config(const Common& c) {
    RunConfig cfg;
    if (!c.config_path.empty()) {
        load_config_file(cfg, c.config_path);
    }
    if (const char* env = std::getenv("DRIFT_AR_SEED")) {
        ConfigBinding(cfg).set("seed", env);
    }
    ConfigBinding b(cfg);
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        b.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    cfg.sync_derived();
    cfg.validate();
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out || !(out << text)) {
        throw IoError("cannot write " + path);
    }
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void prepare_out(const RunConfig& cfg, const std::string& command) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) {
        throw IoError("cannot create " + cfg.out_dir + ": " + ec.message());
    }
    write_text(cfg.out_dir + "/config." + command + ".txt", config_text(cfg));
}

void require_file(const std::string& path, const std::string& what, const std::string& producer) {
    if (!fs::exists(path)) {
        throw StateError(what + " not found at " + path + "; run `drift-ar " + producer + "` with the same config first");
    }
}

DataSplit load_split(const RunConfig& cfg) {
    require_file(cfg.dataset_file(), "dataset", "gen-data");
    LoadedDataset ds = load_dataset(cfg.dataset_file());
    return split_dataset(ds.grids, cfg.eval.reference);
}

ModelParams load_target(const RunConfig& cfg) {
    require_file(cfg.target_file(), "target checkpoint", "pretrain");
    ModelParams p = load_checkpoint(cfg.target_file(), {"head.w"}).params;
    p.unfreeze_all();
    return p;
}

struct TrainedModels {
    ModelParams target, draft, decoder;
    double tau_global = 0.0;
};

TrainedModels load_trained(const RunConfig& cfg) {
    require_file(cfg.train_file(), "Drift-AR checkpoint", "train");
    Checkpoint ck = load_checkpoint(cfg.train_file());
    TrainedModels m;
    m.target = extract_prefixed(ck.params, "target.");
    m.draft = extract_prefixed(ck.params, "draft.");
    m.decoder = extract_prefixed(ck.params, "decoder.");
    m.tau_global = ck.meta.scalar("tau_global");
    return m;
}

ModelParams load_diffusion(const RunConfig& cfg) {
    require_file(cfg.diffusion_file(), "diffusion baseline checkpoint", "train --baseline");
    return load_checkpoint(cfg.diffusion_file()).params;
}

Generator make_generator(const RunConfig& cfg, const TrainedModels& m, const ModelParams* eps) {
    Generator g;
    g.target_cfg = cfg.model;
    g.target = &m.target;
    g.draft = &m.draft;
    g.decoder_cfg = cfg.decoder;
    g.decoder = &m.decoder;
    g.eps_net = eps;
    g.sigma = cfg.train.sigma;
    g.schedule = NoiseSchedule::linear(cfg.diffusion.schedule_steps);
    g.spec = cfg.spec;
    g.tau_global = m.tau_global;
    g.gamma = cfg.gamma;
    return g;
}

json stats_json(const SpecStats& s) {
    return json{{"proposed", s.proposed},
                {"accepted", s.accepted},
                {"acceptance_rate", s.acceptance_rate()},
                {"speculation_rounds", s.speculation_rounds},
                {"target_forward_calls", s.target_forward_calls},
                {"draft_forward_calls", s.draft_forward_calls},
                {"stopped_by_entropy", s.stopped_by_entropy},
                {"wall_ns_spec", s.wall_ns_spec}};
}

PhiEncoder phi_of(const RunConfig& cfg, const ModelParams& target) { return PhiEncoder::snapshot(target, cfg.model); }

QualityProbe probe_of(const PhiEncoder& phi, const DataSplit& split) {
    return QualityProbe{&phi, grid_features(phi, split.heldout, split.heldout_classes)};
}

// ---- subcommands ----

int cmd_gen_data(const RunConfig& cfg) {
    prepare_out(cfg, "gen-data");
    auto grids = generate_dataset(cfg.dataset);
    save_dataset(cfg.dataset_file(), grids, cfg.dataset.num_classes, {cfg.dataset.h, cfg.dataset.w, cfg.dataset.d});
    write_json(cfg.out_dir + "/gen-data.json", json{{"path", cfg.dataset_file()}, {"grids", grids.size()}});
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, bool quiet) {
    prepare_out(cfg, "pretrain");
    DataSplit split = load_split(cfg);
    std::ofstream log(cfg.out_dir + "/pretrain.csv");
    log.precision(17);
    log << "step,loss\n";
    ModelParams target = pretrain_stage(cfg, split.train, [&](std::size_t s, double l) {
        log << s << ',' << l << '\n';
        if (!quiet && s % 100 == 0) std::cerr << "pretrain step " << s << " loss " << l << '\n';
    });
    save_checkpoint(cfg.target_file(), target, {});
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& resume, std::size_t checkpoint_every, bool baseline,
              bool quiet) {
    prepare_out(cfg, "train");
    DataSplit split = load_split(cfg);
    ModelParams target = load_target(cfg);
    Trainer trainer(initial_models(cfg, target), split.train, cfg.train);
    if (!resume.empty()) {
        trainer.resume(resume);
    }
    std::vector<MetricRow> rows;
    trainer.run([&](const MetricRow& r) {
        rows.push_back(r);
        if (!quiet && r.step % 50 == 0) {
            std::cerr << "train step " << r.step << " alpha " << r.alpha << " drift " << r.l_drift << '\n';
        }
        if (checkpoint_every && trainer.step_index() % checkpoint_every == 0 && !trainer.finished()) {
            trainer.save(cfg.out_dir + "/drift_ar.step" + std::to_string(trainer.step_index()) + ".dar");
        }
    });
    write_metric_log(cfg.out_dir + "/metrics.csv", rows);
    trainer.save(cfg.train_file());
    if (baseline) {
        std::ofstream log(cfg.out_dir + "/diffusion.csv");
        log.precision(17);
        log << "step,loss\n";
        ModelParams eps = diffusion_stage(cfg, split.train, trainer.cache(), [&](std::size_t s, double l) {
            log << s << ',' << l << '\n';
        });
        save_checkpoint(cfg.diffusion_file(), eps, {});
    }
    return 0;
}

int cmd_generate(const RunConfig& cfg, const std::string& mode, const std::string& decoder, std::size_t steps,
                 std::size_t count, std::optional<int> class_id) {
    prepare_out(cfg, "generate");
    TrainedModels m = load_trained(cfg);
    ModelParams eps;
    if (decoder == "diffusion") {
        eps = load_diffusion(cfg);
    }
    Generator g = make_generator(cfg, m, decoder == "diffusion" ? &eps : nullptr);
    Rng rng = stage_rng(cfg.seed, kGenerate);
    SpecStats stats;
    std::size_t decoder_calls = 0;
    std::vector<std::size_t> per_grid;
    std::vector<format::NamedTensor> out;
    std::size_t ar_calls = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const int c = class_id ? *class_id : static_cast<int>(i % cfg.dataset.num_classes);
        ARGeneration ar = mode == "speculative" ? g.speculative_ar(c, stats) : g.target_ar(c);
        ar_calls += ar.forward_calls;
        std::size_t calls = 0;
        Tensor grid = decoder == "drift" ? g.drift_decode(ar, c, rng, &calls) : g.diffusion_decode(ar, c, steps, rng, &calls);
        decoder_calls += calls;
        per_grid.push_back(calls);
        out.emplace_back("grid." + std::to_string(i), grid.reshaped(Shape{cfg.dataset.h, cfg.dataset.w, cfg.dataset.d}));
        out.emplace_back("class." + std::to_string(i), Tensor(Shape{1}, std::vector<double>{static_cast<double>(c)}));
    }
    format::write_file(cfg.out_dir + "/samples.dar", out);
    json trace{{"mode", mode},
               {"decoder", decoder},
               {"steps", decoder == "drift" ? std::size_t{1} : steps},
               {"grids", count},
               {"decoder_calls", decoder_calls},
               {"decoder_calls_per_grid", per_grid},
               {"ar_forward_calls", ar_calls}};
    if (mode == "speculative") {
        trace["spec_stats"] = stats_json(stats);
    }
    write_json(cfg.out_dir + "/generate.json", trace);
    return 0;
}

int cmd_analyze(const RunConfig& cfg) {
    prepare_out(cfg, "analyze");
    DataSplit split = load_split(cfg);
    TrainedModels m = load_trained(cfg);
    const std::size_t n = std::min(cfg.eval.analysis_grids, split.heldout.size());
    std::vector<Tensor> grids(split.heldout.begin(), split.heldout.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<int> classes(split.heldout_classes.begin(), split.heldout_classes.begin() + static_cast<std::ptrdiff_t>(n));
    EntropyErrorAnalysis a = entropy_error_correlation(m.target, cfg.model, grids, classes);
    {
        std::ofstream pairs(cfg.out_dir + "/entropy_error_pairs.csv");
        pairs.precision(17);
        pairs << "entropy,error\n";
        for (std::size_t i = 0; i < a.entropy.size(); ++i) pairs << a.entropy[i] << ',' << a.error[i] << '\n';
        std::ofstream bins(cfg.out_dir + "/entropy_error_bins.csv");
        bins.precision(17);
        bins << "center,mean_error,count\n";
        for (const auto& b : a.bins) bins << b.center << ',' << b.mean_error << ',' << b.count << '\n';
    }
    // Draft vs target entropy histograms at their penultimate layers.
    const TransformerConfig dcfg = cfg.model.draft();
    std::vector<std::size_t> ht(10, 0), hd(10, 0);
    double st = 0.0, sd = 0.0;
    std::size_t cnt = 0;
    for (std::size_t g = 0; g < n; ++g) {
        auto et = position_entropies(forward(m.target, cfg.model, grids[g], classes[g]), penultimate_layer(cfg.model));
        auto ed = position_entropies(forward(m.draft, dcfg, grids[g], classes[g]), penultimate_layer(dcfg));
        for (std::size_t r = 1; r < et.size(); ++r) {
            ++ht[std::min<std::size_t>(9, static_cast<std::size_t>(et[r] * 10.0))];
            ++hd[std::min<std::size_t>(9, static_cast<std::size_t>(ed[r] * 10.0))];
            st += et[r];
            sd += ed[r];
            ++cnt;
        }
    }
    std::ofstream hist(cfg.out_dir + "/entropy_histogram.csv");
    hist << "bin_lo,bin_hi,target_count,draft_count\n";
    for (std::size_t b = 0; b < 10; ++b) hist << b / 10.0 << ',' << (b + 1) / 10.0 << ',' << ht[b] << ',' << hd[b] << '\n';
    json bins = json::array();
    for (const auto& b : a.bins) bins.push_back({{"center", b.center}, {"mean_error", b.mean_error}, {"count", b.count}});
    write_json(cfg.out_dir + "/analysis.json",
               json{{"pearson_r", a.pearson_r},
                    {"slope", a.slope},
                    {"pairs", a.entropy.size()},
                    {"bin_means", bins},
                    {"monotone_populated_bins", a.monotone_bins()},
                    {"target_mean_entropy", st / static_cast<double>(cnt)},
                    {"draft_mean_entropy", sd / static_cast<double>(cnt)}});
    return 0;
}

int cmd_bench(const RunConfig& cfg) {
    prepare_out(cfg, "bench");
    TrainedModels m = load_trained(cfg);
    ModelParams eps = load_diffusion(cfg);
    Generator g = make_generator(cfg, m, &eps);
    Rng rng_a = stage_rng(cfg.seed, kBench), rng_b = stage_rng(cfg.seed, kBench);
    SpecStats stats;
    const std::size_t C = cfg.dataset.num_classes;
    SpeedupResult r = bench_speedup(
        [&](std::size_t e) {
            const int c = static_cast<int>(e % C);
            g.diffusion_decode(g.target_ar(c), c, cfg.eval.diffusion_steps, rng_a);
        },
        [&](std::size_t e) {
            const int c = static_cast<int>(e % C);
            g.drift_decode(g.speculative_ar(c, stats), c, rng_b);
        },
        cfg.eval.bench_episodes);
    std::ofstream csv(cfg.out_dir + "/bench.csv");
    csv.precision(17);
    csv << "pipeline,decoder,steps,nfe,latency_ns\n";
    csv << "target_ar,diffusion," << cfg.eval.diffusion_steps << ',' << cfg.eval.diffusion_steps << ','
        << r.baseline_median_ns << '\n';
    csv << "speculative_ar,drifting,1,1," << r.accelerated_median_ns << '\n';
    write_json(cfg.out_dir + "/bench.json", json{{"speedup", r.speedup},
                                                  {"baseline_median_ns", r.baseline_median_ns},
                                                  {"accelerated_median_ns", r.accelerated_median_ns},
                                                  {"episodes", cfg.eval.bench_episodes},
                                                  {"spec_stats", stats_json(stats)}});
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& what, bool quiet) {
    prepare_out(cfg, "sweep");
    DataSplit split = load_split(cfg);
    TrainedModels m = load_trained(cfg);
    PhiEncoder phi = phi_of(cfg, m.target);
    QualityProbe probe = probe_of(phi, split);
    if (what == "steps") {
        ModelParams eps = load_diffusion(cfg);
        Generator g = make_generator(cfg, m, &eps);
        auto rows = step_sweep(g, target_rollouts(g, cfg.dataset.num_classes), probe, cfg.eval.sweep_steps,
                               cfg.eval.samples, cfg.seed);
        write_sweep_csv(cfg.out_dir + "/sweep_steps.csv", rows);
        return 0;
    }
    // One decoder-only run per sigma_max on the shared target cache.
    ModelParams target = load_target(cfg);
    std::shared_ptr<const TargetCache> cache;
    std::ofstream csv(cfg.out_dir + "/sweep_sigma.csv");
    csv.precision(17);
    csv << "sigma_max,mmd\n";
    for (double s : cfg.eval.sweep_sigmas) {
        RunConfig c = cfg;
        c.train.sigma.sigma_max = s;
        c.train.train_draft = false;
        Trainer t(initial_models(c, target), split.train, c.train, cache);
        cache = t.shared_cache();
        t.run();
        TrainedModels tm{target, m.draft, t.models().decoder, m.tau_global};
        Generator g = make_generator(c, tm, nullptr);
        const double v = drift_quality(g, target_rollouts(g, c.dataset.num_classes), probe, c.eval.samples, c.seed);
        csv << s << ',' << v << '\n';
        if (!quiet) std::cerr << "sigma_max " << s << " mmd " << v << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"drift-ar: entropy-informed speculative AR generation with a one-step drifting decoder"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config_path, "key = value config file");
        sub->add_option("--set", common.sets, "override a config key (key=value), repeatable");
        sub->add_option("-o,--out", common.out, "output directory");
        sub->add_option("--seed", common.seed, "run seed");
        sub->add_flag("-q,--quiet", common.quiet, "no progress output");
    };
    auto* gen_data = app.add_subcommand("gen-data", "synthesize the dataset");
    auto* pretrain = app.add_subcommand("pretrain", "pre-train the target AR model");
    auto* train = app.add_subcommand("train", "two-phase Drift-AR training");
    std::string resume;
    std::size_t checkpoint_every = 0;
    bool baseline = false;
    train->add_option("--resume", resume, "continue from a training checkpoint");
    train->add_option("--checkpoint-every", checkpoint_every, "write an intermediate checkpoint every N steps");
    train->add_flag("--baseline", baseline, "also train the multi-step diffusion baseline decoder");
    auto* generate = app.add_subcommand("generate", "sample grids");
    std::string mode = "speculative", decoder = "drift";
    std::size_t steps = 20, count = 4;
    std::optional<int> class_id;
    generate->add_option("--mode", mode)->check(CLI::IsMember({"target", "speculative"}));
    generate->add_option("--decoder", decoder)->check(CLI::IsMember({"drift", "diffusion"}));
    generate->add_option("--steps", steps, "diffusion decoder steps");
    generate->add_option("--count", count, "grids to generate");
    generate->add_option("--class", class_id, "fixed class id");
    auto* analyze = app.add_subcommand("analyze", "entropy-error correlation and entropy histograms");
    auto* bench = app.add_subcommand("bench", "end-to-end speedup");
    auto* sweep = app.add_subcommand("sweep", "decoder step or sigma_max sweep");
    std::string what = "steps";
    sweep->add_option("--what", what)->check(CLI::IsMember({"steps", "sigma"}));
    for (auto* s : {gen_data, pretrain, train, generate, analyze, bench, sweep}) add_common(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        const RunConfig cfg = resolve_config(common);
        if (*gen_data) return cmd_gen_data(cfg);
        if (*pretrain) return cmd_pretrain(cfg, common.quiet);
        if (*train) return cmd_train(cfg, resume, checkpoint_every, baseline, common.quiet);
        if (*generate) return cmd_generate(cfg, mode, decoder, steps, count, class_id);
        if (*analyze) return cmd_analyze(cfg);
        if (*bench) return cmd_bench(cfg);
        if (*sweep) return cmd_sweep(cfg, what, common.quiet);
    } catch (const Error& e) {
        std::cerr << "drift-ar: " << e.what() << '\n';
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "drift-ar: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
