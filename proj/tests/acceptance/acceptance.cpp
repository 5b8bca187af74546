// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Criteria 1-8 are exact checks on small inputs. 9-15 share one default-config
// pipeline (dataset, pre-trained target, joint training, diffusion baseline)
// trained twice for the reproducibility check.

#include <CLI11.hpp>
#include <json.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include "driftar/cli/pipeline.hpp"
#include "driftar/numerics/grad_check.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace driftar;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<Outcome> outcomes;
bool verbose = true;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    outcomes.push_back({id, name, pass, detail});
    std::printf("[%s] %2d %-34s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

void progress(const std::string& msg) {
    if (verbose) {
        std::fprintf(stderr, "  .. %s\n", msg.c_str());
    }
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Runs `body` and reports it; exceptions count as failures.
void criterion(int id, const std::string& name, double budget_s, const std::function<std::pair<bool, std::string>()>& body) {
    const auto t0 = Clock::now();
    try {
        auto [ok, detail] = body();
        const double s = since(t0);
        if (budget_s > 0) {
            detail += fmt("; %.2fs (limit %.0fs)", s, budget_s);
            ok = ok && s < budget_s;
        } else {
            detail += fmt("; %.1fs", s);
        }
        report(id, name, ok, detail);
    } catch (const std::exception& e) {
        report(id, name, false, std::string("exception: ") + e.what());
    }
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- exact criteria ----

// Causal softmax map with per-row random logits: [heads*T x T].
Tensor random_causal_map(Rng& rng, std::size_t heads, std::size_t T) {
    Tensor a(Shape{heads * T, T});
    for (std::size_t h = 0; h < heads; ++h) {
        const double scale = std::exp(rng.uniform(-3.0, 3.0));
        for (std::size_t i = 0; i < T; ++i) {
            std::vector<double> z(i + 1);
            double mx = -INFINITY;
            for (auto& v : z) {
                v = scale * rng.normal();
                mx = std::max(mx, v);
            }
            double s = 0.0;
            for (auto& v : z) s += (v = std::exp(v - mx));
            for (std::size_t j = 0; j <= i; ++j) a(h * T + i, j) = z[j] / s;
        }
    }
    return a;
}

std::pair<bool, std::string> check_entropy_bounds() {
    Rng rng(101);
    double lo = INFINITY, hi = -INFINITY;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t T = 2 + rng.below(47), H = 1 + rng.below(4);
        Tensor avg = head_average(random_causal_map(rng, H, T), H);
        for (std::size_t i = 1; i < T; ++i) {
            const double e = attention_entropy(std::span<const double>(&avg(i, 0), T), i + 1);
            lo = std::min(lo, e);
            hi = std::max(hi, e);
        }
    }
    double uni_err = 0.0, hot_err = 0.0;
    for (std::size_t r = 2; r <= 65; ++r) {
        std::vector<double> uniform(r, 1.0 / static_cast<double>(r)), hot(r, 0.0);
        hot[rng.below(r)] = 1.0;
        uni_err = std::max(uni_err, std::abs(attention_entropy(uniform, r) - 1.0));
        hot_err = std::max(hot_err, std::abs(attention_entropy(hot, r)));
    }
    const bool ok = lo >= 0.0 && hi <= 1.0 && uni_err <= 1e-12 && hot_err == 0.0;
    return {ok, fmt("range [%.4f, %.4f]; uniform |H-1| %.1e; one-hot |H| %.1e", lo, hi, uni_err, hot_err)};
}

std::pair<bool, std::string> check_sigma_map() {
    bool mono = true;
    double end_err = 0.0;
    for (double smax : {0.1, 0.5, 1.0}) {
        for (double emax : {1.0, 0.7}) {
            SigmaMapConfig c;
            c.sigma_max = smax;
            c.entropy_max = emax;
            end_err = std::max({end_err, std::abs(sigma_of_entropy(0.0, c)),
                                std::abs(sigma_of_entropy(emax, c) - smax)});
            double prev = -INFINITY;
            for (int i = 0; i < 1000; ++i) {
                const double s = sigma_of_entropy(emax * i / 999.0, c);
                mono = mono && s > prev;
                prev = s;
            }
        }
    }
    return {mono && end_err <= 1e-12, fmt("endpoint error %.1e; strictly increasing on 1000 points: %s", end_err,
                                         mono ? "yes" : "no")};
}

Tensor stack(const Tensor& a, const Tensor& b) {
    Tensor out(Shape{a.rows() + b.rows(), a.cols()});
    std::copy_n(a.data().data(), a.numel(), out.data().data());
    std::copy_n(b.data().data(), b.numel(), out.data().data() + a.numel());
    return out;
}

std::pair<bool, std::string> check_antisymmetry() {
    Rng rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + rng.below(15), np = 3 + rng.below(30), nq = 3 + rng.below(30);
        KernelConfig k;
        k.distance_scale = trial % 2 ? 64.0 : static_cast<double>(d);
        Tensor p = rng.normal_tensor(Shape{np, d});
        Tensor q = rng.normal_tensor(Shape{nq, d}, 1.5);
        const double shift = rng.normal();
        for (auto& v : q.values()) v += shift;
        Tensor x = stack(stack(p, q), rng.normal_tensor(Shape{5, d}));
        Tensor vpq = drifting_field_at(x, p, q, k), vqp = drifting_field_at(x, q, p, k);
        for (std::size_t i = 0; i < vpq.numel(); ++i) worst = std::max(worst, std::abs(vpq[i] + vqp[i]));
    }
    return {worst < 1e-9, fmt("max |V_pq + V_qp| = %.2e over 100 pairs (limit 1e-9)", worst)};
}

std::pair<bool, std::string> check_equilibrium() {
    Rng rng(303);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 2 + rng.below(15), n = 2 + rng.below(40);
        KernelConfig k;
        k.distance_scale = static_cast<double>(d);
        Tensor p = rng.normal_tensor(Shape{n, d});
        Tensor q(p.shape());
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) q(i, c) = p(perm[i], c);
        Tensor v1 = drifting_field(p, q, k);
        Tensor v2 = drifting_field_at(rng.normal_tensor(Shape{8, d}), p, q, k);
        for (const Tensor* v : {&v1, &v2})
            for (double x : v->values()) worst = std::max(worst, std::abs(x));
    }
    return {worst < 1e-9, fmt("max |V| = %.2e for identical multisets (limit 1e-9)", worst)};
}

TransformerConfig small_ar() {
    TransformerConfig c;
    c.num_layers = 3;
    c.num_heads = 2;
    c.model_dim = 8;
    c.draft_layers = 2;
    c.token_dim = 3;
    c.max_positions = 6;
    c.num_classes = 2;
    return c;
}

DecoderConfig small_decoder() {
    DecoderConfig c;
    c.num_blocks = 1;
    c.num_heads = 2;
    c.model_dim = 8;
    c.token_dim = 3;
    c.positions = 5;
    c.num_classes = 2;
    return c;
}

void randomize_readout(ModelParams& p, Rng& rng) {
    for (auto& [name, t] : p.tensors())
        if (name.rfind("out.", 0) == 0) t = rng.normal_tensor(t.shape(), 0.3);
}

std::pair<bool, std::string> check_gradients() {
    Rng rng(404);
    const TransformerConfig ar = small_ar();
    const TransformerConfig dc = ar.draft();
    ModelParams target = init_transformer(ar, rng);
    ModelParams draft = init_draft_from_target(target, ar);
    const std::vector<int> cls{0, 1};
    const std::size_t B = 2, T = ar.max_positions, d = ar.token_dim;

    // Regression loss through the draft network, w.r.t. its input tokens.
    const Tensor z_target = rng.normal_tensor(Shape{B * T, d}, 0.3);
    const double e_reg = grad_check(
        [&](Tape& tape, Var body) { return regression_loss(predict(tape, draft, dc, body, cls), tape.constant(z_target)); },
        rng.normal_tensor(Shape{B * (T - 1), d}), 1e-6);

    // Entropy loss on the draft's penultimate attention.
    const double e_ent = grad_check(
        [&](Tape& tape, Var body) {
            TrunkTrace tr = run_trunk(tape, draft, dc, body, cls, dc.num_layers);
            return entropy_loss(tr.attention[penultimate_layer(dc)], B, dc.num_heads);
        },
        rng.normal_tensor(Shape{B * (T - 1), d}), 1e-6);

    // Drift loss through decoder and frozen phi; the field target is held fixed.
    const DecoderConfig dec_cfg = small_decoder();
    ModelParams dec = init_decoder(dec_cfg, rng);
    randomize_readout(dec, rng);
    const std::size_t R = dec_cfg.positions;
    PhiEncoder phi = PhiEncoder::snapshot(target, ar);
    Tensor entropy(Shape{B * R});
    for (auto& v : entropy.values()) v = rng.uniform();
    const Tensor x0 = rng.normal_tensor(Shape{B * R, d});
    const Tensor real = rng.normal_tensor(Shape{6 * R, d});
    const std::vector<int> real_cls{0, 1, 0, 1, 0, 1};
    KernelConfig k;
    k.distance_scale = static_cast<double>(phi.dim());
    Tensor fixed_target;
    {
        Tape tape(false);
        Var g = phi.encode(tape, decoder_forward(tape, dec, dec_cfg, tape.constant(x0), cls, entropy), cls);
        Tensor v = grouped_drifting_field(g.value(), class_position_keys(cls, R), phi.encode_batch(real, real_cls),
                                          class_position_keys(real_cls, R), k);
        fixed_target = drift_target(g.value(), v);
    }
    const double e_drift = grad_check(
        [&](Tape& tape, Var x) {
            return drift_loss_to(phi.encode(tape, decoder_forward(tape, dec, dec_cfg, x, cls, entropy), cls), fixed_target);
        },
        x0, 1e-6);

    // Diffusion baseline denoising loss w.r.t. the noisy input.
    ModelParams eps_net = init_eps_net(dec_cfg, rng);
    randomize_readout(eps_net, rng);
    const Tensor z = rng.normal_tensor(Shape{B * R, d}), noise = rng.normal_tensor(Shape{B * R, d});
    const double e_diff = grad_check(
        [&](Tape& tape, Var x_t) {
            Var pred = eps_net_forward(tape, eps_net, dec_cfg, x_t, tape.constant(z), cls, {3, 17});
            return ad::mean(ad::square(ad::sub(pred, tape.constant(noise))));
        },
        rng.normal_tensor(Shape{B * R, d}), 1e-6);

    const double worst = std::max({e_reg, e_ent, e_drift, e_diff});
    return {worst < 1e-4, fmt("rel err reg %.1e, entropy %.1e, drift %.1e, diffusion %.1e (limit 1e-4)", e_reg, e_ent,
                              e_drift, e_diff)};
}

RunConfig small_run() {
    RunConfig c;
    c.dataset.h = 4;
    c.dataset.w = 4;
    c.dataset.d = 4;
    c.dataset.num_classes = 2;
    c.dataset.num_samples = 40;
    c.model.num_layers = 3;
    c.model.num_heads = 2;
    c.model.model_dim = 16;
    c.model.draft_layers = 1;
    c.decoder.num_blocks = 1;
    c.decoder.num_heads = 2;
    c.decoder.model_dim = 16;
    c.train.schedule.total_steps = 10;
    c.train.batch = 3;
    c.train.real_batch = 4;
    c.train.kernel.distance_scale = 16.0;
    c.sync_derived();
    return c;
}

std::pair<bool, std::string> check_schedule() {
    const ScheduleConfig s = TrainConfig{}.schedule;
    const double tf = s.t_freeze_fraction * static_cast<double>(s.total_steps);
    const double a0_err = std::abs(alpha(0.0, s) - 0.95), af_err = std::abs(alpha(tf, s));
    double lin_err = 0.0;
    Rng rng(505);
    for (int i = 0; i < 100; ++i) {
        const double t = rng.uniform(0.0, tf);
        lin_err = std::max(lin_err, std::abs(alpha(t, s) - 0.95 * (1.0 - t / tf)));
    }
    // Total loss on fixed values, scalar and tape forms.
    double tot_err = 0.0;
    for (double a : {0.0, 0.25, 0.5, 0.95}) {
        for (auto [r, e, dr] : {std::tuple{0.3, -0.9, 1.7}, std::tuple{2.0, -0.1, 0.05}}) {
            const double want = a * (r + e) + (1.0 - a) * dr;
            Tape tape(false);
            Var vr = tape.constant(Tensor::scalar(r)), ve = tape.constant(Tensor::scalar(e)),
                vd = tape.constant(Tensor::scalar(dr));
            tot_err = std::max({tot_err, std::abs(total_loss(a, r, e, dr) - want),
                                std::abs(total_loss(a, &vr, &ve, &vd).value().item() - want)});
        }
    }
    // Phase II: draft and target bit-frozen while the decoder trains.
    RunConfig c = small_run();
    Corpus corpus = Corpus::from(generate_dataset(c.dataset));
    Rng init(9);
    ModelParams target = init_transformer(c.model, init);
    c.train.schedule.total_steps = 20;
    Trainer t(initial_models(c, target), corpus, c.train);
    while (phase_at(t.step_index(), c.train.schedule) == Phase::I) t.step();
    const ModelParams draft0 = t.models().draft, target0 = t.models().target, dec0 = t.models().decoder;
    t.run();
    const bool frozen = t.models().draft.same_values(draft0) && t.models().target.same_values(target0) &&
                        !t.models().decoder.same_values(dec0) && t.phase_transitions() == 1;
    const bool ok = a0_err <= 1e-15 && af_err <= 1e-12 && lin_err <= 1e-12 && tot_err <= 1e-15 && frozen;
    return {ok, fmt("|a(0)-0.95| %.1e, |a(Tf)| %.1e, linearity %.1e, total-loss %.1e, Phase-II AR frozen: %s", a0_err,
                    af_err, lin_err, tot_err, frozen ? "yes" : "no")};
}

std::pair<bool, std::string> check_degenerate_spec() {
    TransformerConfig cfg;  // default geometry, untrained weights
    cfg.token_dim = 8;
    cfg.max_positions = 65;
    cfg.num_classes = 4;
    Rng rng(606);
    ModelParams target = init_transformer(cfg, rng);
    ModelParams draft = init_draft_from_target(target, cfg);
    SpecModels m{&target, cfg, &draft, cfg.draft()};
    bool same = true;
    for (int c : {0, 3}) {
        ARGeneration ref = generate_autoregressive(target, cfg, c, 64);
        ThresholdState st = ThresholdState::init(0.3);
        SpecStats stats;
        ARGeneration spec = run_speculative_generation(m, c, 64, st, SpecConfig{0.0, 1, true}, stats);
        same = same && spec.features.bit_equal(ref.features) && spec.entropy == ref.entropy;
    }
    ThresholdState s;
    s.ema_target_entropy = 0.2;
    s.gamma = 0.8;
    auto [next, tau_c] = update_threshold(s, 0.5);
    const double ema_err = std::max(std::abs(next.ema_target_entropy - 0.23), std::abs(tau_c - 0.184));
    return {same && ema_err <= 1e-12,
            fmt("bit-identical to target-only: %s; EMA 0.2 -> %.6f, tau_c %.6f", same ? "yes" : "no",
                next.ema_target_entropy, tau_c)};
}

// ---- pipeline ----

struct Pipeline {
    RunConfig cfg;
    DataSplit split;
    ModelParams target;
    std::unique_ptr<Trainer> trainer;
    ModelParams eps_net;
    bool dataset_roundtrip = false;
    bool target_roundtrip = false;
    double pretrain_s = 0, train_s = 0, diffusion_s = 0;
};

std::unique_ptr<Pipeline> run_pipeline(const RunConfig& cfg, bool with_diffusion) {
    auto p = std::make_unique<Pipeline>();
    p->cfg = cfg;
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/run.cfg") << config_text(cfg);

    const auto grids = generate_dataset(cfg.dataset);
    save_dataset(cfg.dataset_file(), grids, cfg.dataset.num_classes, {cfg.dataset.h, cfg.dataset.w, cfg.dataset.d});
    LoadedDataset loaded = load_dataset(cfg.dataset_file());
    p->dataset_roundtrip = loaded.grids.size() == grids.size();
    for (std::size_t i = 0; p->dataset_roundtrip && i < grids.size(); ++i) {
        p->dataset_roundtrip = loaded.grids[i].tokens.bit_equal(grids[i].tokens) && loaded.grids[i].class_id == grids[i].class_id;
    }
    p->split = split_dataset(loaded.grids, cfg.eval.reference);

    auto t0 = Clock::now();
    p->target = pretrain_stage(cfg, p->split.train, [&](std::size_t s, double l) {
        if (s % 250 == 0) progress(fmt("pretrain %zu loss %.5f", s, l));
    });
    p->pretrain_s = since(t0);
    save_checkpoint(cfg.target_file(), p->target, {});
    p->target_roundtrip = load_checkpoint(cfg.target_file()).params.same_values(p->target);

    t0 = Clock::now();
    p->trainer = std::make_unique<Trainer>(initial_models(cfg, p->target), p->split.train, cfg.train);
    p->trainer->run([&](const MetricRow& r) {
        if (r.step % 100 == 0) progress(fmt("train %zu drift %.4f", r.step, r.l_drift));
    });
    p->train_s = since(t0);
    p->trainer->save(cfg.train_file());
    write_metric_log(cfg.out_dir + "/metrics.csv", p->trainer->log());

    if (with_diffusion) {
        t0 = Clock::now();
        p->eps_net = diffusion_stage(cfg, p->split.train, p->trainer->cache(), [&](std::size_t s, double l) {
            if (s % 250 == 0) progress(fmt("diffusion %zu loss %.5f", s, l));
        });
        p->diffusion_s = since(t0);
        save_checkpoint(cfg.diffusion_file(), p->eps_net, {});
    }
    return p;
}

Generator generator_of(const Pipeline& p, const ModelParams* draft = nullptr, const ModelParams* decoder = nullptr) {
    const TrainModels& m = p.trainer->models();
    Generator g;
    g.target_cfg = p.cfg.model;
    g.target = &m.target;
    g.draft = draft ? draft : &m.draft;
    g.decoder_cfg = p.cfg.decoder;
    g.decoder = decoder ? decoder : &m.decoder;
    g.eps_net = p.eps_net.size() ? &p.eps_net : nullptr;
    g.sigma = p.cfg.train.sigma;
    g.schedule = NoiseSchedule::linear(p.cfg.diffusion.schedule_steps);
    g.spec = p.cfg.spec;
    g.tau_global = p.trainer->tau_global();
    g.gamma = p.cfg.gamma;
    return g;
}

// Decoder-only run sharing the main run's target and cache; the decoder's
// trajectory depends only on the config, not on whether the draft trains.
ModelParams decoder_variant(const Pipeline& p, const std::function<void(ConfigBinding&)>& edit) {
    RunConfig c = p.cfg;
    ConfigBinding b(c);
    edit(b);
    b.set("train.train_draft", "false");
    Trainer t(initial_models(c, p.target), p.split.train, c.train, p.trainer->shared_cache());
    t.run();
    return t.models().decoder;
}

double mean_penultimate_entropy(const ModelParams& params, const TransformerConfig& cfg, const Pipeline& p) {
    const std::size_t n = std::min(p.cfg.eval.analysis_grids, p.split.heldout.size());
    double s = 0.0;
    std::size_t cnt = 0;
    for (std::size_t g = 0; g < n; ++g) {
        auto e = position_entropies(forward(params, cfg, p.split.heldout[g], p.split.heldout_classes[g]),
                                    penultimate_layer(cfg));
        for (std::size_t r = 1; r < e.size(); ++r, ++cnt) s += e[r];
    }
    return s / static_cast<double>(cnt);
}

double acceptance_rate(const Generator& g, std::size_t classes) {
    SpecStats stats;
    for (std::size_t c = 0; c < classes; ++c) g.speculative_ar(static_cast<int>(c), stats);
    return stats.acceptance_rate();
}

int run_cli(const std::string& args) {
    const int status = std::system((std::string(DRIFTAR_CLI_PATH) + " " + args).c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string workdir = "acceptance_run";
    bool quiet = false, exact_only = false;
    std::vector<std::string> sets;
    app.add_option("--set", sets, "override a pipeline config key (key=value) for quick trial runs");
    app.add_flag("--exact-only", exact_only, "stop after the checks that need no training");
    app.add_option("--workdir", workdir, "scratch directory for pipeline artifacts");
    app.add_flag("-q,--quiet", quiet, "no progress output");
    CLI11_PARSE(app, argc, argv);
    verbose = !quiet;
    fs::remove_all(workdir);
    fs::create_directories(workdir);

    criterion(1, "entropy bounds", 1, check_entropy_bounds);
    criterion(2, "sigma map endpoints/monotone", 1, check_sigma_map);
    criterion(3, "field anti-symmetry", 5, check_antisymmetry);
    criterion(4, "field equilibrium", 1, check_equilibrium);
    criterion(5, "gradient checks", 30, check_gradients);
    criterion(6, "alpha schedule and Phase-II freeze", 1, check_schedule);
    criterion(7, "degenerate speculation + EMA", 10, check_degenerate_spec);

    if (exact_only) {
        return std::any_of(outcomes.begin(), outcomes.end(), [](const Outcome& o) { return !o.pass; });
    }

    RunConfig cfg;
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        ConfigBinding(cfg).set(kv.substr(0, eq), eq == std::string::npos ? "" : kv.substr(eq + 1));
    }
    cfg.sync_derived();
    cfg.validate();
    cfg.out_dir = workdir + "/main";
    const auto t_main = Clock::now();
    std::unique_ptr<Pipeline> main_run;
    try {
        progress("main pipeline");
        main_run = run_pipeline(cfg, true);
    } catch (const std::exception& e) {
        std::printf("main pipeline failed: %s\n", e.what());
    }
    if (!main_run) {
        for (int id = 8; id <= 15; ++id) report(id, "pipeline-dependent", false, "main pipeline did not complete");
        return 1;
    }
    Pipeline& P = *main_run;
    const double main_s = since(t_main);
    progress(fmt("main pipeline %.0fs (pretrain %.0fs, train %.0fs, diffusion %.0fs)", main_s, P.pretrain_s,
                 P.train_s, P.diffusion_s));

    criterion(8, "CLI generate: 1 decoder call/grid", 5, [&] {
        const std::size_t count = 4;
        const int code = run_cli("generate --mode speculative --decoder drift --count " + std::to_string(count) +
                                 " -c " + P.cfg.out_dir + "/run.cfg -q");
        if (code != 0) return std::pair{false, fmt("drift-ar exited with %d", code)};
        json g = json::parse(slurp(P.cfg.out_dir + "/generate.json"));
        bool each_one = g["decoder_calls_per_grid"].size() == count;
        for (const auto& c : g["decoder_calls_per_grid"]) each_one = each_one && c.get<std::size_t>() == 1;
        const bool ok = each_one && g["decoder_calls"].get<std::size_t>() == count;
        return std::pair{ok, fmt("%zu grids, %zu decoder calls", count, g["decoder_calls"].get<std::size_t>())};
    });

    criterion(9, "persistence and reproducibility", 0, [&] {
        // Checkpoint round trip: reload and re-save gives identical bytes.
        const std::string a = P.cfg.train_file(), b = workdir + "/resaved.dar";
        Trainer re(initial_models(P.cfg, P.target), P.split.train, P.cfg.train, P.trainer->shared_cache());
        re.resume(a);
        re.save(b);
        const bool ckpt = slurp(a) == slurp(b);

        // Resume mid Phase I reproduces the uninterrupted loss trajectory.
        RunConfig sc = P.cfg;
        sc.train.schedule.total_steps = 40;
        Trainer full(initial_models(sc, P.target), P.split.train, sc.train, P.trainer->shared_cache());
        full.run();
        Trainer first(initial_models(sc, P.target), P.split.train, sc.train, P.trainer->shared_cache());
        while (first.step_index() < 15) first.step();
        first.save(workdir + "/mid.dar");
        Trainer second(initial_models(sc, P.target), P.split.train, sc.train, P.trainer->shared_cache());
        second.resume(workdir + "/mid.dar");
        second.save(workdir + "/mid_resaved.dar");
        const bool opt_state = slurp(workdir + "/mid.dar") == slurp(workdir + "/mid_resaved.dar");
        second.run();
        bool resume = second.models().decoder.same_values(full.models().decoder) &&
                      second.models().draft.same_values(full.models().draft);
        for (std::size_t i = 0; resume && i < second.log().size(); ++i) {
            resume = second.log()[i].l_total == full.log()[15 + i].l_total;
        }

        // A second end-to-end run from the same seed.
        progress("second pipeline");
        RunConfig c2 = cfg;
        c2.out_dir = workdir + "/repeat";
        auto rep = run_pipeline(c2, true);
        // Loss columns only: the log also records wall time.
        bool same_log = rep->trainer->log().size() == P.trainer->log().size();
        for (std::size_t i = 0; same_log && i < P.trainer->log().size(); ++i) {
            const MetricRow &x = P.trainer->log()[i], &y = rep->trainer->log()[i];
            auto eq = [](double u, double v) { return u == v || (std::isnan(u) && std::isnan(v)); };
            same_log = x.alpha == y.alpha && eq(x.l_reg, y.l_reg) && eq(x.l_entropy, y.l_entropy) &&
                       eq(x.l_drift, y.l_drift) && eq(x.l_total, y.l_total);
        }
        const bool repro = slurp(P.cfg.dataset_file()) == slurp(c2.dataset_file()) &&
                           slurp(P.cfg.target_file()) == slurp(c2.target_file()) &&
                           slurp(P.cfg.train_file()) == slurp(c2.train_file()) &&
                           slurp(P.cfg.diffusion_file()) == slurp(c2.diffusion_file()) && same_log;
        const double train_total = P.pretrain_s + P.train_s + P.diffusion_s;
        const bool ok = P.dataset_roundtrip && P.target_roundtrip && ckpt && opt_state && resume && repro &&
                        train_total < 1800.0;
        return std::pair{ok, fmt("dataset %s, target %s, checkpoint %s, optimizer state %s, resume %s, repeat run "
                                 "%s; training %.0fs (limit 1800s)",
                                 P.dataset_roundtrip ? "ok" : "DIFF", P.target_roundtrip ? "ok" : "DIFF",
                                 ckpt ? "ok" : "DIFF", opt_state ? "ok" : "DIFF", resume ? "ok" : "DIFF",
                                 repro ? "bit-identical" : "DIFF", train_total)};
    });

    const auto t_dir = Clock::now();
    const Generator G = generator_of(P);
    const PhiEncoder& phi = P.trainer->phi();
    const QualityProbe probe{&phi, grid_features(phi, P.split.heldout, P.split.heldout_classes)};
    const std::size_t C = P.cfg.dataset.num_classes;
    const auto rollouts = target_rollouts(G, C);
    const std::size_t samples = P.cfg.eval.samples;
    const std::uint64_t eval_seed = P.cfg.seed;
    const double main_mmd = drift_quality(G, rollouts, probe, samples, eval_seed);

    criterion(10, "entropy-error correlation", 0, [&] {
        const std::size_t n = std::min(P.cfg.eval.analysis_grids, P.split.heldout.size());
        std::vector<Tensor> grids(P.split.heldout.begin(), P.split.heldout.begin() + static_cast<std::ptrdiff_t>(n));
        std::vector<int> cls(P.split.heldout_classes.begin(),
                             P.split.heldout_classes.begin() + static_cast<std::ptrdiff_t>(n));
        EntropyErrorAnalysis a = entropy_error_correlation(P.trainer->models().target, P.cfg.model, grids, cls);
        const bool ok = a.pearson_r > 0.3 && a.slope > 0.0 && a.monotone_bins();
        return std::pair{ok, fmt("pearson r %.3f (need > 0.3), slope %.3f, binned means non-decreasing: %s",
                                 a.pearson_r, a.slope, a.monotone_bins() ? "yes" : "no")};
    });

    criterion(11, "draft entropy alignment", 0, [&] {
        RunConfig c = P.cfg;
        ConfigBinding b(c);
        b.set("train.train_decoder", "false");
        b.set("train.entropy_loss", "false");
        Trainer t(initial_models(c, P.target), P.split.train, c.train, P.trainer->shared_cache());
        t.run();
        const ModelParams& plain = t.models().draft;
        const ModelParams& aligned = P.trainer->models().draft;
        const TransformerConfig dc = P.cfg.model.draft();
        const double e_target = mean_penultimate_entropy(P.trainer->models().target, P.cfg.model, P);
        const double e_plain = mean_penultimate_entropy(plain, dc, P);
        const double e_aligned = mean_penultimate_entropy(aligned, dc, P);
        const double gap0 = e_target - e_plain, gap1 = e_target - e_aligned;
        const double acc_plain = acceptance_rate(generator_of(P, &plain), C);
        const double acc_aligned = acceptance_rate(G, C);
        const bool ok = gap0 >= 0.05 && std::abs(gap1) <= 0.5 * gap0 && acc_aligned > acc_plain;
        return std::pair{ok, fmt("target %.4f; draft w/o entropy loss %.4f (gap %.4f, need >= 0.05); with %.4f "
                                 "(gap %.4f, need |gap| <= %.4f); acceptance %.3f -> %.3f",
                                 e_target, e_plain, gap0, e_aligned, gap1, 0.5 * std::max(gap0, 0.0), acc_plain,
                                 acc_aligned)};
    });

    criterion(12, "1-NFE quality vs diffusion", 0, [&] {
        auto rows = step_sweep(G, rollouts, probe, P.cfg.eval.sweep_steps, samples, eval_seed);
        write_sweep_csv(workdir + "/sweep_steps.csv", rows);
        double d1 = NAN, d20 = NAN, drift = NAN;
        std::string all;
        for (const auto& r : rows) {
            if (r.decoder == "diffusion" && r.steps == 1) d1 = r.mmd;
            if (r.decoder == "diffusion" && r.steps == 20) d20 = r.mmd;
            if (r.decoder == "drifting") drift = r.mmd;
            all += fmt(" %s%zu=%.6f", r.decoder == "drifting" ? "drift" : "diff", r.steps, r.mmd);
        }
        const bool ok = d1 >= 2.0 * d20 && drift <= 1.5 * d20;
        return std::pair{ok, fmt("MMD diff1 %.6f vs 2*diff20 %.6f; drift %.6f vs 1.5*diff20 %.6f;", d1, 2 * d20, drift,
                                 1.5 * d20) +
                                 all};
    });

    criterion(13, "sigma_max U-shape", 0, [&] {
        std::map<double, double> m;
        for (double s : P.cfg.eval.sweep_sigmas) {
            if (s == P.cfg.train.sigma.sigma_max) {
                m[s] = main_mmd;
                continue;
            }
            progress(fmt("sigma_max %.1f", s));
            ModelParams dec = decoder_variant(P, [&](ConfigBinding& b) { b.set("sigma.sigma_max", fmt("%.17g", s)); });
            Generator g = generator_of(P, nullptr, &dec);
            g.sigma.sigma_max = s;
            m[s] = drift_quality(g, rollouts, probe, samples, eval_seed);
        }
        const double best_mid = std::min({m.at(0.3), m.at(0.5), m.at(0.7)});
        const bool ok = m.at(0.1) >= best_mid && m.at(1.0) >= best_mid;
        std::string all;
        for (auto [s, v] : m) all += fmt(" %.1f:%.6f", s, v);
        return std::pair{ok, fmt("MMD by sigma_max%s; best middle %.6f", all.c_str(), best_mid)};
    });

    criterion(14, "end-to-end speedup", 0, [&] {
        Rng ra = stage_rng(P.cfg.seed, kBench), rb = stage_rng(P.cfg.seed, kBench);
        const std::size_t steps = P.cfg.eval.diffusion_steps;
        SpeedupResult r = bench_speedup(
            [&](std::size_t e) {
                const int c = static_cast<int>(e % C);
                G.diffusion_decode(G.target_ar(c), c, steps, ra);
            },
            [&](std::size_t e) {
                SpecStats st;
                const int c = static_cast<int>(e % C);
                G.drift_decode(G.speculative_ar(c, st), c, rb);
            },
            P.cfg.eval.bench_episodes);
        return std::pair{r.speedup >= 1.5, fmt("speedup %.2fx (need >= 1.5x); median %.1f ms vs %.1f ms", r.speedup,
                                               r.baseline_median_ns / 1e6, r.accelerated_median_ns / 1e6)};
    });

    criterion(15, "ablations", 0, [&] {
        progress("ablation A");
        ModelParams dec_a = decoder_variant(P, [](ConfigBinding& b) { b.set("sigma.constant_variance", "true"); });
        Generator ga = generator_of(P, nullptr, &dec_a);
        ga.sigma.constant_variance = true;
        const double mmd_a = drift_quality(ga, rollouts, probe, samples, eval_seed);
        progress("ablation C");
        ModelParams dec_c = decoder_variant(P, [](ConfigBinding& b) { b.set("kernel.repulsion", "false"); });
        const double mmd_c = drift_quality(generator_of(P, nullptr, &dec_c), rollouts, probe, samples, eval_seed);

        // B and E: short joint runs under the flag; D: generation without early stopping.
        auto short_run = [&](const std::string& key) {
            RunConfig c = P.cfg;
            ConfigBinding b(c);
            b.set(key, "true");
            b.set("schedule.total_steps", "30");
            Trainer t(initial_models(c, P.target), P.split.train, c.train, P.trainer->shared_cache());
            t.run();
            bool finite = true;
            for (const auto& r : t.log()) finite = finite && std::isfinite(r.l_total);
            return std::pair{finite, std::move(t)};
        };
        auto [b_ok, tb] = short_run("schedule.fixed_alpha");
        for (const auto& r : tb.log()) b_ok = b_ok && r.alpha == 0.5;
        auto [e_ok, te] = short_run("train.unfrozen_prior");
        e_ok = e_ok && !te.models().target.same_values(P.target);
        RunConfig cd = P.cfg;
        ConfigBinding(cd).set("spec.early_stop", "false");
        Generator gd = G;
        gd.spec = cd.spec;
        SpecStats sd;
        bool d_ok = true;
        for (std::size_t c = 0; c < C; ++c) {
            ARGeneration ar = gd.speculative_ar(static_cast<int>(c), sd);
            for (double v : ar.features.values()) d_ok = d_ok && std::isfinite(v);
        }
        d_ok = d_ok && sd.stopped_by_entropy == 0;
        const bool ok = mmd_a >= main_mmd && mmd_c >= main_mmd && b_ok && d_ok && e_ok;
        return std::pair{ok, fmt("MMD main %.6f, A const-var %.6f, C attract-only %.6f (both need >= main); B %s, D %s "
                                 "(acceptance %.3f), E %s",
                                 main_mmd, mmd_a, mmd_c, b_ok ? "ok" : "FAIL", d_ok ? "ok" : "FAIL",
                                 sd.acceptance_rate(), e_ok ? "ok" : "FAIL")};
    });

    std::printf("[INFO] directional criteria 10-15 took %.0fs on %u hardware threads (budget 3600s on 8 cores)\n",
                since(t_dir), std::thread::hardware_concurrency());
    std::size_t failed = 0;
    for (const auto& o : outcomes) failed += !o.pass;
    std::printf("%zu/%zu criteria passed\n", outcomes.size() - failed, outcomes.size());
    return failed ? 1 : 0;
}
