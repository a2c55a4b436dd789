// Command-line surface: data generation, training, evaluation, ablations,
// kernel benchmarks and diagnostics.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>

#include "otter/harness.hpp"

using namespace otter;

namespace {

const char* const kConfigKeys[] = {
    "way", "shot", "train_episodes", "eval_tasks", "train_queries", "any_shot", "lr",
    "lr_decay", "lambda0", "lambda1", "lambda2", "omega1", "omega2", "tau", "distance",
    "image", "frames", "p", "feat_dim", "bb_patch", "width1", "width2", "fov_level",
    "pool_per_class", "eval_pool_per_class", "sample_noise_ratio", "frame_noise_count",
    "visual_noise", "visual_noise_strength", "csm_on", "trm_on", "branch", "variant",
    "proto_kind", "lw_on", "seed", "data_seed", "eval_seed", "threads", "checkpoint_every",
    "out_dir",
};

struct CfgCli {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        for (const char* key : kConfigKeys) {
            const std::string flag = std::string("--") + key;
            cmd->add_option_function<std::string>(
                flag,
                [this, key](const std::string& v) { overrides.emplace_back(key, v); },
                std::string("override config field ") + key);
        }
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) {
            cfg = load_config(config_path);
        }
        for (const auto& [k, v] : overrides) {
            cfg.set_field(k, v);
        }
        cfg.validate();
        return cfg;
    }
};

int cmd_gen_data(const RunConfig& cfg, int per_class, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    Pool pool = make_pool(cfg.synth(), per_class, substream(cfg.data_seed, 0x7121));
    std::vector<std::pair<std::string, int>> manifest;
    for (int cls = 0; cls < pool.classes(); ++cls) {
        for (int i = 0; i < per_class; ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "clip_c%d_%03d.otv", cls, i);
            const std::string path = (std::filesystem::path(out_dir) / name).string();
            write_otv(path, pool.by_class[static_cast<size_t>(cls)][static_cast<size_t>(i)]);
            manifest.emplace_back(path, cls);
        }
    }
    const std::string mpath = (std::filesystem::path(out_dir) / "manifest.txt").string();
    write_manifest(mpath, manifest);
    std::printf("wrote %zu clips and %s\n", manifest.size(), mpath.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& resume) {
    std::filesystem::create_directories(cfg.out_dir);
    OtterModel model = cfg.make_model();
    uint64_t start = 0;
    if (!resume.empty()) {
        auto info = load_checkpoint(resume, model);
        check(info.config_hash == cfg.hash(), "train",
              "checkpoint was produced under a different config");
        start = info.episode_counter;
        std::printf("resuming from %s at episode %llu\n", resume.c_str(),
                    static_cast<unsigned long long>(start));
    }
    Pool pool = train_pool(cfg);
    TrainResult tr = train(model, cfg, pool, start);
    const auto out = std::filesystem::path(cfg.out_dir);
    save_checkpoint((out / "final.otck").string(), model, cfg.hash(), tr.episodes_run);
    write_loss_trace((out / "loss_trace.txt").string(), tr.loss_trace);
    double head = 0.0, tail = 0.0;
    const size_t n = tr.loss_trace.size();
    for (size_t i = 0; i < n; ++i) {
        (i < n / 4 ? head : tail) += tr.loss_trace[i];
    }
    std::printf("trained %llu episodes; mean loss first-quarter %.4f, rest %.4f\n",
                static_cast<unsigned long long>(tr.episodes_run),
                n ? head / std::max<size_t>(1, n / 4) : 0.0,
                n ? tail / std::max<size_t>(1, n - n / 4) : 0.0);
    std::printf("checkpoint: %s\n", (out / "final.otck").string().c_str());
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt) {
    OtterModel model = cfg.make_model();
    if (!ckpt.empty()) {
        load_checkpoint(ckpt, model);
    }
    Pool pool = eval_pool(cfg);
    EvalResult ev = evaluate(model, cfg, pool);
    std::printf("accuracy %.2f%% +- %.2f (95%% CI, %d tasks)\n", 100.0 * ev.accuracy,
                100.0 * ev.ci95, ev.tasks);
    return 0;
}

int cmd_ablate(const RunConfig& base, int seeds) {
    struct Row {
        const char* name;
        bool csm, trm;
        std::string branch;
    };
    const Row rows[] = {
        {"both-off", false, false, "both"},
        {"csm-only", true, false, "both"},
        {"trm-only", false, true, "both"},
        {"both-on", true, true, "both"},
        {"ordered-only", true, true, "ordered"},
        {"reversed-only", true, true, "reversed"},
    };
    std::printf("%-14s %-10s\n", "config", "accuracy (per seed)");
    for (const Row& r : rows) {
        std::printf("%-14s", r.name);
        for (int s = 0; s < seeds; ++s) {
            RunConfig cfg = base;
            cfg.csm_on = r.csm;
            cfg.trm_on = r.trm;
            cfg.branch = r.branch;
            cfg.seed = base.seed + static_cast<uint64_t>(s);
            cfg.data_seed = base.data_seed + static_cast<uint64_t>(s);
            ExperimentResult res = run_experiment(cfg);
            std::printf(" %6.2f%%", 100.0 * res.accuracy);
            std::fflush(stdout);
        }
        std::printf("\n");
    }
    return 0;
}

int cmd_bench_wkv(const std::vector<int>& Ts, int C, int reps, const std::string& out_path) {
    auto rows = bench_wkv(Ts, C, reps);
    if (out_path.empty()) {
        print_bench_table(rows, stdout);
    } else {
        std::FILE* f = std::fopen(out_path.c_str(), "w");
        check(f != nullptr, "bench-wkv", "cannot open " + out_path);
        print_bench_table(rows, f);
        std::fclose(f);
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

int cmd_oracle_check(int instances, uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < instances; ++i) {
        const int T = 1 + static_cast<int>(rng.below(64));
        const int C = 1 + static_cast<int>(rng.below(16));
        Tensor k({T, C}), v({T, C}), w({C}), u({C});
        for (size_t j = 0; j < k.size(); ++j) {
            k.at(j) = static_cast<float>(rng.normal(0.0, 1.5));
            v.at(j) = static_cast<float>(rng.normal(0.0, 1.0));
        }
        for (int c = 0; c < C; ++c) {
            w.at(static_cast<size_t>(c)) = static_cast<float>(rng.normal(0.0, 1.0));
            u.at(static_cast<size_t>(c)) = static_cast<float>(rng.normal(0.0, 1.0));
        }
        const bool bidir = i % 2 == 1;
        Tensor fast = bidir ? wkv_bidirectional_run(k, v, w, u) : wkv_causal_run(k, v, w, u);
        Tensor slow = bidir ? wkv_bidirectional_oracle(k, v, w, u) : wkv_causal_oracle(k, v, w, u);
        double diff = 0.0, scale = 1e-12;
        for (size_t j = 0; j < fast.size(); ++j) {
            diff = std::max(diff, std::abs(static_cast<double>(fast.at(j)) - slow.at(j)));
            scale = std::max({scale, std::abs(static_cast<double>(fast.at(j))),
                              std::abs(static_cast<double>(slow.at(j)))});
        }
        worst = std::max(worst, diff / scale);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%d instances, worst relative error %.3g, %.2f s\n", instances, worst, secs);
    const bool ok = worst <= 1e-5;
    std::printf("%s\n", ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}

int cmd_export_saliency(const RunConfig& cfg, const std::string& ckpt, int label,
                        uint64_t sample_seed, const std::string& out_dir) {
    OtterModel model = cfg.make_model();
    if (!ckpt.empty()) {
        load_checkpoint(ckpt, model);
    }
    std::filesystem::create_directories(out_dir);
    VideoSample s = synth_generate(cfg.synth(), label, sample_seed);
    auto st = export_saliency(model, cfg, s, out_dir);
    std::printf("wrote %d frames to %s; mean lw inside subject %.4f, outside %.4f\n",
                cfg.frames, out_dir.c_str(), st.mean_inside, st.mean_outside);
    return 0;
}

int cmd_dtw_trace(const RunConfig& cfg, const std::string& ckpt, int episodes) {
    OtterModel model = cfg.make_model();
    if (!ckpt.empty()) {
        load_checkpoint(ckpt, model);
    }
    Pool pool = eval_pool(cfg);
    const double score = dtw_probe(model, cfg, pool, episodes, substream(cfg.eval_seed, 0xd7));
    std::printf("mean query-to-true-prototype DTW over %d episodes: %.4f\n", episodes, score);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Otter: RWKV-based few-shot action recognition at desk scale"};
    app.require_subcommand(1);

    CfgCli gen_cfg, train_cfg, eval_cfg, abl_cfg, sal_cfg, dtw_cfg;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic clip dataset (.otv + manifest)");
    gen_cfg.attach(gen);
    int gen_per_class = 16;
    std::string gen_out = "dataset";
    gen->add_option("--per-class", gen_per_class, "clips per motion class");
    gen->add_option("--out", gen_out, "output directory");

    auto* tr = app.add_subcommand("train", "train a model on the synthetic benchmark");
    train_cfg.attach(tr);
    std::string resume;
    tr->add_option("--resume", resume, "checkpoint to resume from");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on random tasks");
    eval_cfg.attach(ev);
    std::string eval_ckpt;
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint path (fresh init if omitted)");

    auto* ab = app.add_subcommand("ablate", "run the component/direction ablation grid");
    abl_cfg.attach(ab);
    int abl_seeds = 1;
    ab->add_option("--seeds", abl_seeds, "number of seeds per grid cell");

    auto* bw = app.add_subcommand("bench-wkv", "time the streaming kernel against the oracle");
    std::vector<int> bench_T = {256, 512, 1024, 2048};
    int bench_C = 8, bench_reps = 5;
    std::string bench_out;
    bw->add_option("--T", bench_T, "ascending sequence lengths");
    bw->add_option("--C", bench_C, "channels");
    bw->add_option("--reps", bench_reps, "repetitions (min is reported)");
    bw->add_option("--out", bench_out, "write the table to a file instead of stdout");

    auto* oc = app.add_subcommand("oracle-check", "compare streaming WKV against direct summation");
    int oc_instances = 1000;
    uint64_t oc_seed = 7;
    oc->add_option("--instances", oc_instances, "random instances");
    oc->add_option("--seed", oc_seed, "rng seed");

    auto* es = app.add_subcommand("export-saliency", "write CSM saliency maps as PGM files");
    sal_cfg.attach(es);
    std::string sal_ckpt, sal_out = "saliency";
    int sal_label = 1;
    uint64_t sal_seed = 11;
    es->add_option("--checkpoint", sal_ckpt, "checkpoint path");
    es->add_option("--label", sal_label, "motion class id 0..7");
    es->add_option("--sample-seed", sal_seed, "generator seed");
    es->add_option("--out", sal_out, "output directory");

    auto* dt = app.add_subcommand("dtw-trace", "query-to-prototype DTW of a checkpoint");
    dtw_cfg.attach(dt);
    std::string dtw_ckpt;
    int dtw_episodes = 50;
    dt->add_option("--checkpoint", dtw_ckpt, "checkpoint path");
    dt->add_option("--episodes", dtw_episodes, "probe episodes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_gen_data(gen_cfg.resolve(), gen_per_class, gen_out);
        }
        if (tr->parsed()) {
            return cmd_train(train_cfg.resolve(), resume);
        }
        if (ev->parsed()) {
            return cmd_eval(eval_cfg.resolve(), eval_ckpt);
        }
        if (ab->parsed()) {
            return cmd_ablate(abl_cfg.resolve(), abl_seeds);
        }
        if (bw->parsed()) {
            return cmd_bench_wkv(bench_T, bench_C, bench_reps, bench_out);
        }
        if (oc->parsed()) {
            return cmd_oracle_check(oc_instances, oc_seed);
        }
        if (es->parsed()) {
            return cmd_export_saliency(sal_cfg.resolve(), sal_ckpt, sal_label, sal_seed, sal_out);
        }
        if (dt->parsed()) {
            return cmd_dtw_trace(dtw_cfg.resolve(), dtw_ckpt, dtw_episodes);
        }
    } catch (const OtterError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
