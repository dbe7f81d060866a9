// vseg: verification, training, evaluation, ablation and benchmarking for the
// volumetric segmentation kernels.
//
// Exit codes: 0 success, 1 runtime/verification failure, 2 usage/config error.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>

#include <vseg/config.hpp>
#include <vseg/gradcheck.hpp>
#include <vseg/train.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace vseg;

namespace {

constexpr double kGradTol = 1e-4;

struct GradcheckContext {
    uint64_t seed = 11;
    double eps = 1e-4;
    bool corrupt = false;
};

// f64 fixtures for each module's operator family; prints one PASS/FAIL line
// per parameter group
bool gradcheck_onsampling(const GradcheckContext& ctx) {
    Rng rng(ctx.seed);
    OnsamplingConfig cfg;
    cfg.c_in = 2;
    auto p = OnsamplingParams<double>::init(cfg, rng, "onsampling", /*zero_init=*/false);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 3, 3, 3}, rng));
    // keep the final coordinates away from the integer lattice
    for (int attempt = 0; attempt < 32; ++attempt) {
        Tape<double> t;
        auto xx = t.param(x);
        auto offs = offset_branch(t, xx, cfg, p);
        auto s = add(t, offs.coords, base_grid<double>(t, 2, 1, 6, 6, 6).coords);
        bool ok = true;
        for (int64_t i = 0; i < t.val(s).numel() && ok; ++i) {
            const double v = t.val(s)[i];
            ok = std::abs(v - std::round(v)) > 1e-3;
        }
        if (ok) break;
        x.value = random_normal<double>(Shape{1, 2, 3, 3, 3}, rng);
    }
    auto build = [&](Tape<double>& t) {
        auto y = onsample_forward(t, t.param(x), cfg, p);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        for (auto* q : p.all()) q->zero_grad();
        Tape<double> t;
        t.backward(build(t));
        if (ctx.corrupt) p.encode_w.grad[0] += 1.0;
    };
    auto rep = finite_difference_check<double>(fwd, acc,
                                               {{"x", &x},
                                                {"conv1", &p.offset1_w},
                                                {"conv2", &p.offset2_w},
                                                {"compress", &p.compress_w},
                                                {"encode", &p.encode_w}},
                                               {ctx.eps, 24, ctx.seed});
    rep.print(stdout, kGradTol);
    return rep.pass(kGradTol);
}

bool gradcheck_scp_ag(const GradcheckContext& ctx) {
    Rng rng(ctx.seed);
    auto p = ScpAgParams<double>::init(4, rng, "scp_ag");
    Parameter<double> chi("chi", random_normal<double>(Shape{1, 4, 3, 3, 3}, rng));
    Parameter<double> lam("lam", random_normal<double>(Shape{1, 4, 3, 3, 3}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = scp_ag_apply(t, t.param(chi), t.param(lam), p);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        chi.zero_grad();
        lam.zero_grad();
        for (auto* q : p.all()) q->zero_grad();
        Tape<double> t;
        t.backward(build(t));
        if (ctx.corrupt) p.conv_psi_w.grad[0] += 1.0;
    };
    auto rep = finite_difference_check<double>(fwd, acc,
                                               {{"conv_chi", &p.conv_chi_w},
                                                {"conv_lam", &p.conv_lam_w},
                                                {"conv_psi", &p.conv_psi_w},
                                                {"linear_chi", &p.linear_chi_w},
                                                {"linear_lam", &p.linear_lam_w},
                                                {"chi", &chi},
                                                {"lam", &lam}},
                                               {ctx.eps, 24, ctx.seed});
    rep.print(stdout, kGradTol);
    return rep.pass(kGradTol);
}

bool gradcheck_dsa(const GradcheckContext& ctx) {
    Rng rng(ctx.seed);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa");
    // off the integer-lattice operating point for the deformable sampling
    for (int64_t i = 0; i < p.deform.offset_b.numel(); ++i)
        p.deform.offset_b.value[i] = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.30, 0.40);
    for (int64_t i = 0; i < p.deform.offset_w.numel(); ++i) p.deform.offset_w.value[i] = 0.001 * rng.normal();
    Parameter<double> x("x", random_normal<double>(Shape{1, 4, 6, 6, 6}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = dsa_forward(t, t.param(x), p);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        for (auto* q : p.all()) q->zero_grad();
        Tape<double> t;
        t.backward(build(t));
        if (ctx.corrupt) p.fuse_w.grad[0] += 1.0;
    };
    auto rep = finite_difference_check<double>(fwd, acc,
                                               {{"x", &x},
                                                {"fuse", &p.fuse_w},
                                                {"deform_weight", &p.deform.weight},
                                                {"offset_predictor", &p.deform.offset_w},
                                                {"attn1", &p.attn1_w},
                                                {"attn2", &p.attn2_w}},
                                               {ctx.eps, 20, ctx.seed});
    rep.print(stdout, kGradTol);
    return rep.pass(kGradTol);
}

bool gradcheck_losses(const GradcheckContext& ctx) {
    Rng rng(ctx.seed);
    LabelVolume labels(1, 4, 4, 4, 2);
    for (auto& v : labels.values) v = uint16_t(rng.uniform_int(0, 1));
    Parameter<double> logits("logits", random_normal<double>(Shape{1, 2, 4, 4, 4}, rng));
    bool all_pass = true;
    for (bool dice : {true, false}) {
        auto build = [&](Tape<double>& t) {
            auto probs = softmax_axis(t, t.param(logits), 1);
            return dice ? dice_loss(t, probs, labels) : cross_entropy_loss(t, probs, labels);
        };
        auto fwd = [&]() {
            Tape<double> t;
            return t.scalar(build(t));
        };
        auto acc = [&]() {
            logits.zero_grad();
            Tape<double> t;
            t.backward(build(t));
            if (ctx.corrupt) logits.grad[0] += 1.0;
        };
        auto rep = finite_difference_check<double>(
            fwd, acc, {{dice ? "dice_loss/logits" : "cross_entropy/logits", &logits}}, {ctx.eps, 32, ctx.seed});
        rep.print(stdout, kGradTol);
        all_pass = all_pass && rep.pass(kGradTol);
    }
    return all_pass;
}

int cmd_gradcheck(const std::string& module, const GradcheckContext& ctx) {
    bool pass = true;
    if (module == "onsampling" || module == "all") pass = gradcheck_onsampling(ctx) && pass;
    if (module == "scp_ag" || module == "all") pass = gradcheck_scp_ag(ctx) && pass;
    if (module == "dsa" || module == "all") pass = gradcheck_dsa(ctx) && pass;
    if (module == "losses" || module == "all") pass = gradcheck_losses(ctx) && pass;
    std::printf("gradcheck %s: %s\n", module.c_str(), pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
}

void set_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir, bool resume) {
    set_threads(cfg.train.threads);
    auto model = build_model<float>(cfg.model, cfg.train.model_seed);
    std::printf("model: %lld parameters, %s + %s + %s\n", (long long)model.parameter_count(),
                to_string(cfg.model.upsampler), to_string(cfg.model.gate), to_string(cfg.model.decoder_block));
    PhantomSpec phantom = cfg.phantom;
    auto res = train(model, phantom, cfg.train, out_dir, resume);
    if (res.aborted_nonfinite) {
        std::fprintf(stderr, "train: non-finite loss; aborted with last good checkpoint retained\n");
        return 1;
    }
    std::printf("train: %zu epochs logged, final mean foreground dice %.4f\n", res.log.size(), res.final_mean_dice);
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    std::printf("log: %s\n", (fs::path(out_dir) / "train_log.csv").string().c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir, uint64_t phantom_seed, int volumes,
             const std::string& report, const std::string& save_dir, const RunConfig& cfg) {
    set_threads(cfg.train.threads);
    Checkpoint ckpt = read_checkpoint(checkpoint_path);
    ModelConfig mc = extract_model_config<ModelConfig>(ckpt);
    auto model = build_model<float>(mc, 0);
    auto params = model.named_parameters();
    AdamW<float> opt;
    load_checkpoint(ckpt, params, opt);

    std::vector<std::pair<std::string, PhantomSample<float>>> data;
    if (!data_dir.empty()) {
        std::vector<std::string> ids;
        for (const auto& e : fs::directory_iterator(data_dir)) {
            const std::string name = e.path().filename().string();
            const std::string suffix = "_image.vseg";
            if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix)
                ids.push_back(name.substr(0, name.size() - suffix.size()));
        }
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
            PhantomSample<float> s;
            s.image = read_volume((fs::path(data_dir) / (id + "_image.vseg")).string()).to_image();
            s.labels = read_volume((fs::path(data_dir) / (id + "_labels.vseg")).string()).to_labels(mc.num_classes);
            data.emplace_back(id, std::move(s));
        }
        if (data.empty()) throw std::runtime_error("eval: no *_image.vseg volumes in " + data_dir);
    } else {
        PhantomSpec spec = cfg.phantom;
        for (int i = 0; i < volumes; ++i) {
            spec.seed = vseg::detail::mix_seed(phantom_seed, uint64_t(i));
            data.emplace_back("phantom" + std::to_string(i), generate_phantom<float>(spec));
        }
    }

    auto rows = evaluate_volumes(model, data, mc.patch_size);
    write_metric_csv(report, rows);
    std::printf("eval: %zu rows written to %s\n", rows.size(), report.c_str());

    if (!save_dir.empty()) {
        fs::create_directories(save_dir);
        for (const auto& [id, sample] : data) {
            write_volume((fs::path(save_dir) / (id + "_image.vseg")).string(), VolumeFile::from_image(sample.image));
            write_volume((fs::path(save_dir) / (id + "_labels.vseg")).string(),
                         VolumeFile::from_labels(sample.labels));
            auto pred = argmax_labels(sliding_window_logits(model, sample.image, mc.patch_size));
            write_volume((fs::path(save_dir) / (id + "_pred.vseg")).string(), VolumeFile::from_labels(pred));
        }
        std::printf("volumes: %zu triples written to %s\n", data.size(), save_dir.c_str());
    }
    return 0;
}

int cmd_ablate(const std::string& axis, const RunConfig& cfg, const std::string& out_dir, const std::string& report) {
    set_threads(cfg.train.threads);
    auto rows = ablate<float>(ablation_axis_from_string(axis), cfg.model, cfg.phantom, cfg.train, out_dir);
    write_ablation_csv(report, rows, cfg.model.num_classes);
    std::printf("%-18s", "variant");
    for (int c = 1; c < cfg.model.num_classes; ++c) std::printf(" dice_c%d", c);
    std::printf(" mean_dice mean_hd95\n");
    for (const auto& r : rows) {
        std::printf("%-18s", r.variant.c_str());
        for (double d : r.dice) std::printf(" %7.4f", d);
        std::printf("  %7.4f", r.mean_dice);
        if (r.mean_hd)
            std::printf(" %9.4f\n", *r.mean_hd);
        else
            std::printf("       nan\n");
    }
    std::printf("ablate: report written to %s\n", report.c_str());
    return 0;
}

int cmd_bench(const std::string& op, const std::string& size_str, int reps, int threads) {
    set_threads(threads);
    std::vector<int64_t> dims;
    {
        std::istringstream ss(size_str);
        std::string part;
        while (std::getline(ss, part, ',')) dims.push_back(std::stoll(part));
    }
    if (dims.size() == 4) dims.insert(dims.begin(), 1);  // C,D,H,W -> N=1
    if (dims.size() != 5) throw ConfigError("bench: --size expects N,C,D,H,W or C,D,H,W");
    const int64_t N = dims[0], C = dims[1], D = dims[2], H = dims[3], W = dims[4];
    Rng rng(1);
    Tensor<float> x = random_normal<float>(Shape{N, C, D, H, W}, rng);

    std::function<void()> run;
    if (op == "conv3d") {
        auto w = random_normal<float>(Shape{C, C, 3, 3, 3}, rng, 0.2);
        auto b = Tensor<float>(Shape{C});
        run = [=]() mutable {
            Tape<float> t(false);
            conv3d(t, t.input(x), t.input(w), t.input(b), Conv3dSpec::cubic(int(C), int(C), 3, 1, 1));
        };
    } else if (op == "deform_conv3d") {
        auto p = DeformConv3dParams<float>::init(int(C), int(C), 3, rng, "bench");
        run = [=]() mutable {
            Tape<float> t(false);
            deform_conv3d_predicted(t, t.input(x), p);
        };
    } else if (op == "onsample_forward") {
        OnsamplingConfig ocfg;
        ocfg.c_in = int(C);
        auto p = OnsamplingParams<float>::init(ocfg, rng, "bench", false);
        run = [=]() mutable {
            Tape<float> t(false);
            onsample_forward(t, t.input(x), ocfg, p);
        };
    } else if (op == "trilinear_upsample") {
        run = [=]() mutable {
            Tape<float> t(false);
            trilinear_upsample(t, t.input(x), 2);
        };
    } else if (op == "scp_ag_apply") {
        auto p = ScpAgParams<float>::init(int(C), rng, "bench");
        auto lam = random_normal<float>(Shape{N, C, D, H, W}, rng);
        run = [=]() mutable {
            Tape<float> t(false);
            scp_ag_apply(t, t.input(x), t.input(lam), p);
        };
    } else if (op == "dsa_forward") {
        if (C % 2 != 0) throw ConfigError("bench: dsa_forward needs an even channel count");
        auto p = DsaParams<float>::init(int(C), int(C / 2), rng, "bench");
        run = [=]() mutable {
            Tape<float> t(false);
            dsa_forward(t, t.input(x), p);
        };
    } else {
        throw ConfigError("bench: unknown op '" + op +
                          "' (conv3d, deform_conv3d, onsample_forward, trilinear_upsample, scp_ag_apply, dsa_forward)");
    }

    run();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) run();
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double voxels = double(N * D * H * W) * reps;
    std::printf("%s on [%lld,%lld,%lld,%lld,%lld]: %.3f ms/rep, %.3g voxels/sec\n", op.c_str(), (long long)N,
                (long long)C, (long long)D, (long long)H, (long long)W, dt / reps * 1e3, voxels / dt);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"volumetric segmentation kernels: verification, training, evaluation"};
    app.require_subcommand(1);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of the operator gradients");
    std::string gc_module = "all";
    GradcheckContext gc_ctx;
    gc->add_option("--module", gc_module, "onsampling|scp_ag|dsa|losses|all")
        ->check(CLI::IsMember({"onsampling", "scp_ag", "dsa", "losses", "all"}));
    gc->add_option("--seed", gc_ctx.seed, "rng seed");
    gc->add_option("--eps", gc_ctx.eps, "base finite-difference step");
    gc->add_flag("--corrupt", gc_ctx.corrupt, "test fixture: corrupt one analytic gradient")->group("");

    // train
    auto* tr = app.add_subcommand("train", "train a model on synthetic phantom volumes");
    std::string tr_config, tr_out = "runs/train";
    bool tr_resume = false;
    RunConfig run_cfg;
    tr->add_option("--config", tr_config, "key = value config file ([model]/[train]/[data] sections)");
    tr->add_option("--out-dir", tr_out, "output directory for checkpoints and logs");
    tr->add_flag("--resume", tr_resume, "resume from <out-dir>/checkpoint.vskp");
    int ov_epochs = -1, ov_threads = -1, ov_patch = -1, ov_base = -1;
    double ov_lr = -1;
    uint64_t ov_seed = 0, ov_data_seed = 0;
    bool has_seed = false, has_data_seed = false;
    std::string ov_upsampler, ov_gate, ov_block;
    tr->add_option("--epochs", ov_epochs, "override train.epochs");
    tr->add_option("--lr", ov_lr, "override train.lr_initial");
    tr->add_option("--threads", ov_threads, "override train.threads");
    tr->add_option("--patch", ov_patch, "override model.patch_size");
    tr->add_option("--base-channels", ov_base, "override model.base_channels");
    tr->add_option("--seed", ov_seed, "override train.model_seed")->trigger_on_parse();
    tr->add_option("--data-seed", ov_data_seed, "override train.data_seed");
    tr->add_option("--upsampler", ov_upsampler, "override model.upsampler");
    tr->add_option("--gate", ov_gate, "override model.gate");
    tr->add_option("--decoder-block", ov_block, "override model.decoder_block");
    tr->footer("Default configuration (every key accepted in --config):\n" + config_text(RunConfig{}));

    // eval
    auto* ev = app.add_subcommand("eval", "sliding-window inference and dice/hd95 report");
    std::string ev_ckpt, ev_data_dir, ev_report = "report.csv", ev_save;
    uint64_t ev_phantom_seed = 1234;
    int ev_volumes = 2;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file (.vskp)")->required();
    ev->add_option("--data-dir", ev_data_dir, "directory of <id>_image.vseg / <id>_labels.vseg pairs");
    ev->add_option("--phantom-seed", ev_phantom_seed, "generate phantom volumes from this seed instead");
    ev->add_option("--volumes", ev_volumes, "number of generated phantom volumes");
    ev->add_option("--report", ev_report, "output CSV path");
    ev->add_option("--save-volumes", ev_save, "write image/labels/pred .vseg triples here");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and compare variants along one axis");
    std::string ab_axis, ab_config, ab_out = "runs/ablate", ab_report;
    ab->add_option("--axis", ab_axis, "upsampler|gate|decoder")
        ->required()
        ->check(CLI::IsMember({"upsampler", "gate", "decoder"}));
    ab->add_option("--config", ab_config, "run configuration file");
    ab->add_option("--out-dir", ab_out, "output directory (one subdirectory per variant)");
    ab->add_option("--report", ab_report, "output CSV path (default <out-dir>/ablation_<axis>.csv)");

    // bench
    auto* be = app.add_subcommand("bench", "wall-time a named operator");
    std::string be_op, be_size = "1,8,32,32,32";
    int be_reps = 5, be_threads = 0;
    be->add_option("--op", be_op, "operator name")->required();
    be->add_option("--size", be_size, "input size N,C,D,H,W (or C,D,H,W)");
    be->add_option("--reps", be_reps, "repetitions");
    be->add_option("--threads", be_threads, "0 = runtime default");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (gc->parsed()) return cmd_gradcheck(gc_module, gc_ctx);
        if (tr->parsed() || ab->parsed()) {
            const std::string config_path = tr->parsed() ? tr_config : ab_config;
            if (!config_path.empty()) run_cfg = parse_config_file(config_path);
            if (ov_epochs >= 0) run_cfg.train.epochs = ov_epochs;
            if (ov_lr >= 0) run_cfg.train.lr_initial = ov_lr;
            if (ov_threads >= 0) run_cfg.train.threads = ov_threads;
            if (ov_patch > 0) run_cfg.model.patch_size = ov_patch;
            if (ov_base > 0) run_cfg.model.base_channels = ov_base;
            if (tr->count("--seed")) run_cfg.train.model_seed = ov_seed;
            if (tr->count("--data-seed")) run_cfg.train.data_seed = ov_data_seed;
            if (!ov_upsampler.empty()) run_cfg.model.upsampler = upsampler_from_string(ov_upsampler);
            if (!ov_gate.empty()) run_cfg.model.gate = gate_from_string(ov_gate);
            if (!ov_block.empty()) run_cfg.model.decoder_block = decoder_block_from_string(ov_block);
            if (run_cfg.phantom.extent_d < run_cfg.model.patch_size)
                run_cfg.phantom.extent_d = run_cfg.phantom.extent_h = run_cfg.phantom.extent_w =
                    run_cfg.model.patch_size;
            run_cfg.model.validate();
            if (tr->parsed()) return cmd_train(run_cfg, tr_out, tr_resume);
            const std::string report = ab_report.empty()
                                           ? (fs::path(ab_out) / ("ablation_" + ab_axis + ".csv")).string()
                                           : ab_report;
            fs::create_directories(ab_out);
            return cmd_ablate(ab_axis, run_cfg, ab_out, report);
        }
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data_dir, ev_phantom_seed, ev_volumes, ev_report, ev_save,
                                          run_cfg);
        if (be->parsed()) return cmd_bench(be_op, be_size, be_reps, be_threads);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const io::VolumeIoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.kind() == io::VolumeError::io_failure ? 2 : 1;  // bad path vs corrupt content
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
