#pragma once

#include <filesystem>

#include "checkpoint.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "phantom.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vseg {

struct TrainOptions {
    int epochs = 200;
    int batch_size = 2;
    double lr_initial = 3e-4;
    int warmup_epochs = 10;  // paper-scale default is 50 of 1000 epochs
    double weight_decay = 3e-5;
    uint64_t model_seed = 1;
    uint64_t data_seed = 42;
    int train_volumes = 4;
    int val_volumes = 2;
    int checkpoint_every = 50;
    int threads = 0;  // 0 = runtime default
    // Simulated interruption: stop (with a checkpoint) after this epoch while
    // keeping the full-length schedule; -1 runs to completion.
    int stop_after = -1;

    ScheduleState schedule(int64_t epoch) const {
        ScheduleState s;
        s.e_cur = epoch;
        s.e_warmup = warmup_epochs;
        s.e_max = epochs;
        s.l_initial = lr_initial;
        return s;
    }
};

struct EpochRow {
    int64_t epoch = 0;
    double lr = 0;
    double total_loss = 0;
    std::vector<double> fg_dice;  // classes 1..C-1
    double mean_dice = 0;
};

struct TrainResult {
    std::vector<EpochRow> log;
    std::string checkpoint_path;
    bool aborted_nonfinite = false;
    double final_mean_dice = 0;
};

namespace detail {

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97f4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& imgs) {
    const Shape s0 = imgs[0]->shape;
    Tensor<T> out(Shape{int64_t(imgs.size()), s0[1], s0[2], s0[3], s0[4]});
    const int64_t per = s0.numel();
    for (size_t i = 0; i < imgs.size(); ++i)
        std::copy(imgs[i]->data.begin(), imgs[i]->data.end(), out.data.begin() + int64_t(i) * per);
    return out;
}

inline LabelVolume stack_labels(const std::vector<const LabelVolume*>& ls) {
    LabelVolume out(int64_t(ls.size()), ls[0]->d, ls[0]->h, ls[0]->w, ls[0]->num_classes);
    const int64_t per = ls[0]->voxels_per_sample();
    for (size_t i = 0; i < ls.size(); ++i)
        std::copy(ls[i]->values.begin(), ls[i]->values.end(), out.values.begin() + int64_t(i) * per);
    return out;
}

}  // namespace detail

template <typename T>
LabelVolume argmax_labels(const Tensor<T>& logits) {
    if (logits.shape.rank != 5) throw std::invalid_argument("argmax_labels: rank-5 logits expected");
    const int64_t N = logits.shape[0], C = logits.shape[1];
    const int64_t vox = logits.shape[2] * logits.shape[3] * logits.shape[4];
    LabelVolume out(N, logits.shape[2], logits.shape[3], logits.shape[4], int(C));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < vox; ++i) {
            int best = 0;
            T bv = logits[(n * C + 0) * vox + i];
            for (int c = 1; c < C; ++c) {
                const T v = logits[(n * C + c) * vox + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.values[size_t(n * vox + i)] = uint16_t(best);
        }
    return out;
}

// Full-resolution logits of one [1,C,D,H,W] volume. Volumes larger than the
// patch are covered by a sliding window with 50% overlap and uniform mean
// logit fusion.
template <typename T>
Tensor<T> sliding_window_logits(SegModel<T>& model, const Tensor<T>& image, int patch) {
    const int64_t D = image.shape[2], H = image.shape[3], W = image.shape[4];
    auto starts = [&](int64_t extent) {
        std::vector<int64_t> s;
        const int64_t p = std::min<int64_t>(patch, extent);
        const int64_t step = std::max<int64_t>(p / 2, 1);
        for (int64_t x = 0;; x += step) {
            if (x + p >= extent) {
                s.push_back(extent - p);
                break;
            }
            s.push_back(x);
        }
        return s;
    };
    const int64_t pd = std::min<int64_t>(patch, D), ph = std::min<int64_t>(patch, H), pw = std::min<int64_t>(patch, W);
    Tensor<T> fused(Shape{1, model.cfg.num_classes, D, H, W});
    Tensor<T> counts(Shape{D, H, W});
    for (int64_t d0 : starts(D))
        for (int64_t h0 : starts(H))
            for (int64_t w0 : starts(W)) {
                Tensor<T> window(Shape{1, image.shape[1], pd, ph, pw});
                for (int64_t c = 0; c < image.shape[1]; ++c)
                    for (int64_t d = 0; d < pd; ++d)
                        for (int64_t h = 0; h < ph; ++h) {
                            const T* src = image.ptr() + ((c * D + d0 + d) * H + h0 + h) * W + w0;
                            T* dst = window.ptr() + ((c * pd + d) * ph + h) * pw;
                            std::copy(src, src + pw, dst);
                        }
                Tape<T> t(/*grad_enabled=*/false);
                auto logits = model.forward(t, t.input(std::move(window)));
                const auto& top = t.val(logits[0]);
                for (int64_t c = 0; c < model.cfg.num_classes; ++c)
                    for (int64_t d = 0; d < pd; ++d)
                        for (int64_t h = 0; h < ph; ++h) {
                            const T* src = top.ptr() + ((c * pd + d) * ph + h) * pw;
                            T* dst = fused.ptr() + ((c * D + d0 + d) * H + h0 + h) * W + w0;
                            for (int64_t w = 0; w < pw; ++w) dst[w] += src[w];
                        }
                for (int64_t d = 0; d < pd; ++d)
                    for (int64_t h = 0; h < ph; ++h) {
                        T* cnt = counts.ptr() + ((d0 + d) * H + h0 + h) * W + w0;
                        for (int64_t w = 0; w < pw; ++w) cnt[w] += T(1);
                    }
            }
    for (int64_t c = 0; c < model.cfg.num_classes; ++c)
        for (int64_t i = 0; i < D * H * W; ++i) fused[c * D * H * W + i] /= counts[i];
    return fused;
}

template <typename T>
struct PhantomSet {
    std::vector<PhantomSample<T>> train, val;
};

// Training volumes keep the spec extent (patches are cropped from them);
// held-out volumes are generated at patch size so per-epoch validation is a
// single forward pass.
template <typename T>
PhantomSet<T> make_phantom_set(const PhantomSpec& base, const TrainOptions& opt, int patch) {
    PhantomSet<T> set;
    PhantomSpec train_spec = base;
    train_spec.extent_d = std::max<int64_t>(base.extent_d, patch);
    train_spec.extent_h = std::max<int64_t>(base.extent_h, patch);
    train_spec.extent_w = std::max<int64_t>(base.extent_w, patch);
    for (int i = 0; i < opt.train_volumes; ++i) {
        train_spec.seed = detail::mix_seed(opt.data_seed, uint64_t(i));
        set.train.push_back(generate_phantom<T>(train_spec));
    }
    PhantomSpec val_spec = base;
    val_spec.extent_d = val_spec.extent_h = val_spec.extent_w = patch;
    for (int j = 0; j < opt.val_volumes; ++j) {
        val_spec.seed = detail::mix_seed(opt.data_seed, 0x10000ull + uint64_t(j));
        set.val.push_back(generate_phantom<T>(val_spec));
    }
    return set;
}

namespace detail {

// random patch crop, shared offsets for image and labels
template <typename T>
PhantomSample<T> crop_sample(const PhantomSample<T>& s, int patch, Rng& rng) {
    const int64_t D = s.image.shape[2], H = s.image.shape[3], W = s.image.shape[4];
    if (D == patch && H == patch && W == patch) return s;
    const int64_t d0 = rng.uniform_int(0, D - patch), h0 = rng.uniform_int(0, H - patch),
                  w0 = rng.uniform_int(0, W - patch);
    PhantomSample<T> out;
    out.image = Tensor<T>(Shape{1, 1, patch, patch, patch});
    out.labels = LabelVolume(1, patch, patch, patch, s.labels.num_classes);
    for (int64_t d = 0; d < patch; ++d)
        for (int64_t h = 0; h < patch; ++h) {
            const T* src = s.image.ptr() + ((d0 + d) * H + h0 + h) * W + w0;
            std::copy(src, src + patch, out.image.ptr() + (d * patch + h) * patch);
            const uint16_t* ls = s.labels.values.data() + ((d0 + d) * H + h0 + h) * W + w0;
            std::copy(ls, ls + patch, out.labels.values.data() + (d * patch + h) * patch);
        }
    return out;
}

}  // namespace detail

// per-class foreground dice of the validation split at full resolution
template <typename T>
std::vector<double> validation_dice(SegModel<T>& model, const PhantomSet<T>& data) {
    const int classes = model.cfg.num_classes;
    std::vector<double> acc(size_t(classes - 1), 0.0);
    for (const auto& sample : data.val) {
        Tape<T> t(/*grad_enabled=*/false);
        auto logits = model.forward(t, t.input(sample.image));
        auto pred = argmax_labels(t.val(logits[0]));
        for (int c = 1; c < classes; ++c) acc[size_t(c - 1)] += dice_score(pred, sample.labels, c);
    }
    for (auto& v : acc) v /= double(data.val.size());
    return acc;
}

inline void write_train_log_csv(const std::string& path, const std::vector<EpochRow>& rows, int classes) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,lr,total_loss";
    for (int c = 1; c < classes; ++c) out << ",dice_c" << c;
    out << ",mean_dice\n";
    char buf[64];
    for (const auto& r : rows) {
        out << r.epoch;
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g", r.lr, r.total_loss);
        out << buf;
        for (double d : r.fg_dice) {
            std::snprintf(buf, sizeof buf, ",%.9g", d);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, ",%.9g\n", r.mean_dice);
        out << buf;
    }
}

template <typename T>
TrainResult train(SegModel<T>& model, const PhantomSpec& phantom, const TrainOptions& opt,
                  const std::string& out_dir, bool resume = false) {
    namespace fs = std::filesystem;
#ifdef _OPENMP
    if (opt.threads > 0) omp_set_num_threads(opt.threads);
#endif
    fs::create_directories(out_dir);
    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.vskp").string();
    const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();

    auto params = model.named_parameters();
    AdamW<T> opt_state;
    opt_state.ensure_state(params);
    int64_t start_epoch = 0;
    if (resume) {
        start_epoch = load_checkpoint(read_checkpoint(ckpt_path), params, opt_state) + 1;
    }

    PhantomSet<T> data = make_phantom_set<T>(phantom, opt, model.cfg.patch_size);
    const int classes = model.cfg.num_classes;
    const int patch = model.cfg.patch_size;

    TrainResult result;
    result.checkpoint_path = ckpt_path;

    for (int64_t epoch = start_epoch; epoch < opt.epochs; ++epoch) {
        const double lr = lr_at(opt.schedule(epoch));

        // deterministic per-epoch shuffle
        std::vector<int> order(size_t(opt.train_volumes));
        for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
        Rng shuffle_rng(detail::mix_seed(opt.data_seed ^ 0xABCDull, uint64_t(epoch)));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(0, int64_t(i) - 1))]);

        Rng crop_rng(detail::mix_seed(opt.data_seed ^ 0xC407ull, uint64_t(epoch)));
        double loss_sum = 0.0;
        int64_t batches = 0;
        bool nonfinite = false;
        for (size_t b = 0; b < order.size(); b += size_t(opt.batch_size)) {
            std::vector<PhantomSample<T>> crops;
            std::vector<const Tensor<T>*> imgs;
            std::vector<const LabelVolume*> lbls;
            for (size_t k = b; k < std::min(order.size(), b + size_t(opt.batch_size)); ++k)
                crops.push_back(detail::crop_sample(data.train[size_t(order[k])], patch, crop_rng));
            for (const auto& c : crops) {
                imgs.push_back(&c.image);
                lbls.push_back(&c.labels);
            }
            Tape<T> t;
            auto x = t.input(detail::stack_batch(imgs));
            auto logits = model.forward(t, x);
            auto pyramid = make_pyramid(logits, detail::stack_labels(lbls));
            auto loss = total_loss(t, pyramid);
            const double lv = double(t.scalar(loss));
            if (!std::isfinite(lv)) {
                nonfinite = true;
                break;
            }
            t.backward(loss);
            opt_state.step(params, lr, opt.weight_decay);
            for (auto& [name, p] : params) p->zero_grad();
            loss_sum += lv;
            ++batches;
        }
        if (nonfinite) {
            result.aborted_nonfinite = true;  // last good checkpoint stays on disk
            break;
        }

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.total_loss = batches ? loss_sum / double(batches) : 0.0;
        row.fg_dice = validation_dice(model, data);
        row.mean_dice = 0.0;
        for (double d : row.fg_dice) row.mean_dice += d;
        row.mean_dice /= double(row.fg_dice.size());
        result.log.push_back(row);

        const bool interrupted = opt.stop_after >= 0 && epoch >= opt.stop_after;
        if ((epoch + 1) % opt.checkpoint_every == 0 || epoch + 1 == opt.epochs || interrupted) {
            Checkpoint c = make_checkpoint(params, opt_state, epoch);
            embed_model_config(c, model.cfg);
            write_checkpoint(ckpt_path, c);
        }
        write_train_log_csv(log_path, result.log, classes);
        if (interrupted) break;
    }
    if (!result.log.empty()) result.final_mean_dice = result.log.back().mean_dice;
    return result;
}

// Per-(volume, class) dice and hd95 rows plus an aggregate mean row.
struct MetricRow {
    std::string volume_id;
    int cls = 0;
    double dice = 0;
    std::optional<double> hd;
};

template <typename T>
std::vector<MetricRow> evaluate_volumes(SegModel<T>& model,
                                        const std::vector<std::pair<std::string, PhantomSample<T>>>& volumes,
                                        int patch) {
    std::vector<MetricRow> rows;
    for (const auto& [id, sample] : volumes) {
        auto logits = sliding_window_logits(model, sample.image, patch);
        auto pred = argmax_labels(logits);
        for (int c = 1; c < model.cfg.num_classes; ++c) {
            MetricRow r;
            r.volume_id = id;
            r.cls = c;
            r.dice = dice_score(pred, sample.labels, c);
            auto ps = extract_surface(class_mask(pred, 0, c));
            auto gs = extract_surface(class_mask(sample.labels, 0, c));
            r.hd = hd95(ps, gs);
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

inline void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "volume_id,class,dice,hd95\n";
    char buf[96];
    double dsum = 0.0, hsum = 0.0;
    int64_t hcount = 0;
    for (const auto& r : rows) {
        if (r.hd)
            std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g\n", r.volume_id.c_str(), r.cls, r.dice, *r.hd);
        else
            std::snprintf(buf, sizeof buf, "%s,%d,%.9g,nan\n", r.volume_id.c_str(), r.cls, r.dice);
        out << buf;
        dsum += r.dice;
        if (r.hd) {
            hsum += *r.hd;
            ++hcount;
        }
    }
    if (!rows.empty()) {
        const double hd_mean = hcount ? hsum / double(hcount) : std::nan("");
        std::snprintf(buf, sizeof buf, "mean,all,%.9g,%.9g\n", dsum / double(rows.size()), hd_mean);
        out << buf;
    }
}

// One ablation row: a trained variant's per-class and mean dice / hd95.
struct AblationRow {
    std::string variant;
    std::vector<double> dice;          // classes 1..C-1
    std::vector<std::optional<double>> hd;  // same order
    double mean_dice = 0;
    std::optional<double> mean_hd;
};

template <typename T>
AblationRow run_variant(const std::string& name, const ModelConfig& cfg, const PhantomSpec& phantom,
                        const TrainOptions& opt, const std::string& out_dir) {
    SegModel<T> model = build_model<T>(cfg, opt.model_seed);
    train(model, phantom, opt, out_dir + "/" + name);
    PhantomSet<T> data = make_phantom_set<T>(phantom, opt, cfg.patch_size);
    AblationRow row;
    row.variant = name;
    const int classes = cfg.num_classes;
    std::vector<double> dsum(size_t(classes - 1), 0.0);
    std::vector<double> hsum(size_t(classes - 1), 0.0);
    std::vector<int64_t> hcnt(size_t(classes - 1), 0);
    for (const auto& sample : data.val) {
        Tape<T> t(false);
        auto logits = model.forward(t, t.input(sample.image));
        auto pred = argmax_labels(t.val(logits[0]));
        for (int c = 1; c < classes; ++c) {
            dsum[size_t(c - 1)] += dice_score(pred, sample.labels, c);
            auto hd = hd95(extract_surface(class_mask(pred, 0, c)), extract_surface(class_mask(sample.labels, 0, c)));
            if (hd) {
                hsum[size_t(c - 1)] += *hd;
                ++hcnt[size_t(c - 1)];
            }
        }
    }
    double dmean = 0.0, hmean = 0.0;
    int64_t htotal = 0;
    for (int c = 1; c < classes; ++c) {
        const double d = dsum[size_t(c - 1)] / double(data.val.size());
        row.dice.push_back(d);
        dmean += d;
        if (hcnt[size_t(c - 1)]) {
            row.hd.push_back(hsum[size_t(c - 1)] / double(hcnt[size_t(c - 1)]));
            hmean += *row.hd.back();
            ++htotal;
        } else {
            row.hd.push_back(std::nullopt);
        }
    }
    row.mean_dice = dmean / double(classes - 1);
    if (htotal) row.mean_hd = hmean / double(htotal);
    return row;
}

enum class AblationAxis { upsampler, gate, decoder };

inline AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "upsampler") return AblationAxis::upsampler;
    if (s == "gate") return AblationAxis::gate;
    if (s == "decoder") return AblationAxis::decoder;
    throw std::invalid_argument("unknown ablation axis: " + s);
}

// Trains every variant on one axis with identical seeds and data, holding the
// other two components at the full configuration.
template <typename T>
std::vector<AblationRow> ablate(AblationAxis axis, const ModelConfig& base, const PhantomSpec& phantom,
                                const TrainOptions& opt, const std::string& out_dir) {
    std::vector<AblationRow> rows;
    switch (axis) {
        case AblationAxis::upsampler:
            for (auto k : {UpsamplerKind::trilinear, UpsamplerKind::transposed_conv, UpsamplerKind::subpixel_conv,
                           UpsamplerKind::onsampling}) {
                ModelConfig cfg = base;
                cfg.upsampler = k;
                rows.push_back(run_variant<T>(to_string(k), cfg, phantom, opt, out_dir));
            }
            break;
        case AblationAxis::gate:
            for (auto k : {GateKind::none, GateKind::attention_gate, GateKind::scp_ag}) {
                ModelConfig cfg = base;
                cfg.gate = k;
                rows.push_back(run_variant<T>(to_string(k), cfg, phantom, opt, out_dir));
            }
            break;
        case AblationAxis::decoder:
            for (auto k : {DecoderBlockKind::basic, DecoderBlockKind::residual, DecoderBlockKind::basic_deform,
                           DecoderBlockKind::residual_deform, DecoderBlockKind::dsa}) {
                ModelConfig cfg = base;
                cfg.decoder_block = k;
                rows.push_back(run_variant<T>(to_string(k), cfg, phantom, opt, out_dir));
            }
            break;
    }
    return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows, int classes) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "variant";
    for (int c = 1; c < classes; ++c) out << ",dice_c" << c;
    out << ",mean_dice";
    for (int c = 1; c < classes; ++c) out << ",hd95_c" << c;
    out << ",mean_hd95\n";
    char buf[64];
    for (const auto& r : rows) {
        out << r.variant;
        for (double d : r.dice) {
            std::snprintf(buf, sizeof buf, ",%.6g", d);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, ",%.6g", r.mean_dice);
        out << buf;
        for (const auto& h : r.hd) {
            if (h)
                std::snprintf(buf, sizeof buf, ",%.6g", *h);
            else
                std::snprintf(buf, sizeof buf, ",nan");
            out << buf;
        }
        if (r.mean_hd)
            std::snprintf(buf, sizeof buf, ",%.6g\n", *r.mean_hd);
        else
            std::snprintf(buf, sizeof buf, ",nan\n");
        out << buf;
    }
}

}  // namespace vseg
