#pragma once

#include <filesystem>
#include <iostream>

#include "checkpoint.hpp"
#include "data.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "sgdrop.hpp"

namespace sgdrop {

enum class Regularizer { none, dropout, sgdrop };

struct RunConfig {
    // dataset
    std::string dataset_kind = "synth"; // synth | mnist | cifar10 | dir
    std::string dataset_path;
    std::size_t resize = 0; // optional square resize, 0 = off
    SynthSpec synth;
    // model
    std::string arch = "cnn-tiny";
    // training
    std::size_t epochs = 80;
    std::size_t batch_size = 64;
    OptimizerConfig optim;
    Regularizer reg = Regularizer::none;
    double dropout_p = 0.5;
    SgdropConfig sg;
    ScoreMode score = ScoreMode::logit;
    // bookkeeping
    std::uint64_t seed = 42;
    std::size_t probe_size = 128;
    std::size_t export_every = 0; // saliency export cadence in epochs, 0 = off
    std::size_t export_count = 4;
    std::size_t eval_train_max = 0; // cap on train-set eval samples, 0 = all
    bool deterministic = true;
    bool freeze_encoder = false;
    std::string out_dir;

    void validate() const {
        if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("train.batch must be >= 1");
        if (dataset_kind != "synth" && dataset_kind != "mnist" && dataset_kind != "cifar10" &&
            dataset_kind != "dir")
            throw ConfigError("dataset.kind must be synth|mnist|cifar10|dir, got '" +
                              dataset_kind + "'");
        if (dataset_kind != "synth" && dataset_path.empty())
            throw ConfigError("dataset.path is required for dataset.kind=" + dataset_kind);
        if (reg == Regularizer::dropout && (dropout_p < 0.0 || dropout_p >= 1.0))
            throw ConfigError("dropout.p must be in [0,1)");
        sg.validate();
        if (dataset_kind == "synth") synth.validate();
        preset_layers(arch, 2); // throws on unknown preset
    }
};

inline const std::vector<std::string>& known_config_keys() {
    static const std::vector<std::string> keys = {
        "dataset.kind", "dataset.path", "dataset.resize",
        "synth.image_size", "synth.class_count", "synth.object_size", "synth.object_intensity",
        "synth.shortcut_size", "synth.shortcut_intensity", "synth.p_train", "synth.p_test",
        "synth.noise", "synth.train_n", "synth.test_n", "synth.seed",
        "model.arch",
        "train.epochs", "train.batch",
        "optim.kind", "optim.lr", "optim.momentum", "optim.beta1", "optim.beta2", "optim.eps",
        "optim.lr_schedule", "optim.step_every", "optim.step_divisor",
        "regularizer", "dropout.p",
        "sgdrop.enabled", "sgdrop.rho", "sgdrop.rho_schedule", "sgdrop.rho_init",
        "sgdrop.rho_final", "sgdrop.use_ema", "sgdrop.ema_decay",
        "attribution.score",
        "probe.size", "export.every", "export.count", "eval.train_max",
        "seed", "out", "deterministic",
    };
    return keys;
}

inline RunConfig config_from_kv(const KvMap& kv) {
    for (const auto& [k, v] : kv.items()) {
        (void)v;
        const auto& known = known_config_keys();
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigError("unknown config key: " + k);
    }
    RunConfig c;
    c.dataset_kind = kv.get_or("dataset.kind", c.dataset_kind);
    c.dataset_path = kv.get_or("dataset.path", "");
    c.resize = kv.get_size("dataset.resize", 0);

    c.synth.image_size = kv.get_size("synth.image_size", c.synth.image_size);
    c.synth.class_count = kv.get_size("synth.class_count", c.synth.class_count);
    c.synth.object_size = kv.get_size("synth.object_size", c.synth.object_size);
    c.synth.object_intensity = kv.get_double("synth.object_intensity", c.synth.object_intensity);
    c.synth.shortcut_size = kv.get_size("synth.shortcut_size", c.synth.shortcut_size);
    c.synth.shortcut_intensity =
        kv.get_double("synth.shortcut_intensity", c.synth.shortcut_intensity);
    c.synth.p_train = kv.get_double("synth.p_train", c.synth.p_train);
    c.synth.p_test = kv.get_double("synth.p_test", c.synth.p_test);
    c.synth.noise = kv.get_double("synth.noise", c.synth.noise);
    c.synth.train_n = kv.get_size("synth.train_n", c.synth.train_n);
    c.synth.test_n = kv.get_size("synth.test_n", c.synth.test_n);
    c.synth.seed = static_cast<std::uint64_t>(kv.get_int("synth.seed", 1));

    c.arch = kv.get_or("model.arch", c.arch);
    c.epochs = kv.get_size("train.epochs", c.epochs);
    c.batch_size = kv.get_size("train.batch", c.batch_size);

    const std::string okind = kv.get_or("optim.kind", "adam");
    if (okind == "adam")
        c.optim.kind = OptimizerConfig::Kind::adam;
    else if (okind == "sgd")
        c.optim.kind = OptimizerConfig::Kind::sgd;
    else
        throw ConfigError("optim.kind must be adam|sgd, got '" + okind + "'");
    c.optim.lr = kv.get_double("optim.lr", 1e-4);
    c.optim.momentum = kv.get_double("optim.momentum", 0.0);
    c.optim.beta1 = kv.get_double("optim.beta1", 0.9);
    c.optim.beta2 = kv.get_double("optim.beta2", 0.999);
    c.optim.eps = kv.get_double("optim.eps", 1e-8);
    const std::string sched = kv.get_or("optim.lr_schedule", "constant");
    if (sched == "constant")
        c.optim.schedule = LrSchedule::constant;
    else if (sched == "step")
        c.optim.schedule = LrSchedule::step;
    else
        throw ConfigError("optim.lr_schedule must be constant|step, got '" + sched + "'");
    c.optim.step_every_epochs = kv.get_size("optim.step_every", 30);
    c.optim.step_divisor = kv.get_double("optim.step_divisor", 10.0);

    const std::string reg = kv.get_or("regularizer", "none");
    if (reg == "none")
        c.reg = Regularizer::none;
    else if (reg == "dropout")
        c.reg = Regularizer::dropout;
    else if (reg == "sgdrop")
        c.reg = Regularizer::sgdrop;
    else
        throw ConfigError("regularizer must be none|dropout|sgdrop, got '" + reg + "'");
    if (kv.get_bool("sgdrop.enabled", false)) c.reg = Regularizer::sgdrop;
    c.dropout_p = kv.get_double("dropout.p", 0.5);

    c.sg.rho = kv.get_double("sgdrop.rho", 0.01);
    const std::string rsched = kv.get_or("sgdrop.rho_schedule", "constant");
    if (rsched == "constant")
        c.sg.rho_schedule = RhoSchedule::constant;
    else if (rsched == "linear")
        c.sg.rho_schedule = RhoSchedule::linear;
    else
        throw ConfigError("sgdrop.rho_schedule must be constant|linear, got '" + rsched + "'");
    c.sg.rho_init = kv.get_double("sgdrop.rho_init", 0.01);
    c.sg.rho_final = kv.get_double("sgdrop.rho_final", 0.1);
    c.sg.use_ema = kv.get_bool("sgdrop.use_ema", true);
    c.sg.ema_decay = kv.get_double("sgdrop.ema_decay", 0.99);
    c.score = score_mode_from(kv.get_or("attribution.score", "logit"));
    c.sg.score = c.score;

    c.probe_size = kv.get_size("probe.size", 128);
    c.export_every = kv.get_size("export.every", 0);
    c.export_count = kv.get_size("export.count", 4);
    c.eval_train_max = kv.get_size("eval.train_max", 0);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 42));
    c.out_dir = kv.get_or("out", "");
    c.deterministic = kv.get_bool("deterministic", true);
    c.validate();
    return c;
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_datasets(const RunConfig& cfg) {
    std::pair<Dataset<T>, Dataset<T>> out;
    if (cfg.dataset_kind == "synth") {
        out = generate_shortcut<T>(cfg.synth);
    } else if (cfg.dataset_kind == "mnist") {
        out = {load_mnist<T>(cfg.dataset_path, "train"), load_mnist<T>(cfg.dataset_path, "test")};
    } else if (cfg.dataset_kind == "cifar10") {
        out = {load_cifar10<T>(cfg.dataset_path, "train"),
               load_cifar10<T>(cfg.dataset_path, "test")};
    } else {
        namespace fs = std::filesystem;
        out = {load_dataset_dir<T>((fs::path(cfg.dataset_path) / "train").string()),
               load_dataset_dir<T>((fs::path(cfg.dataset_path) / "test").string())};
    }
    if (cfg.resize) {
        out.first = resized(out.first, cfg.resize);
        out.second = resized(out.second, cfg.resize);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// Mask- and dropout-free forward over the whole set (optionally capped);
/// mean loss and accuracy.
template <typename T>
std::pair<double, double> evaluate(const Model<T>& model, const Dataset<T>& ds,
                                   std::size_t batch_size, std::size_t max_samples = 0) {
    const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t at = 0; at < n; at += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = at; i < std::min(n, at + batch_size); ++i) idx.push_back(i);
        const Tensor<T> x = ds.gather_images(idx);
        const auto labels = ds.gather_labels(idx);
        const Tensor<T> logits = model.logits(x);
        loss_sum += kernels::cross_entropy_forward(logits, labels) *
                    static_cast<double>(idx.size());
        const std::size_t C = logits.extent(1);
        for (std::size_t s = 0; s < idx.size(); ++s) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits.at2(s, c) > logits.at2(s, best)) best = c;
            if (best == labels[s]) ++hits;
        }
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n)};
}

inline std::vector<std::size_t> probe_indices(std::size_t dataset_size, std::size_t probe_size,
                                              std::uint64_t seed) {
    std::vector<std::size_t> perm(dataset_size);
    for (std::size_t i = 0; i < dataset_size; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 0x9b0e));
    for (std::size_t i = dataset_size; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    perm.resize(std::min(probe_size, dataset_size));
    return perm;
}

struct ProbeMetrics {
    double area_ratio = 0.0;
    std::optional<double> hit_ratio;
};

/// Mean area ratio (and hit ratio when boxes exist) of the latent saliency
/// over the given samples, attributed at the true label.
template <typename T>
ProbeMetrics probe_saliency_metrics(const Model<T>& model, const Dataset<T>& ds,
                                    const std::vector<std::size_t>& indices, ScoreMode score,
                                    std::size_t batch_size = 64) {
    double ratio_sum = 0.0;
    std::vector<std::optional<BBox>> sal_boxes;
    std::vector<std::vector<BBox>> gt_boxes;
    for (std::size_t at = 0; at < indices.size(); at += batch_size) {
        std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(at),
                                       indices.begin() + static_cast<std::ptrdiff_t>(std::min(
                                           indices.size(), at + batch_size)));
        const Tensor<T> x = ds.gather_images(chunk);
        const auto labels = ds.gather_labels(chunk);
        auto maps = latent_saliency_batch(model, x, labels, score);
        for (std::size_t i = 0; i < maps.size(); ++i) {
            ratio_sum += area_ratio(maps[i]);
            if (ds.has_boxes()) {
                sal_boxes.push_back(saliency_bbox(maps[i]));
                gt_boxes.push_back(ds.boxes[chunk[i]]);
            }
        }
    }
    ProbeMetrics pm;
    pm.area_ratio = ratio_sum / static_cast<double>(indices.size());
    if (!sal_boxes.empty()) pm.hit_ratio = hit_ratio(sal_boxes, gt_boxes);
    return pm;
}

/// Coverage with the sampling protocol (10 random batches of 64, clamped).
template <typename T>
CoverageResult coverage_protocol(const Model<T>& model, const Dataset<T>& ds, std::uint64_t seed) {
    std::vector<Tensor<T>> batch_tensors;
    for (const auto& idx : coverage_batch_indices(ds.size(), seed))
        batch_tensors.push_back(ds.gather_images(idx));
    return neuron_coverage(model, batch_tensors);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct RunArtifacts {
    std::vector<MetricsReport> rows;
    std::vector<double> probe_area_ratio; // per epoch
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
    double best_test_acc = 0.0;
    double final_gap = 0.0;
    CoverageResult final_coverage;
    double mean_step_ms = 0.0;
    std::size_t zero_attribution_drops = 0;
    std::string out_dir;
};

namespace detail {

inline std::string fmt6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

template <typename T>
void export_probe_saliency(const Model<T>& model, const Dataset<T>& ds,
                           const std::vector<std::size_t>& indices, std::size_t count,
                           std::size_t epoch, ScoreMode score, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t n = std::min(count, indices.size());
    if (n == 0) return;
    std::vector<std::size_t> chunk(indices.begin(),
                                   indices.begin() + static_cast<std::ptrdiff_t>(n));
    const Tensor<T> x = ds.gather_images(chunk);
    const auto labels = ds.gather_labels(chunk);
    auto maps = latent_saliency_batch(model, x, labels, score);
    const std::size_t per = x.numel() / x.extent(0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string stem = ds.split + "_" + std::to_string(chunk[i]) + "_" +
                                 std::to_string(epoch);
        write_pgm((fs::path(dir) / (stem + ".pgm")).string(), maps[i]);
        Tensor<T> img({x.extent(1), x.extent(2), x.extent(3)});
        std::copy(x.data() + i * per, x.data() + (i + 1) * per, img.data());
        write_ppm_overlay((fs::path(dir) / (stem + ".ppm")).string(), img, maps[i]);
    }
}

} // namespace detail

/// Write the sidecar describing how to rebuild the model of a checkpoint.
inline void write_model_kv(const std::string& path, const std::string& arch, const Shape& chw,
                           std::size_t classes, std::size_t epochs_trained) {
    KvMap kv;
    kv.set("arch", arch);
    kv.set("channels", std::to_string(chw[0]));
    kv.set("height", std::to_string(chw[1]));
    kv.set("width", std::to_string(chw[2]));
    kv.set("classes", std::to_string(classes));
    kv.set("epochs_trained", std::to_string(epochs_trained));
    kv.write_file(path);
}

/// Rebuild a model from a checkpoint plus its model.kv sidecar.
template <typename T>
Model<T> load_model_from_checkpoint(const std::string& ckpt_path) {
    namespace fs = std::filesystem;
    const fs::path sidecar = fs::path(ckpt_path).parent_path() / "model.kv";
    if (!fs::exists(sidecar))
        throw std::runtime_error("missing sidecar " + sidecar.string() +
                                 " (needed to rebuild the architecture)");
    KvMap kv = KvMap::parse_file(sidecar.string());
    Rng rng(0); // initialization is immediately overwritten
    Model<T> model = make_preset<T>(
        kv.get("arch"),
        {kv.get_size("channels", 0), kv.get_size("height", 0), kv.get_size("width", 0)},
        kv.get_size("classes", 0), rng);
    load_state(model, load_checkpoint(ckpt_path));
    return model;
}

/// The full training regime: per-epoch train/test evaluation, probe-set
/// saliency metrics, CSV logging, checkpoints (latest + best by test
/// accuracy), optional saliency image export, and a summary.kv.
template <typename T = float>
RunArtifacts train_run(const RunConfig& cfg, const Dataset<T>& train, const Dataset<T>& test,
                       Model<T>* initial_model = nullptr, bool quiet = false) {
    namespace fs = std::filesystem;
    cfg.validate();
    train.validate();
    test.validate();
    if (cfg.out_dir.empty()) throw ConfigError("output directory is required (out=...)");
    fs::create_directories(cfg.out_dir);
    fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");

    Rng init_rng(mix_seed(cfg.seed, 0x01));
    Model<T> model = initial_model
                         ? std::move(*initial_model)
                         : make_preset<T>(cfg.arch, train.chw(), train.class_count, init_rng);
    if (cfg.freeze_encoder) model.freeze_encoder();

    Optimizer<T> opt(cfg.optim);
    std::optional<EmaState<T>> ema;
    if (cfg.reg == Regularizer::sgdrop && cfg.sg.use_ema)
        ema.emplace(model, cfg.sg.ema_decay);
    Rng arch_rng(mix_seed(cfg.seed, 0x02));
    const std::uint64_t shuffle_seed = mix_seed(cfg.seed, 0x03);
    const auto probe = probe_indices(test.size(), cfg.probe_size, cfg.seed);

    MetricsCsv csv((fs::path(cfg.out_dir) / "metrics.csv").string());
    write_model_kv((fs::path(cfg.out_dir) / "checkpoints" / "model.kv").string(), cfg.arch,
                   train.chw(), train.class_count, cfg.epochs);

    RunArtifacts art;
    art.out_dir = cfg.out_dir;
    double step_ms_total = 0.0;
    std::size_t step_count = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        const double rho =
            cfg.reg == Regularizer::sgdrop ? rho_at(cfg.sg, epoch, cfg.epochs) : 0.0;

        double epoch_ms = 0.0;
        std::size_t epoch_steps = 0;
        for (const auto& batch : batches(train.size(), cfg.batch_size, shuffle_seed, epoch)) {
            const Tensor<T> x = train.gather_images(batch);
            const auto labels = train.gather_labels(batch);
            StepStats s;
            switch (cfg.reg) {
                case Regularizer::none:
                    s = vanilla_step(model, x, labels, opt, &arch_rng);
                    break;
                case Regularizer::dropout:
                    s = dropout_step(model, x, labels, cfg.dropout_p, arch_rng, opt);
                    break;
                case Regularizer::sgdrop:
                    s = sgdrop_step(model, ema ? &*ema : nullptr, x, labels, cfg.sg, rho, opt,
                                    &arch_rng);
                    break;
            }
            art.zero_attribution_drops += s.zero_attribution_drops;
            epoch_ms += s.wall_ms;
            ++epoch_steps;
        }
        step_ms_total += epoch_ms;
        step_count += epoch_steps;

        const auto [train_loss, train_acc] =
            evaluate(model, train, cfg.batch_size, cfg.eval_train_max);
        const auto [test_loss, test_acc] = evaluate(model, test, cfg.batch_size);
        const ProbeMetrics pm = probe_saliency_metrics(model, test, probe, cfg.score);
        art.probe_area_ratio.push_back(pm.area_ratio);

        MetricsReport train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        train_row.loss = train_loss;
        train_row.accuracy = train_acc;
        if (cfg.reg == Regularizer::sgdrop) train_row.rho = rho;
        if (!cfg.deterministic)
            train_row.step_time_ms = epoch_ms / static_cast<double>(epoch_steps);
        csv.append(train_row);
        art.rows.push_back(train_row);

        MetricsReport test_row;
        test_row.epoch = epoch;
        test_row.split = "test";
        test_row.loss = test_loss;
        test_row.accuracy = test_acc;
        test_row.area_ratio = pm.area_ratio;
        test_row.hit_ratio = pm.hit_ratio;
        test_row.gap = train_acc - test_acc;
        if (epoch + 1 == cfg.epochs) {
            art.final_coverage = coverage_protocol(model, test, cfg.seed);
            test_row.coverage_global = art.final_coverage.global;
            test_row.coverage_featuremap = art.final_coverage.featuremap;
        }
        csv.append(test_row);
        art.rows.push_back(test_row);

        save_checkpoint((fs::path(cfg.out_dir) / "checkpoints" / "latest.ckpt").string(),
                        named_state(model));
        if (test_acc > art.best_test_acc || epoch == 0) {
            art.best_test_acc = std::max(art.best_test_acc, test_acc);
            save_checkpoint((fs::path(cfg.out_dir) / "checkpoints" / "best.ckpt").string(),
                            named_state(model));
        }
        if (cfg.export_every && (epoch + 1) % cfg.export_every == 0)
            detail::export_probe_saliency(model, test, probe, cfg.export_count, epoch, cfg.score,
                                          (fs::path(cfg.out_dir) / "saliency").string());

        art.final_train_acc = train_acc;
        art.final_test_acc = test_acc;
        art.final_gap = train_acc - test_acc;
        if (!quiet)
            std::cout << "epoch " << epoch << " train_acc " << detail::fmt6(train_acc)
                      << " test_acc " << detail::fmt6(test_acc) << " area_ratio "
                      << detail::fmt6(pm.area_ratio) << "\n";
    }

    art.mean_step_ms = step_count ? step_ms_total / static_cast<double>(step_count) : 0.0;

    KvMap summary;
    summary.set("final_train_acc", detail::fmt6(art.final_train_acc));
    summary.set("final_test_acc", detail::fmt6(art.final_test_acc));
    summary.set("best_test_acc", detail::fmt6(art.best_test_acc));
    summary.set("final_gap", detail::fmt6(art.final_gap));
    summary.set("coverage_global", detail::fmt6(art.final_coverage.global));
    summary.set("coverage_featuremap", detail::fmt6(art.final_coverage.featuremap));
    summary.set("final_area_ratio",
                detail::fmt6(art.probe_area_ratio.empty() ? 0.0 : art.probe_area_ratio.back()));
    summary.set("zero_attribution_drops", std::to_string(art.zero_attribution_drops));
    if (!cfg.deterministic) summary.set("mean_step_ms", detail::fmt6(art.mean_step_ms));
    summary.write_file((fs::path(cfg.out_dir) / "summary.kv").string());
    return art;
}

/// Frozen-encoder transfer: rebuild the pretrained encoder, reinitialize the
/// classifier for the new class count, freeze the encoder, train.
template <typename T = float>
RunArtifacts transfer_run(const std::string& pretrained_ckpt, const RunConfig& cfg,
                          const Dataset<T>& train, const Dataset<T>& test, bool quiet = false) {
    namespace fs = std::filesystem;
    const fs::path sidecar = fs::path(pretrained_ckpt).parent_path() / "model.kv";
    if (!fs::exists(sidecar))
        throw std::runtime_error("missing sidecar " + sidecar.string());
    KvMap kv = KvMap::parse_file(sidecar.string());
    const Shape chw = train.chw();
    if (kv.get_size("channels", 0) != chw[0] || kv.get_size("height", 0) != chw[1] ||
        kv.get_size("width", 0) != chw[2])
        throw std::runtime_error("transfer: encoder expects " +
                                 std::to_string(kv.get_size("channels", 0)) + "x" +
                                 std::to_string(kv.get_size("height", 0)) + "x" +
                                 std::to_string(kv.get_size("width", 0)) + " input but dataset is " +
                                 shape_str(chw));

    Rng rng(mix_seed(cfg.seed, 0x05));
    Model<T> model = make_preset<T>(kv.get("arch"), chw, train.class_count, rng);

    // restore encoder parameters only; the classifier keeps its fresh init
    auto entries = load_checkpoint(pretrained_ckpt);
    for (auto& p : model.parameters()) {
        if (p.name.rfind("encoder.", 0) != 0) continue;
        const NamedTensor* found = nullptr;
        for (const auto& e : entries)
            if (e.name == p.name) {
                found = &e;
                break;
            }
        if (!found) throw std::runtime_error("transfer: checkpoint lacks " + p.name);
        if (!same_shape(found->tensor.shape(), p.tensor().shape()))
            throw std::runtime_error("transfer: incompatible encoder parameter " + p.name);
        for (std::size_t i = 0; i < p.tensor().numel(); ++i)
            p.tensor()[i] = static_cast<T>(found->tensor[i]);
    }

    RunConfig tcfg = cfg;
    tcfg.arch = kv.get("arch");
    tcfg.freeze_encoder = true;
    return train_run(tcfg, train, test, &model, quiet);
}

// ---------------------------------------------------------------------------
// Overhead benchmark
// ---------------------------------------------------------------------------

struct OverheadReport {
    double vanilla_ms = 0.0;
    double sgdrop_ms = 0.0;
    double ratio = 0.0;
    std::size_t steps = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

/// Median wall time per training step for one regime on fixed data.
template <typename T>
double measure_step_ms(const RunConfig& cfg, Regularizer reg, const Tensor<T>& x,
                       const std::vector<std::size_t>& labels, std::size_t steps,
                       std::size_t warmup, std::size_t class_count) {
    Rng init_rng(mix_seed(cfg.seed, 0x01));
    Model<T> model = make_preset<T>(cfg.arch, {x.extent(1), x.extent(2), x.extent(3)},
                                    class_count, init_rng);
    Optimizer<T> opt(cfg.optim);
    std::optional<EmaState<T>> ema;
    if (reg == Regularizer::sgdrop && cfg.sg.use_ema) ema.emplace(model, cfg.sg.ema_decay);
    Rng arch_rng(mix_seed(cfg.seed, 0x02));

    std::vector<double> samples;
    for (std::size_t i = 0; i < warmup + steps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        switch (reg) {
            case Regularizer::none:
                vanilla_step(model, x, labels, opt, &arch_rng);
                break;
            case Regularizer::dropout:
                dropout_step(model, x, labels, cfg.dropout_p, arch_rng, opt);
                break;
            case Regularizer::sgdrop:
                sgdrop_step(model, ema ? &*ema : nullptr, x, labels, cfg.sg, cfg.sg.rho, opt,
                            &arch_rng);
                break;
        }
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        if (i >= warmup) samples.push_back(ms);
    }
    return detail::median(std::move(samples));
}

/// SGDrop-vs-vanilla per-step cost on identical data, warmup excluded.
template <typename T = float>
OverheadReport bench_overhead(const RunConfig& cfg, std::size_t steps, std::size_t warmup = 3) {
    if (steps < 10) throw ConfigError("bench-overhead: steps must be >= 10");
    SynthSpec spec = cfg.synth;
    spec.train_n = cfg.batch_size;
    spec.test_n = 1;
    auto data = generate_shortcut<T>(spec);
    std::vector<std::size_t> all(data.first.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Tensor<T> x = data.first.gather_images(all);
    const auto labels = data.first.gather_labels(all);

    OverheadReport r;
    r.steps = steps;
    r.vanilla_ms = measure_step_ms(cfg, Regularizer::none, x, labels, steps, warmup,
                                   data.first.class_count);
    r.sgdrop_ms = measure_step_ms(cfg, Regularizer::sgdrop, x, labels, steps, warmup,
                                  data.first.class_count);
    r.ratio = r.sgdrop_ms / r.vanilla_ms;
    return r;
}

} // namespace sgdrop
