// Command-line front end: train / eval / saliency / transfer /
// bench-overhead / synth. Configuration is a flat key=value file plus
// --set overrides; every run writes its artifacts under --out.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include <sgdrop/trainer.hpp>

namespace fs = std::filesystem;
using namespace sgdrop;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::int64_t seed = -1;
    bool deterministic = false;
    bool non_deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "flat key=value config file ('#' comments)");
    cmd->add_option("--set", a.sets, "override a config key, e.g. --set sgdrop.rho=0.05")
        ->take_all();
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_option("--seed", a.seed, "run seed");
    cmd->add_flag("--deterministic", a.deterministic,
                  "single-threaded deterministic mode (default on)");
    cmd->add_flag("--non-deterministic", a.non_deterministic,
                  "record wall-clock timings in metrics.csv");
}

KvMap build_kv(const CommonArgs& a) {
    KvMap kv;
    if (!a.config_path.empty()) kv = KvMap::parse_file(a.config_path);
    for (const std::string& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects key=value, got '" + s + "'");
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (a.seed >= 0) kv.set("seed", std::to_string(a.seed));
    if (!a.out.empty()) kv.set("out", a.out);
    if (a.deterministic) kv.set("deterministic", "true");
    if (a.non_deterministic) kv.set("deterministic", "false");
    return kv;
}

void require_dir(const std::string& path, const std::string& what) {
    if (!fs::is_directory(path))
        throw ConfigError(what + " directory does not exist: " + path);
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
}

RunConfig make_run_config(const KvMap& kv) {
    RunConfig cfg = config_from_kv(kv);
    if (cfg.dataset_kind != "synth") require_dir(cfg.dataset_path, "dataset");
    return cfg;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = make_run_config(build_kv(args));
    if (cfg.out_dir.empty()) throw ConfigError("train: --out is required");
    auto [train, test] = load_datasets<float>(cfg);
    RunArtifacts art = train_run(cfg, train, test);
    std::cout << "done: final_test_acc=" << art.final_test_acc
              << " best_test_acc=" << art.best_test_acc << " gap=" << art.final_gap
              << " out=" << art.out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt, const std::string& split) {
    require_file(ckpt, "checkpoint");
    KvMap kv = build_kv(args);
    RunConfig cfg = make_run_config(kv);
    auto model = load_model_from_checkpoint<float>(ckpt);
    auto [train, test] = load_datasets<float>(cfg);
    const Dataset<float>& ds = split == "train" ? train : test;
    if (model.input_shape() != ds.chw())
        throw std::runtime_error("eval: model expects input " + shape_str(model.input_shape()) +
                                 " but dataset is " + shape_str(ds.chw()));

    const auto [loss, acc] = evaluate(model, ds, cfg.batch_size);
    const CoverageResult cov = coverage_protocol(model, ds, cfg.seed);
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const ProbeMetrics pm = probe_saliency_metrics(model, ds, all, cfg.score);

    KvMap out;
    out.set("split", split);
    out.set("loss", std::to_string(loss));
    out.set("accuracy", std::to_string(acc));
    out.set("coverage_global", std::to_string(cov.global));
    out.set("coverage_featuremap", std::to_string(cov.featuremap));
    out.set("area_ratio", std::to_string(pm.area_ratio));
    if (pm.hit_ratio) out.set("hit_ratio", std::to_string(*pm.hit_ratio));
    for (const auto& [k, v] : out.items()) std::cout << k << "=" << v << "\n";
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        out.write_file((fs::path(cfg.out_dir) / "eval.kv").string());
    }
    return 0;
}

int cmd_saliency(const CommonArgs& args, const std::string& ckpt, const std::string& split,
                 const std::string& indices_arg, const std::string& method) {
    require_file(ckpt, "checkpoint");
    if (method != "latent" && method != "gradcam")
        throw ConfigError("saliency: method must be latent|gradcam, got '" + method + "'");
    KvMap kv = build_kv(args);
    RunConfig cfg = make_run_config(kv);
    if (cfg.out_dir.empty()) throw ConfigError("saliency: --out is required");

    auto model = load_model_from_checkpoint<float>(ckpt);
    auto [train, test] = load_datasets<float>(cfg);
    const Dataset<float>& ds = split == "train" ? train : test;

    std::vector<std::size_t> indices;
    {
        std::size_t at = 0;
        while (at <= indices_arg.size() && !indices_arg.empty()) {
            const auto comma = indices_arg.find(',', at);
            const std::string field = indices_arg.substr(
                at, comma == std::string::npos ? std::string::npos : comma - at);
            try {
                indices.push_back(std::stoull(field));
            } catch (const std::exception&) {
                throw ConfigError("saliency: bad index '" + field + "'");
            }
            if (comma == std::string::npos) break;
            at = comma + 1;
        }
    }
    if (indices.empty()) throw ConfigError("saliency: --indices is required (e.g. 0,1,2)");
    for (std::size_t i : indices)
        if (i >= ds.size())
            throw ConfigError("saliency: index " + std::to_string(i) + " out of range [0, " +
                              std::to_string(ds.size()) + ")");

    const KvMap sidecar =
        KvMap::parse_file((fs::path(ckpt).parent_path() / "model.kv").string());
    const std::size_t epoch_tag = sidecar.get_size("epochs_trained", 0);

    fs::create_directories(cfg.out_dir);
    std::ofstream boxes_csv(fs::path(cfg.out_dir) / "boxes.csv", std::ios::trunc);
    boxes_csv << "index,x_min,y_min,x_max,y_max\n";

    const std::size_t per = shape_numel(ds.chw());
    for (std::size_t i : indices) {
        const Tensor<float> x = ds.gather_images({i});
        const std::size_t label = ds.labels[i];
        SaliencyImage<float> map;
        if (method == "gradcam") {
            map = grad_cam(model, x, label, cfg.score);
        } else {
            map = latent_saliency_batch(model, x, {label}, cfg.score)[0];
        }
        const std::string stem =
            ds.split + "_" + std::to_string(i) + "_" + std::to_string(epoch_tag);
        write_pgm((fs::path(cfg.out_dir) / (stem + ".pgm")).string(), map);
        Tensor<float> img(ds.chw());
        std::copy(x.data(), x.data() + per, img.data());
        write_ppm_overlay((fs::path(cfg.out_dir) / (stem + ".ppm")).string(), img, map);
        if (auto box = saliency_bbox(map))
            boxes_csv << i << ',' << box->x_min << ',' << box->y_min << ',' << box->x_max << ','
                      << box->y_max << '\n';
    }
    std::cout << "wrote " << indices.size() << " saliency maps to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_transfer(const CommonArgs& args, const std::string& ckpt) {
    require_file(ckpt, "checkpoint");
    RunConfig cfg = make_run_config(build_kv(args));
    if (cfg.out_dir.empty()) throw ConfigError("transfer: --out is required");
    auto [train, test] = load_datasets<float>(cfg);
    RunArtifacts art = transfer_run(ckpt, cfg, train, test);
    std::cout << "done: final_test_acc=" << art.final_test_acc << " out=" << art.out_dir << "\n";
    return 0;
}

int cmd_bench(const CommonArgs& args, std::size_t steps) {
    RunConfig cfg = config_from_kv(build_kv(args));
    OverheadReport r = bench_overhead<float>(cfg, steps);
    std::cout << "vanilla_ms=" << r.vanilla_ms << "\n"
              << "sgdrop_ms=" << r.sgdrop_ms << "\n"
              << "ratio=" << r.ratio << "\n";
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        KvMap out;
        out.set("steps", std::to_string(r.steps));
        out.set("vanilla_ms", std::to_string(r.vanilla_ms));
        out.set("sgdrop_ms", std::to_string(r.sgdrop_ms));
        out.set("ratio", std::to_string(r.ratio));
        out.write_file((fs::path(cfg.out_dir) / "bench.kv").string());
    }
    return 0;
}

int cmd_synth(const CommonArgs& args) {
    KvMap kv = build_kv(args);
    RunConfig cfg = config_from_kv(kv);
    if (cfg.out_dir.empty()) throw ConfigError("synth: --out is required");
    auto [train, test] = generate_shortcut<float>(cfg.synth);
    save_dataset_dir((fs::path(cfg.out_dir) / "train").string(), train, cfg.synth.to_kv());
    save_dataset_dir((fs::path(cfg.out_dir) / "test").string(), test, cfg.synth.to_kv());
    std::cout << "wrote " << train.size() << " train + " << test.size() << " test samples to "
              << cfg.out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"saliency-guided dropout training laboratory"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, sal_args, transfer_args, bench_args, synth_args;
    std::string eval_ckpt, sal_ckpt, transfer_ckpt;
    std::string eval_split = "test", sal_split = "test";
    std::string sal_indices, sal_method = "latent";
    std::size_t bench_steps = 30;

    auto* train = app.add_subcommand("train", "train a model per the config");
    add_common(train, train_args);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--split", eval_split, "dataset split (train|test)");

    auto* saliency = app.add_subcommand("saliency", "export saliency maps for sample indices");
    add_common(saliency, sal_args);
    saliency->add_option("--checkpoint", sal_ckpt, "checkpoint file")->required();
    saliency->add_option("--indices", sal_indices, "comma-separated sample indices")->required();
    saliency->add_option("--method", sal_method, "latent|gradcam");
    saliency->add_option("--split", sal_split, "dataset split (train|test)");

    auto* transfer = app.add_subcommand("transfer", "frozen-encoder transfer training");
    add_common(transfer, transfer_args);
    transfer->add_option("--checkpoint", transfer_ckpt, "pretrained checkpoint")->required();

    auto* bench = app.add_subcommand("bench-overhead", "vanilla vs sgdrop step-time ratio");
    add_common(bench, bench_args);
    bench->add_option("--steps", bench_steps, "measured steps per regime (>= 10)");

    auto* synth = app.add_subcommand("synth", "generate the synthetic shortcut dataset");
    add_common(synth, synth_args);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_args);
        if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_split);
        if (saliency->parsed())
            return cmd_saliency(sal_args, sal_ckpt, sal_split, sal_indices, sal_method);
        if (transfer->parsed()) return cmd_transfer(transfer_args, transfer_ckpt);
        if (bench->parsed()) return cmd_bench(bench_args, bench_steps);
        if (synth->parsed()) return cmd_synth(synth_args);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
