// Command-line front end: dataset generation, training, evaluation, the
// ablation ladder, the end-to-end gradient check, and parameter accounting.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pvit/ablation.hpp"
#include "pvit/trainer.hpp"

using namespace pvit;

namespace {

RunConfig load_run_config(const std::string& config_path, std::uint64_t seed_override, bool has_seed) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (has_seed) cfg.seed = seed_override;
    return cfg;
}

void print_census(const std::map<std::string, long>& census, const char* title) {
    std::printf("%s:\n", title);
    long total = 0;
    for (const auto& [group, count] : census) {
        std::printf("  %-12s %10ld\n", group.c_str(), count);
        total += count;
    }
    std::printf("  %-12s %10ld\n", "total", total);
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool shuffle) {
    std::filesystem::create_directories(out_dir);
    const auto scene = cfg.scene_config();
    const std::uint64_t digest = scene_digest(cfg);

    GeneratedSource real(scene, cfg.seed, "train-real", Origin::real, cfg.data.real_train);
    GeneratedSource val(scene, cfg.seed, "val", Origin::real, cfg.data.val);
    GeneratedSource synth(scene, cfg.seed, "train-synth", Origin::synthetic, cfg.data.synthetic, cfg.data.task_pool);

    auto materialize = [](const SampleSource& src) {
        std::vector<VideoSample> out;
        out.reserve(src.size());
        for (long i = 0; i < src.size(); ++i) out.push_back(src.get(i));
        return out;
    };
    write_dataset(out_dir + "/train_real.pvds", materialize(real), digest);
    write_dataset(out_dir + "/val.pvds", materialize(val), digest);
    auto synth_samples = materialize(synth);
    if (shuffle) shuffle_annotations(synth_samples, mix_seed(cfg.seed, hash_str("annotation-shuffle")));
    write_dataset(out_dir + "/synth.pvds", synth_samples, digest);
    std::printf("wrote %ld real / %ld val / %ld synthetic samples to %s\n", cfg.data.real_train, cfg.data.val,
                cfg.data.synthetic, out_dir.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir, const std::string& resume) {
    Model model = build_variant(cfg);
    auto result = train(model, cfg, out_dir, resume);
    std::fputs(result.metrics_csv.c_str(), stdout);
    std::printf("final val accuracy: %.4f\n", result.final_val_acc);
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_path) {
    Model model = build_variant(cfg);
    if (!checkpoint.empty()) {
        AdamState adam;
        EpochAccum accum;
        load_checkpoint(checkpoint, model, adam, cfg, accum);
    }
    std::vector<VideoSample> dataset;
    if (!data_path.empty()) {
        DatasetHeader header;
        dataset = read_dataset(data_path, &header);
        if (header.config_digest != scene_digest(cfg)) {
            throw IoError("dataset was generated under a different scene configuration");
        }
    } else {
        GeneratedSource val(cfg.scene_config(), cfg.seed, "val", Origin::real, cfg.data.val);
        for (long i = 0; i < val.size(); ++i) dataset.push_back(val.get(i));
    }
    auto report = evaluate(model, dataset);
    std::printf("top-1 accuracy: %.4f over %zu samples\n", report.top1, dataset.size());
    for (size_t c = 0; c < report.per_class_count.size(); ++c) {
        if (report.per_class_count[c] == 0) continue;
        std::printf("  class %zu: %.4f (%ld/%ld)\n", c,
                    static_cast<double>(report.per_class_correct[c]) / report.per_class_count[c],
                    report.per_class_correct[c], report.per_class_count[c]);
    }
    print_census(report.census_inference, "inference parameters");
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& out_dir, const std::string& variants_arg,
               const std::string& seeds_arg) {
    std::vector<VariantKind> suite;
    {
        std::stringstream ss(variants_arg);
        std::string item;
        while (std::getline(ss, item, ',')) suite.push_back(variant_from_name(item));
    }
    std::vector<std::uint64_t> seeds;
    {
        std::stringstream ss(seeds_arg);
        std::string item;
        while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
    }
    auto result = run_ablation(cfg, suite, seeds, out_dir);
    std::fputs(result.csv.c_str(), stdout);
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg, double step, double tol) {
    Model model = build_variant(cfg);
    const auto scene = cfg.scene_config();
    std::vector<VideoSample> samples;
    samples.push_back(generate_sample(scene, mix_seed(cfg.seed, 1), Origin::synthetic, mask_of(model.tasks)));
    samples.push_back(generate_sample(scene, mix_seed(cfg.seed, 2), Origin::real, 0));
    std::vector<const VideoSample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);

    auto loss_fn = [&]() {
        std::vector<SamplePrediction> preds;
        for (const auto& s : samples) {
            auto out = model.forward_sample(s.pixels);
            preds.push_back(model.predict(s, out));
        }
        return total_loss(preds, ptrs, cfg.losses).total_tensor;
    };
    std::vector<TensorPtr> params;
    long scalar_count = 0;
    for (const auto& e : model.all_entries()) {
        params.push_back(e.tensor);
        scalar_count += e.tensor->numel();
    }
    const double err = finite_diff_check(loss_fn, params, step);
    std::printf("checked %ld parameter scalars, max relative error %.3e (step %.1e)\n", scalar_count, err, step);
    return err < tol ? 0 : 1;
}

int cmd_params(const RunConfig& cfg) {
    Model model = build_variant(cfg);
    print_census(count_params(model, CensusMode::train), "train parameters");
    print_census(count_params(model, CensusMode::inference), "inference parameters");
    std::printf("forward MACs per sample:\n");
    for (const auto& [k, v] : count_macs(model, CensusMode::train)) std::printf("  %-16s %12ld\n", k.c_str(), v);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task prompt learning on a toy video transformer"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir = "out", resume, checkpoint, data_path;
    std::string variants = "baseline,pvit,shuffled", seeds = "1,2,3";
    std::uint64_t seed = 0;
    bool shuffle = false;
    double fd_step = 1e-4, fd_tol = 1e-3;

    app.add_option("--config", config_path, "JSON configuration file");
    auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
    app.add_option("--out-dir", out_dir, "Output directory");

    auto* gen = app.add_subcommand("gen-data", "Materialize the train/val/synthetic datasets");
    gen->add_flag("--shuffle", shuffle, "Shuffle synthetic annotations per task");
    auto* tr = app.add_subcommand("train", "Train the configured variant");
    tr->add_option("--resume", resume, "Resume from a checkpoint file");
    auto* ev = app.add_subcommand("eval", "Evaluate a model on real validation data");
    ev->add_option("--checkpoint", checkpoint, "Checkpoint to load");
    ev->add_option("--data", data_path, "Dataset file (defaults to regenerating the val split)");
    auto* ab = app.add_subcommand("ablate", "Train an ablation suite over shared seeds");
    ab->add_option("--variants", variants, "Comma-separated variant list");
    ab->add_option("--seeds", seeds, "Comma-separated seed list");
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the total loss");
    gc->add_option("--step", fd_step, "Central difference step");
    gc->add_option("--tol", fd_tol, "Max relative error to accept");
    app.add_subcommand("params", "Print parameter census and MAC counts");

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = load_run_config(config_path, seed, seed_opt->count() > 0);
        if (gen->parsed()) return cmd_gen_data(cfg, out_dir, shuffle);
        if (tr->parsed()) return cmd_train(cfg, out_dir, resume);
        if (ev->parsed()) return cmd_eval(cfg, checkpoint, data_path);
        if (ab->parsed()) return cmd_ablate(cfg, out_dir, variants, seeds);
        if (gc->parsed()) return cmd_gradcheck(cfg, fd_step, fd_tol);
        return cmd_params(cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
