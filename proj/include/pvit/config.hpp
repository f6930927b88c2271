#pragma once

// Run configuration: backbone, losses, trainer, variant and data sections,
// loadable from a JSON file. The canonical dump doubles as the digest input
// that ties checkpoints and datasets to the configuration that produced them.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvit/backbone.hpp"
#include "pvit/losses.hpp"
#include "pvit/scenegen.hpp"

namespace pvit {

struct InvalidVariant : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class VariantKind { pvit, baseline, mt, vpt, pvit_vpt, op, np, shuffled };

inline const char* variant_name(VariantKind k) {
    switch (k) {
        case VariantKind::pvit: return "pvit";
        case VariantKind::baseline: return "baseline";
        case VariantKind::mt: return "mt";
        case VariantKind::vpt: return "vpt";
        case VariantKind::pvit_vpt: return "pvit_vpt";
        case VariantKind::op: return "op";
        case VariantKind::np: return "np";
        case VariantKind::shuffled: return "shuffled";
    }
    return "?";
}

inline VariantKind variant_from_name(const std::string& name) {
    for (VariantKind k : {VariantKind::pvit, VariantKind::baseline, VariantKind::mt, VariantKind::vpt,
                          VariantKind::pvit_vpt, VariantKind::op, VariantKind::np, VariantKind::shuffled}) {
        if (name == variant_name(k)) return k;
    }
    throw InvalidVariant("unknown variant: " + name);
}

struct VariantSpec {
    VariantKind kind = VariantKind::pvit;
    long prompts_per_task = 1;
    // Explicit prompt-count request; rejected when it contradicts the
    // variant's wiring (e.g. mt with n > 0).
    std::optional<long> prompt_count_override;
};

struct TrainConfig {
    long batch_size = 8;
    double synth_ratio = 1.0;  // synthetic:real per batch, at most 3
    long epochs = 3;
    double base_lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-4;
    long checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
    int threads = 0;            // 0 = hardware concurrency

    void validate() const {
        if (batch_size < 1) throw std::runtime_error("trainer: batch_size < 1");
        if (synth_ratio < 0.0 || synth_ratio > 3.0) throw std::runtime_error("trainer: synth_ratio outside [0, 3]");
        if (epochs < 1) throw std::runtime_error("trainer: epochs < 1");
    }

    long synth_per_batch() const {
        return static_cast<long>(std::floor(static_cast<double>(batch_size) * synth_ratio / (1.0 + synth_ratio)));
    }
    long real_per_batch() const { return batch_size - synth_per_batch(); }
};

struct DataConfig {
    long real_train = 1000;
    long val = 200;
    long synthetic = 3000;
    double noise = 0.15;
    std::vector<Task> task_pool = {kAllTasks.begin(), kAllTasks.end()};
};

struct RunConfig {
    BackboneConfig backbone;
    LossWeights losses;
    TrainConfig trainer;
    VariantSpec variant;
    DataConfig data;
    std::uint64_t seed = 1;

    SceneConfig scene_config() const {
        SceneConfig s;
        s.frames = backbone.frames;
        s.height = backbone.height;
        s.width = backbone.width;
        s.grid_h = backbone.grid_h();
        s.grid_w = backbone.grid_w();
        s.noise = data.noise;
        s.action_classes = static_cast<int>(backbone.classes);
        return s;
    }
};

// ---------------------------------------------------------------------------
// JSON (nlohmann); objects serialize with sorted keys, so dumps are canonical.

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["backbone"] = {{"frames", c.backbone.frames},     {"height", c.backbone.height},
                     {"width", c.backbone.width},       {"patch_h", c.backbone.patch_h},
                     {"patch_w", c.backbone.patch_w},   {"embed_dim", c.backbone.embed_dim},
                     {"layers", c.backbone.layers},     {"heads", c.backbone.heads},
                     {"prompt_count", c.backbone.prompt_count}, {"tap_layers", c.backbone.tap_layers},
                     {"classes", c.backbone.classes},   {"init_std", c.backbone.init_std},
                     {"pe_init_scale", c.backbone.pe_init_scale}, {"ln_eps", c.backbone.ln_eps}};
    j["losses"] = {{"lambda_depth", c.losses.depth}, {"lambda_normal", c.losses.normal}, {"lambda_segm", c.losses.segm},
                   {"lambda_pose", c.losses.pose},   {"lambda_boxes", c.losses.boxes},   {"lambda_dt", c.losses.dt},
                   {"depth_clip", c.losses.depth_clip}};
    j["trainer"] = {{"batch_size", c.trainer.batch_size},
                    {"synth_ratio", c.trainer.synth_ratio},
                    {"epochs", c.trainer.epochs},
                    {"base_lr", c.trainer.base_lr},
                    {"beta1", c.trainer.beta1},
                    {"beta2", c.trainer.beta2},
                    {"adam_eps", c.trainer.adam_eps},
                    {"weight_decay", c.trainer.weight_decay},
                    {"checkpoint_every", c.trainer.checkpoint_every},
                    {"threads", c.trainer.threads}};
    j["variant"] = {{"kind", variant_name(c.variant.kind)}, {"prompts_per_task", c.variant.prompts_per_task}};
    if (c.variant.prompt_count_override) j["variant"]["prompt_count"] = *c.variant.prompt_count_override;
    nlohmann::json pool = nlohmann::json::array();
    for (Task t : c.data.task_pool) pool.push_back(task_name(t));
    j["data"] = {{"real_train", c.data.real_train}, {"val", c.data.val},     {"synthetic", c.data.synthetic},
                 {"noise", c.data.noise},           {"task_pool", pool}};
    j["seed"] = c.seed;
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        auto get = [&](const char* k, auto& field) {
            if (b.contains(k)) field = b.at(k).get<std::decay_t<decltype(field)>>();
        };
        get("frames", c.backbone.frames);
        get("height", c.backbone.height);
        get("width", c.backbone.width);
        get("patch_h", c.backbone.patch_h);
        get("patch_w", c.backbone.patch_w);
        get("embed_dim", c.backbone.embed_dim);
        get("layers", c.backbone.layers);
        get("heads", c.backbone.heads);
        get("prompt_count", c.backbone.prompt_count);
        get("tap_layers", c.backbone.tap_layers);
        get("classes", c.backbone.classes);
        get("init_std", c.backbone.init_std);
        get("pe_init_scale", c.backbone.pe_init_scale);
        get("ln_eps", c.backbone.ln_eps);
    }
    if (j.contains("losses")) {
        const auto& l = j.at("losses");
        if (l.contains("lambda_depth")) c.losses.depth = l.at("lambda_depth").get<double>();
        if (l.contains("lambda_normal")) c.losses.normal = l.at("lambda_normal").get<double>();
        if (l.contains("lambda_segm")) c.losses.segm = l.at("lambda_segm").get<double>();
        if (l.contains("lambda_pose")) c.losses.pose = l.at("lambda_pose").get<double>();
        if (l.contains("lambda_boxes")) c.losses.boxes = l.at("lambda_boxes").get<double>();
        if (l.contains("lambda_dt")) c.losses.dt = l.at("lambda_dt").get<double>();
        if (l.contains("depth_clip")) c.losses.depth_clip = l.at("depth_clip").get<double>();
    }
    if (j.contains("trainer")) {
        const auto& t = j.at("trainer");
        auto get = [&](const char* k, auto& field) {
            if (t.contains(k)) field = t.at(k).get<std::decay_t<decltype(field)>>();
        };
        get("batch_size", c.trainer.batch_size);
        get("synth_ratio", c.trainer.synth_ratio);
        get("epochs", c.trainer.epochs);
        get("base_lr", c.trainer.base_lr);
        get("beta1", c.trainer.beta1);
        get("beta2", c.trainer.beta2);
        get("adam_eps", c.trainer.adam_eps);
        get("weight_decay", c.trainer.weight_decay);
        get("checkpoint_every", c.trainer.checkpoint_every);
        get("threads", c.trainer.threads);
    }
    if (j.contains("variant")) {
        const auto& v = j.at("variant");
        if (v.contains("kind")) c.variant.kind = variant_from_name(v.at("kind").get<std::string>());
        if (v.contains("prompts_per_task")) c.variant.prompts_per_task = v.at("prompts_per_task").get<long>();
        if (v.contains("prompt_count")) c.variant.prompt_count_override = v.at("prompt_count").get<long>();
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (d.contains("real_train")) c.data.real_train = d.at("real_train").get<long>();
        if (d.contains("val")) c.data.val = d.at("val").get<long>();
        if (d.contains("synthetic")) c.data.synthetic = d.at("synthetic").get<long>();
        if (d.contains("noise")) c.data.noise = d.at("noise").get<double>();
        if (d.contains("task_pool")) {
            c.data.task_pool.clear();
            for (const auto& name : d.at("task_pool")) c.data.task_pool.push_back(task_from_name(name.get<std::string>()));
        }
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    is >> j;
    return config_from_json(j);
}

// Digest of the full canonical config dump; written into checkpoints.
inline std::uint64_t config_digest(const RunConfig& c) { return hash_str(to_json(c).dump()); }

// Digest of the generator-relevant fields only; written into dataset files.
inline std::uint64_t scene_digest(const RunConfig& c) {
    const SceneConfig s = c.scene_config();
    nlohmann::json j = {{"frames", s.frames},   {"height", s.height}, {"width", s.width},
                        {"grid_h", s.grid_h},   {"grid_w", s.grid_w}, {"noise", s.noise},
                        {"classes", s.action_classes}};
    return hash_str(j.dump());
}

}  // namespace pvit
