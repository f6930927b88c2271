#pragma once

// Model assembly and the ablation-ladder variant factory. A Model bundles
// the backbone parameters, the head set, the configured task set and the
// variant's data policy. Prompt tokens are laid out in canonical task order
// (the Task enum order), so the mapping from task to prompt slot is pure
// bookkeeping; swapping two tasks' slot assignments relabels indices without
// changing a single computed value.

#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "pvit/backbone.hpp"
#include "pvit/config.hpp"
#include "pvit/heads.hpp"
#include "pvit/losses.hpp"
#include "pvit/scenegen.hpp"

namespace pvit {

struct DataPolicy {
    bool use_synthetic = true;
    bool shuffle_annotations = false;
    bool freeze_backbone = false;
    double synth_ratio = 1.0;  // effective ratio; 0 when synthetic data is off
};

struct Model {
    BackboneConfig cfg;  // prompt_count already derived from the variant
    VariantSpec variant;
    DataPolicy policy;
    std::vector<Task> tasks;  // configured tasks, canonical order
    ModelParams params;
    HeadSet heads;

    // First prompt row owned by a task (tasks own prompts_per_task rows each).
    long slot_of(Task t) const {
        for (size_t i = 0; i < tasks.size(); ++i) {
            if (tasks[i] == t) return static_cast<long>(i) * variant.prompts_per_task;
        }
        throw UnknownTask(std::string("slot_of: task not configured: ") + task_name(t));
    }

    // requires_grad flags were fixed at build time (and by set_backbone_trainable
    // on freeze changes), so concurrent forwards never write shared state.
    ForwardOutputs forward_sample(const std::vector<double>& pixels) const { return forward_prepared(pixels, cfg, params); }

    // The token a task head reads: its prompt slot, the shared single prompt
    // (one-prompt variant), or F_CLS (multi-task-on-CLS variant).
    TensorPtr task_input(Task t, const ForwardOutputs& out) const {
        if (variant.kind == VariantKind::mt) return out.f_cls;
        if (variant.kind == VariantKind::op) return slice(out.f_prompts, 0, 0, 1);
        return slice(out.f_prompts, 0, slot_of(t), 1);
    }

    // Predictions for exactly the annotations the sample carries (plus
    // downstream logits when it has an action label).
    SamplePrediction predict(const VideoSample& sample, const ForwardOutputs& out) const {
        SamplePrediction pred;
        if (sample.annotations.action.has_value()) pred.logits = predict_cls(heads, out.f_cls);
        for (Task t : tasks) {
            if (!sample.annotations.has(t)) continue;
            auto input = task_input(t, out);
            pred.task_outputs[t] =
                is_dense(t) ? predict_dense(heads, t, input, out.tapped_patches, cfg) : predict_localization(heads, t, input);
        }
        return pred;
    }

    std::vector<ParamEntry> all_entries() const {
        auto out = params.entries();
        auto he = heads.entries();
        out.insert(out.end(), he.begin(), he.end());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Variant factory

namespace detail {

// Static index partition; f(i) must only touch disjoint per-index state.
// The first exception thrown by any worker is rethrown after the join.
template <typename F>
void parallel_for(long n, int threads, F&& f) {
    if (threads <= 1 || n <= 1) {
        for (long i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    const int workers = static_cast<int>(std::min<long>(threads, n));
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&f, &errors, w, n, workers] {
            try {
                for (long i = w; i < n; i += workers) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

inline int default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

inline std::vector<Task> canonical_tasks(const std::vector<Task>& pool) {
    std::set<int> seen;
    for (Task t : pool) seen.insert(static_cast<int>(t));
    std::vector<Task> out;
    for (Task t : kAllTasks) {
        if (seen.count(static_cast<int>(t))) out.push_back(t);
    }
    return out;
}
}  // namespace detail

inline Model build_variant(const RunConfig& config) {
    config.trainer.validate();
    const VariantSpec& spec = config.variant;
    if (spec.prompts_per_task < 1) throw InvalidVariant("prompts_per_task must be >= 1");
    const auto tasks = detail::canonical_tasks(config.data.task_pool);
    const long k = static_cast<long>(tasks.size());

    Model m;
    m.cfg = config.backbone;
    m.variant = spec;
    m.tasks = tasks;
    m.policy.synth_ratio = config.trainer.synth_ratio;

    long prompt_count = 0;
    bool one_prompt_wide = false;
    bool task_heads = true;
    switch (spec.kind) {
        case VariantKind::pvit:
            prompt_count = k * spec.prompts_per_task;
            break;
        case VariantKind::shuffled:
            prompt_count = k * spec.prompts_per_task;
            m.policy.shuffle_annotations = true;
            break;
        case VariantKind::baseline:
            prompt_count = 0;
            task_heads = false;
            m.policy.use_synthetic = false;
            break;
        case VariantKind::mt:
            prompt_count = 0;
            break;
        case VariantKind::vpt:
            prompt_count = k * spec.prompts_per_task;
            m.policy.use_synthetic = false;
            m.policy.freeze_backbone = true;
            break;
        case VariantKind::pvit_vpt:
            prompt_count = k * spec.prompts_per_task;
            m.policy.freeze_backbone = true;
            break;
        case VariantKind::op:
            prompt_count = 1;
            one_prompt_wide = true;
            break;
        case VariantKind::np:
            prompt_count = k * spec.prompts_per_task;
            m.policy.use_synthetic = false;
            break;
    }
    if (!m.policy.use_synthetic) m.policy.synth_ratio = 0.0;
    if (spec.prompt_count_override && *spec.prompt_count_override != prompt_count) {
        throw InvalidVariant(std::string("variant ") + variant_name(spec.kind) + " requires prompt_count " +
                             std::to_string(prompt_count) + ", got " + std::to_string(*spec.prompt_count_override));
    }
    if (task_heads && k == 0 && spec.kind != VariantKind::baseline) {
        throw InvalidVariant("variant needs a nonempty task pool");
    }

    m.cfg.prompt_count = prompt_count;
    m.cfg.validate();

    Rng rng(mix_seed(config.seed, hash_str("model-init")));
    // Dimension compensation for the single-prompt variant: the private
    // projection is sized so total prompt-side parameters exceed n*d.
    const long wide_dim = k * spec.prompts_per_task * m.cfg.embed_dim;
    m.params = ModelParams::init(m.cfg, rng, one_prompt_wide, one_prompt_wide ? wide_dim : 0);
    m.heads = HeadSet::init(m.cfg, task_heads ? tasks : std::vector<Task>{}, rng);
    m.params.set_backbone_trainable(!m.policy.freeze_backbone);
    return m;
}

// Copy that drops every task head; shares the remaining tensors.
inline Model strip_heads(const Model& model) {
    Model stripped = model;
    stripped.heads.dense.clear();
    stripped.heads.loc.clear();
    stripped.heads.tasks.clear();
    return stripped;
}

// ---------------------------------------------------------------------------
// Census and compute accounting

enum class CensusMode { train, inference };

// Scalar counts per owner group. Inference mode excludes the head set
// entirely (task heads are unused at test time; the paper's accounting
// compares backbone-side sizes).
inline std::map<std::string, long> count_params(const Model& model, CensusMode mode) {
    auto census = param_census(model.params.entries());
    census["heads"] = 0;
    if (mode == CensusMode::train) {
        for (const auto& e : model.heads.entries()) census["heads"] += e.tensor->numel();
    }
    return census;
}

inline long census_total(const std::map<std::string, long>& census) {
    long total = 0;
    for (const auto& [k, v] : census) total += v;
    return total;
}

// Multiply-accumulate counts for one sample's forward pass, from shapes.
inline std::map<std::string, long> count_macs(const Model& model, CensusMode mode) {
    const auto& c = model.cfg;
    const long S = c.seq_len(), d = c.embed_dim, N = c.patches();
    std::map<std::string, long> macs;
    macs["patch_embed"] = N * c.patch_dim() * d;
    long block = 4 * S * d * d;      // q,k,v,o projections
    block += 2 * S * S * d;          // scores and weighted values, all heads
    block += 2 * S * d * 4 * d;      // ffn
    macs["blocks"] = c.layers * block;
    if (model.params.prompt_wide) macs["prompt_projection"] = model.params.prompt_wide->shape[1] * d;
    macs["cls_head"] = d * c.classes;
    long heads = 0;
    if (mode == CensusMode::train) {
        const long taps = static_cast<long>(c.tap_layers.size());
        const long d_up = d / 2;
        for (Task t : model.heads.tasks) {
            if (is_dense(t)) {
                heads += taps * N * d * d_up;                  // tap projections
                heads += N * (taps * d_up + d) * d;            // fusion hidden
                heads += N * d * dense_channels(t);            // fusion out
            } else if (t == Task::pose) {
                heads += d * kPoseDims;
            } else {
                heads += d * kBoxSlots * 4;
            }
        }
    }
    macs["task_heads"] = heads;
    return macs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    double top1 = 0.0;
    std::vector<long> per_class_correct;
    std::vector<long> per_class_count;
    std::map<std::string, long> census_train;
    std::map<std::string, long> census_inference;
    std::map<std::string, long> macs_inference;
};

// Top-1 over downstream logits. Task heads are never invoked and no
// synthetic inputs are touched.
inline EvalReport evaluate(const Model& model, const std::vector<VideoSample>& dataset, int threads = 0) {
    EvalReport report;
    report.per_class_correct.assign(model.cfg.classes, 0);
    report.per_class_count.assign(model.cfg.classes, 0);
    const long n = static_cast<long>(dataset.size());
    for (const auto& sample : dataset) {
        if (!sample.annotations.action.has_value()) throw ShapeMismatch("evaluate: sample without action label");
    }
    std::vector<long> predicted(n, -1);
    if (threads == 0) threads = detail::default_threads();
    detail::parallel_for(n, threads, [&](long i) {
        const auto& sample = dataset[i];
        auto out = model.forward_sample(sample.pixels);
        auto logits = predict_cls(model.heads, out.f_cls);
        long arg = 0;
        for (long cidx = 1; cidx < model.cfg.classes; ++cidx) {
            if (logits->values[cidx] > logits->values[arg]) arg = cidx;
        }
        predicted[i] = arg;
    });
    long correct = 0;
    for (long i = 0; i < n; ++i) {
        const int truth = *dataset[i].annotations.action;
        report.per_class_count[truth] += 1;
        if (predicted[i] == truth) {
            report.per_class_correct[truth] += 1;
            ++correct;
        }
    }
    report.top1 = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
    report.census_train = count_params(model, CensusMode::train);
    report.census_inference = count_params(model, CensusMode::inference);
    report.macs_inference = count_macs(model, CensusMode::inference);
    return report;
}

}  // namespace pvit
