#pragma once

// Mixed-origin batch assembly, Adam with decoupled weight decay, half-period
// cosine schedule, the epoch loop, and checkpointing.
//
// Every sample is a pure function of (config seed, stream, index), so the
// trainer's only mutable state is the step counter, the parameters and the
// optimizer moments; that is what checkpoints store, and why a resumed run
// reproduces an uninterrupted one bit for bit.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "pvit/harness.hpp"
#include "pvit/serialize.hpp"

namespace pvit {

struct ExhaustedStream : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule and optimizer

inline double cosine_lr(long step, long total_steps, double base_lr) {
    if (step < 0 || step > total_steps || total_steps < 1) throw std::runtime_error("cosine_lr: step outside [0, total]");
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long step = 0;

    void init(const std::vector<ParamEntry>& entries) {
        m.clear();
        v.clear();
        for (const auto& e : entries) {
            m.emplace_back(e.tensor->values.size(), 0.0);
            v.emplace_back(e.tensor->values.size(), 0.0);
        }
        step = 0;
    }
};

using GradMap = std::unordered_map<const Tensor*, std::vector<double>>;

// Bias-corrected Adam with decoupled weight decay. Frozen parameter groups
// (requires_grad == false) are skipped entirely: no moment update, no decay.
inline void adam_step(const std::vector<ParamEntry>& entries, const GradMap& grads, AdamState& state, double lr,
                      double beta1, double beta2, double eps, double weight_decay) {
    if (state.m.size() != entries.size()) throw ShapeMismatch("adam_step: state not initialized for these entries");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    static const std::vector<double> kNoGrad;
    for (size_t i = 0; i < entries.size(); ++i) {
        auto& p = *entries[i].tensor;
        if (!p.requires_grad) continue;
        auto it = grads.find(&p);
        const std::vector<double>& g = it == grads.end() ? kNoGrad : it->second;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < p.values.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.values[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.values[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic sample streams

class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual long size() const = 0;
    virtual VideoSample get(long index) const = 0;
};

// Samples derived from (base seed, stream salt, index). Synthetic samples
// draw their task mask from the configured pool, each task with probability
// 1/2 and at least one task kept.
class GeneratedSource : public SampleSource {
public:
    GeneratedSource(SceneConfig scene, std::uint64_t base_seed, const std::string& salt, Origin origin, long count,
                    std::vector<Task> pool = {})
        : scene_(scene), base_(mix_seed(base_seed, hash_str(salt))), origin_(origin), count_(count), pool_(std::move(pool)) {}

    long size() const override { return count_; }

    std::uint64_t sample_seed(long index) const { return mix_seed(base_, static_cast<std::uint64_t>(index)); }

    TaskMask mask_for(long index) const {
        if (origin_ == Origin::real) return 0;
        Rng rng(mix_seed(sample_seed(index), hash_str("mask")));
        TaskMask m = 0;
        for (Task t : pool_) {
            if (rng.uniform() < 0.5) m |= mask_of({t});
        }
        if (m == 0 && !pool_.empty()) m = mask_of({pool_[rng.below(pool_.size())]});
        if (m == 0) throw InvalidMask("GeneratedSource: empty task pool for synthetic stream");
        return m;
    }

    VideoSample get(long index) const override {
        if (index < 0 || index >= count_) throw ExhaustedStream("GeneratedSource: index out of range");
        return generate_sample(scene_, sample_seed(index), origin_, mask_for(index));
    }

    // Regenerates only one task's annotation of a sample (donor lookups).
    VideoSample get_with_mask(long index, TaskMask mask) const {
        return generate_sample(scene_, sample_seed(index), Origin::synthetic, mask);
    }

private:
    SceneConfig scene_;
    std::uint64_t base_;
    Origin origin_;
    long count_;
    std::vector<Task> pool_;
};

// Applies the per-task annotation permutation lazily: sample i receives task
// t's annotation from its seeded donor, exactly as shuffle_annotations would
// assign it on a materialized dataset.
class ShuffledSource : public SampleSource {
public:
    ShuffledSource(GeneratedSource inner, std::uint64_t shuffle_seed) : inner_(std::move(inner)) {
        const long n = inner_.size();
        std::vector<TaskMask> masks(n);
        for (long i = 0; i < n; ++i) masks[i] = inner_.mask_for(i);
        for (Task t : kAllTasks) {
            auto& donor = donor_[static_cast<int>(t)];
            donor.assign(n, -1);
            std::vector<long> carriers;
            for (long i = 0; i < n; ++i) {
                if (mask_has(masks[i], t)) carriers.push_back(i);
            }
            if (carriers.size() < 2) continue;
            std::vector<long> perm(carriers.size());
            for (size_t k = 0; k < perm.size(); ++k) perm[k] = static_cast<long>(k);
            Rng rng(mix_seed(shuffle_seed, hash_str(std::string("shuffle-") + task_name(t))));
            for (size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
            // Carrier at position k hands its annotation to carrier perm[k].
            for (size_t k = 0; k < carriers.size(); ++k) donor[carriers[perm[k]]] = carriers[k];
        }
    }

    long size() const override { return inner_.size(); }

    VideoSample get(long index) const override {
        VideoSample s = inner_.get(index);
        for (Task t : kAllTasks) {
            if (!s.annotations.has(t)) continue;
            const long donor = donor_[static_cast<int>(t)][index];
            if (donor < 0 || donor == index) continue;
            VideoSample d = inner_.get_with_mask(donor, mask_of({t}));
            switch (t) {
                case Task::depth: s.annotations.depth = std::move(d.annotations.depth); break;
                case Task::normal: s.annotations.normal = std::move(d.annotations.normal); break;
                case Task::segm: s.annotations.segm = std::move(d.annotations.segm); break;
                case Task::pose: s.annotations.pose = std::move(d.annotations.pose); break;
                case Task::boxes: s.annotations.boxes = std::move(d.annotations.boxes); break;
            }
        }
        return s;
    }

private:
    GeneratedSource inner_;
    std::array<std::vector<long>, kTaskCount> donor_;
};

// ---------------------------------------------------------------------------
// Batch assembly

// Deterministic batch for a given step: synthetic samples first (cycling
// through the synthetic stream), then real samples in per-epoch shuffled
// order with the trailing partial batch dropped.
inline std::vector<VideoSample> make_batch(const SampleSource& real, const SampleSource* synth, long synth_per_batch,
                                           long batch_size, std::uint64_t seed, long step) {
    const long real_n = batch_size - synth_per_batch;
    if (real_n < 1) throw ExhaustedStream("make_batch: batch has no real slots");
    if (real.size() < real_n) throw ExhaustedStream("make_batch: real stream smaller than a batch");
    std::vector<VideoSample> batch;
    batch.reserve(batch_size);
    if (synth_per_batch > 0) {
        if (!synth || synth->size() == 0) throw ExhaustedStream("make_batch: synthetic stream required but empty");
        for (long k = 0; k < synth_per_batch; ++k) {
            batch.push_back(synth->get((step * synth_per_batch + k) % synth->size()));
        }
    }
    const long steps_per_epoch = real.size() / real_n;
    const long epoch = step / steps_per_epoch;
    const long pos = (step % steps_per_epoch) * real_n;
    std::vector<long> order(real.size());
    for (long i = 0; i < real.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, hash_str("real-order-epoch-" + std::to_string(epoch))));
    for (long i = real.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    for (long k = 0; k < real_n; ++k) batch.push_back(real.get(order[pos + k]));
    return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointMagic = 0x4b435650;  // "PVCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Rolling per-epoch accumulators; saved so a mid-epoch resume finishes the
// epoch with identical metrics.
struct EpochAccum {
    double total_sum = 0.0;
    long steps = 0;
    std::array<double, kTaskCount> task_sum{};
    std::array<long, kTaskCount> task_n{};
    double dt_sum = 0.0;
    long dt_n = 0;
    long train_correct = 0;
    long train_seen = 0;
};

inline void save_checkpoint(const std::string& path, const Model& model, const AdamState& adam, const RunConfig& config,
                            const EpochAccum& accum, long step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    io::write_u32(os, kCheckpointMagic);
    io::write_u32(os, kCheckpointVersion);
    io::write_u64(os, config_digest(config));
    io::write_u64(os, static_cast<std::uint64_t>(step));
    io::write_u64(os, config.seed);  // the PRNG state: streams are counter-based
    const auto entries = model.all_entries();
    io::write_u64(os, entries.size());
    for (const auto& e : entries) {
        io::write_str(os, e.name);
        io::write_f64_vec(os, e.tensor->values);
    }
    io::write_u64(os, static_cast<std::uint64_t>(adam.step));
    for (size_t i = 0; i < entries.size(); ++i) {
        io::write_f64_vec(os, adam.m[i]);
        io::write_f64_vec(os, adam.v[i]);
    }
    io::write_f64(os, accum.total_sum);
    io::write_u64(os, static_cast<std::uint64_t>(accum.steps));
    for (int t = 0; t < kTaskCount; ++t) {
        io::write_f64(os, accum.task_sum[t]);
        io::write_u64(os, static_cast<std::uint64_t>(accum.task_n[t]));
    }
    io::write_f64(os, accum.dt_sum);
    io::write_u64(os, static_cast<std::uint64_t>(accum.dt_n));
    io::write_u64(os, static_cast<std::uint64_t>(accum.train_correct));
    io::write_u64(os, static_cast<std::uint64_t>(accum.train_seen));
    if (!os) throw IoError("checkpoint write failed: " + path);
}

inline long load_checkpoint(const std::string& path, Model& model, AdamState& adam, const RunConfig& config,
                            EpochAccum& accum) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    if (io::read_u32(is) != kCheckpointMagic) throw IoError("bad checkpoint magic");
    if (io::read_u32(is) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
    if (io::read_u64(is) != config_digest(config)) throw IoError("checkpoint does not match this configuration");
    const long step = static_cast<long>(io::read_u64(is));
    io::read_u64(is);  // seed; informational, already in the config
    const auto entries = model.all_entries();
    if (io::read_u64(is) != entries.size()) throw IoError("checkpoint entry count mismatch");
    for (const auto& e : entries) {
        if (io::read_str(is) != e.name) throw IoError("checkpoint entry order mismatch at " + e.name);
        auto vals = io::read_f64_vec(is);
        if (vals.size() != e.tensor->values.size()) throw IoError("checkpoint entry size mismatch at " + e.name);
        e.tensor->values = std::move(vals);
    }
    adam.init(entries);
    adam.step = static_cast<long>(io::read_u64(is));
    for (size_t i = 0; i < entries.size(); ++i) {
        adam.m[i] = io::read_f64_vec(is);
        adam.v[i] = io::read_f64_vec(is);
    }
    accum.total_sum = io::read_f64(is);
    accum.steps = static_cast<long>(io::read_u64(is));
    for (int t = 0; t < kTaskCount; ++t) {
        accum.task_sum[t] = io::read_f64(is);
        accum.task_n[t] = static_cast<long>(io::read_u64(is));
    }
    accum.dt_sum = io::read_f64(is);
    accum.dt_n = static_cast<long>(io::read_u64(is));
    accum.train_correct = static_cast<long>(io::read_u64(is));
    accum.train_seen = static_cast<long>(io::read_u64(is));
    return step;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochMetrics {
    long epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    std::array<double, kTaskCount> task_loss{};  // NaN when the task had no carriers
    double loss_dt = std::nan("");
    double train_acc = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    std::string metrics_csv;  // rows for the epochs this run executed
    double final_val_acc = 0.0;
    long total_steps = 0;
};

namespace detail {

inline void append_metric(std::string& csv, double v) {
    csv += ',';
    if (std::isnan(v)) return;  // absent tasks leave the cell empty
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    csv += buf;
}

inline std::string metrics_header() {
    return "epoch,lr,loss_total,loss_dt,loss_depth,loss_normal,loss_segm,loss_pose,loss_boxes,train_acc,val_acc\n";
}

inline void append_row(std::string& csv, const EpochMetrics& m) {
    csv += std::to_string(m.epoch);
    append_metric(csv, m.lr);
    append_metric(csv, m.loss_total);
    append_metric(csv, m.loss_dt);
    for (int t = 0; t < kTaskCount; ++t) append_metric(csv, m.task_loss[t]);
    append_metric(csv, m.train_acc);
    append_metric(csv, m.val_acc);
    csv += '\n';
}

struct SampleResult {
    GradMap grads;
    std::array<double, kTaskCount> task_value{};
    std::array<bool, kTaskCount> task_present{};
    double dt_value = 0.0;
    bool dt_present = false;
    bool train_correct = false;
};

}  // namespace detail

// Per-sample weighted partial loss; the batch loss is the sum over samples.
// counts[t] and dt_count are the batch-level carrier counts, so per-task
// means match the batch-level total_loss definition.
inline TensorPtr sample_partial_loss(const Model& model, const VideoSample& sample, const SamplePrediction& pred,
                                     const LossWeights& w, const std::array<long, kTaskCount>& counts, long dt_count) {
    TensorPtr loss;
    if (sample.annotations.action.has_value() && dt_count > 0) {
        loss = scale(downstream_loss(pred.logits, *sample.annotations.action), w.dt / static_cast<double>(dt_count));
    }
    for (Task t : model.tasks) {
        if (!sample.annotations.has(t)) continue;
        auto it = pred.task_outputs.find(t);
        if (it == pred.task_outputs.end()) continue;
        auto l = scale(task_loss(t, it->second, sample, w), w.of(t) / static_cast<double>(counts[static_cast<int>(t)]));
        loss = loss ? add(loss, l) : l;
    }
    return loss;
}

inline TrainResult train(Model& model, const RunConfig& config, const std::string& out_dir = "",
                         const std::string& resume_from = "") {
    const TrainConfig& tc = config.trainer;
    tc.validate();
    const SceneConfig scene = config.scene_config();

    // The real half of every batch is identical across variants: variants
    // without synthetic data drop the synthetic slots rather than refilling
    // them, so paired runs consume the same real stream step for step and
    // differ only in the auxiliary supervision they receive.
    GeneratedSource real(scene, config.seed, "train-real", Origin::real, config.data.real_train);
    const long real_per_batch = tc.batch_size - tc.synth_per_batch();
    std::unique_ptr<SampleSource> synth;
    long synth_per_batch = 0;
    if (model.policy.use_synthetic && tc.synth_ratio > 0.0) {
        GeneratedSource base(scene, config.seed, "train-synth", Origin::synthetic, config.data.synthetic, model.tasks);
        if (model.policy.shuffle_annotations) {
            synth = std::make_unique<ShuffledSource>(std::move(base), mix_seed(config.seed, hash_str("annotation-shuffle")));
        } else {
            synth = std::make_unique<GeneratedSource>(std::move(base));
        }
        synth_per_batch = tc.synth_per_batch();
    }
    const long steps_per_epoch = config.data.real_train / real_per_batch;
    if (steps_per_epoch < 1) throw ExhaustedStream("train: real stream smaller than one batch");
    const long total_steps = tc.epochs * steps_per_epoch;

    GeneratedSource val_source(scene, config.seed, "val", Origin::real, config.data.val);
    std::vector<VideoSample> val_set;
    val_set.reserve(config.data.val);
    for (long i = 0; i < config.data.val; ++i) val_set.push_back(val_source.get(i));

    model.params.set_backbone_trainable(!model.policy.freeze_backbone);
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    const auto entries = model.all_entries();
    AdamState adam;
    adam.init(entries);
    EpochAccum accum;
    long start_step = 0;
    if (!resume_from.empty()) {
        start_step = load_checkpoint(resume_from, model, adam, config, accum);
    }

    const int threads = tc.threads > 0 ? tc.threads : detail::default_threads();

    TrainResult result;
    result.total_steps = total_steps;
    result.metrics_csv = detail::metrics_header();
    std::ofstream live_csv;
    if (!out_dir.empty()) {
        live_csv.open(out_dir + "/metrics.csv", std::ios::binary);
        live_csv << detail::metrics_header();
        live_csv.flush();
    }

    for (long step = start_step; step < total_steps; ++step) {
        const double lr = cosine_lr(step, total_steps, tc.base_lr);
        auto batch = make_batch(real, synth.get(), synth_per_batch, real_per_batch + synth_per_batch, config.seed, step);

        std::array<long, kTaskCount> counts{};
        long dt_count = 0;
        for (const auto& s : batch) {
            if (s.annotations.action.has_value()) ++dt_count;
            for (Task t : model.tasks) {
                if (s.annotations.has(t)) ++counts[static_cast<int>(t)];
            }
        }

        std::vector<detail::SampleResult> results(batch.size());
        detail::parallel_for(static_cast<long>(batch.size()), threads, [&](long i) {
            const VideoSample& sample = batch[i];
            auto out = model.forward_sample(sample.pixels);
            auto pred = model.predict(sample, out);
            auto& r = results[i];
            if (pred.logits) {
                long arg = 0;
                for (long c = 1; c < model.cfg.classes; ++c) {
                    if (pred.logits->values[c] > pred.logits->values[arg]) arg = c;
                }
                r.dt_present = true;
                r.dt_value = downstream_loss(pred.logits, *sample.annotations.action)->scalar();
                r.train_correct = arg == *sample.annotations.action;
            }
            for (const auto& [t, p] : pred.task_outputs) {
                r.task_present[static_cast<int>(t)] = true;
                r.task_value[static_cast<int>(t)] = task_loss(t, p, sample, config.losses)->scalar();
            }
            auto loss = sample_partial_loss(model, sample, pred, config.losses, counts, dt_count);
            if (loss) r.grads = backward_grads(loss);
        });

        // Deterministic reduction in sample order, then one optimizer step.
        GradMap grads;
        for (const auto& e : entries) {
            if (!e.tensor->requires_grad) continue;
            auto& acc = grads[e.tensor.get()];
            acc.assign(e.tensor->values.size(), 0.0);
            for (const auto& r : results) {
                auto it = r.grads.find(e.tensor.get());
                if (it == r.grads.end()) continue;
                for (size_t j = 0; j < acc.size(); ++j) acc[j] += it->second[j];
            }
        }
        adam_step(entries, grads, adam, lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);

        // Step-level aggregation into the epoch accumulators.
        double step_total = 0.0;
        {
            double dt_sum = 0.0;
            std::array<double, kTaskCount> task_sums{};
            for (const auto& r : results) {
                if (r.dt_present) {
                    dt_sum += r.dt_value;
                    accum.dt_sum += r.dt_value;
                    accum.dt_n += 1;
                    accum.train_seen += 1;
                    accum.train_correct += r.train_correct ? 1 : 0;
                }
                for (int t = 0; t < kTaskCount; ++t) {
                    if (r.task_present[t]) {
                        task_sums[t] += r.task_value[t];
                        accum.task_sum[t] += r.task_value[t];
                        accum.task_n[t] += 1;
                    }
                }
            }
            if (dt_count > 0) step_total += config.losses.dt * dt_sum / static_cast<double>(dt_count);
            for (int t = 0; t < kTaskCount; ++t) {
                if (counts[t] > 0) step_total += config.losses.of(static_cast<Task>(t)) * task_sums[t] / static_cast<double>(counts[t]);
            }
            accum.total_sum += step_total;
            accum.steps += 1;
        }

        if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && !out_dir.empty()) {
            save_checkpoint(out_dir + "/ckpt_" + std::to_string(step + 1) + ".pvck", model, adam, config, accum, step + 1);
        }

        if ((step + 1) % steps_per_epoch == 0) {
            EpochMetrics m;
            m.epoch = (step + 1) / steps_per_epoch;
            m.lr = lr;
            m.loss_total = accum.total_sum / static_cast<double>(accum.steps);
            m.loss_dt = accum.dt_n > 0 ? accum.dt_sum / static_cast<double>(accum.dt_n) : std::nan("");
            for (int t = 0; t < kTaskCount; ++t) {
                m.task_loss[t] = accum.task_n[t] > 0 ? accum.task_sum[t] / static_cast<double>(accum.task_n[t]) : std::nan("");
            }
            m.train_acc = accum.train_seen > 0 ? static_cast<double>(accum.train_correct) / accum.train_seen : 0.0;
            m.val_acc = evaluate(model, val_set, threads).top1;
            result.history.push_back(m);
            const size_t row_start = result.metrics_csv.size();
            detail::append_row(result.metrics_csv, m);
            if (live_csv.is_open()) {
                live_csv << result.metrics_csv.substr(row_start);
                live_csv.flush();
            }
            accum = EpochAccum{};
        }
    }

    result.final_val_acc = result.history.empty() ? 0.0 : result.history.back().val_acc;
    if (!out_dir.empty()) {
        save_checkpoint(out_dir + "/final.pvck", model, adam, config, accum, total_steps);
    }
    return result;
}

}  // namespace pvit
