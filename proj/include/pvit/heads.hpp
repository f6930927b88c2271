#pragma once

// Prediction heads. Localization tasks (pose, boxes) are a single affine
// map on the task-token output; dense tasks (depth, normal, segm) project
// the tapped patch maps per cell, concatenate them with the task token and
// run a small fusion MLP. The downstream head is an affine map on F_CLS.
// Heads exist only at training time; inference uses just the CLS head.

#include <map>
#include <string>
#include <vector>

#include "pvit/backbone.hpp"
#include "pvit/tasks.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

struct AffineHead {
    TensorPtr w;  // [in, out]
    TensorPtr b;  // [1, out]

    static AffineHead init(long in, long out, Rng& rng, double std) {
        return {randn({in, out}, rng, std, true), zeros({1, out}, true)};
    }

    TensorPtr apply(const TensorPtr& x) const { return add(matmul(x, w), b); }
};

struct DenseHead {
    // One projection per tapped layer, then a one-hidden-layer MLP over
    // [tap projections | task token] per spatial cell.
    std::vector<TensorPtr> tap_w;  // each [d, d_up]
    std::vector<TensorPtr> tap_b;  // each [1, d_up]
    AffineHead fuse1;              // [taps*d_up + d, d]
    AffineHead fuse2;              // [d, channels]

    static DenseHead init(long d, long taps, long channels, Rng& rng, double std) {
        DenseHead h;
        const long d_up = d / 2;
        for (long t = 0; t < taps; ++t) {
            h.tap_w.push_back(randn({d, d_up}, rng, std, true));
            h.tap_b.push_back(zeros({1, d_up}, true));
        }
        h.fuse1 = AffineHead::init(taps * d_up + d, d, rng, std);
        h.fuse2 = AffineHead::init(d, channels, rng, std);
        return h;
    }
};

struct HeadSet {
    AffineHead h_cls;                // [d, C]
    std::map<Task, DenseHead> dense; // depth, normal, segm
    std::map<Task, AffineHead> loc;  // pose, boxes
    std::vector<Task> tasks;         // configured task set (canonical order)

    static HeadSet init(const BackboneConfig& cfg, const std::vector<Task>& tasks, Rng& rng) {
        HeadSet hs;
        hs.tasks = tasks;
        const long d = cfg.embed_dim;
        hs.h_cls = AffineHead::init(d, cfg.classes, rng, cfg.init_std);
        const long taps = static_cast<long>(cfg.tap_layers.size());
        for (Task t : tasks) {
            if (is_dense(t)) {
                hs.dense[t] = DenseHead::init(d, taps, dense_channels(t), rng, cfg.init_std);
            } else if (t == Task::pose) {
                hs.loc[t] = AffineHead::init(d, kPoseDims, rng, cfg.init_std);
            } else {
                hs.loc[t] = AffineHead::init(d, kBoxSlots * 4, rng, cfg.init_std);
            }
        }
        return hs;
    }

    std::vector<ParamEntry> entries() const {
        std::vector<ParamEntry> out;
        out.push_back({ParamGroup::heads, "head.cls.w", h_cls.w});
        out.push_back({ParamGroup::heads, "head.cls.b", h_cls.b});
        for (const auto& [t, head] : dense) {
            const std::string prefix = std::string("head.") + task_name(t) + ".";
            for (size_t i = 0; i < head.tap_w.size(); ++i) {
                out.push_back({ParamGroup::heads, prefix + "tap" + std::to_string(i) + ".w", head.tap_w[i]});
                out.push_back({ParamGroup::heads, prefix + "tap" + std::to_string(i) + ".b", head.tap_b[i]});
            }
            out.push_back({ParamGroup::heads, prefix + "fuse1.w", head.fuse1.w});
            out.push_back({ParamGroup::heads, prefix + "fuse1.b", head.fuse1.b});
            out.push_back({ParamGroup::heads, prefix + "fuse2.w", head.fuse2.w});
            out.push_back({ParamGroup::heads, prefix + "fuse2.b", head.fuse2.b});
        }
        for (const auto& [t, head] : loc) {
            const std::string prefix = std::string("head.") + task_name(t) + ".";
            out.push_back({ParamGroup::heads, prefix + "w", head.w});
            out.push_back({ParamGroup::heads, prefix + "b", head.b});
        }
        return out;
    }
};

// ---------------------------------------------------------------------------

// Downstream logits [C]; no softmax (the loss applies it).
inline TensorPtr predict_cls(const HeadSet& heads, const TensorPtr& f_cls) {
    auto logits = heads.h_cls.apply(f_cls);  // [1, C]
    return reshape(logits, {logits->shape[1]});
}

// Pose -> [1,75]. Boxes -> [O,4] squashed to (0,1) and reordered so that
// x1 <= x2 and y1 <= y2 for any head output.
inline TensorPtr predict_localization(const HeadSet& heads, Task task, const TensorPtr& f_prompt) {
    auto it = heads.loc.find(task);
    if (it == heads.loc.end()) throw UnknownTask(std::string("predict_localization: ") + task_name(task));
    auto raw = it->second.apply(f_prompt);  // [1, out]
    if (task == Task::pose) return raw;
    auto coords = sigmoid(reshape(raw, {kBoxSlots, 4}));
    auto c0 = slice(coords, 1, 0, 1);
    auto c1 = slice(coords, 1, 1, 1);
    auto c2 = slice(coords, 1, 2, 1);
    auto c3 = slice(coords, 1, 3, 1);
    return concat({emin(c0, c2), emin(c1, c3), emax(c0, c2), emax(c1, c3)}, 1);
}

// Dense prediction [T, gh, gw, channels]: per spatial cell, project each
// tapped token, concatenate the projections with the task token and apply
// the fusion MLP.
inline TensorPtr predict_dense(const HeadSet& heads, Task task, const TensorPtr& f_prompt,
                               const std::map<int, TensorPtr>& tapped, const BackboneConfig& cfg) {
    auto it = heads.dense.find(task);
    if (it == heads.dense.end()) throw UnknownTask(std::string("predict_dense: ") + task_name(task));
    const DenseHead& head = it->second;
    if (tapped.size() != head.tap_w.size()) throw ShapeMismatch("predict_dense: tapped map count mismatch");
    const long N = cfg.patches();
    std::vector<TensorPtr> pieces;
    size_t ti = 0;
    for (const auto& [layer, tokens] : tapped) {
        auto proj = add(matmul(tokens, head.tap_w[ti]), repeat_rows(head.tap_b[ti], N));
        pieces.push_back(proj);
        ++ti;
    }
    pieces.push_back(repeat_rows(f_prompt, N));
    auto fused = concat(pieces, 1);
    auto hidden = gelu(add(matmul(fused, head.fuse1.w), repeat_rows(head.fuse1.b, N)));
    auto out = add(matmul(hidden, head.fuse2.w), repeat_rows(head.fuse2.b, N));
    return reshape(out, {cfg.frames, cfg.grid_h(), cfg.grid_w(), dense_channels(task)});
}

}  // namespace pvit
