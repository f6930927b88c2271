#pragma once

// Task losses and the weighted total. Dense losses carry a 1/(gh*gw)
// per-frame prefactor and average over frames; MSE is the raw sum of
// squares with the explicit prefactor applied once (1/(gh*gw), 1/75).
// Only tasks with ground truth contribute: a task absent from a batch adds
// neither value nor gradient.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pvit/scenegen.hpp"
#include "pvit/tasks.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

struct ClassOutOfRange : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyBatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double depth = 0.5;
    double normal = 0.5;
    double segm = 0.1;
    double pose = 3.0;
    double boxes = 0.1;
    double dt = 1.0;
    double depth_clip = 10.0;  // scene units

    double of(Task t) const {
        switch (t) {
            case Task::depth: return depth;
            case Task::normal: return normal;
            case Task::segm: return segm;
            case Task::pose: return pose;
            case Task::boxes: return boxes;
        }
        throw UnknownTask("LossWeights::of");
    }
};

// ---------------------------------------------------------------------------
// Individual losses

// Mean over frames of (1/(gh*gw)) * sum of squared per-pixel error, with
// both maps clipped from above to focus on closer structure.
inline TensorPtr depth_loss(const TensorPtr& pred, const TensorPtr& gt, double clip) {
    if (pred->shape != gt->shape) throw ShapeMismatch("depth_loss: pred/gt shapes differ");
    if (clip <= 0.0) throw ShapeMismatch("depth_loss: clip must be > 0");
    const long frames = pred->shape[0];
    const long cells = pred->numel() / frames;
    auto diff = sub(clip_max(pred, clip), clip_max(gt, clip));
    return scale(sum_all(square(diff)), 1.0 / static_cast<double>(frames * cells));
}

// As depth but without clipping; the squared error is summed over the three
// channels, so the prefactor divides by cells only.
inline TensorPtr normal_loss(const TensorPtr& pred, const TensorPtr& gt) {
    if (pred->shape != gt->shape) throw ShapeMismatch("normal_loss: pred/gt shapes differ");
    const long frames = pred->shape[0];
    const long cells = pred->numel() / (frames * 3);
    return scale(sum_all(square(sub(pred, gt))), 1.0 / static_cast<double>(frames * cells));
}

// Softmax cross-entropy per cell, averaged over all cells and frames.
inline TensorPtr segm_loss(const TensorPtr& logits, const std::vector<int>& gt_classes) {
    const long channels = logits->shape.back();
    const long cells = logits->numel() / channels;
    if (static_cast<long>(gt_classes.size()) != cells) throw ShapeMismatch("segm_loss: class map size mismatch");
    std::vector<double> onehot(static_cast<size_t>(cells * channels), 0.0);
    for (long i = 0; i < cells; ++i) {
        const int c = gt_classes[i];
        if (c < 0 || c >= channels) throw ClassOutOfRange("segm_loss: class " + std::to_string(c));
        onehot[i * channels + c] = 1.0;
    }
    auto ls = log_softmax(reshape(logits, {cells, channels}), 1);
    auto picked = mul(ls, new_tensor({cells, channels}, std::move(onehot)));
    return scale(sum_all(picked), -1.0 / static_cast<double>(cells));
}

// (1/75) * sum of squared joint-coordinate error.
inline TensorPtr pose_loss(const TensorPtr& pred, const TensorPtr& gt) {
    if (pred->shape != gt->shape || pred->numel() != kPoseDims) throw ShapeMismatch("pose_loss: expected [1,75]");
    return scale(sum_all(square(sub(pred, gt))), 1.0 / static_cast<double>(kPoseDims));
}

// Generalized IoU of two [1,4] corner boxes, in (-1, 1]. When both boxes
// have zero area the value is 0 by convention and *degenerate is set.
inline TensorPtr giou(const TensorPtr& a, const TensorPtr& b, bool* degenerate = nullptr) {
    if (a->shape != Shape{1, 4} || b->shape != Shape{1, 4}) throw ShapeMismatch("giou: boxes must be [1,4]");
    auto coord = [](const TensorPtr& t, long i) { return slice(t, 1, i, 1); };
    const auto &av = a->values, &bv = b->values;
    if (av[0] > av[2] || av[1] > av[3] || bv[0] > bv[2] || bv[1] > bv[3]) {
        throw ShapeMismatch("giou: boxes must satisfy x1<=x2, y1<=y2");
    }
    const double area_a_v = (av[2] - av[0]) * (av[3] - av[1]);
    const double area_b_v = (bv[2] - bv[0]) * (bv[3] - bv[1]);
    if (area_a_v == 0.0 && area_b_v == 0.0) {
        if (degenerate) *degenerate = true;
        return scalar_tensor(0.0);
    }
    if (degenerate) *degenerate = false;

    auto ax1 = coord(a, 0), ay1 = coord(a, 1), ax2 = coord(a, 2), ay2 = coord(a, 3);
    auto bx1 = coord(b, 0), by1 = coord(b, 1), bx2 = coord(b, 2), by2 = coord(b, 3);

    auto iw = clip_min(sub(emin(ax2, bx2), emax(ax1, bx1)), 0.0);
    auto ih = clip_min(sub(emin(ay2, by2), emax(ay1, by1)), 0.0);
    auto inter = mul(iw, ih);
    auto area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
    auto area_b = mul(sub(bx2, bx1), sub(by2, by1));
    auto uni = sub(add(area_a, area_b), inter);
    auto hull = mul(sub(emax(ax2, bx2), emin(ax1, bx1)), sub(emax(ay2, by2), emin(ay1, by1)));
    auto iou = div(inter, uni);
    auto penalty = div(sub(hull, uni), hull);
    return reshape(sub(iou, penalty), {1});
}

// Mean over slots of [ L1(pred_i, gt_i) + (1 - GIoU(pred_i, gt_i)) ].
// Slots correspond by fixed order; there is no matching step.
inline TensorPtr box_loss(const TensorPtr& pred, const TensorPtr& gt) {
    if (pred->shape != gt->shape || pred->shape.size() != 2 || pred->shape[1] != 4) {
        throw ShapeMismatch("box_loss: expected matching [O,4]");
    }
    const long slots = pred->shape[0];
    TensorPtr acc;
    for (long i = 0; i < slots; ++i) {
        auto p = slice(pred, 0, i, 1);
        auto g = slice(gt, 0, i, 1);
        auto l1 = sum_all(absval(sub(p, g)));
        auto giou_term = sub(scalar_tensor(1.0), giou(p, g));
        auto term = add(l1, giou_term);
        acc = acc ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(slots));
}

// Softmax cross-entropy on the downstream logits.
inline TensorPtr downstream_loss(const TensorPtr& logits, int label) {
    if (logits->shape.size() != 1) throw ShapeMismatch("downstream_loss: logits must be 1-D");
    if (label < 0 || label >= logits->shape[0]) throw ClassOutOfRange("downstream_loss: label " + std::to_string(label));
    auto ls = log_softmax(logits, 0);
    return scale(slice(ls, 0, label, 1), -1.0);
}

// ---------------------------------------------------------------------------
// Ground-truth tensors from annotations

inline TensorPtr gt_depth_tensor(const VideoSample& s) {
    return new_tensor({s.frames, s.grid_h, s.grid_w, 1}, *s.annotations.depth);
}
inline TensorPtr gt_normal_tensor(const VideoSample& s) {
    return new_tensor({s.frames, s.grid_h, s.grid_w, 3}, *s.annotations.normal);
}
inline TensorPtr gt_pose_tensor(const VideoSample& s) { return new_tensor({1, kPoseDims}, *s.annotations.pose); }
inline TensorPtr gt_boxes_tensor(const VideoSample& s) { return new_tensor({kBoxSlots, 4}, *s.annotations.boxes); }

// Loss of one task for one sample, given the task head's prediction.
inline TensorPtr task_loss(Task t, const TensorPtr& pred, const VideoSample& sample, const LossWeights& w) {
    switch (t) {
        case Task::depth: return depth_loss(pred, gt_depth_tensor(sample), w.depth_clip);
        case Task::normal: return normal_loss(pred, gt_normal_tensor(sample));
        case Task::segm: return segm_loss(pred, *sample.annotations.segm);
        case Task::pose: return pose_loss(pred, gt_pose_tensor(sample));
        case Task::boxes: return box_loss(pred, gt_boxes_tensor(sample));
    }
    throw UnknownTask("task_loss");
}

// ---------------------------------------------------------------------------
// Weighted total over a batch

struct SamplePrediction {
    std::map<Task, TensorPtr> task_outputs;  // exactly the tasks the sample carries
    TensorPtr logits;                        // present when the sample has an action label
};

struct LossReport {
    std::map<Task, double> task_values;  // per-task loss averaged over carriers
    std::map<Task, long> task_counts;
    std::optional<double> dt_value;
    long dt_count = 0;
    double total = 0.0;
    TensorPtr total_tensor;  // graph-connected; null when no loss applies
};

// Per task, averages the task loss over only the samples carrying that
// annotation, multiplies by its lambda and sums. Tasks without carriers are
// absent from the report and contribute no gradient anywhere.
inline LossReport total_loss(const std::vector<SamplePrediction>& preds, const std::vector<const VideoSample*>& samples,
                             const LossWeights& w) {
    if (preds.empty() || preds.size() != samples.size()) throw EmptyBatch("total_loss: empty or mismatched batch");
    LossReport report;
    TensorPtr total;

    // Downstream term first, then auxiliary tasks in canonical order.
    {
        TensorPtr acc;
        long count = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            if (!samples[i]->annotations.action.has_value()) continue;
            if (!preds[i].logits) throw ShapeMismatch("total_loss: labeled sample without logits");
            auto l = downstream_loss(preds[i].logits, *samples[i]->annotations.action);
            acc = acc ? add(acc, l) : l;
            ++count;
        }
        if (count > 0) {
            auto mean = scale(acc, 1.0 / static_cast<double>(count));
            report.dt_value = mean->scalar();
            report.dt_count = count;
            auto weighted = scale(mean, w.dt);
            total = total ? add(total, weighted) : weighted;
        }
    }
    for (Task t : kAllTasks) {
        TensorPtr acc;
        long count = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            if (!samples[i]->annotations.has(t)) continue;
            auto it = preds[i].task_outputs.find(t);
            if (it == preds[i].task_outputs.end()) throw ShapeMismatch("total_loss: missing prediction for carried task");
            auto l = task_loss(t, it->second, *samples[i], w);
            acc = acc ? add(acc, l) : l;
            ++count;
        }
        if (count > 0) {
            auto mean = scale(acc, 1.0 / static_cast<double>(count));
            report.task_values[t] = mean->scalar();
            report.task_counts[t] = count;
            auto weighted = scale(mean, w.of(t));
            total = total ? add(total, weighted) : weighted;
        }
    }
    report.total_tensor = total;
    report.total = total ? total->scalar() : 0.0;
    return report;
}

}  // namespace pvit
