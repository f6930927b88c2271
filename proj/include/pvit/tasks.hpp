#pragma once

// Auxiliary task identifiers. The enum order is the canonical task order
// used for prompt token layout and reporting.

#include <array>
#include <stdexcept>
#include <string>

namespace pvit {

enum class Task : int { depth = 0, normal = 1, segm = 2, pose = 3, boxes = 4 };

inline constexpr int kTaskCount = 5;
inline constexpr std::array<Task, kTaskCount> kAllTasks = {Task::depth, Task::normal, Task::segm, Task::pose, Task::boxes};

// Segmentation classes rendered by the scene generator.
inline constexpr int kSegmClasses = 4;  // background, plane, shape, figure
// Fixed number of box slots per sample: shape in slot 0, figure in slot 1.
inline constexpr int kBoxSlots = 2;
// 25 joints x 3 coordinates.
inline constexpr int kPoseDims = 75;

struct UnknownTask : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const char* task_name(Task t) {
    switch (t) {
        case Task::depth: return "depth";
        case Task::normal: return "normal";
        case Task::segm: return "segm";
        case Task::pose: return "pose";
        case Task::boxes: return "boxes";
    }
    throw UnknownTask("task_name: bad task id");
}

inline Task task_from_name(const std::string& name) {
    for (Task t : kAllTasks) {
        if (name == task_name(t)) return t;
    }
    throw UnknownTask("unknown task: " + name);
}

// Output channels of the dense prediction grid for a dense task.
inline int dense_channels(Task t) {
    switch (t) {
        case Task::depth: return 1;
        case Task::normal: return 3;
        case Task::segm: return kSegmClasses;
        default: throw UnknownTask(std::string("dense_channels: ") + task_name(t) + " is not a dense task");
    }
}

inline bool is_dense(Task t) { return t == Task::depth || t == Task::normal || t == Task::segm; }

}  // namespace pvit
