#pragma once

// Kinematic tabletop world: scenes built from task specs, analytic depth
// rendering of boxes, gripper kinematics, scripted expert demonstrations and
// closed-loop rollouts scored by success rate and completion time.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stvla/geometry.hpp"
#include "stvla/policy.hpp"

namespace stvla {

enum class ViewId { third = 0, wrist = 1 };
std::string view_name(ViewId v);

struct SimFrame {
  double timestamp = 0.0;
  ViewId view = ViewId::third;
  DepthMap depth;
  CameraIntrinsics intrinsics;
  CameraPose pose;
  ProprioState proprio;

  bool operator==(const SimFrame& o) const;
};

// Both views rendered at one instant, indexed by ViewId.
using FramePair = std::array<SimFrame, 2>;

std::vector<WorldPoint> unproject_patch_centers(const SimFrame& frame, PatchGrid grid);

enum class ObjectKind { cube, block, slab, plate };
std::string kind_noun(ObjectKind k);
// Colors are labels only; depth rendering cannot see them.
const std::vector<std::string>& object_colors();
Vec3 kind_half_extents(ObjectKind k);

struct Box {
  Vec3 center;
  Mat3 rotation;  // box -> world
  Vec3 half_extents;
};

struct SimObject {
  int id = 0;
  ObjectKind kind = ObjectKind::cube;
  std::string color;
  Vec3 half_extents;
  Vec3 position;
  Mat3 rotation;
  bool graspable = true;

  Box box() const { return {position, rotation, half_extents}; }
};

struct TargetSpec {
  int object_id = 0;
  int plate_id = 0;
  Vec3 goal_center;
  double radius = 0.05;
};

struct Gripper {
  Vec3 position;
  Mat3 rotation;
  bool closed = false;
  int held = -1;
  Vec3 held_offset;   // object position in the gripper frame
  Mat3 held_rotation; // object rotation relative to the gripper
};

struct Workspace {
  Vec3 lo{-0.3, -0.3, 0.0};
  Vec3 hi{0.3, 0.3, 0.4};

  bool contains(const Vec3& p) const;
  Vec3 clamp(const Vec3& p) const;
};

struct SimConfig {
  std::size_t image_size = 16;
  PatchGrid patches{4, 4};
  double grasp_radius = 0.03;
  double goal_radius = 0.05;
  double dt_min = 0.05;
  Workspace workspace;
  Vec3 home{0.0, 0.0, 0.2};
  double home_jitter = 0.02;
  double slot_jitter = 0.02;
  double yaw_jitter = 0.3;
  // Expert profile.
  double v_max = 0.5;
  double a_max = 2.0;
  double hover_z = 0.14;
  std::size_t dwell_steps = 3;
  // Cameras.
  Vec3 third_eye{0.0, -0.45, 0.75};
  Vec3 third_target{0.0, 0.03, 0.0};
  double third_focal = 20.0;
  double wrist_height = 0.12;
  double wrist_focal = 9.5;
};

struct World {
  std::vector<SimObject> objects;
  std::vector<TargetSpec> targets;
  Gripper gripper;
  double clock = 0.0;
  Workspace workspace;
  std::uint64_t seed = 0;
  Box table{{0.0, 0.0, -0.05}, Mat3::identity(), {1.0, 1.0, 0.05}};

  const SimObject& object(int id) const;
  SimObject& object(int id);
};

// ---- tasks ----

enum class Suite { spatial = 0, object = 1, goal = 2, long_horizon = 3 };
std::string suite_name(Suite s);
Suite parse_suite(const std::string& name);

struct ObjectPlacement {
  ObjectKind kind;
  std::string color;
  std::size_t slot;
};

// Fixed layout and goal of one subtask; episodes of a subtask differ by jitter.
struct SubtaskDef {
  std::size_t id = 0;
  Suite suite = Suite::spatial;
  std::string instruction;
  std::vector<ObjectPlacement> objects;  // graspable
  std::vector<std::size_t> plates;       // plate slots
  std::vector<std::pair<std::size_t, std::size_t>> targets;  // (object index, plate index), in order
};

struct TaskSpec {
  Suite suite = Suite::spatial;  // template id
  std::size_t subtask = 0;
  std::string instruction;
  std::uint64_t scene_seed = 0;
  bool pre_solved = false;  // degenerate: every target object starts at its goal

  bool operator==(const TaskSpec&) const = default;
};

// Slot centers (x, y) on the table.
const std::vector<Vec3>& table_slots();
// The 40-subtask benchmark: 10 per suite, deterministic.
const std::vector<SubtaskDef>& benchmark_subtasks();
// Every word any template can produce.
std::vector<std::string> template_words();
InstructionVocab benchmark_vocab();
TaskSpec make_task(std::size_t subtask, std::uint64_t scene_seed);

// Builds the scene; infeasible jitter draws are retried with the next sub-seed.
World build_world(const TaskSpec& spec, const SimConfig& cfg = {});

// ---- rendering and kinematics ----

// Per-pixel camera-frame depth of the nearest box hit (0 where nothing is hit),
// rounded to f32 precision.
DepthMap render_depth(const std::vector<Box>& boxes, const CameraIntrinsics& k, const CameraPose& pose,
                      std::size_t width, std::size_t height);
CameraIntrinsics view_intrinsics(ViewId view, const SimConfig& cfg);
CameraPose view_pose(const World& world, ViewId view, const SimConfig& cfg);
SimFrame render_frame(const World& world, ViewId view, const SimConfig& cfg = {});
FramePair render_views(const World& world, const SimConfig& cfg = {});
ProprioState proprio_of(const World& world);

// Distance from p to the surface of the box (0 inside).
double box_distance(const Box& box, const Vec3& p);

// Applies the grip command, then the pose increment, then advances the clock.
void step(World& world, const SpatioTemporalAction& a, const SimConfig& cfg = {});
bool task_success(const World& world);

// ---- demonstrations ----

struct Episode {
  TaskSpec spec;
  double hz = 20.0;
  std::vector<FramePair> frames;                // observation before each step
  std::vector<SpatioTemporalAction> actions;    // per-step spatial actions (delta_t = 1/hz)
  std::vector<std::size_t> active_target;       // target index being worked on at each step
  std::vector<Vec3> target_position;            // active target object position before each step
  std::vector<Vec3> goal_position;              // active target goal before each step
  double duration = 0.0;                        // final simulator clock
  bool success = false;

  std::size_t steps() const { return actions.size(); }
};

Episode generate_episode(const TaskSpec& spec, double hz = 20.0, const SimConfig& cfg = {});

// ---- rollouts ----

struct PolicyObservation {
  const std::vector<FramePair>& history;  // oldest first, always `history_len` entries
  const TaskSpec& spec;
  ProprioState proprio;
  std::size_t decision = 0;
};

using RolloutPolicy = std::function<SpatioTemporalAction(const PolicyObservation&)>;

struct TraceRow {
  double t = 0.0;
  Vec3 position;
  Vec3 orientation;
  double grip = 0.0;
  std::string event;
};

struct RolloutResult {
  bool success = false;
  double completion_time = 0.0;
  std::size_t decisions = 0;
  std::string failure_reason;
  std::vector<TraceRow> trace;
  std::vector<SpatioTemporalAction> actions;

  bool operator==(const RolloutResult& o) const;
};

struct RolloutOptions {
  double budget = 20.0;
  std::size_t history_len = 2;
  std::size_t max_decisions = 1000;
};

RolloutResult evaluate_rollout(World world, const RolloutPolicy& policy, const TaskSpec& spec,
                               const RolloutOptions& options = {}, const SimConfig& cfg = {});

// Replays a fixed action list, then null actions of duration `idle_dt`.
RolloutPolicy replay_policy(std::vector<SpatioTemporalAction> actions, double idle_dt);
RolloutPolicy null_policy(double dt);

// `t, x, y, z, rx, ry, rz, grip, event` lines (with a header line).
void write_trajectory(const std::string& path, const std::vector<TraceRow>& trace);
// Top-down xy path and speed-vs-time panels.
void write_trajectory_svg(const std::string& path, const std::vector<TraceRow>& trace, const std::string& title);

}  // namespace stvla
