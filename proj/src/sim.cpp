#include "stvla/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "stvla/nn.hpp"

namespace stvla {

std::string view_name(ViewId v) { return v == ViewId::third ? "third" : "wrist"; }

bool SimFrame::operator==(const SimFrame& o) const {
  return timestamp == o.timestamp && view == o.view && depth.width == o.depth.width &&
         depth.height == o.depth.height && depth.values == o.depth.values && intrinsics.fx == o.intrinsics.fx &&
         intrinsics.fy == o.intrinsics.fy && intrinsics.cx == o.intrinsics.cx && intrinsics.cy == o.intrinsics.cy &&
         pose.rotation == o.pose.rotation && pose.translation == o.pose.translation && proprio == o.proprio;
}

std::vector<WorldPoint> unproject_patch_centers(const SimFrame& frame, PatchGrid grid) {
  return unproject_patch_centers(frame.depth, frame.intrinsics, frame.pose, grid);
}

std::string kind_noun(ObjectKind k) {
  switch (k) {
    case ObjectKind::cube: return "cube";
    case ObjectKind::block: return "block";
    case ObjectKind::slab: return "slab";
    case ObjectKind::plate: return "plate";
  }
  return "?";
}

const std::vector<std::string>& object_colors() {
  static const std::vector<std::string> c = {"red", "blue", "green", "yellow"};
  return c;
}

Vec3 kind_half_extents(ObjectKind k) {
  switch (k) {
    case ObjectKind::cube: return {0.025, 0.025, 0.025};
    case ObjectKind::block: return {0.018, 0.018, 0.05};
    case ObjectKind::slab: return {0.035, 0.035, 0.012};
    case ObjectKind::plate: return {0.05, 0.05, 0.006};
  }
  return {};
}

bool Workspace::contains(const Vec3& p) const {
  return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
}

Vec3 Workspace::clamp(const Vec3& p) const {
  return {std::clamp(p.x, lo.x, hi.x), std::clamp(p.y, lo.y, hi.y), std::clamp(p.z, lo.z, hi.z)};
}

const SimObject& World::object(int id) const {
  for (const auto& o : objects)
    if (o.id == id) return o;
  throw std::out_of_range("World::object: no object " + std::to_string(id));
}

SimObject& World::object(int id) {
  for (auto& o : objects)
    if (o.id == id) return o;
  throw std::out_of_range("World::object: no object " + std::to_string(id));
}

// ---- tasks ----

std::string suite_name(Suite s) {
  switch (s) {
    case Suite::spatial: return "spatial";
    case Suite::object: return "object";
    case Suite::goal: return "goal";
    case Suite::long_horizon: return "long";
  }
  return "?";
}

Suite parse_suite(const std::string& name) {
  if (name == "spatial") return Suite::spatial;
  if (name == "object") return Suite::object;
  if (name == "goal") return Suite::goal;
  if (name == "long") return Suite::long_horizon;
  throw std::invalid_argument("unknown suite '" + name + "'");
}

const std::vector<Vec3>& table_slots() {
  static const std::vector<Vec3> slots = [] {
    std::vector<Vec3> s;
    for (double y : {-0.12, 0.03, 0.18})
      for (double x : {-0.15, 0.0, 0.15}) s.push_back({x, y, 0.0});
    return s;
  }();
  return slots;
}

namespace {

constexpr ObjectKind kGraspable[] = {ObjectKind::cube, ObjectKind::block, ObjectKind::slab};

struct Look {
  ObjectKind kind;
  std::string color;

  bool operator==(const Look&) const = default;
  std::string text() const { return color + " " + kind_noun(kind); }
};

Look draw_look(Rng& rng) {
  const ObjectKind k = kGraspable[rng() % 3];
  return {k, object_colors()[rng() % object_colors().size()]};
}

// A look different from every one in `taken`.
Look draw_other(Rng& rng, const std::vector<Look>& taken) {
  for (;;) {
    Look l = draw_look(rng);
    if (std::find(taken.begin(), taken.end(), l) == taken.end()) return l;
  }
}

std::vector<std::size_t> take_slots(Rng& rng, std::size_t n) {
  auto all = shuffled_indices(table_slots().size(), rng());
  all.resize(n);
  return all;
}

// True when slot `a` stands in relation `rel` to slot `b`.
bool related(const std::string& rel, std::size_t a, std::size_t b) {
  const Vec3& pa = table_slots()[a];
  const Vec3& pb = table_slots()[b];
  if (rel == "left") return pa.x < pb.x - 0.1;
  if (rel == "right") return pa.x > pb.x + 0.1;
  if (rel == "front") return pa.y < pb.y - 0.1;
  return pa.y > pb.y + 0.1;  // back
}

const char* const kRelations[] = {"left", "right", "front", "back"};

SubtaskDef draw_subtask(Suite suite, Rng& rng) {
  SubtaskDef d;
  d.suite = suite;
  for (;;) {
    d.objects.clear();
    d.plates.clear();
    d.targets.clear();
    switch (suite) {
      case Suite::spatial: {
        // Two identical objects told apart by their relative placement, plus one distractor.
        const Look l = draw_look(rng);
        const Look other = draw_other(rng, {l});
        const std::string rel = kRelations[rng() % 4];
        const auto s = take_slots(rng, 4);
        if (!related(rel, s[0], s[1])) continue;
        d.objects = {{l.kind, l.color, s[0]}, {l.kind, l.color, s[1]}, {other.kind, other.color, s[2]}};
        d.plates = {s[3]};
        d.targets = {{0, 0}};
        d.instruction = "pick up the " + l.text() + " on the " + rel + " and place it on the plate";
        break;
      }
      case Suite::object: {
        // One object of each shape; colors are free.
        const auto s = take_slots(rng, 4);
        const auto order = shuffled_indices(3, rng());
        std::vector<Look> looks;
        for (std::size_t i = 0; i < 3; ++i)
          looks.push_back({kGraspable[order[i]], object_colors()[rng() % object_colors().size()]});
        for (std::size_t i = 0; i < 3; ++i) d.objects.push_back({looks[i].kind, looks[i].color, s[i]});
        d.plates = {s[3]};
        const std::size_t t = rng() % 3;
        d.targets = {{t, 0}};
        d.instruction = "pick up the " + looks[t].text() + " and place it on the plate";
        break;
      }
      case Suite::goal: {
        const std::string rel = kRelations[rng() % 4];
        const auto s = take_slots(rng, 5);
        if (!related(rel, s[3], s[4])) continue;
        const Look l0 = draw_look(rng);
        const Look l1 = draw_other(rng, {l0});
        d.objects = {{l0.kind, l0.color, s[0]}, {l1.kind, l1.color, s[1]}};
        d.plates = {s[3], s[4]};
        d.targets = {{0, 0}};
        d.instruction = "put the " + l0.text() + " on the " + rel + " plate";
        break;
      }
      case Suite::long_horizon: {
        const bool left_first = rng() % 2 == 0;
        const auto s = take_slots(rng, 5);
        if (!related("left", s[3], s[4])) continue;
        const Look l0 = draw_look(rng);
        const Look l1 = draw_other(rng, {l0});
        d.objects = {{l0.kind, l0.color, s[0]}, {l1.kind, l1.color, s[1]}};
        d.plates = {s[3], s[4]};
        const std::size_t p0 = left_first ? 0 : 1;
        d.targets = {{0, p0}, {1, 1 - p0}};
        d.instruction = "put the " + l0.text() + " on the " + (left_first ? "left" : "right") +
                        " plate then put the " + l1.text() + " on the " + (left_first ? "right" : "left") +
                        " plate";
        break;
      }
    }
    return d;
  }
}

}  // namespace

const std::vector<SubtaskDef>& benchmark_subtasks() {
  static const std::vector<SubtaskDef> defs = [] {
    std::vector<SubtaskDef> out;
    Rng rng(20240611);
    std::set<std::string> seen;
    for (Suite suite : {Suite::spatial, Suite::object, Suite::goal, Suite::long_horizon}) {
      std::size_t made = 0;
      while (made < 10) {
        SubtaskDef d = draw_subtask(suite, rng);
        // One layout per instruction, so the instruction identifies the subtask.
        if (!seen.insert(d.instruction).second) continue;
        d.id = out.size();
        out.push_back(std::move(d));
        ++made;
      }
    }
    return out;
  }();
  return defs;
}

std::vector<std::string> template_words() {
  std::vector<std::string> words = {"pick", "up", "the", "on", "and", "place", "it", "plate", "put", "then"};
  for (const char* r : kRelations) words.push_back(r);
  for (ObjectKind k : kGraspable) words.push_back(kind_noun(k));
  for (const auto& c : object_colors()) words.push_back(c);
  return words;
}

InstructionVocab benchmark_vocab() { return InstructionVocab(template_words()); }

TaskSpec make_task(std::size_t subtask, std::uint64_t scene_seed) {
  const auto& defs = benchmark_subtasks();
  if (subtask >= defs.size()) throw std::out_of_range("make_task: subtask " + std::to_string(subtask));
  TaskSpec t;
  t.suite = defs[subtask].suite;
  t.subtask = subtask;
  t.instruction = defs[subtask].instruction;
  t.scene_seed = scene_seed;
  return t;
}

namespace {

double yaw_of(const Mat3& r) { return std::atan2(r(1, 0), r(0, 0)); }

bool scene_feasible(const World& w) {
  for (std::size_t i = 0; i < w.objects.size(); ++i) {
    const auto& a = w.objects[i];
    if (!w.workspace.contains(a.position)) return false;
    for (std::size_t j = i + 1; j < w.objects.size(); ++j) {
      const auto& b = w.objects[j];
      const double ra = std::hypot(a.half_extents.x, a.half_extents.y);
      const double rb = std::hypot(b.half_extents.x, b.half_extents.y);
      if (std::hypot(a.position.x - b.position.x, a.position.y - b.position.y) < ra + rb + 0.005) return false;
    }
  }
  return w.workspace.contains(w.gripper.position);
}

}  // namespace

World build_world(const TaskSpec& spec, const SimConfig& cfg) {
  const auto& defs = benchmark_subtasks();
  if (spec.subtask >= defs.size()) throw std::out_of_range("build_world: subtask " + std::to_string(spec.subtask));
  const SubtaskDef& def = defs[spec.subtask];
  for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
    Rng rng(spec.scene_seed * 1000003ull + attempt);
    World w;
    w.workspace = cfg.workspace;
    w.seed = spec.scene_seed;
    int next_id = 0;
    auto place = [&](ObjectKind kind, const std::string& color, std::size_t slot, bool graspable) {
      SimObject o;
      o.id = next_id++;
      o.kind = kind;
      o.color = color;
      o.half_extents = kind_half_extents(kind);
      const Vec3& s = table_slots()[slot];
      const double jx = uniform(rng, -cfg.slot_jitter, cfg.slot_jitter);
      const double jy = uniform(rng, -cfg.slot_jitter, cfg.slot_jitter);
      o.position = {s.x + jx, s.y + jy, o.half_extents.z};
      o.rotation = rotation_z(uniform(rng, -cfg.yaw_jitter, cfg.yaw_jitter));
      o.graspable = graspable;
      w.objects.push_back(o);
      return o.id;
    };
    std::vector<int> obj_ids, plate_ids;
    for (const auto& p : def.objects) obj_ids.push_back(place(p.kind, p.color, p.slot, true));
    for (std::size_t slot : def.plates) plate_ids.push_back(place(ObjectKind::plate, "white", slot, false));
    for (const auto& [oi, pi] : def.targets) {
      const SimObject& plate = w.object(plate_ids[pi]);
      const SimObject& obj = w.object(obj_ids[oi]);
      TargetSpec t;
      t.object_id = obj.id;
      t.plate_id = plate.id;
      t.goal_center = {plate.position.x, plate.position.y, 2.0 * plate.half_extents.z + obj.half_extents.z};
      t.radius = cfg.goal_radius;
      w.targets.push_back(t);
    }
    w.gripper.position = cfg.home + Vec3{uniform(rng, -cfg.home_jitter, cfg.home_jitter),
                                         uniform(rng, -cfg.home_jitter, cfg.home_jitter),
                                         uniform(rng, -cfg.home_jitter, cfg.home_jitter)};
    if (spec.pre_solved) {
      for (const auto& t : w.targets) {
        SimObject& o = w.object(t.object_id);
        o.position = t.goal_center;
      }
    }
    if (spec.pre_solved || scene_feasible(w)) return w;
  }
  throw std::runtime_error("build_world: no feasible scene for subtask " + std::to_string(spec.subtask) +
                           " seed " + std::to_string(spec.scene_seed) + " after 100 tries");
}

// ---- rendering ----

namespace {

// Entry distance along o + s*d into the box, or +inf. Rays starting inside are ignored.
double ray_box(const Box& b, const Vec3& o, const Vec3& d) {
  const Mat3 rt = b.rotation.transposed();
  const Vec3 lo = rt * (o - b.center);
  const Vec3 ld = rt * d;
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  const double oc[3] = {lo.x, lo.y, lo.z}, dc[3] = {ld.x, ld.y, ld.z};
  const double h[3] = {b.half_extents.x, b.half_extents.y, b.half_extents.z};
  for (int a = 0; a < 3; ++a) {
    if (dc[a] == 0.0) {
      if (std::abs(oc[a]) > h[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (-h[a] - oc[a]) / dc[a], tb = (h[a] - oc[a]) / dc[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0.0) return std::numeric_limits<double>::infinity();
  return t0;
}

}  // namespace

DepthMap render_depth(const std::vector<Box>& boxes, const CameraIntrinsics& k, const CameraPose& pose,
                      std::size_t width, std::size_t height) {
  DepthMap out(width, height);
  const Mat3 rt = pose.rotation.transposed();
  const Vec3 origin = pose.center();
  for (std::size_t row = 0; row < height; ++row) {
    for (std::size_t col = 0; col < width; ++col) {
      // Ray direction with unit camera-frame z, so the hit parameter is the depth.
      const Vec3 dir_cam{(static_cast<double>(col) + 0.5 - k.cx) / k.fx,
                         (static_cast<double>(row) + 0.5 - k.cy) / k.fy, 1.0};
      const Vec3 dir = rt * dir_cam;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : boxes) best = std::min(best, ray_box(b, origin, dir));
      out.at(col, row) = std::isfinite(best) ? static_cast<double>(static_cast<float>(best)) : 0.0;
    }
  }
  return out;
}

CameraIntrinsics view_intrinsics(ViewId view, const SimConfig& cfg) {
  const double f = view == ViewId::third ? cfg.third_focal : cfg.wrist_focal;
  const double c = 0.5 * static_cast<double>(cfg.image_size);
  return {f, f, c, c};
}

CameraPose view_pose(const World& world, ViewId view, const SimConfig& cfg) {
  if (view == ViewId::third)
    return CameraPose::from_center(look_at_rotation(cfg.third_eye, cfg.third_target, {0, 0, 1}), cfg.third_eye);
  // Wrist camera: above the tool, looking along the gripper's -z, image x along gripper x.
  const Mat3& g = world.gripper.rotation;
  const Vec3 right = g * Vec3{1, 0, 0};
  const Vec3 down = g * Vec3{0, -1, 0};
  const Vec3 fwd = g * Vec3{0, 0, -1};
  Mat3 r;
  r.m = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
  return CameraPose::from_center(r, world.gripper.position + g * Vec3{0, 0, cfg.wrist_height});
}

ProprioState proprio_of(const World& world) {
  return {world.gripper.position, axis_angle_from_rotation(world.gripper.rotation), world.gripper.closed ? 1.0 : 0.0};
}

SimFrame render_frame(const World& world, ViewId view, const SimConfig& cfg) {
  std::vector<Box> boxes{world.table};
  for (const auto& o : world.objects) boxes.push_back(o.box());
  SimFrame f;
  f.timestamp = world.clock;
  f.view = view;
  f.intrinsics = view_intrinsics(view, cfg);
  f.pose = view_pose(world, view, cfg);
  f.depth = render_depth(boxes, f.intrinsics, f.pose, cfg.image_size, cfg.image_size);
  f.proprio = proprio_of(world);
  return f;
}

FramePair render_views(const World& world, const SimConfig& cfg) {
  return {render_frame(world, ViewId::third, cfg), render_frame(world, ViewId::wrist, cfg)};
}

// ---- kinematics ----

double box_distance(const Box& box, const Vec3& p) {
  const Vec3 l = box.rotation.transposed() * (p - box.center);
  const Vec3 q{std::max(std::abs(l.x) - box.half_extents.x, 0.0), std::max(std::abs(l.y) - box.half_extents.y, 0.0),
               std::max(std::abs(l.z) - box.half_extents.z, 0.0)};
  return norm(q);
}

void step(World& world, const SpatioTemporalAction& a, const SimConfig& cfg) {
  if (!a.finite()) throw std::invalid_argument("step: NaN or infinite action");
  if (!(a.delta_t > 0.0)) throw std::invalid_argument("step: delta_t must be positive");
  Gripper& g = world.gripper;
  const bool close = a.grip >= 0.5;
  if (close && !g.closed) {
    g.closed = true;
    double best = cfg.grasp_radius;
    int best_id = -1;
    for (const auto& o : world.objects) {
      if (!o.graspable) continue;
      const double d = box_distance(o.box(), g.position);
      if (d <= best) {
        best = d;
        best_id = o.id;
      }
    }
    if (best_id >= 0) {
      const SimObject& o = world.object(best_id);
      const Mat3 gt = g.rotation.transposed();
      g.held = best_id;
      g.held_offset = gt * (o.position - g.position);
      g.held_rotation = gt * o.rotation;
    }
  } else if (!close && g.closed) {
    g.closed = false;
    g.held = -1;
  }
  g.position = world.workspace.clamp(g.position + a.delta_x);
  if (a.delta_theta.x != 0.0 || a.delta_theta.y != 0.0 || a.delta_theta.z != 0.0)
    g.rotation = rotation_from_axis_angle(a.delta_theta) * g.rotation;
  if (g.held >= 0) {
    SimObject& o = world.object(g.held);
    o.position = g.position + g.rotation * g.held_offset;
    o.rotation = g.rotation * g.held_rotation;
  }
  world.clock += a.delta_t;
}

bool task_success(const World& world) {
  if (world.gripper.closed || world.gripper.held >= 0) return false;
  for (const auto& t : world.targets)
    if (norm(world.object(t.object_id).position - t.goal_center) > t.radius) return false;
  return true;
}

// ---- expert ----

namespace {

// Fraction of a rest-to-rest trapezoidal move completed at time tau.
double trapezoid_fraction(double tau, double dist, double v, double a) {
  if (dist <= 0.0) return 1.0;
  const double d_acc = v * v / (2.0 * a);
  double total, s;
  if (dist >= 2.0 * d_acc) {
    total = dist / v + v / a;
    const double ta = v / a;
    if (tau <= ta)
      s = 0.5 * a * tau * tau;
    else if (tau <= total - ta)
      s = d_acc + v * (tau - ta);
    else {
      const double r = total - tau;
      s = dist - 0.5 * a * r * r;
    }
  } else {
    total = 2.0 * std::sqrt(dist / a);
    const double half = 0.5 * total;
    if (tau <= half)
      s = 0.5 * a * tau * tau;
    else {
      const double r = total - tau;
      s = dist - 0.5 * a * r * r;
    }
  }
  return std::clamp(s / dist, 0.0, 1.0);
}

double trapezoid_duration(double dist, double v, double a) {
  const double d_acc = v * v / (2.0 * a);
  return dist >= 2.0 * d_acc ? dist / v + v / a : 2.0 * std::sqrt(dist / a);
}

double wrap_quarter_turn(double yaw) {
  // Boxes are symmetric under quarter turns about z.
  const double q = M_PI / 2.0;
  return yaw - q * std::round(yaw / q);
}

class ExpertRecorder {
 public:
  ExpertRecorder(World& world, Episode& ep, const SimConfig& cfg) : w_(world), ep_(ep), cfg_(cfg) {}

  bool done() const { return done_; }

  void act(const SpatioTemporalAction& a, std::size_t target) {
    if (done_) return;
    const TargetSpec& t = w_.targets.empty() ? TargetSpec{} : w_.targets[target];
    ep_.frames.push_back(render_views(w_, cfg_));
    ep_.actions.push_back(a);
    ep_.active_target.push_back(target);
    ep_.target_position.push_back(w_.targets.empty() ? Vec3{} : w_.object(t.object_id).position);
    ep_.goal_position.push_back(t.goal_center);
    step(w_, a, cfg_);
    if (task_success(w_)) done_ = true;
  }

  void move_to(const Vec3& goal, double yaw_goal, double grip, std::size_t target) {
    const Vec3 start = w_.gripper.position;
    const double yaw0 = yaw_of(w_.gripper.rotation);
    const double dyaw = yaw_goal - yaw0;
    const double dist = norm(goal - start);
    if (dist == 0.0 && dyaw == 0.0) return;
    const double dur = std::max(trapezoid_duration(dist, cfg_.v_max, cfg_.a_max), std::abs(dyaw) / 2.0);
    const double dt = 1.0 / ep_.hz;
    const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil(dur * ep_.hz - 1e-9)));
    double prev = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
      const double tau = dur * static_cast<double>(k) / static_cast<double>(n);
      const double s = k == n ? 1.0 : (dist > 0.0 ? trapezoid_fraction(tau, dist, cfg_.v_max, cfg_.a_max)
                                                  : tau / dur);
      SpatioTemporalAction a;
      a.delta_x = (goal - start) * (s - prev);
      a.delta_theta = {0.0, 0.0, dyaw * (s - prev)};
      a.grip = grip;
      a.delta_t = dt;
      act(a, target);
      prev = s;
    }
  }

  void dwell(double grip, std::size_t target) {
    for (std::size_t k = 0; k < cfg_.dwell_steps; ++k) {
      SpatioTemporalAction a;
      a.grip = grip;
      a.delta_t = 1.0 / ep_.hz;
      act(a, target);
    }
  }

 private:
  World& w_;
  Episode& ep_;
  const SimConfig& cfg_;
  bool done_ = false;
};

}  // namespace

Episode generate_episode(const TaskSpec& spec, double hz, const SimConfig& cfg) {
  if (!(hz > 0.0)) throw std::invalid_argument("generate_episode: hz must be positive");
  World w = build_world(spec, cfg);
  Episode ep;
  ep.spec = spec;
  ep.hz = hz;
  ExpertRecorder rec(w, ep, cfg);
  if (spec.pre_solved) {
    SpatioTemporalAction null;
    null.delta_t = 1.0 / hz;
    rec.act(null, 0);
  } else {
    for (std::size_t ti = 0; ti < w.targets.size() && !rec.done(); ++ti) {
      const TargetSpec t = w.targets[ti];
      const SimObject obj = w.object(t.object_id);
      const double yaw = wrap_quarter_turn(yaw_of(obj.rotation));
      rec.move_to({obj.position.x, obj.position.y, cfg.hover_z}, yaw, 0.0, ti);
      rec.move_to(obj.position, yaw, 0.0, ti);
      rec.dwell(1.0, ti);
      rec.move_to({obj.position.x, obj.position.y, cfg.hover_z}, yaw, 1.0, ti);
      rec.move_to({t.goal_center.x, t.goal_center.y, cfg.hover_z}, yaw, 1.0, ti);
      rec.move_to(t.goal_center, yaw, 1.0, ti);
      rec.dwell(0.0, ti);
      rec.move_to({t.goal_center.x, t.goal_center.y, cfg.hover_z}, yaw, 0.0, ti);
    }
  }
  ep.duration = w.clock;
  ep.success = task_success(w);
  return ep;
}

// ---- rollouts ----

bool RolloutResult::operator==(const RolloutResult& o) const {
  if (success != o.success || completion_time != o.completion_time || decisions != o.decisions ||
      failure_reason != o.failure_reason || trace.size() != o.trace.size() || actions != o.actions)
    return false;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& a = trace[i];
    const auto& b = o.trace[i];
    if (a.t != b.t || !(a.position == b.position) || !(a.orientation == b.orientation) || a.grip != b.grip ||
        a.event != b.event)
      return false;
  }
  return true;
}

namespace {
TraceRow trace_row(const World& w, std::string event) {
  return {w.clock, w.gripper.position, axis_angle_from_rotation(w.gripper.rotation), w.gripper.closed ? 1.0 : 0.0,
          std::move(event)};
}
}  // namespace

RolloutResult evaluate_rollout(World world, const RolloutPolicy& policy, const TaskSpec& spec,
                               const RolloutOptions& options, const SimConfig& cfg) {
  if (!(options.budget > 0.0)) throw std::invalid_argument("evaluate_rollout: budget must be positive");
  if (options.history_len == 0) throw std::invalid_argument("evaluate_rollout: history_len must be >= 1");
  RolloutResult r;
  r.trace.push_back(trace_row(world, "start"));
  std::vector<FramePair> history;
  while (true) {
    if (world.clock >= options.budget || r.decisions >= options.max_decisions) {
      r.failure_reason = world.clock >= options.budget ? "budget exhausted" : "decision limit";
      r.completion_time = options.budget;
      r.trace.push_back(trace_row(world, "timeout"));
      break;
    }
    FramePair now = render_views(world, cfg);
    if (history.empty()) history.assign(options.history_len, now);
    else {
      history.erase(history.begin());
      history.push_back(std::move(now));
    }
    SpatioTemporalAction a;
    try {
      a = policy(PolicyObservation{history, spec, proprio_of(world), r.decisions});
      if (!a.finite()) throw numeric_blowup("numeric blowup: non-finite action");
    } catch (const numeric_blowup& e) {
      r.failure_reason = e.what();
      r.completion_time = options.budget;
      r.trace.push_back(trace_row(world, "failure"));
      break;
    }
    a.delta_t = std::max(a.delta_t, cfg.dt_min);
    const int held_before = world.gripper.held;
    step(world, a, cfg);
    r.actions.push_back(a);
    ++r.decisions;
    std::string event = "step";
    if (world.gripper.held != held_before) event = world.gripper.held >= 0 ? "grasp" : "release";
    const bool ok = task_success(world);
    r.trace.push_back(trace_row(world, ok ? "success" : event));
    if (ok) {
      r.success = true;
      r.completion_time = world.clock;
      break;
    }
  }
  return r;
}

RolloutPolicy replay_policy(std::vector<SpatioTemporalAction> actions, double idle_dt) {
  return [actions = std::move(actions), idle_dt](const PolicyObservation& obs) {
    if (obs.decision < actions.size()) return actions[obs.decision];
    SpatioTemporalAction idle;
    idle.grip = obs.proprio.grip_state;
    idle.delta_t = idle_dt;
    return idle;
  };
}

RolloutPolicy null_policy(double dt) {
  return [dt](const PolicyObservation&) {
    SpatioTemporalAction a;
    a.delta_t = dt;
    return a;
  };
}

// ---- trajectory output ----

void write_trajectory(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trajectory: cannot open " + path);
  out << "t,x,y,z,rx,ry,rz,grip,event\n" << std::setprecision(17);
  for (const auto& r : trace)
    out << r.t << ',' << r.position.x << ',' << r.position.y << ',' << r.position.z << ',' << r.orientation.x << ','
        << r.orientation.y << ',' << r.orientation.z << ',' << r.grip << ',' << r.event << '\n';
}

void write_trajectory_svg(const std::string& path, const std::vector<TraceRow>& trace, const std::string& title) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trajectory_svg: cannot open " + path);
  const double w = 360, h = 300, pad = 30;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * w << "\" height=\"" << h + 20 << "\">\n";
  out << "<text x=\"10\" y=\"16\" font-family=\"monospace\" font-size=\"12\">" << title << "</text>\n";
  // Left panel: top-down path over the workspace.
  auto px = [&](double x) { return pad + (x + 0.3) / 0.6 * (w - 2 * pad); };
  auto py = [&](double y) { return 20 + h - pad - (y + 0.3) / 0.6 * (h - 2 * pad); };
  out << "<rect x=\"" << pad << "\" y=\"" << 20 + pad << "\" width=\"" << w - 2 * pad << "\" height=\"" << h - 2 * pad
      << "\" fill=\"none\" stroke=\"#999\"/>\n<polyline fill=\"none\" stroke=\"#1f77b4\" points=\"";
  for (const auto& r : trace) out << px(r.position.x) << ',' << py(r.position.y) << ' ';
  out << "\"/>\n";
  for (const auto& r : trace)
    if (r.event == "grasp" || r.event == "release" || r.event == "success")
      out << "<circle cx=\"" << px(r.position.x) << "\" cy=\"" << py(r.position.y) << "\" r=\"3\" fill=\""
          << (r.event == "grasp" ? "#d62728" : "#2ca02c") << "\"/>\n";
  // Right panel: piecewise-constant speed between trace rows.
  double t_end = trace.empty() ? 1.0 : std::max(trace.back().t, 1e-6), v_peak = 1e-6;
  std::vector<std::array<double, 3>> segs;  // t0, t1, speed
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const double dt = trace[i].t - trace[i - 1].t;
    if (dt <= 0) continue;
    const double v = norm(trace[i].position - trace[i - 1].position) / dt;
    segs.push_back({trace[i - 1].t, trace[i].t, v});
    v_peak = std::max(v_peak, v);
  }
  auto sx = [&](double t) { return w + pad + t / t_end * (w - 2 * pad); };
  auto sy = [&](double v) { return 20 + h - pad - v / v_peak * (h - 2 * pad); };
  out << "<rect x=\"" << w + pad << "\" y=\"" << 20 + pad << "\" width=\"" << w - 2 * pad << "\" height=\""
      << h - 2 * pad << "\" fill=\"none\" stroke=\"#999\"/>\n<polyline fill=\"none\" stroke=\"#ff7f0e\" points=\"";
  for (const auto& s : segs) out << sx(s[0]) << ',' << sy(s[2]) << ' ' << sx(s[1]) << ',' << sy(s[2]) << ' ';
  out << "\"/>\n<text x=\"" << w + pad << "\" y=\"" << 20 + h - 8 << "\" font-family=\"monospace\" font-size=\"10\">"
      << "speed (m/s) vs t (s), peak " << v_peak << ", end " << t_end << "</text>\n</svg>\n";
}

}  // namespace stvla
