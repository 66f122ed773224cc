#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "support.hpp"
#include "stvla/sim.hpp"

using namespace stvla;

namespace {

double dist(const Vec3& a, const Vec3& b) { return norm(a - b); }

SpatioTemporalAction move(Vec3 dx, double dt, double grip = 0.0) { return {dx, {}, grip, dt}; }

bool frames_equal(const Episode& a, const Episode& b) {
  if (a.frames.size() != b.frames.size()) return false;
  for (std::size_t i = 0; i < a.frames.size(); ++i)
    if (!(a.frames[i][0] == b.frames[i][0]) || !(a.frames[i][1] == b.frames[i][1])) return false;
  return true;
}

}  // namespace

TEST_CASE("benchmark has 40 subtasks, 10 per suite, unique instructions") {
  const auto& defs = benchmark_subtasks();
  REQUIRE(defs.size() == 40);
  std::set<std::string> seen;
  std::size_t per_suite[4] = {};
  const InstructionVocab vocab = benchmark_vocab();
  for (const auto& d : defs) {
    ++per_suite[static_cast<int>(d.suite)];
    seen.insert(d.instruction);
    CHECK_NOTHROW(vocab.tokenize(d.instruction));
  }
  CHECK(seen.size() == 40);
  for (auto n : per_suite) CHECK(n == 10);
  CHECK(parse_suite("long") == Suite::long_horizon);
  CHECK(suite_name(Suite::goal) == "goal");
  CHECK_THROWS(parse_suite("kitchen"));
  CHECK_THROWS(make_task(40, 1));
}

TEST_CASE("scenes are deterministic and inside the workspace") {
  for (std::size_t s = 0; s < 40; s += 3) {
    const TaskSpec spec = make_task(s, 1234 + s);
    const World a = build_world(spec), b = build_world(spec);
    REQUIRE(a.objects.size() == b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
      CHECK(a.objects[i].position == b.objects[i].position);
      CHECK(a.workspace.contains(a.objects[i].position));
    }
    CHECK(a.workspace.contains(a.gripper.position));
    CHECK_FALSE(a.targets.empty());
  }
}

TEST_CASE("empty scene renders all sentinel") {
  World w;
  const CameraIntrinsics k{8, 8, 8, 8};
  const DepthMap dm = render_depth({}, k, CameraPose::identity(), 16, 16);
  for (double v : dm.values) CHECK(v == 0.0);
}

TEST_CASE("unit box on the optical axis shows its near face") {
  const Box box{{0, 0, 1}, Mat3::identity(), {0.5, 0.5, 0.5}};
  const DepthMap dm = render_depth({box}, {8, 8, 8, 8}, CameraPose::identity(), 16, 16);
  CHECK(dm.at(8, 8) == 0.5);
  CHECK(dm.at(7, 7) == 0.5);
}

TEST_CASE("unprojected depth pixels lie on the rendered boxes") {
  for (std::size_t s : {0u, 13u, 27u, 35u}) {
    World w = build_world(make_task(s, 77));
    for (const auto view : {ViewId::third, ViewId::wrist}) {
      const SimFrame f = render_frame(w, view);
      REQUIRE(f.depth.width == 16);
      CHECK(orthonormality_error(f.pose.rotation) < 1e-9);
      std::size_t valid = 0;
      for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
          const double d = f.depth.at(c, r);
          if (d <= 0.0) continue;
          ++valid;
          const Vec3 p = unproject_pixel({c + 0.5, r + 0.5}, d, f.intrinsics, f.pose);
          double best = box_distance(w.table, p);
          for (const auto& o : w.objects) best = std::min(best, box_distance(o.box(), p));
          CHECK(best <= 1e-6);
        }
      CHECK(valid > 0);
    }
  }
}

TEST_CASE("step: translation, clock and null action") {
  World w = build_world(make_task(0, 5));
  const World before = w;
  step(w, move({0.1, 0, 0}, 0.5));
  CHECK(std::abs(w.gripper.position.x - (before.gripper.position.x + 0.1)) <= 1e-15);
  CHECK(w.gripper.position.y == before.gripper.position.y);
  CHECK(w.clock == 0.5);

  World n = before;
  step(n, move({}, 0.25));
  CHECK(n.clock == 0.25);
  CHECK(n.gripper.position == before.gripper.position);
  CHECK(n.gripper.rotation == before.gripper.rotation);
  CHECK(n.gripper.closed == before.gripper.closed);
  for (std::size_t i = 0; i < n.objects.size(); ++i) CHECK(n.objects[i].position == before.objects[i].position);

  CHECK_THROWS(step(n, move({NAN, 0, 0}, 0.1)));
  CHECK_THROWS(step(n, move({0, 0, 0}, 0.0)));
}

TEST_CASE("two half steps equal one full step") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    World a = build_world(make_task(i % 40, 100 + i)), b = a;
    const Vec3 dx{uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05)};
    const Vec3 dth{0, 0, uniform(rng, -0.5, 0.5)};
    const double dt = uniform(rng, 0.1, 1.0);
    step(a, {dx, dth, 0.0, dt});
    step(b, {dx / 2, dth / 2, 0.0, dt / 2});
    step(b, {dx / 2, dth / 2, 0.0, dt / 2});
    CHECK(dist(a.gripper.position, b.gripper.position) <= 1e-12);
    for (std::size_t k = 0; k < 9; ++k) CHECK(std::abs(a.gripper.rotation.m[k] - b.gripper.rotation.m[k]) <= 1e-12);
    CHECK(std::abs(a.clock - b.clock) <= 1e-12);
  }
}

TEST_CASE("workspace clamps the gripper") {
  World w = build_world(make_task(0, 5));
  step(w, move({5.0, -5.0, 5.0}, 0.5));
  CHECK(w.gripper.position == Vec3{0.3, -0.3, 0.4});
}

TEST_CASE("objects move only while attached, rigidly") {
  Rng rng(21);
  World w = build_world(make_task(20, 9));
  const SimObject target = w.object(w.targets[0].object_id);
  // Drive onto the object and close.
  step(w, move(target.position - w.gripper.position, 0.5));
  step(w, move({}, 0.1, 1.0));
  REQUIRE(w.gripper.held == target.id);
  const Vec3 offset = w.gripper.rotation.transposed() * (w.object(target.id).position - w.gripper.position);
  for (int i = 0; i < 50; ++i) {
    const World prev = w;
    const Vec3 dx{uniform(rng, -0.02, 0.02), uniform(rng, -0.02, 0.02), uniform(rng, 0.0, 0.02)};
    step(w, {dx, {0, 0, uniform(rng, -0.2, 0.2)}, 1.0, 0.1});
    const Vec3 now = w.gripper.rotation.transposed() * (w.object(target.id).position - w.gripper.position);
    CHECK(dist(now, offset) <= 1e-12);
    for (const auto& o : w.objects)
      if (o.id != target.id) CHECK(o.position == prev.object(o.id).position);
  }
  step(w, move({}, 0.1, 0.0));
  CHECK(w.gripper.held == -1);
  const Vec3 released = w.object(target.id).position;
  step(w, move({0.05, 0, 0}, 0.2));
  CHECK(w.object(target.id).position == released);
}

TEST_CASE("closing far from every object grasps nothing") {
  World w = build_world(make_task(0, 5));
  step(w, move({0, 0, 0.1}, 0.2));
  step(w, move({}, 0.1, 1.0));
  CHECK(w.gripper.closed);
  CHECK(w.gripper.held == -1);
}

TEST_CASE("pre-solved task: one null action") {
  TaskSpec spec = make_task(20, 3);
  spec.pre_solved = true;
  const Episode ep = generate_episode(spec, 20.0);
  REQUIRE(ep.steps() == 1);
  CHECK(ep.actions[0].delta_x == Vec3{});
  CHECK(ep.actions[0].grip == 0.0);
  CHECK(ep.success);
  CHECK(task_success(build_world(spec)));
}

TEST_CASE("episodes are deterministic per spec and hz") {
  const TaskSpec spec = make_task(7, 42);
  const Episode a = generate_episode(spec, 20.0), b = generate_episode(spec, 20.0);
  CHECK(a.actions == b.actions);
  CHECK(a.duration == b.duration);
  CHECK(frames_equal(a, b));
  CHECK(a.frames.size() == a.actions.size());
  CHECK_THROWS(generate_episode(spec, 0.0));
}

TEST_CASE("expert replay reproduces the recorded poses and succeeds") {
  for (std::size_t s = 0; s < 40; s += 5) {
    INFO("subtask " << s);
    const TaskSpec spec = make_task(s, 500 + s);
    const Episode ep = generate_episode(spec, 20.0);
    REQUIRE(ep.success);
    World w = build_world(spec);
    double clock = 0.0;
    for (std::size_t i = 0; i < ep.steps(); ++i) {
      const ProprioState p = proprio_of(w);
      CHECK(dist(p.position, ep.frames[i][0].proprio.position) <= 1e-9);
      CHECK(dist(p.orientation, ep.frames[i][0].proprio.orientation) <= 1e-9);
      CHECK(ep.actions[i].delta_t == 1.0 / 20.0);
      step(w, ep.actions[i]);
      clock += ep.actions[i].delta_t;
    }
    CHECK(task_success(w));
    CHECK(w.clock == clock);
    CHECK(w.clock == ep.duration);
  }
}

TEST_CASE("rollouts: expert replay and null policy") {
  const TaskSpec spec = make_task(12, 99);
  const Episode ep = generate_episode(spec, 20.0);
  RolloutOptions opt;
  opt.history_len = 1;
  const RolloutResult r = evaluate_rollout(build_world(spec), replay_policy(ep.actions, 0.05), spec, opt);
  CHECK(r.success);
  CHECK(r.completion_time == ep.duration);
  CHECK(r.decisions == ep.steps());

  const RolloutResult n = evaluate_rollout(build_world(spec), null_policy(0.5), spec, opt);
  CHECK_FALSE(n.success);
  CHECK(n.completion_time == opt.budget);
  CHECK(n.failure_reason == "budget exhausted");

  // Clock conservation: the final trace time is the sum of executed durations.
  double total = 0.0;
  for (const auto& a : n.actions) total += a.delta_t;
  CHECK(n.trace.back().t == total);

  TaskSpec solved = spec;
  solved.pre_solved = true;
  const RolloutResult s = evaluate_rollout(build_world(solved), null_policy(0.5), solved, opt);
  CHECK(s.success);
  CHECK(s.completion_time == 0.5);

  CHECK_THROWS(evaluate_rollout(build_world(spec), null_policy(0.5), spec, RolloutOptions{0.0, 1, 10}));
}

TEST_CASE("rollout blowups become failures") {
  const TaskSpec spec = make_task(3, 1);
  const RolloutPolicy bad = [](const PolicyObservation&) {
    SpatioTemporalAction a;
    a.delta_x.x = NAN;
    a.delta_t = 0.1;
    return a;
  };
  const RolloutResult r = evaluate_rollout(build_world(spec), bad, spec);
  CHECK_FALSE(r.success);
  CHECK(r.failure_reason.find("numeric blowup") != std::string::npos);
}

TEST_CASE("rollouts are deterministic and keep a full history") {
  const TaskSpec spec = make_task(25, 4);
  std::vector<std::size_t> sizes;
  const RolloutPolicy p = [&](const PolicyObservation& obs) {
    sizes.push_back(obs.history.size());
    return move({0.01, 0.0, -0.005}, 0.3, obs.decision % 4 == 3 ? 1.0 : 0.0);
  };
  RolloutOptions opt;
  opt.history_len = 3;
  const RolloutResult a = evaluate_rollout(build_world(spec), p, spec, opt);
  const RolloutResult b = evaluate_rollout(build_world(spec), p, spec, opt);
  CHECK(a == b);
  for (auto n : sizes) CHECK(n == 3);
}

TEST_CASE("trajectory dumps") {
  const TaskSpec spec = make_task(12, 99);
  const Episode ep = generate_episode(spec, 20.0);
  RolloutOptions opt;
  opt.history_len = 1;
  const RolloutResult r = evaluate_rollout(build_world(spec), replay_policy(ep.actions, 0.05), spec, opt);
  const auto dir = std::filesystem::temp_directory_path() / "stvla_test_traj";
  std::filesystem::create_directories(dir);
  write_trajectory((dir / "t.csv").string(), r.trace);
  write_trajectory_svg((dir / "t.svg").string(), r.trace, spec.instruction);
  std::ifstream in(dir / "t.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,x,y,z,rx,ry,rz,grip,event");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == r.trace.size());
  CHECK(std::filesystem::file_size(dir / "t.svg") > 100);
  std::filesystem::remove_all(dir);
}
