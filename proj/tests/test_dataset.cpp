#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "stvla/dataset.hpp"

using namespace stvla;
namespace fs = std::filesystem;

namespace {

SpatioTemporalAction step_action(Vec3 dx, double grip = 0.0) { return {dx, {}, grip, 0.05}; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stvla_test_" + name);
  fs::remove_all(p);
  return p;
}

void check_conservation(const AnnotatedEpisode& a, const Episode& ep) {
  double dt = 0.0;
  Vec3 dx;
  std::size_t next = 0;
  for (const auto& c : a.chunks) {
    CHECK(c.begin == next);
    next = c.end;
    dt += c.delta_t;
    dx += c.delta_x;
  }
  CHECK(next == ep.steps());
  CHECK(std::abs(dt - ep.duration) <= 1e-12);
  Vec3 raw;
  for (const auto& s : ep.actions) raw += s.delta_x;
  CHECK(norm(dx - raw) <= 1e-12);
}

}  // namespace

TEST_CASE("ten straight steps make one half-second chunk") {
  const std::vector<SpatioTemporalAction> acts(10, step_action({0.01, 0, 0}));
  const auto chunks = chunk_actions(acts, 20.0, {});
  REQUIRE(chunks.size() == 1);
  CHECK(chunks[0].delta_t == 0.5);
  CHECK(std::abs(chunks[0].delta_x.x - 0.1) <= 1e-15);
}

TEST_CASE("a reversal after five steps splits into two quarter-second chunks") {
  std::vector<SpatioTemporalAction> acts(5, step_action({0.01, 0, 0}));
  acts.insert(acts.end(), 5, step_action({-0.01, 0, 0}));
  const auto chunks = chunk_actions(acts, 20.0, {});
  REQUIRE(chunks.size() == 2);
  CHECK(chunks[0].delta_t == 0.25);
  CHECK(chunks[1].delta_t == 0.25);
  CHECK(chunks[1].begin == 5);
}

TEST_CASE("a grip toggle forces a boundary at the toggle") {
  std::vector<SpatioTemporalAction> acts(4, step_action({0, 0, -0.01}));
  acts.insert(acts.end(), 3, step_action({0, 0, -0.01}, 1.0));
  const auto chunks = chunk_actions(acts, 20.0, {});
  REQUIRE(chunks.size() == 2);
  CHECK(chunks[1].begin == 4);
  CHECK(chunks[0].grip == 0.0);
  CHECK(chunks[1].grip == 1.0);
}

TEST_CASE("long straight runs are capped at max_chunk_steps") {
  const std::vector<SpatioTemporalAction> acts(40, step_action({0.01, 0, 0}));
  const auto chunks = chunk_actions(acts, 20.0, {0.95, 16});
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[0].steps() == 16);
  CHECK(chunks[2].steps() == 8);
}

TEST_CASE("chunking validates its input") {
  CHECK_THROWS_WITH(chunk_actions({}, 20.0, {}), doctest::Contains("empty episode"));
  CHECK_THROWS(chunk_actions({step_action({})}, 20.0, {0.0, 16}));
  CHECK_THROWS(chunk_actions({step_action({})}, 20.0, {1.5, 16}));
  CHECK_THROWS(chunk_actions({step_action({})}, 20.0, {0.9, 0}));
  Episode ep;
  CHECK_THROWS(chunk_trajectory(ep));
}

TEST_CASE("annotation conserves duration and displacement on generated episodes") {
  const auto eps = generate_dataset_episodes(40, 40, 20.0, 11);
  for (const auto& ep : eps) {
    INFO(ep.spec.instruction);
    const AnnotatedEpisode a = chunk_trajectory(ep);
    check_conservation(a, ep);
    CHECK(a.samples.size() == a.chunks.size());
    for (std::size_t c = 0; c < a.chunks.size(); ++c)
      CHECK(a.samples[c].frames[0] == ep.frames[a.chunks[c].begin][0]);
  }
}

TEST_CASE("raising cos_thresh never reduces the chunk count") {
  const auto eps = generate_dataset_episodes(40, 20, 20.0, 12);
  for (const auto& ep : eps) {
    std::size_t prev = 0;
    for (double t : {0.5, 0.8, 0.9, 0.95, 0.99, 1.0}) {
      const std::size_t n = chunk_actions(ep.actions, ep.hz, {t, 16}).size();
      CHECK(n >= prev);
      prev = n;
    }
  }
}

TEST_CASE("a forced boundary splits the episode into independently chunked halves") {
  const auto eps = generate_dataset_episodes(40, 10, 20.0, 13);
  for (const auto& ep : eps) {
    if (ep.steps() < 4) continue;
    const std::size_t k = ep.steps() / 2;
    // The cap restarts at the boundary too, so this holds for any k.
    const auto joined = chunk_actions(ep.actions, ep.hz, {}, {k});
    const std::vector<SpatioTemporalAction> left(ep.actions.begin(), ep.actions.begin() + k);
    const std::vector<SpatioTemporalAction> right(ep.actions.begin() + k, ep.actions.end());
    auto expect = chunk_actions(left, ep.hz, {});
    for (auto c : chunk_actions(right, ep.hz, {})) {
      c.begin += k;
      c.end += k;
      expect.push_back(c);
    }
    REQUIRE(joined.size() == expect.size());
    for (std::size_t i = 0; i < joined.size(); ++i) {
      CHECK(joined[i].begin == expect[i].begin);
      CHECK(joined[i].end == expect[i].end);
      CHECK(joined[i].delta_t == expect[i].delta_t);
      CHECK(norm(joined[i].delta_x - expect[i].delta_x) <= 1e-15);
    }
  }
}

TEST_CASE("serialize then load round-trips, and files are byte-identical") {
  const Dataset ds = annotate(generate_dataset_episodes(40, 10, 20.0, 21), {});
  const fs::path a = scratch("ds_a"), b = scratch("ds_b");
  serialize(ds, a.string());
  serialize(ds, b.string());
  const Dataset back = load(a.string());
  CHECK(back.header.hz == ds.header.hz);
  CHECK(back.header.vocab_hash == ds.header.vocab_hash);
  REQUIRE(back.episodes.size() == ds.episodes.size());
  for (const auto& e : ds.episodes) {
    bool found = false;
    for (const auto& f : back.episodes)
      if (f.episode_id == e.episode_id) {
        found = true;
        CHECK(f == e);
      }
    CHECK(found);
  }
  CHECK(slurp(a / "dataset.jsonl") == slurp(b / "dataset.jsonl"));
  for (const auto& entry : fs::directory_iterator(a / "frames"))
    CHECK(slurp(entry.path()) == slurp(b / "frames" / entry.path().filename()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("an empty dataset is valid") {
  Dataset ds;
  ds.header.vocab_hash = benchmark_vocab().hash();
  const fs::path dir = scratch("ds_empty");
  serialize(ds, dir.string());
  CHECK(load(dir.string()).episodes.empty());
  fs::remove_all(dir);
}

TEST_CASE("a corrupted byte is reported at its line") {
  const Dataset ds = annotate(generate_dataset_episodes(40, 3, 20.0, 22), {});
  const fs::path dir = scratch("ds_corrupt");
  serialize(ds, dir.string());
  std::string text = slurp(dir / "dataset.jsonl");
  // Third line: flip a digit inside a number.
  std::size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = text.find('\n', pos) + 1;
  const std::size_t digit = text.find_first_of("123456789", text.find("\"proprio\"", pos));
  text[digit] = text[digit] == '9' ? '8' : '9';
  std::ofstream(dir / "dataset.jsonl", std::ios::binary) << text;
  CHECK_THROWS_WITH(load(dir.string()), doctest::Contains("dataset line 3"));

  serialize(ds, dir.string());
  std::string trunc = slurp(dir / "dataset.jsonl");
  trunc.pop_back();
  std::ofstream(dir / "dataset.jsonl", std::ios::binary | std::ios::trunc) << trunc;
  CHECK_THROWS_WITH(load(dir.string()), doctest::Contains("truncated"));
  CHECK_THROWS(load((dir / "missing").string()));
  fs::remove_all(dir);
}

TEST_CASE("frame blobs round-trip and reject garbage") {
  const auto eps = generate_dataset_episodes(40, 1, 20.0, 23);
  const SimFrame& f = eps[0].frames[0][1];
  const fs::path dir = scratch("blob");
  fs::create_directories(dir);
  write_frame_blob((dir / "f.bin").string(), f);
  CHECK(read_frame_blob((dir / "f.bin").string()) == f);
  std::ofstream(dir / "bad.bin", std::ios::binary) << "nope";
  CHECK_THROWS(read_frame_blob((dir / "bad.bin").string()));
  fs::remove_all(dir);
}

TEST_CASE("raw episodes round-trip through disk") {
  const auto eps = generate_dataset_episodes(40, 4, 20.0, 24);
  const fs::path dir = scratch("raw");
  save_raw_episodes(eps, dir.string());
  const auto back = load_raw_episodes(dir.string());
  REQUIRE(back.size() == eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    CHECK(back[i].actions == eps[i].actions);
    CHECK(back[i].duration == eps[i].duration);
    CHECK(back[i].spec.instruction == eps[i].spec.instruction);
  }
  fs::remove_all(dir);
}

TEST_CASE("split is 200/50, deterministic, disjoint and exhaustive") {
  const Split s = split(250, 0.8, 7);
  CHECK(s.train.size() == 200);
  CHECK(s.heldout.size() == 50);
  const Split t = split(250, 0.8, 7);
  CHECK(s.train == t.train);
  CHECK(s.heldout == t.heldout);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto h : s.heldout) CHECK(all.insert(h).second);
  CHECK(all.size() == 250);
  CHECK(*all.rbegin() == 249);
  CHECK(split(250, 0.8, 8).train != s.train);
  CHECK_THROWS(split(10, 1.0, 1));
}

TEST_CASE("generated episodes cycle subtasks and are all expert successes") {
  const auto eps = generate_dataset_episodes(40, 80, 20.0, 25);
  for (std::size_t e = 0; e < eps.size(); ++e) {
    CHECK(eps[e].spec.subtask == e % 40);
    CHECK(eps[e].success);
  }
  CHECK_THROWS(generate_dataset_episodes(41, 1, 20.0, 1));
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}
