#include "stvla/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace stvla {

namespace fs = std::filesystem;
using nlohmann::json;

void ChunkingParams::validate() const {
  if (!(cos_thresh > 0.0 && cos_thresh <= 1.0)) throw std::invalid_argument("chunking: cos_thresh must be in (0, 1]");
  if (max_chunk_steps < 1) throw std::invalid_argument("chunking: max_chunk_steps must be >= 1");
}

bool AnnotatedEpisode::operator==(const AnnotatedEpisode& o) const {
  return episode_id == o.episode_id && spec == o.spec && hz == o.hz && steps == o.steps &&
         params.cos_thresh == o.params.cos_thresh && params.max_chunk_steps == o.params.max_chunk_steps &&
         chunks == o.chunks && samples == o.samples;
}

std::vector<Chunk> chunk_actions(const std::vector<SpatioTemporalAction>& actions, double hz,
                                 const ChunkingParams& params, const std::vector<std::size_t>& forced) {
  params.validate();
  if (actions.empty()) throw std::invalid_argument("chunk_trajectory: empty episode");
  const std::set<std::size_t> forced_set(forced.begin(), forced.end());
  std::vector<Chunk> out;
  Chunk cur;
  bool open = false, has_dir = false;
  Vec3 dir;
  auto close_chunk = [&] {
    cur.delta_t = static_cast<double>(cur.steps()) / hz;
    out.push_back(cur);
  };
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const auto& a = actions[i];
    const double grip = a.grip >= 0.5 ? 1.0 : 0.0;
    const double len = norm(a.delta_x);
    bool boundary = !open || forced_set.count(i) > 0 || grip != cur.grip || cur.steps() >= params.max_chunk_steps;
    if (!boundary && len > 0.0 && has_dir && dot(a.delta_x, dir) / (len * norm(dir)) < params.cos_thresh)
      boundary = true;
    if (boundary) {
      if (open) close_chunk();
      cur = Chunk{};
      cur.begin = i;
      cur.grip = grip;
      open = true;
      has_dir = false;
    }
    cur.delta_x += a.delta_x;
    cur.delta_theta += a.delta_theta;
    cur.end = i + 1;
    if (!has_dir && len > 0.0) {
      dir = a.delta_x;
      has_dir = true;
    }
  }
  close_chunk();
  return out;
}

AnnotatedEpisode chunk_trajectory(const Episode& ep, const ChunkingParams& params, std::size_t episode_id) {
  if (ep.actions.empty()) throw std::invalid_argument("chunk_trajectory: empty episode");
  if (ep.frames.size() != ep.actions.size())
    throw std::invalid_argument("chunk_trajectory: frame/action count mismatch");
  AnnotatedEpisode out;
  out.episode_id = episode_id;
  out.spec = ep.spec;
  out.hz = ep.hz;
  out.steps = ep.actions.size();
  out.params = params;
  out.chunks = chunk_actions(ep.actions, ep.hz, params);
  for (const auto& c : out.chunks) {
    ChunkSample s;
    s.frames = ep.frames[c.begin];
    s.proprio = ep.frames[c.begin][0].proprio;
    s.target_position = ep.target_position[c.begin];
    s.goal_position = ep.goal_position[c.begin];
    out.samples.push_back(std::move(s));
  }
  return out;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- frame blobs ----

namespace {

constexpr char kFrameMagic[4] = {'S', 'T', 'V', 'F'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error(what + ": truncated");
  return v;
}

void put_frame(std::ostream& out, const SimFrame& f) {
  out.write(kFrameMagic, 4);
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.depth.width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.depth.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.view));
  put(out, f.timestamp);
  for (double v : {f.intrinsics.fx, f.intrinsics.fy, f.intrinsics.cx, f.intrinsics.cy}) put(out, v);
  for (double v : f.pose.rotation.m) put(out, v);
  for (double v : {f.pose.translation.x, f.pose.translation.y, f.pose.translation.z}) put(out, v);
  for (double v : f.proprio.to_array()) put(out, v);
  for (double d : f.depth.values) put(out, static_cast<float>(d));
}

SimFrame get_frame(std::istream& in, const std::string& what) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kFrameMagic, 4) != 0) throw std::runtime_error(what + ": bad frame magic");
  if (get<std::uint32_t>(in, what) != 1) throw std::runtime_error(what + ": unsupported frame version");
  SimFrame f;
  const auto w = get<std::uint32_t>(in, what), h = get<std::uint32_t>(in, what);
  const auto view = get<std::uint32_t>(in, what);
  if (view > 1 || w == 0 || h == 0 || w > 4096 || h > 4096) throw std::runtime_error(what + ": corrupt frame header");
  f.view = static_cast<ViewId>(view);
  f.timestamp = get<double>(in, what);
  f.intrinsics.fx = get<double>(in, what);
  f.intrinsics.fy = get<double>(in, what);
  f.intrinsics.cx = get<double>(in, what);
  f.intrinsics.cy = get<double>(in, what);
  for (double& v : f.pose.rotation.m) v = get<double>(in, what);
  f.pose.translation.x = get<double>(in, what);
  f.pose.translation.y = get<double>(in, what);
  f.pose.translation.z = get<double>(in, what);
  std::array<double, 7> p;
  for (double& v : p) v = get<double>(in, what);
  f.proprio = {{p[0], p[1], p[2]}, {p[3], p[4], p[5]}, p[6]};
  f.depth = DepthMap(w, h);
  for (double& d : f.depth.values) d = static_cast<double>(get<float>(in, what));
  return f;
}

}  // namespace

void write_frame_blob(const std::string& path, const SimFrame& frame) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_frame_blob: cannot open " + path);
  put_frame(out, frame);
}

SimFrame read_frame_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_frame_blob: cannot open " + path);
  SimFrame f = get_frame(in, path);
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path + ": trailing bytes");
  return f;
}

// ---- records ----

namespace {

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::runtime_error("expected a 3-vector");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

std::string frame_ref(std::size_t episode, std::size_t step, ViewId v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "frames/e%06zu_s%04zu_%s.bin", episode, step, view_name(v).c_str());
  return buf;
}

json header_json(const DatasetHeader& h) {
  json j;
  j["format_version"] = h.format_version;
  j["hz"] = h.hz;
  j["workspace"] = {{"lo", vec_json(h.workspace.lo)}, {"hi", vec_json(h.workspace.hi)}};
  j["vocab_hash"] = h.vocab_hash;
  j["chunking"] = {{"cos_thresh", h.params.cos_thresh}, {"max_chunk_steps", h.params.max_chunk_steps}};
  return j;
}

std::string with_checksum(json j) {
  const std::string body = j.dump();
  j["checksum"] = fnv1a_hex(body);
  return j.dump();
}

}  // namespace

void serialize(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "frames");
  std::ofstream out(fs::path(dir) / "dataset.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("serialize: cannot write " + dir);
  out << with_checksum(header_json(ds.header)) << '\n';
  // Records are ordered by (subtask, episode id).
  std::vector<const AnnotatedEpisode*> order;
  for (const auto& e : ds.episodes) order.push_back(&e);
  std::stable_sort(order.begin(), order.end(), [](const AnnotatedEpisode* a, const AnnotatedEpisode* b) {
    return std::tie(a->spec.subtask, a->episode_id) < std::tie(b->spec.subtask, b->episode_id);
  });
  for (const AnnotatedEpisode* ep : order) {
    for (std::size_t c = 0; c < ep->chunks.size(); ++c) {
      const Chunk& ch = ep->chunks[c];
      const ChunkSample& s = ep->samples[c];
      json refs = json::array();
      for (ViewId v : {ViewId::third, ViewId::wrist}) {
        const std::string ref = frame_ref(ep->episode_id, ch.begin, v);
        write_frame_blob((fs::path(dir) / ref).string(), s.frames[static_cast<int>(v)]);
        refs.push_back(ref);
      }
      const auto p = s.proprio.to_array();
      json j;
      j["episode_id"] = ep->episode_id;
      j["chunk_index"] = c;
      j["n_chunks"] = ep->chunks.size();
      j["suite"] = suite_name(ep->spec.suite);
      j["subtask"] = ep->spec.subtask;
      j["scene_seed"] = ep->spec.scene_seed;
      j["pre_solved"] = ep->spec.pre_solved;
      j["instruction"] = ep->spec.instruction;
      j["episode_steps"] = ep->steps;
      j["steps"] = {ch.begin, ch.end};
      j["frame_refs"] = refs;
      j["proprio"] = std::vector<double>(p.begin(), p.end());
      j["action"] = {{"dx", vec_json(ch.delta_x)}, {"dtheta", vec_json(ch.delta_theta)}, {"grip", ch.grip},
                     {"dt", ch.delta_t}};
      j["target_pos"] = vec_json(s.target_position);
      j["goal_pos"] = vec_json(s.goal_position);
      out << with_checksum(j) << '\n';
    }
  }
  if (!out) throw std::runtime_error("serialize: write failed in " + dir);
}

namespace {

json parse_line(const std::string& line, std::size_t lineno) {
  const std::string where = "dataset line " + std::to_string(lineno);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error(where + ": malformed record (" + e.what() + ")");
  }
  if (!j.is_object() || !j.contains("checksum")) throw std::runtime_error(where + ": missing checksum");
  const std::string sum = j["checksum"].get<std::string>();
  j.erase("checksum");
  if (fnv1a_hex(j.dump()) != sum) throw std::runtime_error(where + ": checksum mismatch");
  return j;
}

void check_episode(const AnnotatedEpisode& ep, std::size_t lineno) {
  const std::string where = "dataset line " + std::to_string(lineno) + " (episode " + std::to_string(ep.episode_id) + ")";
  std::size_t next = 0;
  double total = 0.0;
  for (const auto& c : ep.chunks) {
    if (c.begin != next || c.end <= c.begin) throw std::runtime_error(where + ": chunk ranges do not partition the episode");
    if (std::abs(c.delta_t - static_cast<double>(c.steps()) / ep.hz) > 1e-12)
      throw std::runtime_error(where + ": chunk dt does not match its step count");
    total += c.delta_t;
    next = c.end;
  }
  if (next != ep.steps) throw std::runtime_error(where + ": chunks do not cover the episode");
  if (std::abs(total - ep.duration()) > 1e-12) throw std::runtime_error(where + ": sum of dt differs from duration");
}

}  // namespace

Dataset load(const std::string& dir) {
  const fs::path file = fs::path(dir) / "dataset.jsonl";
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("load: cannot open " + file.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.empty()) throw std::runtime_error("load: empty dataset file");
  if (content.back() != '\n') throw std::runtime_error("load: truncated dataset file (no final newline)");
  std::istringstream lines(content);
  std::string line;
  std::size_t lineno = 1;
  std::getline(lines, line);
  const json hj = parse_line(line, lineno);
  Dataset ds;
  try {
    ds.header.format_version = hj.at("format_version").get<int>();
    if (ds.header.format_version != kDatasetFormatVersion)
      throw std::runtime_error("format version " + std::to_string(ds.header.format_version) + ", expected " +
                               std::to_string(kDatasetFormatVersion));
    ds.header.hz = hj.at("hz").get<double>();
    ds.header.workspace.lo = json_vec(hj.at("workspace").at("lo"));
    ds.header.workspace.hi = json_vec(hj.at("workspace").at("hi"));
    ds.header.vocab_hash = hj.at("vocab_hash").get<std::string>();
    ds.header.params.cos_thresh = hj.at("chunking").at("cos_thresh").get<double>();
    ds.header.params.max_chunk_steps = hj.at("chunking").at("max_chunk_steps").get<std::size_t>();
  } catch (const std::exception& e) {
    throw std::runtime_error("dataset line 1: bad header (" + std::string(e.what()) + ")");
  }
  AnnotatedEpisode* cur = nullptr;
  std::size_t expected_chunks = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const json j = parse_line(line, lineno);
    try {
      const auto eid = j.at("episode_id").get<std::size_t>();
      const auto ci = j.at("chunk_index").get<std::size_t>();
      if (ci == 0) {
        if (cur && cur->chunks.size() != expected_chunks)
          throw std::runtime_error("previous episode truncated");
        ds.episodes.emplace_back();
        cur = &ds.episodes.back();
        cur->episode_id = eid;
        cur->spec.suite = parse_suite(j.at("suite").get<std::string>());
        cur->spec.subtask = j.at("subtask").get<std::size_t>();
        cur->spec.scene_seed = j.at("scene_seed").get<std::uint64_t>();
        cur->spec.pre_solved = j.at("pre_solved").get<bool>();
        cur->spec.instruction = j.at("instruction").get<std::string>();
        cur->hz = ds.header.hz;
        cur->steps = j.at("episode_steps").get<std::size_t>();
        cur->params = ds.header.params;
        expected_chunks = j.at("n_chunks").get<std::size_t>();
      } else if (!cur || cur->episode_id != eid || ci != cur->chunks.size()) {
        throw std::runtime_error("out-of-order chunk record");
      }
      Chunk c;
      c.begin = j.at("steps").at(0).get<std::size_t>();
      c.end = j.at("steps").at(1).get<std::size_t>();
      const json& a = j.at("action");
      c.delta_x = json_vec(a.at("dx"));
      c.delta_theta = json_vec(a.at("dtheta"));
      c.grip = a.at("grip").get<double>();
      c.delta_t = a.at("dt").get<double>();
      ChunkSample s;
      const auto& refs = j.at("frame_refs");
      for (int v = 0; v < 2; ++v) s.frames[v] = read_frame_blob((fs::path(dir) / refs.at(v).get<std::string>()).string());
      const auto p = j.at("proprio").get<std::vector<double>>();
      if (p.size() != 7) throw std::runtime_error("proprio must have 7 entries");
      s.proprio = {{p[0], p[1], p[2]}, {p[3], p[4], p[5]}, p[6]};
      s.target_position = json_vec(j.at("target_pos"));
      s.goal_position = json_vec(j.at("goal_pos"));
      cur->chunks.push_back(c);
      cur->samples.push_back(std::move(s));
      if (cur->chunks.size() == expected_chunks) check_episode(*cur, lineno);
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      if (msg.rfind("dataset line", 0) == 0) throw;
      throw std::runtime_error("dataset line " + std::to_string(lineno) + ": " + msg);
    } catch (const json::exception& e) {
      throw std::runtime_error("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (cur && cur->chunks.size() != expected_chunks)
    throw std::runtime_error("dataset line " + std::to_string(lineno) + ": episode " +
                             std::to_string(cur->episode_id) + " truncated");
  return ds;
}

Split split(std::size_t n_episodes, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split: train_frac must be in (0, 1)");
  const auto order = shuffled_indices(n_episodes, seed);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n_episodes)));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.heldout.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.heldout.begin(), s.heldout.end());
  return s;
}

std::vector<Episode> generate_dataset_episodes(std::size_t n_subtasks, std::size_t n_episodes, double hz,
                                               std::uint64_t seed, const SimConfig& cfg) {
  if (n_subtasks == 0 || n_subtasks > benchmark_subtasks().size())
    throw std::invalid_argument("generate: subtasks must be in [1, " + std::to_string(benchmark_subtasks().size()) + "]");
  std::vector<Episode> eps;
  eps.reserve(n_episodes);
  for (std::size_t e = 0; e < n_episodes; ++e) {
    const std::uint64_t scene_seed = seed * 1000000ull + e;
    eps.push_back(generate_episode(make_task(e % n_subtasks, scene_seed), hz, cfg));
  }
  return eps;
}

Dataset annotate(const std::vector<Episode>& episodes, const ChunkingParams& params) {
  Dataset ds;
  ds.header.format_version = kDatasetFormatVersion;
  ds.header.hz = episodes.empty() ? 20.0 : episodes.front().hz;
  ds.header.vocab_hash = benchmark_vocab().hash();
  ds.header.params = params;
  for (std::size_t i = 0; i < episodes.size(); ++i) ds.episodes.push_back(chunk_trajectory(episodes[i], params, i));
  return ds;
}

// ---- raw episodes ----

void save_raw_episodes(const std::vector<Episode>& eps, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "raw");
  std::ofstream out(fs::path(dir) / "episodes.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("save_raw_episodes: cannot write " + dir);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Episode& ep = eps[i];
    char name[32];
    std::snprintf(name, sizeof name, "raw/e%06zu.bin", i);
    std::ofstream blob(fs::path(dir) / name, std::ios::binary);
    for (const auto& pair : ep.frames)
      for (const auto& f : pair) put_frame(blob, f);
    json actions = json::array();
    for (const auto& a : ep.actions) {
      const auto v = a.to_array();
      actions.push_back(std::vector<double>(v.begin(), v.end()));
    }
    json targets = json::array();
    for (std::size_t s = 0; s < ep.steps(); ++s)
      targets.push_back({ep.active_target[s], vec_json(ep.target_position[s]), vec_json(ep.goal_position[s])});
    json j;
    j["episode_id"] = i;
    j["suite"] = suite_name(ep.spec.suite);
    j["subtask"] = ep.spec.subtask;
    j["scene_seed"] = ep.spec.scene_seed;
    j["pre_solved"] = ep.spec.pre_solved;
    j["instruction"] = ep.spec.instruction;
    j["hz"] = ep.hz;
    j["duration"] = ep.duration;
    j["success"] = ep.success;
    j["frames"] = name;
    j["actions"] = actions;
    j["targets"] = targets;
    out << with_checksum(j) << '\n';
  }
}

std::vector<Episode> load_raw_episodes(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "episodes.jsonl", std::ios::binary);
  if (!in) throw std::runtime_error("load_raw_episodes: cannot open " + dir + "/episodes.jsonl");
  std::vector<Episode> eps;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const json j = parse_line(line, lineno);
    Episode ep;
    ep.spec.suite = parse_suite(j.at("suite").get<std::string>());
    ep.spec.subtask = j.at("subtask").get<std::size_t>();
    ep.spec.scene_seed = j.at("scene_seed").get<std::uint64_t>();
    ep.spec.pre_solved = j.at("pre_solved").get<bool>();
    ep.spec.instruction = j.at("instruction").get<std::string>();
    ep.hz = j.at("hz").get<double>();
    ep.duration = j.at("duration").get<double>();
    ep.success = j.at("success").get<bool>();
    for (const auto& a : j.at("actions")) ep.actions.push_back(SpatioTemporalAction::from_array(a.get<std::vector<double>>()));
    for (const auto& t : j.at("targets")) {
      ep.active_target.push_back(t.at(0).get<std::size_t>());
      ep.target_position.push_back(json_vec(t.at(1)));
      ep.goal_position.push_back(json_vec(t.at(2)));
    }
    const std::string blob_path = (fs::path(dir) / j.at("frames").get<std::string>()).string();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw std::runtime_error("load_raw_episodes: missing " + blob_path);
    for (std::size_t s = 0; s < ep.actions.size(); ++s) ep.frames.push_back({get_frame(blob, blob_path), get_frame(blob, blob_path)});
    eps.push_back(std::move(ep));
  }
  return eps;
}

}  // namespace stvla
