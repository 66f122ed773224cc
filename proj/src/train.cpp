#include "stvla/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace stvla {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- samples and caches ----

FeatureCache::FeatureCache(const VlaModel& model, const Dataset& ds, const std::vector<std::size_t>& episodes) {
  const ModelConfig& mc = model.config();
  const EmbedConfig& ec = mc.embed;
  auto norm = [&](const Vec3& p) {
    return std::array<double, 3>{(p.x - ec.workspace_center.x) / ec.workspace_half_extent.x,
                                 (p.y - ec.workspace_center.y) / ec.workspace_half_extent.y,
                                 (p.z - ec.workspace_center.z) / ec.workspace_half_extent.z};
  };
  for (std::size_t e : episodes) {
    const AnnotatedEpisode& ep = ds.episodes.at(e);
    const std::vector<std::size_t> lang = model.vocab().tokenize(ep.spec.instruction);
    const std::size_t base = frames_.size();
    for (const ChunkSample& s : ep.samples)
      for (const SimFrame& f : s.frames) frames_.push_back(model.frame_features(f));
    for (std::size_t c = 0; c < ep.chunks.size(); ++c) {
      TrainSample t;
      t.episode = e;
      t.chunk = c;
      for (std::size_t h = mc.history; h-- > 0;) {
        const std::size_t cc = c >= h ? c - h : 0;
        for (std::size_t v = 0; v < mc.views; ++v) t.frames.push_back(base + cc * 2 + v);
      }
      t.proprio = model.proprio_row(ep.samples[c].proprio);
      t.lang = lang;
      const auto a = ep.chunks[c].action().to_array();
      t.action = Tensor({1, 8}, std::vector<double>(a.begin(), a.end()));
      const auto p = norm(ep.samples[c].target_position), g = norm(ep.samples[c].goal_position);
      t.grounding = Tensor({1, 6}, {p[0], p[1], p[2], g[0], g[1], g[2]});
      samples_.push_back(std::move(t));
    }
  }
}

void FeatureCache::cache_embeddings(const VlaModel& model) {
  embed_.clear();
  if (!model.config().uses_4d()) return;
  for (const FrameFeatures& f : frames_) embed_.push_back(model.embed_4d(f));
}

namespace {

FrameFeatures stacked_features(const FeatureCache& cache, const TrainSample& s) {
  std::vector<const FrameFeatures*> ptrs;
  for (std::size_t i : s.frames) ptrs.push_back(&cache.frame(i));
  return VlaModel::stack(ptrs);
}

Tensor stage1_loss(const VlaModel& model, const FeatureCache& cache, const TrainSample& s) {
  const FrameFeatures st = stacked_features(cache, s);
  const Tensor fused = model.config().uses_4d() ? model.fuse(st.f_v, model.embed_4d(st)) : st.f_v;
  const PolicyNet& pol = model.policy();
  const Tensor probe = l1_loss(pol.token_probe(fused), concat({st.pos, st.time}, 1));
  const Tensor hidden = pol.encode(pol.project_tokens(fused, s.proprio), s.lang);
  return add(probe, l1_loss(pol.grounding(hidden), s.grounding));
}

Tensor stage2_prediction(const VlaModel& model, const FeatureCache& cache, const TrainSample& s) {
  const FrameFeatures st = stacked_features(cache, s);
  Tensor fused = st.f_v;
  if (model.config().uses_4d()) {
    std::vector<Tensor> e;
    for (std::size_t i : s.frames) e.push_back(cache.embedding(i));
    fused = model.fuse(st.f_v, concat(e, 0));
  }
  return model.action(fused, s.proprio, s.lang);
}

ActionLossWeights loss_weights(const RunConfig& cfg) {
  ActionLossWeights w{cfg.num("w_dx"), cfg.num("w_dtheta"), cfg.num("w_grip"), cfg.num("w_dt")};
  // Without a duration head the executed dt is fixed, so nothing supervises it.
  if (!cfg.flag("use_dt_head")) w.dt = 0.0;
  return w;
}

using LossFn = std::function<Tensor(const FeatureCache&, const TrainSample&)>;

double mean_loss(const FeatureCache& cache, const LossFn& fn) {
  if (cache.samples().empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : cache.samples()) total += fn(cache, s).item();
  return total / static_cast<double>(cache.samples().size());
}

ParamList complement(const ParamList& all, const ParamList& subset) {
  std::set<const void*> in;
  for (const auto& p : subset.items()) in.insert(p.tensor.data().data());
  ParamList out;
  for (const auto& p : all.items())
    if (p.tensor.numel() > 0 && !in.count(p.tensor.data().data())) out.add(p.name, p.tensor);
  return out;
}

bool params_finite(const ParamList& params) {
  for (const auto& p : params.items())
    if (!all_finite(p.tensor.data())) return false;
  return true;
}

struct StageSpec {
  std::size_t stage = 1;
  std::size_t epochs = 0;
  double lr = 1e-3;
  std::size_t batch = 16;
};

TrainLog run_stage(VlaModel& model, const ParamList& trainable, const RunConfig& cfg, const StageSpec& spec,
                   const FeatureCache& train, const FeatureCache& heldout, const LossFn& fn) {
  if (train.samples().empty()) throw std::invalid_argument("train: no training samples");
  if (spec.batch == 0) throw std::invalid_argument("train: batch size must be positive");
  if (!(spec.lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  TrainLog log;
  log.stage = spec.stage;
  const ParamList all = model.params();
  const ParamList frozen = complement(all, trainable);
  all.set_trainable(false);
  const ParamSnapshot frozen_before = ParamSnapshot::take(frozen);

  log.initial_loss = mean_loss(train, fn);
  if (!std::isfinite(log.initial_loss)) {
    log.aborted = true;
    log.abort_reason = "non-finite initial loss";
    return log;
  }
  trainable.set_trainable(true);
  Optimizer opt(trainable, cfg.str("optimizer"), spec.lr, cfg.num("clip"));
  const auto& samples = train.samples();
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("seed"));

  for (std::size_t epoch = 0; epoch < spec.epochs && !log.aborted; ++epoch) {
    const auto order = shuffled_indices(samples.size(), seed * 1000003 + spec.stage * 1009 + epoch);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size() && !log.aborted; b += spec.batch) {
      const std::size_t n = std::min(spec.batch, order.size() - b);
      const ParamSnapshot last_good = ParamSnapshot::take(trainable);
      opt.zero_grad();
      double batch_total = 0.0;
      try {
        for (std::size_t i = b; i < b + n; ++i) {
          Tape tape;
          Tensor loss, scaled;
          {
            TapeScope scope(tape);
            loss = fn(train, samples[order[i]]);
            scaled = scale(loss, 1.0 / static_cast<double>(n));
          }
          if (!std::isfinite(loss.item())) throw numeric_blowup("non-finite loss");
          batch_total += loss.item();
          tape.backward(scaled);
        }
        opt.step();
        if (!params_finite(trainable)) throw numeric_blowup("non-finite parameters after update");
      } catch (const numeric_blowup& e) {
        last_good.restore(trainable);
        log.aborted = true;
        log.abort_reason = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")";
        break;
      }
      total += batch_total;
    }
    if (log.aborted) break;
    EpochLog el;
    el.epoch = epoch + 1;
    el.train_loss = total / static_cast<double>(samples.size());
    all.set_trainable(false);
    el.heldout_loss = mean_loss(heldout, fn);
    trainable.set_trainable(true);
    log.epochs.push_back(el);
  }
  opt.zero_grad();
  all.set_trainable(false);
  log.frozen_changed = frozen_before.diff(ParamSnapshot::take(frozen));
  return log;
}

}  // namespace

// ---- optimizer ----

Optimizer::Optimizer(ParamList params, std::string kind, double lr, double clip)
    : params_(std::move(params)), kind_(std::move(kind)), lr_(lr), clip_(clip) {
  if (kind_ != "adam" && kind_ != "gd") throw std::invalid_argument("optimizer: unknown kind '" + kind_ + "'");
  if (!(lr_ > 0.0)) throw std::invalid_argument("optimizer: learning rate must be > 0");
  if (kind_ == "adam")
    for (const auto& p : params_.items()) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void Optimizer::zero_grad() {
  for (const auto& p : params_.items()) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

double Optimizer::step() {
  double sq = 0.0;
  for (const auto& p : params_.items())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double factor = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
  ++t_;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const auto& items = params_.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    Tensor t = items[k].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_data();
    if (kind_ == "gd") {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * factor * g[i];
      continue;
    }
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = factor * g[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
  return norm;
}

// ---- stages ----

namespace {

std::set<std::size_t> parse_subtask_list(const std::string& s) {
  std::set<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.insert(static_cast<std::size_t>(std::stoul(item)));
  return out;
}

}  // namespace

std::vector<std::size_t> train_episodes(const RunConfig& cfg, const Dataset& ds, const Split& sp) {
  const auto excluded = parse_subtask_list(cfg.str("heldout_subtasks"));
  std::vector<std::size_t> out;
  for (std::size_t e : sp.train)
    if (!excluded.count(ds.episodes.at(e).spec.subtask)) out.push_back(e);
  return out;
}

std::vector<std::size_t> heldout_episodes(const RunConfig& cfg, const Dataset& ds, const Split& sp) {
  const auto excluded = parse_subtask_list(cfg.str("heldout_subtasks"));
  std::vector<std::size_t> out = sp.heldout;
  for (std::size_t e : sp.train)
    if (excluded.count(ds.episodes.at(e).spec.subtask)) out.push_back(e);
  std::sort(out.begin(), out.end());
  return out;
}

TrainLog train_stage1(VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp) {
  if (ds.episodes.empty()) throw std::invalid_argument("train_stage1: empty dataset");
  const FeatureCache train(model, ds, train_episodes(cfg, ds, sp));
  const FeatureCache held(model, ds, heldout_episodes(cfg, ds, sp));
  const StageSpec spec{1, cfg.count("stage1_epochs"), cfg.num("stage1_lr"), cfg.count("stage1_batch")};
  TrainLog log = run_stage(model, model.stage1_trainable(), cfg, spec, train, held,
                           [&](const FeatureCache& c, const TrainSample& s) { return stage1_loss(model, c, s); });
  log.flagged = !log.aborted && spec.epochs > 0 && !(log.final_loss() <= 0.5 * log.initial_loss);
  return log;
}

TrainLog train_stage2(VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp) {
  if (ds.episodes.empty()) throw std::invalid_argument("train_stage2: empty dataset");
  FeatureCache train(model, ds, train_episodes(cfg, ds, sp));
  FeatureCache held(model, ds, heldout_episodes(cfg, ds, sp));
  train.cache_embeddings(model);
  held.cache_embeddings(model);
  const StageSpec spec{2, cfg.count("stage2_epochs"), cfg.num("stage2_lr"), cfg.count("stage2_batch")};
  const ActionLossWeights w = loss_weights(cfg);
  return run_stage(model, model.stage2_trainable(), cfg, spec, train, held,
                   [&](const FeatureCache& c, const TrainSample& s) {
                     return action_loss(stage2_prediction(model, c, s), s.action, w);
                   });
}

DtMetrics heldout_dt_metrics(const VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp) {
  DtMetrics m;
  double train_sum = 0.0;
  std::size_t train_n = 0;
  for (std::size_t e : train_episodes(cfg, ds, sp))
    for (const Chunk& c : ds.episodes[e].chunks) {
      train_sum += c.delta_t;
      ++train_n;
    }
  const double baseline = train_n ? train_sum / static_cast<double>(train_n) : 0.0;
  FeatureCache held(model, ds, heldout_episodes(cfg, ds, sp));
  held.cache_embeddings(model);
  for (const TrainSample& s : held.samples()) {
    const double gt = s.action.data()[7];
    double pred = stage2_prediction(model, held, s).data()[7];
    if (!model.config().use_dt_head) pred = model.config().fixed_dt;
    m.model_mae += std::abs(pred - gt);
    m.baseline_mae += std::abs(baseline - gt);
    m.mean_gt += gt;
    ++m.samples;
  }
  if (m.samples) {
    const double n = static_cast<double>(m.samples);
    m.model_mae /= n;
    m.baseline_mae /= n;
    m.mean_gt /= n;
  }
  return m;
}

// ---- evaluation ----

std::vector<TaskSpec> eval_specs(const std::string& suite, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("eval: episode count must be >= 1");
  std::vector<std::size_t> pool;
  for (const SubtaskDef& d : benchmark_subtasks())
    if (suite == "all" || d.suite == parse_suite(suite)) pool.push_back(d.id);
  if (pool.empty()) throw std::invalid_argument("eval: no subtasks in suite '" + suite + "'");
  std::vector<TaskSpec> specs;
  for (std::size_t i = 0; i < n; ++i) specs.push_back(make_task(pool[i % pool.size()], seed * 1000000 + 500000 + i));
  return specs;
}

SuiteSummary summarize(const std::vector<EpisodeRow>& rows, std::size_t bootstrap, std::uint64_t seed) {
  SuiteSummary s;
  s.episodes = rows.size();
  std::vector<double> ct;
  for (const auto& r : rows)
    if (r.success) {
      ++s.successes;
      ct.push_back(r.completion_time);
    }
  if (s.episodes == 0) return s;
  s.sr = static_cast<double>(s.successes) / static_cast<double>(s.episodes);
  if (!ct.empty()) {
    double sum = 0.0;
    for (double c : ct) sum += c;
    s.ct_mean = sum / static_cast<double>(ct.size());
    std::sort(ct.begin(), ct.end());
    const std::size_t k = ct.size();
    s.ct_median = k % 2 ? ct[k / 2] : 0.5 * (ct[k / 2 - 1] + ct[k / 2]);
  }
  if (bootstrap > 0) {
    Rng rng(seed);
    std::vector<double> means(bootstrap);
    for (auto& m : means) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < rows.size(); ++i) hits += rows[rng() % rows.size()].success ? 1 : 0;
      m = static_cast<double>(hits) / static_cast<double>(rows.size());
    }
    double mu = 0.0;
    for (double m : means) mu += m;
    mu /= static_cast<double>(bootstrap);
    double var = 0.0;
    for (double m : means) var += (m - mu) * (m - mu);
    s.sr_std = std::sqrt(var / static_cast<double>(bootstrap));
  }
  return s;
}

EvalReport evaluate_policy(const RolloutPolicy& policy, const std::vector<TaskSpec>& specs, const EvalOptions& opt,
                           const RunConfig& cfg, std::vector<TraceRow>* example_trace) {
  const std::size_t n = specs.size();
  std::vector<EpisodeRow> rows(n);
  std::vector<std::vector<TraceRow>> traces(n);
  if (!opt.traj_dir.empty()) fs::create_directories(opt.traj_dir);
  auto run_one = [&](std::size_t i) {
    const World world = build_world(specs[i]);
    RolloutResult r = evaluate_rollout(world, policy, specs[i], opt.rollout);
    EpisodeRow& row = rows[i];
    row.index = i;
    row.suite = suite_name(specs[i].suite);
    row.subtask = specs[i].subtask;
    row.scene_seed = specs[i].scene_seed;
    row.success = r.success;
    row.completion_time = r.completion_time;
    row.decisions = r.decisions;
    row.failure_reason = r.failure_reason;
    if (!opt.traj_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "ep%04zu.csv", i);
      write_trajectory((fs::path(opt.traj_dir) / name).string(), r.trace);
      row.trajectory = (fs::path(opt.traj_dir).filename() / name).string();
    }
    traces[i] = std::move(r.trace);
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < n; i = next++) run_one(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport rep;
  rep.rows = rows;
  std::map<std::string, std::vector<EpisodeRow>> by_suite;
  for (const auto& r : rows) by_suite[r.suite].push_back(r);
  for (const auto& [name, rs] : by_suite) rep.suites[name] = summarize(rs, opt.bootstrap, opt.bootstrap_seed);
  rep.suites["all"] = summarize(rows, opt.bootstrap, opt.bootstrap_seed);
  rep.config_echo = cfg.echo();
  rep.config_hash = cfg.hash();
  std::ostringstream id;
  id << rep.config_hash << '|' << n;
  for (const auto& s : specs) id << '|' << s.subtask << ':' << s.scene_seed;
  rep.run_id = fnv1a_hex(id.str()).substr(0, 12);
  if (example_trace) {
    std::size_t pick = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (rows[i].success) {
        pick = i;
        break;
      }
    if (n) *example_trace = traces[pick];
  }
  return rep;
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.workers = cfg.count("eval_workers");
  o.rollout.budget = cfg.num("eval_budget");
  o.rollout.history_len = cfg.count("history");
  o.bootstrap = cfg.count("bootstrap");
  o.bootstrap_seed = static_cast<std::uint64_t>(cfg.integer("eval_seed"));
  if (cfg.flag("dump_traj")) o.traj_dir = (fs::path(cfg.str("out_dir")) / "traj").string();
  return o;
}

EvalReport evaluate_suite(const VlaModel& model, const RunConfig& cfg, const std::string& suite,
                          std::size_t n_episodes, std::vector<TraceRow>* example_trace) {
  const auto specs = eval_specs(suite, n_episodes, static_cast<std::uint64_t>(cfg.integer("eval_seed")));
  return evaluate_policy(model.rollout_policy(), specs, eval_options(cfg), cfg, example_trace);
}

namespace {

json summary_json(const SuiteSummary& s) {
  return {{"episodes", s.episodes}, {"successes", s.successes}, {"sr", s.sr}, {"sr_std", s.sr_std},
          {"ct_mean", s.ct_mean},   {"ct_median", s.ct_median}};
}

}  // namespace

void write_report(const EvalReport& r, const std::string& dir, const std::vector<TraceRow>& example_trace) {
  fs::create_directories(dir);
  {
    std::ofstream csv(fs::path(dir) / "report.csv");
    if (!csv) throw std::runtime_error("write_report: cannot write into " + dir);
    csv << "index,suite,subtask,scene_seed,success,completion_time,decisions,failure_reason,trajectory\n"
        << std::setprecision(17);
    for (const auto& row : r.rows)
      csv << row.index << ',' << row.suite << ',' << row.subtask << ',' << row.scene_seed << ',' << row.success << ','
          << row.completion_time << ',' << row.decisions << ',' << row.failure_reason << ',' << row.trajectory << '\n';
  }
  json j;
  j["run_id"] = r.run_id;
  j["config_hash"] = r.config_hash;
  json cfg = json::object();
  std::istringstream echo(r.config_echo);
  std::string line;
  while (std::getline(echo, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) cfg[line.substr(0, eq)] = line.substr(eq + 1);
  }
  j["config"] = cfg;
  json suites = json::object();
  for (const auto& [name, s] : r.suites) suites[name] = summary_json(s);
  j["suites"] = suites;
  j["rows"] = r.rows.size();
  std::ofstream out(fs::path(dir) / "report.json");
  out << j.dump(2) << '\n';
  if (!example_trace.empty()) {
    const auto& all = r.overall();
    std::ostringstream title;
    title << "run " << r.run_id << "  SR " << std::fixed << std::setprecision(2) << all.sr << "  median CT "
          << all.ct_median << " s";
    write_trajectory_svg((fs::path(dir) / "report.svg").string(), example_trace, title.str());
  }
}

// ---- pipeline ----

Dataset build_dataset(const RunConfig& cfg) {
  const std::string dir = cfg.str("data_dir");
  if (!dir.empty() && fs::exists(fs::path(dir) / "dataset.jsonl")) return load(dir);
  ChunkingParams params{cfg.num("cos_thresh"), cfg.count("max_chunk")};
  params.validate();
  std::vector<Episode> eps;
  if (!dir.empty() && fs::exists(fs::path(dir) / "episodes.jsonl")) eps = load_raw_episodes(dir);
  else
    eps = generate_dataset_episodes(cfg.count("subtasks"), cfg.count("episodes"), cfg.num("hz"),
                                    static_cast<std::uint64_t>(cfg.integer("data_seed")));
  return annotate(eps, params);
}

Split dataset_split(const RunConfig& cfg, const Dataset& ds) {
  return split(ds.episodes.size(), cfg.num("train_frac"), static_cast<std::uint64_t>(cfg.integer("split_seed")));
}

PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& ds, const std::string& stage1_cache_dir) {
  PipelineResult res;
  VlaModel model(ModelConfig::from_run_config(cfg));
  const Split sp = dataset_split(cfg, ds);
  if (!cfg.flag("stage2_cold_start")) {
    const fs::path ckpt = stage1_cache_dir.empty() ? fs::path()
                                                   : fs::path(stage1_cache_dir) / ("stage1_" + cfg.stage1_hash() + ".ckpt");
    const fs::path meta = fs::path(ckpt).replace_extension(".json");
    if (!ckpt.empty() && fs::exists(ckpt) && fs::exists(meta)) {
      model.load(ckpt.string());
      std::ifstream in(meta);
      const json j = json::parse(in);
      res.stage1.stage = 1;
      res.stage1.initial_loss = j.at("initial_loss").get<double>();
      for (const auto& e : j.at("epochs"))
        res.stage1.epochs.push_back({e.at(0).get<std::size_t>(), e.at(1).get<double>(), e.at(2).get<double>()});
      res.stage1.flagged = j.at("flagged").get<bool>();
    } else {
      res.stage1 = train_stage1(model, cfg, ds, sp);
      if (!ckpt.empty() && !res.stage1.aborted) {
        fs::create_directories(stage1_cache_dir);
        model.save(ckpt.string());
        json j;
        j["initial_loss"] = res.stage1.initial_loss;
        j["epochs"] = json::array();
        for (const auto& e : res.stage1.epochs) j["epochs"].push_back({e.epoch, e.train_loss, e.heldout_loss});
        j["flagged"] = res.stage1.flagged;
        std::ofstream(meta) << j.dump() << '\n';
      }
    }
  }
  res.stage2 = train_stage2(model, cfg, ds, sp);
  res.dt = heldout_dt_metrics(model, cfg, ds, sp);
  res.report = evaluate_suite(model, cfg, "all", cfg.count("eval_episodes"));
  return res;
}

std::vector<AblationVariant> read_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ablate: cannot open matrix " + path);
  std::vector<AblationVariant> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    AblationVariant v;
    if (!(ls >> v.name)) continue;
    std::string tok;
    while (ls >> tok) {
      if (tok.find('=') == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
      v.overrides.push_back(tok);
    }
    RunConfig probe;
    try {
      probe.apply(v.overrides);
      ModelConfig::from_run_config(probe);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(v));
  }
  if (out.empty()) throw std::runtime_error("ablate: matrix " + path + " has no variants");
  return out;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<AblationVariant>& matrix,
                                const std::vector<std::uint64_t>& seeds, const std::string& out_dir) {
  static const std::vector<std::string> data_keys = {"data_dir", "data_seed", "subtasks", "episodes",
                                                     "hz",       "cos_thresh", "max_chunk"};
  std::map<std::string, Dataset> datasets;
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds)
    for (const auto& v : matrix) {
      RunConfig cfg = base;
      cfg.apply(v.overrides);
      cfg.set("seed", std::to_string(seed));
      const std::string run_dir = (fs::path(out_dir) / (v.name + "_s" + std::to_string(seed))).string();
      cfg.set("out_dir", run_dir);
      std::string data_key;
      for (const auto& k : data_keys) data_key += k + "=" + cfg.str(k) + ";";
      auto it = datasets.find(data_key);
      if (it == datasets.end()) it = datasets.emplace(data_key, build_dataset(cfg)).first;
      const PipelineResult res = run_pipeline(cfg, it->second, (fs::path(out_dir) / "stage1_cache").string());
      write_report(res.report, run_dir);
      AblationRow row;
      row.variant = v.name;
      row.seed = seed;
      row.summary = res.report.overall();
      row.dt = res.dt;
      row.stage1_flagged = res.stage1.flagged;
      rows.push_back(row);
    }
  write_ablation(rows, out_dir);
  return rows;
}

void write_ablation(const std::vector<AblationRow>& rows, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "ablation.csv");
  csv << "variant,seed,episodes,successes,sr,sr_std,ct_mean,ct_median,dt_mae,dt_baseline_mae,stage1_flagged\n"
      << std::setprecision(17);
  for (const auto& r : rows)
    csv << r.variant << ',' << r.seed << ',' << r.summary.episodes << ',' << r.summary.successes << ',' << r.summary.sr
        << ',' << r.summary.sr_std << ',' << r.summary.ct_mean << ',' << r.summary.ct_median << ',' << r.dt.model_mae
        << ',' << r.dt.baseline_mae << ',' << r.stage1_flagged << '\n';

  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
  std::ofstream md(fs::path(out_dir) / "ablation.md");
  md << "| Variant | Succ. rate (%) | Time (s) | per-seed SR | per-seed median CT |\n|---|---|---|---|---|\n";
  md << std::fixed;
  for (const auto& name : order) {
    double sr = 0.0, ct = 0.0;
    std::size_t k = 0;
    std::ostringstream srs, cts;
    srs << std::fixed << std::setprecision(1);
    cts << std::fixed << std::setprecision(2);
    for (const auto& r : rows)
      if (r.variant == name) {
        sr += r.summary.sr;
        ct += r.summary.ct_median;
        srs << (k ? " / " : "") << 100.0 * r.summary.sr;
        cts << (k ? " / " : "") << r.summary.ct_median;
        ++k;
      }
    md << "| " << name << " | " << std::setprecision(1) << 100.0 * sr / static_cast<double>(k) << " | "
       << std::setprecision(2) << ct / static_cast<double>(k) << " | " << srs.str() << " | " << cts.str() << " |\n";
  }
}

}  // namespace stvla
