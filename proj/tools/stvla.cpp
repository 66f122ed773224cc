// Command-line front end: data generation, annotation, training, evaluation,
// ablations and trajectory dumps.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stvla/train.hpp"

using namespace stvla;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> set;

  void add_to(CLI::App* app) {
    app->add_option("--config", file, "flat key=value config file");
    app->add_option("--set", set, "key=value overrides, applied after --config");
  }
  RunConfig load() const {
    RunConfig cfg = file.empty() ? RunConfig() : RunConfig::from_file(file);
    cfg.apply(set);
    return cfg;
  }
};

void print_log(const TrainLog& log) {
  std::cout << "stage " << log.stage << " initial loss " << log.initial_loss << '\n';
  for (const auto& e : log.epochs)
    std::cout << "  epoch " << e.epoch << "  train " << e.train_loss << "  heldout " << e.heldout_loss << '\n';
  if (log.flagged) std::cout << "  FLAGGED: loss fell by less than half\n";
  if (log.aborted) std::cout << "  ABORTED: " << log.abort_reason << " (restored last good parameters)\n";
  if (!log.frozen_changed.empty()) std::cout << "  frozen parameters changed: " << log.frozen_changed.front() << '\n';
}

void write_log(const TrainLog& log, const std::string& path) {
  json j;
  j["stage"] = log.stage;
  j["initial_loss"] = log.initial_loss;
  j["epochs"] = json::array();
  for (const auto& e : log.epochs)
    j["epochs"].push_back({{"epoch", e.epoch}, {"train", e.train_loss}, {"heldout", e.heldout_loss}});
  j["flagged"] = log.flagged;
  j["aborted"] = log.aborted;
  j["abort_reason"] = log.abort_reason;
  std::ofstream(path) << j.dump(2) << '\n';
}

void print_report(const EvalReport& r) {
  std::cout << "run " << r.run_id << "  config " << r.config_hash << '\n' << std::fixed << std::setprecision(3);
  for (const auto& [name, s] : r.suites)
    std::cout << "  " << std::setw(8) << name << "  SR " << s.sr << " +- " << s.sr_std << "  CT mean " << s.ct_mean
              << "  median " << s.ct_median << "  (" << s.successes << "/" << s.episodes << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatiotemporal VLA desk-scale toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate raw expert demonstrations");
  std::size_t subtasks = 40, episodes_per = 0, episodes = 250;
  double hz = 20.0;
  std::uint64_t seed = 7;
  std::string out;
  gen->add_option("--subtasks", subtasks, "number of benchmark subtasks to cycle through")->check(CLI::Range(1, 40));
  gen->add_option("--episodes-per", episodes_per, "episodes per subtask (overrides --episodes)");
  gen->add_option("--episodes", episodes, "total episodes");
  gen->add_option("--hz", hz, "control frequency");
  gen->add_option("--seed", seed, "data seed");
  gen->add_option("--out", out, "output directory")->required();

  // annotate
  auto* ann = app.add_subcommand("annotate", "chunk raw demonstrations into the training dataset");
  std::string ann_in, ann_out;
  double cos_thresh = 0.95;
  std::size_t max_chunk = 16;
  ann->add_option("--in", ann_in, "gen-data directory")->required();
  ann->add_option("--out", ann_out, "dataset directory (defaults to --in)");
  ann->add_option("--cos-thresh", cos_thresh, "direction-consistency threshold");
  ann->add_option("--max-chunk", max_chunk, "maximum steps per chunk");

  // train
  auto* tr = app.add_subcommand("train", "run one training stage");
  ConfigArgs tr_cfg;
  tr_cfg.add_to(tr);
  int stage = 1;
  std::string ckpt_in, ckpt_out;
  tr->add_option("--stage", stage, "1 = alignment, 2 = action fine-tuning")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--ckpt-in", ckpt_in, "checkpoint to start from (stage 2)");
  tr->add_option("--ckpt-out", ckpt_out, "checkpoint to write")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "closed-loop evaluation");
  ConfigArgs ev_cfg;
  ev_cfg.add_to(ev);
  std::string ev_ckpt, suite = "all", ev_out;
  std::size_t ev_episodes = 0, ev_workers = 0;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--suite", suite, "task suite")->check(CLI::IsMember({"spatial", "object", "goal", "long", "all"}));
  ev->add_option("--episodes", ev_episodes, "episode count (default: eval_episodes)");
  ev->add_option("--workers", ev_workers, "rollout threads (default: eval_workers)");
  ev->add_option("--out", ev_out, "report directory (default: out_dir)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate every variant of a flag matrix");
  ConfigArgs ab_cfg;
  ab_cfg.add_to(ab);
  std::string matrix, ab_out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  ab->add_option("--matrix", matrix, "lines of: name key=value ...")->required();
  ab->add_option("--seeds", seeds, "seeds")->delimiter(',');
  ab->add_option("--out", ab_out, "output directory (default: out_dir)");

  // run
  auto* run = app.add_subcommand("run", "dataset + both stages + evaluation in one go");
  ConfigArgs run_cfg;
  run_cfg.add_to(run);

  // dump-traj
  auto* dump = app.add_subcommand("dump-traj", "roll out one evaluation episode and write its trajectory");
  ConfigArgs dump_cfg;
  dump_cfg.add_to(dump);
  std::string dump_ckpt, dump_out = ".", dump_suite = "all";
  std::size_t episode_id = 0;
  bool svg = false;
  dump->add_option("--ckpt", dump_ckpt, "checkpoint (omit to roll out the scripted expert)");
  dump->add_option("--episode", episode_id, "evaluation episode index")->required();
  dump->add_option("--suite", dump_suite, "task suite")->check(CLI::IsMember({"spatial", "object", "goal", "long", "all"}));
  dump->add_flag("--svg", svg, "also write the xy-path / speed plot");
  dump->add_option("--out", dump_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const std::size_t n = episodes_per ? episodes_per * subtasks : episodes;
      const auto eps = generate_dataset_episodes(subtasks, n, hz, seed);
      save_raw_episodes(eps, out);
      std::size_t failed = 0;
      for (const auto& e : eps) failed += e.success ? 0 : 1;
      std::cout << "wrote " << eps.size() << " episodes to " << out << " (" << failed << " expert failures)\n";
    } else if (*ann) {
      const ChunkingParams params{cos_thresh, max_chunk};
      params.validate();
      const Dataset ds = annotate(load_raw_episodes(ann_in), params);
      serialize(ds, ann_out.empty() ? ann_in : ann_out);
      std::size_t chunks = 0;
      for (const auto& e : ds.episodes) chunks += e.chunks.size();
      std::cout << "annotated " << ds.episodes.size() << " episodes into " << chunks << " chunks\n";
    } else if (*tr) {
      const RunConfig cfg = tr_cfg.load();
      const Dataset ds = build_dataset(cfg);
      const Split sp = dataset_split(cfg, ds);
      VlaModel model(ModelConfig::from_run_config(cfg));
      if (!ckpt_in.empty()) model.load(ckpt_in);
      TrainLog log;
      if (stage == 1) {
        log = train_stage1(model, cfg, ds, sp);
      } else {
        if (ckpt_in.empty() && !cfg.flag("stage2_cold_start"))
          throw std::invalid_argument("train --stage 2 needs --ckpt-in unless stage2_cold_start=1");
        log = train_stage2(model, cfg, ds, sp);
        const DtMetrics dt = heldout_dt_metrics(model, cfg, ds, sp);
        std::cout << "heldout dt MAE " << dt.model_mae << "  mean-dt baseline " << dt.baseline_mae << "  mean dt "
                  << dt.mean_gt << '\n';
      }
      print_log(log);
      model.save(ckpt_out);
      write_log(log, ckpt_out + ".log.json");
      return log.aborted ? 2 : 0;
    } else if (*ev) {
      RunConfig cfg = ev_cfg.load();
      if (ev_workers) cfg.set("eval_workers", std::to_string(ev_workers));
      if (!ev_out.empty()) cfg.set("out_dir", ev_out);
      VlaModel model(ModelConfig::from_run_config(cfg));
      model.load(ev_ckpt);
      std::vector<TraceRow> example;
      const EvalReport r =
          evaluate_suite(model, cfg, suite, ev_episodes ? ev_episodes : cfg.count("eval_episodes"), &example);
      write_report(r, cfg.str("out_dir"), example);
      print_report(r);
    } else if (*ab) {
      RunConfig cfg = ab_cfg.load();
      const std::string dir = ab_out.empty() ? cfg.str("out_dir") : ab_out;
      const auto rows = ablate(cfg, read_matrix(matrix), seeds, dir);
      std::ifstream md(fs::path(dir) / "ablation.md");
      std::cout << md.rdbuf();
    } else if (*run) {
      const RunConfig cfg = run_cfg.load();
      const Dataset ds = build_dataset(cfg);
      const PipelineResult res = run_pipeline(cfg, ds);
      print_log(res.stage1);
      print_log(res.stage2);
      std::cout << "heldout dt MAE " << res.dt.model_mae << "  mean-dt baseline " << res.dt.baseline_mae << '\n';
      write_report(res.report, cfg.str("out_dir"));
      print_report(res.report);
    } else if (*dump) {
      const RunConfig cfg = dump_cfg.load();
      const auto specs = eval_specs(dump_suite, episode_id + 1, static_cast<std::uint64_t>(cfg.integer("eval_seed")));
      const TaskSpec& spec = specs.back();
      RolloutOptions opt = eval_options(cfg).rollout;
      RolloutResult r;
      if (dump_ckpt.empty()) {
        const Episode ep = generate_episode(spec, cfg.num("hz"));
        opt.history_len = 1;
        r = evaluate_rollout(build_world(spec), replay_policy(ep.actions, 1.0 / cfg.num("hz")), spec, opt);
      } else {
        VlaModel model(ModelConfig::from_run_config(cfg));
        model.load(dump_ckpt);
        r = evaluate_rollout(build_world(spec), model.rollout_policy(), spec, opt);
      }
      fs::create_directories(dump_out);
      const std::string stem = (fs::path(dump_out) / ("traj_" + std::to_string(episode_id))).string();
      write_trajectory(stem + ".csv", r.trace);
      if (svg) write_trajectory_svg(stem + ".svg", r.trace, spec.instruction);
      std::cout << spec.instruction << "\n" << (r.success ? "success" : "failure: " + r.failure_reason) << "  t = "
                << r.completion_time << " s, " << r.decisions << " decisions -> " << stem << ".csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
