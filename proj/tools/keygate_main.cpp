// keygate: single entry point for the grid-world, oracle data generation,
// policy training, and experiment running.
//
// Config files use the sectioned key-value format (see include/keygate/config.hpp);
// command-line flags override file values. --dump-config prints the fully
// resolved configuration and exits.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "keygate/experiments.hpp"

namespace fs = std::filesystem;
using namespace keygate;

namespace {

std::vector<TaskId> parse_tasks(const std::string& csv) {
  if (csv == "all") return {kAllTasks.begin(), kAllTasks.end()};
  std::vector<TaskId> tasks;
  std::istringstream is(csv);
  std::string item;
  while (std::getline(is, item, ','))
    if (!item.empty()) tasks.push_back(task_from_name(item));
  if (tasks.empty()) throw std::runtime_error("no tasks given");
  return tasks;
}

double parse_ratio(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  return std::stod(s);
}

// Shared training plumbing: config file + flag overrides.
struct TrainArgs {
  std::string config_path;
  std::string data_manifest;
  std::string out = "policy.ckpt";
  std::string metrics;
  // -1 / nan = "not set on the command line, use config/default"
  int updates = -1;
  std::int64_t seed = -1;
  double lr = std::nan("");
  bool dump_config = false;
  bool literal_loss = false;

  void add_common(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key-value sections)");
    cmd->add_option("--data", data_manifest, "dataset manifest")->required();
    cmd->add_option("--out", out, "output checkpoint path");
    cmd->add_option("--metrics", metrics, "metrics CSV path");
    cmd->add_option("--updates", updates, "training updates");
    cmd->add_option("--seed", seed, "training seed");
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_flag("--dump-config", dump_config,
                  "print the resolved configuration and exit");
  }

  KeyValueFile load_config() const {
    return config_path.empty() ? KeyValueFile{} : KeyValueFile::load(config_path);
  }

  // Resolves file + defaults, then applies flag overrides.
  void resolve(const KeyValueFile& kv, PolicyConfig& pcfg, TrainConfig& tcfg,
               VTraceConfig& vcfg) const {
    pcfg.embed_dim = int(kv.get_int_or("network", "embed_dim", pcfg.embed_dim));
    pcfg.hidden_dim = int(kv.get_int_or("network", "hidden_dim", pcfg.hidden_dim));
    tcfg.batch_size = int(kv.get_int_or("train", "batch_size", tcfg.batch_size));
    tcfg.window = int(kv.get_int_or("train", "window", tcfg.window));
    tcfg.lr = kv.get_double_or("train", "lr", tcfg.lr);
    tcfg.updates = int(kv.get_int_or("train", "updates", tcfg.updates));
    tcfg.seed = kv.get_uint_or("train", "seed", tcfg.seed);
    if (kv.has("train", "tasks")) {
      tcfg.tasks.clear();
      for (const auto& t : kv.get_list_or("train", "tasks", {}))
        tcfg.tasks.push_back(task_from_name(t));
    }
    tcfg.rl_episodes_per_update = int(kv.get_int_or(
        "train", "rl_episodes_per_update", tcfg.rl_episodes_per_update));
    tcfg.actors = int(kv.get_int_or("train", "actors", tcfg.actors));
    tcfg.staleness_bound =
        int(kv.get_int_or("train", "staleness_bound", tcfg.staleness_bound));
    tcfg.ll_epsilon = kv.get_double_or("train", "ll_epsilon", tcfg.ll_epsilon);
    tcfg.eval_every = int(kv.get_int_or("train", "eval_every", tcfg.eval_every));
    tcfg.eval_episodes =
        int(kv.get_int_or("train", "eval_episodes", tcfg.eval_episodes));
    tcfg.checkpoint_every =
        int(kv.get_int_or("train", "checkpoint_every", tcfg.checkpoint_every));
    vcfg.gamma = kv.get_double_or("vtrace", "gamma", vcfg.gamma);
    vcfg.rho_bar = kv.get_double_or("vtrace", "rho_bar", vcfg.rho_bar);
    vcfg.c_bar = kv.get_double_or("vtrace", "c_bar", vcfg.c_bar);
    vcfg.value_weight = kv.get_double_or("vtrace", "value_weight", vcfg.value_weight);
    vcfg.entropy_weight =
        kv.get_double_or("vtrace", "entropy_weight", vcfg.entropy_weight);
    vcfg.literal_formula =
        kv.get_bool_or("vtrace", "literal_formula", vcfg.literal_formula);
    kv.check_consumed();

    if (updates >= 0) tcfg.updates = updates;
    if (seed >= 0) tcfg.seed = std::uint64_t(seed);
    if (!std::isnan(lr)) tcfg.lr = lr;
    if (literal_loss) vcfg.literal_formula = true;
    tcfg.metrics_path = metrics;
    if (tcfg.checkpoint_every > 0) tcfg.checkpoint_path = out;
  }

  // True (and prints) when --dump-config was requested.
  bool maybe_dump(const PolicyConfig& pcfg, const TrainConfig& tcfg,
                  const VTraceConfig& vcfg,
                  const std::vector<std::pair<std::string, std::string>>& extra)
      const {
    if (!dump_config) return false;
    KeyValueFile kv;
    kv.set_int("network", "embed_dim", pcfg.embed_dim);
    kv.set_int("network", "hidden_dim", pcfg.hidden_dim);
    kv.set_int("train", "batch_size", tcfg.batch_size);
    kv.set_int("train", "window", tcfg.window);
    kv.set_double("train", "lr", tcfg.lr);
    kv.set_int("train", "updates", tcfg.updates);
    kv.set_int("train", "seed", std::int64_t(tcfg.seed));
    {
      std::ostringstream os;
      for (size_t i = 0; i < tcfg.tasks.size(); ++i)
        os << (i ? "," : "") << task_name(tcfg.tasks[i]);
      kv.set("train", "tasks", os.str());
    }
    kv.set_int("train", "rl_episodes_per_update", tcfg.rl_episodes_per_update);
    kv.set_int("train", "actors", tcfg.actors);
    kv.set_int("train", "staleness_bound", tcfg.staleness_bound);
    kv.set_double("train", "ll_epsilon", tcfg.ll_epsilon);
    kv.set_int("train", "eval_every", tcfg.eval_every);
    kv.set_int("train", "eval_episodes", tcfg.eval_episodes);
    kv.set_int("train", "checkpoint_every", tcfg.checkpoint_every);
    kv.set_double("vtrace", "gamma", vcfg.gamma);
    kv.set_double("vtrace", "rho_bar", vcfg.rho_bar);
    kv.set_double("vtrace", "c_bar", vcfg.c_bar);
    kv.set_double("vtrace", "value_weight", vcfg.value_weight);
    kv.set_double("vtrace", "entropy_weight", vcfg.entropy_weight);
    kv.set("vtrace", "literal_formula", vcfg.literal_formula ? "true" : "false");
    for (const auto& [key, value] : extra) kv.set("run", key, value);
    std::cout << kv.to_string();
    return true;
  }
};

void print_report(const EvalReport& report) {
  std::printf("%-22s %8s %8s %8s\n", "task", "success", "length", "instrs");
  for (const auto& [task, te] : report.tasks) {
    if (te.instructions_available)
      std::printf("%-22s %8.3f %8.1f %8.2f\n", task.c_str(), te.success,
                  te.mean_length, te.mean_instructions);
    else
      std::printf("%-22s %8.3f %8.1f %8s\n", task.c_str(), te.success,
                  te.mean_length, "n/a");
  }
}

// ---------------------------------------------------------------------------
// env
// ---------------------------------------------------------------------------

int cmd_env_render(const std::string& task, std::uint64_t seed) {
  WorldState state = reset(task_from_name(task), seed);
  std::cout << render(state) << '\n' << render_legend();
  return 0;
}

int cmd_env_rollout(const std::string& task, std::uint64_t seed, double epsilon,
                    const std::string& out) {
  const Vocabulary vocab;
  Trajectory traj = run_oracle_episode(task_from_name(task), seed, epsilon, vocab);
  if (!out.empty()) save_trajectory(traj, out);
  std::cout << "task=" << task << " seed=" << seed << " steps=" << traj.steps.size()
            << " outcome=" << traj.outcome << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

int cmd_data_generate(const std::string& tasks_csv, int episodes, double epsilon,
                      std::uint64_t seed, const std::string& out) {
  const Vocabulary vocab;
  fs::create_directories(out);
  DatasetManifest manifest =
      generate_dataset(parse_tasks(tasks_csv), episodes, epsilon, seed, out, vocab);
  std::cout << "wrote " << manifest.files.size() << " trajectories to " << out
            << " (manifest.json)\n";
  return 0;
}

int cmd_data_stats(const std::string& manifest_path) {
  DatasetManifest manifest = DatasetManifest::load(manifest_path);
  std::vector<Trajectory> data = load_dataset(manifest_path);
  std::map<std::string, std::pair<int, int>> per_task;  // episodes, wins
  double steps = 0.0;
  int flagged = 0;
  for (const auto& traj : data) {
    auto& [n, wins] = per_task[task_name(traj.task)];
    ++n;
    wins += traj.outcome > 0 ? 1 : 0;
    steps += double(traj.steps.size());
    for (const auto& s : traj.steps) flagged += s.flagged ? 1 : 0;
  }
  std::cout << "episodes=" << data.size() << " epsilon=" << manifest.epsilon
            << " generator_seed=" << manifest.generator_seed << '\n';
  std::printf("%-22s %8s %8s\n", "task", "episodes", "success");
  for (const auto& [task, stats] : per_task)
    std::printf("%-22s %8d %8.3f\n", task.c_str(), stats.first,
                stats.second / double(stats.first));
  std::printf("mean episode length %.1f, flagged solver steps %d\n",
              data.empty() ? 0.0 : steps / double(data.size()), flagged);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train_ll(const TrainArgs& args) {
  const Vocabulary vocab;
  PolicyConfig pcfg;
  pcfg.vocab_size = vocab.size();
  TrainConfig tcfg;
  VTraceConfig vcfg;
  args.resolve(args.load_config(), pcfg, tcfg, vcfg);
  if (args.maybe_dump(pcfg, tcfg, vcfg, {{"mode", "ll"}})) return 0;

  std::vector<Trajectory> data = load_dataset(args.data_manifest);
  LLPolicy policy(pcfg, tcfg.seed);
  TrainResult result = train_ll(policy, data, tcfg);
  policy.save(args.out);
  std::cout << "trained " << result.rows.size() << " updates, final BC loss "
            << (result.rows.empty() ? 0.0 : result.rows.back().bc_loss)
            << ", saved " << args.out << '\n';
  return 0;
}

int cmd_train_hl(const TrainArgs& args, const std::string& ll_checkpoint,
                 double w_bc, double w_rl) {
  const Vocabulary vocab;
  PolicyConfig pcfg;
  pcfg.vocab_size = vocab.size();
  TrainConfig tcfg;
  VTraceConfig vcfg;
  args.resolve(args.load_config(), pcfg, tcfg, vcfg);
  if (args.maybe_dump(pcfg, tcfg, vcfg,
                      {{"mode", "hl"},
                       {"ll_checkpoint", ll_checkpoint},
                       {"w_bc", std::to_string(w_bc)},
                       {"w_rl", std::to_string(w_rl)}}))
    return 0;

  LLPolicy ll = LLPolicy::load(ll_checkpoint);
  ll.params().freeze();
  std::vector<Trajectory> data = load_dataset(args.data_manifest);
  HLPolicy policy(pcfg, tcfg.seed);
  HLLossWeights weights{w_bc, w_rl};
  TrainResult result = train_hl(policy, ll, data, weights, vcfg, tcfg);
  policy.save(args.out);
  std::cout << "trained " << result.rows.size() << " updates (w_bc=" << w_bc
            << " w_rl=" << w_rl << "), saved " << args.out << '\n';
  return 0;
}

int cmd_train_flat(const TrainArgs& args, double w_bc, double w_rl,
                   double aux_lang_weight) {
  const Vocabulary vocab;
  PolicyConfig pcfg;
  pcfg.vocab_size = vocab.size();
  TrainConfig tcfg;
  VTraceConfig vcfg;
  args.resolve(args.load_config(), pcfg, tcfg, vcfg);
  if (args.maybe_dump(pcfg, tcfg, vcfg,
                      {{"mode", "flat"},
                       {"w_bc", std::to_string(w_bc)},
                       {"w_rl", std::to_string(w_rl)},
                       {"aux_lang_weight", std::to_string(aux_lang_weight)}}))
    return 0;

  std::vector<Trajectory> data = load_dataset(args.data_manifest);
  FlatPolicy policy(pcfg, tcfg.seed);
  FlatLossWeights weights{w_bc, w_rl, aux_lang_weight};
  TrainResult result = train_flat(policy, data, weights, vcfg, tcfg);
  policy.save(args.out);
  std::cout << "trained " << result.rows.size() << " updates, saved " << args.out
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// exp
// ---------------------------------------------------------------------------

int cmd_exp_run(const std::string& spec_path, bool dump_config) {
  ExperimentSpec spec = ExperimentSpec::load(spec_path);
  if (dump_config) {
    std::cout << spec.to_kv().to_string();
    return 0;
  }
  ExperimentResult result = run_experiment(spec);
  emit_learning_curves(result,
                       spec.out_dir + "/" + spec.name + "_curves.csv");
  std::cout << "experiment " << spec.name << " (" << agent_kind_name(spec.kind)
            << ", " << spec.seeds.size() << " seeds)\n";
  print_report(result.report);
  return 0;
}

int cmd_exp_sweep(const std::string& spec_path, const std::string& ratios_csv) {
  ExperimentSpec base = ExperimentSpec::load(spec_path);
  std::vector<double> ratios;
  std::istringstream is(ratios_csv);
  std::string item;
  while (std::getline(is, item, ','))
    if (!item.empty()) ratios.push_back(parse_ratio(item));
  std::vector<SweepEntry> sweep = ablation_sweep(base, ratios);
  const std::string table = base.out_dir + "/" + base.name + "_sweep.csv";
  emit_sweep_table(sweep, table);
  std::cout << "sweep table: " << table << '\n';
  for (const auto& entry : sweep) {
    std::cout << "ratio " << ratio_label(entry.ratio) << ":\n";
    print_report(entry.result.report);
  }
  return 0;
}

int cmd_exp_analyze(const std::string& checkpoint, const std::string& ll_checkpoint,
                    const AnalyzeOptions& opt, const std::string& out) {
  const Vocabulary vocab;
  HLPolicy hl = HLPolicy::load(checkpoint);
  LLPolicy ll = LLPolicy::load(ll_checkpoint);
  ll.params().freeze();
  InstructionAnalysis analysis = analyze_instructions(hl, ll, vocab, opt);
  fs::create_directories(out);
  emit_instruction_tables(analysis, out + "/instruction_means.csv",
                          out + "/instruction_freq.csv");
  print_report(EvalReport{analysis.tasks, analysis.counts});
  std::cout << "distinct instructions (count >= " << analysis.min_count
            << "): easy " << analysis.distinct_post_cutoff_easy << ", hard "
            << analysis.distinct_post_cutoff_hard << '\n';
  for (const std::string instr : {"drop it", "move back", "move forward"})
    std::printf("freq(\"%s\")  easy %.4f  hard %.4f\n", instr.c_str(),
                analysis.freq(instr, false), analysis.freq(instr, true));
  return 0;
}

// Re-derives plot-ready curves from the metrics CSVs a run left behind:
// keeps the evaluated rows (success columns present) of every *_metrics.csv.
int cmd_exp_plots(const std::string& in, const std::string& out) {
  fs::create_directories(out);
  int written = 0;
  for (const auto& entry : fs::directory_iterator(in)) {
    const std::string name = entry.path().filename().string();
    if (name.size() < 12 || name.substr(name.size() - 12) != "_metrics.csv")
      continue;
    std::ifstream is(entry.path());
    std::string header;
    if (!std::getline(is, header)) continue;
    // update + the success_* columns
    std::vector<int> keep;
    std::vector<std::string> cols;
    {
      std::istringstream hs(header);
      std::string col;
      int i = 0;
      for (; std::getline(hs, col, ','); ++i)
        if (col == "update" || col.rfind("success_", 0) == 0) {
          keep.push_back(i);
          cols.push_back(col);
        }
    }
    const std::string out_path =
        out + "/" + name.substr(0, name.size() - 12) + "_curves.csv";
    std::ofstream os(out_path);
    for (size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
    std::string line;
    while (std::getline(is, line)) {
      std::vector<std::string> fields;
      std::istringstream ls(line);
      std::string field;
      while (std::getline(ls, field, ',')) fields.push_back(field);
      // unevaluated updates carry the -1 sentinel in every success column
      bool evaluated = false;
      for (size_t k = 1; k < keep.size(); ++k)
        evaluated = evaluated || fields[keep[k]] != "-1";
      if (!evaluated) continue;
      for (size_t k = 0; k < keep.size(); ++k)
        os << (k ? "," : "") << fields[keep[k]];
      os << '\n';
    }
    ++written;
  }
  std::cout << "wrote " << written << " curve files to " << out << '\n';
  return written > 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keygate: grid-world tasks, oracle data, policies, experiments"};
  app.require_subcommand(1);

  // env
  auto* env = app.add_subcommand("env", "environment inspection");
  env->require_subcommand(1);
  std::string env_task = "key_choice", env_out;
  std::uint64_t env_seed = 0;
  double env_epsilon = 0.0;
  auto* env_render = env->add_subcommand("render", "print a layout as ASCII");
  env_render->add_option("--task", env_task, "task name");
  env_render->add_option("--seed", env_seed, "layout seed");
  auto* env_rollout =
      env->add_subcommand("rollout", "run one scripted oracle episode");
  env_rollout->add_option("--task", env_task, "task name");
  env_rollout->add_option("--seed", env_seed, "episode seed");
  env_rollout->add_option("--epsilon", env_epsilon, "solver action noise");
  env_rollout->add_option("--out", env_out, "trajectory output path");

  // data
  auto* data = app.add_subcommand("data", "oracle dataset generation");
  data->require_subcommand(1);
  std::string data_tasks = "all", data_out = "dataset", data_manifest;
  int data_episodes = 500;
  double data_epsilon = 0.1;
  std::uint64_t data_seed = 0;
  auto* data_generate = data->add_subcommand("generate", "record oracle episodes");
  data_generate->add_option("--tasks", data_tasks, "comma list or 'all'");
  data_generate->add_option("--episodes", data_episodes, "episodes per task");
  data_generate->add_option("--epsilon", data_epsilon, "solver action noise");
  data_generate->add_option("--seed", data_seed, "generator seed");
  data_generate->add_option("--out", data_out, "output directory");
  auto* data_stats = data->add_subcommand("stats", "summarize a dataset");
  data_stats->add_option("--manifest", data_manifest, "manifest path")->required();

  // train
  auto* train = app.add_subcommand("train", "policy training");
  train->require_subcommand(1);
  TrainArgs ll_args, hl_args, flat_args;
  std::string hl_ll_checkpoint;
  double hl_w_bc = 1.0, hl_w_rl = 1.0;
  double flat_w_bc = 1.0, flat_w_rl = 1.0, flat_aux = 1.0;

  auto* train_ll_cmd =
      train->add_subcommand("ll", "instruction follower (behavioral cloning)");
  ll_args.add_common(train_ll_cmd);

  auto* train_hl_cmd =
      train->add_subcommand("hl", "instruction emitter (BC + RL)");
  hl_args.add_common(train_hl_cmd);
  train_hl_cmd->add_option("--ll-checkpoint", hl_ll_checkpoint, "frozen executor")
      ->required();
  train_hl_cmd->add_option("--w-bc", hl_w_bc, "cloning-loss weight");
  train_hl_cmd->add_option("--w-rl", hl_w_rl, "RL-loss weight");
  train_hl_cmd->add_flag("--literal-loss", hl_args.literal_loss,
                         "Monte-Carlo returns instead of V-trace targets");

  auto* train_flat_cmd = train->add_subcommand("flat", "flat baseline");
  flat_args.add_common(train_flat_cmd);
  train_flat_cmd->add_option("--w-bc", flat_w_bc, "cloning-loss weight");
  train_flat_cmd->add_option("--w-rl", flat_w_rl, "RL-loss weight");
  train_flat_cmd->add_option("--aux-lang-weight", flat_aux,
                             "auxiliary instruction-prediction weight");
  train_flat_cmd->add_flag("--literal-loss", flat_args.literal_loss,
                           "Monte-Carlo returns instead of V-trace targets");

  // exp
  auto* exp = app.add_subcommand("exp", "experiments and analyses");
  exp->require_subcommand(1);
  std::string exp_spec, exp_ratios = "0,0.001,1,1000,inf";
  std::string exp_checkpoint, exp_ll_checkpoint, exp_in, exp_out = "analysis";
  bool exp_dump = false;
  AnalyzeOptions exp_analyze_opt;
  std::int64_t exp_analyze_seed = 0;

  auto* exp_run = exp->add_subcommand("run", "run one experiment spec");
  exp_run->add_option("--spec", exp_spec, "experiment spec file")->required();
  exp_run->add_flag("--dump-config", exp_dump, "print the resolved spec and exit");
  auto* exp_sweep = exp->add_subcommand("sweep", "BC/RL weight-ratio sweep");
  exp_sweep->add_option("--spec", exp_spec, "base hierarchical spec")->required();
  exp_sweep->add_option("--ratios", exp_ratios, "comma list, 'inf' allowed");
  auto* exp_analyze =
      exp->add_subcommand("analyze", "instruction usage of a trained emitter");
  exp_analyze->add_option("--checkpoint", exp_checkpoint, "emitter checkpoint")
      ->required();
  exp_analyze->add_option("--ll-checkpoint", exp_ll_checkpoint, "executor checkpoint")
      ->required();
  exp_analyze->add_option("--episodes", exp_analyze_opt.episodes_per_task,
                          "recorded episodes per task");
  exp_analyze->add_option("--min-count", exp_analyze_opt.min_count,
                          "frequency cutoff");
  exp_analyze->add_option("--ll-epsilon", exp_analyze_opt.ll_epsilon,
                          "executor noise during recording");
  exp_analyze->add_option("--seed", exp_analyze_seed, "recording seed");
  exp_analyze->add_option("--out", exp_out, "output directory");
  auto* exp_plots = exp->add_subcommand("plots", "plot-ready CSVs from run outputs");
  exp_plots->add_option("--in", exp_in, "directory with *_metrics.csv files")
      ->required();
  exp_plots->add_option("--out", exp_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (env_render->parsed()) return cmd_env_render(env_task, env_seed);
    if (env_rollout->parsed())
      return cmd_env_rollout(env_task, env_seed, env_epsilon, env_out);
    if (data_generate->parsed())
      return cmd_data_generate(data_tasks, data_episodes, data_epsilon, data_seed,
                               data_out);
    if (data_stats->parsed()) return cmd_data_stats(data_manifest);
    if (train_ll_cmd->parsed()) return cmd_train_ll(ll_args);
    if (train_hl_cmd->parsed())
      return cmd_train_hl(hl_args, hl_ll_checkpoint, hl_w_bc, hl_w_rl);
    if (train_flat_cmd->parsed())
      return cmd_train_flat(flat_args, flat_w_bc, flat_w_rl, flat_aux);
    if (exp_run->parsed()) return cmd_exp_run(exp_spec, exp_dump);
    if (exp_sweep->parsed()) return cmd_exp_sweep(exp_spec, exp_ratios);
    if (exp_analyze->parsed()) {
      exp_analyze_opt.seed = std::uint64_t(exp_analyze_seed);
      return cmd_exp_analyze(exp_checkpoint, exp_ll_checkpoint, exp_analyze_opt,
                             exp_out);
    }
    if (exp_plots->parsed()) return cmd_exp_plots(exp_in, exp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
