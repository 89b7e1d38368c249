#include "keygate/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace keygate {

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

const std::string& agent_kind_name(AgentKind k) {
  static const std::string names[] = {"hierarchical", "flat"};
  return names[int(k)];
}

AgentKind agent_kind_from_name(const std::string& name) {
  if (name == "hierarchical") return AgentKind::Hierarchical;
  if (name == "flat") return AgentKind::Flat;
  throw std::invalid_argument("unknown agent kind: " + name);
}

void ExperimentSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("experiment name required");
  std::vector<TaskId> sorted = tasks;
  std::sort(sorted.begin(), sorted.end());
  std::vector<TaskId> all{kAllTasks.begin(), kAllTasks.end()};
  std::sort(all.begin(), all.end());
  if (sorted != all)
    throw std::invalid_argument("experiments train jointly on all four tasks");
  if (seeds.empty()) throw std::invalid_argument("at least one seed required");
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size())
    throw std::invalid_argument("experiment seeds must be distinct");
  if (updates < 0) throw std::invalid_argument("negative update budget");
  if (eval_episodes <= 0) throw std::invalid_argument("eval_episodes must be positive");
  if (kind == AgentKind::Hierarchical) {
    hl_weights.validate();
    if (ll_checkpoint.empty())
      throw std::invalid_argument("hierarchical experiments need an LL checkpoint");
  } else {
    flat_weights.validate();
  }
  if (data_manifest.empty())
    throw std::invalid_argument("experiments need a dataset manifest");
}

KeyValueFile ExperimentSpec::to_kv() const {
  KeyValueFile kv;
  kv.set("experiment", "name", name);
  kv.set("experiment", "kind", agent_kind_name(kind));
  {
    std::ostringstream os;
    for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    kv.set("experiment", "seeds", os.str());
  }
  kv.set_int("experiment", "updates", updates);
  kv.set_int("experiment", "eval_episodes", eval_episodes);
  kv.set("paths", "ll_checkpoint", ll_checkpoint);
  kv.set("paths", "data_manifest", data_manifest);
  kv.set("paths", "out_dir", out_dir);
  kv.set_double("hl_weights", "w_bc", hl_weights.w_bc);
  kv.set_double("hl_weights", "w_rl", hl_weights.w_rl);
  kv.set_double("flat_weights", "w_bc", flat_weights.w_bc);
  kv.set_double("flat_weights", "w_rl", flat_weights.w_rl);
  kv.set_double("flat_weights", "aux_lang_weight", flat_weights.aux_lang_weight);
  kv.set_int("network", "embed_dim", policy.embed_dim);
  kv.set_int("network", "hidden_dim", policy.hidden_dim);
  kv.set_int("train", "batch_size", train.batch_size);
  kv.set_int("train", "window", train.window);
  kv.set_double("train", "lr", train.lr);
  kv.set_int("train", "rl_episodes_per_update", train.rl_episodes_per_update);
  kv.set_int("train", "actors", train.actors);
  kv.set_int("train", "staleness_bound", train.staleness_bound);
  kv.set_int("train", "eval_every", train.eval_every);
  kv.set_double("train", "ll_epsilon", train.ll_epsilon);
  kv.set_double("vtrace", "gamma", vtrace.gamma);
  kv.set_double("vtrace", "rho_bar", vtrace.rho_bar);
  kv.set_double("vtrace", "c_bar", vtrace.c_bar);
  kv.set_double("vtrace", "value_weight", vtrace.value_weight);
  kv.set_double("vtrace", "entropy_weight", vtrace.entropy_weight);
  kv.set("vtrace", "literal_formula", vtrace.literal_formula ? "true" : "false");
  return kv;
}

ExperimentSpec ExperimentSpec::from_kv(const KeyValueFile& kv) {
  ExperimentSpec spec;
  spec.name = kv.get_string_or("experiment", "name", spec.name);
  spec.kind = agent_kind_from_name(
      kv.get_string_or("experiment", "kind", agent_kind_name(spec.kind)));
  if (kv.has("experiment", "seeds")) {
    spec.seeds.clear();
    for (const auto& s : kv.get_list_or("experiment", "seeds", {}))
      spec.seeds.push_back(std::stoull(s));
  }
  spec.updates = int(kv.get_int_or("experiment", "updates", spec.updates));
  spec.eval_episodes =
      int(kv.get_int_or("experiment", "eval_episodes", spec.eval_episodes));
  spec.ll_checkpoint = kv.get_string_or("paths", "ll_checkpoint", "");
  spec.data_manifest = kv.get_string_or("paths", "data_manifest", "");
  spec.out_dir = kv.get_string_or("paths", "out_dir", spec.out_dir);
  spec.hl_weights.w_bc = kv.get_double_or("hl_weights", "w_bc", spec.hl_weights.w_bc);
  spec.hl_weights.w_rl = kv.get_double_or("hl_weights", "w_rl", spec.hl_weights.w_rl);
  spec.flat_weights.w_bc =
      kv.get_double_or("flat_weights", "w_bc", spec.flat_weights.w_bc);
  spec.flat_weights.w_rl =
      kv.get_double_or("flat_weights", "w_rl", spec.flat_weights.w_rl);
  spec.flat_weights.aux_lang_weight = kv.get_double_or(
      "flat_weights", "aux_lang_weight", spec.flat_weights.aux_lang_weight);
  spec.policy.embed_dim =
      int(kv.get_int_or("network", "embed_dim", spec.policy.embed_dim));
  spec.policy.hidden_dim =
      int(kv.get_int_or("network", "hidden_dim", spec.policy.hidden_dim));
  spec.train.batch_size =
      int(kv.get_int_or("train", "batch_size", spec.train.batch_size));
  spec.train.window = int(kv.get_int_or("train", "window", spec.train.window));
  spec.train.lr = kv.get_double_or("train", "lr", spec.train.lr);
  spec.train.rl_episodes_per_update = int(kv.get_int_or(
      "train", "rl_episodes_per_update", spec.train.rl_episodes_per_update));
  spec.train.actors = int(kv.get_int_or("train", "actors", spec.train.actors));
  spec.train.staleness_bound =
      int(kv.get_int_or("train", "staleness_bound", spec.train.staleness_bound));
  spec.train.eval_every =
      int(kv.get_int_or("train", "eval_every", spec.train.eval_every));
  spec.train.ll_epsilon =
      kv.get_double_or("train", "ll_epsilon", spec.train.ll_epsilon);
  spec.vtrace.gamma = kv.get_double_or("vtrace", "gamma", spec.vtrace.gamma);
  spec.vtrace.rho_bar = kv.get_double_or("vtrace", "rho_bar", spec.vtrace.rho_bar);
  spec.vtrace.c_bar = kv.get_double_or("vtrace", "c_bar", spec.vtrace.c_bar);
  spec.vtrace.value_weight =
      kv.get_double_or("vtrace", "value_weight", spec.vtrace.value_weight);
  spec.vtrace.entropy_weight =
      kv.get_double_or("vtrace", "entropy_weight", spec.vtrace.entropy_weight);
  spec.vtrace.literal_formula =
      kv.get_bool_or("vtrace", "literal_formula", spec.vtrace.literal_formula);
  kv.check_consumed();
  return spec;
}

ExperimentSpec ExperimentSpec::load(const std::string& path) {
  return from_kv(KeyValueFile::load(path));
}

void ExperimentSpec::save(const std::string& path) const { to_kv().save(path); }

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

namespace {

struct EpisodeRecord {
  bool solved = false;
  int length = 0;
  std::vector<Instruction> instructions;  // HL decisions (hierarchical only)
};

EpisodeRecord record_hier_episode(const HLPolicy& hl, const LLPolicy& ll,
                                  TaskId task, std::uint64_t seed, Rng& rng,
                                  double ll_epsilon) {
  HierRolloutOptions opt;
  opt.sample_hl = false;
  opt.ll_epsilon = ll_epsilon;
  RolloutBatch r = run_hierarchical_episode(hl, ll, task, seed, rng, opt);
  EpisodeRecord rec;
  rec.solved = r.episode_reward > 0;
  rec.length = r.env_steps;
  for (const auto& d : r.decisions) rec.instructions.push_back(d.g);
  return rec;
}

std::uint64_t eval_episode_seed(std::uint64_t base, TaskId task, int i) {
  return base * 1000003ULL + std::uint64_t(int(task)) * 7919ULL + std::uint64_t(i);
}

// Per-episode eval traces; reported success rates are recomputable from these.
class EvalTraceWriter {
 public:
  explicit EvalTraceWriter(const std::string& path) {
    if (path.empty()) return;
    os_.open(path);
    if (!os_) throw std::runtime_error("cannot write " + path);
    os_ << "task,env_seed,solved,length,instructions\n";
  }
  void write(TaskId task, std::uint64_t env_seed, const EpisodeRecord& rec) {
    if (!os_.is_open()) return;
    os_ << task_name(task) << ',' << env_seed << ',' << (rec.solved ? 1 : 0)
        << ',' << rec.length << ',' << rec.instructions.size() << '\n';
  }

 private:
  std::ofstream os_;
};

EvalReport eval_report_hierarchical(const HLPolicy& hl, const LLPolicy& ll,
                                    const ExperimentSpec& spec,
                                    std::uint64_t seed, const Vocabulary& vocab,
                                    const std::string& trace_path) {
  EvalReport report;
  EvalTraceWriter traces(trace_path);
  Rng rng = Rng(seed).split(0x3a1);
  for (TaskId task : spec.tasks) {
    TaskEval te;
    te.episodes = spec.eval_episodes;
    double lengths = 0.0, instr_solved = 0.0;
    int solved = 0;
    for (int i = 0; i < spec.eval_episodes; ++i) {
      const std::uint64_t env_seed = eval_episode_seed(seed, task, i);
      EpisodeRecord rec =
          record_hier_episode(hl, ll, task, env_seed, rng, spec.train.ll_epsilon);
      traces.write(task, env_seed, rec);
      lengths += rec.length;
      if (rec.solved) {
        ++solved;
        instr_solved += double(rec.instructions.size());
      }
      for (const auto& g : rec.instructions)
        ++report.instruction_counts[detokenize(vocab, g)];
    }
    te.success = double(solved) / spec.eval_episodes;
    te.mean_length = lengths / spec.eval_episodes;
    te.instructions_available = solved > 0;
    te.mean_instructions = solved > 0 ? instr_solved / solved : 0.0;
    report.tasks[task_name(task)] = te;
  }
  return report;
}

EvalReport eval_report_flat(const FlatPolicy& flat, const ExperimentSpec& spec,
                            std::uint64_t seed, const std::string& trace_path) {
  EvalReport report;
  EvalTraceWriter traces(trace_path);
  Rng rng = Rng(seed).split(0x3a2);
  for (TaskId task : spec.tasks) {
    TaskEval te;
    te.episodes = spec.eval_episodes;
    double lengths = 0.0;
    int solved = 0;
    for (int i = 0; i < spec.eval_episodes; ++i) {
      const std::uint64_t env_seed = eval_episode_seed(seed, task, i);
      FlatRollout r = run_flat_episode(flat, task, env_seed, rng, /*sample=*/false);
      EpisodeRecord rec;
      rec.solved = r.episode_reward > 0;
      rec.length = int(r.steps.size());
      traces.write(task, env_seed, rec);
      lengths += double(r.steps.size());
      if (r.episode_reward > 0) ++solved;
    }
    te.success = double(solved) / spec.eval_episodes;
    te.mean_length = lengths / spec.eval_episodes;
    report.tasks[task_name(task)] = te;
  }
  return report;
}

EvalReport mean_report(const std::vector<EvalReport>& reports) {
  EvalReport mean;
  if (reports.empty()) return mean;
  for (const auto& rep : reports) {
    for (const auto& [task, te] : rep.tasks) {
      TaskEval& m = mean.tasks[task];
      m.success += te.success;
      m.mean_length += te.mean_length;
      m.mean_instructions += te.mean_instructions;
      m.instructions_available = m.instructions_available || te.instructions_available;
      m.episodes += te.episodes;
    }
    for (const auto& [instr, n] : rep.instruction_counts)
      mean.instruction_counts[instr] += n;
  }
  const double n = double(reports.size());
  for (auto& [task, te] : mean.tasks) {
    te.success /= n;
    te.mean_length /= n;
    te.mean_instructions /= n;
  }
  return mean;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  std::filesystem::create_directories(spec.out_dir);
  const Vocabulary vocab;
  std::vector<Trajectory> data = load_dataset(spec.data_manifest);

  ExperimentResult result;
  result.spec = spec;
  PolicyConfig pcfg = spec.policy;
  pcfg.vocab_size = vocab.size();

  for (std::uint64_t seed : spec.seeds) {
    TrainConfig tcfg = spec.train;
    tcfg.updates = spec.updates;
    tcfg.seed = seed;
    tcfg.tasks = spec.tasks;
    tcfg.eval_episodes = spec.eval_episodes;
    const std::string stem =
        spec.out_dir + "/" + spec.name + "_seed" + std::to_string(seed);
    tcfg.metrics_path = stem + "_metrics.csv";
    tcfg.checkpoint_path = stem + ".ckpt";

    if (spec.kind == AgentKind::Hierarchical) {
      LLPolicy ll = LLPolicy::load(spec.ll_checkpoint);
      ll.params().freeze();
      HLPolicy hl(pcfg, seed);
      result.metrics.push_back(
          train_hl(hl, ll, data, spec.hl_weights, spec.vtrace, tcfg));
      result.per_seed.push_back(
          eval_report_hierarchical(hl, ll, spec, seed, vocab, stem + "_eval.csv"));
    } else {
      FlatPolicy flat(pcfg, seed);
      result.metrics.push_back(
          train_flat(flat, data, spec.flat_weights, spec.vtrace, tcfg));
      result.per_seed.push_back(eval_report_flat(flat, spec, seed, stem + "_eval.csv"));
    }
    result.checkpoints.push_back(tcfg.checkpoint_path);
  }
  result.report = mean_report(result.per_seed);
  return result;
}

// ---------------------------------------------------------------------------
// Ratio sweep
// ---------------------------------------------------------------------------

HLLossWeights ratio_to_weights(double ratio) {
  if (ratio < 0 || std::isnan(ratio))
    throw std::invalid_argument("BC/RL ratio must be nonnegative");
  if (ratio == 0.0) return {0.0, 1.0};
  if (std::isinf(ratio)) return {1.0, 0.0};
  if (ratio >= 1.0) return {1.0, 1.0 / ratio};
  return {ratio, 1.0};
}

std::string ratio_label(double ratio) {
  if (std::isinf(ratio)) return "inf";
  std::ostringstream os;
  os << ratio;
  std::string s = os.str();
  for (auto& c : s)
    if (c == '.') c = 'p';
  return s;
}

std::vector<SweepEntry> ablation_sweep(const ExperimentSpec& base,
                                       const std::vector<double>& ratios) {
  if (base.kind != AgentKind::Hierarchical)
    throw std::invalid_argument("the BC/RL sweep applies to hierarchical specs");
  std::vector<SweepEntry> out;
  for (double ratio : ratios) {
    ExperimentSpec spec = base;
    spec.name = base.name + "_ratio_" + ratio_label(ratio);
    spec.hl_weights = ratio_to_weights(ratio);
    SweepEntry entry;
    entry.ratio = ratio;
    entry.result = run_experiment(spec);
    out.push_back(std::move(entry));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instruction analyses
// ---------------------------------------------------------------------------

double InstructionAnalysis::freq(const std::string& instr, bool hard) const {
  const auto& counts_group = hard ? counts_hard : counts_easy;
  double total = 0.0;
  for (const auto& [g, n] : counts_group) total += n;
  if (total == 0) return 0.0;
  auto it = counts_group.find(instr);
  return it == counts_group.end() ? 0.0 : it->second / total;
}

InstructionAnalysis analyze_instructions(const HLPolicy& hl, const LLPolicy& ll,
                                         const Vocabulary& vocab,
                                         const AnalyzeOptions& opt) {
  InstructionAnalysis out;
  out.min_count = opt.min_count;
  Rng rng = Rng(opt.seed).split(0xa11a);
  for (TaskId task : kAllTasks) {
    TaskEval te;
    te.episodes = opt.episodes_per_task;
    double lengths = 0.0, instr_solved = 0.0;
    int solved = 0;
    for (int i = 0; i < opt.episodes_per_task; ++i) {
      EpisodeRecord rec =
          record_hier_episode(hl, ll, task, eval_episode_seed(opt.seed, task, i),
                              rng, opt.ll_epsilon);
      lengths += rec.length;
      if (rec.solved) {
        ++solved;
        instr_solved += double(rec.instructions.size());
      }
      for (const auto& g : rec.instructions) {
        const std::string text = detokenize(vocab, g);
        ++out.counts[text];
        if (task_is_hard(task))
          ++out.counts_hard[text];
        else
          ++out.counts_easy[text];
      }
    }
    te.success = double(solved) / opt.episodes_per_task;
    te.mean_length = lengths / opt.episodes_per_task;
    te.instructions_available = solved > 0;
    te.mean_instructions = solved > 0 ? instr_solved / solved : 0.0;
    out.tasks[task_name(task)] = te;
  }
  for (const auto& [instr, n] : out.counts_easy)
    if (n >= opt.min_count) ++out.distinct_post_cutoff_easy;
  for (const auto& [instr, n] : out.counts_hard)
    if (n >= opt.min_count) ++out.distinct_post_cutoff_hard;
  return out;
}

// ---------------------------------------------------------------------------
// Plot-data export
// ---------------------------------------------------------------------------

void emit_learning_curves(const ExperimentResult& result, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "update,seed";
  for (TaskId t : kAllTasks) os << ",success_" << task_name(t);
  os << '\n';
  for (size_t s = 0; s < result.metrics.size(); ++s) {
    for (const auto& row : result.metrics[s].rows) {
      if (row.task_success.empty()) continue;  // only evaluated updates
      os << row.update << ',' << result.spec.seeds[s];
      for (TaskId t : kAllTasks) {
        auto it = row.task_success.find(task_name(t));
        os << ',' << (it == row.task_success.end() ? -1.0 : it->second);
      }
      os << '\n';
    }
  }
}

void emit_sweep_table(const std::vector<SweepEntry>& sweep, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "ratio,task,success\n";
  for (const auto& entry : sweep) {
    const std::string label =
        std::isinf(entry.ratio) ? "inf" : [&] {
          std::ostringstream r;
          r << entry.ratio;
          return r.str();
        }();
    for (TaskId t : kAllTasks) {
      auto it = entry.result.report.tasks.find(task_name(t));
      os << label << ',' << task_name(t) << ','
         << (it == entry.result.report.tasks.end() ? -1.0 : it->second.success)
         << '\n';
    }
  }
}

void emit_instruction_tables(const InstructionAnalysis& analysis,
                             const std::string& means_path,
                             const std::string& freq_path) {
  {
    std::ofstream os(means_path);
    if (!os) throw std::runtime_error("cannot write " + means_path);
    os << "task,success,mean_length,mean_instructions_solved,instructions_available\n";
    for (const auto& [task, te] : analysis.tasks)
      os << task << ',' << te.success << ',' << te.mean_length << ','
         << te.mean_instructions << ',' << (te.instructions_available ? 1 : 0)
         << '\n';
  }
  {
    std::ofstream os(freq_path);
    if (!os) throw std::runtime_error("cannot write " + freq_path);
    os << "instruction,count_total,count_easy,count_hard,post_cutoff\n";
    for (const auto& [instr, n] : analysis.counts) {
      auto easy = analysis.counts_easy.find(instr);
      auto hard = analysis.counts_hard.find(instr);
      os << '"' << instr << '"' << ',' << n << ','
         << (easy == analysis.counts_easy.end() ? 0 : easy->second) << ','
         << (hard == analysis.counts_hard.end() ? 0 : hard->second) << ','
         << (n >= analysis.min_count ? 1 : 0) << '\n';
    }
  }
}

}  // namespace keygate
