#include "doctest.h"
#include "keygate/experiments.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

using namespace keygate;
namespace fs = std::filesystem;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

std::string exp_tmpdir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

int count_lines(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is);
  int n = 0;
  std::string line;
  while (std::getline(is, line)) ++n;
  return n;
}

// Shared tiny fixture: small networks, a small oracle dataset, and an
// untrained-but-saved LL checkpoint. Built once; the runs are cheap because
// the specs use very few updates.
struct Fixture {
  std::string dir = exp_tmpdir("kg_exp_test");
  Vocabulary vocab;
  PolicyConfig pcfg;
  std::string manifest_path;
  std::string ll_path;

  Fixture() {
    pcfg.vocab_size = vocab.size();
    pcfg.embed_dim = 8;
    pcfg.hidden_dim = 16;
    generate_dataset({kAllTasks.begin(), kAllTasks.end()}, 2, 0.1, 11, dir, vocab);
    manifest_path = (fs::path(dir) / "manifest.json").string();
    LLPolicy ll(pcfg, 5);
    ll_path = (fs::path(dir) / "ll.ckpt").string();
    ll.save(ll_path);
  }

  ExperimentSpec base_spec(const std::string& name) const {
    ExperimentSpec spec;
    spec.name = name;
    spec.seeds = {1};
    spec.updates = 2;
    spec.eval_episodes = 2;
    spec.policy = pcfg;
    spec.train.batch_size = 2;
    spec.train.window = 40;
    spec.train.rl_episodes_per_update = 1;
    spec.data_manifest = manifest_path;
    spec.ll_checkpoint = ll_path;
    spec.out_dir = (fs::path(dir) / name).string();
    return spec;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("experiments: spec validation") {
  ExperimentSpec spec = fixture().base_spec("valid");
  CHECK_NOTHROW(spec.validate());

  SUBCASE("tasks must be the full set") {
    spec.tasks = {TaskId::KeyChoice, TaskId::KeyGateChoice};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  }
  SUBCASE("seeds distinct and nonempty") {
    spec.seeds = {3, 3};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.seeds = {};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  }
  SUBCASE("hierarchical specs need an LL checkpoint") {
    spec.ll_checkpoint = "";
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.kind = AgentKind::Flat;
    CHECK_NOTHROW(spec.validate());
  }
  SUBCASE("a dataset manifest is required") {
    spec.data_manifest = "";
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  }
  SUBCASE("weight validation is per kind") {
    spec.hl_weights = {0.0, 0.0};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  }
}

TEST_CASE("experiments: spec file round trip") {
  ExperimentSpec spec = fixture().base_spec("roundtrip");
  spec.kind = AgentKind::Flat;
  spec.seeds = {7, 9};
  spec.updates = 123;
  spec.hl_weights = {1.0, 0.25};
  spec.flat_weights = {0.5, 1.0, 0.125};
  spec.train.lr = 3e-4;
  spec.train.actors = 2;
  spec.vtrace.entropy_weight = 0.02;
  spec.vtrace.literal_formula = true;

  auto path = (fs::path(fixture().dir) / "spec.cfg").string();
  spec.save(path);
  ExperimentSpec back = ExperimentSpec::load(path);
  CHECK(back.name == spec.name);
  CHECK(back.kind == AgentKind::Flat);
  CHECK(back.seeds == spec.seeds);
  CHECK(back.updates == 123);
  CHECK(back.hl_weights.w_rl == doctest::Approx(0.25));
  CHECK(back.flat_weights.aux_lang_weight == doctest::Approx(0.125));
  CHECK(back.policy.embed_dim == spec.policy.embed_dim);
  CHECK(back.policy.hidden_dim == spec.policy.hidden_dim);
  CHECK(back.train.lr == doctest::Approx(3e-4));
  CHECK(back.train.actors == 2);
  CHECK(back.vtrace.entropy_weight == doctest::Approx(0.02));
  CHECK(back.vtrace.literal_formula);
  CHECK(back.to_kv().to_string() == spec.to_kv().to_string());
}

TEST_CASE("experiments: spec files reject unknown keys") {
  KeyValueFile kv = fixture().base_spec("strict").to_kv();
  kv.set("experiment", "typo_key", "1");
  auto path = (fs::path(fixture().dir) / "bad_spec.cfg").string();
  kv.save(path);
  CHECK_THROWS_WITH_AS(ExperimentSpec::load(path),
                       "unknown config key [experiment] typo_key",
                       std::runtime_error);
}

TEST_CASE("experiments: ratio to weight mapping") {
  CHECK(ratio_to_weights(0.0).w_bc == 0.0);
  CHECK(ratio_to_weights(0.0).w_rl == 1.0);
  CHECK(ratio_to_weights(kInf).w_bc == 1.0);
  CHECK(ratio_to_weights(kInf).w_rl == 0.0);
  CHECK(ratio_to_weights(1.0).w_bc == 1.0);
  CHECK(ratio_to_weights(1.0).w_rl == 1.0);
  CHECK(ratio_to_weights(1000.0).w_bc == 1.0);
  CHECK(ratio_to_weights(1000.0).w_rl == doctest::Approx(0.001));
  CHECK(ratio_to_weights(0.001).w_bc == doctest::Approx(0.001));
  CHECK(ratio_to_weights(0.001).w_rl == 1.0);
  CHECK_THROWS_AS(ratio_to_weights(-1.0), std::invalid_argument);
  CHECK(ratio_label(kInf) == "inf");
  CHECK(ratio_label(0.0) == "0");
  CHECK(ratio_label(0.001) == "0p001");
  CHECK(ratio_label(1000.0) == "1000");
}

TEST_CASE("experiments: hierarchical run produces report, metrics, checkpoints") {
  ExperimentSpec spec = fixture().base_spec("hier_smoke");
  ExperimentResult res = run_experiment(spec);

  CHECK(res.per_seed.size() == 1);
  CHECK(res.metrics.size() == 1);
  CHECK(int(res.metrics[0].rows.size()) == spec.updates);
  REQUIRE(res.checkpoints.size() == 1);
  CHECK(fs::exists(res.checkpoints[0]));
  CHECK(fs::exists(fs::path(spec.out_dir) / "hier_smoke_seed1_metrics.csv"));
  // metrics CSV: header + one row per update
  CHECK(count_lines((fs::path(spec.out_dir) / "hier_smoke_seed1_metrics.csv").string()) ==
        spec.updates + 1);

  REQUIRE(res.report.tasks.size() == 4);
  for (TaskId t : kAllTasks) {
    auto it = res.report.tasks.find(task_name(t));
    REQUIRE(it != res.report.tasks.end());
    CHECK(it->second.episodes == spec.eval_episodes);
    CHECK(it->second.success >= 0.0);
    CHECK(it->second.success <= 1.0);
    CHECK(it->second.mean_length > 0.0);
  }
  // HL decides at least once per episode, so instructions were recorded.
  int total = 0;
  for (const auto& [instr, n] : res.report.instruction_counts) total += n;
  CHECK(total > 0);

  // the saved checkpoint reloads into the same policy kind
  CHECK_NOTHROW(HLPolicy::load(res.checkpoints[0]));

  // per-episode eval traces are persisted; success rates are recomputable
  auto eval_csv = (fs::path(spec.out_dir) / "hier_smoke_seed1_eval.csv").string();
  REQUIRE(fs::exists(eval_csv));
  CHECK(count_lines(eval_csv) == 1 + 4 * spec.eval_episodes);
  std::ifstream is(eval_csv);
  std::string line;
  std::getline(is, line);  // header
  std::map<std::string, int> trace_solved, trace_total;
  while (std::getline(is, line)) {
    std::istringstream row(line);
    std::string task, seed_s, solved_s;
    std::getline(row, task, ',');
    std::getline(row, seed_s, ',');
    std::getline(row, solved_s, ',');
    trace_solved[task] += solved_s == "1" ? 1 : 0;
    ++trace_total[task];
  }
  for (const auto& [task, te] : res.report.tasks)
    CHECK(te.success ==
          doctest::Approx(double(trace_solved[task]) / trace_total[task]));
}

TEST_CASE("experiments: flat run and seed averaging") {
  ExperimentSpec spec = fixture().base_spec("flat_smoke");
  spec.kind = AgentKind::Flat;
  spec.ll_checkpoint = "";
  spec.seeds = {1, 2};
  ExperimentResult res = run_experiment(spec);

  CHECK(res.per_seed.size() == 2);
  CHECK(res.checkpoints.size() == 2);
  CHECK(res.report.instruction_counts.empty());
  for (const auto& [task, te] : res.report.tasks) {
    CHECK_FALSE(te.instructions_available);
    // the mean report averages the per-seed success rates
    double mean = (res.per_seed[0].tasks.at(task).success +
                   res.per_seed[1].tasks.at(task).success) / 2.0;
    CHECK(te.success == doctest::Approx(mean));
    CHECK(te.episodes == 2 * spec.eval_episodes);
  }
  CHECK_NOTHROW(FlatPolicy::load(res.checkpoints[0]));
}

TEST_CASE("experiments: identical specs reproduce identical results") {
  ExperimentSpec a = fixture().base_spec("repro_a");
  ExperimentSpec b = fixture().base_spec("repro_b");
  ExperimentResult ra = run_experiment(a);
  ExperimentResult rb = run_experiment(b);
  REQUIRE(ra.metrics[0].rows.size() == rb.metrics[0].rows.size());
  for (size_t i = 0; i < ra.metrics[0].rows.size(); ++i)
    CHECK(ra.metrics[0].rows[i].csv_line() == rb.metrics[0].rows[i].csv_line());
  for (const auto& [task, te] : ra.report.tasks) {
    CHECK(te.success == rb.report.tasks.at(task).success);
    CHECK(te.mean_length == rb.report.tasks.at(task).mean_length);
  }
  CHECK(ra.report.instruction_counts == rb.report.instruction_counts);
}

TEST_CASE("experiments: ablation sweep overrides names and weights") {
  ExperimentSpec base = fixture().base_spec("sweep");
  base.updates = 1;
  std::vector<SweepEntry> sweep = ablation_sweep(base, {0.0, kInf});
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].result.spec.name == "sweep_ratio_0");
  CHECK(sweep[0].result.spec.hl_weights.w_bc == 0.0);
  CHECK(sweep[1].result.spec.name == "sweep_ratio_inf");
  CHECK(sweep[1].result.spec.hl_weights.w_rl == 0.0);

  base.kind = AgentKind::Flat;
  CHECK_THROWS_AS(ablation_sweep(base, {1.0}), std::invalid_argument);

  auto table = (fs::path(fixture().dir) / "sweep.csv").string();
  emit_sweep_table(sweep, table);
  // header + 4 tasks per ratio
  CHECK(count_lines(table) == 1 + 2 * 4);
}

TEST_CASE("experiments: instruction analysis counts and cutoff") {
  const Fixture& f = fixture();
  HLPolicy hl(f.pcfg, 3);
  LLPolicy ll = LLPolicy::load(f.ll_path);
  ll.params().freeze();

  AnalyzeOptions opt;
  opt.episodes_per_task = 2;
  opt.min_count = 1;
  InstructionAnalysis an = analyze_instructions(hl, ll, f.vocab, opt);

  REQUIRE(an.tasks.size() == 4);
  int total = 0, easy = 0, hard = 0;
  for (const auto& [g, n] : an.counts) total += n;
  for (const auto& [g, n] : an.counts_easy) easy += n;
  for (const auto& [g, n] : an.counts_hard) hard += n;
  CHECK(total == easy + hard);
  CHECK(total > 0);

  // every instruction clears a cutoff of 1, none clears an impossible one
  CHECK(an.distinct_post_cutoff_easy == int(an.counts_easy.size()));
  CHECK(an.distinct_post_cutoff_hard == int(an.counts_hard.size()));
  opt.min_count = total + 1;
  InstructionAnalysis none = analyze_instructions(hl, ll, f.vocab, opt);
  CHECK(none.distinct_post_cutoff_easy == 0);
  CHECK(none.distinct_post_cutoff_hard == 0);

  // per-group frequencies sum to one when the group is nonempty
  for (bool group_hard : {false, true}) {
    const auto& counts = group_hard ? an.counts_hard : an.counts_easy;
    if (counts.empty()) continue;
    double sum = 0.0;
    for (const auto& [g, n] : counts) sum += an.freq(g, group_hard);
    CHECK(sum == doctest::Approx(1.0));
  }
  CHECK(an.freq("not an instruction", true) == 0.0);

  auto means = (fs::path(f.dir) / "an_means.csv").string();
  auto freq = (fs::path(f.dir) / "an_freq.csv").string();
  emit_instruction_tables(an, means, freq);
  CHECK(count_lines(means) == 1 + 4);
  CHECK(count_lines(freq) == 1 + int(an.counts.size()));
}

TEST_CASE("experiments: learning-curve export covers evaluated updates") {
  ExperimentSpec spec = fixture().base_spec("curves");
  spec.updates = 2;
  spec.train.eval_every = 1;
  spec.eval_episodes = 1;
  ExperimentResult res = run_experiment(spec);
  auto path = (fs::path(fixture().dir) / "curves.csv").string();
  emit_learning_curves(res, path);
  // header + one row per evaluated update per seed
  int evaluated = 0;
  for (const auto& row : res.metrics[0].rows)
    if (!row.task_success.empty()) ++evaluated;
  CHECK(evaluated == spec.updates);
  CHECK(count_lines(path) == 1 + evaluated);
  // re-emission is idempotent
  std::ifstream first(path);
  std::stringstream a;
  a << first.rdbuf();
  emit_learning_curves(res, path);
  std::ifstream second(path);
  std::stringstream b;
  b << second.rdbuf();
  CHECK(a.str() == b.str());
}
