#include "keygate/oracle.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;

namespace keygate {

const std::string& setter_phase_name(SetterPhase p) {
  static const std::array<std::string, 6> kNames = {
      "look_at_sensor", "fetch_key", "go_to_gate",
      "place_key",      "get_apple", "correct_drop"};
  return kNames.at(static_cast<int>(p));
}

// ---------------------------------------------------------------------------
// Visibility
// ---------------------------------------------------------------------------

bool sensor_visible(const WorldState& s, Side side) {
  return cell_visible(s.avatar.pos, s.avatar.heading, sensor_pos(side));
}

// ---------------------------------------------------------------------------
// Setter
// ---------------------------------------------------------------------------

Setter::Setter(const WorldState& initial) {
  target_side_ = solvable_gate(initial);
  key_color_ = initial.at(sensor_pos(target_side_)).color;
  // Every episode opens with a reconnaissance gaze at one sensor. The side is
  // a deterministic pseudo-random function of the layout rather than the
  // (privileged) correct side: an ego-view imitator cannot predict the
  // correct side at step 0, so the demonstrations must include starting at
  // the wrong sensor and switching once the gazed view refutes it (color
  // mismatch, or no apple behind that gate).
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull;
    h *= 1099511628211ull;
  };
  for (const auto& o : initial.objects) {
    mix(std::uint64_t(o.pos.x));
    mix(std::uint64_t(o.pos.y));
    mix(std::uint64_t(o.color.id));
  }
  mix(std::uint64_t(initial.at(sensor_pos(Side::Left)).color.id));
  std::uint64_t hs = h;
  look_side_ = (splitmix64(hs) >> 33) & 1 ? Side::Left : Side::Right;
}

Instruction Setter::instruct(const WorldState& s, const Vocabulary& vocab) {
  // Per-step bookkeeping: the sensor must stay in view for a sustained
  // stretch before it counts as "seen". A single glimpse can fall between
  // the decision points of an agent acting on the coarser 8-step timescale;
  // a held gaze guarantees the color appears in a decision observation.
  if (!recon_done_) {
    if (sensor_visible(s, look_side_)) {
      if (++visible_streak_ >= kSensorGazeSteps) {
        if (look_side_ == target_side_) {
          recon_done_ = true;
        } else {
          // The gazed view refutes this side; recon moves to the other one.
          look_side_ = target_side_;
          visible_streak_ = 0;
        }
      }
    } else {
      visible_streak_ = 0;
    }
  }

  // Instructions are re-evaluated only on period boundaries and held in
  // between, matching the cadence of the agent that learns to replace the
  // Setter.
  if (!has_current_ || s.step_count % kSetterPeriod == 0) {
    current_ = decide(s, vocab);
    has_current_ = true;
  }
  return current_;
}

Instruction Setter::decide(const WorldState& s, const Vocabulary& vocab) {
  const ObjectState* held =
      s.avatar.held >= 0 ? s.object_by_id(s.avatar.held) : nullptr;
  if (held && held->color != key_color_) {
    phase_ = SetterPhase::CorrectDrop;
    retreat_pending_ = true;
    return tokenize(vocab, instr_drop_it());
  }
  // Step away from a just-dropped wrong key before asking for another pickup,
  // so the follower does not immediately re-grab it.
  if (!held && retreat_pending_) {
    retreat_pending_ = false;
    phase_ = SetterPhase::CorrectDrop;
    return tokenize(vocab, instr_move_back());
  }
  if (s.at(gate_pos(target_side_)).open) {
    phase_ = SetterPhase::GetApple;
    return tokenize(vocab, instr_get_apple());
  }
  if (!recon_done_) {
    phase_ = SetterPhase::LookAtSensor;
    return tokenize(vocab, instr_look_at_sensor(look_side_));
  }
  if (!held) {
    phase_ = SetterPhase::FetchKey;
    return tokenize(vocab, instr_pick_up(key_color_));
  }
  if (s.avatar.pos == gate_approach(target_side_)) {
    phase_ = SetterPhase::PlaceKey;
    return tokenize(vocab, instr_put_on_sensor(target_side_));
  }
  phase_ = SetterPhase::GoToGate;
  return tokenize(vocab, instr_go_to_gate(target_side_));
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

namespace {

struct Goal {
  enum Kind { Satisfied, Unachievable, Literal, FaceAct, Reach, See } kind;
  Action literal = Action::MoveForward;
  Action terminal = Action::PickUp;
  // Executed while a held instruction is already satisfied. Turning in place
  // is a harmless idle; a satisfied "look" keeps creeping toward the sensor
  // instead so it stays in view.
  Action idle = Action::TurnLeft;
  std::vector<Pos> targets;
  Side side = Side::Left;
};

Goal parse_goal(const WorldState& s, const Instruction& instr,
                const Vocabulary& vocab) {
  const std::string text = detokenize(vocab, instr);
  std::vector<std::string> w;
  {
    std::istringstream is(text);
    std::string word;
    while (is >> word) w.push_back(word);
  }
  Goal g;
  const ObjectState* held =
      s.avatar.held >= 0 ? s.object_by_id(s.avatar.held) : nullptr;

  if (w.size() == 2 && w[0] == "move") {
    g.kind = Goal::Literal;
    g.literal = w[1] == "forward" ? Action::MoveForward : Action::MoveBack;
    // A held movement instruction must not walk the avatar into a wall or
    // through the one-way door (which would commit it to the gate zone);
    // refuse and idle instead.
    const Pos d = heading_delta(s.avatar.heading);
    const Pos dest = g.literal == Action::MoveForward
                         ? Pos{s.avatar.pos.x + d.x, s.avatar.pos.y + d.y}
                         : Pos{s.avatar.pos.x - d.x, s.avatar.pos.y - d.y};
    if (!walkable(s, s.avatar.pos, dest) || dest == oneway_pos())
      g.kind = Goal::Satisfied;
    return g;
  }
  if (w.size() == 5 && w[0] == "pick") {  // pick up the <c> key
    const Color c = Color::from_name(w[3]);
    if (held) {
      g.kind = held->color == c ? Goal::Satisfied : Goal::Unachievable;
      return g;
    }
    g.kind = Goal::FaceAct;
    g.terminal = Action::PickUp;
    for (const auto& o : s.objects)
      if (!o.is_apple && o.id != s.avatar.held && o.color == c)
        g.targets.push_back(o.pos);
    if (g.targets.empty()) g.kind = Goal::Unachievable;
    return g;
  }
  if (w.size() == 2 && w[0] == "drop") {
    if (!held) {
      g.kind = Goal::Satisfied;
      return g;
    }
    g.kind = Goal::FaceAct;
    g.terminal = Action::Drop;
    // Plain empty floor only; never drop onto a sensor by accident.
    for (int y = 0; y < kGridH; ++y)
      for (int x = 0; x < kGridW; ++x) {
        CellKind k = s.at(x, y).kind;
        if ((k == CellKind::Floor || k == CellKind::Spawn) &&
            s.object_at(x, y) < 0 && s.avatar.pos != Pos{x, y})
          g.targets.push_back({x, y});
      }
    return g;
  }
  if (w.size() == 5 && w[0] == "go") {  // go to the <side> gate
    g.kind = Goal::Reach;
    g.side = w[3] == "left" ? Side::Left : Side::Right;
    g.targets.push_back(gate_approach(g.side));
    if (s.avatar.pos == g.targets[0]) g.kind = Goal::Satisfied;
    return g;
  }
  if (w.size() == 6 && w[0] == "put") {  // put it on the <side> sensor
    g.side = w[4] == "left" ? Side::Left : Side::Right;
    const Pos sp = sensor_pos(g.side);
    if (!held && s.object_at(sp.x, sp.y) >= 0) {
      // Hands already empty with something on the sensor: a held "put"
      // instruction whose work is done. Idle rather than flail.
      g.kind = Goal::Satisfied;
      return g;
    }
    if (!held || s.object_at(sp.x, sp.y) >= 0) {
      g.kind = Goal::Unachievable;
      return g;
    }
    g.kind = Goal::FaceAct;
    g.terminal = Action::Drop;
    g.targets.push_back(sp);
    return g;
  }
  if (w.size() == 5 && w[0] == "look") {  // look at the <side> sensor
    g.kind = Goal::See;
    g.side = w[3] == "left" ? Side::Left : Side::Right;
    if (sensor_visible(s, g.side)) {
      g.kind = Goal::Satisfied;
      g.idle = Action::MoveForward;  // keep the sensor in view
    }
    return g;
  }
  if (w.size() == 3 && w[0] == "get") {  // get the apple
    g.kind = Goal::Reach;
    for (const auto& o : s.objects)
      if (o.is_apple) g.targets.push_back(o.pos);
    if (g.targets.empty()) g.kind = Goal::Unachievable;
    return g;
  }
  g.kind = Goal::Unachievable;
  return g;
}

struct Node {
  int x, y, h;
};

inline int node_index(int x, int y, int h) { return (y * kGridW + x) * 4 + h; }

bool node_is_goal(const WorldState& s, const Goal& g, int x, int y, int h) {
  const Pos p{x, y};
  const Heading hd = static_cast<Heading>(h);
  switch (g.kind) {
    case Goal::FaceAct: {
      const Pos d = heading_delta(hd);
      const Pos faced{x + d.x, y + d.y};
      for (const auto& t : g.targets)
        if (t == faced) return true;
      return false;
    }
    case Goal::Reach:
      for (const auto& t : g.targets)
        if (t == p) return true;
      return false;
    case Goal::See:
      return cell_visible(p, hd, sensor_pos(g.side));
    default:
      return false;
  }
}

// Shortest plan over (pos, heading) with keys as static obstacles. Backward
// moves carry a small extra cost so tied plans prefer arriving forward-facing,
// which keeps phase-concatenated plans globally optimal. "Look" plans never
// enter the one-way door: reconnaissance must not commit to the gate zone.
struct Plan {
  Action first;
  int length;  // number of actions, terminal action included
};

std::optional<Plan> bfs_plan(const WorldState& s, const Goal& g) {
  const bool needs_terminal = g.kind == Goal::FaceAct;
  const bool forbid_commit = g.kind == Goal::See;
  const int start =
      node_index(s.avatar.pos.x, s.avatar.pos.y, int(s.avatar.heading));
  if (node_is_goal(s, g, s.avatar.pos.x, s.avatar.pos.y, int(s.avatar.heading)))
    return Plan{needs_terminal ? g.terminal : Action::MoveForward,
                needs_terminal ? 1 : 0};

  constexpr int kBackCost = 2;
  const int n_nodes = kGridW * kGridH * 4;
  std::vector<int> dist(n_nodes, -1), steps(n_nodes, 0);
  std::vector<std::int8_t> first(n_nodes, -1);
  std::vector<std::vector<int>> buckets(1, std::vector<int>{start});
  dist[start] = 0;
  for (size_t d = 0; d < buckets.size(); ++d) {
    for (size_t qi = 0; qi < buckets[d].size(); ++qi) {
      const int cur = buckets[d][qi];
      if (dist[cur] != int(d)) continue;  // stale entry
      const int h = cur % 4;
      const int x = (cur / 4) % kGridW;
      const int y = cur / (4 * kGridW);
      if (node_is_goal(s, g, x, y, h))
        return Plan{static_cast<Action>(first[cur]),
                    steps[cur] + (needs_terminal ? 1 : 0)};
      const Heading hd = static_cast<Heading>(h);
      const std::array<std::pair<Action, Node>, 4> moves = {{
          {Action::MoveForward,
           {x + heading_delta(hd).x, y + heading_delta(hd).y, h}},
          {Action::TurnLeft, {x, y, int(turn_left(hd))}},
          {Action::TurnRight, {x, y, int(turn_right(hd))}},
          {Action::MoveBack,
           {x - heading_delta(hd).x, y - heading_delta(hd).y, h}},
      }};
      for (const auto& [act, nxt] : moves) {
        if (act == Action::MoveForward || act == Action::MoveBack) {
          if (!walkable(s, {x, y}, {nxt.x, nxt.y})) continue;
          if (forbid_commit && Pos{nxt.x, nxt.y} == oneway_pos()) continue;
        }
        const int cost = act == Action::MoveBack ? kBackCost : 1;
        const int nd = int(d) + cost;
        const int ni = node_index(nxt.x, nxt.y, nxt.h);
        if (dist[ni] >= 0 && dist[ni] <= nd) continue;
        dist[ni] = nd;
        steps[ni] = steps[cur] + 1;
        first[ni] = cur == start ? std::int8_t(act) : first[cur];
        if (size_t(nd) >= buckets.size()) buckets.resize(nd + 1);
        buckets[nd].push_back(ni);
      }
    }
  }
  return std::nullopt;
}

std::optional<Plan> plan_for(const WorldState& s, const Instruction& instr,
                             const Vocabulary& vocab) {
  const Goal g = parse_goal(s, instr, vocab);
  switch (g.kind) {
    case Goal::Satisfied:
      return Plan{g.idle, 0};
    case Goal::Unachievable:
      return std::nullopt;
    case Goal::Literal:
      return Plan{g.literal, 1};
    default:
      return bfs_plan(s, g);
  }
}

}  // namespace

SolverDecision solver_action(const WorldState& s, const Instruction& instr,
                             double epsilon, Rng& rng, const Vocabulary& vocab) {
  if (epsilon > 0.0 && rng.bernoulli(epsilon))
    return {static_cast<Action>(rng.uniform_int(kNumActions)), false};
  auto plan = plan_for(s, instr, vocab);
  // No plan: idle in place (and flag the step) instead of wandering forward.
  if (!plan) return {Action::TurnLeft, true};
  return {plan->first, false};
}

std::optional<int> solver_plan_length(const WorldState& s,
                                      const Instruction& instr,
                                      const Vocabulary& vocab) {
  auto plan = plan_for(s, instr, vocab);
  if (!plan) return std::nullopt;
  return plan->length;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

Trajectory run_oracle_episode(TaskId task, std::uint64_t seed, double epsilon,
                              const Vocabulary& vocab, int step_limit) {
  Trajectory traj;
  traj.task = task;
  traj.seed = seed;
  traj.epsilon = epsilon;
  WorldState s = reset(task, seed, step_limit);
  Setter setter(s);
  Rng rng = Rng(seed).split(0xf00d);
  double reward_prev = 0.0;
  while (!s.done) {
    TrajStep rec;
    rec.t = s.step_count;
    rec.obs = observe(s);
    rec.obs.reward_prev = reward_prev;
    rec.instr = setter.instruct(s, vocab);
    const SolverDecision dec = solver_action(s, rec.instr, epsilon, rng, vocab);
    rec.action = dec.action;
    rec.flagged = dec.unachievable;
    const StepOutcome out = step(s, rec.action);
    rec.reward = out.reward;
    rec.done = out.done;
    reward_prev = out.reward;
    traj.outcome += out.reward;
    traj.steps.push_back(rec);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trajectory: " + path);
  out << "keygate-traj " << kTrajFormatVersion << "\n";
  out << std::setprecision(17);
  out << "task " << task_name(traj.task) << " seed " << traj.seed << " epsilon "
      << traj.epsilon << " outcome " << traj.outcome << "\n";
  for (const auto& st : traj.steps) {
    out << st.t << " " << int(st.action) << " " << int(st.flagged) << " "
        << st.reward << " " << int(st.done) << " ";
    for (int i = 0; i < kInstructionLen; ++i) out << st.instr.token_ids[i] << " ";
    for (int i = 0; i < kViewCells; ++i) out << int(st.obs.cell_channel[i]) << " ";
    out << st.obs.held_color << " " << st.obs.reward_prev << "\n";
  }
  if (!out) throw std::runtime_error("write failure: " + path);
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read trajectory: " + path);
  std::string magic, tag;
  int version = 0;
  in >> magic >> version;
  if (magic != "keygate-traj" || version != kTrajFormatVersion)
    throw std::runtime_error("bad trajectory header: " + path);
  Trajectory traj;
  std::string tname;
  in >> tag >> tname;
  traj.task = task_from_name(tname);
  in >> tag >> traj.seed >> tag >> traj.epsilon >> tag >> traj.outcome;
  TrajStep st;
  while (in >> st.t) {
    int action, flagged, done;
    in >> action >> flagged >> st.reward >> done;
    st.action = static_cast<Action>(action);
    st.flagged = flagged != 0;
    st.done = done != 0;
    for (int i = 0; i < kInstructionLen; ++i) {
      int id;
      in >> id;
      st.instr.token_ids[i] = std::int16_t(id);
    }
    for (int i = 0; i < kViewCells; ++i) {
      int ch;
      in >> ch;
      st.obs.cell_channel[i] = std::uint8_t(ch);
    }
    in >> st.obs.held_color >> st.obs.reward_prev;
    traj.steps.push_back(st);
  }
  return traj;
}

void DatasetManifest::save(const std::string& path) const {
  nlohmann::json j;
  j["format_version"] = kTrajFormatVersion;
  j["files"] = files;
  j["episodes_per_task"] = episodes_per_task;
  j["vocab_checksum"] = vocab_checksum;
  j["generator_seed"] = generator_seed;
  j["epsilon"] = epsilon;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  nlohmann::json j;
  in >> j;
  DatasetManifest m;
  m.files = j.at("files").get<std::vector<std::string>>();
  m.episodes_per_task = j.at("episodes_per_task").get<std::map<std::string, int>>();
  m.vocab_checksum = j.at("vocab_checksum").get<std::uint64_t>();
  m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
  m.epsilon = j.at("epsilon").get<double>();
  return m;
}

DatasetManifest generate_dataset(const std::vector<TaskId>& tasks,
                                 int episodes_per_task, double epsilon,
                                 std::uint64_t seed, const std::string& out_dir,
                                 const Vocabulary& vocab) {
  if (episodes_per_task < 1)
    throw std::invalid_argument("episodes_per_task must be >= 1");
  fs::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.vocab_checksum = vocab.checksum();
  manifest.generator_seed = seed;
  manifest.epsilon = epsilon;
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const TaskId task = tasks[ti];
    for (int i = 0; i < episodes_per_task; ++i) {
      std::uint64_t sm = seed ^ (0x9e3779b97f4a7c15ULL * (ti * 1000003ULL + i + 1));
      const std::uint64_t ep_seed = splitmix64(sm);
      Trajectory traj = run_oracle_episode(task, ep_seed, epsilon, vocab);
      std::ostringstream name;
      name << task_name(task) << "_" << std::setw(5) << std::setfill('0') << i
           << ".traj";
      save_trajectory(traj, (fs::path(out_dir) / name.str()).string());
      manifest.files.push_back(name.str());
      manifest.episodes_per_task[task_name(task)] += 1;
    }
  }
  vocab.save((fs::path(out_dir) / "vocab.txt").string());
  manifest.save((fs::path(out_dir) / "manifest.json").string());
  return manifest;
}

std::vector<Trajectory> load_dataset(const std::string& manifest_path) {
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<Trajectory> out;
  out.reserve(manifest.files.size());
  for (const auto& f : manifest.files)
    out.push_back(load_trajectory((dir / f).string()));
  return out;
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const std::vector<Trajectory>& episodes,
                             int batch_size, int window, std::uint64_t seed)
    : episodes_(&episodes), batch_size_(batch_size), window_(window), rng_(seed) {
  if (batch_size < 1 || window < 1)
    throw std::invalid_argument("batch size and window must be >= 1");
  size_t longest = 0;
  for (const auto& e : episodes) longest = std::max(longest, e.steps.size());
  if (size_t(window) > longest)
    throw std::invalid_argument("window exceeds every trajectory length");
  slots_.resize(batch_size);
}

void BatchIterator::refill_order() {
  order_.resize(episodes_->size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = int(i);
  for (size_t i = order_.size(); i > 1; --i)
    std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
  order_pos_ = 0;
}

Batch BatchIterator::next() {
  Batch batch;
  batch.batch_size = batch_size_;
  batch.window = window_;
  batch.window_start.assign(batch_size_, 0);
  batch.steps.assign(size_t(batch_size_) * window_, nullptr);
  for (int b = 0; b < batch_size_; ++b) {
    Slot& slot = slots_[b];
    if (slot.episode < 0 ||
        slot.offset >= int((*episodes_)[slot.episode].steps.size())) {
      if (order_pos_ >= order_.size()) refill_order();
      slot.episode = order_[order_pos_++];
      slot.offset = 0;
      batch.window_start[b] = 1;
    }
    const auto& steps = (*episodes_)[slot.episode].steps;
    for (int k = 0; k < window_; ++k) {
      const int idx = slot.offset + k;
      if (idx < int(steps.size())) batch.steps[k * batch_size_ + b] = &steps[idx];
    }
    slot.offset += window_;
  }
  return batch;
}

}  // namespace keygate
