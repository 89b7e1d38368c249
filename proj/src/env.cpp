#include "keygate/env.hpp"

#include <algorithm>
#include <queue>
#include <sstream>
#include <stdexcept>

namespace keygate {

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

const std::array<std::string, kNumColors>& Color::palette() {
  static const std::array<std::string, kNumColors> kPalette = {
      "red", "blue", "green", "yellow", "purple", "orange"};
  return kPalette;
}

Color Color::from_name(const std::string& name) {
  const auto& pal = palette();
  for (int i = 0; i < kNumColors; ++i)
    if (pal[i] == name) return Color{i};
  throw std::invalid_argument("unknown color name: " + name);
}

const std::string& Color::name() const { return palette().at(id); }

bool task_is_hard(TaskId t) {
  return t == TaskId::KeyChoiceHard || t == TaskId::KeyGateChoiceHard;
}

const std::string& task_name(TaskId t) {
  static const std::array<std::string, 4> kNames = {
      "key_choice", "key_choice_hard", "key_gate_choice", "key_gate_choice_hard"};
  return kNames.at(static_cast<int>(t));
}

TaskId task_from_name(const std::string& name) {
  for (TaskId t : kAllTasks)
    if (task_name(t) == name) return t;
  throw std::invalid_argument("unknown task name: " + name);
}

const std::string& side_name(Side s) {
  static const std::array<std::string, 2> kNames = {"left", "right"};
  return kNames.at(static_cast<int>(s));
}

const std::string& action_name(Action a) {
  static const std::array<std::string, 6> kNames = {
      "move_forward", "move_back", "turn_left", "turn_right", "pick_up", "drop"};
  return kNames.at(static_cast<int>(a));
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

Pos heading_delta(Heading h) {
  switch (h) {
    case Heading::North: return {0, -1};
    case Heading::East: return {1, 0};
    case Heading::South: return {0, 1};
    case Heading::West: return {-1, 0};
  }
  return {0, 0};
}

Heading turn_left(Heading h) {
  return static_cast<Heading>((static_cast<int>(h) + 3) % 4);
}

Heading turn_right(Heading h) {
  return static_cast<Heading>((static_cast<int>(h) + 1) % 4);
}

Pos gate_pos(Side s) { return s == Side::Left ? Pos{2, 2} : Pos{10, 2}; }
Pos sensor_pos(Side s) { return s == Side::Left ? Pos{1, 3} : Pos{11, 3}; }
Pos apple_pos(Side s) { return s == Side::Left ? Pos{2, 1} : Pos{10, 1}; }
Pos gate_approach(Side s) { return s == Side::Left ? Pos{2, 3} : Pos{10, 3}; }
Pos spawn_pos() { return {6, 7}; }
Pos oneway_pos() { return {6, 4}; }

static bool in_bounds(Pos p) {
  return p.x >= 0 && p.x < kGridW && p.y >= 0 && p.y < kGridH;
}

bool cell_visible(Pos avatar, Heading h, Pos target) {
  const Pos fwd = heading_delta(h);
  const Pos right = heading_delta(turn_right(h));
  const int dx = target.x - avatar.x;
  const int dy = target.y - avatar.y;
  const int f = dx * fwd.x + dy * fwd.y;
  const int l = dx * right.x + dy * right.y;
  return f >= 0 && f < kViewDepth && l >= -2 && l <= 2;
}

int WorldState::object_at(int x, int y) const {
  for (const auto& o : objects)
    if (o.id != avatar.held && o.pos.x == x && o.pos.y == y) return o.id;
  return -1;
}

const ObjectState* WorldState::object_by_id(int id) const {
  for (const auto& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}

bool WorldState::operator==(const WorldState& o) const {
  if (objects.size() != o.objects.size()) return false;
  for (size_t i = 0; i < objects.size(); ++i) {
    const auto& a = objects[i];
    const auto& b = o.objects[i];
    if (a.id != b.id || a.color != b.color || a.is_apple != b.is_apple) return false;
    if (a.id != avatar.held && a.pos != b.pos) return false;
  }
  for (int i = 0; i < kGridW * kGridH; ++i) {
    const Cell &a = grid[i], &b = o.grid[i];
    if (a.kind != b.kind) return false;
    if (a.kind == CellKind::Gate || a.kind == CellKind::Sensor)
      if (a.side != b.side || !(a.color == b.color) || a.open != b.open) return false;
  }
  return avatar.pos == o.avatar.pos && avatar.heading == o.avatar.heading &&
         avatar.held == o.avatar.held && step_count == o.step_count &&
         done == o.done && task == o.task && rng_seed == o.rng_seed;
}

// ---------------------------------------------------------------------------
// Layout construction
// ---------------------------------------------------------------------------

namespace {

// Static floor plan (objects and colors sampled per episode):
//
//   y=0  #############
//   y=1  #aaa#####aaa#      apple chambers
//   y=2  ##G#######G##      gates
//   y=3  #S.........S#      sensor row, avatar side of the gates
//   y=4  ######^######      one-way door, passable northbound only
//   y=5  #...........#
//   y=6  #...........#      key zone
//   y=7  #.....@.....#      spawn
//   y=8  #############
void build_static_grid(WorldState& s) {
  for (auto& c : s.grid) c = Cell{CellKind::Wall, Side::Left, Color{0}, false};
  auto floor_at = [&](int x, int y) { s.at(x, y).kind = CellKind::Floor; };
  for (int x = 1; x <= 3; ++x) floor_at(x, 1);
  for (int x = 9; x <= 11; ++x) floor_at(x, 1);
  for (int x = 2; x <= 10; ++x) floor_at(x, 3);
  for (int y = 5; y <= 7; ++y)
    for (int x = 1; x <= 11; ++x) floor_at(x, y);
  s.at(oneway_pos().x, oneway_pos().y).kind = CellKind::OneWay;
  s.at(spawn_pos().x, spawn_pos().y).kind = CellKind::Spawn;
  for (Side side : {Side::Left, Side::Right}) {
    Pos g = gate_pos(side), sn = sensor_pos(side);
    s.at(g.x, g.y) = Cell{CellKind::Gate, side, Color{0}, false};
    s.at(sn.x, sn.y) = Cell{CellKind::Sensor, side, Color{0}, false};
  }
}

std::vector<Pos> key_zone_cells() {
  std::vector<Pos> cells;
  for (int y = 5; y <= 7; ++y)
    for (int x = 1; x <= 11; ++x) {
      Pos p{x, y};
      // Keep the spawn cell and the corridor mouth clear.
      if (p == spawn_pos() || p == Pos{6, 5}) continue;
      cells.push_back(p);
    }
  return cells;
}

// Keys block movement, so a sampled layout must leave every key reachable
// (some free orthogonal neighbor connected to the spawn), the corridor mouth
// open, and both sensors viewable from somewhere in the reachable key zone
// (information gathering must be possible before committing).
bool layout_reachable(const WorldState& s) {
  std::array<bool, kGridW * kGridH> blocked{}, visited{};
  for (const auto& o : s.objects)
    if (!o.is_apple) blocked[o.pos.y * kGridW + o.pos.x] = true;
  std::queue<Pos> q;
  q.push(spawn_pos());
  visited[spawn_pos().y * kGridW + spawn_pos().x] = true;
  while (!q.empty()) {
    Pos p = q.front();
    q.pop();
    for (Heading h : {Heading::North, Heading::East, Heading::South, Heading::West}) {
      Pos d = heading_delta(h);
      Pos n{p.x + d.x, p.y + d.y};
      if (!in_bounds(n) || visited[n.y * kGridW + n.x]) continue;
      if (n.y < 5) continue;  // key zone only
      CellKind k = s.at(n).kind;
      if (k != CellKind::Floor && k != CellKind::Spawn) continue;
      if (blocked[n.y * kGridW + n.x]) continue;
      visited[n.y * kGridW + n.x] = true;
      q.push(n);
    }
  }
  if (!visited[5 * kGridW + 6]) return false;  // cell below the one-way door
  for (Side side : {Side::Left, Side::Right}) {
    bool viewable = false;
    for (int y = 5; y <= 7 && !viewable; ++y)
      for (int x = 1; x <= 11 && !viewable; ++x) {
        if (!visited[y * kGridW + x]) continue;
        for (int h = 0; h < 4; ++h)
          if (cell_visible({x, y}, static_cast<Heading>(h), sensor_pos(side)))
            viewable = true;
      }
    if (!viewable) return false;
  }
  for (const auto& o : s.objects) {
    if (o.is_apple) continue;
    bool ok = false;
    for (Heading h : {Heading::North, Heading::East, Heading::South, Heading::West}) {
      Pos d = heading_delta(h);
      Pos n{o.pos.x + d.x, o.pos.y + d.y};
      if (in_bounds(n) && visited[n.y * kGridW + n.x]) ok = true;
    }
    if (!ok) return false;
  }
  return true;
}

void place_objects(WorldState& s, Rng& rng) {
  const bool both_apples =
      s.task == TaskId::KeyGateChoice || s.task == TaskId::KeyGateChoiceHard;
  const Side apple_side = both_apples
                              ? Side::Left  // unused
                              : (rng.uniform_int(2) == 0 ? Side::Left : Side::Right);
  const Side solvable = both_apples
                            ? (rng.uniform_int(2) == 0 ? Side::Left : Side::Right)
                            : apple_side;

  // Two distinct sensor colors; the solvable side's color is the key color.
  int c0 = int(rng.uniform_int(kNumColors));
  int c1 = int(rng.uniform_int(kNumColors - 1));
  if (c1 >= c0) ++c1;
  Color left_col{solvable == Side::Left ? c0 : c1};
  Color right_col{solvable == Side::Right ? c0 : c1};
  s.at(sensor_pos(Side::Left).x, sensor_pos(Side::Left).y).color = left_col;
  s.at(gate_pos(Side::Left).x, gate_pos(Side::Left).y).color = left_col;
  s.at(sensor_pos(Side::Right).x, sensor_pos(Side::Right).y).color = right_col;
  s.at(gate_pos(Side::Right).x, gate_pos(Side::Right).y).color = right_col;

  const Color key_color{c0};
  int next_id = 0;
  auto add_apple = [&](Side side) {
    s.objects.push_back({next_id++, Color{0}, apple_pos(side), true});
  };
  if (both_apples) {
    add_apple(Side::Left);
    add_apple(Side::Right);
  } else {
    add_apple(apple_side);
  }

  if (!task_is_hard(s.task)) {
    // Single correct key at the fixed cell directly in front of the spawn.
    s.objects.push_back({next_id++, key_color, Pos{6, 6}, false});
    return;
  }

  // Hard variants: correct key plus 3-5 distractors, none matching a sensor,
  // resampled until the layout stays traversable.
  const int n_distractors = 3 + int(rng.uniform_int(3));
  const auto zone = key_zone_cells();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    s.objects.resize(both_apples ? 2 : 1);
    next_id = int(s.objects.size());
    std::vector<int> picked;  // indices into zone
    auto pick_cell = [&]() {
      for (;;) {
        int i = int(rng.uniform_int(zone.size()));
        if (std::find(picked.begin(), picked.end(), i) == picked.end()) {
          picked.push_back(i);
          return zone[i];
        }
      }
    };
    s.objects.push_back({next_id++, key_color, pick_cell(), false});
    for (int k = 0; k < n_distractors; ++k) {
      // Any palette color except the two sensor colors.
      int c = int(rng.uniform_int(kNumColors - 2));
      for (int used : {std::min(c0, c1), std::max(c0, c1)})
        if (c >= used) ++c;
      s.objects.push_back({next_id++, Color{c}, pick_cell(), false});
    }
    if (layout_reachable(s)) return;
  }
  throw std::runtime_error("key placement failed to converge");
}

}  // namespace

WorldState reset(TaskId task, std::uint64_t seed, int step_limit) {
  WorldState s;
  s.task = task;
  s.rng_seed = seed;
  s.step_limit = step_limit;
  build_static_grid(s);
  s.avatar = Avatar{spawn_pos(), Heading::North, -1};
  Rng rng(seed ^ (0x517cc1b727220a95ULL * (std::uint64_t(task) + 1)));
  place_objects(s, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

bool walkable(const WorldState& s, Pos from, Pos to) {
  if (!in_bounds(to)) return false;
  const Cell& c = s.at(to);
  switch (c.kind) {
    case CellKind::Wall:
    case CellKind::Sensor:
      return false;
    case CellKind::Gate:
      if (!c.open) return false;
      break;
    case CellKind::OneWay:
      if (to.y - from.y != -1) return false;  // northbound entry only
      break;
    default:
      break;
  }
  // Leaving the one-way cell is also northbound only.
  if (s.at(from).kind == CellKind::OneWay && to.y - from.y != -1) return false;
  int obj = s.object_at(to.x, to.y);
  if (obj >= 0 && !s.object_by_id(obj)->is_apple) return false;
  return true;
}

StepOutcome step(WorldState& s, Action action) {
  if (s.done) throw std::logic_error("step() on a finished episode");
  StepOutcome out;
  Avatar& av = s.avatar;
  const Pos fwd = heading_delta(av.heading);
  const Pos faced{av.pos.x + fwd.x, av.pos.y + fwd.y};

  switch (action) {
    case Action::TurnLeft:
      av.heading = turn_left(av.heading);
      break;
    case Action::TurnRight:
      av.heading = turn_right(av.heading);
      break;
    case Action::MoveForward:
    case Action::MoveBack: {
      const int sign = action == Action::MoveForward ? 1 : -1;
      const Pos target{av.pos.x + sign * fwd.x, av.pos.y + sign * fwd.y};
      if (walkable(s, av.pos, target)) {
        av.pos = target;
        int obj = s.object_at(target.x, target.y);
        if (obj >= 0 && s.object_by_id(obj)->is_apple) {
          s.objects.erase(std::remove_if(s.objects.begin(), s.objects.end(),
                                         [&](const ObjectState& o) { return o.id == obj; }),
                          s.objects.end());
          out.reward = 1.0;
          s.done = true;
        }
      }
      break;
    }
    case Action::PickUp: {
      if (av.held < 0 && in_bounds(faced)) {
        int obj = s.object_at(faced.x, faced.y);
        if (obj >= 0 && !s.object_by_id(obj)->is_apple) av.held = obj;
      }
      break;
    }
    case Action::Drop: {
      if (av.held >= 0 && in_bounds(faced) && s.object_at(faced.x, faced.y) < 0) {
        Cell& c = s.grid[faced.y * kGridW + faced.x];
        if (c.kind == CellKind::Floor || c.kind == CellKind::Spawn ||
            c.kind == CellKind::Sensor) {
          for (auto& o : s.objects)
            if (o.id == av.held) {
              o.pos = faced;
              if (c.kind == CellKind::Sensor && o.color == c.color) {
                Pos g = gate_pos(c.side);
                s.grid[g.y * kGridW + g.x].open = true;  // latched
              }
            }
          av.held = -1;
        }
      }
      break;
    }
  }

  ++s.step_count;
  if (s.step_count >= s.step_limit) s.done = true;
  out.done = s.done;
  return out;
}

// ---------------------------------------------------------------------------
// Observation
// ---------------------------------------------------------------------------

Observation observe(const WorldState& s) {
  Observation obs;
  const Pos fwd = heading_delta(s.avatar.heading);
  const Pos right = heading_delta(turn_right(s.avatar.heading));
  for (int depth = 0; depth < kViewDepth; ++depth) {
    for (int lat = -2; lat <= 2; ++lat) {
      const int idx = depth * kViewWidth + (lat + 2);
      const Pos p{s.avatar.pos.x + depth * fwd.x + lat * right.x,
                  s.avatar.pos.y + depth * fwd.y + lat * right.y};
      int channel = kChOutOfBounds;
      if (in_bounds(p)) {
        const Cell& c = s.at(p);
        switch (c.kind) {
          case CellKind::Wall:
            channel = kChWall;
            break;
          case CellKind::Gate:
            channel = c.open ? kChFloor : kChGateColor0 + c.color.id;
            break;
          case CellKind::Sensor:
            channel = kChSensorColor0 + c.color.id;
            break;
          default:
            channel = kChFloor;
            break;
        }
        if (channel == kChFloor) {
          int obj = s.object_at(p.x, p.y);
          if (obj >= 0) {
            const ObjectState* o = s.object_by_id(obj);
            channel = o->is_apple ? kChApple : kChKeyColor0 + o->color.id;
          }
        }
      }
      obs.cell_channel[idx] = std::uint8_t(channel);
    }
  }
  if (s.avatar.held >= 0)
    obs.held_color = s.object_by_id(s.avatar.held)->color.id;
  return obs;
}

std::vector<double> Observation::flatten() const {
  std::vector<double> v(kObsDim, 0.0);
  for (int i = 0; i < kViewCells; ++i)
    v[i * kNumCellChannels + cell_channel[i]] = 1.0;
  v[kViewCells * kNumCellChannels + held_color] = 1.0;
  v[kObsDim - 1] = reward_prev;
  return v;
}

// ---------------------------------------------------------------------------
// Oracles & rendering
// ---------------------------------------------------------------------------

Side solvable_gate(const WorldState& s) {
  for (Side side : {Side::Left, Side::Right}) {
    const Cell& sensor = s.at(sensor_pos(side));
    bool apple_behind = false;
    for (const auto& o : s.objects)
      if (o.is_apple && o.pos == apple_pos(side)) apple_behind = true;
    if (!apple_behind) continue;
    for (const auto& o : s.objects)
      if (!o.is_apple && o.color == sensor.color) return side;
  }
  throw std::logic_error("no solvable gate; state invariant broken");
}

std::string render(const WorldState& s) {
  std::string out;
  for (int y = 0; y < kGridH; ++y) {
    for (int x = 0; x < kGridW; ++x) {
      char ch = '?';
      const Cell& c = s.at(x, y);
      switch (c.kind) {
        case CellKind::Wall: ch = '#'; break;
        case CellKind::Floor: ch = '.'; break;
        case CellKind::Spawn: ch = ','; break;
        case CellKind::OneWay: ch = '^'; break;
        case CellKind::Gate: ch = c.open ? '/' : char('A' + c.color.id); break;
        case CellKind::Sensor: ch = char('0' + c.color.id); break;
      }
      int obj = s.object_at(x, y);
      if (obj >= 0) {
        const ObjectState* o = s.object_by_id(obj);
        ch = o->is_apple ? '*' : char('a' + o->color.id);
      }
      if (s.avatar.pos == Pos{x, y}) ch = "^>v<"[static_cast<int>(s.avatar.heading)];
      out.push_back(ch);
    }
    out.push_back('\n');
  }
  return out;
}

std::string render_legend() {
  std::ostringstream os;
  os << "# wall   . floor   , spawn   ^ one-way door (northbound)\n"
     << "A-F closed gate by color   / open gate   0-5 sensor by color id\n"
     << "a-f key by color   * apple   ^>v< avatar heading\n"
     << "colors:";
  for (int i = 0; i < kNumColors; ++i)
    os << " " << i << "=" << Color{i}.name();
  os << "\n";
  return os.str();
}

}  // namespace keygate
