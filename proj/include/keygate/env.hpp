#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "keygate/rng.hpp"

namespace keygate {

// ---------------------------------------------------------------------------
// Colors
// ---------------------------------------------------------------------------

inline constexpr int kNumColors = 6;

struct Color {
  int id = 0;  // index into the palette below

  static const std::array<std::string, kNumColors>& palette();
  static Color from_name(const std::string& name);  // throws on unknown name
  const std::string& name() const;

  bool operator==(const Color& o) const { return id == o.id; }
  bool operator!=(const Color& o) const { return id != o.id; }
};

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class TaskId { KeyChoice, KeyChoiceHard, KeyGateChoice, KeyGateChoiceHard };

inline constexpr std::array<TaskId, 4> kAllTasks = {
    TaskId::KeyChoice, TaskId::KeyChoiceHard, TaskId::KeyGateChoice,
    TaskId::KeyGateChoiceHard};

bool task_is_hard(TaskId t);
const std::string& task_name(TaskId t);
TaskId task_from_name(const std::string& name);  // throws on unknown name

// ---------------------------------------------------------------------------
// World geometry
// ---------------------------------------------------------------------------

inline constexpr int kGridW = 13;
inline constexpr int kGridH = 9;
inline constexpr int kDefaultStepLimit = 200;

enum class Side { Left, Right };
inline Side other_side(Side s) { return s == Side::Left ? Side::Right : Side::Left; }
const std::string& side_name(Side s);

enum class Heading { North, East, South, West };

enum class CellKind : std::uint8_t { Floor, Wall, Gate, Sensor, Spawn, OneWay };

struct Cell {
  CellKind kind = CellKind::Wall;
  Side side = Side::Left;   // gates and sensors only
  Color color;              // gates and sensors only
  bool open = false;        // gates only
};

struct Pos {
  int x = 0, y = 0;
  bool operator==(const Pos& o) const { return x == o.x && y == o.y; }
  bool operator!=(const Pos& o) const { return !(*this == o); }
};

Pos heading_delta(Heading h);
Heading turn_left(Heading h);
Heading turn_right(Heading h);

struct ObjectState {
  int id = 0;
  Color color;
  Pos pos;             // meaningless while held
  bool is_apple = false;
};

struct Avatar {
  Pos pos;
  Heading heading = Heading::North;
  int held = -1;  // object id, -1 = empty hands
};

struct WorldState {
  std::array<Cell, kGridW * kGridH> grid;
  std::vector<ObjectState> objects;
  Avatar avatar;
  int step_count = 0;
  int step_limit = kDefaultStepLimit;
  bool done = false;
  TaskId task = TaskId::KeyChoice;
  std::uint64_t rng_seed = 0;

  Cell& at(int x, int y) { return grid[y * kGridW + x]; }
  const Cell& at(int x, int y) const { return grid[y * kGridW + x]; }
  const Cell& at(Pos p) const { return grid[p.y * kGridW + p.x]; }

  // -1 when no object occupies (x, y); apples count as objects.
  int object_at(int x, int y) const;
  const ObjectState* object_by_id(int id) const;

  bool operator==(const WorldState& o) const;
};

// Fixed layout anchors, shared with the oracle planner and tests.
Pos gate_pos(Side s);    // (2,2) / (10,2)
Pos sensor_pos(Side s);  // (1,3) / (11,3)
Pos apple_pos(Side s);   // (2,1) / (10,1)
Pos gate_approach(Side s);  // row-3 cell in front of the gate
Pos spawn_pos();            // (6,7)
Pos oneway_pos();           // (6,4)

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

enum class Action { MoveForward, MoveBack, TurnLeft, TurnRight, PickUp, Drop };
inline constexpr int kNumActions = 6;
inline constexpr std::array<Action, 6> kAllActions = {
    Action::MoveForward, Action::MoveBack, Action::TurnLeft,
    Action::TurnRight,   Action::PickUp,   Action::Drop};
const std::string& action_name(Action a);

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

// Egocentric 5x5 window: forward depth 0..4 (row 0 = the avatar's own rank),
// lateral -2..+2, rotated so that "ahead" is always depth-increasing.
inline constexpr int kViewDepth = 5;
inline constexpr int kViewWidth = 5;
inline constexpr int kViewCells = kViewDepth * kViewWidth;

// Per-cell one-hot channel layout.
enum CellChannel : int {
  kChWall = 0,
  kChFloor = 1,
  kChGateColor0 = 2,                          // 6 gate-by-color channels
  kChSensorColor0 = kChGateColor0 + kNumColors,
  kChKeyColor0 = kChSensorColor0 + kNumColors,
  kChApple = kChKeyColor0 + kNumColors,
  kChOutOfBounds = kChApple + 1,
  kNumCellChannels = kChOutOfBounds + 1,      // 22
};

inline constexpr int kHeldDim = kNumColors + 1;  // 6 colors + "none"
inline constexpr int kObsDim = kViewCells * kNumCellChannels + kHeldDim + 1;

struct Observation {
  // Exactly one channel active per cell; stored as that channel's index.
  std::array<std::uint8_t, kViewCells> cell_channel{};
  int held_color = kNumColors;  // kNumColors = nothing held
  double reward_prev = 0.0;

  // One-hot expansion consumed by the networks.
  std::vector<double> flatten() const;
  bool operator==(const Observation& o) const {
    return cell_channel == o.cell_channel && held_color == o.held_color &&
           reward_prev == o.reward_prev;
  }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

WorldState reset(TaskId task, std::uint64_t seed, int step_limit = kDefaultStepLimit);

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

// Advances the state in place. Throws std::logic_error on a finished episode.
StepOutcome step(WorldState& state, Action action);

Observation observe(const WorldState& state);

// Full-state oracle: the unique side whose sensor color matches an available
// key and whose gate hides an apple. Scripted Setter and tests only.
Side solvable_gate(const WorldState& state);

// ASCII rendering, one char per cell; legend in render_legend().
std::string render(const WorldState& state);
std::string render_legend();

// True if the avatar could legally move into (or through) the cell.
bool walkable(const WorldState& state, Pos from, Pos to);

// True if target falls inside the 5x5 ego window of an avatar at `avatar`
// facing `h`.
bool cell_visible(Pos avatar, Heading h, Pos target);

}  // namespace keygate
