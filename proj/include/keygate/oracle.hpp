#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "keygate/env.hpp"
#include "keygate/lang.hpp"
#include "keygate/rng.hpp"

namespace keygate {

// ---------------------------------------------------------------------------
// Setter: full-state scripted instruction giver
// ---------------------------------------------------------------------------

enum class SetterPhase {
  LookAtSensor,
  FetchKey,
  GoToGate,
  PlaceKey,
  GetApple,
  CorrectDrop,
};

const std::string& setter_phase_name(SetterPhase p);

// The Setter re-evaluates its instruction only every kSetterPeriod env steps,
// mirroring the cadence of the high-level agent that will replace it. A
// per-step stream would switch instructions mid-period, which a
// period-granular imitator cannot reproduce and the follower never learns to
// survive.
inline constexpr int kSetterPeriod = 8;

// Consecutive steps the sensor must stay visible before the Setter considers
// it "seen"; matches the decision period so the color reaches the coarser
// timescale.
inline constexpr int kSensorGazeSteps = 8;

// True when the given sensor cell falls inside the avatar's 5x5 ego window.
bool sensor_visible(const WorldState& state, Side side);

class Setter {
 public:
  explicit Setter(const WorldState& initial);

  // Re-evaluated every step; returns the currently active instruction.
  Instruction instruct(const WorldState& state, const Vocabulary& vocab);
  SetterPhase phase() const { return phase_; }
  Side target_side() const { return target_side_; }
  Color key_color() const { return key_color_; }

 private:
  Instruction decide(const WorldState& s, const Vocabulary& vocab);

  Side target_side_;
  Color key_color_;
  // Reconnaissance: which sensor is currently being gazed at, and whether the
  // recon phase has finished (the correct sensor was held in view).
  Side look_side_;
  bool recon_done_ = false;
  int visible_streak_ = 0;  // consecutive steps the gazed sensor was in view
  bool retreat_pending_ = false;  // issue "move back" after a wrong-key drop
  Instruction current_{};
  bool has_current_ = false;
  SetterPhase phase_ = SetterPhase::FetchKey;
};

// ---------------------------------------------------------------------------
// Solver: instruction-conditioned shortest-path executor
// ---------------------------------------------------------------------------

struct SolverDecision {
  Action action = Action::MoveForward;
  bool unachievable = false;  // no plan exists; recorded in the trajectory
};

// With probability 1-epsilon, the first action of a breadth-first shortest
// plan achieving the instruction; with probability epsilon, a uniform action.
SolverDecision solver_action(const WorldState& state, const Instruction& instr,
                             double epsilon, Rng& rng, const Vocabulary& vocab);

// Test/analysis helper: full BFS plan length for the instruction from the
// given state (terminal action included), or nullopt when unachievable.
std::optional<int> solver_plan_length(const WorldState& state,
                                      const Instruction& instr,
                                      const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct TrajStep {
  int t = 0;
  Observation obs;
  Action action = Action::MoveForward;
  Instruction instr;
  double reward = 0.0;
  bool done = false;
  bool flagged = false;  // solver had no plan at this step
};

struct Trajectory {
  TaskId task = TaskId::KeyChoice;
  std::uint64_t seed = 0;
  double epsilon = 0.0;
  double outcome = 0.0;  // sum of rewards, {0, 1}
  std::vector<TrajStep> steps;
};

inline constexpr int kTrajFormatVersion = 1;

void save_trajectory(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory(const std::string& path);

// Rolls one scripted Setter+Solver episode.
Trajectory run_oracle_episode(TaskId task, std::uint64_t seed, double epsilon,
                              const Vocabulary& vocab,
                              int step_limit = kDefaultStepLimit);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::vector<std::string> files;             // relative to the manifest dir
  std::map<std::string, int> episodes_per_task;
  std::uint64_t vocab_checksum = 0;
  std::uint64_t generator_seed = 0;
  double epsilon = 0.0;

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
};

DatasetManifest generate_dataset(const std::vector<TaskId>& tasks,
                                 int episodes_per_task, double epsilon,
                                 std::uint64_t seed, const std::string& out_dir,
                                 const Vocabulary& vocab);

// Loads every trajectory referenced by a manifest (paths resolved relative to
// the manifest's directory).
std::vector<Trajectory> load_dataset(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// Minibatch iteration: B parallel slots streaming contiguous K-step windows
// ---------------------------------------------------------------------------

struct Batch {
  int batch_size = 0;
  int window = 0;
  // Per slot: true when this window starts a new episode (reset recurrent state).
  std::vector<std::uint8_t> window_start;
  // Index [k * batch_size + b]; nullptr marks PAD-masked remainder steps.
  std::vector<const TrajStep*> steps;

  const TrajStep* at(int k, int b) const { return steps[k * batch_size + b]; }
};

class BatchIterator {
 public:
  // Throws if window exceeds every trajectory's length.
  BatchIterator(const std::vector<Trajectory>& episodes, int batch_size,
                int window, std::uint64_t seed);
  // The iterator keeps a pointer into `episodes`; temporaries are a bug.
  BatchIterator(std::vector<Trajectory>&&, int, int, std::uint64_t) = delete;

  // Infinite stream; epochs reshuffle with the seeded rng.
  Batch next();

 private:
  void refill_order();

  const std::vector<Trajectory>* episodes_;
  int batch_size_, window_;
  Rng rng_;
  std::vector<int> order_;
  size_t order_pos_ = 0;
  struct Slot {
    int episode = -1;
    int offset = 0;
  };
  std::vector<Slot> slots_;
};

}  // namespace keygate
