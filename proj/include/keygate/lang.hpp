#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "keygate/env.hpp"

namespace keygate {

// Instruction length: BOS + at most 6 content tokens + EOS, PAD-filled.
inline constexpr int kInstructionLen = 8;

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

class Vocabulary {
 public:
  // The fixed grammar vocabulary: reserved ids then content tokens.
  Vocabulary();

  int size() const { return int(tokens_.size()); }
  int id(const std::string& token) const;         // throws on unknown token
  const std::string& token(int id) const;         // throws on bad id
  bool contains(const std::string& token) const;

  // One token per line, line number = id.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  // FNV-1a over the token list; stored in dataset manifests.
  std::uint64_t checksum() const;

 private:
  std::vector<std::string> tokens_;
};

struct Instruction {
  std::array<std::int16_t, kInstructionLen> token_ids{};

  bool operator==(const Instruction& o) const { return token_ids == o.token_ids; }
  bool operator!=(const Instruction& o) const { return !(*this == o); }
  bool operator<(const Instruction& o) const { return token_ids < o.token_ids; }

  // BOS first, exactly one EOS, only PAD after it.
  bool well_formed() const;
  int eos_index() const;  // -1 if absent
};

// Throws std::invalid_argument on unknown tokens or overlong text.
Instruction tokenize(const Vocabulary& vocab, const std::string& text);
std::string detokenize(const Vocabulary& vocab, const Instruction& instr);

// The closed template set, fully grounded over colors and sides.
// Stable ordering; 16 instructions total.
std::vector<Instruction> enumerate_instructions(const Vocabulary& vocab);

// Grounded surface forms used by the Setter.
std::string instr_pick_up(Color c);
std::string instr_drop_it();
std::string instr_go_to_gate(Side s);
std::string instr_put_on_sensor(Side s);
std::string instr_look_at_sensor(Side s);
std::string instr_get_apple();
std::string instr_move_forward();
std::string instr_move_back();

}  // namespace keygate
