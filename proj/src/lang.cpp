#include "keygate/lang.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace keygate {

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<bos>", "<eos>"};
  for (int i = 0; i < kNumColors; ++i) tokens_.push_back(Color{i}.name());
  for (const char* t : {"left", "right", "pick", "up", "the", "key", "drop",
                        "it", "go", "to", "gate", "put", "on", "sensor", "look",
                        "at", "get", "apple", "move", "forward", "back"})
    tokens_.push_back(t);
}

int Vocabulary::id(const std::string& token) const {
  for (size_t i = 0; i < tokens_.size(); ++i)
    if (tokens_[i] == token) return int(i);
  throw std::invalid_argument("unknown token: " + token);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const {
  for (const auto& t : tokens_)
    if (t == token) return true;
  return false;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
  for (const auto& t : tokens_) out << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
  Vocabulary v;
  v.tokens_.clear();
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) v.tokens_.push_back(line);
  if (v.size() < 3 || v.tokens_[kPadId] != "<pad>" || v.tokens_[kBosId] != "<bos>" ||
      v.tokens_[kEosId] != "<eos>")
    throw std::runtime_error("malformed vocabulary file: " + path);
  return v;
}

std::uint64_t Vocabulary::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    for (char c : t) {
      h ^= std::uint8_t(c);
      h *= 0x100000001b3ULL;
    }
    h ^= '\n';
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool Instruction::well_formed() const {
  if (token_ids[0] != kBosId) return false;
  int eos = eos_index();
  if (eos < 1) return false;
  for (int i = 1; i < eos; ++i)
    if (token_ids[i] == kPadId || token_ids[i] == kBosId || token_ids[i] == kEosId)
      return false;
  for (int i = eos + 1; i < kInstructionLen; ++i)
    if (token_ids[i] != kPadId) return false;
  return true;
}

int Instruction::eos_index() const {
  for (int i = 0; i < kInstructionLen; ++i)
    if (token_ids[i] == kEosId) return i;
  return -1;
}

Instruction tokenize(const Vocabulary& vocab, const std::string& text) {
  Instruction instr;
  instr.token_ids.fill(kPadId);
  instr.token_ids[0] = kBosId;
  int n = 1;
  std::istringstream is(text);
  std::string word;
  while (is >> word) {
    if (n >= kInstructionLen - 1)
      throw std::invalid_argument("instruction too long: " + text);
    instr.token_ids[n++] = std::int16_t(vocab.id(word));
  }
  instr.token_ids[n] = kEosId;
  return instr;
}

std::string detokenize(const Vocabulary& vocab, const Instruction& instr) {
  std::string out;
  for (int i = 1; i < kInstructionLen; ++i) {
    int id = instr.token_ids[i];
    if (id == kEosId || id == kPadId) break;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

std::string instr_pick_up(Color c) { return "pick up the " + c.name() + " key"; }
std::string instr_drop_it() { return "drop it"; }
std::string instr_go_to_gate(Side s) { return "go to the " + side_name(s) + " gate"; }
std::string instr_put_on_sensor(Side s) {
  return "put it on the " + side_name(s) + " sensor";
}
std::string instr_look_at_sensor(Side s) {
  return "look at the " + side_name(s) + " sensor";
}
std::string instr_get_apple() { return "get the apple"; }
std::string instr_move_forward() { return "move forward"; }
std::string instr_move_back() { return "move back"; }

std::vector<Instruction> enumerate_instructions(const Vocabulary& vocab) {
  std::vector<std::string> texts;
  for (int c = 0; c < kNumColors; ++c) texts.push_back(instr_pick_up(Color{c}));
  texts.push_back(instr_drop_it());
  for (Side s : {Side::Left, Side::Right}) texts.push_back(instr_go_to_gate(s));
  for (Side s : {Side::Left, Side::Right}) texts.push_back(instr_put_on_sensor(s));
  for (Side s : {Side::Left, Side::Right}) texts.push_back(instr_look_at_sensor(s));
  texts.push_back(instr_get_apple());
  texts.push_back(instr_move_forward());
  texts.push_back(instr_move_back());
  std::vector<Instruction> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(vocab, t));
  return out;
}

}  // namespace keygate
