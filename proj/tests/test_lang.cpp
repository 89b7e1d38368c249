#include "doctest.h"

#include <filesystem>
#include <set>

#include "keygate/lang.hpp"

using namespace keygate;

TEST_CASE("tokenize: drop it") {
  Vocabulary vocab;
  Instruction g = tokenize(vocab, "drop it");
  CHECK(g.token_ids[0] == kBosId);
  CHECK(vocab.token(g.token_ids[1]) == "drop");
  CHECK(vocab.token(g.token_ids[2]) == "it");
  CHECK(g.token_ids[3] == kEosId);
  for (int i = 4; i < kInstructionLen; ++i) CHECK(g.token_ids[i] == kPadId);
  CHECK(g.well_formed());
}

TEST_CASE("tokenize/detokenize round-trips over the whole grammar") {
  Vocabulary vocab;
  for (const auto& g : enumerate_instructions(vocab)) {
    CHECK(g.well_formed());
    CHECK(tokenize(vocab, detokenize(vocab, g)) == g);
  }
}

TEST_CASE("tokenize: every template fits the fixed length") {
  Vocabulary vocab;
  // Longest surface form has 6 content tokens.
  Instruction g = tokenize(vocab, "put it on the left sensor");
  CHECK(g.token_ids[kInstructionLen - 1] == kEosId);
  CHECK(g.well_formed());
  Instruction g2 = tokenize(vocab, "pick up the red key");
  CHECK(g2.eos_index() == 6);
}

TEST_CASE("tokenize: errors name the offending token and reject overlong text") {
  Vocabulary vocab;
  CHECK_THROWS_WITH_AS(tokenize(vocab, "pick up the mauve key"),
                       doctest::Contains("mauve"), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(vocab, "go to the left gate and then back"),
                  std::invalid_argument);
}

TEST_CASE("enumerate_instructions: 16 distinct instructions, stable order") {
  Vocabulary vocab;
  auto all = enumerate_instructions(vocab);
  CHECK(all.size() == 16);
  std::set<Instruction> uniq(all.begin(), all.end());
  CHECK(uniq.size() == all.size());
  for (int c = 0; c < kNumColors; ++c) {
    Instruction want = tokenize(vocab, instr_pick_up(Color{c}));
    CHECK(std::find(all.begin(), all.end(), want) != all.end());
  }
  auto again = enumerate_instructions(vocab);
  CHECK(again == all);
}

TEST_CASE("vocabulary: reserved ids and file round-trip") {
  Vocabulary vocab;
  CHECK(vocab.id("<pad>") == kPadId);
  CHECK(vocab.id("<bos>") == kBosId);
  CHECK(vocab.id("<eos>") == kEosId);
  CHECK(vocab.size() == 30);

  auto path = (std::filesystem::temp_directory_path() / "kg_vocab.txt").string();
  vocab.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  CHECK(loaded.size() == vocab.size());
  CHECK(loaded.checksum() == vocab.checksum());
  for (int i = 0; i < vocab.size(); ++i) CHECK(loaded.token(i) == vocab.token(i));
  std::filesystem::remove(path);
}
