#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mmkd/data.hpp"
#include "mmkd/errors.hpp"

using namespace mmkd;
using namespace mmkd::data;

namespace {

// Independent recount used as the oracle: scans cells directly instead of
// going through compute_facts.
int count_matching(const ToyImage& img, int want_color, int want_shape) {
  int n = 0;
  for (int code : img.cells) {
    if (code == 0) continue;
    const int color = (code - 1) / 3;
    const int shape = (code - 1) % 3;
    if ((want_color < 0 || color == want_color) && (want_shape < 0 || shape == want_shape)) ++n;
  }
  return n;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/mmkd_test_") + name;
}

} // namespace

TEST_SUITE("data") {

TEST_CASE("make_world is seed-deterministic") {
  GridConfig grid;
  ToyImage a = make_world(1234, grid);
  ToyImage b = make_world(1234, grid);
  CHECK(a.cells == b.cells);
  ToyImage c = make_world(1235, grid);
  CHECK(a.cells != c.cells);
}

TEST_CASE("empty grid reports zero counts everywhere") {
  GridConfig grid;
  grid.occupancy_pct = 0;
  Facts f = compute_facts(make_world(7, grid));
  CHECK(f.total == 0);
  for (int c : f.color_count) CHECK(c == 0);
  for (int s : f.shape_count) CHECK(s == 0);
  for (int p : f.pair_count) CHECK(p == 0);
}

TEST_CASE("facts agree with a brute-force cell scan") {
  GridConfig grid;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    ToyImage img = make_world(seed, grid);
    Facts f = compute_facts(img);
    CHECK(f.total == count_matching(img, -1, -1));
    for (int c = 0; c < kNumColors; ++c) CHECK(f.color_count[c] == count_matching(img, c, -1));
    for (int s = 0; s < kNumShapes; ++s) CHECK(f.shape_count[s] == count_matching(img, -1, s));
    for (int k = 0; k < kNumColors * kNumShapes; ++k) {
      CHECK(f.pair_count[k] == count_matching(img, k / 3, k % 3));
    }
  }
}

TEST_CASE("count questions answer with the oracle count") {
  GridConfig grid;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    ToyImage img = make_world(seed, grid);
    Facts f = compute_facts(img);
    Conversation conv = make_conversation(f, seed * 31 + 5, {Family::count});
    const auto words = split_words(conv.instruction());
    REQUIRE(words.size() >= 3);
    REQUIRE(words[0] == "how");
    REQUIRE(words[1] == "many");
    int expect = -1;
    if (words[2] == "objects") {
      expect = count_matching(img, -1, -1);
    } else {
      for (int c = 0; c < kNumColors; ++c) {
        if (words[2] == color_names()[c]) expect = count_matching(img, c, -1);
      }
      for (int s = 0; s < kNumShapes; ++s) {
        if (words[2] == shape_names()[s]) expect = count_matching(img, -1, s);
      }
    }
    REQUIRE(expect >= 0);
    CHECK(conv.answer() == std::to_string(expect));
  }
}

TEST_CASE("presence questions answer no when the pair is absent") {
  GridConfig grid;
  grid.occupancy_pct = 0;
  Facts f = compute_facts(make_world(3, grid));
  for (uint64_t s = 0; s < 10; ++s) {
    Conversation conv = make_conversation(f, s, {Family::presence});
    CHECK(conv.answer() == "no");
  }
}

TEST_CASE("position and describe answers match the grid") {
  GridConfig grid;
  for (uint64_t seed = 100; seed < 120; ++seed) {
    ToyImage img = make_world(seed, grid);
    Facts f = compute_facts(img);

    Conversation pos = make_conversation(f, seed, {Family::position});
    const auto pw = split_words(pos.instruction());
    // "what is in row R column C", 1-based
    const int r = std::stoi(pw[4]) - 1;
    const int c = std::stoi(pw[6]) - 1;
    CHECK(pos.answer() == cell_phrase(img.cell(r, c)));

    Conversation desc = make_conversation(f, seed + 7, {Family::describe});
    const auto dw = split_words(desc.instruction());
    const int dr = std::stoi(dw[2]) - 1;
    std::string want;
    for (int cc = 0; cc < img.cols; ++cc) {
      if (cc > 0) want += " ";
      want += cell_phrase(img.cell(dr, cc));
    }
    CHECK(desc.answer() == want);
  }
}

TEST_CASE("conversations are seed-deterministic and need templates") {
  Facts f = compute_facts(make_world(9, GridConfig{}));
  Conversation a = make_conversation(f, 42, {Family::count, Family::presence});
  Conversation b = make_conversation(f, 42, {Family::count, Family::presence});
  CHECK(a.instruction() == b.instruction());
  CHECK(a.answer() == b.answer());
  CHECK_THROWS_AS(make_conversation(f, 1, {}), ConfigError);
}

TEST_CASE("vocabulary is bijective and exactly sized") {
  Vocabulary v = Vocabulary::standard(512);
  CHECK(v.size() == 512);
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.word(i)) == i);
  CHECK_THROWS_AS(v.id("zebra"), TokenizeError);
  CHECK_THROWS_AS(Vocabulary::standard(10), ConfigError);
}

TEST_CASE("tokenize produces the documented layout") {
  Vocabulary v = Vocabulary::standard(512);
  Conversation conv;
  conv.turns = {{"instruction", "how many objects"}, {"answer", "3"}};
  TokenizedSample s = tokenize(conv, v, 16);
  REQUIRE(s.ids.size() == 1 + 16 + 3 + 1 + 1 + 1);
  CHECK(s.ids[0] == v.bos());
  for (int i = 1; i <= 16; ++i) CHECK(s.ids[i] == v.img());
  CHECK(s.ids[17] == v.id("how"));
  CHECK(s.ids[20] == v.sep());
  CHECK(s.ids[21] == v.id("3"));
  CHECK(s.ids[22] == v.eos());
  CHECK(s.selected(s.answer_only) == std::vector<int>{21, 22});
}

TEST_CASE("tokenize rejects out-of-vocabulary words by name") {
  Vocabulary v = Vocabulary::standard(512);
  Conversation conv;
  conv.turns = {{"instruction", "how many zebras"}, {"answer", "3"}};
  try {
    tokenize(conv, v, 16);
    FAIL("expected TokenizeError");
  } catch (const TokenizeError& e) {
    CHECK(std::string(e.what()).find("zebras") != std::string::npos);
  }
}

TEST_CASE("masks nest and never overlap the instruction") {
  Vocabulary v = Vocabulary::standard(512);
  GenConfig cfg;
  cfg.n_train = 50;
  Dataset ds = generate_split(cfg, 77, "train");
  for (const auto& sample : ds.samples) {
    TokenizedSample t = tokenize(sample.conversation, v, 16);
    const auto ans = t.selected(t.answer_only);
    const auto all = t.selected(t.all_tokens);
    std::set<int> all_set(all.begin(), all.end());
    for (int p : ans) CHECK(all_set.count(p) == 1);
    // answer positions sit strictly after SEP; instruction positions before it
    int sep_pos = -1;
    for (size_t p = 0; p < t.ids.size(); ++p) {
      if (t.ids[p] == v.sep()) sep_pos = static_cast<int>(p);
    }
    REQUIRE(sep_pos > 0);
    for (int p : ans) CHECK(p > sep_pos);
  }
}

TEST_CASE("tokenize round-trips conversation text") {
  Vocabulary v = Vocabulary::standard(512);
  GenConfig cfg;
  cfg.n_train = 100;
  Dataset ds = generate_split(cfg, 11, "train");
  for (const auto& sample : ds.samples) {
    TokenizedSample t = tokenize(sample.conversation, v, 16);
    const auto [instr, ans] = detokenize(t, v);
    CHECK(instr == sample.conversation.instruction());
    CHECK(ans == sample.conversation.answer());
  }
}

TEST_CASE("dataset files round-trip and reject unknown fields") {
  GenConfig cfg;
  cfg.n_train = 25;
  Dataset ds = generate_split(cfg, 5, "train");
  const std::string path = temp_path("roundtrip.jsonl");
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].image.cells == ds.samples[i].image.cells);
    CHECK(back.samples[i].conversation.instruction() == ds.samples[i].conversation.instruction());
    CHECK(back.samples[i].conversation.answer() == ds.samples[i].conversation.answer());
    CHECK(back.samples[i].conversation.family == ds.samples[i].conversation.family);
  }
  std::remove(path.c_str());

  const std::string bad = temp_path("bad.jsonl");
  {
    std::ofstream out(bad);
    out << R"({"schema_version":1,"grid":{"rows":4,"cols":4,"occupancy_pct":50},"extra":1})"
        << "\n";
  }
  CHECK_THROWS_AS(load_dataset(bad), IoError);
  std::remove(bad.c_str());
}

TEST_CASE("dataset bytes are identical across repeated generation") {
  GenConfig cfg;
  cfg.n_train = 40;
  const std::string p1 = temp_path("gen1.jsonl");
  const std::string p2 = temp_path("gen2.jsonl");
  save_dataset(generate_split(cfg, 99, "train"), p1);
  save_dataset(generate_split(cfg, 99, "train"), p2);
  std::ifstream f1(p1), f2(p2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(s1.str().size() > 0);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("splits draw from disjoint seed streams") {
  GenConfig cfg;
  cfg.n_train = 30;
  cfg.n_eval = 30;
  Dataset train = generate_split(cfg, 13, "train");
  Dataset eval = generate_split(cfg, 13, "eval");
  int identical = 0;
  for (int i = 0; i < 30; ++i) {
    if (train.samples[i].image.cells == eval.samples[i].image.cells) ++identical;
  }
  CHECK(identical == 0);
  CHECK_THROWS_AS(generate_split(cfg, 13, "validation"), ConfigError);
}

TEST_CASE("pretrain split uses caption-style describe questions") {
  GenConfig cfg;
  cfg.n_pretrain = 20;
  Dataset ds = generate_split(cfg, 21, "pretrain");
  for (const auto& s : ds.samples) CHECK(s.conversation.family == Family::describe);
}

} // TEST_SUITE("data")
