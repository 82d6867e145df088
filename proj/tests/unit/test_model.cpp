#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "mmkd/data.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/model.hpp"
#include "mmkd/ops.hpp"

using namespace mmkd;
using namespace mmkd::ad;
using namespace mmkd::model;

namespace {

data::ToyImage sample_image(uint64_t seed) {
  return data::make_world(seed, data::GridConfig{});
}

std::vector<int> sample_ids(const data::Vocabulary& vocab, uint64_t seed, int n_visual) {
  data::ToyImage img = sample_image(seed);
  data::Conversation conv = data::make_conversation(
      data::compute_facts(img), seed + 1,
      {data::Family::count, data::Family::presence, data::Family::position});
  return data::tokenize(conv, vocab, n_visual).ids;
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("encoder produces one feature row per cell, deterministically") {
  VisualEncoderSpec spec;
  VisualEncoder enc(spec);
  data::ToyImage img = sample_image(3);
  Tensor z1 = enc.encode(img);
  Tensor z2 = enc.encode(img);
  CHECK(z1.shape() == Shape{16, 32});
  CHECK(z1.value() == z2.value());
  CHECK_FALSE(z1.requires_grad());
}

TEST_CASE("empty image collapses to the bias response on every patch") {
  VisualEncoderSpec spec;
  VisualEncoder enc(spec);
  data::GridConfig grid;
  grid.occupancy_pct = 0;
  Tensor z = enc.encode(data::make_world(1, grid));
  for (int i = 1; i < 16; ++i) {
    for (int j = 0; j < 32; ++j) {
      CHECK(z.value()[static_cast<size_t>(i) * 32 + j] == z.value()[j]);
    }
  }
}

TEST_CASE("encoder rejects mismatched grids") {
  VisualEncoder enc(VisualEncoderSpec{});
  data::GridConfig grid;
  grid.rows = 3;
  CHECK_THROWS_AS(enc.encode(data::make_world(1, grid)), DimensionError);
}

TEST_CASE("projector is a pure linear map") {
  TransformerLM lm = TransformerLM::init(teacher_spec(), 7);
  VisualEncoder enc(VisualEncoderSpec{});
  Tensor z = enc.encode(sample_image(5));

  // independent triple-loop oracle
  Tensor h = lm.project_visual(z);
  const auto& w = lm.proj_visual_w.value();
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 128; ++j) {
      double s = 0.0;
      for (int k = 0; k < 32; ++k) s += z.value()[i * 32 + k] * w[static_cast<size_t>(k) * 128 + j];
      CHECK(h.value()[static_cast<size_t>(i) * 128 + j] == doctest::Approx(s).epsilon(1e-12));
    }
  }

  Tensor zero = Tensor::zeros({16, 32});
  for (double v : lm.project_visual(zero).value()) CHECK(v == 0.0);

  // identity-padded projector copies features into the leading dims
  std::vector<double> eye(32 * 128, 0.0);
  for (int k = 0; k < 32; ++k) eye[static_cast<size_t>(k) * 128 + k] = 1.0;
  lm.proj_visual_w.mutable_value() = eye;
  Tensor hc = lm.project_visual(z);
  for (int i = 0; i < 16; ++i) {
    for (int k = 0; k < 32; ++k) {
      CHECK(hc.value()[static_cast<size_t>(i) * 128 + k] == z.value()[i * 32 + k]);
    }
  }
}

TEST_CASE("forward exposes per-layer state with normalized attention") {
  TransformerLM lm = TransformerLM::init(teacher_spec(), 11);
  VisualEncoder enc(VisualEncoderSpec{});
  data::Vocabulary vocab = data::Vocabulary::standard(512);
  data::ToyImage img = sample_image(21);
  std::vector<int> ids = sample_ids(vocab, 21, 16);

  NoGradGuard no_grad;
  Tensor h_v = lm.project_visual(enc.encode(img));
  LMOutputs out = lm.forward(h_v, ids, 16);
  const int seq = static_cast<int>(ids.size());

  CHECK(out.logits.shape() == Shape{seq, 512});
  CHECK(out.hidden_states.size() == 4);
  CHECK(out.attention.size() == 4);
  for (const auto& heads : out.attention) {
    CHECK(heads.size() == 4);
    for (const Tensor& probs : heads) {
      REQUIRE(probs.shape() == Shape{seq, seq});
      for (int i = 0; i < seq; ++i) {
        double visible = 0.0;
        for (int j = 0; j <= i; ++j) visible += probs.value()[static_cast<size_t>(i) * seq + j];
        CHECK(std::fabs(visible - 1.0) < 1e-9);
        for (int j = i + 1; j < seq; ++j) {
          CHECK(probs.value()[static_cast<size_t>(i) * seq + j] == 0.0);
        }
      }
    }
  }

  Tensor p = ad::softmax_t(out.logits, 1.0);
  for (int i = 0; i < seq; ++i) {
    double s = 0.0;
    for (int j = 0; j < 512; ++j) s += p.value()[static_cast<size_t>(i) * 512 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("text perturbations only touch positions at or after the edit") {
  TransformerLM lm = TransformerLM::init(teacher_spec(), 13);
  VisualEncoder enc(VisualEncoderSpec{});
  data::Vocabulary vocab = data::Vocabulary::standard(512);
  data::ToyImage img = sample_image(33);
  std::vector<int> ids = sample_ids(vocab, 33, 16);
  const int seq = static_cast<int>(ids.size());

  NoGradGuard no_grad;
  Tensor h_v = lm.project_visual(enc.encode(img));
  LMOutputs base = lm.forward(h_v, ids, 16);

  const int edit = 19; // inside the instruction
  std::vector<int> edited = ids;
  edited[edit] = (edited[edit] + 1) % 512;
  REQUIRE(edited[edit] != ids[edit]);
  LMOutputs changed = lm.forward(h_v, edited, 16);

  for (int i = 0; i < seq; ++i) {
    bool same = true;
    for (int j = 0; j < 512; ++j) {
      same = same && base.logits.value()[static_cast<size_t>(i) * 512 + j] ==
                         changed.logits.value()[static_cast<size_t>(i) * 512 + j];
    }
    if (i < edit) {
      CHECK(same);
    } else {
      CHECK_FALSE(same);
    }
  }
}

TEST_CASE("visual perturbations reach every text position") {
  TransformerLM lm = TransformerLM::init(teacher_spec(), 17);
  VisualEncoder enc(VisualEncoderSpec{});
  data::Vocabulary vocab = data::Vocabulary::standard(512);
  data::ToyImage img = sample_image(44);
  std::vector<int> ids = sample_ids(vocab, 44, 16);
  const int seq = static_cast<int>(ids.size());

  NoGradGuard no_grad;
  Tensor h_v = lm.project_visual(enc.encode(img));
  LMOutputs base = lm.forward(h_v, ids, 16);

  std::vector<double> bumped = h_v.value();
  bumped[5] += 0.5; // first visual row
  LMOutputs changed = lm.forward(Tensor::from_data(h_v.shape(), bumped), ids, 16);

  for (int i = 17; i < seq; ++i) {
    bool same = true;
    for (int j = 0; j < 512; ++j) {
      same = same && base.logits.value()[static_cast<size_t>(i) * 512 + j] ==
                         changed.logits.value()[static_cast<size_t>(i) * 512 + j];
    }
    CHECK_FALSE(same);
  }
  // BOS row sits before the perturbed visual token
  bool bos_same = true;
  for (int j = 0; j < 512; ++j) {
    bos_same = bos_same && base.logits.value()[j] == changed.logits.value()[j];
  }
  CHECK(bos_same);
}

TEST_CASE("forward enforces the length budget") {
  ModelSpec spec = teacher_spec();
  spec.max_seq = 20;
  TransformerLM lm = TransformerLM::init(spec, 19);
  Tensor h_v = Tensor::zeros({16, 128});
  std::vector<int> ids(24, 5);
  CHECK_THROWS_AS(lm.forward(h_v, ids, 16), DimensionError);
}

TEST_CASE("greedy generation is deterministic and respects max_new") {
  TransformerLM lm = TransformerLM::init(teacher_spec(), 23);
  VisualEncoder enc(VisualEncoderSpec{});
  data::Vocabulary vocab = data::Vocabulary::standard(512);
  data::ToyImage img = sample_image(55);

  std::vector<int> prompt = {vocab.bos()};
  for (int i = 0; i < 16; ++i) prompt.push_back(vocab.img());
  for (const char* w : {"how", "many", "objects"}) prompt.push_back(vocab.id(w));
  prompt.push_back(vocab.sep());

  CHECK(generate(lm, enc, img, prompt, 16, 0, vocab.eos()).empty());
  auto a = generate(lm, enc, img, prompt, 16, 8, vocab.eos());
  auto b = generate(lm, enc, img, prompt, 16, 8, vocab.eos());
  CHECK(a == b);
  CHECK(a.size() <= 8);
  CHECK_THROWS_AS(generate(lm, enc, img, {}, 16, 8, vocab.eos()), ContractError);
}

TEST_CASE("depth pruning keeps every k-th teacher layer") {
  TransformerLM teacher = TransformerLM::init(teacher_spec(), 29);
  TransformerLM student = init_student_from_teacher(teacher, 2);
  CHECK(student.spec().num_layers == 2);
  CHECK(student.spec().role == "student");
  CHECK(student.layers[0].wq.value() == teacher.layers[0].wq.value());
  CHECK(student.layers[1].wq.value() == teacher.layers[2].wq.value());
  CHECK(student.layers[1].ffn_w2.value() == teacher.layers[2].ffn_w2.value());
  CHECK(student.tok_emb.value() == teacher.tok_emb.value());
  CHECK(student.head_w.value() == teacher.head_w.value());

  ModelSpec six = teacher_spec();
  six.num_layers = 6;
  TransformerLM t6 = TransformerLM::init(six, 31);
  CHECK_THROWS_AS(init_student_from_teacher(t6, 4), ConfigError);
}

TEST_CASE("keep_every=1 is an exact functional copy") {
  TransformerLM teacher = TransformerLM::init(teacher_spec(), 37);
  TransformerLM copy = init_student_from_teacher(teacher, 1);
  VisualEncoder enc(VisualEncoderSpec{});
  data::Vocabulary vocab = data::Vocabulary::standard(512);

  NoGradGuard no_grad;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    data::ToyImage img = sample_image(seed);
    std::vector<int> ids = sample_ids(vocab, seed, 16);
    Tensor h_t = teacher.project_visual(enc.encode(img));
    Tensor h_c = copy.project_visual(enc.encode(img));
    LMOutputs a = teacher.forward(h_t, ids, 16);
    LMOutputs b = copy.forward(h_c, ids, 16);
    for (size_t i = 0; i < a.logits.value().size(); ++i) {
      CHECK(std::fabs(a.logits.value()[i] - b.logits.value()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TransformerLM lm = TransformerLM::init(student_spec(), 41);
  VisualEncoderSpec enc_spec;
  const std::string path = "/tmp/mmkd_test_model.ckpt";
  save_model(lm, enc_spec, path);
  LoadedModel back = load_model(path);
  CHECK(back.lm.spec().num_layers == 2);
  CHECK(back.lm.spec().hidden_dim == 64);
  CHECK(back.encoder_spec.seed == enc_spec.seed);
  auto a = lm.named_parameters();
  auto b = back.lm.named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.value() == b[i].second.value());
  }
  CHECK(lm.param_hash() == back.lm.param_hash());
  std::remove(path.c_str());
}

TEST_CASE("model spec validation rejects bad head splits") {
  ModelSpec spec = teacher_spec();
  spec.num_heads = 3;
  CHECK_THROWS_AS(TransformerLM::init(spec, 1), ConfigError);
  spec = teacher_spec();
  spec.role = "oracle";
  CHECK_THROWS_AS(TransformerLM::init(spec, 1), ConfigError);
}

} // TEST_SUITE("model")
