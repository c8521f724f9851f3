#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "alpkd/encoder.hpp"
#include "alpkd/errors.hpp"
#include "alpkd/losses.hpp"
#include "support.hpp"

using namespace alpkd;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny(std::size_t layers = 1) {
  EncoderConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 12;
  c.vocab_size = 10;
  c.max_seq_len = 6;
  c.num_classes = 3;
  return c;
}

Batch tiny_batch() {
  Dataset d;
  d.vocab_size = 10;
  d.num_classes = 3;
  d.seq_len = 5;
  d.examples = {{{kClsId, 4, 5, 9, 6}, 0}, {{kClsId, 7, 4}, 2}, {{kClsId, 8, 8, 5}, 1}};
  return make_batch(d, {0, 1, 2});
}

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "alpkd_test_encoder";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("full 1-layer encoder passes central finite differences") {
  const Encoder enc(tiny(), 3);
  const auto batch = tiny_batch();
  // Logits through CE plus a weighted readout of every CLS state, so both
  // the classifier and the hidden-state path carry gradient.
  auto f = [&] {
    const auto out = enc.forward(batch, false);
    auto loss = ce_loss(out.logits, batch.labels);
    for (const auto& h : out.hidden_states) loss = ops::add(loss, alpkd::testing::weighted_sum(h));
    return loss;
  };
  const auto gc = alpkd::testing::check_gradients(enc.parameters(), f);
  INFO(gc.worst);
  CHECK(gc.max_rel_error <= 1e-4);
  CHECK(gc.checked > 500);
}

TEST_CASE("forward shapes and padding invariance") {
  const Encoder enc(tiny(2), 5);
  const auto batch = tiny_batch();
  const auto out = enc.forward(batch, false);
  REQUIRE(out.hidden_states.size() == 2);
  CHECK(out.hidden_states[0].shape() == Shape{3, 8});
  CHECK(out.sequence_states[1].shape() == Shape{3, 5, 8});
  CHECK(out.logits.shape() == Shape{3, 3});

  // Example 1 alone, padded to its own length, gives the same logits.
  Dataset d;
  d.vocab_size = 10;
  d.num_classes = 3;
  d.seq_len = 3;
  d.examples = {{{kClsId, 7, 4}, 2}};
  const auto alone = enc.forward(make_batch(d, {0}), false);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(alone.logits.at(c) == doctest::Approx(out.logits.at(3 + c)).epsilon(1e-12));
  }
}

TEST_CASE("initialization is seeded") {
  const Encoder a(tiny(), 11), b(tiny(), 11), c(tiny(), 12);
  CHECK(parameter_hash(a) == parameter_hash(b));
  CHECK(parameter_hash(a) != parameter_hash(c));
}

TEST_CASE("configuration validation") {
  auto c = tiny();
  c.num_heads = 3;
  CHECK_THROWS_AS(Encoder(c, 1), ConfigError);
  c = tiny();
  c.num_layers = 0;
  CHECK_THROWS_AS(Encoder(c, 1), ConfigError);
  c = tiny();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(Encoder(c, 1), ConfigError);
}

TEST_CASE("sequences longer than max_seq_len and bad ids are rejected") {
  const Encoder enc(tiny(), 1);
  Dataset d;
  d.vocab_size = 10;
  d.num_classes = 3;
  d.seq_len = 7;
  d.examples = {{{kClsId, 4, 4, 4, 4, 4, 4}, 0}};
  CHECK_THROWS(enc.forward(make_batch(d, {0}), false));
  d.seq_len = 3;
  d.examples = {{{kClsId, 4, 12}, 0}};
  CHECK_THROWS_AS(enc.forward(make_batch(d, {0}), false), InputError);
}

TEST_CASE("dropout only in train mode") {
  auto c = tiny();
  c.dropout_rate = 0.3;
  const Encoder enc(c, 2);
  const auto batch = tiny_batch();
  const auto e1 = enc.forward(batch, false);
  const auto e2 = enc.forward(batch, false);
  CHECK(alpkd::testing::values(e1.logits) == alpkd::testing::values(e2.logits));
  std::mt19937_64 rng(1);
  const auto t = enc.forward(batch, true, &rng);
  CHECK(alpkd::testing::values(t.logits) != alpkd::testing::values(e1.logits));
}

TEST_CASE("student initialization copies the first m teacher layers") {
  const Encoder teacher(tiny(4), 9);
  const auto student = init_student_from_teacher(teacher, 2);
  CHECK(student.num_layers() == 2);
  CHECK(student.config().num_layers == 2);
  CHECK(alpkd::testing::values(student.layers()[1].w1) ==
        alpkd::testing::values(teacher.layers()[1].w1));
  // Value copies: training the student leaves the teacher alone.
  Tensor wq = student.layers()[0].wq;
  wq.data()[0] += 1.0;
  CHECK(teacher.layers()[0].wq.at(0) != student.layers()[0].wq.at(0));
  CHECK_THROWS_AS(init_student_from_teacher(teacher, 5), ConfigError);
  CHECK_THROWS_AS(init_student_from_teacher(teacher, 0), ConfigError);

  // With m = n the student computes exactly what the teacher does.
  const auto same = init_student_from_teacher(teacher, 4);
  const auto batch = tiny_batch();
  CHECK(alpkd::testing::values(same.forward(batch, false).logits) ==
        alpkd::testing::values(teacher.forward(batch, false).logits));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const Encoder enc(tiny(2), 21);
  const auto path = temp_file("round.ckpt");
  save_checkpoint(enc, path);
  const auto back = load_checkpoint(path);
  CHECK(back.config() == enc.config());
  CHECK(parameter_hash(back) == parameter_hash(enc));
  const auto batch = tiny_batch();
  CHECK(alpkd::testing::values(back.forward(batch, false).logits) ==
        alpkd::testing::values(enc.forward(batch, false).logits));
  CHECK_NOTHROW(load_checkpoint(path, enc.config()));
}

TEST_CASE("damaged or mismatched checkpoints fail loudly") {
  const Encoder enc(tiny(2), 21);
  const auto path = temp_file("damaged.ckpt");
  save_checkpoint(enc, path);
  const auto full = fs::file_size(path);

  SUBCASE("truncated payload") {
    fs::resize_file(path, full - 8);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("trailing bytes") {
    std::ofstream(path, std::ios::app | std::ios::binary) << "x";
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('Z');
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("config mismatch") {
    auto other = enc.config();
    other.hidden_dim = 16;
    CHECK_THROWS_AS(load_checkpoint(path, other), ConfigError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_file("absent.ckpt")), IoError);
  }
}
