#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "alpkd/data.hpp"
#include "alpkd/errors.hpp"

using namespace alpkd;
namespace fs = std::filesystem;

namespace {

TaskSpec small(GeneratorKind kind) {
  TaskSpec s;
  s.kind = kind;
  s.train_size = 500;
  s.validation_size = 200;
  s.max_markers = 6;
  return s;
}

fs::path write_file(const std::string& name, const std::string& text) {
  const auto dir = fs::temp_directory_path() / "alpkd_test_data";
  fs::create_directories(dir);
  std::ofstream(dir / name, std::ios::binary) << text;
  return dir / name;
}

}  // namespace

TEST_CASE("parity labels match a recount of the marker") {
  const auto task = gen_parity(small(GeneratorKind::Parity));
  std::size_t ones = 0;
  std::set<std::size_t> marker_counts;
  for (const auto* d : {&task.train, &task.validation}) {
    for (const auto& ex : d->examples) {
      REQUIRE(ex.token_ids.size() == 32);
      CHECK(ex.token_ids[0] == kClsId);
      const auto count = static_cast<std::size_t>(
          std::count(ex.token_ids.begin(), ex.token_ids.end(), parity_marker()));
      CHECK(ex.label == static_cast<int>(count % 2));
      CHECK(count <= 6);
      marker_counts.insert(count);
      for (std::size_t i = 1; i < ex.token_ids.size(); ++i) {
        CHECK(ex.token_ids[i] >= kFirstContentId);
        CHECK(ex.token_ids[i] < 16);
      }
      ones += static_cast<std::size_t>(ex.label);
    }
  }
  CHECK(marker_counts.size() == 7);
  // Labels are drawn uniformly: 700 draws, 3.5 standard deviations.
  CHECK(ones > 350 - 47);
  CHECK(ones < 350 + 47);
}

TEST_CASE("majority labels match a brute-force mode") {
  auto spec = small(GeneratorKind::Majority);
  spec.num_classes = 3;
  const auto task = gen_majority(spec);
  std::vector<std::size_t> per_class(3, 0);
  for (const auto& ex : task.train.examples) {
    std::vector<std::size_t> counts(16, 0);
    for (std::size_t i = 1; i < ex.token_ids.size(); ++i) ++counts[ex.token_ids[i]];
    const auto mode = static_cast<std::int32_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    // The generator makes the mode strict, so the tie rule never fires.
    CHECK(std::count(counts.begin(), counts.end(), counts[mode]) == 1);
    CHECK(ex.label == content_class(mode, 16, 3));
    ++per_class[ex.label];
  }
  for (auto c : per_class) CHECK(c > 100);
}

TEST_CASE("majority tie-break and class buckets") {
  // 12 content ids split into 3 buckets of 4.
  CHECK(content_class(4, 16, 3) == 0);
  CHECK(content_class(7, 16, 3) == 0);
  CHECK(content_class(8, 16, 3) == 1);
  CHECK(content_class(15, 16, 3) == 2);
  // ids 9 and 14 tie; the lower id wins.
  CHECK(majority_label({kClsId, 14, 9, 14, 9}, 16, 3) == 1);
}

TEST_CASE("generation is deterministic and the splits are disjoint") {
  const auto spec = small(GeneratorKind::Parity);
  const auto a = gen_parity(spec), b = gen_parity(spec);
  REQUIRE(a.train.size() == 500);
  REQUIRE(a.validation.size() == 200);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train.examples[i].token_ids == b.train.examples[i].token_ids);
  }
  std::set<std::vector<std::int32_t>> train;
  for (const auto& ex : a.train.examples) train.insert(ex.token_ids);
  for (const auto& ex : a.validation.examples) CHECK(train.count(ex.token_ids) == 0);

  auto other = spec;
  other.seed = 8;
  CHECK(gen_parity(other).train.examples[0].token_ids != a.train.examples[0].token_ids);
}

TEST_CASE("generator configuration errors") {
  auto s = small(GeneratorKind::Parity);
  s.num_classes = 3;
  CHECK_THROWS_AS(gen_parity(s), ConfigError);
  s = small(GeneratorKind::Parity);
  s.max_markers = 40;
  CHECK_THROWS_AS(gen_parity(s), ConfigError);
  s = small(GeneratorKind::Majority);
  s.num_classes = 13;
  CHECK_THROWS_AS(gen_majority(s), ConfigError);
  s = small(GeneratorKind::Parity);
  s.seq_len = 3;
  s.vocab_size = 6;
  s.max_markers = 2;
  s.train_size = 100;  // only 2^2 distinct bodies exist
  CHECK_THROWS_AS(gen_parity(s), ConfigError);
}

TEST_CASE("TSV: header lookup, two text columns, CRLF, truncation") {
  TaskSpec s;
  s.kind = GeneratorKind::Tsv;
  s.seq_len = 6;
  s.text_columns = {"a", "b"};
  s.label_column = "y";
  s.train_path = write_file("train.tsv",
                            "id\ta\tb\ty\r\n"
                            "1\tThe cat\tsat down\tpos\r\n"
                            "2\ta dog\tran off far away\tneg\r\n"
                            "\n");
  s.validation_path = write_file("val.tsv", "y\tb\ta\tid\npos\tcat\tzebra\t3\n");
  const auto task = make_task(s);
  REQUIRE(task.train.size() == 2);
  CHECK(task.label_names == std::vector<std::string>{"neg", "pos"});
  const auto& v = *task.vocabulary;
  const auto& first = task.train.examples[0];
  CHECK(first.token_ids ==
        std::vector<std::int32_t>{kClsId, v.id("the"), v.id("cat"), kSepId, v.id("sat"), v.id("down")});
  CHECK(first.label == 1);
  // CLS + "a dog" + SEP + "ran off far away" is cut to seq_len.
  CHECK(task.train.examples[1].token_ids.size() == 6);
  // Column order in the validation file differs; unseen words map to UNK.
  CHECK(task.validation.examples[0].token_ids ==
        std::vector<std::int32_t>{kClsId, kUnkId, kSepId, v.id("cat")});
  CHECK(task.train.vocab_size == v.size());
}

TEST_CASE("TSV failures name the file and line") {
  TaskSpec s;
  s.kind = GeneratorKind::Tsv;
  s.text_columns = {"a"};
  s.label_column = "y";
  s.train_path = write_file("t1.tsv", "a\ty\nfoo\tpos\nbar\n");
  s.validation_path = write_file("v1.tsv", "a\ty\nfoo\tpos\n");
  CHECK_THROWS_WITH_AS(make_task(s), doctest::Contains("t1.tsv:3"), InputError);

  s.train_path = write_file("t2.tsv", "a\ty\nfoo\tpos\n");
  s.validation_path = write_file("v2.tsv", "a\ty\nfoo\tmaybe\n");
  CHECK_THROWS_WITH_AS(make_task(s), doctest::Contains("unknown label 'maybe'"), InputError);

  s.label_column = "label";
  CHECK_THROWS_WITH_AS(make_task(s), doctest::Contains("no column 'label'"), InputError);

  s.label_column = "y";
  s.train_path = write_file("absent_dir_marker.tsv", "");
  fs::remove(s.train_path);
  CHECK_THROWS_AS(make_task(s), IoError);
}

TEST_CASE("vocabulary reserves the special ids") {
  Vocabulary v;
  CHECK(v.size() == 4);
  CHECK(v.id("never-seen") == kUnkId);
  const auto id = v.add("word");
  CHECK(id == kFirstContentId);
  CHECK(v.add("word") == id);
  CHECK(v.token(id) == "word");
  CHECK_THROWS_AS(v.token(99), InputError);
  CHECK(tokenize("  Mixed CASE\ttabs ") == std::vector<std::string>{"mixed", "case", "tabs"});
}

TEST_CASE("batching partitions the dataset") {
  const auto task = gen_parity(small(GeneratorKind::Parity));
  for (std::optional<std::uint64_t> seed : {std::optional<std::uint64_t>{}, std::optional<std::uint64_t>{3}}) {
    const auto bs = batches(task.train, 32, seed, 1);
    CHECK(bs.size() == 16);  // 15 full batches and one of 20
    CHECK(bs.back().batch_size == 20);
    std::vector<std::size_t> seen;
    for (const auto& b : bs) {
      CHECK(b.token_ids.size() == b.batch_size * b.seq_len);
      seen.insert(seen.end(), b.indices.begin(), b.indices.end());
    }
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == i);
  }
  const auto natural = batches(task.train, 32, std::nullopt);
  CHECK(natural[0].indices[5] == 5);
  const auto e0 = batches(task.train, 32, 3, 0), e1 = batches(task.train, 32, 3, 1);
  CHECK(e0[0].indices != e1[0].indices);
  CHECK(batches(task.train, 32, 3, 1)[0].indices == e1[0].indices);
  CHECK_THROWS_AS(batches(task.train, 0, std::nullopt), ConfigError);
}

TEST_CASE("batches pad with PAD and mask it") {
  Dataset d;
  d.seq_len = 4;
  d.vocab_size = 8;
  d.num_classes = 2;
  d.examples = {{{kClsId, 5}, 1}, {{kClsId, 4, 6, 7}, 0}};
  const auto b = make_batch(d, {0, 1});
  CHECK(b.token_ids == std::vector<std::int32_t>{kClsId, 5, kPadId, kPadId, kClsId, 4, 6, 7});
  CHECK(b.mask == std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 1, 1});
  CHECK(b.labels == std::vector<int>{1, 0});
  d.examples.push_back({{kClsId, 4, 4, 4, 4}, 0});
  CHECK_THROWS_AS(make_batch(d, {2}), InputError);
}
