#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "alpkd/alignment.hpp"
#include "alpkd/errors.hpp"

using namespace alpkd;
using Layers = std::vector<std::size_t>;

namespace {

AlignmentPlan literal(AlignStrategy s, std::size_t n, std::vector<Layers> mapping) {
  AlignmentPlan p;
  p.strategy = s;
  p.teacher_layers = n;
  p.student_layers = mapping.size();
  p.mapping = std::move(mapping);
  return p;
}

bool covers_teacher(const AlignmentPlan& plan) {
  std::set<std::size_t> seen;
  for (auto j : plan.participating()) seen.insert(plan.at(j).begin(), plan.at(j).end());
  return seen.size() == plan.teacher_layers && *seen.begin() == 1 &&
         *seen.rbegin() == plan.teacher_layers;
}

}  // namespace

TEST_CASE("published 12 -> 4 layouts") {
  const auto pkd = literal(AlignStrategy::PkdSkip, 12, {{1}, {5}, {9}, {}});
  const auto no = literal(AlignStrategy::BucketNo, 12,
                          {{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {}});
  const auto po = literal(AlignStrategy::BucketPo, 12,
                          {{1, 2, 3, 4, 5}, {5, 6, 7, 8, 9}, {9, 10, 11, 12}, {}});
  CHECK(validate(pkd).ok());
  CHECK(validate(no).ok());
  CHECK(validate(po).ok());

  // The constructors reproduce them.
  CHECK(make_bucket_plan(12, 4, Overlap::None).mapping == no.mapping);
  CHECK(make_bucket_plan(12, 4, Overlap::Partial).mapping == po.mapping);
  CHECK(make_pkd_plan(12, 4, {1, 5, 9, std::nullopt}).mapping == pkd.mapping);
}

TEST_CASE("remainder goes to the earlier buckets") {
  const auto plan = make_bucket_plan(7, 4, Overlap::None);
  CHECK(plan.mapping == std::vector<Layers>{{1, 2, 3}, {4, 5}, {6, 7}, {}});
  const auto with_last = make_bucket_plan(6, 4, Overlap::None, true);
  CHECK(with_last.mapping == std::vector<Layers>{{1, 2}, {3, 4}, {5}, {6}});
}

TEST_CASE("full span attends every teacher layer") {
  const auto plan = make_full_span_plan(4, 2);
  CHECK(plan.mapping == std::vector<Layers>{{1, 2, 3, 4}, {}});
  CHECK(plan.participating() == Layers{1});
  const auto all = make_full_span_plan(3, 3, true);
  CHECK(all.participating() == Layers{1, 2, 3});
}

TEST_CASE("every constructor output validates and covers the teacher") {
  for (std::size_t n = 1; n <= 12; ++n) {
    for (std::size_t m = 1; m <= 6; ++m) {
      for (bool last : {false, true}) {
        const auto p = (last ? m : m - 1);
        CAPTURE(n);
        CAPTURE(m);
        CAPTURE(last);
        if (p < 1) {
          CHECK_THROWS_AS(make_full_span_plan(n, m, last), ConfigError);
          CHECK_THROWS_AS(make_bucket_plan(n, m, Overlap::None, last), ConfigError);
          continue;
        }
        const auto full = make_full_span_plan(n, m, last);
        CHECK(validate(full).ok());
        CHECK(covers_teacher(full));
        if (n < p) {
          CHECK_THROWS_AS(make_bucket_plan(n, m, Overlap::None, last), ConfigError);
          continue;
        }
        for (auto ov : {Overlap::None, Overlap::Partial}) {
          const auto plan = make_bucket_plan(n, m, ov, last);
          INFO(plan.describe(), " ", validate(plan).summary());
          CHECK(validate(plan).ok());
          CHECK(covers_teacher(plan));
          CHECK(plan.participating().size() == p);
        }
      }
    }
  }
}

TEST_CASE("validation rejects broken plans") {
  SUBCASE("gap in coverage") {
    const auto v = validate(literal(AlignStrategy::BucketNo, 6, {{1, 2}, {4, 5, 6}, {}}));
    REQUIRE_FALSE(v.ok());
    CHECK(v.violations[0].layers == Layers{3});
  }
  SUBCASE("overlapping NO buckets") {
    CHECK_FALSE(validate(literal(AlignStrategy::BucketNo, 4, {{1, 2, 3}, {3, 4}})).ok());
  }
  SUBCASE("PO buckets sharing two layers") {
    CHECK_FALSE(validate(literal(AlignStrategy::BucketPo, 4, {{1, 2, 3}, {2, 3, 4}})).ok());
  }
  SUBCASE("PO buckets sharing nothing") {
    CHECK_FALSE(validate(literal(AlignStrategy::BucketPo, 4, {{1, 2}, {3, 4}})).ok());
  }
  SUBCASE("non-contiguous bucket") {
    CHECK_FALSE(validate(literal(AlignStrategy::BucketNo, 3, {{1, 3}, {2}})).ok());
  }
  SUBCASE("full span missing a layer") {
    CHECK_FALSE(validate(literal(AlignStrategy::FullSpan, 3, {{1, 2}, {}})).ok());
  }
  SUBCASE("out of range teacher index") {
    CHECK_FALSE(validate(literal(AlignStrategy::PkdSkip, 3, {{4}})).ok());
  }
  SUBCASE("unsorted set") {
    CHECK_FALSE(validate(literal(AlignStrategy::FullSpan, 2, {{2, 1}})).ok());
  }
  SUBCASE("PKD with several layers per student layer") {
    CHECK_FALSE(validate(literal(AlignStrategy::PkdSkip, 4, {{1, 2}, {}})).ok());
  }
  SUBCASE("nothing participates") {
    CHECK_FALSE(validate(literal(AlignStrategy::PkdSkip, 4, {{}, {}})).ok());
  }
}

TEST_CASE("PKD skip plans are exempt from coverage") {
  const auto plan = make_pkd_plan(12, 3, {2, 7, std::nullopt});
  const auto v = validate(plan);
  CHECK(v.ok());
  CHECK_FALSE(v.notes.empty());
  CHECK_THROWS_AS(make_pkd_plan(4, 2, {3, 2}), ConfigError);
  CHECK_THROWS_AS(make_pkd_plan(4, 2, {1, 5}), ConfigError);
  CHECK_THROWS_AS(make_pkd_plan(4, 2, {1}), ConfigError);
}

TEST_CASE("strategy names round-trip") {
  for (auto s : {AlignStrategy::PkdSkip, AlignStrategy::BucketNo, AlignStrategy::BucketPo,
                 AlignStrategy::FullSpan}) {
    CHECK(align_strategy_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(align_strategy_from_string("diagonal"), ConfigError);
}
