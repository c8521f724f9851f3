#pragma once

// Layer alignment: which teacher layers each student layer distills from.
// All layer indices are 1-based, matching how layers are usually named.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace alpkd {

enum class AlignStrategy { PkdSkip, BucketNo, BucketPo, FullSpan };

const char* to_string(AlignStrategy s);
AlignStrategy align_strategy_from_string(const std::string& s);

enum class Overlap { None, Partial };

struct AlignmentPlan {
  AlignStrategy strategy = AlignStrategy::PkdSkip;
  std::size_t teacher_layers = 0;  // n
  std::size_t student_layers = 0;  // m
  // mapping[j-1] = A(j), ascending; empty means student layer j takes no
  // hidden-state loss.
  std::vector<std::vector<std::size_t>> mapping;

  const std::vector<std::size_t>& at(std::size_t j) const { return mapping.at(j - 1); }
  // 1-based student layers with a nonempty A(j).
  std::vector<std::size_t> participating() const;
  std::string describe() const;
};

// picks[j-1] is the teacher layer for student layer j, or nullopt.
AlignmentPlan make_pkd_plan(std::size_t n, std::size_t m,
                            const std::vector<std::optional<std::size_t>>& picks);
// Teacher layers split into equal contiguous buckets, earlier buckets taking
// the remainder. The last student layer is left out unless include_last.
AlignmentPlan make_bucket_plan(std::size_t n, std::size_t m, Overlap overlap,
                               bool include_last = false);
AlignmentPlan make_full_span_plan(std::size_t n, std::size_t m, bool include_last = false);

struct PlanViolation {
  std::string rule;
  std::vector<std::size_t> layers;
};

struct PlanValidation {
  std::vector<PlanViolation> violations;
  std::vector<std::string> notes;
  bool ok() const { return violations.empty(); }
  std::string summary() const;
};

PlanValidation validate(const AlignmentPlan& plan);

}  // namespace alpkd
