#include "alpkd/alignment.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "alpkd/errors.hpp"

namespace alpkd {

namespace {

std::vector<std::size_t> range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> out;
  for (std::size_t i = first; i <= last; ++i) out.push_back(i);
  return out;
}

std::size_t participating_count(std::size_t m, bool include_last) {
  return include_last ? m : (m == 0 ? 0 : m - 1);
}

// Disjoint contiguous buckets [start, end] over 1..n.
std::vector<std::pair<std::size_t, std::size_t>> equal_buckets(std::size_t n, std::size_t p) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t base = n / p, extra = n % p;
  std::size_t start = 1;
  for (std::size_t j = 0; j < p; ++j) {
    const std::size_t size = base + (j < extra ? 1 : 0);
    out.emplace_back(start, start + size - 1);
    start += size;
  }
  return out;
}

bool contiguous(const std::vector<std::size_t>& s) {
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] != s[i - 1] + 1) return false;
  }
  return true;
}

}  // namespace

const char* to_string(AlignStrategy s) {
  switch (s) {
    case AlignStrategy::PkdSkip:
      return "PKD_SKIP";
    case AlignStrategy::BucketNo:
      return "BUCKET_NO";
    case AlignStrategy::BucketPo:
      return "BUCKET_PO";
    case AlignStrategy::FullSpan:
      return "FULL_SPAN";
  }
  return "?";
}

AlignStrategy align_strategy_from_string(const std::string& s) {
  for (auto v : {AlignStrategy::PkdSkip, AlignStrategy::BucketNo, AlignStrategy::BucketPo,
                 AlignStrategy::FullSpan}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown alignment strategy '" + s + "'");
}

std::vector<std::size_t> AlignmentPlan::participating() const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < mapping.size(); ++j) {
    if (!mapping[j].empty()) out.push_back(j + 1);
  }
  return out;
}

std::string AlignmentPlan::describe() const {
  std::ostringstream os;
  os << to_string(strategy) << " n=" << teacher_layers << " m=" << student_layers << ':';
  for (std::size_t j = 0; j < mapping.size(); ++j) {
    os << " A(" << j + 1 << ")={";
    for (std::size_t i = 0; i < mapping[j].size(); ++i) os << (i ? "," : "") << mapping[j][i];
    os << '}';
  }
  return os.str();
}

AlignmentPlan make_pkd_plan(std::size_t n, std::size_t m,
                            const std::vector<std::optional<std::size_t>>& picks) {
  if (n < 1 || m < 1) throw ConfigError("PKD plan needs n, m >= 1");
  if (picks.size() != m) {
    throw ConfigError("PKD plan needs " + std::to_string(m) + " picks, got " +
                      std::to_string(picks.size()));
  }
  AlignmentPlan plan{AlignStrategy::PkdSkip, n, m, {}};
  std::optional<std::size_t> last;
  for (std::size_t j = 0; j < m; ++j) {
    if (!picks[j]) {
      plan.mapping.emplace_back();
      continue;
    }
    const auto k = *picks[j];
    if (k < 1 || k > n) {
      throw ConfigError("PKD pick " + std::to_string(k) + " for student layer " +
                        std::to_string(j + 1) + " outside 1.." + std::to_string(n));
    }
    if (last && k <= *last) throw ConfigError("PKD picks must be strictly increasing");
    last = k;
    plan.mapping.push_back({k});
  }
  return plan;
}

AlignmentPlan make_bucket_plan(std::size_t n, std::size_t m, Overlap overlap,
                               bool include_last) {
  const auto p = participating_count(m, include_last);
  if (p < 1) throw ConfigError("bucket plan needs at least one participating student layer");
  if (n < p) {
    throw ConfigError("bucket plan needs n >= participating student layers (n=" +
                      std::to_string(n) + ", participating=" + std::to_string(p) + ")");
  }
  AlignmentPlan plan{overlap == Overlap::None ? AlignStrategy::BucketNo : AlignStrategy::BucketPo,
                     n, m, {}};
  const auto buckets = equal_buckets(n, p);
  for (std::size_t j = 0; j < p; ++j) {
    auto [start, end] = buckets[j];
    // PO: each bucket also takes the first layer of its successor.
    if (overlap == Overlap::Partial && j + 1 < p) end = buckets[j + 1].first;
    plan.mapping.push_back(range(start, end));
  }
  plan.mapping.resize(m);
  return plan;
}

AlignmentPlan make_full_span_plan(std::size_t n, std::size_t m, bool include_last) {
  if (n < 1 || m < 1) throw ConfigError("full-span plan needs n, m >= 1");
  const auto p = participating_count(m, include_last);
  if (p < 1) throw ConfigError("full-span plan needs at least one participating student layer");
  AlignmentPlan plan{AlignStrategy::FullSpan, n, m, {}};
  for (std::size_t j = 0; j < p; ++j) plan.mapping.push_back(range(1, n));
  plan.mapping.resize(m);
  return plan;
}

std::string PlanValidation::summary() const {
  if (ok()) return "ok";
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    os << (i ? "; " : "") << violations[i].rule << " [";
    for (std::size_t k = 0; k < violations[i].layers.size(); ++k) {
      os << (k ? "," : "") << violations[i].layers[k];
    }
    os << ']';
  }
  return os.str();
}

PlanValidation validate(const AlignmentPlan& plan) {
  PlanValidation res;
  const auto n = plan.teacher_layers;
  if (plan.mapping.size() != plan.student_layers) {
    res.violations.push_back({"mapping length differs from student layer count",
                              {plan.mapping.size(), plan.student_layers}});
  }
  for (std::size_t j = 0; j < plan.mapping.size(); ++j) {
    const auto& a = plan.mapping[j];
    for (auto k : a) {
      if (k < 1 || k > n) res.violations.push_back({"teacher index out of range", {j + 1, k}});
    }
    if (!std::is_sorted(a.begin(), a.end()) ||
        std::adjacent_find(a.begin(), a.end()) != a.end()) {
      res.violations.push_back({"A(j) not strictly ascending", {j + 1}});
    }
  }
  const auto active = plan.participating();
  if (active.empty()) res.violations.push_back({"no participating student layer", {}});

  if (plan.strategy == AlignStrategy::PkdSkip) {
    for (std::size_t j = 0; j < plan.mapping.size(); ++j) {
      if (plan.mapping[j].size() > 1) {
        res.violations.push_back({"PKD_SKIP maps a student layer to several teacher layers",
                                  {j + 1}});
      }
    }
    res.notes.push_back("PKD_SKIP is exempt from the teacher-coverage rule");
    return res;
  }

  std::set<std::size_t> covered;
  for (auto j : active) covered.insert(plan.at(j).begin(), plan.at(j).end());
  std::vector<std::size_t> missing;
  for (std::size_t k = 1; k <= n; ++k) {
    if (!covered.count(k)) missing.push_back(k);
  }
  if (!missing.empty()) {
    res.violations.push_back({"union of A(j) does not cover every teacher layer", missing});
  }

  switch (plan.strategy) {
    case AlignStrategy::BucketNo:
    case AlignStrategy::BucketPo:
      for (auto j : active) {
        if (!contiguous(plan.at(j))) res.violations.push_back({"bucket not contiguous", {j}});
      }
      for (std::size_t i = 1; i < active.size(); ++i) {
        const auto& prev = plan.at(active[i - 1]);
        const auto& cur = plan.at(active[i]);
        std::vector<std::size_t> shared;
        std::set_intersection(prev.begin(), prev.end(), cur.begin(), cur.end(),
                              std::back_inserter(shared));
        if (plan.strategy == AlignStrategy::BucketNo && !shared.empty()) {
          res.violations.push_back({"buckets not disjoint", shared});
        }
        if (plan.strategy == AlignStrategy::BucketPo &&
            (shared.size() != 1 || shared[0] != prev.back() || shared[0] != cur.front())) {
          res.violations.push_back(
              {"consecutive buckets must share exactly their boundary layer",
               {active[i - 1], active[i]}});
        }
      }
      if (plan.strategy == AlignStrategy::BucketNo) {
        // Non-consecutive buckets must not overlap either.
        for (std::size_t a = 0; a < active.size(); ++a) {
          for (std::size_t b = a + 2; b < active.size(); ++b) {
            const auto& x = plan.at(active[a]);
            const auto& y = plan.at(active[b]);
            std::vector<std::size_t> shared;
            std::set_intersection(x.begin(), x.end(), y.begin(), y.end(),
                                  std::back_inserter(shared));
            if (!shared.empty()) res.violations.push_back({"buckets not disjoint", shared});
          }
        }
      }
      break;
    case AlignStrategy::FullSpan:
      for (auto j : active) {
        if (plan.at(j).size() != n) {
          res.violations.push_back({"FULL_SPAN layer does not attend every teacher layer", {j}});
        }
      }
      break;
    case AlignStrategy::PkdSkip:
      break;
  }
  return res;
}

}  // namespace alpkd
