#include "alpkd/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"

namespace alpkd {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

void finish_csv(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<Batch> example_batches(const Dataset& data, std::span<const std::size_t> ids) {
  std::vector<Batch> out;
  constexpr std::size_t kChunk = 256;
  for (std::size_t lo = 0; lo < ids.size(); lo += kChunk) {
    const auto hi = std::min(ids.size(), lo + kChunk);
    for (std::size_t i = lo; i < hi; ++i) {
      if (ids[i] >= data.size()) {
        throw InputError("example id " + std::to_string(ids[i]) + " outside dataset of " +
                         std::to_string(data.size()));
      }
    }
    out.push_back(make_batch(data, std::vector<std::size_t>(ids.begin() + lo, ids.begin() + hi)));
  }
  return out;
}

}  // namespace

void AttentionDump::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "example_id,j,k,alpha\n";
  for (const auto& r : rows) {
    os << r.example_id << ',' << r.j << ',' << r.k << ',' << fmt(r.alpha) << '\n';
  }
  finish_csv(os, path);
}

AttentionDump dump_attention(const Encoder& student, const Encoder& teacher,
                             const AlignmentPlan& plan, const FusionMethod& fusion,
                             const Dataset& data, std::span<const std::size_t> example_ids,
                             std::size_t j) {
  if (!fusion.has_weights()) {
    throw ConfigError("no attention weights for concatenation fusion");
  }
  if (plan.strategy == AlignStrategy::PkdSkip) {
    throw ConfigError("no attention weights for a PKD_SKIP plan");
  }
  if (j < 1 || j > plan.student_layers || plan.at(j).empty()) {
    throw ConfigError("student layer " + std::to_string(j) + " takes no hidden-state loss");
  }
  NoGradGuard guard;
  AttentionDump dump;
  const auto& set = plan.at(j);
  for (const auto& batch : example_batches(data, example_ids)) {
    const auto s_out = student.forward(batch, false);
    const auto t_out = teacher.forward(batch, false);
    std::vector<Tensor> states;
    for (auto k : set) states.push_back(t_out.hidden_states.at(k - 1));
    const auto fr = fusion.fuse(j, s_out.hidden_states.at(j - 1), states);
    const auto w = fr.weights.data();
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
      for (std::size_t c = 0; c < set.size(); ++c) {
        dump.rows.push_back({batch.indices[r], j, set[c], w[r * set.size() + c]});
      }
    }
  }
  return dump;
}

std::vector<Tensor> collect_cls(const Encoder& model, const Dataset& data,
                                std::span<const std::size_t> example_ids) {
  NoGradGuard guard;
  const auto layers = model.num_layers();
  const auto d = model.config().hidden_dim;
  std::vector<std::vector<double>> acc(layers);
  for (const auto& batch : example_batches(data, example_ids)) {
    const auto out = model.forward(batch, false);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto src = out.hidden_states[l].data();
      acc[l].insert(acc[l].end(), src.begin(), src.end());
    }
  }
  std::vector<Tensor> result;
  for (auto& a : acc) result.push_back(Tensor::from({example_ids.size(), d}, std::move(a)));
  return result;
}

SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double tol,
                            std::size_t max_sweeps) {
  if (a.size() != n * n) throw DimensionError("jacobi_eigen: matrix is not n x n");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };
  double scale = 0.0;
  for (double x : a) scale += x * x;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    if (off <= tol * tol * scale || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return at(x, x) > at(y, y); });
  SymmetricEigen out;
  for (auto i : order) {
    out.values.push_back(at(i, i));
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = v[k * n + i];
    std::size_t big = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (std::abs(vec[k]) > std::abs(vec[big])) big = k;
    }
    if (vec[big] < 0) {
      for (auto& x : vec) x = -x;
    }
    out.vectors.push_back(std::move(vec));
  }
  return out;
}

void ProjectionReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "tag,example_id,pc1,pc2\n";
  for (const auto& r : rows) {
    os << r.tag << ',' << r.example_id << ',' << fmt(r.pc1) << ',' << fmt(r.pc2) << '\n';
  }
  finish_csv(os, path);
}

ProjectionReport pca_project(std::span<const TaggedStates> sets) {
  if (sets.empty()) throw InputError("pca_project: no state sets");
  const auto& first = sets.front().states;
  if (first.rank() != 2) throw DimensionError("pca_project: states must be [count, d]");
  const auto d = first.dim(1);
  std::size_t total = 0;
  for (const auto& s : sets) {
    if (s.states.rank() != 2 || s.states.dim(1) != d ||
        s.states.dim(0) != s.example_ids.size()) {
      throw DimensionError("pca_project: tag '" + s.tag + "' has shape " +
                           shape_str(s.states.shape()) + " for " +
                           std::to_string(s.example_ids.size()) + " examples");
    }
    total += s.example_ids.size();
  }
  if (total < 3) throw InputError("pca_project needs at least 3 states");
  if (d < 2) throw InputError("pca_project needs d >= 2");

  std::vector<double> mean(d, 0.0);
  for (const auto& s : sets) {
    const auto x = s.states.data();
    for (std::size_t r = 0; r < s.example_ids.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += x[r * d + c];
  }
  for (auto& m : mean) m /= static_cast<double>(total);
  std::vector<double> cov(d * d, 0.0);
  std::vector<double> row(d);
  for (const auto& s : sets) {
    const auto x = s.states.data();
    for (std::size_t r = 0; r < s.example_ids.size(); ++r) {
      for (std::size_t c = 0; c < d; ++c) row[c] = x[r * d + c] - mean[c];
      for (std::size_t p = 0; p < d; ++p)
        for (std::size_t q = p; q < d; ++q) cov[p * d + q] += row[p] * row[q];
    }
  }
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = p; q < d; ++q) {
      cov[p * d + q] /= static_cast<double>(total - 1);
      cov[q * d + p] = cov[p * d + q];
    }
  }
  const auto eig = jacobi_eigen(cov, d);
  ProjectionReport report;
  double trace = 0.0;
  for (double v : eig.values) trace += std::max(v, 0.0);
  const double noise = 1e-12 * std::max(trace, 1e-300);
  std::size_t nonzero = 0;
  for (double v : eig.values) nonzero += v > noise ? 1 : 0;
  report.degenerate = nonzero < 2;
  for (std::size_t i = 0; i < 2; ++i) {
    report.components[i] = eig.vectors[i];
    report.explained_variance[i] = trace > 0 ? std::max(eig.values[i], 0.0) / trace : 0.0;
  }
  for (const auto& s : sets) {
    const auto x = s.states.data();
    for (std::size_t r = 0; r < s.example_ids.size(); ++r) {
      double pc[2] = {0.0, 0.0};
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t c = 0; c < d; ++c)
          pc[i] += (x[r * d + c] - mean[c]) * report.components[i][c];
      report.rows.push_back({s.tag, s.example_ids[r], pc[0], pc[1]});
    }
  }
  return report;
}

std::string LayerPair::label() const {
  return "s" + std::to_string(student) + "-t" + std::to_string(teacher);
}

double CosineReport::mean(const std::string& pair) const {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& r : rows) {
    if (r.pair == pair) {
      total += r.distance;
      ++count;
    }
  }
  if (count == 0) throw InputError("no cosine rows for pair " + pair);
  return total / static_cast<double>(count);
}

void CosineReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "example_id,pair,distance,zero_norm\n";
  for (const auto& r : rows) {
    os << r.example_id << ',' << r.pair << ',' << fmt(r.distance) << ',' << (r.zero_norm ? 1 : 0)
       << '\n';
  }
  finish_csv(os, path);
}

double cosine_distance(std::span<const double> u, std::span<const double> v, bool* zero_norm) {
  if (u.size() != v.size()) throw DimensionError("cosine_distance: length mismatch");
  constexpr double kEps = 1e-12;
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  const bool guarded = nu < kEps || nv < kEps;
  if (zero_norm) *zero_norm = guarded;
  const double cos = dot / (std::max(nu, kEps) * std::max(nv, kEps));
  return 1.0 - std::clamp(cos, -1.0, 1.0);
}

CosineReport cosine_distance_report(std::span<const Tensor> student_cls,
                                    std::span<const Tensor> teacher_cls,
                                    std::span<const LayerPair> pairs,
                                    std::span<const std::size_t> example_ids) {
  CosineReport report;
  for (const auto& p : pairs) {
    if (p.student < 1 || p.student > student_cls.size() || p.teacher < 1 ||
        p.teacher > teacher_cls.size()) {
      throw ConfigError("layer pair " + p.label() + " out of range");
    }
    const auto& s = student_cls[p.student - 1];
    const auto& t = teacher_cls[p.teacher - 1];
    if (s.shape() != t.shape() || s.rank() != 2 || s.dim(0) != example_ids.size()) {
      throw DimensionError("cosine report: student " + shape_str(s.shape()) + " vs teacher " +
                           shape_str(t.shape()) + " for " + std::to_string(example_ids.size()) +
                           " examples");
    }
    const auto d = s.dim(1);
    const auto label = p.label();
    for (std::size_t r = 0; r < example_ids.size(); ++r) {
      CosineRow row;
      row.example_id = example_ids[r];
      row.pair = label;
      row.distance = cosine_distance(s.data().subspan(r * d, d), t.data().subspan(r * d, d),
                                     &row.zero_norm);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

std::vector<LayerPair> default_cosine_pairs(std::size_t n, std::size_t m) {
  const auto plan = make_bucket_plan(n, m, Overlap::None);
  std::vector<LayerPair> pairs;
  for (auto j : plan.participating()) pairs.push_back({j, plan.at(j).front()});
  return pairs;
}

std::vector<std::size_t> sample_examples(std::size_t size, std::size_t count,
                                         std::uint64_t seed) {
  if (count > size) {
    throw ConfigError("cannot sample " + std::to_string(count) + " examples from " +
                      std::to_string(size));
  }
  std::vector<std::size_t> ids(size);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> dist(i, size - 1);
    std::swap(ids[i], ids[dist(rng)]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace alpkd
