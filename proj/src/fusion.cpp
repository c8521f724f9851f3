#include "alpkd/fusion.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "alpkd/encoder.hpp"
#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"

namespace alpkd {

namespace {

constexpr char kFusionMagic[] = "ALPKDFUS1\n";

void check_states(const char* op, std::span<const Tensor> states, std::size_t rows,
                  std::size_t d) {
  if (states.empty()) {
    throw ConfigError(std::string(op) + ": empty teacher set (skip layers with empty A(j))");
  }
  for (const auto& s : states) {
    if (s.rank() != 2 || s.dim(0) != rows || s.dim(1) != d) {
      throw DimensionError(std::string(op) + ": teacher state shape " + shape_str(s.shape()) +
                           " does not match [" + std::to_string(rows) + "," +
                           std::to_string(d) + "]");
    }
  }
}

Tensor weighted_sum(const Tensor& alpha, std::span<const Tensor> values) {
  Tensor fused;
  for (std::size_t k = 0; k < values.size(); ++k) {
    Tensor term = ops::mul_col(values[k], ops::slice_cols(alpha, k, k + 1));
    fused = fused.defined() ? ops::add(fused, term) : term;
  }
  return fused;
}

Tensor uniform_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(rows * cols);
  for (auto& v : data) v = dist(rng);
  return Tensor::from({rows, cols}, std::move(data), true);
}

void fill_identity(Tensor& t) {
  auto data = t.data();
  std::fill(data.begin(), data.end(), 0.0);
  const auto cols = t.dim(1);
  for (std::size_t i = 0; i < cols && i < t.dim(0); ++i) data[i * cols + i] = 1.0;
}

}  // namespace

const char* to_string(FusionKind k) {
  switch (k) {
    case FusionKind::AlpDot:
      return "ALP_DOT";
    case FusionKind::AlpKqv:
      return "ALP_KQV";
    case FusionKind::CkdConcat:
      return "CKD_CONCAT";
  }
  return "?";
}

FusionResult alp_fuse(const Tensor& student_state, std::span<const Tensor> teacher_states) {
  if (student_state.rank() != 2) {
    throw DimensionError("alp_fuse: student state must be [batch,d], got " +
                         shape_str(student_state.shape()));
  }
  check_states("alp_fuse", teacher_states, student_state.dim(0), student_state.dim(1));
  std::vector<Tensor> logits;
  logits.reserve(teacher_states.size());
  for (const auto& t : teacher_states) logits.push_back(ops::row_dot(student_state, t));
  Tensor alpha = ops::softmax(ops::concat(logits, 1), 1);
  return {weighted_sum(alpha, teacher_states), alpha};
}

FusionResult kqv_fuse(const Tensor& student_state, std::span<const Tensor> teacher_states,
                      const KqvParams& params, std::size_t num_heads) {
  if (student_state.rank() != 2) {
    throw DimensionError("kqv_fuse: student state must be [batch,d], got " +
                         shape_str(student_state.shape()));
  }
  const auto rows = student_state.dim(0), d = student_state.dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw ConfigError("kqv_fuse: dimension " + std::to_string(d) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  check_states("kqv_fuse", teacher_states, rows, d);
  const auto dh = d / num_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor query = ops::matmul(student_state, params.wq);
  std::vector<Tensor> keys, values;
  for (const auto& t : teacher_states) {
    keys.push_back(ops::matmul(t, params.wk));
    values.push_back(ops::matmul(t, params.wv));
  }
  std::vector<Tensor> head_out;
  Tensor alpha_sum;
  for (std::size_t h = 0; h < num_heads; ++h) {
    const auto lo = h * dh, hi = lo + dh;
    Tensor qh = ops::slice_cols(query, lo, hi);
    std::vector<Tensor> logits, vh;
    for (std::size_t k = 0; k < keys.size(); ++k) {
      logits.push_back(ops::row_dot(qh, ops::slice_cols(keys[k], lo, hi)));
      vh.push_back(ops::slice_cols(values[k], lo, hi));
    }
    Tensor alpha = ops::softmax(ops::scale(ops::concat(logits, 1), sc), 1);
    head_out.push_back(weighted_sum(alpha, vh));
    alpha_sum = alpha_sum.defined() ? ops::add(alpha_sum, alpha) : alpha;
  }
  Tensor fused = num_heads == 1 ? head_out[0] : ops::concat(head_out, 1);
  Tensor weights =
      num_heads == 1 ? alpha_sum : ops::scale(alpha_sum, 1.0 / static_cast<double>(num_heads));
  return {fused, weights};
}

FusionResult ckd_fuse(std::span<const Tensor> teacher_states, const Tensor& projection) {
  if (teacher_states.empty()) throw ConfigError("ckd_fuse: empty teacher set");
  const auto d = teacher_states[0].rank() == 2 ? teacher_states[0].dim(1) : 0;
  check_states("ckd_fuse", teacher_states, teacher_states[0].dim(0), d);
  if (projection.rank() != 2 || projection.dim(0) != teacher_states.size() * d) {
    throw ConfigError("ckd_fuse: projection " + shape_str(projection.shape()) +
                      " does not take width " + std::to_string(teacher_states.size() * d));
  }
  Tensor cat = teacher_states.size() == 1 ? teacher_states[0] : ops::concat(teacher_states, 1);
  return {ops::matmul(cat, projection), Tensor()};
}

FusionMethod FusionMethod::dot() { return FusionMethod(); }

FusionMethod FusionMethod::kqv(const AlignmentPlan& plan, std::size_t hidden_dim,
                               std::size_t num_heads, std::uint64_t seed) {
  if (num_heads == 0 || hidden_dim % num_heads != 0) {
    throw ConfigError("KQV fusion: hidden_dim " + std::to_string(hidden_dim) +
                      " not divisible by " + std::to_string(num_heads) + " heads");
  }
  FusionMethod m;
  m.kind_ = FusionKind::AlpKqv;
  m.num_heads_ = num_heads;
  m.hidden_dim_ = hidden_dim;
  m.kqv_.resize(plan.student_layers);
  m.projections_.resize(plan.student_layers);
  std::mt19937_64 rng(seed);
  for (auto j : plan.participating()) {
    m.kqv_[j - 1] = KqvParams{uniform_matrix(hidden_dim, hidden_dim, rng),
                              uniform_matrix(hidden_dim, hidden_dim, rng),
                              uniform_matrix(hidden_dim, hidden_dim, rng)};
  }
  return m;
}

FusionMethod FusionMethod::ckd(const AlignmentPlan& plan, std::size_t hidden_dim,
                               std::uint64_t seed) {
  FusionMethod m;
  m.kind_ = FusionKind::CkdConcat;
  m.hidden_dim_ = hidden_dim;
  m.kqv_.resize(plan.student_layers);
  m.projections_.resize(plan.student_layers);
  std::mt19937_64 rng(seed);
  for (auto j : plan.participating()) {
    m.projections_[j - 1] = uniform_matrix(plan.at(j).size() * hidden_dim, hidden_dim, rng);
  }
  return m;
}

FusionResult FusionMethod::fuse(std::size_t j, const Tensor& student_state,
                                std::span<const Tensor> teacher_states) const {
  switch (kind_) {
    case FusionKind::AlpDot:
      return alp_fuse(student_state, teacher_states);
    case FusionKind::AlpKqv: {
      if (j < 1 || j > kqv_.size() || !kqv_[j - 1]) {
        throw ConfigError("KQV fusion has no parameters for student layer " + std::to_string(j));
      }
      return kqv_fuse(student_state, teacher_states, *kqv_[j - 1], num_heads_);
    }
    case FusionKind::CkdConcat: {
      if (j < 1 || j > projections_.size() || !projections_[j - 1].defined()) {
        throw ConfigError("CKD fusion has no projection for student layer " + std::to_string(j));
      }
      return ckd_fuse(teacher_states, projections_[j - 1]);
    }
  }
  throw ConfigError("unknown fusion kind");
}

std::vector<Tensor> FusionMethod::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : kqv_) {
    if (p) out.insert(out.end(), {p->wq, p->wk, p->wv});
  }
  for (const auto& p : projections_) {
    if (p.defined()) out.push_back(p);
  }
  return out;
}

void FusionMethod::set_identity() {
  for (auto& t : parameters()) {
    Tensor copy = t;
    fill_identity(copy);
  }
}

void FusionMethod::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write fusion parameters " + path.string());
  os << kFusionMagic << to_string(kind_) << ' ' << num_heads_ << ' ' << hidden_dim_ << '\n';
  for (const auto& t : parameters()) write_f64_le(os, t.data());
  if (!os) throw IoError("failed writing fusion parameters " + path.string());
}

void FusionMethod::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open fusion parameters " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t magic_len = sizeof(kFusionMagic) - 1;
  if (bytes.compare(0, magic_len, kFusionMagic) != 0) {
    throw FormatError("bad fusion parameter magic", 0);
  }
  const auto nl = bytes.find('\n', magic_len);
  if (nl == std::string::npos) throw FormatError("unterminated fusion header", magic_len);
  std::istringstream header(bytes.substr(magic_len, nl - magic_len));
  std::string kind;
  std::size_t heads = 0, dim = 0;
  header >> kind >> heads >> dim;
  if (kind != to_string(kind_) || heads != num_heads_ || dim != hidden_dim_) {
    throw ConfigError("fusion parameters in " + path.string() + " do not match method " +
                      to_string(kind_));
  }
  std::size_t pos = nl + 1;
  for (auto& t : parameters()) {
    auto data = t.data();
    const auto need = data.size() * sizeof(double);
    if (bytes.size() - pos < need) throw FormatError("truncated fusion parameters", bytes.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + pos + i * sizeof(double), sizeof(bits));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      data[i] = std::bit_cast<double>(bits);
    }
    pos += need;
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes in fusion parameters", pos);
}

}  // namespace alpkd
