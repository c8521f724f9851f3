#pragma once

// Fusion of a set of teacher CLS states into one target vector per student
// layer.
//
//   ALP_DOT     alpha_k = softmax_k(h_S . h_T^k), C = sum_k alpha_k h_T^k.
//               Raw, unscaled dot products; no parameters.
//   ALP_KQV     h_S is the query, teacher states are keys; per-head scaled
//               dot-product attention (1/sqrt(d_head)) over value
//               projections of the teacher states; heads concatenated.
//   CKD_CONCAT  teacher states concatenated in ascending layer order, then
//               a single linear projection |A(j)|*d -> d.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alpkd/alignment.hpp"
#include "alpkd/tensor.hpp"

namespace alpkd {

enum class FusionKind { AlpDot, AlpKqv, CkdConcat };

const char* to_string(FusionKind k);

struct FusionResult {
  Tensor fused;    // [batch, d]
  Tensor weights;  // [batch, |A(j)|]; undefined for CKD_CONCAT. Head-averaged for KQV.
};

FusionResult alp_fuse(const Tensor& student_state, std::span<const Tensor> teacher_states);

struct KqvParams {
  Tensor wq, wk, wv;  // [d, d] each
};

FusionResult kqv_fuse(const Tensor& student_state, std::span<const Tensor> teacher_states,
                      const KqvParams& params, std::size_t num_heads);

FusionResult ckd_fuse(std::span<const Tensor> teacher_states, const Tensor& projection);

// A fusion kind bound to an alignment plan, owning one parameter set per
// participating student layer for the parameterized kinds.
class FusionMethod {
 public:
  static FusionMethod dot();
  static FusionMethod kqv(const AlignmentPlan& plan, std::size_t hidden_dim,
                          std::size_t num_heads, std::uint64_t seed);
  static FusionMethod ckd(const AlignmentPlan& plan, std::size_t hidden_dim, std::uint64_t seed);

  FusionKind kind() const { return kind_; }
  std::size_t num_heads() const { return num_heads_; }
  bool has_weights() const { return kind_ != FusionKind::CkdConcat; }

  // Fuses the teacher states selected for student layer j (1-based).
  FusionResult fuse(std::size_t j, const Tensor& student_state,
                    std::span<const Tensor> teacher_states) const;

  std::vector<Tensor> parameters() const;
  // KQV: identity projections. CKD: projection selecting the block of the
  // given position inside each concatenation.
  void set_identity();

  void save(const std::filesystem::path& path) const;
  // Restores parameters into an already-shaped method.
  void load(const std::filesystem::path& path);

  const std::optional<KqvParams>& kqv_params(std::size_t j) const { return kqv_.at(j - 1); }
  const Tensor& projection(std::size_t j) const { return projections_.at(j - 1); }

 private:
  FusionKind kind_ = FusionKind::AlpDot;
  std::size_t num_heads_ = 1;
  std::size_t hidden_dim_ = 0;
  std::vector<std::optional<KqvParams>> kqv_;  // indexed by j-1
  std::vector<Tensor> projections_;            // indexed by j-1; undefined when unused
};

}  // namespace alpkd
