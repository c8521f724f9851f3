#pragma once

// Plot-ready exports of trained models: attention weights, a shared PCA
// frame for CLS states, and per-example cosine distances to the teacher.

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alpkd/alignment.hpp"
#include "alpkd/data.hpp"
#include "alpkd/encoder.hpp"
#include "alpkd/fusion.hpp"

namespace alpkd {

struct AttentionRow {
  std::size_t example_id = 0;
  std::size_t j = 0;  // student layer
  std::size_t k = 0;  // teacher layer
  double alpha = 0.0;
};

struct AttentionDump {
  std::vector<AttentionRow> rows;
  void write_csv(const std::filesystem::path& path) const;
};

// Eval-mode forward of both models over the listed examples; one row per
// (example, k in A(j)).
AttentionDump dump_attention(const Encoder& student, const Encoder& teacher,
                             const AlignmentPlan& plan, const FusionMethod& fusion,
                             const Dataset& data, std::span<const std::size_t> example_ids,
                             std::size_t j);

// CLS states of every layer for the listed examples, [count, d] per layer.
std::vector<Tensor> collect_cls(const Encoder& model, const Dataset& data,
                                std::span<const std::size_t> example_ids);

// Symmetric eigendecomposition by cyclic Jacobi rotations. Eigenvalues are
// descending; eigenvectors are the rows of `vectors`, each signed so its
// largest-magnitude entry is positive.
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};
SymmetricEigen jacobi_eigen(std::vector<double> matrix, std::size_t n, double tol = 1e-15,
                            std::size_t max_sweeps = 100);

struct TaggedStates {
  std::string tag;
  std::vector<std::size_t> example_ids;
  Tensor states;  // [example_ids.size(), d]
};

struct ProjectionRow {
  std::string tag;
  std::size_t example_id = 0;
  double pc1 = 0.0, pc2 = 0.0;
};

struct ProjectionReport {
  std::vector<ProjectionRow> rows;
  std::array<double, 2> explained_variance{0.0, 0.0};
  std::array<std::vector<double>, 2> components;
  // Fewer than two eigenvalues above numerical noise.
  bool degenerate = false;

  void write_csv(const std::filesystem::path& path) const;
};

// PCA fitted on the pooled, mean-centred states of every tag.
ProjectionReport pca_project(std::span<const TaggedStates> sets);

struct LayerPair {
  std::size_t student = 0;  // 1-based
  std::size_t teacher = 0;
  std::string label() const;
};

struct CosineRow {
  std::size_t example_id = 0;
  std::string pair;
  double distance = 0.0;
  bool zero_norm = false;  // a guarded zero vector was involved
};

struct CosineReport {
  std::vector<CosineRow> rows;
  double mean(const std::string& pair) const;
  void write_csv(const std::filesystem::path& path) const;
};

double cosine_distance(std::span<const double> u, std::span<const double> v,
                       bool* zero_norm = nullptr);

// student_cls / teacher_cls: per-layer [count, d] states over the same
// examples, in the order of example_ids.
CosineReport cosine_distance_report(std::span<const Tensor> student_cls,
                                    std::span<const Tensor> teacher_cls,
                                    std::span<const LayerPair> pairs,
                                    std::span<const std::size_t> example_ids);

// Each student layer j that takes a hidden loss, paired with the first
// teacher layer of its disjoint bucket.
std::vector<LayerPair> default_cosine_pairs(std::size_t n, std::size_t m);

// `count` distinct indices below `size` drawn with the given seed, ascending.
std::vector<std::size_t> sample_examples(std::size_t size, std::size_t count,
                                         std::uint64_t seed);

}  // namespace alpkd
