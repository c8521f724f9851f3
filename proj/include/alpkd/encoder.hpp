#pragma once

// BERT-style post-layer-norm transformer encoder with a linear classifier
// over the CLS position. Used both as teacher (n layers) and student
// (m layers).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alpkd/data.hpp"
#include "alpkd/tensor.hpp"

namespace alpkd {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 16;
  std::size_t max_seq_len = 64;
  std::size_t num_classes = 2;
  double dropout_rate = 0.0;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderLayer {
  Tensor wq, bq, wk, wv, bv, wo, bo;  // attention; keys carry no bias
  Tensor ln1_gamma, ln1_beta;
  Tensor w1, b1, w2, b2;              // feed-forward
  Tensor ln2_gamma, ln2_beta;
};

struct ForwardOutput {
  // CLS vector of every layer, [batch, hidden_dim]; index 0 is layer 1.
  std::vector<Tensor> hidden_states;
  // Full layer outputs, [batch, seq_len, hidden_dim].
  std::vector<Tensor> sequence_states;
  Tensor logits;  // [batch, num_classes]
};

class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  std::size_t num_layers() const { return layers_.size(); }

  // Dropout is active only when train_mode is set and dropout_rate > 0,
  // in which case dropout_rng must be provided.
  ForwardOutput forward(const Batch& batch, bool train_mode,
                        std::mt19937_64* dropout_rng = nullptr) const;

  // Parameters in their canonical (checkpoint) order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;

  // Value copy with fresh parameter tensors.
  Encoder clone() const;

  const std::vector<EncoderLayer>& layers() const { return layers_; }

 private:
  friend Encoder init_student_from_teacher(const Encoder& teacher, std::size_t m);
  friend Encoder load_checkpoint(const std::filesystem::path& path);
  Encoder() = default;

  EncoderConfig config_;
  Tensor token_embedding_;     // [vocab, d]
  Tensor position_embedding_;  // [max_seq_len, d]
  Tensor emb_ln_gamma_, emb_ln_beta_;
  std::vector<EncoderLayer> layers_;
  Tensor classifier_w_, classifier_b_;  // [d, classes], [classes]
};

// Student with the teacher's embeddings, classifier head and first m layers,
// all value-copied.
Encoder init_student_from_teacher(const Encoder& teacher, std::size_t m);

// Checkpoint layout: "ALPKDCKPT1\n", a key=value config block terminated by
// "end\n", then for each parameter in canonical order the little-endian
// float64 values. Parameter shapes follow from the config.
void save_checkpoint(const Encoder& encoder, const std::filesystem::path& path);
Encoder load_checkpoint(const std::filesystem::path& path);
// Also verifies the stored config equals `expected`.
Encoder load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

// Order-sensitive FNV-1a digest over every parameter's bytes.
std::uint64_t parameter_hash(const Encoder& encoder);

// Writes and reads raw float64 tensor blocks (shared with fusion parameters).
void write_f64_le(std::ostream& os, std::span<const double> values);

}  // namespace alpkd
