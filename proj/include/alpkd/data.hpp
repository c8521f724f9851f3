#pragma once

// Task supply: synthetic sequence-classification generators, a TSV loader,
// and seeded batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace alpkd {

// Reserved token ids shared by every task.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kSepId = 2;
inline constexpr std::int32_t kUnkId = 3;
inline constexpr std::int32_t kFirstContentId = 4;

struct Example {
  std::vector<std::int32_t> token_ids;  // position 0 is CLS, unpadded
  int label = 0;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 0;
  std::size_t seq_len = 0;  // padded length of every batch row

  std::size_t size() const { return examples.size(); }
};

class Vocabulary {
 public:
  Vocabulary();
  std::int32_t add(const std::string& token);
  std::int32_t id(const std::string& token) const;  // kUnkId when absent
  const std::string& token(std::int32_t id) const;
  bool contains(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

enum class GeneratorKind { Majority, Parity, Tsv };

struct TaskSpec {
  std::string name = "parity";
  GeneratorKind kind = GeneratorKind::Parity;
  std::size_t vocab_size = 16;
  std::size_t seq_len = 32;  // including CLS
  std::size_t num_classes = 2;
  std::size_t train_size = 4000;
  std::size_t validation_size = 1000;
  std::uint64_t seed = 7;
  // PARITY: marker occurrences are drawn from 0..max_markers.
  std::size_t max_markers = 8;
  // TSV
  std::filesystem::path train_path;
  std::filesystem::path validation_path;
  std::vector<std::string> text_columns;
  std::string label_column;
};

struct TaskData {
  Dataset train;
  Dataset validation;
  std::optional<Vocabulary> vocabulary;              // TSV only
  std::vector<std::string> label_names;              // TSV only
};

// Label is the class bucket of the most frequent content token; ties go to
// the lowest token id. Content tokens are split into num_classes contiguous
// buckets.
TaskData gen_majority(const TaskSpec& spec);
// Label is the parity of the number of occurrences of the marker token
// (the first content id).
TaskData gen_parity(const TaskSpec& spec);
TaskData load_tsv(const TaskSpec& spec);
// Dispatches on spec.kind.
TaskData make_task(const TaskSpec& spec);

int majority_label(const std::vector<std::int32_t>& tokens, std::size_t vocab_size,
                   std::size_t num_classes);
int content_class(std::int32_t token, std::size_t vocab_size, std::size_t num_classes);
inline std::int32_t parity_marker() { return kFirstContentId; }

std::vector<std::string> tokenize(const std::string& text);

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> token_ids;  // batch_size * seq_len, PAD-filled
  std::vector<std::uint8_t> mask;       // 1 on non-PAD positions
  std::vector<int> labels;
  std::vector<std::size_t> indices;     // positions in the source dataset
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);

// Splits the dataset into batches in a deterministic order. With a shuffle
// seed the order is a permutation drawn from (seed, epoch); without one the
// natural order is kept. The final partial batch is retained.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed, std::size_t epoch = 0);

}  // namespace alpkd
