#include "alpkd/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "alpkd/errors.hpp"

namespace alpkd {

namespace {

constexpr const char* kReservedTokens[] = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};

std::size_t content_count(std::size_t vocab_size) {
  return vocab_size > static_cast<std::size_t>(kFirstContentId)
             ? vocab_size - static_cast<std::size_t>(kFirstContentId)
             : 0;
}

std::size_t draw(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

void check_common(const TaskSpec& spec) {
  if (spec.seq_len < 2) throw ConfigError("task seq_len must be >= 2 (CLS plus content)");
  if (spec.train_size == 0 || spec.validation_size == 0) {
    throw ConfigError("task needs nonempty train and validation splits");
  }
}

// Draws examples until `count` are produced, rejecting any sequence listed in
// `exclude`. Accepted sequences are added to `seen`.
template <typename Gen>
std::vector<Example> draw_split(std::size_t count, std::mt19937_64& rng,
                                const std::set<std::vector<std::int32_t>>* exclude,
                                std::set<std::vector<std::int32_t>>& seen, Gen gen) {
  std::vector<Example> out;
  out.reserve(count);
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > count * 100 + 1000) {
      throw ConfigError("task generator cannot produce enough distinct examples");
    }
    Example ex = gen(rng);
    if (exclude && exclude->count(ex.token_ids)) continue;
    seen.insert(ex.token_ids);
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename Gen>
TaskData generate(const TaskSpec& spec, Gen gen) {
  std::mt19937_64 rng(spec.seed);
  std::set<std::vector<std::int32_t>> train_seen, val_seen;
  TaskData task;
  task.train.examples = draw_split(spec.train_size, rng, nullptr, train_seen, gen);
  task.validation.examples = draw_split(spec.validation_size, rng, &train_seen, val_seen, gen);
  for (Dataset* d : {&task.train, &task.validation}) {
    d->vocab_size = spec.vocab_size;
    d->num_classes = spec.num_classes;
    d->seq_len = spec.seq_len;
  }
  return task;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  for (auto& c : out) {
    if (!c.empty() && c.back() == '\r') c.pop_back();
  }
  return out;
}

struct TsvRow {
  std::vector<std::string> texts;
  std::string label;
  std::size_t line = 0;
};

std::vector<TsvRow> read_tsv(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open TSV file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + ": missing header row");
  const auto header = split_tabs(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw InputError(path.string() + ": header has no column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> text_idx;
  for (const auto& c : spec.text_columns) text_idx.push_back(column(c));
  const auto label_idx = column(spec.label_column);

  std::vector<TsvRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_tabs(line);
    TsvRow row;
    row.line = lineno;
    for (auto idx : text_idx) {
      if (idx >= cells.size()) {
        throw InputError(path.string() + ":" + std::to_string(lineno) + ": missing column");
      }
      row.texts.push_back(cells[idx]);
    }
    if (label_idx >= cells.size()) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": missing label column");
    }
    row.label = cells[label_idx];
    rows.push_back(std::move(row));
  }
  return rows;
}

Example encode_row(const TsvRow& row, const Vocabulary& vocab, std::size_t max_len) {
  Example ex;
  ex.token_ids.push_back(kClsId);
  for (std::size_t t = 0; t < row.texts.size(); ++t) {
    if (t > 0) ex.token_ids.push_back(kSepId);
    for (const auto& tok : tokenize(row.texts[t])) ex.token_ids.push_back(vocab.id(tok));
  }
  if (ex.token_ids.size() > max_len) ex.token_ids.resize(max_len);
  return ex;
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t);
}

std::int32_t Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::transform(tok.begin(), tok.end(), tok.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(tok));
  }
  return out;
}

int content_class(std::int32_t token, std::size_t vocab_size, std::size_t num_classes) {
  const auto n = content_count(vocab_size);
  const auto offset = static_cast<std::size_t>(token - kFirstContentId);
  return static_cast<int>(offset * num_classes / n);
}

int majority_label(const std::vector<std::int32_t>& tokens, std::size_t vocab_size,
                   std::size_t num_classes) {
  std::vector<std::size_t> counts(vocab_size, 0);
  for (auto t : tokens) {
    if (t >= kFirstContentId) ++counts[static_cast<std::size_t>(t)];
  }
  std::size_t best = static_cast<std::size_t>(kFirstContentId);
  for (std::size_t t = best + 1; t < vocab_size; ++t) {
    if (counts[t] > counts[best]) best = t;
  }
  return content_class(static_cast<std::int32_t>(best), vocab_size, num_classes);
}

TaskData gen_majority(const TaskSpec& spec) {
  check_common(spec);
  const auto n_content = content_count(spec.vocab_size);
  if (spec.num_classes < 2 || spec.num_classes > n_content) {
    throw ConfigError("MAJORITY needs 2 <= num_classes <= content vocabulary (" +
                      std::to_string(n_content) + ")");
  }
  const std::size_t len = spec.seq_len - 1;
  return generate(spec, [&](std::mt19937_64& rng) {
    const auto label = static_cast<int>(draw(rng, spec.num_classes));
    // Content ids of the chosen class bucket.
    std::vector<std::int32_t> bucket;
    for (std::size_t t = 0; t < n_content; ++t) {
      const auto id = static_cast<std::int32_t>(t) + kFirstContentId;
      if (content_class(id, spec.vocab_size, spec.num_classes) == label) bucket.push_back(id);
    }
    const auto target = bucket[draw(rng, bucket.size())];
    std::vector<std::int32_t> body(len);
    for (auto& t : body) t = static_cast<std::int32_t>(draw(rng, n_content)) + kFirstContentId;
    // Promote the target until it is the strict mode of the sequence.
    auto is_mode = [&] {
      std::vector<std::size_t> counts(spec.vocab_size, 0);
      for (auto t : body) ++counts[static_cast<std::size_t>(t)];
      for (std::size_t t = 0; t < spec.vocab_size; ++t) {
        if (static_cast<std::int32_t>(t) != target && counts[t] >= counts[target]) return false;
      }
      return true;
    };
    while (!is_mode()) {
      std::size_t pos;
      do {
        pos = draw(rng, len);
      } while (body[pos] == target);
      body[pos] = target;
    }
    Example ex;
    ex.token_ids.push_back(kClsId);
    ex.token_ids.insert(ex.token_ids.end(), body.begin(), body.end());
    ex.label = majority_label(ex.token_ids, spec.vocab_size, spec.num_classes);
    return ex;
  });
}

TaskData gen_parity(const TaskSpec& spec) {
  check_common(spec);
  if (spec.num_classes != 2) throw ConfigError("PARITY requires num_classes == 2");
  const auto n_content = content_count(spec.vocab_size);
  if (n_content < 2) throw ConfigError("PARITY needs at least two content tokens");
  const std::size_t len = spec.seq_len - 1;
  if (spec.max_markers < 1 || spec.max_markers > len) {
    throw ConfigError("PARITY max_markers must lie in 1..seq_len-1");
  }
  return generate(spec, [&](std::mt19937_64& rng) {
    const auto label = static_cast<std::size_t>(draw(rng, 2));
    std::vector<std::size_t> counts;
    for (std::size_t k = label; k <= spec.max_markers; k += 2) counts.push_back(k);
    const auto markers = counts[draw(rng, counts.size())];
    std::vector<std::int32_t> body(len);
    for (auto& t : body) {
      t = static_cast<std::int32_t>(draw(rng, n_content - 1)) + kFirstContentId + 1;
    }
    std::vector<std::size_t> pos(len);
    std::iota(pos.begin(), pos.end(), 0);
    for (std::size_t i = 0; i < markers; ++i) {
      std::swap(pos[i], pos[i + draw(rng, len - i)]);
      body[pos[i]] = parity_marker();
    }
    Example ex;
    ex.token_ids.push_back(kClsId);
    ex.token_ids.insert(ex.token_ids.end(), body.begin(), body.end());
    ex.label = static_cast<int>(std::count(body.begin(), body.end(), parity_marker()) % 2);
    return ex;
  });
}

TaskData load_tsv(const TaskSpec& spec) {
  if (spec.text_columns.empty() || spec.text_columns.size() > 2) {
    throw ConfigError("TSV tasks take one or two text columns");
  }
  if (spec.label_column.empty()) throw ConfigError("TSV task needs a label column");
  if (spec.seq_len < 2) throw ConfigError("task seq_len must be >= 2");
  const auto train_rows = read_tsv(spec.train_path, spec);
  const auto val_rows = read_tsv(spec.validation_path, spec);
  if (train_rows.empty()) throw InputError(spec.train_path.string() + ": no data rows");

  TaskData task;
  Vocabulary vocab;
  std::set<std::string> labels;
  for (const auto& r : train_rows) {
    for (const auto& text : r.texts)
      for (const auto& tok : tokenize(text)) vocab.add(tok);
    labels.insert(r.label);
  }
  task.label_names.assign(labels.begin(), labels.end());
  std::map<std::string, int> label_ids;
  for (std::size_t i = 0; i < task.label_names.size(); ++i) {
    label_ids[task.label_names[i]] = static_cast<int>(i);
  }
  auto convert = [&](const std::vector<TsvRow>& rows, const std::filesystem::path& path) {
    Dataset d;
    for (const auto& r : rows) {
      auto it = label_ids.find(r.label);
      if (it == label_ids.end()) {
        throw InputError(path.string() + ":" + std::to_string(r.line) + ": unknown label '" +
                         r.label + "'");
      }
      Example ex = encode_row(r, vocab, spec.seq_len);
      ex.label = it->second;
      d.examples.push_back(std::move(ex));
    }
    d.vocab_size = vocab.size();
    d.num_classes = task.label_names.size();
    d.seq_len = spec.seq_len;
    return d;
  };
  task.train = convert(train_rows, spec.train_path);
  task.validation = convert(val_rows, spec.validation_path);
  task.vocabulary = std::move(vocab);
  return task;
}

TaskData make_task(const TaskSpec& spec) {
  switch (spec.kind) {
    case GeneratorKind::Majority:
      return gen_majority(spec);
    case GeneratorKind::Parity:
      return gen_parity(spec);
    case GeneratorKind::Tsv:
      return load_tsv(spec);
  }
  throw ConfigError("unknown task kind");
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  Batch b;
  b.batch_size = indices.size();
  b.seq_len = data.seq_len;
  b.token_ids.assign(b.batch_size * b.seq_len, kPadId);
  b.mask.assign(b.batch_size * b.seq_len, 0);
  b.indices = indices;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& ex = data.examples.at(indices[r]);
    if (ex.token_ids.size() > b.seq_len) {
      throw InputError("example " + std::to_string(indices[r]) + " longer than seq_len " +
                       std::to_string(b.seq_len));
    }
    for (std::size_t c = 0; c < ex.token_ids.size(); ++c) {
      b.token_ids[r * b.seq_len + c] = ex.token_ids[c];
      b.mask[r * b.seq_len + c] = ex.token_ids[c] != kPadId;
    }
    b.labels.push_back(ex.label);
  }
  return b;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed, std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed + 0x9E3779B97F4A7C15ULL * (epoch + 1));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto end = std::min(order.size(), start + batch_size);
    out.push_back(make_batch(data, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return out;
}

}  // namespace alpkd
