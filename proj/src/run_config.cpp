#include "alpkd/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "alpkd/errors.hpp"

namespace alpkd {

namespace {

namespace pt = boost::property_tree;

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const auto text = trim(raw);
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError(key + ": '" + raw + "' is not a valid " +
                      (std::is_integral_v<T> ? "non-negative integer" : "number"));
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(key + ": value must be finite");
  }
  return value;
}

std::size_t parse_size(const std::string& key, const std::string& raw) {
  return parse_number<std::size_t>(key, raw);
}
double parse_double(const std::string& key, const std::string& raw) {
  return parse_number<double>(key, raw);
}
std::uint64_t parse_u64(const std::string& key, const std::string& raw) {
  return parse_number<std::uint64_t>(key, raw);
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::vector<double> parse_doubles(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  for (const auto& item : split(raw, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError(key + ": list must be nonempty");
  return out;
}

std::string fmt_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

OptimizerKind parse_optimizer(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (v == "adam") return OptimizerKind::Adam;
  if (v == "sgd") return OptimizerKind::Sgd;
  throw ConfigError(key + ": unknown optimizer '" + raw + "' (valid: adam|sgd)");
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

GeneratorKind parse_kind(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (v == "majority") return GeneratorKind::Majority;
  if (v == "parity") return GeneratorKind::Parity;
  if (v == "tsv") return GeneratorKind::Tsv;
  throw ConfigError(key + ": unknown task kind '" + raw + "' (valid: majority|parity|tsv)");
}

const char* kind_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::Majority:
      return "majority";
    case GeneratorKind::Parity:
      return "parity";
    case GeneratorKind::Tsv:
      return "tsv";
  }
  return "?";
}

struct KeySpec {
  std::string section;
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

#define ALPKD_KEY(sec, nm, getter, setter)                                                \
  KeySpec {                                                                               \
    sec, nm, [](const RunConfig& c) -> std::string { return getter; },                    \
        [](RunConfig& c, [[maybe_unused]] const std::string& key, const std::string& v) { setter; } \
  }

void add_train_keys(std::vector<KeySpec>& keys, const std::string& sec,
                    TrainConfig RunConfig::*member) {
  auto key = [&](const char* name, auto get, auto set) {
    keys.push_back({sec, name,
                    [member, get](const RunConfig& c) { return get(c.*member); },
                    [member, set](RunConfig& c, const std::string& k, const std::string& v) {
                      set(c.*member, k, v);
                    }});
  };
  key("learning_rate", [](const TrainConfig& t) { return fmt(t.learning_rate); },
      [](TrainConfig& t, const std::string& k, const std::string& v) {
        t.learning_rate = parse_double(k, v);
        if (t.learning_rate < 0) throw ConfigError(k + ": must be >= 0");
      });
  key("batch_size", [](const TrainConfig& t) { return std::to_string(t.batch_size); },
      [](TrainConfig& t, const std::string& k, const std::string& v) {
        t.batch_size = parse_size(k, v);
        if (t.batch_size == 0) throw ConfigError(k + ": must be >= 1");
      });
  key("epochs", [](const TrainConfig& t) { return std::to_string(t.epochs); },
      [](TrainConfig& t, const std::string& k, const std::string& v) {
        t.epochs = parse_size(k, v);
        if (t.epochs == 0) throw ConfigError(k + ": must be >= 1");
      });
  key("seed", [](const TrainConfig& t) { return std::to_string(t.seed); },
      [](TrainConfig& t, const std::string& k, const std::string& v) { t.seed = parse_u64(k, v); });
  key("optimizer", [](const TrainConfig& t) { return std::string(optimizer_name(t.optimizer)); },
      [](TrainConfig& t, const std::string& k, const std::string& v) {
        t.optimizer = parse_optimizer(k, v);
      });
}

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    // [task]
    k.push_back(ALPKD_KEY("task", "name", c.task.name, c.task.name = trim(v)));
    k.push_back(ALPKD_KEY("task", "kind", kind_name(c.task.kind), c.task.kind = parse_kind(key, v)));
    k.push_back(ALPKD_KEY("task", "vocab_size", std::to_string(c.task.vocab_size),
                          c.task.vocab_size = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "seq_len", std::to_string(c.task.seq_len),
                          c.task.seq_len = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "num_classes", std::to_string(c.task.num_classes),
                          c.task.num_classes = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "train_size", std::to_string(c.task.train_size),
                          c.task.train_size = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "validation_size", std::to_string(c.task.validation_size),
                          c.task.validation_size = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "seed", std::to_string(c.task.seed),
                          c.task.seed = parse_u64(key, v)));
    k.push_back(ALPKD_KEY("task", "max_markers", std::to_string(c.task.max_markers),
                          c.task.max_markers = parse_size(key, v)));
    k.push_back(ALPKD_KEY("task", "train_path", c.task.train_path.string(),
                          c.task.train_path = trim(v)));
    k.push_back(ALPKD_KEY("task", "validation_path", c.task.validation_path.string(),
                          c.task.validation_path = trim(v)));
    k.push_back(ALPKD_KEY(
        "task", "text_columns",
        [&] {
          std::string s;
          for (std::size_t i = 0; i < c.task.text_columns.size(); ++i)
            s += (i ? "," : "") + c.task.text_columns[i];
          return s;
        }(),
        c.task.text_columns = split(v, ',')));
    k.push_back(ALPKD_KEY("task", "label_column", c.task.label_column,
                          c.task.label_column = trim(v)));

    // [teacher]
    k.push_back(ALPKD_KEY("teacher", "num_layers", std::to_string(c.teacher.num_layers),
                          c.teacher.num_layers = parse_size(key, v)));
    k.push_back(ALPKD_KEY("teacher", "hidden_dim", std::to_string(c.teacher.hidden_dim),
                          c.teacher.hidden_dim = parse_size(key, v)));
    k.push_back(ALPKD_KEY("teacher", "num_heads", std::to_string(c.teacher.num_heads),
                          c.teacher.num_heads = parse_size(key, v)));
    k.push_back(ALPKD_KEY("teacher", "ffn_dim", std::to_string(c.teacher.ffn_dim),
                          c.teacher.ffn_dim = parse_size(key, v)));
    k.push_back(ALPKD_KEY("teacher", "dropout_rate", fmt(c.teacher.dropout_rate),
                          c.teacher.dropout_rate = parse_double(key, v)));
    add_train_keys(k, "teacher", &RunConfig::teacher_train);
    k.push_back(ALPKD_KEY("teacher", "accuracy_floor", fmt(c.teacher_accuracy_floor),
                          c.teacher_accuracy_floor = parse_double(key, v)));

    // [distill]
    k.push_back(ALPKD_KEY("distill", "teacher_checkpoint", c.teacher_checkpoint.string(),
                          c.teacher_checkpoint = trim(v)));
    k.push_back(ALPKD_KEY("distill", "strategy", strategy_name(c.distill.strategy),
                          c.distill.strategy = strategy_from_name(trim(v))));
    k.push_back(ALPKD_KEY("distill", "fusion", fusion_choice_name(c.distill.fusion),
                          c.distill.fusion = fusion_choice_from_name(trim(v))));
    k.push_back(ALPKD_KEY("distill", "kqv_heads", std::to_string(c.distill.kqv_heads),
                          c.distill.kqv_heads = parse_size(key, v)));
    k.push_back(ALPKD_KEY("distill", "student_layers", std::to_string(c.distill.student_layers),
                          c.distill.student_layers = parse_size(key, v)));
    add_train_keys(k, "distill", &RunConfig::distill);
    k.push_back(ALPKD_KEY("distill", "temperature", fmt(c.distill.temperature),
                          c.distill.temperature = parse_double(key, v)));
    k.push_back(ALPKD_KEY("distill", "eta", fmt(c.distill.eta), c.distill.eta = parse_double(key, v)));
    k.push_back(ALPKD_KEY("distill", "lambda", fmt(c.distill.lambda),
                          c.distill.lambda = parse_double(key, v)));
    k.push_back(ALPKD_KEY("distill", "pkd_picks", format_picks(c.distill.pkd_picks),
                          c.distill.pkd_picks = parse_picks(v)));
    k.push_back(ALPKD_KEY("distill", "include_last_layer", fmt_bool(c.distill.include_last_layer),
                          c.distill.include_last_layer = parse_bool(key, v)));
    k.push_back(ALPKD_KEY("distill", "kd_t_squared", fmt_bool(c.distill.kd_t_squared),
                          c.distill.kd_t_squared = parse_bool(key, v)));
    k.push_back(ALPKD_KEY("distill", "teacher_dropout", fmt_bool(c.distill.teacher_dropout),
                          c.distill.teacher_dropout = parse_bool(key, v)));

    // [grid]
    k.push_back(ALPKD_KEY(
        "grid", "strategies",
        [&] {
          std::string s;
          for (std::size_t i = 0; i < c.grid_strategies.size(); ++i)
            s += std::string(i ? "," : "") + strategy_name(c.grid_strategies[i]);
          return s;
        }(),
        {
          std::vector<DistillStrategy> list;
          for (const auto& name : split(v, ',')) list.push_back(strategy_from_name(name));
          if (list.empty()) throw ConfigError(key + ": list must be nonempty");
          c.grid_strategies = std::move(list);
        }));
    k.push_back(ALPKD_KEY("grid", "learning_rates", fmt_doubles(c.grid.learning_rates),
                          c.grid.learning_rates = parse_doubles(key, v)));
    k.push_back(ALPKD_KEY("grid", "temperatures", fmt_doubles(c.grid.temperatures),
                          c.grid.temperatures = parse_doubles(key, v)));
    k.push_back(ALPKD_KEY("grid", "etas", fmt_doubles(c.grid.etas), c.grid.etas = parse_doubles(key, v)));
    k.push_back(ALPKD_KEY("grid", "lambdas", fmt_doubles(c.grid.lambdas),
                          c.grid.lambdas = parse_doubles(key, v)));
    k.push_back(ALPKD_KEY(
        "grid", "pkd_pick_sets",
        [&] {
          std::string s;
          for (std::size_t i = 0; i < c.grid.pkd_pick_sets.size(); ++i)
            s += (i ? ";" : "") + format_picks(c.grid.pkd_pick_sets[i]);
          return s;
        }(),
        {
          c.grid.pkd_pick_sets.clear();
          for (const auto& item : split(v, ';')) c.grid.pkd_pick_sets.push_back(parse_picks(item));
        }));
    k.push_back(ALPKD_KEY("grid", "workers", std::to_string(c.grid_workers),
                          c.grid_workers = parse_size(key, v)));
    k.push_back(ALPKD_KEY("grid", "seeds", std::to_string(c.grid_seeds), {
      c.grid_seeds = parse_size(key, v);
      if (c.grid_seeds == 0) throw ConfigError(key + ": must be >= 1");
    }));

    // [analysis]
    k.push_back(ALPKD_KEY("analysis", "attention_examples",
                          std::to_string(c.analysis.attention_examples),
                          c.analysis.attention_examples = parse_size(key, v)));
    k.push_back(ALPKD_KEY("analysis", "cosine_examples", std::to_string(c.analysis.cosine_examples),
                          c.analysis.cosine_examples = parse_size(key, v)));
    k.push_back(ALPKD_KEY("analysis", "attention_layer", std::to_string(c.analysis.attention_layer),
                          c.analysis.attention_layer = parse_size(key, v)));
    k.push_back(ALPKD_KEY("analysis", "sample_seed", std::to_string(c.analysis.sample_seed),
                          c.analysis.sample_seed = parse_u64(key, v)));

    // [output]
    k.push_back(ALPKD_KEY("output", "root", c.output_root.string(), c.output_root = trim(v)));
    k.push_back(ALPKD_KEY("output", "run_name", c.run_name, {
      c.run_name = trim(v);
      if (c.run_name.find('/') != std::string::npos || c.run_name == "." || c.run_name == "..") {
        throw ConfigError(key + ": must be a plain directory name");
      }
    }));
    return k;
  }();
  return keys;
}

#undef ALPKD_KEY

const KeySpec& find_key(const std::string& section, const std::string& name) {
  for (const auto& k : registry()) {
    if (k.section == section && k.name == name) return k;
  }
  bool known_section = false;
  for (const auto& k : registry()) known_section |= k.section == section;
  if (!known_section) throw ConfigError("unknown section [" + section + "]");
  std::string valid;
  for (const auto& k : registry()) {
    if (k.section == section) valid += (valid.empty() ? "" : "|") + k.name;
  }
  throw ConfigError("unknown key '" + name + "' in [" + section + "] (valid: " + valid + ")");
}

// 1-based line of `name =` within [section], or 0.
std::size_t locate(const std::string& text, const std::string& section, const std::string& name) {
  std::istringstream is(text);
  std::string line, current;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto t = trim(line);
    if (t.size() >= 2 && t.front() == '[' && t.back() == ']') {
      current = trim(t.substr(1, t.size() - 2));
    } else if (current == section) {
      const auto eq = t.find('=');
      if (eq != std::string::npos && trim(t.substr(0, eq)) == name) return n;
    }
  }
  return 0;
}

}  // namespace

RunConfig::RunConfig() {
  teacher.dropout_rate = 0.0;
  teacher_train.learning_rate = 1e-3;
  teacher_train.epochs = 10;
  teacher_train.seed = 1;
  distill.learning_rate = 5e-5;
  distill.epochs = 3;
  distill.student_layers = 2;
}

std::string format_picks(const std::vector<std::optional<std::size_t>>& picks) {
  std::string s;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (i) s += ',';
    s += picks[i] ? std::to_string(*picks[i]) : "-";
  }
  return s;
}

std::vector<std::optional<std::size_t>> parse_picks(const std::string& text) {
  std::vector<std::optional<std::size_t>> picks;
  for (const auto& item : split(text, ',')) {
    if (item == "-") {
      picks.emplace_back();
    } else {
      const auto v = parse_size("pkd picks", item);
      if (v == 0) throw ConfigError("pkd picks are 1-based teacher layers; got 0");
      picks.emplace_back(v);
    }
  }
  return picks;
}

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      throw ConfigError("key '" + section + "' outside any section (line " +
                        std::to_string(locate(text, "", section)) + ")");
    }
    for (const auto& [name, node] : body) {
      const auto dotted = section + "." + name;
      try {
        const auto& spec = find_key(section, name);
        spec.set(config, dotted, node.data());
      } catch (const ConfigError& e) {
        const auto line = locate(text, section, name);
        throw ConfigError(line ? "line " + std::to_string(line) + ": " + e.what() : e.what());
      }
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_ini(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& k : registry()) {
    if (k.section != section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(config) + "\n";
  }
  return out;
}

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("config key '" + dotted_key + "' must look like section.key");
  }
  const auto& spec = find_key(dotted_key.substr(0, dot), dotted_key.substr(dot + 1));
  spec.set(config, dotted_key, value);
}

std::string get_config_value(const RunConfig& config, const std::string& dotted_key) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("config key '" + dotted_key + "' must look like section.key");
  }
  return find_key(dotted_key.substr(0, dot), dotted_key.substr(dot + 1)).get(config);
}

void finalize(RunConfig& config, const TaskData& task) {
  config.teacher.vocab_size = task.train.vocab_size;
  config.teacher.num_classes = task.train.num_classes;
  config.teacher.max_seq_len = task.train.seq_len;
  config.teacher.validate();
  if (!(config.teacher_accuracy_floor >= 0.0 && config.teacher_accuracy_floor <= 1.0)) {
    throw ConfigError("teacher.accuracy_floor must lie in [0, 1]");
  }
  if (config.distill.student_layers > config.teacher.num_layers) {
    throw ConfigError("distill.student_layers " + std::to_string(config.distill.student_layers) +
                      " exceeds teacher.num_layers " + std::to_string(config.teacher.num_layers));
  }
}

std::uint64_t config_hash(const RunConfig& config) {
  RunConfig copy = config;
  copy.output_root.clear();
  copy.run_name.clear();
  const auto text = to_ini(copy);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace alpkd
