#include "alpkd/encoder.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"

namespace alpkd {

namespace {

constexpr char kMagic[] = "ALPKDCKPT1\n";

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), true);
}

Tensor linear_weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return uniform_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_bias(ops::matmul(x, w), b);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::pair<std::string, std::string>> config_fields(const EncoderConfig& c) {
  return {{"num_layers", std::to_string(c.num_layers)},
          {"hidden_dim", std::to_string(c.hidden_dim)},
          {"num_heads", std::to_string(c.num_heads)},
          {"ffn_dim", std::to_string(c.ffn_dim)},
          {"vocab_size", std::to_string(c.vocab_size)},
          {"max_seq_len", std::to_string(c.max_seq_len)},
          {"num_classes", std::to_string(c.num_classes)},
          {"dropout_rate", format_double(c.dropout_rate)}};
}

Tensor copy_param(const Tensor& t) { return t.clone(true); }

EncoderLayer copy_layer(const EncoderLayer& l) {
  return {copy_param(l.wq),        copy_param(l.bq),       copy_param(l.wk),
          copy_param(l.wv),        copy_param(l.bv),       copy_param(l.wo),
          copy_param(l.bo),        copy_param(l.ln1_gamma), copy_param(l.ln1_beta),
          copy_param(l.w1),        copy_param(l.b1),       copy_param(l.w2),
          copy_param(l.b2),        copy_param(l.ln2_gamma), copy_param(l.ln2_beta)};
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers < 1) throw ConfigError("encoder num_layers must be >= 1");
  if (hidden_dim < 1 || ffn_dim < 1) throw ConfigError("encoder dims must be positive");
  if (num_heads < 1 || hidden_dim % num_heads != 0) {
    throw ConfigError("encoder hidden_dim " + std::to_string(hidden_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(kUnkId)) {
    throw ConfigError("encoder vocab_size must exceed the reserved ids");
  }
  if (max_seq_len < 1 || num_classes < 2) {
    throw ConfigError("encoder needs max_seq_len >= 1 and num_classes >= 2");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("encoder dropout_rate must lie in [0,1)");
  }
}

Encoder::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto d = config_.hidden_dim;
  token_embedding_ = uniform_param({config_.vocab_size, d}, 0.1, rng);
  position_embedding_ = uniform_param({config_.max_seq_len, d}, 0.1, rng);
  emb_ln_gamma_ = Tensor::full({d}, 1.0, true);
  emb_ln_beta_ = Tensor::zeros({d}, true);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    EncoderLayer layer;
    layer.wq = linear_weight(d, d, rng);
    layer.bq = Tensor::zeros({d}, true);
    layer.wk = linear_weight(d, d, rng);
    layer.wv = linear_weight(d, d, rng);
    layer.bv = Tensor::zeros({d}, true);
    layer.wo = linear_weight(d, d, rng);
    layer.bo = Tensor::zeros({d}, true);
    layer.ln1_gamma = Tensor::full({d}, 1.0, true);
    layer.ln1_beta = Tensor::zeros({d}, true);
    layer.w1 = linear_weight(d, config_.ffn_dim, rng);
    layer.b1 = Tensor::zeros({config_.ffn_dim}, true);
    layer.w2 = linear_weight(config_.ffn_dim, d, rng);
    layer.b2 = Tensor::zeros({d}, true);
    layer.ln2_gamma = Tensor::full({d}, 1.0, true);
    layer.ln2_beta = Tensor::zeros({d}, true);
    layers_.push_back(std::move(layer));
  }
  classifier_w_ = linear_weight(d, config_.num_classes, rng);
  classifier_b_ = Tensor::zeros({config_.num_classes}, true);
}

ForwardOutput Encoder::forward(const Batch& batch, bool train_mode,
                               std::mt19937_64* dropout_rng) const {
  const auto B = batch.batch_size;
  const auto S = batch.seq_len;
  const auto d = config_.hidden_dim;
  if (B == 0) throw InputError("forward: empty batch");
  if (S > config_.max_seq_len) {
    throw InputError("forward: seq_len " + std::to_string(S) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (batch.token_ids.size() != B * S || batch.mask.size() != B * S) {
    throw InputError("forward: batch buffers do not match batch_size x seq_len");
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (batch.token_ids[b * S] != kClsId) {
      throw InputError("forward: row " + std::to_string(b) + " does not start with CLS");
    }
  }
  const bool use_dropout = train_mode && config_.dropout_rate > 0.0;
  if (use_dropout && dropout_rng == nullptr) {
    throw ConfigError("forward: dropout in train mode needs an RNG");
  }
  auto drop = [&](const Tensor& x) {
    return use_dropout ? ops::dropout(x, config_.dropout_rate, *dropout_rng) : x;
  };

  std::vector<std::int32_t> positions(B * S);
  std::vector<std::size_t> cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) {
    cls_rows[b] = b * S;
    for (std::size_t s = 0; s < S; ++s) positions[b * S + s] = static_cast<std::int32_t>(s);
  }

  Tensor x = ops::add(ops::embedding(token_embedding_, batch.token_ids),
                      ops::embedding(position_embedding_, positions));
  x = drop(ops::layer_norm(x, emb_ln_gamma_, emb_ln_beta_));

  ForwardOutput out;
  for (const auto& layer : layers_) {
    Tensor q = linear(x, layer.wq, layer.bq);
    Tensor k = ops::matmul(x, layer.wk);
    Tensor v = linear(x, layer.wv, layer.bv);
    Tensor a = ops::attention(q, k, v, batch.mask, B, S, config_.num_heads);
    a = drop(linear(a, layer.wo, layer.bo));
    x = ops::layer_norm(ops::add(x, a), layer.ln1_gamma, layer.ln1_beta);
    Tensor f = ops::gelu(linear(x, layer.w1, layer.b1));
    f = drop(linear(f, layer.w2, layer.b2));
    x = ops::layer_norm(ops::add(x, f), layer.ln2_gamma, layer.ln2_beta);
    out.hidden_states.push_back(ops::gather_rows(x, cls_rows));
    out.sequence_states.push_back(ops::reshape(x, {B, S, d}));
  }
  out.logits = linear(drop(out.hidden_states.back()), classifier_w_, classifier_b_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Encoder::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"embeddings.token", token_embedding_},
      {"embeddings.position", position_embedding_},
      {"embeddings.ln.gamma", emb_ln_gamma_},
      {"embeddings.ln.beta", emb_ln_beta_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const std::string p = "layer" + std::to_string(l + 1) + ".";
    out.insert(out.end(), {{p + "attn.wq", L.wq},
                           {p + "attn.bq", L.bq},
                           {p + "attn.wk", L.wk},
                           {p + "attn.wv", L.wv},
                           {p + "attn.bv", L.bv},
                           {p + "attn.wo", L.wo},
                           {p + "attn.bo", L.bo},
                           {p + "ln1.gamma", L.ln1_gamma},
                           {p + "ln1.beta", L.ln1_beta},
                           {p + "ffn.w1", L.w1},
                           {p + "ffn.b1", L.b1},
                           {p + "ffn.w2", L.w2},
                           {p + "ffn.b2", L.b2},
                           {p + "ln2.gamma", L.ln2_gamma},
                           {p + "ln2.beta", L.ln2_beta}});
  }
  out.emplace_back("classifier.w", classifier_w_);
  out.emplace_back("classifier.b", classifier_b_);
  return out;
}

std::vector<Tensor> Encoder::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

Encoder Encoder::clone() const {
  Encoder e;
  e.config_ = config_;
  e.token_embedding_ = copy_param(token_embedding_);
  e.position_embedding_ = copy_param(position_embedding_);
  e.emb_ln_gamma_ = copy_param(emb_ln_gamma_);
  e.emb_ln_beta_ = copy_param(emb_ln_beta_);
  for (const auto& l : layers_) e.layers_.push_back(copy_layer(l));
  e.classifier_w_ = copy_param(classifier_w_);
  e.classifier_b_ = copy_param(classifier_b_);
  return e;
}

Encoder init_student_from_teacher(const Encoder& teacher, std::size_t m) {
  if (m < 1 || m > teacher.num_layers()) {
    throw ConfigError("student layers m=" + std::to_string(m) + " must lie in 1.." +
                      std::to_string(teacher.num_layers()));
  }
  Encoder student = teacher.clone();
  student.layers_.resize(m);
  student.config_.num_layers = m;
  return student;
}

void write_f64_le(std::ostream& os, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
}

void save_checkpoint(const Encoder& encoder, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << kMagic;
  for (const auto& [k, v] : config_fields(encoder.config())) os << k << '=' << v << '\n';
  os << "end\n";
  for (const auto& [name, t] : encoder.named_parameters()) write_f64_le(os, t.data());
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Encoder load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  const std::size_t magic_len = sizeof(kMagic) - 1;
  if (bytes.compare(0, magic_len, kMagic) != 0) throw FormatError("bad checkpoint magic", 0);
  std::size_t pos = magic_len;
  std::map<std::string, std::string> fields;
  for (;;) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("unterminated checkpoint header", pos);
    const std::string line = bytes.substr(pos, nl - pos);
    if (line == "end") {
      pos = nl + 1;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed header line '" + line + "'", pos);
    fields[line.substr(0, eq)] = line.substr(eq + 1);
    pos = nl + 1;
  }

  EncoderConfig cfg;
  auto take_size = [&](const char* key, std::size_t& out) {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError(std::string("header missing '") + key + "'", pos);
    const auto& s = it->second;
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw FormatError(std::string("bad value for '") + key + "'", pos);
    }
  };
  take_size("num_layers", cfg.num_layers);
  take_size("hidden_dim", cfg.hidden_dim);
  take_size("num_heads", cfg.num_heads);
  take_size("ffn_dim", cfg.ffn_dim);
  take_size("vocab_size", cfg.vocab_size);
  take_size("max_seq_len", cfg.max_seq_len);
  take_size("num_classes", cfg.num_classes);
  {
    auto it = fields.find("dropout_rate");
    if (it == fields.end()) throw FormatError("header missing 'dropout_rate'", pos);
    const auto& s = it->second;
    auto res = std::from_chars(s.data(), s.data() + s.size(), cfg.dropout_rate);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw FormatError("bad value for 'dropout_rate'", pos);
    }
  }
  if (fields.size() != 8) throw FormatError("unexpected keys in checkpoint header", pos);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid stored config: ") + e.what(), pos);
  }

  Encoder enc(cfg, 0);
  for (auto& [name, t] : enc.named_parameters()) {
    auto data = t.data();
    const std::size_t need = data.size() * sizeof(double);
    if (bytes.size() - pos < need) {
      throw FormatError("truncated checkpoint in parameter '" + name + "'", bytes.size());
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + pos + i * sizeof(double), sizeof(bits));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      data[i] = std::bit_cast<double>(bits);
    }
    pos += need;
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after parameters", pos);
  return enc;
}

Encoder load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  Encoder enc = load_checkpoint(path);
  if (!(enc.config() == expected)) {
    std::ostringstream os;
    os << "checkpoint config mismatch for " << path.string() << ":";
    const auto have = config_fields(enc.config());
    const auto want = config_fields(expected);
    for (std::size_t i = 0; i < have.size(); ++i) {
      if (have[i].second != want[i].second) {
        os << ' ' << have[i].first << " stored=" << have[i].second
           << " expected=" << want[i].second;
      }
    }
    throw ConfigError(os.str());
  }
  return enc;
}

std::uint64_t parameter_hash(const Encoder& encoder) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : encoder.parameters()) {
    for (double v : t.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace alpkd
