#include "unifier/encoder.hpp"

#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "unifier/util.hpp"

namespace unifier {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("EncoderConfig: " + why); };
  if (vocab_size < 3) fail("vocab_size must be >= 3");
  if (embed_dim == 0 || heads == 0) fail("embed_dim and heads must be positive");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (layers_ctx < 1 || layers_den < 1 || layers_lex < 1) fail("every stack needs >= 1 layer");
  if (max_seq_len < 3) fail("max_seq_len must leave room for [CLS] and [SEP]");
  if (cls_id == sep_id) fail("cls_id and sep_id must differ");
  if (cls_id >= vocab_size || sep_id >= vocab_size) fail("special token ids outside vocabulary");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
                     {"layers_ctx", c.layers_ctx}, {"layers_den", c.layers_den},
                     {"layers_lex", c.layers_lex}, {"heads", c.heads},
                     {"ffn_dim", c.ffn_dim},       {"max_seq_len", c.max_seq_len},
                     {"share_global", c.share_global}, {"cls_id", c.cls_id},
                     {"sep_id", c.sep_id}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.layers_ctx = j.value("layers_ctx", d.layers_ctx);
  c.layers_den = j.value("layers_den", d.layers_den);
  c.layers_lex = j.value("layers_lex", d.layers_lex);
  c.heads = j.value("heads", d.heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.share_global = j.value("share_global", d.share_global);
  c.cls_id = j.value("cls_id", d.cls_id);
  c.sep_id = j.value("sep_id", d.sep_id);
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::ctx: return "ctx";
    case ParamGroup::den: return "den";
    case ParamGroup::lex: return "lex";
    case ParamGroup::gate: return "gate";
  }
  return "?";
}

namespace {

nd::Tensor gaussian(std::vector<std::size_t> shape, std::mt19937_64& rng, double stddev = 0.02) {
  nd::Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = stddev * standard_normal(rng);
  return t;
}

nd::Tensor zeros(std::vector<std::size_t> shape) { return nd::Tensor(std::move(shape), 0.0); }
nd::Tensor ones(std::vector<std::size_t> shape) { return nd::Tensor(std::move(shape), 1.0); }

LayerParams init_layer(std::size_t e, std::size_t f, std::mt19937_64& rng) {
  LayerParams p;
  p.wq = gaussian({e, e}, rng);
  p.bq = zeros({e});
  p.wk = gaussian({e, e}, rng);
  p.bk = zeros({e});
  p.wv = gaussian({e, e}, rng);
  p.bv = zeros({e});
  p.wo = gaussian({e, e}, rng);
  p.bo = zeros({e});
  p.ln1_g = ones({e});
  p.ln1_b = zeros({e});
  p.w1 = gaussian({e, f}, rng);
  p.b1 = zeros({f});
  p.w2 = gaussian({f, e}, rng);
  p.b2 = zeros({e});
  p.ln2_g = ones({e});
  p.ln2_b = zeros({e});
  return p;
}

template <typename Layer, typename Fn>
void for_each_layer_tensor(Layer& l, const std::string& prefix, Fn&& fn) {
  fn(prefix + "wq", l.wq);
  fn(prefix + "bq", l.bq);
  fn(prefix + "wk", l.wk);
  fn(prefix + "bk", l.bk);
  fn(prefix + "wv", l.wv);
  fn(prefix + "bv", l.bv);
  fn(prefix + "wo", l.wo);
  fn(prefix + "bo", l.bo);
  fn(prefix + "ln1_g", l.ln1_g);
  fn(prefix + "ln1_b", l.ln1_b);
  fn(prefix + "w1", l.w1);
  fn(prefix + "b1", l.b1);
  fn(prefix + "w2", l.w2);
  fn(prefix + "b2", l.b2);
  fn(prefix + "ln2_g", l.ln2_g);
  fn(prefix + "ln2_b", l.ln2_b);
}

// Visits every encoder tensor in a fixed order with its name and group.
template <typename Params, typename Fn>
void for_each_param(Params& p, Fn&& fn) {
  fn(std::string("word_embedding"), ParamGroup::lex, p.word_embedding);
  fn(std::string("position_embedding"), ParamGroup::ctx, p.position_embedding);
  fn(std::string("embed_ln_g"), ParamGroup::ctx, p.embed_ln_g);
  fn(std::string("embed_ln_b"), ParamGroup::ctx, p.embed_ln_b);
  auto stack = [&](auto& layers, const char* name, ParamGroup g) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for_each_layer_tensor(layers[i], std::string(name) + "." + std::to_string(i) + ".",
                            [&](const std::string& n, auto& t) { fn(n, g, t); });
    }
  };
  stack(p.ctx, "ctx", ParamGroup::ctx);
  stack(p.den, "den", ParamGroup::den);
  stack(p.lex, "lex", ParamGroup::lex);
  fn(std::string("lex_bias"), ParamGroup::lex, p.lex_bias);
}

template <typename Gate, typename Fn>
void for_each_gate_param(Gate& g, Fn&& fn) {
  fn(std::string("gate.w1"), ParamGroup::gate, g.w1);
  fn(std::string("gate.b1"), ParamGroup::gate, g.b1);
  fn(std::string("gate.w2"), ParamGroup::gate, g.w2);
  fn(std::string("gate.b2"), ParamGroup::gate, g.b2);
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t e = config.embed_dim;
  const std::size_t f = config.ffn_width();
  EncoderParams p;
  p.word_embedding = gaussian({config.vocab_size, e}, rng);
  p.position_embedding = gaussian({config.max_seq_len, e}, rng);
  p.embed_ln_g = ones({e});
  p.embed_ln_b = zeros({e});
  for (std::size_t i = 0; i < config.layers_ctx; ++i) p.ctx.push_back(init_layer(e, f, rng));
  for (std::size_t i = 0; i < config.layers_den; ++i) p.den.push_back(init_layer(e, f, rng));
  for (std::size_t i = 0; i < config.layers_lex; ++i) p.lex.push_back(init_layer(e, f, rng));
  p.lex_bias = zeros({config.vocab_size});
  return p;
}

std::vector<NamedParam> EncoderParams::named() {
  std::vector<NamedParam> out;
  for_each_param(*this, [&](const std::string& n, ParamGroup g, nd::Tensor& t) {
    out.push_back({n, g, &t});
  });
  return out;
}

nd::NamedTensors EncoderParams::named_const() const {
  nd::NamedTensors out;
  for_each_param(*this, [&](const std::string& n, ParamGroup, const nd::Tensor& t) {
    out.emplace_back(n, &t);
  });
  return out;
}

std::vector<nd::Tensor*> EncoderParams::group(ParamGroup g) {
  std::vector<nd::Tensor*> out;
  for (auto& p : named()) {
    if (p.group == g) out.push_back(p.tensor);
  }
  return out;
}

void EncoderParams::zero_grad() {
  for (auto& p : named()) p.tensor->zero_grad();
}

GateParams GateParams::init(std::size_t embed_dim, std::size_t hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  GateParams g;
  g.w1 = gaussian({embed_dim, hidden}, rng);
  g.b1 = zeros({hidden});
  g.w2 = gaussian({hidden, 1}, rng);
  g.b2 = zeros({1});
  return g;
}

Model::Model(EncoderConfig cfg, std::uint64_t seed, bool with_gate)
    : config(cfg), params(EncoderParams::init(cfg, seed)) {
  if (with_gate) gate = GateParams::init(config.embed_dim, config.embed_dim, seed);
}

std::vector<NamedParam> Model::named() {
  auto out = params.named();
  if (gate) {
    for_each_gate_param(*gate, [&](const std::string& n, ParamGroup g, nd::Tensor& t) {
      out.push_back({n, g, &t});
    });
  }
  return out;
}

void Model::zero_grad() {
  for (auto& p : named()) p.tensor->zero_grad();
}

namespace {

nlohmann::json checkpoint_meta(const Model& m) {
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"config", m.config},
          {"has_gate", m.gate.has_value()}};
}

nd::NamedTensors checkpoint_tensors(const Model& m) {
  auto out = m.params.named_const();
  if (m.gate) {
    for_each_gate_param(*m.gate, [&](const std::string& n, ParamGroup, const nd::Tensor& t) {
      out.emplace_back(n, &t);
    });
  }
  return out;
}

}  // namespace

void Model::save(const std::filesystem::path& path) const {
  nd::save_tensors(path, checkpoint_meta(*this), checkpoint_tensors(*this));
}

std::string Model::fingerprint() const {
  std::ostringstream out(std::ios::binary);
  nd::write_tensors(out, checkpoint_meta(*this), checkpoint_tensors(*this));
  return content_hash(out.str());
}

Model Model::load(const std::filesystem::path& path) {
  auto file = nd::load_tensors(path);
  if (file.meta.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error(path.string() + " is not a unifier checkpoint");
  }
  if (file.meta.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version");
  }
  Model m;
  m.config = file.meta.at("config").get<EncoderConfig>();
  m.config.validate();
  // Shapes come from a fresh init; values are then overwritten by name.
  m.params = EncoderParams::init(m.config, 0);
  if (file.meta.value("has_gate", false)) m.gate = GateParams::init(m.config.embed_dim, m.config.embed_dim, 0);
  for (auto& p : m.named()) {
    auto it = file.tensors.find(p.name);
    if (it == file.tensors.end()) throw std::runtime_error(path.string() + ": missing tensor " + p.name);
    if (it->second.shape() != p.tensor->shape()) {
      throw std::runtime_error(path.string() + ": shape mismatch for " + p.name);
    }
    std::copy(it->second.data().begin(), it->second.data().end(), p.tensor->mutable_data().begin());
  }
  return m;
}

// ---------------------------------------------------------------- forward

namespace {

struct Binder {
  nd::Tape& tape;
  bool frozen;
  nd::Var operator()(nd::Tensor& t) const { return frozen ? tape.frozen(t) : tape.param(t); }
};

nd::Var linear(const Binder& bind, nd::Var x, nd::Tensor& w, nd::Tensor& b) {
  return nd::add_row(nd::matmul(x, bind(w)), bind(b));
}

nd::Var transformer_layer(const Binder& bind, LayerParams& l, nd::Var x, std::size_t heads) {
  auto q = linear(bind, x, l.wq, l.bq);
  auto k = linear(bind, x, l.wk, l.bk);
  auto v = linear(bind, x, l.wv, l.bv);
  auto attn = linear(bind, nd::self_attention(q, k, v, heads), l.wo, l.bo);
  auto h = nd::layer_norm(nd::add(x, attn), bind(l.ln1_g), bind(l.ln1_b));
  auto ff = linear(bind, nd::gelu(linear(bind, h, l.w1, l.b1)), l.w2, l.b2);
  return nd::layer_norm(nd::add(h, ff), bind(l.ln2_g), bind(l.ln2_b));
}

nd::Var run_stack(const Binder& bind, std::vector<LayerParams>& layers, nd::Var x,
                  std::size_t heads) {
  for (auto& l : layers) x = transformer_layer(bind, l, x, heads);
  return x;
}

}  // namespace

nd::Var contextualize(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                      std::span<const TermId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("contextualize: empty input");
  if (tokens.size() + 2 > config.max_seq_len) {
    throw std::invalid_argument("contextualize: input of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_seq_len " +
                                std::to_string(config.max_seq_len) + " with [CLS]/[SEP]");
  }
  std::vector<std::uint32_t> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(config.cls_id);
  for (TermId t : tokens) {
    if (t >= config.vocab_size) {
      throw std::invalid_argument("contextualize: token id " + std::to_string(t) +
                                  " outside vocabulary");
    }
    ids.push_back(t);
  }
  ids.push_back(config.sep_id);
  std::vector<std::uint32_t> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::uint32_t>(i);

  Binder bind{tape, false};
  auto x = nd::add(nd::gather_rows(bind(params.word_embedding), ids),
                   nd::gather_rows(bind(params.position_embedding), positions));
  x = nd::layer_norm(x, bind(params.embed_ln_g), bind(params.embed_ln_b));
  return run_stack(bind, params.ctx, x, config.heads);
}

nd::Var dense_head(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config, nd::Var H,
                   bool frozen_den) {
  Binder bind{tape, frozen_den};
  return nd::slice_rows(run_stack(bind, params.den, H, config.heads), 0, 1);
}

nd::Var lexicon_logits(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                       nd::Var H, nd::Var global) {
  Binder bind{tape, false};
  std::vector<nd::Var> rows{global, nd::slice_rows(H, 1, H.rows() - 1)};
  auto z = run_stack(bind, params.lex, nd::concat_rows(rows), config.heads);
  return nd::add_row(nd::matmul_nt(z, bind(params.word_embedding)), bind(params.lex_bias));
}

nd::Var saturate(nd::Var logits) {
  return nd::log1p(nd::max_pool_over_positions(nd::relu(logits)));
}

DualVars encode_on_tape(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                        std::span<const TermId> tokens) {
  auto H = contextualize(tape, params, config, tokens);
  auto u = dense_head(tape, params, config, H);
  nd::Var global;
  if (!config.share_global) {
    global = nd::slice_rows(H, 0, 1);
  } else if (tape.recording()) {
    global = dense_head(tape, params, config, H, /*frozen_den=*/true);
  } else {
    global = u;
  }
  return {u, saturate(lexicon_logits(tape, params, config, H, global))};
}

nd::Var gate_on_tape(nd::Tape& tape, GateParams& gate, nd::Var u) {
  Binder bind{tape, false};
  auto h = nd::tanh(linear(bind, u, gate.w1, gate.b1));
  return nd::sigmoid(linear(bind, h, gate.w2, gate.b2));
}

DualRepr encode(const Model& model, std::span<const TermId> tokens) {
  nd::Tape tape(/*record=*/false);
  // A non-recording tape only ever reads parameters.
  auto& params = const_cast<EncoderParams&>(model.params);
  auto vars = encode_on_tape(tape, params, model.config, tokens);
  auto u = vars.dense.values();
  return {DenseVec(std::vector<double>(u.begin(), u.end())),
          SparseLexVec::from_dense(vars.lex.values())};
}

std::vector<DualRepr> encode_all(const Model& model, std::span<const Document> docs) {
  std::vector<DualRepr> out(docs.size());
  parallel_for(docs.size(), [&](std::size_t i) {
    try {
      out[i] = encode(model, docs[i].tokens);
    } catch (const std::exception& e) {
      throw std::runtime_error("encoding " + docs[i].id + " failed: " + e.what());
    }
  });
  return out;
}

double gate_value(const Model& model, const DenseVec& u) {
  if (!model.gate) throw std::logic_error("model has no gate parameters");
  nd::Tape tape(false);
  auto& gate = const_cast<GateParams&>(*model.gate);
  auto uv = tape.constant(1, u.size(), std::vector<double>(u.values().begin(), u.values().end()));
  return gate_on_tape(tape, gate, uv).item();
}

}  // namespace unifier
