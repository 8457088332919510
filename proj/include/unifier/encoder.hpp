#pragma once

// Dual-representation encoder: a shared transformer trunk feeding a dense
// head (CLS embedding after its own stack) and a lexicon head that re-reads the
// trunk states with the dense vector in the CLS slot, projects every position
// onto the vocabulary through the tied word embedding, and saturates with
// log(1 + maxpool(relu(.))).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unifier/nd.hpp"
#include "unifier/repr.hpp"

namespace unifier {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t layers_ctx = 2;
  std::size_t layers_den = 2;
  std::size_t layers_lex = 1;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;  ///< 0 means 4 * embed_dim
  /// Upper bound on the wrapped length [CLS] x [SEP].
  std::size_t max_seq_len = kDefaultMaxSeqLen;
  /// false swaps the dense vector in the lexicon input for the trunk CLS state.
  bool share_global = true;
  TermId cls_id = 1;
  TermId sep_id = 2;

  [[nodiscard]] std::size_t ffn_width() const { return ffn_dim == 0 ? 4 * embed_dim : ffn_dim; }
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

enum class ParamGroup { ctx, den, lex, gate };

std::string to_string(ParamGroup g);

/// Post-LN transformer block.
struct LayerParams {
  nd::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  nd::Tensor ln1_g, ln1_b;
  nd::Tensor w1, b1, w2, b2;
  nd::Tensor ln2_g, ln2_b;
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  nd::Tensor* tensor;
};

/// The parameter partition. The word embedding is the lexicon head's output
/// projection and is therefore filed under the lexicon group, although the
/// trunk also reads it as its input embedding.
class EncoderParams {
 public:
  EncoderParams() = default;

  /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
  static EncoderParams init(const EncoderConfig& config, std::uint64_t seed);

  nd::Tensor word_embedding;      // |V| x e
  nd::Tensor position_embedding;  // max_seq_len x e
  nd::Tensor embed_ln_g, embed_ln_b;
  std::vector<LayerParams> ctx;
  std::vector<LayerParams> den;
  std::vector<LayerParams> lex;
  nd::Tensor lex_bias;  // 1 x |V|

  [[nodiscard]] std::vector<NamedParam> named();
  [[nodiscard]] nd::NamedTensors named_const() const;
  [[nodiscard]] std::vector<nd::Tensor*> group(ParamGroup g);
  void zero_grad();
};

/// Query-side gate: u -> sigmoid(w2 . tanh(W1 u + b1) + b2).
struct GateParams {
  nd::Tensor w1, b1, w2, b2;

  static GateParams init(std::size_t embed_dim, std::size_t hidden, std::uint64_t seed);
};

struct DualRepr {
  DenseVec dense;
  SparseLexVec lex;

  friend bool operator==(const DualRepr&, const DualRepr&) = default;
};

/// Encoder configuration, parameters and the optional gate, saved together.
class Model {
 public:
  Model() = default;
  Model(EncoderConfig config, std::uint64_t seed, bool with_gate = false);

  EncoderConfig config;
  EncoderParams params;
  std::optional<GateParams> gate;

  /// Every trainable tensor with its group, gate included when present.
  [[nodiscard]] std::vector<NamedParam> named();
  void zero_grad();

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);
  /// Content hash of the serialized checkpoint; equals file_hash() of save().
  [[nodiscard]] std::string fingerprint() const;
};

inline constexpr const char* kCheckpointFormat = "unifier-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// Tape-level encoder. `track` selects gradient-tracked parameter nodes; the
// inference entry points below use a non-recording tape.

struct DualVars {
  nd::Var dense;  // 1 x e
  nd::Var lex;    // 1 x |V|, post log1p
};

/// (n + 2) x e trunk states for [CLS] tokens [SEP]. Throws
/// std::invalid_argument on overlength or out-of-vocabulary input.
nd::Var contextualize(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                      std::span<const TermId> tokens);

/// CLS row of the dense stack applied to H. With frozen_den the dense stack
/// reads its parameters as constants: values are identical but no gradient
/// reaches the dense-group parameters.
nd::Var dense_head(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config, nd::Var H,
                   bool frozen_den = false);

/// Pre-ReLU vocabulary logits, (n + 2) x |V|, of the lexicon stack over
/// [global, h_1, ..., h_SEP].
nd::Var lexicon_logits(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                       nd::Var H, nd::Var global);

/// log(1 + maxpool(relu(logits))) as a 1 x |V| row.
nd::Var saturate(nd::Var logits);

/// Full dual encoding. The lexicon input uses u from a dense stack with frozen
/// parameters, so lexicon losses reach the trunk through u but never the dense
/// group.
DualVars encode_on_tape(nd::Tape& tape, EncoderParams& params, const EncoderConfig& config,
                        std::span<const TermId> tokens);

nd::Var gate_on_tape(nd::Tape& tape, GateParams& gate, nd::Var u);

DualRepr encode(const Model& model, std::span<const TermId> tokens);
/// Encodes many sequences over the configured worker threads; order preserved.
std::vector<DualRepr> encode_all(const Model& model, std::span<const Document> docs);
double gate_value(const Model& model, const DenseVec& u);

}  // namespace unifier
