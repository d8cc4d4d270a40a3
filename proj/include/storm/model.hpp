#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "storm/autodiff.hpp"
#include "storm/tensor.hpp"

namespace storm::model {

using num::Graph;
using num::ParamSet;
using num::Tensor;
using num::Var;

struct ModelConfig {
  int d = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 64;
  int vocab_size = 37;
  int patch_size = 4;
  int grid = 8;
  int channels = 1;
  std::uint64_t seed = 0;
  bool feedback_projection = false;
  double ln_epsilon = 1e-5;

  int patch_dim() const { return patch_size * patch_size * channels; }
  int patches_per_frame() const { return (grid / patch_size) * (grid / patch_size); }

  // Throws Config on d % n_heads != 0, grid % patch_size != 0 or non-positive sizes.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

enum class Role { VideoToken, LatentFeedback };

struct Continuous {
  std::vector<double> vector;
  Role role = Role::VideoToken;
};

// One input position: a discrete token id or a width-d continuous vector.
struct InputElement {
  std::variant<int, Continuous> value;

  static InputElement token(int id) { return {id}; }
  static InputElement video(std::vector<double> v) { return {Continuous{std::move(v), Role::VideoToken}}; }
  static InputElement feedback(std::vector<double> v) { return {Continuous{std::move(v), Role::LatentFeedback}}; }

  bool is_token() const { return std::holds_alternative<int>(value); }
  int id() const { return std::get<int>(value); }
  const Continuous& continuous() const { return std::get<Continuous>(value); }
};

// Parameter tensors and their layout. Construction initialises every tensor
// deterministically from config.seed.
class Model {
 public:
  explicit Model(ModelConfig config);
  Model(ModelConfig config, ParamSet params);  // validates names and shapes

  const ModelConfig& config() const noexcept { return config_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  struct LayerIds {
    std::size_t ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Ids {
    std::size_t tok_emb, vis_w, vis_b, lnf_g, lnf_b, out_w;
    std::size_t fb_w = SIZE_MAX, fb_b = SIZE_MAX;
    std::vector<LayerIds> layers;
  };
  const Ids& ids() const noexcept { return ids_; }

  bool operator==(const Model& other) const { return config_ == other.config_ && params_ == other.params_; }

 private:
  void index_params();

  ModelConfig config_;
  ParamSet params_;
  Ids ids_;
};

// Parameter layout as (name, shape) pairs in creation order.
std::vector<std::pair<std::string, num::Shape>> parameter_layout(const ModelConfig& config);

// Fixed sinusoidal encoding for positions [start, start + count).
Tensor positional_encoding(std::size_t start, std::size_t count, std::size_t d);

// Graph-bound transformer over a growing sequence. Appending rows runs every
// layer with causal attention over everything appended before, so one
// session can interleave batched segments with single continuous positions.
class Session {
 public:
  // `trainable` non-null binds parameters for gradients (the graph must be
  // recording); otherwise parameters are read-only views.
  Session(Graph& g, const Model& model, ParamSet* trainable = nullptr);

  std::size_t length() const noexcept { return length_; }
  Graph& graph() noexcept { return g_; }

  // Token embeddings for `ids`, no positions added.
  Var token_rows(std::span<const int> ids);
  // patches [n x patch_dim] -> visual tokens [n x d].
  Var project_patches(Var patches);
  // Latent feedback transform applied to a hidden row (identity by default).
  Var feedback(Var hidden);
  // Embeds mixed elements (no positions).
  Var element_rows(std::span<const InputElement> elements);
  // rows + positional encoding for positions [length(), length() + rows).
  Var with_positions(Var rows);

  // Runs all layers over `x` (already embedded and positioned) at positions
  // [length(), length() + rows). Returns final-normalised hidden rows.
  Var append(Var x);
  Var logits(Var hidden);

  // Seeds the key/value history from a decode cache.
  void load_history(const std::vector<Tensor>& keys, const std::vector<Tensor>& values, std::size_t length);
  const Tensor& keys(std::size_t layer) const { return g_.value(keys_[layer]); }
  const Tensor& values(std::size_t layer) const { return g_.value(values_[layer]); }

 private:
  Var bind(std::size_t i);

  Graph& g_;
  const Model& model_;
  ParamSet* trainable_;
  std::vector<Var> bound_;
  std::vector<Var> keys_, values_;
  std::size_t length_ = 0;
};

// ---- plain inference API -----------------------------------------------------

Tensor embed_inputs(std::span<const InputElement> elements, const Model& model);

struct ForwardResult {
  Tensor hidden;  // [len x d], post final normalisation
  Tensor logits;  // [len x vocab]
};

ForwardResult forward(std::span<const InputElement> elements, const Model& model);

struct DecodeCache {
  std::vector<Tensor> keys;    // per layer [length x d]
  std::vector<Tensor> values;  // per layer [length x d]
  std::size_t length = 0;
};

struct StepResult {
  std::vector<double> hidden_last;
  std::vector<double> logits_last;
  Tensor hidden_rows;  // every appended position, [n x d]
};

// Appends the elements (usually one) to the cache and returns the outputs of
// the last appended position.
StepResult forward_incremental(std::span<const InputElement> elements, DecodeCache& cache, const Model& model);
StepResult forward_incremental(const InputElement& element, DecodeCache& cache, const Model& model);

}  // namespace storm::model
