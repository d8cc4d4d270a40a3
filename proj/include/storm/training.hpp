#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "storm/datagen.hpp"
#include "storm/model.hpp"
#include "storm/optim.hpp"
#include "storm/supervision.hpp"

namespace storm::train {

using num::Graph;
using num::Tensor;
using num::Var;

enum class Stage { One = 1, Two = 2 };

struct StageConfig {
  Stage stage = Stage::One;
  double lambda = 0.1;  // Stage One only
  double learning_rate = 3e-4;
  int steps = -1;  // negative: epochs * dataset size
  int epochs = 1;
  std::uint64_t seed = 0;
  int k = 8;
  double clip = 1.0;
  double weight_decay = 0.0;
  bool lr_decay = false;  // linear decay from learning_rate towards zero over the stage
  bool latent_end_loss = false;

  void validate() const;
  int total_steps(std::size_t dataset_size) const;
};

// ---- losses ---------------------------------------------------------------------

// (1/K) sum_i ||z_i - g_i||^2: division by K only.
double latent_loss(const Tensor& z, const Tensor& g);
Var latent_loss(Graph& graph, Var z, Var g);

double stage1_loss(double l_ans, double l_latent, double lambda);

struct AnswerLoss {
  double normalized = 0.0;  // mean over masked positions
  double sum = 0.0;         // the displayed negative log-likelihood
  std::size_t count = 0;
};

// Logits row t predicts the element at t+1; masked targets only.
AnswerLoss answer_loss(const Tensor& logits, const sup::SequenceLayout& layout);

// Per-position targets for `rows` consecutive logits rows starting at
// position `first`, -1 where the following position is unmasked.
std::vector<int> shifted_targets(const sup::SequenceLayout& layout, std::size_t first, std::size_t rows);

// One sample's differentiable forward with sequential latent feedback.
struct SampleGraph {
  Var z;             // [K x d] hidden states at the latent slots
  Var l_ans;         // normalised answer loss
  Var l_ans_sum;     // unnormalised
  Var l_latent;      // invalid in Stage Two
  Var total;
  std::size_t masked = 0;
};

// `trainable` (the model's own parameters, or null) binds parameters for
// gradients. `targets` may be any graph value; Stage Two ignores it.
SampleGraph build_sample_graph(Graph& g, const model::Model& m, num::ParamSet* trainable,
                               const data::VideoSample& s, std::optional<Var> targets, const StageConfig& c);

// ---- training loop ----------------------------------------------------------------

struct StepRecord {
  int step = 0;
  std::uint32_t sample_id = 0;
  double l_ans = 0.0;
  double l_ans_sum = 0.0;
  std::optional<double> l_latent;
  double total = 0.0;
  double grad_norm = 0.0;
};

struct TrainReport {
  Stage stage = Stage::One;
  std::vector<StepRecord> rows;
  std::string checkpoint;
  double wall_seconds = 0.0;
};

std::string report_csv(const TrainReport& r);

// Sample order for epoch `epoch`: a seeded permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// Batch size one, clipped global norm, Adam with a fresh state.
// `targets` (Stage One) is indexed like `samples`.
TrainReport run_stage(model::Model& m, const std::vector<data::VideoSample>& samples,
                      const std::vector<sup::PooledTargets>* targets, const StageConfig& c);

struct PipelineResult {
  model::Model model;
  TrainReport stage1, stage2;
  std::filesystem::path stage1_checkpoint, stage2_checkpoint;
};

// Stage One then Stage Two on the same parameters. Targets come from an
// encoder snapshot taken before Stage One and are cached in `target_cache_dir`
// (empty: no cache). Checkpoints go to out_dir/stage1.ckpt and stage2.ckpt
// when out_dir is non-empty.
PipelineResult two_stage_pipeline(const std::vector<data::VideoSample>& train, const model::ModelConfig& mc,
                                  const StageConfig& s1, const StageConfig& s2,
                                  const std::filesystem::path& out_dir = {},
                                  const std::filesystem::path& target_cache_dir = {});
// Same, continuing from `init` (for example a loaded checkpoint).
PipelineResult two_stage_pipeline(model::Model init, const std::vector<data::VideoSample>& train,
                                  const StageConfig& s1, const StageConfig& s2,
                                  const std::filesystem::path& out_dir = {},
                                  const std::filesystem::path& target_cache_dir = {});

// ---- evaluation ----------------------------------------------------------------------

struct Prediction {
  std::uint32_t sample_id = 0;
  data::QuestionKind kind{};
  std::vector<int> predicted;
  std::vector<int> expected;
  bool correct = false;
};

struct EvalResult {
  std::vector<Prediction> predictions;
  double accuracy = 0.0;
  // DIRECTION_BEFORE, DIRECTION_AFTER and HAS_EVENT questions only.
  double direction_event_accuracy = 0.0;
  std::size_t direction_event_count = 0;
};

EvalResult evaluate(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                    bool force_latent_entry = true);

struct LossSummary {
  double l_ans = 0.0;
  double l_latent = 0.0;
};
// Mean losses over samples under teacher forcing, without updates.
LossSummary mean_losses(const model::Model& m, const std::vector<data::VideoSample>& samples,
                        const std::vector<sup::PooledTargets>& targets, int k);

}  // namespace storm::train
