#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storm/model.hpp"

namespace storm::rollout {

using model::InputElement;
using model::StepResult;

struct DecodeMode {
  enum Kind { Text, Latent } kind = Text;
  int slots_used = 0;

  static DecodeMode text() { return {Text, 0}; }
  static DecodeMode latent(int s) { return {Latent, s}; }
  bool operator==(const DecodeMode&) const = default;
};

struct Decision {
  int emitted = 0;
  DecodeMode next;
  // Inputs to feed next: one element, or the final pad's feedback followed by
  // the forced LATENT_END.
  std::vector<InputElement> next_inputs;
  bool forced_close = false;
};

int argmax(std::span<const double> logits);

Decision decode_step(const DecodeMode& mode, std::span<const double> last_hidden, std::span<const double> last_logits,
                     int budget);

// Anything that can append positions and report the last outputs. The model
// backed implementation keeps a DecodeCache; tests substitute scripted stubs.
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual std::size_t max_seq_len() const = 0;
  virtual StepResult append(std::span<const InputElement> elements) = 0;
};

class ModelDecoder final : public Decoder {
 public:
  explicit ModelDecoder(const model::Model& m) : model_(m) {}
  std::size_t max_seq_len() const override { return static_cast<std::size_t>(model_.config().max_seq_len); }
  StepResult append(std::span<const InputElement> elements) override;

 private:
  const model::Model& model_;
  model::DecodeCache cache_;
};

struct TraceStep {
  DecodeMode mode_before;
  int emitted = 0;
  bool feedback_input = false;  // the position fed for this token carried LATENT_FEEDBACK
  bool forced_close = false;    // a LATENT_END was force-inserted after this pad
};

struct RolloutTrace {
  std::vector<TraceStep> steps;
  // Every element appended after the prompt and its hidden state, in order.
  std::vector<InputElement> inputs;
  std::vector<std::vector<double>> hidden;
  // Hidden states at the latent slot positions (one per pad).
  std::vector<std::vector<double>> latent_states;
  // Hidden states at positions fed with answer tokens (EOS excluded).
  std::vector<std::vector<double>> answer_states;

  std::size_t prompt_len = 0;
  int slots_used = 0;
  int decode_passes = 0;
  int prefill_passes = 0;
  std::size_t prefill_positions = 0;
  int answer_len = 0;
  bool forced_close = false;
  bool truncated = false;
};

struct RolloutOptions {
  int budget = 8;
  int max_answer_len = 2;  // text-mode emissions after the prompt, EOS included
  bool force_latent_entry = true;
  // SIMULATED_TOOL: re-run the full prompt this many times. Honoured by the
  // model overload only.
  int extra_prefills = 0;
};

struct RolloutResult {
  std::vector<int> answer;  // EOS excluded
  RolloutTrace trace;
};

RolloutResult run_inference(std::span<const InputElement> prompt, Decoder& decoder, const RolloutOptions& options);
RolloutResult run_inference(std::span<const InputElement> prompt, const model::Model& m, const RolloutOptions& options);

// Emitted token stream after the prompt, forced LATENT_END tokens included.
std::vector<int> emitted_tokens(const RolloutTrace& trace);

// Checks the budget and segment invariants of a finished trace; returns one
// message per violation.
std::vector<std::string> trace_violations(const RolloutTrace& trace, const RolloutOptions& options);

// JSON lines: one record per step, then a totals record.
std::string trace_to_jsonl(const RolloutTrace& trace);

}  // namespace storm::rollout
