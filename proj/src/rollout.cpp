#include "storm/rollout.hpp"

#include <json.hpp>

#include "storm/error.hpp"
#include "storm/vocab.hpp"

namespace storm::rollout {

int argmax(std::span<const double> logits) {
  if (logits.empty()) fail(ErrorKind::Dimension, "argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

Decision decode_step(const DecodeMode& mode, std::span<const double> last_hidden, std::span<const double> last_logits,
                     int budget) {
  if (budget <= 0) fail(ErrorKind::Config, "latent budget must be at least 1, got " + std::to_string(budget));
  const int top = argmax(last_logits);
  Decision d;
  if (mode.kind == DecodeMode::Text) {
    d.emitted = top;
    d.next = top == tok::LATENT_START ? DecodeMode::latent(0) : DecodeMode::text();
    d.next_inputs.push_back(InputElement::token(top));
    return d;
  }
  if (top == tok::LATENT_END) {
    d.emitted = tok::LATENT_END;
    d.next = DecodeMode::text();
    d.next_inputs.push_back(InputElement::token(tok::LATENT_END));
    return d;
  }
  d.emitted = tok::LATENT_PAD;
  d.next_inputs.push_back(InputElement::feedback({last_hidden.begin(), last_hidden.end()}));
  if (mode.slots_used + 1 >= budget) {
    d.forced_close = true;
    d.next = DecodeMode::text();
    d.next_inputs.push_back(InputElement::token(tok::LATENT_END));
  } else {
    d.next = DecodeMode::latent(mode.slots_used + 1);
  }
  return d;
}

StepResult ModelDecoder::append(std::span<const InputElement> elements) {
  return model::forward_incremental(elements, cache_, model_);
}

namespace {

struct Runner {
  Decoder& decoder;
  RolloutTrace& trace;
  StepResult last;

  void feed(std::vector<InputElement> elements) {
    last = decoder.append(elements);
    ++trace.decode_passes;
    for (std::size_t r = 0; r < elements.size(); ++r) {
      auto row = last.hidden_rows.row(r);
      trace.hidden.emplace_back(row.begin(), row.end());
      trace.inputs.push_back(std::move(elements[r]));
    }
  }
};

}  // namespace

RolloutResult run_inference(std::span<const InputElement> prompt, Decoder& decoder, const RolloutOptions& o) {
  if (o.budget <= 0) fail(ErrorKind::Config, "latent budget must be at least 1, got " + std::to_string(o.budget));
  if (o.max_answer_len <= 0) fail(ErrorKind::Config, "max_answer_len must be positive");
  if (prompt.empty()) fail(ErrorKind::Dimension, "empty prompt");
  const std::size_t need = prompt.size() + 2 + static_cast<std::size_t>(o.budget + o.max_answer_len);
  if (need > decoder.max_seq_len())
    fail(ErrorKind::SequenceLength, "prompt of " + std::to_string(prompt.size()) + " plus latent budget and answer needs " +
                                        std::to_string(need) + " positions, max_seq_len is " +
                                        std::to_string(decoder.max_seq_len()));

  RolloutResult out;
  RolloutTrace& t = out.trace;
  t.prompt_len = prompt.size();
  Runner run{decoder, t, {}};

  run.last = decoder.append(prompt);
  t.decode_passes = 1;
  t.prefill_passes = 1;
  t.prefill_positions = prompt.size();

  DecodeMode mode = DecodeMode::text();
  bool latent_done = false;
  int text_emitted = 0;

  auto emit_text = [&](int token) {
    ++text_emitted;
    if (token == tok::EOS) return;
    out.answer.push_back(token);
  };

  if (o.force_latent_entry) {
    t.steps.push_back({mode, tok::LATENT_START, false, false});
    run.feed({InputElement::token(tok::LATENT_START)});
    mode = DecodeMode::latent(0);
  }

  for (;;) {
    if (mode.kind == DecodeMode::Text && text_emitted >= o.max_answer_len) {
      t.truncated = true;
      break;
    }
    Decision d = decode_step(mode, run.last.hidden_last, run.last.logits_last, o.budget);
    if (mode.kind == DecodeMode::Text && (latent_done || d.emitted != tok::LATENT_START)) {
      // Only one latent segment per rollout; a second LATENT_START is plain text.
      d.next = DecodeMode::text();
      emit_text(d.emitted);
    }
    TraceStep step{mode, d.emitted, !d.next_inputs.front().is_token(), d.forced_close};
    t.steps.push_back(step);

    const std::size_t first_new = t.hidden.size();
    run.feed(std::move(d.next_inputs));
    if (d.emitted == tok::LATENT_PAD && mode.kind == DecodeMode::Latent) {
      ++t.slots_used;
      t.latent_states.push_back(t.hidden[first_new]);
    } else if (mode.kind == DecodeMode::Text && d.next.kind == DecodeMode::Text && d.emitted != tok::EOS) {
      t.answer_states.push_back(t.hidden[first_new]);
    }
    if (mode.kind == DecodeMode::Latent && d.next.kind == DecodeMode::Text) latent_done = true;
    if (d.forced_close) t.forced_close = true;

    if (mode.kind == DecodeMode::Text && d.emitted == tok::EOS) break;
    mode = d.next;
  }
  out.trace.answer_len = static_cast<int>(out.answer.size());
  return out;
}

RolloutResult run_inference(std::span<const InputElement> prompt, const model::Model& m, const RolloutOptions& o) {
  for (int i = 0; i < o.extra_prefills; ++i) {
    model::DecodeCache scratch;
    model::forward_incremental(prompt, scratch, m);
  }
  ModelDecoder decoder(m);
  RolloutResult r = run_inference(prompt, decoder, o);
  r.trace.decode_passes += o.extra_prefills;
  r.trace.prefill_passes += o.extra_prefills;
  r.trace.prefill_positions += static_cast<std::size_t>(o.extra_prefills) * prompt.size();
  return r;
}

std::vector<int> emitted_tokens(const RolloutTrace& trace) {
  std::vector<int> out;
  for (const TraceStep& s : trace.steps) {
    out.push_back(s.emitted);
    if (s.forced_close) out.push_back(tok::LATENT_END);
  }
  return out;
}

std::vector<std::string> trace_violations(const RolloutTrace& t, const RolloutOptions& o) {
  std::vector<std::string> bad;
  int pads = 0, segments = 0, ends = 0, forced = 0;
  bool in_segment = false, closed = false;
  for (const TraceStep& s : t.steps) {
    if (s.forced_close) ++forced;
    if (s.feedback_input && closed) bad.push_back("LATENT_FEEDBACK input after the latent segment closed");
    if (s.mode_before.kind == DecodeMode::Latent) {
      if (!in_segment) bad.push_back("latent step outside a segment");
      if (s.emitted == tok::LATENT_PAD) ++pads;
      if (s.emitted == tok::LATENT_END || s.forced_close) {
        ++ends;
        in_segment = false;
        closed = true;
      }
    } else if (s.emitted == tok::LATENT_START && !closed && !in_segment) {
      in_segment = true;
      ++segments;
    }
  }
  const auto emitted = static_cast<int>(emitted_tokens(t).size());
  if (pads > o.budget) bad.push_back(std::to_string(pads) + " pads exceed budget " + std::to_string(o.budget));
  if (pads != t.slots_used) bad.push_back("slots_used disagrees with the pad count");
  if (in_segment) bad.push_back("latent segment never closed");
  if (ends != segments) bad.push_back(std::to_string(ends) + " LATENT_END for " + std::to_string(segments) + " segments");
  if (forced > 1) bad.push_back("more than one forced close");
  if (t.forced_close != (forced == 1)) bad.push_back("forced_close total disagrees with the steps");
  if (t.forced_close != (pads == o.budget)) bad.push_back("forced_close does not match budget exhaustion");
  if (emitted > 2 + o.budget + o.max_answer_len)
    bad.push_back(std::to_string(emitted) + " tokens emitted after the prompt, bound is " +
                  std::to_string(2 + o.budget + o.max_answer_len));
  if (t.decode_passes != t.prefill_passes + emitted - forced)
    bad.push_back("decode_passes " + std::to_string(t.decode_passes) + " != prefill + emitted - forced");
  return bad;
}

std::string trace_to_jsonl(const RolloutTrace& trace) {
  const Vocab& v = Vocab::standard();
  std::string out;
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const TraceStep& s = trace.steps[i];
    nlohmann::ordered_json j;
    j["step"] = i;
    j["mode"] = s.mode_before.kind == DecodeMode::Text ? "TEXT" : "LATENT";
    j["slots_used"] = s.mode_before.slots_used;
    j["token"] = s.emitted >= 0 && s.emitted < v.size() ? v.name(s.emitted) : std::to_string(s.emitted);
    j["input"] = s.feedback_input ? "LATENT_FEEDBACK" : "DISCRETE";
    j["forced_close"] = s.forced_close;
    out += j.dump();
    out += '\n';
  }
  nlohmann::ordered_json totals;
  totals["slots_used"] = trace.slots_used;
  totals["decode_passes"] = trace.decode_passes;
  totals["answer_len"] = trace.answer_len;
  totals["forced_close"] = trace.forced_close;
  totals["truncated"] = trace.truncated;
  out += totals.dump();
  out += '\n';
  return out;
}

}  // namespace storm::rollout
