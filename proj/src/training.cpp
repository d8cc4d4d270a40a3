#include "storm/training.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "storm/checkpoint.hpp"
#include "storm/error.hpp"
#include "storm/rollout.hpp"
#include "storm/vocab.hpp"

namespace storm::train {

using sup::Span;

void StageConfig::validate() const {
  if (!(lambda >= 0.0)) fail(ErrorKind::Config, "lambda must be non-negative, got " + std::to_string(lambda));
  if (!(learning_rate > 0.0)) fail(ErrorKind::Config, "learning rate must be positive");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::Config, "weight decay must be non-negative");
  if (k < 1) fail(ErrorKind::Config, "latent budget K must be at least 1");
  if (steps < 0 && epochs < 0) fail(ErrorKind::Config, "epochs must be non-negative");
}

int StageConfig::total_steps(std::size_t n) const { return steps >= 0 ? steps : epochs * static_cast<int>(n); }

double latent_loss(const Tensor& z, const Tensor& g) {
  if (z.shape() != g.shape() || z.rank() != 2)
    fail(ErrorKind::Dimension, "latent loss needs equal [K x d] shapes, got " + num::shape_str(z.shape()) + " and " +
                                   num::shape_str(g.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - g[i];
    s += d * d;
  }
  return s / static_cast<double>(z.rows());
}

Var latent_loss(Graph& graph, Var z, Var g) {
  const auto k = static_cast<double>(graph.value(z).rows());
  return num::scale(graph, num::sum_squares(graph, num::sub(graph, z, g)), 1.0 / k);
}

double stage1_loss(double l_ans, double l_latent, double lambda) {
  if (!(lambda >= 0.0)) fail(ErrorKind::Config, "lambda must be non-negative");
  return l_ans + lambda * l_latent;
}

std::vector<int> shifted_targets(const sup::SequenceLayout& L, std::size_t first, std::size_t rows) {
  std::vector<int> t(rows, -1);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t next = first + r + 1;
    if (next < L.size() && L.loss_mask[next]) t[r] = L.targets[next];
  }
  return t;
}

AnswerLoss answer_loss(const Tensor& logits, const sup::SequenceLayout& L) {
  if (logits.rows() != L.size())
    fail(ErrorKind::Dimension, "answer loss needs one logits row per position (" + std::to_string(L.size()) + "), got " +
                                   std::to_string(logits.rows()));
  const auto targets = shifted_targets(L, 0, L.size());
  AnswerLoss out;
  const auto v = static_cast<int>(logits.cols());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int t = targets[r];
    if (t < 0) continue;
    if (t >= v) fail(ErrorKind::Vocabulary, "answer target " + std::to_string(t) + " outside vocabulary");
    auto row = logits.row(r);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    out.sum += -(row[static_cast<std::size_t>(t)] - mx - std::log(z));
    ++out.count;
  }
  if (out.count == 0) fail(ErrorKind::Config, "answer loss mask is empty");
  out.normalized = out.sum / static_cast<double>(out.count);
  return out;
}

SampleGraph build_sample_graph(Graph& g, const model::Model& m, num::ParamSet* trainable, const data::VideoSample& s,
                               std::optional<Var> targets, const StageConfig& c) {
  const auto L = sup::build_sequence_layout(s, m, c.k, c.latent_end_loss);
  model::Session ss(g, m, trainable);

  std::vector<int> head{tok::BOS};
  std::vector<int> question(s.question);
  question.push_back(tok::LATENT_START);
  const Var parts[] = {ss.token_rows(head), ss.project_patches(g.constant(sup::keyframe_patches(s, m.config()))),
                       ss.token_rows(question)};
  const Var prefix = ss.append(ss.with_positions(num::concat_rows(g, parts)));
  const std::size_t n_prefix = g.value(prefix).rows();

  // Slot i is fed the hidden state of the position before it.
  std::vector<Var> slots;
  Var prev = num::slice_rows(g, prefix, n_prefix - 1, n_prefix);
  for (int i = 0; i < c.k; ++i) {
    prev = ss.append(ss.with_positions(ss.feedback(prev)));
    slots.push_back(prev);
  }

  std::vector<int> tail{tok::LATENT_END};
  tail.insert(tail.end(), s.answer.begin(), s.answer.end());
  tail.push_back(tok::EOS);
  const Var tail_h = ss.append(ss.with_positions(ss.token_rows(tail)));

  SampleGraph out;
  out.z = num::concat_rows(g, slots);
  Var rows = tail_h;
  std::size_t first = L.span(Span::LatentEnd).begin;
  if (c.latent_end_loss) {
    const Var both[] = {slots.back(), tail_h};
    rows = num::concat_rows(g, both);
    --first;
  }
  const auto tg = shifted_targets(L, first, g.value(rows).rows());
  for (int t : tg) out.masked += t >= 0;
  out.l_ans_sum = num::cross_entropy_sum(g, ss.logits(rows), tg);
  out.l_ans = num::scale(g, out.l_ans_sum, 1.0 / static_cast<double>(out.masked));
  if (c.stage == Stage::One) {
    if (!targets) fail(ErrorKind::Config, "Stage One needs latent targets");
    out.l_latent = latent_loss(g, out.z, *targets);
    out.total = num::add(g, out.l_ans, num::scale(g, out.l_latent, c.lambda));
  } else {
    out.total = out.l_ans;
  }
  return out;
}

std::string report_csv(const TrainReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "step,l_ans,l_latent,total,grad_norm,l_ans_sum,sample_id\n";
  for (const auto& row : r.rows) {
    out << row.step << ',' << row.l_ans << ',';
    if (row.l_latent) out << *row.l_latent;
    out << ',' << row.total << ',' << row.grad_norm << ',' << row.l_ans_sum << ',' << row.sample_id << '\n';
  }
  return out.str();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 gen(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[gen() % i]);
  return order;
}

TrainReport run_stage(model::Model& m, const std::vector<data::VideoSample>& samples,
                      const std::vector<sup::PooledTargets>* targets, const StageConfig& c) {
  c.validate();
  TrainReport report;
  report.stage = c.stage;
  const int total = c.total_steps(samples.size());
  if (total == 0) return report;
  if (samples.empty()) fail(ErrorKind::Config, "training needs a non-empty dataset");
  if (c.stage == Stage::One && (!targets || targets->size() != samples.size()))
    fail(ErrorKind::Config, "Stage One needs one target set per sample");

  const auto t0 = std::chrono::steady_clock::now();
  num::OptimizerState opt = num::make_adam_state(m.params(), {c.learning_rate, 0.9, 0.999, 1e-8, c.weight_decay});
  const std::size_t n = samples.size();
  std::vector<std::size_t> order;
  report.rows.reserve(static_cast<std::size_t>(total));
  for (int step = 0; step < total; ++step) {
    const auto pos = static_cast<std::size_t>(step) % n;
    if (pos == 0) order = epoch_order(n, c.seed, step / static_cast<int>(n));
    const std::size_t idx = order[pos];
    const auto& s = samples[idx];

    m.params().zero_grad();
    Graph g(true);
    std::optional<Var> tv;
    if (c.stage == Stage::One) tv = g.constant((*targets)[idx].g);
    SampleGraph sg;
    try {
      sg = build_sample_graph(g, m, &m.params(), s, tv, c);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      fail(ErrorKind::Numeric, "step " + std::to_string(step) + " on sample " + std::to_string(s.sample_id) + ": " +
                                   e.what());
    }

    StepRecord rec;
    rec.step = step;
    rec.sample_id = s.sample_id;
    rec.total = g.value(sg.total)[0];
    rec.l_ans = g.value(sg.l_ans)[0];
    rec.l_ans_sum = g.value(sg.l_ans_sum)[0];
    if (sg.l_latent.valid()) rec.l_latent = g.value(sg.l_latent)[0];
    if (!std::isfinite(rec.total))
      fail(ErrorKind::Numeric, "non-finite loss at step " + std::to_string(step) + " on sample " +
                                   std::to_string(s.sample_id));
    g.backward(sg.total);
    rec.grad_norm = c.clip > 0.0 ? num::clip_grad_norm(m.params(), c.clip) : m.params().grad_norm();
    if (c.lr_decay) opt.config.learning_rate = c.learning_rate * (1.0 - static_cast<double>(step) / total);
    num::adam_step(m.params(), opt);
    report.rows.push_back(rec);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

PipelineResult two_stage_pipeline(const std::vector<data::VideoSample>& train, const model::ModelConfig& mc,
                                  const StageConfig& s1, const StageConfig& s2, const std::filesystem::path& out_dir,
                                  const std::filesystem::path& target_cache_dir) {
  return two_stage_pipeline(model::Model(mc), train, s1, s2, out_dir, target_cache_dir);
}

PipelineResult two_stage_pipeline(model::Model init, const std::vector<data::VideoSample>& train,
                                  const StageConfig& s1, const StageConfig& s2, const std::filesystem::path& out_dir,
                                  const std::filesystem::path& target_cache_dir) {
  StageConfig c1 = s1, c2 = s2;
  c1.stage = Stage::One;
  c2.stage = Stage::Two;
  c1.validate();
  c2.validate();
  PipelineResult r{std::move(init), {}, {}, {}, {}};
  std::vector<sup::PooledTargets> targets;
  if (c1.total_steps(train.size()) > 0)
    targets = sup::load_or_build_targets(train, sup::snapshot_encoder(r.model), c1.k, target_cache_dir);
  r.stage1 = run_stage(r.model, train, &targets, c1);
  if (!out_dir.empty()) {
    r.stage1_checkpoint = out_dir / "stage1.ckpt";
    model::save_checkpoint(r.stage1_checkpoint, r.model);
    r.stage1.checkpoint = r.stage1_checkpoint.string();
  }
  r.stage2 = run_stage(r.model, train, nullptr, c2);
  if (!out_dir.empty()) {
    r.stage2_checkpoint = out_dir / "stage2.ckpt";
    model::save_checkpoint(r.stage2_checkpoint, r.model);
    r.stage2.checkpoint = r.stage2_checkpoint.string();
  }
  return r;
}

EvalResult evaluate(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                    bool force_latent_entry) {
  EvalResult out;
  std::size_t correct = 0, de_correct = 0;
  for (const auto& s : samples) {
    const auto L = sup::build_sequence_layout(s, m, k);
    rollout::RolloutOptions o;
    o.budget = k;
    o.max_answer_len = static_cast<int>(s.answer.size()) + 1;
    o.force_latent_entry = force_latent_entry;
    const auto prompt = L.prompt();
    const auto r = rollout::run_inference(prompt, m, o);
    Prediction p{s.sample_id, s.kind, r.answer, s.answer, r.answer == s.answer};
    correct += p.correct;
    if (s.kind != data::QuestionKind::Order) {
      ++out.direction_event_count;
      de_correct += p.correct;
    }
    out.predictions.push_back(std::move(p));
  }
  if (!samples.empty()) out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  if (out.direction_event_count)
    out.direction_event_accuracy = static_cast<double>(de_correct) / static_cast<double>(out.direction_event_count);
  return out;
}

LossSummary mean_losses(const model::Model& m, const std::vector<data::VideoSample>& samples,
                        const std::vector<sup::PooledTargets>& targets, int k) {
  if (targets.size() != samples.size()) fail(ErrorKind::Config, "one target set per sample is required");
  LossSummary out;
  if (samples.empty()) return out;
  StageConfig c;
  c.k = k;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Graph g(false);
    const auto sg = build_sample_graph(g, m, nullptr, samples[i], g.constant(targets[i].g), c);
    out.l_ans += g.value(sg.l_ans)[0];
    out.l_latent += g.value(sg.l_latent)[0];
  }
  out.l_ans /= static_cast<double>(samples.size());
  out.l_latent /= static_cast<double>(samples.size());
  return out;
}

}  // namespace storm::train
