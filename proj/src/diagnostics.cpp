#include "storm/diagnostics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "storm/error.hpp"
#include "storm/supervision.hpp"

namespace storm::diag {

const char* to_string(RepKind k) {
  switch (k) {
    case RepKind::Latent: return "LATENT";
    case RepKind::Text: return "TEXT";
    case RepKind::Random: return "RANDOM";
  }
  return "?";
}

std::vector<SampleReps> extract_latent_reps(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                                            bool force_latent_entry) {
  const auto d = static_cast<std::size_t>(m.config().d);
  std::vector<SampleReps> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto L = sup::build_sequence_layout(s, m, k);
    rollout::RolloutOptions o;
    o.budget = k;
    o.max_answer_len = static_cast<int>(s.answer.size()) + 1;
    o.force_latent_entry = force_latent_entry;
    const auto prompt = L.prompt();
    const auto r = rollout::run_inference(prompt, m, o);

    SampleReps rep{s.sample_id, s.video_id, Tensor({static_cast<std::size_t>(k), d}), std::vector<double>(d, 0.0),
                   r.trace.slots_used};
    for (std::size_t i = 0; i < r.trace.latent_states.size(); ++i)
      std::copy(r.trace.latent_states[i].begin(), r.trace.latent_states[i].end(), rep.latent.row(i).begin());
    for (const auto& h : r.trace.answer_states)
      for (std::size_t j = 0; j < d; ++j) rep.text[j] += h[j];
    if (!r.trace.answer_states.empty())
      for (double& v : rep.text) v /= static_cast<double>(r.trace.answer_states.size());
    out.push_back(std::move(rep));
  }
  return out;
}

std::vector<SampleReps> random_reps(const std::vector<data::VideoSample>& samples, int k, int d, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<SampleReps> out;
  for (const auto& s : samples) {
    SampleReps rep{s.sample_id, s.video_id, Tensor({static_cast<std::size_t>(k), static_cast<std::size_t>(d)}), {}, k};
    for (double& v : rep.latent.values()) v = static_cast<double>(gen() >> 11) * 0x1.0p-52 - 1.0;
    out.push_back(std::move(rep));
  }
  return out;
}

double chance_hit_at_1(const std::vector<std::uint32_t>& labels) {
  if (labels.size() < 2) return 0.0;
  std::map<std::uint32_t, std::size_t> count;
  for (auto l : labels) ++count[l];
  double s = 0.0;
  for (auto l : labels) s += static_cast<double>(count[l] - 1) / static_cast<double>(labels.size() - 1);
  return s / static_cast<double>(labels.size());
}

RetrievalReport retrieval_probe(const std::vector<std::vector<double>>& vectors,
                                const std::vector<std::uint32_t>& labels, const std::vector<std::uint32_t>& ids) {
  const std::size_t n = vectors.size();
  if (labels.size() != n || ids.size() != n)
    fail(ErrorKind::Dimension, "retrieval probe needs one label and id per vector");
  if (std::count_if(labels.begin(), labels.end(), [&](auto l) { return l != labels.front(); }) == 0 || n < 2)
    fail(ErrorKind::Config, "retrieval probe needs at least two distinct videos");

  std::vector<double> norm(n);
  std::size_t zero = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (vectors[i].size() != vectors[0].size()) fail(ErrorKind::Dimension, "retrieval vectors differ in width");
    norm[i] = std::sqrt(std::inner_product(vectors[i].begin(), vectors[i].end(), vectors[i].begin(), 0.0));
    zero += norm[i] == 0.0;
  }
  RetrievalReport out;
  if (zero)
    out.warnings.push_back(std::to_string(zero) + " representation(s) have zero norm; their similarities are 0");

  auto cosine = [&](std::size_t a, std::size_t b) {
    if (norm[a] == 0.0 || norm[b] == 0.0) return 0.0;
    return std::inner_product(vectors[a].begin(), vectors[a].end(), vectors[b].begin(), 0.0) / (norm[a] * norm[b]);
  };

  std::vector<std::size_t> cand;
  std::vector<double> sim(n);
  double h1 = 0, h5 = 0, rr = 0;
  for (std::size_t q = 0; q < n; ++q) {
    cand.clear();
    for (std::size_t c = 0; c < n; ++c)
      if (c != q) {
        cand.push_back(c);
        sim[c] = cosine(q, c);
      }
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    QueryResult r{ids[q], 0.0, 0};
    for (std::size_t i = 0; i < cand.size(); ++i)
      if (labels[cand[i]] == labels[q]) {
        r.rank = i + 1;
        r.reciprocal_rank = 1.0 / static_cast<double>(r.rank);
        break;
      }
    h1 += r.rank == 1;
    h5 += r.rank >= 1 && r.rank <= 5;
    rr += r.reciprocal_rank;
    out.per_query.push_back(r);
  }
  out.hit_at_1 = h1 / static_cast<double>(n);
  out.hit_at_5 = h5 / static_cast<double>(n);
  out.mrr = rr / static_cast<double>(n);
  return out;
}

std::string Aggregation::name() const {
  switch (kind) {
    case Mean: return "mean";
    case Slot: return "single_" + std::to_string(slot);
    case Concat: return "concat";
    case Drop: return "drop_" + std::to_string(slot);
    case Reverse: return "reverse";
  }
  return "?";
}

std::vector<double> aggregate(const Tensor& z, const Aggregation& a) {
  const std::size_t k = z.rows(), d = z.cols();
  if ((a.kind == Aggregation::Slot || a.kind == Aggregation::Drop) &&
      (a.slot < 0 || static_cast<std::size_t>(a.slot) >= k))
    fail(ErrorKind::Dimension, "slot " + std::to_string(a.slot) + " outside K = " + std::to_string(k));
  std::vector<double> out;
  switch (a.kind) {
    case Aggregation::Slot: {
      auto r = z.row(static_cast<std::size_t>(a.slot));
      out.assign(r.begin(), r.end());
      break;
    }
    case Aggregation::Concat:
      out.assign(z.values().begin(), z.values().end());
      break;
    case Aggregation::Reverse:
      for (std::size_t i = k; i-- > 0;) out.insert(out.end(), z.row(i).begin(), z.row(i).end());
      break;
    case Aggregation::Mean:
    case Aggregation::Drop: {
      if (a.kind == Aggregation::Drop && k < 2) fail(ErrorKind::Config, "dropping a slot needs K >= 2");
      out.assign(d, 0.0);
      std::size_t used = 0;
      for (std::size_t i = 0; i < k; ++i) {
        if (a.kind == Aggregation::Drop && i == static_cast<std::size_t>(a.slot)) continue;
        for (std::size_t j = 0; j < d; ++j) out[j] += z.at(i, j);
        ++used;
      }
      for (double& v : out) v /= static_cast<double>(used);
      break;
    }
  }
  return out;
}

RetrievalReport retrieval_probe(const std::vector<SampleReps>& reps, const Aggregation& a, RepKind kind) {
  std::vector<std::vector<double>> vecs;
  std::vector<std::uint32_t> labels, ids;
  for (const auto& r : reps) {
    vecs.push_back(kind == RepKind::Text ? r.text : aggregate(r.latent, a));
    labels.push_back(r.video_id);
    ids.push_back(r.sample_id);
  }
  auto out = retrieval_probe(vecs, labels, ids);
  out.kind = kind;
  out.variant = kind == RepKind::Text ? "answer_mean" : a.name();
  return out;
}

std::vector<RetrievalReport> slot_ablation(const std::vector<SampleReps>& reps) {
  if (reps.empty()) fail(ErrorKind::Config, "slot ablation needs representations");
  const int k = static_cast<int>(reps.front().latent.rows());
  if (k < 2) fail(ErrorKind::Config, "slot ablation needs K >= 2");
  std::vector<RetrievalReport> out;
  for (int i = 0; i < k; ++i) out.push_back(retrieval_probe(reps, {Aggregation::Slot, i}, RepKind::Latent));
  for (int i = 0; i < k; ++i) out.push_back(retrieval_probe(reps, {Aggregation::Drop, i}, RepKind::Latent));
  out.push_back(retrieval_probe(reps, {Aggregation::Reverse, 0}, RepKind::Latent));
  out.push_back(retrieval_probe(reps, {Aggregation::Mean, 0}, RepKind::Latent));
  return out;
}

std::string retrieval_csv(const std::vector<RetrievalReport>& reports) {
  std::ostringstream o;
  o.precision(17);
  o << "# candidate pool: every QA sample except the query\n";
  o << "kind,variant,hit_at_1,hit_at_5,mrr,queries\n";
  for (const auto& r : reports)
    o << to_string(r.kind) << ',' << r.variant << ',' << r.hit_at_1 << ',' << r.hit_at_5 << ',' << r.mrr << ','
      << r.per_query.size() << '\n';
  return o.str();
}

std::string per_query_csv(const RetrievalReport& r) {
  std::ostringstream o;
  o.precision(17);
  o << "query_id,reciprocal_rank,rank\n";
  for (const auto& q : r.per_query) o << q.query_id << ',' << q.reciprocal_rank << ',' << q.rank << '\n';
  return o.str();
}

Projection pca_2d(const Tensor& points) {
  if (points.rank() != 2 || points.rows() == 0) fail(ErrorKind::Dimension, "PCA needs a non-empty [n x d] matrix");
  const auto n = static_cast<Eigen::Index>(points.rows()), d = static_cast<Eigen::Index>(points.cols());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = points.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) fail(ErrorKind::Numeric, "covariance eigendecomposition failed");

  Projection p{Tensor({points.rows(), 2}), 0};
  const double top = eig.eigenvalues()(d - 1);
  for (int a = 0; a < 2 && a < d; ++a) {
    const Eigen::Index col = d - 1 - a;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < 0) v = -v;
    if (top > 0.0 && eig.eigenvalues()(col) > 1e-12 * top) ++p.rank;
    const Eigen::VectorXd c = x * v;
    for (Eigen::Index i = 0; i < n; ++i) p.coords.at(static_cast<std::size_t>(i), static_cast<std::size_t>(a)) = c(i);
  }
  return p;
}

namespace {

// Mean patch token per frame.
Tensor frame_points(const Tensor& frames, const model::Model& m) {
  const Tensor tokens = sup::encode_frames(frames, m);
  const auto per = static_cast<std::size_t>(m.config().patches_per_frame()), d = tokens.cols();
  Tensor out({frames.rows(), d});
  for (std::size_t f = 0; f < frames.rows(); ++f)
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t j = 0; j < d; ++j) out.at(f, j) += tokens.at(f * per + r, j) / static_cast<double>(per);
  return out;
}

}  // namespace

EmbeddingExport export_embeddings(const model::Model& m, const std::vector<data::VideoSample>& samples, int k) {
  if (samples.empty()) fail(ErrorKind::Config, "embedding export needs a non-empty dataset");
  const auto reps = extract_latent_reps(m, samples, k);
  const auto d = static_cast<std::size_t>(m.config().d);

  std::vector<std::vector<double>> rows;
  std::vector<std::pair<std::uint32_t, const char*>> tags;
  auto push = [&](std::uint32_t id, const char* kind, std::span<const double> v) {
    rows.emplace_back(v.begin(), v.end());
    tags.emplace_back(id, kind);
  };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const Tensor fp = frame_points(s.frames, m);
    for (std::size_t f = 0; f < fp.rows(); ++f) push(s.sample_id, "FRAME", fp.row(f));
    for (int kf : s.keyframes) push(s.sample_id, "KEYFRAME", fp.row(static_cast<std::size_t>(kf)));
    for (std::size_t r = 0; r < reps[i].latent.rows(); ++r) push(s.sample_id, "LATENT", reps[i].latent.row(r));
  }
  Tensor pts({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), pts.row(i).begin());
  const Projection p = pca_2d(pts);

  EmbeddingExport out;
  out.rows = rows.size();
  if (p.rank < 2)
    out.warnings.push_back("point set has rank " + std::to_string(p.rank) + "; only the first coordinate is written");
  std::ostringstream o;
  o.precision(17);
  o << "sample_id,kind,pc1,pc2\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    o << tags[i].first << ',' << tags[i].second << ',' << p.coords.at(i, 0) << ',';
    if (p.rank >= 2) o << p.coords.at(i, 1);
    o << '\n';
  }
  out.csv = o.str();
  return out;
}

std::string BenchMode::name() const {
  return kind == Latent ? "LATENT" : "SIMULATED_TOOL(" + std::to_string(extra_passes) + ")";
}

BenchResult latency_bench(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                          const BenchMode& mode, bool keep_traces) {
  if (samples.size() < 10) fail(ErrorKind::Config, "latency bench needs at least 10 items");
  if (mode.kind == BenchMode::SimulatedTool && mode.extra_passes < 0)
    fail(ErrorKind::Config, "extra passes must be non-negative");
  std::vector<std::vector<model::InputElement>> prompts;
  for (const auto& s : samples) prompts.push_back(sup::build_sequence_layout(s, m, k).prompt());

  BenchResult out;
  out.mode = mode.name();
  out.items = samples.size();
  double passes = 0, prefills = 0, positions = 0, latent = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    rollout::RolloutOptions o;
    o.budget = k;
    o.max_answer_len = static_cast<int>(samples[i].answer.size()) + 1;
    o.extra_prefills = mode.kind == BenchMode::SimulatedTool ? mode.extra_passes : 0;
    const auto r = rollout::run_inference(prompts[i], m, o);
    passes += r.trace.decode_passes;
    prefills += r.trace.prefill_passes;
    positions += static_cast<double>(r.trace.prefill_positions);
    latent += r.trace.slots_used;
    if (keep_traces) out.traces_jsonl += rollout::trace_to_jsonl(r.trace);
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto n = static_cast<double>(samples.size());
  out.decode_passes_per_item = passes / n;
  out.prefill_passes_per_item = prefills / n;
  out.prefill_positions_per_item = positions / n;
  out.latent_logits_per_item = latent / n;
  out.items_per_second = out.wall_seconds > 0 ? n / out.wall_seconds : 0.0;
  return out;
}

std::string bench_csv(const std::vector<BenchResult>& results) {
  std::ostringstream o;
  o.precision(17);
  o << "mode,items,decode_passes_per_item,prefill_passes_per_item,prefill_positions_per_item,latent_logits_per_item,"
       "items_per_second,wall_seconds\n";
  for (const auto& r : results)
    o << r.mode << ',' << r.items << ',' << r.decode_passes_per_item << ',' << r.prefill_passes_per_item << ','
      << r.prefill_positions_per_item << ',' << r.latent_logits_per_item << ',' << r.items_per_second << ','
      << r.wall_seconds << '\n';
  return o.str();
}

}  // namespace storm::diag
