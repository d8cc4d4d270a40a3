#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "storm/datagen.hpp"
#include "storm/model.hpp"
#include "storm/rollout.hpp"

namespace storm::diag {

using num::Tensor;

enum class RepKind { Latent, Text, Random };
const char* to_string(RepKind k);

struct SampleReps {
  std::uint32_t sample_id = 0;
  std::uint32_t video_id = 0;
  Tensor latent;              // [K x d]; rows past an early exit stay zero
  std::vector<double> text;   // mean of the answer-position hidden states
  int slots_used = 0;
};

// One forced-entry rollout per sample.
std::vector<SampleReps> extract_latent_reps(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                                            bool force_latent_entry = true);

// Latent matrices uniform in [-1, 1) from `seed`, labelled like `samples`.
std::vector<SampleReps> random_reps(const std::vector<data::VideoSample>& samples, int k, int d, std::uint64_t seed);

// Expected Hit@1 of a ranking that ignores the representation: the mean over
// queries of (same-video candidates) / (corpus - 1).
double chance_hit_at_1(const std::vector<std::uint32_t>& labels);

struct QueryResult {
  std::uint32_t query_id = 0;
  double reciprocal_rank = 0.0;
  std::size_t rank = 0;  // of the first same-video candidate; 0 when none exists
};

struct RetrievalReport {
  std::string variant;
  RepKind kind = RepKind::Latent;
  double hit_at_1 = 0.0, hit_at_5 = 0.0, mrr = 0.0;
  std::vector<QueryResult> per_query;
  std::vector<std::string> warnings;
};

// Cosine ranking of every other item against each query, ties broken by
// ascending candidate index. Zero-norm vectors score 0 against everything.
RetrievalReport retrieval_probe(const std::vector<std::vector<double>>& vectors,
                                const std::vector<std::uint32_t>& labels, const std::vector<std::uint32_t>& ids);

struct Aggregation {
  enum Kind { Mean, Slot, Concat, Drop, Reverse } kind = Mean;
  int slot = 0;  // Slot and Drop
  std::string name() const;
};

std::vector<double> aggregate(const Tensor& z, const Aggregation& a);

RetrievalReport retrieval_probe(const std::vector<SampleReps>& reps, const Aggregation& a, RepKind kind);

// single_i, drop_i for each slot, then reverse and mean: 2K + 2 reports.
std::vector<RetrievalReport> slot_ablation(const std::vector<SampleReps>& reps);

std::string retrieval_csv(const std::vector<RetrievalReport>& reports);
std::string per_query_csv(const RetrievalReport& r);

// ---- embedding export ------------------------------------------------------------

struct Projection {
  Tensor coords;  // [n x 2]
  int rank = 0;   // directions with non-negligible variance (0, 1 or 2)
};

// Mean-centred covariance eigendecomposition; each axis is signed so its
// largest-magnitude loading is positive.
Projection pca_2d(const Tensor& points);

struct EmbeddingExport {
  std::string csv;  // sample_id,kind,pc1,pc2
  std::size_t rows = 0;
  std::vector<std::string> warnings;
};

// FRAME and KEYFRAME points are the mean patch token of each frame under the
// model's visual projection; LATENT points are the K slot states.
EmbeddingExport export_embeddings(const model::Model& m, const std::vector<data::VideoSample>& samples, int k);

// ---- latency ---------------------------------------------------------------------

struct BenchMode {
  enum Kind { Latent, SimulatedTool } kind = Latent;
  int extra_passes = 0;
  std::string name() const;
};

struct BenchResult {
  std::string mode;
  std::size_t items = 0;
  double decode_passes_per_item = 0.0;
  double prefill_passes_per_item = 0.0;
  double prefill_positions_per_item = 0.0;
  double latent_logits_per_item = 0.0;  // logits computed only for the latent exit test
  double items_per_second = 0.0;
  double wall_seconds = 0.0;
  std::string traces_jsonl;
};

BenchResult latency_bench(const model::Model& m, const std::vector<data::VideoSample>& samples, int k,
                          const BenchMode& mode, bool keep_traces = false);

std::string bench_csv(const std::vector<BenchResult>& results);

}  // namespace storm::diag
