#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "storm/diagnostics.hpp"
#include "storm/error.hpp"
#include "storm/supervision.hpp"
#include "test_util.hpp"

using namespace storm;
using namespace storm::diag;
using storm::testing::Rng;

namespace {

model::ModelConfig small() {
  model::ModelConfig c;
  c.d = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  return c;
}

// Full similarity matrix, explicit sort with (similarity desc, index asc).
RetrievalReport oracle(const std::vector<std::vector<double>>& v, const std::vector<std::uint32_t>& labels) {
  const std::size_t n = v.size();
  std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < v[a].size(); ++j) {
        ab += v[a][j] * v[b][j];
        aa += v[a][j] * v[a][j];
        bb += v[b][j] * v[b][j];
      }
      sim[a][b] = (aa == 0 || bb == 0) ? 0.0 : ab / (std::sqrt(aa) * std::sqrt(bb));
    }
  RetrievalReport r;
  double h1 = 0, h5 = 0, mrr = 0;
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t c = 0; c < n; ++c)
      if (c != q) order.push_back({sim[q][c], c});
    std::sort(order.begin(), order.end(), [](const auto& x, const auto& y) {
      return x.first != y.first ? x.first > y.first : x.second < y.second;
    });
    QueryResult qr{static_cast<std::uint32_t>(q), 0.0, 0};
    for (std::size_t i = 0; i < order.size(); ++i)
      if (labels[order[i].second] == labels[q]) {
        qr.rank = i + 1;
        qr.reciprocal_rank = 1.0 / static_cast<double>(i + 1);
        break;
      }
    h1 += qr.rank == 1;
    h5 += qr.rank >= 1 && qr.rank <= 5;
    mrr += qr.reciprocal_rank;
    r.per_query.push_back(qr);
  }
  r.hit_at_1 = h1 / static_cast<double>(n);
  r.hit_at_5 = h5 / static_cast<double>(n);
  r.mrr = mrr / static_cast<double>(n);
  return r;
}

std::vector<std::uint32_t> iota_ids(std::size_t n) {
  std::vector<std::uint32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i);
  return ids;
}

}  // namespace

TEST_CASE("retrieval probe examples") {
  // q0's nearest is a different video, its own video comes second.
  std::vector<std::vector<double>> v{{1, 0}, {1, 0.1}, {0.5, 1}, {-1, -1}, {0.2, 1}};
  std::vector<std::uint32_t> labels{7, 8, 7, 9, 8};
  auto r = retrieval_probe(v, labels, iota_ids(5));
  CHECK(r.per_query[0].rank == 2);
  CHECK(r.per_query[0].reciprocal_rank == 0.5);
  CHECK(r.per_query[2].rank == 3);
  CHECK(r.per_query[3].rank == 0);  // only member of its video
  CHECK(r.per_query[3].reciprocal_rank == 0.0);
  CHECK(r.per_query[4].reciprocal_rank == 0.5);

  // RRs {1, 0.5, 0}
  std::vector<std::vector<double>> w{{1, 0}, {0.9, 0.1}, {0, 1}};
  auto r3 = retrieval_probe(w, {1, 1, 2}, iota_ids(3));
  CHECK(r3.per_query[0].reciprocal_rank == 1.0);
  CHECK(r3.per_query[1].reciprocal_rank == 1.0);
  CHECK(r3.per_query[2].reciprocal_rank == 0.0);
  CHECK(r3.mrr == doctest::Approx(2.0 / 3.0));

  std::vector<std::vector<double>> x{{1, 0}, {0.9, 0.1}, {0.1, 1}, {0.95, 0}};
  auto rx = retrieval_probe(x, {1, 2, 1, 3}, iota_ids(4));
  // q0: 3 (other video), 1, 2 -> rank 3; q2: 1, 3, 0 -> rank 3
  CHECK(rx.per_query[0].rank == 3);
  const double rrs[] = {rx.per_query[0].reciprocal_rank, rx.per_query[1].reciprocal_rank,
                        rx.per_query[2].reciprocal_rank, rx.per_query[3].reciprocal_rank};
  CHECK(rx.mrr == doctest::Approx((rrs[0] + rrs[1] + rrs[2] + rrs[3]) / 4.0));

  CHECK_THROWS_AS(retrieval_probe(w, {1, 1, 1}, iota_ids(3)), Error);
  CHECK_THROWS_AS(retrieval_probe(w, {1, 2}, iota_ids(3)), Error);
}

TEST_CASE("retrieval probe matches the brute-force oracle exactly") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(49);
    const std::size_t d = 1 + rng.index(6);
    const std::size_t videos = 1 + rng.index(std::max<std::size_t>(n / 2, 1));
    std::vector<std::vector<double>> v(n);
    std::vector<std::uint32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<std::uint32_t>(rng.index(videos + 1));
      const auto roll = rng.index(10);
      if (roll == 0 && i > 0) {
        v[i] = v[rng.index(i)];  // exact tie
      } else if (roll == 1) {
        v[i].assign(d, 0.0);  // zero norm
      } else {
        for (std::size_t j = 0; j < d; ++j) v[i].push_back(std::round(rng.uniform() * 4) / 4);
      }
    }
    labels[0] = 0;
    labels[1] = 1;  // two distinct videos
    CAPTURE(trial);
    auto got = retrieval_probe(v, labels, iota_ids(n));
    auto want = oracle(v, labels);
    CHECK(got.hit_at_1 == want.hit_at_1);
    CHECK(got.hit_at_5 == want.hit_at_5);
    CHECK(got.mrr == want.mrr);
    CHECK(got.hit_at_1 <= got.hit_at_5);
    for (std::size_t q = 0; q < n; ++q) CHECK(got.per_query[q].rank == want.per_query[q].rank);
  }
}

TEST_CASE("a duplicate same-video neighbour never lowers the query's rank") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10;
    std::vector<std::vector<double>> v;
    std::vector<std::uint32_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
      v.push_back(rng.vec(3));
      labels.push_back(static_cast<std::uint32_t>(i % 4));
    }
    auto before = retrieval_probe(v, labels, iota_ids(n));
    const std::size_t q = rng.index(n);
    std::size_t nb = n;
    for (std::size_t c = 0; c < n; ++c)
      if (c != q && labels[c] == labels[q]) nb = c;
    REQUIRE(nb < n);
    v.push_back(v[nb]);
    labels.push_back(labels[q]);
    auto after = retrieval_probe(v, labels, iota_ids(n + 1));
    CHECK(after.per_query[q].reciprocal_rank >= before.per_query[q].reciprocal_rank);
  }
}

TEST_CASE("zero-norm vectors score zero with a warning") {
  std::vector<std::vector<double>> v{{0, 0}, {1, 0}, {1, 0.1}, {0, 1}};
  auto r = retrieval_probe(v, {1, 2, 1, 2}, iota_ids(4));
  CHECK(r.warnings.size() == 1);
  // q0 ties everywhere at 0: candidate order is 1, 2, 3
  CHECK(r.per_query[0].rank == 2);
}

TEST_CASE("chance level of the RANDOM arm") {
  CHECK(chance_hit_at_1({0, 0, 1, 1}) == doctest::Approx(1.0 / 3.0));
  CHECK(chance_hit_at_1({0, 1, 2}) == 0.0);
  CHECK(chance_hit_at_1({0, 0, 0, 1}) == doctest::Approx((3 * 2.0 / 3.0) / 4.0));

  // random representations over many videos land near chance
  data::DataConfig dc;
  dc.qa_per_video = 4;
  auto samples = data::generate_samples(dc, 400);
  auto reps = random_reps(samples, 4, 16, 3);
  std::vector<std::uint32_t> labels;
  for (const auto& s : samples) labels.push_back(s.video_id);
  const double chance = chance_hit_at_1(labels);
  CHECK(chance == doctest::Approx(3.0 / 399.0));
  auto r = retrieval_probe(reps, {Aggregation::Mean, 0}, RepKind::Random);
  CHECK(std::abs(r.hit_at_1 - chance) < 0.03);
  CHECK(r.kind == RepKind::Random);
  CHECK(random_reps(samples, 4, 16, 3)[5].latent == reps[5].latent);
}

TEST_CASE("aggregations and slot ablation") {
  Rng rng(12);
  Tensor z = rng.tensor({2, 3});
  CHECK(aggregate(z, {Aggregation::Drop, 0}) == aggregate(z, {Aggregation::Slot, 1}));
  auto rev = aggregate(z, {Aggregation::Reverse, 0});
  CHECK(rev == std::vector<double>{z.at(1, 0), z.at(1, 1), z.at(1, 2), z.at(0, 0), z.at(0, 1), z.at(0, 2)});
  CHECK_THROWS_AS(aggregate(z, {Aggregation::Slot, 2}), Error);

  data::DataConfig dc;
  auto samples = data::generate_samples(dc, 30);
  auto reps = random_reps(samples, 8, 6, 1);
  auto rows = slot_ablation(reps);
  REQUIRE(rows.size() == 18);
  CHECK(rows[0].variant == "single_0");
  CHECK(rows[8].variant == "drop_0");
  CHECK(rows[16].variant == "reverse");
  CHECK(rows[17].variant == "mean");
  // Reversal permutes coordinates of every item alike, so cosine is unchanged.
  auto concat = retrieval_probe(reps, {Aggregation::Concat, 0}, RepKind::Latent);
  CHECK(rows[16].mrr == concat.mrr);

  // identical slots: mean pooling scores like any single slot
  auto same = reps;
  for (auto& r : same)
    for (std::size_t i = 1; i < 8; ++i)
      for (std::size_t j = 0; j < 6; ++j) r.latent.at(i, j) = r.latent.at(0, j);
  auto s = slot_ablation(same);
  CHECK(s[17].mrr == doctest::Approx(s[3].mrr).epsilon(1e-12));
  CHECK(s[17].hit_at_1 == s[3].hit_at_1);

  auto k1 = random_reps(samples, 1, 6, 1);
  CHECK_THROWS_AS(slot_ablation(k1), Error);

  std::istringstream csv(retrieval_csv(rows));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 20);  // comment, header, 18 rows
}

TEST_CASE("extract_latent_reps: shapes, determinism, zero fill") {
  model::Model m(small());
  auto samples = data::generate_samples(data::DataConfig{}, 6);
  auto a = extract_latent_reps(m, samples, 4);
  auto b = extract_latent_reps(m, samples, 4);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].latent.shape() == num::Shape{4, 16});
    CHECK(a[i].latent == b[i].latent);
    CHECK(a[i].text == b[i].text);
    CHECK(a[i].video_id == samples[i].video_id);
    CHECK(a[i].slots_used >= 1);
    for (std::size_t r = static_cast<std::size_t>(a[i].slots_used); r < 4; ++r)
      for (double x : a[i].latent.row(r)) CHECK(x == 0.0);
  }

  // TEXT reps over the same samples rank without error
  auto t = retrieval_probe(a, {}, RepKind::Text);
  CHECK(t.variant == "answer_mean");
}

TEST_CASE("pca_2d examples") {
  Tensor line({6, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    const double t = static_cast<double>(i) - 1.7;
    line.at(i, 0) = 1 + 2 * t;
    line.at(i, 1) = -t;
    line.at(i, 2) = 0.5 * t;
  }
  auto p = pca_2d(line);
  CHECK(p.rank == 1);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(p.coords.at(i, 1)) < 1e-8);

  // planar data rotated into 4-D: pairwise distances survive
  Rng rng(4);
  Tensor flat = rng.tensor({12, 2});
  const double c = std::cos(0.7), s = std::sin(0.7), c2 = std::cos(1.1), s2 = std::sin(1.1);
  Tensor q = Tensor::matrix(2, 4, {c, s * c2, s * s2, 0.0, -s, c * c2, c * s2, 0.0});
  Tensor up = num::matmul(flat, q);
  for (double& v : up.values()) v += 3.0;
  auto pp = pca_2d(up);
  CHECK(pp.rank == 2);
  for (std::size_t a = 0; a < 12; ++a)
    for (std::size_t b = 0; b < 12; ++b) {
      auto dist = [](const Tensor& t, std::size_t i, std::size_t j) {
        double sum = 0;
        for (std::size_t k = 0; k < t.cols(); ++k) sum += (t.at(i, k) - t.at(j, k)) * (t.at(i, k) - t.at(j, k));
        return std::sqrt(sum);
      };
      CHECK(std::abs(dist(pp.coords, a, b) - dist(flat, a, b)) < 1e-8);
    }

  Tensor same({3, 2});
  CHECK(pca_2d(same).rank == 0);
  CHECK_THROWS_AS(pca_2d(Tensor({0, 2})), Error);
}

TEST_CASE("export_embeddings row count and kinds") {
  model::Model m(small());
  auto samples = data::generate_samples(data::DataConfig{}, 4);
  auto e = export_embeddings(m, samples, 4);
  std::size_t want = 0;
  for (const auto& s : samples) want += s.frame_count() + s.keyframes.size() + 4;
  CHECK(e.rows == want);
  std::istringstream in(e.csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_id,kind,pc1,pc2");
  std::size_t frames = 0, keys = 0, lat = 0, n = 0;
  while (std::getline(in, line)) {
    ++n;
    frames += line.find(",FRAME,") != std::string::npos;
    keys += line.find(",KEYFRAME,") != std::string::npos;
    lat += line.find(",LATENT,") != std::string::npos;
  }
  CHECK(n == want);
  CHECK(lat == 16);
  CHECK(frames == 4 * samples[0].frame_count());
  CHECK(keys + frames + lat == want);
  CHECK_THROWS_AS(export_embeddings(m, {}, 4), Error);
}

TEST_CASE("latency bench accounting") {
  model::Model m(small());
  auto samples = data::generate_samples(data::DataConfig{}, 10);
  auto lat = latency_bench(m, samples, 4, {BenchMode::Latent, 0}, true);
  auto tool = latency_bench(m, samples, 4, {BenchMode::SimulatedTool, 3});
  CHECK(lat.mode == "LATENT");
  CHECK(tool.mode == "SIMULATED_TOOL(3)");
  CHECK(lat.items == 10);
  CHECK(lat.prefill_passes_per_item == 1.0);
  CHECK(tool.prefill_passes_per_item == 4.0);
  CHECK(tool.prefill_positions_per_item == doctest::Approx(4.0 * lat.prefill_positions_per_item).epsilon(1e-15));
  CHECK(tool.decode_passes_per_item == lat.decode_passes_per_item + 3.0);

  // passes per item equal the per-trace totals
  double passes = 0;
  for (const auto& s : samples) {
    rollout::RolloutOptions o;
    o.budget = 4;
    o.max_answer_len = static_cast<int>(s.answer.size()) + 1;
    passes += rollout::run_inference(sup::build_sequence_layout(s, m, 4).prompt(), m, o).trace.decode_passes;
  }
  CHECK(lat.decode_passes_per_item == passes / 10.0);
  CHECK(latency_bench(m, samples, 4, {BenchMode::Latent, 0}).decode_passes_per_item == lat.decode_passes_per_item);
  CHECK(std::count(lat.traces_jsonl.begin(), lat.traces_jsonl.end(), '\n') >= 10);

  CHECK_THROWS_AS(latency_bench(m, std::vector<data::VideoSample>(samples.begin(), samples.begin() + 9), 4,
                                {BenchMode::Latent, 0}),
                  Error);
  CHECK(bench_csv({lat, tool}).find("SIMULATED_TOOL(3)") != std::string::npos);
}
