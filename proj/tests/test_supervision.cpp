#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "storm/error.hpp"
#include "storm/supervision.hpp"
#include "storm/vocab.hpp"
#include "test_util.hpp"

using namespace storm;
using namespace storm::sup;
using storm::testing::Rng;

namespace {

model::ModelConfig cfg(int d = 16) {
  model::ModelConfig c;
  c.d = d;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  return c;
}

// Segment means computed straight from the definition with integer
// arithmetic, independent of pool_segment.
Tensor brute_pool(const Tensor& h, int k) {
  const std::size_t m = h.rows(), d = h.cols();
  Tensor out({static_cast<std::size_t>(k), d});
  for (int i = 0; i < k; ++i) {
    std::size_t lo = 0;
    while ((lo + 1) * static_cast<std::size_t>(k) <= static_cast<std::size_t>(i) * m) ++lo;  // floor(i*m/k)
    std::size_t hi = 0;
    while (hi * static_cast<std::size_t>(k) < static_cast<std::size_t>(i + 1) * m) ++hi;  // ceil((i+1)*m/k)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0;
      for (std::size_t r = lo; r < hi; ++r) s += h.at(r, j);
      out.at(static_cast<std::size_t>(i), j) = s / static_cast<double>(hi - lo);
    }
  }
  return out;
}

data::VideoSample sample_with(int event_frame = -1) {
  data::VideoConfig vc;
  data::MotionSpec m{{0, 0}, {1, 0}, {0, 1}, event_frame < 0 ? std::nullopt : std::optional<int>(event_frame)};
  auto s = data::make_video(m, vc);
  s.keyframes = data::select_keyframes(s);
  s.thought_frames = data::gen_thought_video(s, vc, 1);
  data::gen_qa_sample(s, data::QuestionKind::DirectionBefore, 3);
  return s;
}

}  // namespace

TEST_CASE("patchify: token count and locality") {
  Rng rng(5);
  Tensor frames = rng.tensor({3, 64}, 0.0, 1.0);
  Tensor p = patchify(frames, 8, 1, 4);
  CHECK(p.shape() == num::Shape{12, 16});
  // patch (0,1) of frame 0 holds pixel (y=1, x=5) at (dy=1, dx=1)
  CHECK(p.at(1, 5) == frames.at(0, 1 * 8 + 5));
  CHECK_THROWS_AS(patchify(frames, 8, 1, 3), Error);
  CHECK_THROWS_AS(patchify(Tensor({2, 60}), 8, 1, 4), Error);
}

TEST_CASE("encode_frames: counts, locality, zero frames") {
  model::Model m(cfg());
  Rng rng(6);
  Tensor one = rng.tensor({1, 64}, 0.0, 1.0);
  CHECK(encode_frames(one, m).shape() == num::Shape{4, 16});

  Tensor three = rng.tensor({3, 64}, 0.0, 1.0);
  Tensor base = encode_frames(three, m);
  CHECK(base.rows() == 12);
  Tensor changed = three;
  for (double& v : changed.row(1)) v = 1.0 - v;
  Tensor after = encode_frames(changed, m);
  for (std::size_t r = 0; r < 12; ++r) {
    const bool in_frame_2 = r >= 4 && r < 8;
    bool same = true;
    for (std::size_t j = 0; j < 16; ++j) same = same && base.at(r, j) == after.at(r, j);
    CHECK(same != in_frame_2);
  }
  Tensor zeros = encode_frames(Tensor({1, 64}), m);  // vis_b starts at zero
  for (double v : zeros.values()) CHECK(v == 0.0);

  // The frozen snapshot encodes identically.
  CHECK(encode_frames(three, snapshot_encoder(m)) == base);
}

TEST_CASE("adaptive_avg_pool examples") {
  Tensor h = Tensor::matrix(4, 1, {1, 2, 3, 4});
  CHECK(adaptive_avg_pool(h, 2).g == Tensor::matrix(2, 1, {1.5, 3.5}));
  h = Tensor::matrix(5, 1, {1, 2, 3, 4, 5});
  CHECK(adaptive_avg_pool(h, 2).g == Tensor::matrix(2, 1, {2, 4}));
  Rng rng(1);
  Tensor x = rng.tensor({6, 3});
  CHECK(adaptive_avg_pool(x, 6).g == x);
  CHECK_THROWS_AS(adaptive_avg_pool(Tensor({0, 3}), 2), Error);
  CHECK_THROWS_AS(adaptive_avg_pool(x, 0), Error);
}

TEST_CASE("adaptive_avg_pool matches the brute-force oracle exactly") {
  Rng rng(2);
  for (std::size_t m = 1; m <= 64; ++m)
    for (int k = 1; k <= 16; ++k) {
      Tensor h = rng.tensor({m, 3});
      CAPTURE(m);
      CAPTURE(k);
      CHECK(adaptive_avg_pool(h, k).g == brute_pool(h, k));
    }
}

TEST_CASE("pooling properties: coverage, mean preservation, column equivariance") {
  Rng rng(3);
  for (std::size_t m = 1; m <= 40; ++m)
    for (std::size_t k = 1; k <= 16; ++k) {
      std::vector<bool> covered(m, false);
      for (std::size_t i = 0; i < k; ++i) {
        auto [s, e] = pool_segment(i, m, k);
        CHECK(e > s);
        for (std::size_t r = s; r < e; ++r) covered[r] = true;
      }
      CHECK(std::all_of(covered.begin(), covered.end(), [](bool b) { return b; }));
      if (m % k == 0) {
        Tensor h = rng.tensor({m, 2});
        Tensor g = adaptive_avg_pool(h, static_cast<int>(k)).g;
        for (std::size_t j = 0; j < 2; ++j) {
          double mh = 0, mg = 0;
          for (std::size_t r = 0; r < m; ++r) mh += h.at(r, j);
          for (std::size_t r = 0; r < k; ++r) mg += g.at(r, j);
          CHECK(std::abs(mh / m - mg / k) < 1e-12);
        }
      }
    }
  Tensor h = rng.tensor({7, 4});
  const std::size_t perm[] = {2, 0, 3, 1};
  Tensor hp({7, 4});
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t j = 0; j < 4; ++j) hp.at(r, j) = h.at(r, perm[j]);
  Tensor g = adaptive_avg_pool(h, 3).g, gp = adaptive_avg_pool(hp, 3).g;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(gp.at(r, j) == g.at(r, perm[j]));
}

TEST_CASE("build_targets") {
  model::Model m(cfg());
  auto enc = snapshot_encoder(m);

  // single thought frame: M_tok = 4 < K = 8
  auto s = sample_with();
  data::VideoConfig vc;
  s.thought_frames = data::render({{2, 2}}, vc);
  auto t = build_targets(s, enc, 8);
  CHECK(t.source_tokens == 4);
  Tensor tokens = encode_frames(s.thought_frames, enc);
  for (std::size_t i = 0; i < 8; ++i) {
    auto [a, b] = pool_segment(i, 4, 8);
    CHECK(b - a == 1);
    for (std::size_t j = 0; j < 16; ++j) CHECK(t.g.at(i, j) == tokens.at(a, j));
  }

  auto s2 = sample_with();
  CHECK(build_targets(s2, enc, 8).g == build_targets(sample_with(), enc, 8).g);

  auto dense = s2;
  dense.thought_frames = data::gen_thought_video(s2, vc, 2);
  CHECK(!(build_targets(dense, enc, 8).g == build_targets(s2, enc, 8).g));
}

TEST_CASE("target cache round trip and key") {
  model::Model m(cfg());
  auto enc = snapshot_encoder(m);
  auto samples = data::generate_samples(data::DataConfig{}, 6);
  auto dir = std::filesystem::temp_directory_path() / "storm_test_targets";
  std::filesystem::remove_all(dir);
  auto built = load_or_build_targets(samples, enc, 4, dir);
  REQUIRE(std::filesystem::exists(target_cache_path(dir, enc, 4)));
  auto cached = load_or_build_targets(samples, enc, 4, dir);
  REQUIRE(cached.size() == built.size());
  for (std::size_t i = 0; i < built.size(); ++i) CHECK(cached[i].g == built[i].g);

  model::ModelConfig other = cfg();
  other.seed = 5;
  CHECK(snapshot_encoder(model::Model(other)).hash != enc.hash);
  CHECK(target_cache_path(dir, enc, 8) != target_cache_path(dir, enc, 4));
  std::filesystem::remove_all(dir);
}

TEST_CASE("sequence layout: lengths and spans") {
  model::Model m(cfg());
  auto s = sample_with(2);  // keyframes {0, 2, 4}
  s.keyframes = {0, 4};     // two keyframes of four tokens
  s.question.resize(6);
  auto L = build_sequence_layout(s, m, 8);
  CHECK(L.size() == 27);
  CHECK(L.span(Span::LatentSlots) == Range{16, 24});
  CHECK(std::count(L.loss_mask.begin(), L.loss_mask.end(), true) == 2);
  CHECK(L.loss_mask[25]);
  CHECK(L.loss_mask[26]);
  CHECK(L.targets[25] == s.answer[0]);
  CHECK(L.targets[26] == tok::EOS);
  CHECK(L.prompt().size() == 15);

  // spans partition the sequence in order
  std::size_t at = 0;
  for (const Range& r : L.spans) {
    CHECK(r.begin == at);
    at = r.end;
  }
  CHECK(at == L.size());

  auto k1 = build_sequence_layout(s, m, 1);
  CHECK(k1.span(Span::LatentSlots).size() == 1);

  auto with_end = build_sequence_layout(s, m, 8, true);
  CHECK(std::count(with_end.loss_mask.begin(), with_end.loss_mask.end(), true) == 3);
}

TEST_CASE("layout video tokens are the encoded keyframes") {
  model::Model m(cfg());
  auto s = sample_with(2);
  auto L = build_sequence_layout(s, m, 4);
  Tensor keys({3, 64});
  for (std::size_t i = 0; i < 3; ++i) {
    auto src = s.frames.row(static_cast<std::size_t>(s.keyframes[i]));
    std::copy(src.begin(), src.end(), keys.row(i).begin());
  }
  Tensor enc = encode_frames(keys, m);
  const Range v = L.span(Span::Video);
  REQUIRE(v.size() == 12);
  for (std::size_t r = 0; r < 12; ++r) {
    const auto& e = L.elements[v.begin + r];
    REQUIRE(!e.is_token());
    CHECK(e.continuous().role == model::Role::VideoToken);
    auto row = enc.row(r);
    CHECK(e.continuous().vector == std::vector<double>(row.begin(), row.end()));
  }
}

TEST_CASE("overlength layouts are rejected") {
  model::ModelConfig c = cfg();
  c.max_seq_len = 20;
  model::Model m(c);
  try {
    build_sequence_layout(sample_with(), m, 8);
    FAIL("expected sequence-length error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SequenceLength);
  }
}
