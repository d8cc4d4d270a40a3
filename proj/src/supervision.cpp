#include "storm/supervision.hpp"

#include <cstring>

#include "storm/binio.hpp"
#include "storm/checkpoint.hpp"
#include "storm/error.hpp"
#include "storm/vocab.hpp"

namespace storm::sup {

Tensor patchify(const Tensor& frames, int grid, int channels, int patch) {
  if (patch <= 0 || grid % patch != 0)
    fail(ErrorKind::Dimension, "grid " + std::to_string(grid) + " is not divisible by patch size " + std::to_string(patch));
  const auto g = static_cast<std::size_t>(grid), c = static_cast<std::size_t>(channels), p = static_cast<std::size_t>(patch);
  if (frames.rank() != 2 || frames.cols() != g * g * c)
    fail(ErrorKind::Dimension, "frames of shape " + num::shape_str(frames.shape()) + " do not match a " +
                                   std::to_string(grid) + "x" + std::to_string(grid) + "x" + std::to_string(channels) +
                                   " grid");
  const std::size_t per_side = g / p, n = frames.rows();
  Tensor out({n * per_side * per_side, p * p * c});
  std::size_t r = 0;
  for (std::size_t f = 0; f < n; ++f) {
    auto src = frames.row(f);
    for (std::size_t py = 0; py < per_side; ++py)
      for (std::size_t px = 0; px < per_side; ++px, ++r) {
        auto dst = out.row(r);
        std::size_t k = 0;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch) dst[k++] = src[((py * p + dy) * g + px * p + dx) * c + ch];
      }
  }
  return out;
}

Tensor encode_frames(const Tensor& frames, const model::Model& m) {
  const auto& c = m.config();
  num::Graph g(false);
  model::Session s(g, m);
  return g.value(s.project_patches(g.constant(patchify(frames, c.grid, c.channels, c.patch_size))));
}

std::pair<std::size_t, std::size_t> pool_segment(std::size_t i, std::size_t m, std::size_t k) {
  const std::size_t start = i * m / k;
  const std::size_t end = ((i + 1) * m + k - 1) / k;
  return {start, end};
}

PooledTargets adaptive_avg_pool(const Tensor& h, int k) {
  if (h.rank() != 2 || h.rows() == 0) fail(ErrorKind::Dimension, "adaptive pooling needs a non-empty [M x d] input");
  if (k < 1) fail(ErrorKind::Dimension, "adaptive pooling needs K >= 1");
  const std::size_t m = h.rows(), d = h.cols(), kk = static_cast<std::size_t>(k);
  PooledTargets out{Tensor({kk, d}), m, k};
  for (std::size_t i = 0; i < kk; ++i) {
    const auto [start, end] = pool_segment(i, m, kk);
    auto dst = out.g.row(i);
    for (std::size_t r = start; r < end; ++r) {
      auto src = h.row(r);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    const double count = static_cast<double>(end - start);
    for (double& v : dst) v /= count;
  }
  return out;
}

EncoderSnapshot snapshot_encoder(const model::Model& m) {
  EncoderSnapshot e{m.config(), m.params().value(m.ids().vis_w), m.params().value(m.ids().vis_b), {}};
  io::Writer w;
  w.str(model::to_json(m.config()));
  for (const Tensor* t : {&e.vis_w, &e.vis_b})
    for (double v : t->values()) w.f64(v);
  e.hash = io::hex64(io::fnv1a(w.buffer().data(), w.size()));
  return e;
}

Tensor encode_frames(const Tensor& frames, const EncoderSnapshot& enc) {
  const auto& c = enc.config;
  Tensor out = num::matmul(patchify(frames, c.grid, c.channels, c.patch_size), enc.vis_w);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] + enc.vis_b[j];
  }
  return out;
}

PooledTargets build_targets(const data::VideoSample& s, const EncoderSnapshot& enc, int k) {
  if (s.thought_frames.empty()) fail(ErrorKind::Dimension, "sample " + std::to_string(s.sample_id) + " has no thought frames");
  return adaptive_avg_pool(encode_frames(s.thought_frames, enc), k);
}

std::filesystem::path target_cache_path(const std::filesystem::path& dir, const EncoderSnapshot& enc, int k) {
  return dir / ("targets-K" + std::to_string(k) + "-" + enc.hash + ".bin");
}

namespace {
constexpr char kTargetMagic[8] = {'S', 'T', 'R', 'M', 'T', 'G', 'T', 'S'};
}

std::vector<PooledTargets> load_or_build_targets(const std::vector<data::VideoSample>& samples,
                                                 const EncoderSnapshot& enc, int k,
                                                 const std::filesystem::path& cache_dir) {
  const auto path = target_cache_path(cache_dir, enc, k);
  std::vector<PooledTargets> out;
  if (!cache_dir.empty() && std::filesystem::exists(path)) {
    const auto bytes = io::read_file(path);
    io::Reader r(bytes, path.string());
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kTargetMagic, 8) != 0) fail(ErrorKind::File, path.string() + ": bad magic");
    if (r.u16() != 1) fail(ErrorKind::File, path.string() + ": unsupported version");
    const std::uint32_t n = r.u32();
    if (n == samples.size()) {
      for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t sources = r.u32();
        auto [name, g] = model::read_tensor_record(r);
        if (name != "sample/" + std::to_string(samples[i].sample_id))
          fail(ErrorKind::File, path.string() + ": record " + name + " does not match the dataset");
        out.push_back({std::move(g), sources, k});
      }
      return out;
    }
  }
  io::Writer w;
  w.bytes(kTargetMagic, 8);
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    out.push_back(build_targets(s, enc, k));
    w.u32(static_cast<std::uint32_t>(out.back().source_tokens));
    model::write_tensor_record(w, "sample/" + std::to_string(s.sample_id), out.back().g, model::DType::F64);
  }
  if (!cache_dir.empty()) io::write_file(path, w.buffer());
  return out;
}

std::vector<InputElement> SequenceLayout::prompt() const {
  const auto end = span(Span::LatentStart).begin;
  return {elements.begin(), elements.begin() + static_cast<std::ptrdiff_t>(end)};
}

Tensor keyframe_patches(const data::VideoSample& s, const model::ModelConfig& c) {
  if (s.grid != c.grid || s.channels != c.channels)
    fail(ErrorKind::Dimension, "sample frames are " + std::to_string(s.grid) + "x" + std::to_string(s.grid) + "x" +
                                   std::to_string(s.channels) + ", model expects " + std::to_string(c.grid) + "x" +
                                   std::to_string(c.grid) + "x" + std::to_string(c.channels));
  Tensor keys({s.keyframes.size(), s.frames.cols()});
  for (std::size_t i = 0; i < s.keyframes.size(); ++i) {
    const auto f = static_cast<std::size_t>(s.keyframes[i]);
    if (f >= s.frame_count()) fail(ErrorKind::Dimension, "keyframe index " + std::to_string(f) + " out of range");
    auto src = s.frames.row(f);
    std::copy(src.begin(), src.end(), keys.row(i).begin());
  }
  return patchify(keys, c.grid, c.channels, c.patch_size);
}

SequenceLayout build_sequence_layout(const data::VideoSample& s, const model::Model& m, int k,
                                     bool include_latent_end_in_loss) {
  if (k < 1) fail(ErrorKind::Config, "latent budget must be at least 1");
  if (s.question.empty() || s.answer.empty())
    fail(ErrorKind::Config, "sample " + std::to_string(s.sample_id) + " lacks question or answer tokens");
  const auto& c = m.config();

  SequenceLayout L;
  auto open = [&](Span sp) { L.spans[static_cast<std::size_t>(sp)].begin = L.elements.size(); };
  auto close = [&](Span sp) { L.spans[static_cast<std::size_t>(sp)].end = L.elements.size(); };
  auto push_token = [&](int id) {
    L.elements.push_back(InputElement::token(id));
    L.targets.push_back(id);
  };

  open(Span::Bos);
  push_token(tok::BOS);
  close(Span::Bos);

  open(Span::Video);
  {
    num::Graph g(false);
    model::Session sess(g, m);
    const Tensor& tokens = g.value(sess.project_patches(g.constant(keyframe_patches(s, c))));
    for (std::size_t r = 0; r < tokens.rows(); ++r) {
      auto row = tokens.row(r);
      L.elements.push_back(InputElement::video({row.begin(), row.end()}));
      L.targets.push_back(-1);
    }
  }
  close(Span::Video);

  open(Span::Question);
  for (int id : s.question) push_token(id);
  close(Span::Question);

  open(Span::LatentStart);
  push_token(tok::LATENT_START);
  close(Span::LatentStart);

  open(Span::LatentSlots);
  for (int i = 0; i < k; ++i) push_token(tok::LATENT_PAD);
  close(Span::LatentSlots);

  open(Span::LatentEnd);
  push_token(tok::LATENT_END);
  close(Span::LatentEnd);

  open(Span::Answer);
  for (int id : s.answer) push_token(id);
  close(Span::Answer);

  open(Span::Eos);
  push_token(tok::EOS);
  close(Span::Eos);

  L.loss_mask.assign(L.elements.size(), false);
  for (auto sp : {Span::Answer, Span::Eos})
    for (std::size_t i = L.span(sp).begin; i < L.span(sp).end; ++i) L.loss_mask[i] = true;
  if (include_latent_end_in_loss) L.loss_mask[L.span(Span::LatentEnd).begin] = true;

  if (L.elements.size() > static_cast<std::size_t>(c.max_seq_len))
    fail(ErrorKind::SequenceLength, "layout of sample " + std::to_string(s.sample_id) + " needs " +
                                        std::to_string(L.elements.size()) + " positions, max_seq_len is " +
                                        std::to_string(c.max_seq_len));
  return L;
}

}  // namespace storm::sup
