#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "storm/datagen.hpp"
#include "storm/model.hpp"

namespace storm::sup {

using model::InputElement;
using num::Tensor;

// frames [n x G*G*C] -> patches [n*(G/p)^2 x p*p*C]. Patches are ordered
// frame-major, then row-major over the patch grid; a patch flattens (dy, dx, c).
Tensor patchify(const Tensor& frames, int grid, int channels, int patch);

// Visual tokens [n*(G/p)^2 x d] through the model's patch projection.
Tensor encode_frames(const Tensor& frames, const model::Model& m);

struct PooledTargets {
  Tensor g;  // [K x d]
  std::size_t source_tokens = 0;
  int k = 0;
};

// Segment i covers rows [floor(i*M/K), ceil((i+1)*M/K)).
std::pair<std::size_t, std::size_t> pool_segment(std::size_t i, std::size_t m, std::size_t k);
PooledTargets adaptive_avg_pool(const Tensor& h, int k);

// Frozen copy of the patch projection used to build static targets.
struct EncoderSnapshot {
  model::ModelConfig config;
  Tensor vis_w, vis_b;
  std::string hash;  // hex FNV-1a over config and weights
};

EncoderSnapshot snapshot_encoder(const model::Model& m);
Tensor encode_frames(const Tensor& frames, const EncoderSnapshot& enc);

PooledTargets build_targets(const data::VideoSample& s, const EncoderSnapshot& enc, int k);

// Targets for every sample, cached beside the dataset in
// targets-K<k>-<hash>.bin and reused when the key matches.
std::vector<PooledTargets> load_or_build_targets(const std::vector<data::VideoSample>& samples,
                                                 const EncoderSnapshot& enc, int k,
                                                 const std::filesystem::path& cache_dir);
std::filesystem::path target_cache_path(const std::filesystem::path& dir, const EncoderSnapshot& enc, int k);

enum class Span { Bos = 0, Video, Question, LatentStart, LatentSlots, LatentEnd, Answer, Eos };
inline constexpr std::size_t kSpanCount = 8;

struct Range {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Range&) const = default;
};

struct SequenceLayout {
  std::vector<InputElement> elements;  // latent slots hold LATENT_PAD placeholders
  std::array<Range, kSpanCount> spans{};
  std::vector<bool> loss_mask;  // true on positions whose token is an answer target
  std::vector<int> targets;     // token id at each position, -1 for continuous ones

  const Range& span(Span s) const { return spans[static_cast<std::size_t>(s)]; }
  std::size_t size() const { return elements.size(); }
  // [BOS, video, question]: the inference prompt.
  std::vector<InputElement> prompt() const;
};

// Video tokens come from the current model parameters.
SequenceLayout build_sequence_layout(const data::VideoSample& s, const model::Model& m, int k,
                                     bool include_latent_end_in_loss = false);

// Raw patches of the keyframes, for in-graph video tokens during training.
Tensor keyframe_patches(const data::VideoSample& s, const model::ModelConfig& c);

}  // namespace storm::sup
