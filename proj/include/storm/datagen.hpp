#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "storm/tensor.hpp"

namespace storm::data {

using num::Tensor;

// Screen coordinates: x grows to the right, y (the row index) grows downward.
struct Vec2 {
  int x = 0;
  int y = 0;
  bool operator==(const Vec2&) const = default;
};

struct MotionSpec {
  Vec2 start;
  Vec2 v_before;
  Vec2 v_after;  // equals v_before when there is no event
  std::optional<int> event_frame;
  bool operator==(const MotionSpec&) const = default;
};

enum class QuestionKind : std::uint8_t { DirectionBefore = 0, DirectionAfter = 1, HasEvent = 2, Order = 3 };

std::string to_string(QuestionKind k);
QuestionKind question_kind_from_string(const std::string& s);

struct VideoConfig {
  int frames = 5;  // T
  int grid = 8;    // G
  int channels = 1;
  int block = 3;
  double event_prob = 0.5;
  bool operator==(const VideoConfig&) const = default;
};

struct VideoSample {
  std::uint32_t sample_id = 0;
  std::uint32_t video_id = 0;
  std::uint64_t seed = 0;
  int grid = 0;
  int channels = 0;
  Tensor frames;  // [T x G*G*C], pixel (y, x, c) at (y*G + x)*C + c, values in {0, 1}
  MotionSpec motion;
  std::vector<int> keyframes;
  Tensor thought_frames;  // [density*(T-1)+1 x G*G*C]
  QuestionKind kind = QuestionKind::DirectionBefore;
  std::vector<int> question;  // template tokens then OPT_A o1 ... OPT_D o4
  std::array<int, 4> options{};
  std::vector<int> answer;  // N = 1

  std::size_t frame_count() const { return frames.rows(); }
  bool operator==(const VideoSample&) const = default;
};

// Block positions (top-left corner) for frames 0..T-1; reflects at borders.
std::vector<Vec2> trajectory(const MotionSpec& m, const VideoConfig& c);
Tensor render(const std::vector<Vec2>& positions, const VideoConfig& c);

// Video with explicit kinematics (frames + motion only).
VideoSample make_video(const MotionSpec& m, const VideoConfig& c);
// Random kinematics from `seed`; starts are chosen so the block never
// reaches a border, which keeps every velocity change at the event frame.
VideoSample gen_video(std::uint64_t seed, const VideoConfig& c);

std::vector<int> select_keyframes(const VideoSample& s);
Tensor gen_thought_video(const VideoSample& s, const VideoConfig& c, int density);

// Answer oracle: recomputes the answer token from the kinematics.
int answer_oracle(const MotionSpec& m, QuestionKind kind);
int direction_token(Vec2 v);
std::vector<int> question_template(QuestionKind kind);
// Fills question, options and answer.
void gen_qa_sample(VideoSample& s, QuestionKind kind, std::uint64_t seed);

// Teacher plan: the kinematics rendered through a fixed text template.
std::string teacher_plan(const MotionSpec& m, int frames);

// ---- datasets ---------------------------------------------------------------------

struct DataConfig {
  VideoConfig video;
  int density = 1;
  int qa_per_video = 2;
  std::vector<QuestionKind> kinds{QuestionKind::DirectionBefore, QuestionKind::DirectionAfter, QuestionKind::HasEvent,
                                  QuestionKind::Order};
  std::uint64_t seed = 7;
  bool operator==(const DataConfig&) const = default;
};

std::string to_json(const DataConfig& c);
DataConfig data_config_from_json(const std::string& text);

// Sample i carries QA seed seed+i; the video of group g = i / qa_per_video
// is generated from seed + g*qa_per_video, the seed of its first sample.
VideoSample generate_sample(const DataConfig& c, std::uint32_t index);
std::vector<VideoSample> generate_samples(const DataConfig& c, std::size_t n);

struct DatasetManifest {
  std::size_t count = 0;
  std::vector<std::uint64_t> offsets;
  std::vector<std::string> vocab;
  DataConfig config;
  std::string blob = "samples.bin";
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<VideoSample> samples;
};

inline constexpr const char* kManifestFile = "manifest.json";

std::vector<std::uint8_t> encode_sample(const VideoSample& s);
VideoSample decode_sample(const std::uint8_t* data, std::size_t size);

// Writes manifest.json and samples.bin into `dir`.
DatasetManifest build_dataset(const DataConfig& c, std::size_t n, const std::filesystem::path& dir);
DatasetManifest write_dataset(const DataConfig& c, const std::vector<VideoSample>& samples,
                              const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// First held-out index: last 10% by generation index, moved forward to a
// video boundary so no video straddles the split.
std::size_t heldout_start(std::size_t n, int qa_per_video);

}  // namespace storm::data
