#include "storm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "storm/binio.hpp"
#include "storm/error.hpp"
#include "storm/vocab.hpp"

namespace storm::data {

using nlohmann::json;

namespace {

// mt19937_64 output is fixed by the standard; the distributions are not, so
// the mappings to ranges are done here.
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : gen_(seed) {}
  std::uint64_t below(std::uint64_t n) { return gen_() % n; }
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 gen_;
};

constexpr std::array<Vec2, 4> kDirections{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};

void check_config(const VideoConfig& c) {
  if (c.frames < 2) fail(ErrorKind::Config, "videos need at least 2 frames, got " + std::to_string(c.frames));
  if (c.grid < 4) fail(ErrorKind::Config, "grid must be at least 4, got " + std::to_string(c.grid));
  if (c.channels < 1) fail(ErrorKind::Config, "channels must be positive");
  if (c.block < 1 || c.block > c.grid)
    fail(ErrorKind::Config,
         "a " + std::to_string(c.block) + "x" + std::to_string(c.block) + " block cannot fit a grid of " +
             std::to_string(c.grid));
  if (!(c.event_prob >= 0.0 && c.event_prob <= 1.0)) fail(ErrorKind::Config, "event_prob must lie in [0, 1]");
}

Vec2 velocity_at(const MotionSpec& m, int t) { return m.event_frame && t >= *m.event_frame ? m.v_after : m.v_before; }

}  // namespace

std::string to_string(QuestionKind k) {
  switch (k) {
    case QuestionKind::DirectionBefore: return "DIRECTION_BEFORE";
    case QuestionKind::DirectionAfter: return "DIRECTION_AFTER";
    case QuestionKind::HasEvent: return "HAS_EVENT";
    case QuestionKind::Order: return "ORDER";
  }
  return "?";
}

QuestionKind question_kind_from_string(const std::string& s) {
  for (auto k : {QuestionKind::DirectionBefore, QuestionKind::DirectionAfter, QuestionKind::HasEvent,
                 QuestionKind::Order})
    if (to_string(k) == s) return k;
  fail(ErrorKind::Config, "unknown question kind '" + s + "'");
}

std::vector<Vec2> trajectory(const MotionSpec& m, const VideoConfig& c) {
  check_config(c);
  const int hi = c.grid - c.block;
  std::vector<Vec2> pos{m.start};
  Vec2 cur = m.v_before;
  for (int t = 0; t + 1 < c.frames; ++t) {
    if (m.event_frame && t == *m.event_frame) cur = m.v_after;
    Vec2 p = pos.back();
    Vec2 next{p.x + cur.x, p.y + cur.y};
    if (next.x < 0 || next.x > hi) {
      cur.x = -cur.x;
      next.x = p.x + cur.x;
    }
    if (next.y < 0 || next.y > hi) {
      cur.y = -cur.y;
      next.y = p.y + cur.y;
    }
    next.x = std::clamp(next.x, 0, hi);
    next.y = std::clamp(next.y, 0, hi);
    pos.push_back(next);
  }
  return pos;
}

Tensor render(const std::vector<Vec2>& positions, const VideoConfig& c) {
  const auto g = static_cast<std::size_t>(c.grid), ch = static_cast<std::size_t>(c.channels);
  Tensor out({positions.size(), g * g * ch});
  for (std::size_t f = 0; f < positions.size(); ++f) {
    auto row = out.row(f);
    for (int dy = 0; dy < c.block; ++dy)
      for (int dx = 0; dx < c.block; ++dx) {
        const auto y = static_cast<std::size_t>(positions[f].y + dy), x = static_cast<std::size_t>(positions[f].x + dx);
        if (y >= g || x >= g) continue;
        for (std::size_t k = 0; k < ch; ++k) row[(y * g + x) * ch + k] = 1.0;
      }
  }
  return out;
}

VideoSample make_video(const MotionSpec& m, const VideoConfig& c) {
  VideoSample s;
  s.grid = c.grid;
  s.channels = c.channels;
  s.motion = m;
  if (!m.event_frame) s.motion.v_after = m.v_before;
  s.frames = render(trajectory(s.motion, c), c);
  return s;
}

VideoSample gen_video(std::uint64_t seed, const VideoConfig& c) {
  check_config(c);
  Draw rng(seed);
  MotionSpec m;
  m.v_before = kDirections[rng.below(4)];
  m.v_after = m.v_before;
  if (c.frames >= 3 && rng.unit() < c.event_prob) {
    m.event_frame = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.frames - 2)));
    Vec2 other[3];
    int n = 0;
    for (Vec2 d : kDirections)
      if (!(d == m.v_before)) other[n++] = d;
    m.v_after = other[rng.below(3)];
  }
  // Displacement envelope relative to the start, without reflection.
  int x = 0, y = 0, min_x = 0, max_x = 0, min_y = 0, max_y = 0;
  for (int t = 0; t + 1 < c.frames; ++t) {
    const Vec2 v = velocity_at(m, t);
    x += v.x;
    y += v.y;
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  const int hi = c.grid - c.block;
  auto pick = [&](int lo_off, int hi_off) {
    const int lo = -lo_off, top = hi - hi_off;
    if (top < lo) return static_cast<int>(rng.below(static_cast<std::uint64_t>(hi + 1)));  // reflection unavoidable
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(top - lo + 1)));
  };
  m.start.x = pick(min_x, max_x);
  m.start.y = pick(min_y, max_y);
  VideoSample s = make_video(m, c);
  s.seed = seed;
  return s;
}

std::vector<int> select_keyframes(const VideoSample& s) {
  const int last = static_cast<int>(s.frame_count()) - 1;
  std::vector<int> k{0, last};
  if (s.motion.event_frame) k.push_back(*s.motion.event_frame);
  std::sort(k.begin(), k.end());
  k.erase(std::unique(k.begin(), k.end()), k.end());
  return k;
}

Tensor gen_thought_video(const VideoSample& s, const VideoConfig& c, int density) {
  if (density < 1) fail(ErrorKind::Config, "thought-video density must be at least 1");
  const auto keys = s.keyframes.empty() ? select_keyframes(s) : s.keyframes;
  const auto path = trajectory(s.motion, c);
  const int first = keys.front(), last = keys.back();
  std::vector<Vec2> dense;
  for (int step = 0; step <= density * (last - first); ++step) {
    const int t0 = first + step / density, r = step % density;
    if (r == 0) {
      dense.push_back(path[static_cast<std::size_t>(t0)]);
      continue;
    }
    const Vec2 a = path[static_cast<std::size_t>(t0)], b = path[static_cast<std::size_t>(t0 + 1)];
    const double f = static_cast<double>(r) / density;
    dense.push_back({static_cast<int>(std::lround(a.x + f * (b.x - a.x))),
                     static_cast<int>(std::lround(a.y + f * (b.y - a.y)))});
  }
  return render(dense, c);
}

int direction_token(Vec2 v) {
  if (v.x > 0 && v.y == 0) return tok::RIGHT;
  if (v.x < 0 && v.y == 0) return tok::LEFT;
  if (v.y > 0 && v.x == 0) return tok::DOWN;
  if (v.y < 0 && v.x == 0) return tok::UP;
  fail(ErrorKind::Config, "velocity (" + std::to_string(v.x) + "," + std::to_string(v.y) + ") has no direction word");
}

int answer_oracle(const MotionSpec& m, QuestionKind kind) {
  const Vec2 after = m.event_frame ? m.v_after : m.v_before;
  switch (kind) {
    case QuestionKind::DirectionBefore: return direction_token(m.v_before);
    case QuestionKind::DirectionAfter: return direction_token(after);
    case QuestionKind::HasEvent: return m.event_frame && !(after == m.v_before) ? tok::YES : tok::NO;
    case QuestionKind::Order: {
      if (after == m.v_before) return tok::STRAIGHT;
      if (after.x == -m.v_before.x && after.y == -m.v_before.y) return tok::REVERSE;
      // y grows downward, so a positive cross product is a clockwise (right) turn.
      const int cross = m.v_before.x * after.y - m.v_before.y * after.x;
      return cross > 0 ? tok::TURN_RIGHT : tok::TURN_LEFT;
    }
  }
  fail(ErrorKind::Config, "unknown question kind");
}

std::vector<int> question_template(QuestionKind kind) {
  switch (kind) {
    case QuestionKind::DirectionBefore: return {tok::WHAT, tok::DIRECTION, tok::BEFORE, tok::QUESTION_MARK};
    case QuestionKind::DirectionAfter: return {tok::WHAT, tok::DIRECTION, tok::AFTER, tok::QUESTION_MARK};
    case QuestionKind::HasEvent: return {tok::MOVED, tok::TURN, tok::EVENT, tok::QUESTION_MARK};
    case QuestionKind::Order: return {tok::WHAT, tok::TURN, tok::EVENT, tok::QUESTION_MARK};
  }
  fail(ErrorKind::Config, "unknown question kind");
}

void gen_qa_sample(VideoSample& s, QuestionKind kind, std::uint64_t seed) {
  if (static_cast<int>(kind) > static_cast<int>(QuestionKind::Order))
    fail(ErrorKind::Config, "unknown question kind " + std::to_string(static_cast<int>(kind)));
  Draw rng(seed ^ 0x5bd1e995ULL);
  const int answer = answer_oracle(s.motion, kind);
  std::array<int, 4> opts{};
  switch (kind) {
    case QuestionKind::DirectionBefore:
    case QuestionKind::DirectionAfter: opts = {tok::UP, tok::DOWN, tok::LEFT, tok::RIGHT}; break;
    case QuestionKind::Order: opts = {tok::STRAIGHT, tok::REVERSE, tok::TURN_LEFT, tok::TURN_RIGHT}; break;
    case QuestionKind::HasEvent: {
      std::array<int, 4> fillers{tok::STRAIGHT, tok::REVERSE, tok::TURN_LEFT, tok::TURN_RIGHT};
      const auto a = rng.below(4);
      auto b = rng.below(3);
      if (b >= a) ++b;
      opts = {tok::YES, tok::NO, fillers[a], fillers[b]};
      break;
    }
  }
  for (std::size_t i = opts.size() - 1; i > 0; --i) std::swap(opts[i], opts[rng.below(i + 1)]);
  s.kind = kind;
  s.options = opts;
  s.answer = {answer};
  s.question = question_template(kind);
  const int letters[4] = {tok::OPT_A, tok::OPT_B, tok::OPT_C, tok::OPT_D};
  for (int i = 0; i < 4; ++i) {
    s.question.push_back(letters[i]);
    s.question.push_back(opts[static_cast<std::size_t>(i)]);
  }
}

std::string teacher_plan(const MotionSpec& m, int frames) {
  const Vocab& v = Vocab::standard();
  std::ostringstream out;
  out << "the block starts at (" << m.start.x << "," << m.start.y << ") and moves " << v.name(direction_token(m.v_before));
  if (m.event_frame && !(m.v_after == m.v_before))
    out << "; at frame " << *m.event_frame << " it turns " << v.name(direction_token(m.v_after));
  out << "; the clip has " << frames << " frames";
  return out.str();
}

// ---- datasets -----------------------------------------------------------------------

std::string to_json(const DataConfig& c) {
  json kinds = json::array();
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  json j{{"frames", c.video.frames},
         {"grid", c.video.grid},
         {"channels", c.video.channels},
         {"block", c.video.block},
         {"event_prob", c.video.event_prob},
         {"density", c.density},
         {"qa_per_video", c.qa_per_video},
         {"kinds", kinds},
         {"seed", c.seed}};
  return j.dump();
}

DataConfig data_config_from_json(const std::string& text) {
  DataConfig c;
  try {
    const json j = json::parse(text);
    c.video.frames = j.at("frames").get<int>();
    c.video.grid = j.at("grid").get<int>();
    c.video.channels = j.at("channels").get<int>();
    c.video.block = j.at("block").get<int>();
    c.video.event_prob = j.at("event_prob").get<double>();
    c.density = j.at("density").get<int>();
    c.qa_per_video = j.at("qa_per_video").get<int>();
    c.kinds.clear();
    for (const auto& k : j.at("kinds")) c.kinds.push_back(question_kind_from_string(k.get<std::string>()));
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("dataset config: ") + e.what());
  }
  return c;
}

VideoSample generate_sample(const DataConfig& c, std::uint32_t index) {
  if (c.qa_per_video < 1) fail(ErrorKind::Config, "qa_per_video must be at least 1");
  if (c.kinds.empty()) fail(ErrorKind::Config, "at least one question kind is required");
  const auto q = static_cast<std::uint32_t>(c.qa_per_video);
  const std::uint32_t video = index / q, slot = index % q;
  const std::uint64_t video_seed = c.seed + static_cast<std::uint64_t>(video) * q;
  VideoSample s = gen_video(video_seed, c.video);
  s.sample_id = index;
  s.video_id = video;
  s.keyframes = select_keyframes(s);
  s.thought_frames = gen_thought_video(s, c.video, c.density);

  // Distinct kinds within a video: a seeded shuffle of the kind list.
  std::vector<QuestionKind> order = c.kinds;
  Draw rng(video_seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const std::uint64_t qa_seed = c.seed + index;
  gen_qa_sample(s, order[slot % order.size()], qa_seed);
  s.seed = qa_seed;
  return s;
}

std::vector<VideoSample> generate_samples(const DataConfig& c, std::size_t n) {
  std::vector<VideoSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(c, static_cast<std::uint32_t>(i)));
  return out;
}

namespace {

void put_frames(io::Writer& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rows()));
  w.u32(static_cast<std::uint32_t>(t.cols()));
  for (double v : t.values()) w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

Tensor get_frames(io::Reader& r) {
  const std::size_t rows = r.u32(), cols = r.u32();
  Tensor t({rows, cols});
  for (double& v : t.values()) v = r.u8() / 255.0;
  return t;
}

void put_ints(io::Writer& w, const std::vector<int>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (int x : v) w.i32(x);
}

std::vector<int> get_ints(io::Reader& r) {
  std::vector<int> v(r.u32());
  for (int& x : v) x = r.i32();
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_sample(const VideoSample& s) {
  io::Writer w;
  w.u32(s.sample_id);
  w.u32(s.video_id);
  w.u64(s.seed);
  w.u32(static_cast<std::uint32_t>(s.grid));
  w.u32(static_cast<std::uint32_t>(s.channels));
  const MotionSpec& m = s.motion;
  for (int v : {m.start.x, m.start.y, m.v_before.x, m.v_before.y, m.v_after.x, m.v_after.y, m.event_frame.value_or(-1)})
    w.i32(v);
  w.u8(static_cast<std::uint8_t>(s.kind));
  put_frames(w, s.frames);
  put_ints(w, s.keyframes);
  put_frames(w, s.thought_frames);
  put_ints(w, s.question);
  for (int o : s.options) w.i32(o);
  put_ints(w, s.answer);
  return w.buffer();
}

VideoSample decode_sample(const std::uint8_t* data, std::size_t size) {
  io::Reader r(data, size, "sample record");
  VideoSample s;
  s.sample_id = r.u32();
  s.video_id = r.u32();
  s.seed = r.u64();
  s.grid = static_cast<int>(r.u32());
  s.channels = static_cast<int>(r.u32());
  int v[7];
  for (int& x : v) x = r.i32();
  s.motion = {{v[0], v[1]}, {v[2], v[3]}, {v[4], v[5]}, v[6] < 0 ? std::nullopt : std::optional<int>(v[6])};
  const auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(QuestionKind::Order))
    fail(ErrorKind::File, "sample record: unknown question kind " + std::to_string(kind));
  s.kind = static_cast<QuestionKind>(kind);
  s.frames = get_frames(r);
  s.keyframes = get_ints(r);
  s.thought_frames = get_frames(r);
  s.question = get_ints(r);
  for (int& o : s.options) o = r.i32();
  s.answer = get_ints(r);
  return s;
}

DatasetManifest write_dataset(const DataConfig& c, const std::vector<VideoSample>& samples,
                              const std::filesystem::path& dir) {
  DatasetManifest m;
  m.count = samples.size();
  m.vocab = Vocab::standard().names();
  m.config = c;
  std::vector<std::uint8_t> blob;
  for (const auto& s : samples) {
    m.offsets.push_back(blob.size());
    auto rec = encode_sample(s);
    blob.insert(blob.end(), rec.begin(), rec.end());
  }
  io::write_file(dir / m.blob, blob);
  json j{{"format", "storm-dataset"},
         {"version", 1},
         {"count", m.count},
         {"offsets", m.offsets},
         {"blob", m.blob},
         {"blob_bytes", blob.size()},
         {"vocab", m.vocab},
         {"config", json::parse(to_json(c))}};
  io::write_text(dir / kManifestFile, j.dump(2) + "\n");
  return m;
}

DatasetManifest build_dataset(const DataConfig& c, std::size_t n, const std::filesystem::path& dir) {
  return write_dataset(c, generate_samples(c, n), dir);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestFile;
  json j;
  try {
    j = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::File, manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  std::uint64_t blob_bytes = 0;
  try {
    if (j.at("format") != "storm-dataset") fail(ErrorKind::File, manifest_path.string() + ": not a dataset manifest");
    d.manifest.count = j.at("count").get<std::size_t>();
    d.manifest.offsets = j.at("offsets").get<std::vector<std::uint64_t>>();
    d.manifest.blob = j.at("blob").get<std::string>();
    d.manifest.vocab = j.at("vocab").get<std::vector<std::string>>();
    d.manifest.config = data_config_from_json(j.at("config").dump());
    blob_bytes = j.at("blob_bytes").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::File, manifest_path.string() + ": " + e.what());
  }
  if (d.manifest.offsets.size() != d.manifest.count)
    fail(ErrorKind::File, manifest_path.string() + ": offset count does not match sample count");
  if (d.manifest.vocab != Vocab::standard().names())
    fail(ErrorKind::Vocabulary, manifest_path.string() + ": dataset vocabulary differs from this build");
  const auto blob = io::read_file(dir / d.manifest.blob);
  if (blob.size() != blob_bytes) fail(ErrorKind::File, (dir / d.manifest.blob).string() + ": size mismatch");
  for (std::size_t i = 0; i < d.manifest.count; ++i) {
    const auto begin = d.manifest.offsets[i];
    const auto end = i + 1 < d.manifest.count ? d.manifest.offsets[i + 1] : blob.size();
    if (end <= begin || end > blob.size()) fail(ErrorKind::File, "dataset offsets are not strictly increasing");
    d.samples.push_back(decode_sample(blob.data() + begin, end - begin));
  }
  return d;
}

std::size_t heldout_start(std::size_t n, int qa_per_video) {
  const auto q = static_cast<std::size_t>(std::max(qa_per_video, 1));
  std::size_t start = (9 * n + 9) / 10;  // ceil(0.9 n)
  start = (start + q - 1) / q * q;
  return std::min(start, n);
}

}  // namespace storm::data
