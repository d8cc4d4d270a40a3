#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace storm {

// Closed vocabulary of the synthetic video-QA task.
namespace tok {
enum Id : int {
  BOS = 0,
  EOS,
  LATENT_START,
  LATENT_PAD,
  LATENT_END,
  OPT_A,
  OPT_B,
  OPT_C,
  OPT_D,
  DIGIT_0,
  DIGIT_9 = DIGIT_0 + 9,
  WHAT,
  DIRECTION,
  BEFORE,
  AFTER,
  EVENT,
  TURN,
  MOVED,
  QUESTION_MARK,
  UP,
  DOWN,
  LEFT,
  RIGHT,
  YES,
  NO,
  STRAIGHT,
  REVERSE,
  TURN_LEFT,
  TURN_RIGHT,
  COUNT
};
}  // namespace tok

class Vocab {
 public:
  static const Vocab& standard();

  int size() const noexcept { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const;
  std::optional<int> find(std::string_view name) const;

  int bos() const noexcept { return tok::BOS; }
  int eos() const noexcept { return tok::EOS; }
  int latent_start() const noexcept { return tok::LATENT_START; }
  int latent_pad() const noexcept { return tok::LATENT_PAD; }
  int latent_end() const noexcept { return tok::LATENT_END; }

  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  Vocab();
  std::vector<std::string> names_;
};

}  // namespace storm
