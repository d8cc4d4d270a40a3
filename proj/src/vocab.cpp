#include "storm/vocab.hpp"

#include "storm/error.hpp"

namespace storm {

Vocab::Vocab() {
  names_ = {"<bos>", "<eos>", "<|latent_start|>", "<|latent_pad|>", "<|latent_end|>", "A", "B", "C", "D"};
  for (int d = 0; d <= 9; ++d) names_.push_back(std::to_string(d));
  for (const char* w : {"what", "direction", "before", "after", "event", "turn", "moved", "?", "up", "down",
                        "left", "right", "yes", "no", "straight", "reverse", "turn_left", "turn_right"})
    names_.emplace_back(w);
  if (static_cast<int>(names_.size()) != tok::COUNT) fail(ErrorKind::Config, "vocabulary table out of sync");
}

const Vocab& Vocab::standard() {
  static const Vocab v;
  return v;
}

const std::string& Vocab::name(int id) const {
  if (id < 0 || id >= size()) fail(ErrorKind::Vocabulary, "token id " + std::to_string(id) + " out of range");
  return names_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

}  // namespace storm
