#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "storm/datagen.hpp"
#include "storm/model.hpp"
#include "storm/training.hpp"

namespace storm::cli {

// Every setting a subcommand may read, as one flat record. Serialised as a
// JSON object whose keys are the field names.
struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t n = 512;
  // data
  int frames = 5, grid = 8, block = 3, density = 1, qa_per_video = 2;
  double event_prob = 0.5;
  // model
  int d = 64, n_layers = 2, n_heads = 4, d_ff = 128, max_seq_len = 64, patch_size = 4;
  // training
  int latent_k = 8;
  double lambda = 0.1;
  double lr = 3e-4;
  std::string stage = "both";  // 1 | 2 | both
  int steps = -1;              // per stage; negative: epochs x train size
  int epochs1 = 1, epochs2 = 1;
  double clip = 1.0;
  double weight_decay = 0.0;
  bool lr_decay = false;
  bool latent_end_loss = false;
  // inference and diagnostics
  bool force_latent_entry = true;
  int extra_passes = 3;
  std::string split = "heldout";  // train | heldout | all
  // paths
  std::string data, ckpt, out_dir;

  model::ModelConfig model_config() const;
  data::DataConfig data_config() const;
  train::StageConfig stage_config(train::Stage s) const;
  void validate() const;
};

std::string to_json(const RunConfig& c);

// defaults < `file` (when non-empty) < `overrides` (a JSON object). Unknown
// keys and type mismatches are configuration errors.
RunConfig load_config(const std::filesystem::path& file, const std::string& overrides_json = "{}");

// Samples of `split` under the held-out rule.
std::vector<data::VideoSample> select_split(const std::vector<data::VideoSample>& all, int qa_per_video,
                                            const std::string& split);

// Exit codes: 0 success, 1 usage error, 2 runtime error.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace storm::cli
