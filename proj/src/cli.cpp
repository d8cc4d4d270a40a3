#include "storm/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "storm/binio.hpp"
#include "storm/checkpoint.hpp"
#include "storm/diagnostics.hpp"
#include "storm/error.hpp"
#include "storm/rollout.hpp"
#include "storm/supervision.hpp"
#include "storm/vocab.hpp"

namespace storm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

model::ModelConfig RunConfig::model_config() const {
  model::ModelConfig m;
  m.d = d;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_ff = d_ff;
  m.max_seq_len = max_seq_len;
  m.patch_size = patch_size;
  m.grid = grid;
  m.seed = seed;
  return m;
}

data::DataConfig RunConfig::data_config() const {
  data::DataConfig c;
  c.video.frames = frames;
  c.video.grid = grid;
  c.video.block = block;
  c.video.event_prob = event_prob;
  c.density = density;
  c.qa_per_video = qa_per_video;
  c.seed = seed;
  return c;
}

train::StageConfig RunConfig::stage_config(train::Stage s) const {
  train::StageConfig c;
  c.stage = s;
  c.lambda = s == train::Stage::One ? lambda : 0.0;
  c.learning_rate = lr;
  c.steps = steps;
  c.epochs = s == train::Stage::One ? epochs1 : epochs2;
  c.seed = seed;
  c.k = latent_k;
  c.clip = clip;
  c.weight_decay = weight_decay;
  c.lr_decay = lr_decay;
  c.latent_end_loss = latent_end_loss;
  return c;
}

void RunConfig::validate() const {
  if (!(lambda >= 0.0)) fail(ErrorKind::Config, "lambda must be non-negative, got " + std::to_string(lambda));
  if (!(lr > 0.0)) fail(ErrorKind::Config, "lr must be positive");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::Config, "weight_decay must be non-negative");
  if (latent_k < 1) fail(ErrorKind::Config, "latent_k must be at least 1");
  if (stage != "1" && stage != "2" && stage != "both") fail(ErrorKind::Config, "stage must be 1, 2 or both");
  if (split != "train" && split != "heldout" && split != "all")
    fail(ErrorKind::Config, "split must be train, heldout or all");
  if (epochs1 < 0 || epochs2 < 0) fail(ErrorKind::Config, "epochs must be non-negative");
  if (extra_passes < 0) fail(ErrorKind::Config, "extra_passes must be non-negative");
  if (density < 1) fail(ErrorKind::Config, "density must be at least 1");
  model_config().validate();
}

namespace {

json as_json(const RunConfig& c) {
  return json{{"seed", c.seed},
              {"n", c.n},
              {"frames", c.frames},
              {"grid", c.grid},
              {"block", c.block},
              {"density", c.density},
              {"qa_per_video", c.qa_per_video},
              {"event_prob", c.event_prob},
              {"d", c.d},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"max_seq_len", c.max_seq_len},
              {"patch_size", c.patch_size},
              {"latent_k", c.latent_k},
              {"lambda", c.lambda},
              {"lr", c.lr},
              {"stage", c.stage},
              {"steps", c.steps},
              {"epochs1", c.epochs1},
              {"epochs2", c.epochs2},
              {"clip", c.clip},
              {"weight_decay", c.weight_decay},
              {"lr_decay", c.lr_decay},
              {"latent_end_loss", c.latent_end_loss},
              {"force_latent_entry", c.force_latent_entry},
              {"extra_passes", c.extra_passes},
              {"split", c.split},
              {"data", c.data},
              {"ckpt", c.ckpt},
              {"out_dir", c.out_dir}};
}

RunConfig from_json(const json& j) {
  RunConfig c;
  j.at("seed").get_to(c.seed);
  j.at("n").get_to(c.n);
  j.at("frames").get_to(c.frames);
  j.at("grid").get_to(c.grid);
  j.at("block").get_to(c.block);
  j.at("density").get_to(c.density);
  j.at("qa_per_video").get_to(c.qa_per_video);
  j.at("event_prob").get_to(c.event_prob);
  j.at("d").get_to(c.d);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("patch_size").get_to(c.patch_size);
  j.at("latent_k").get_to(c.latent_k);
  j.at("lambda").get_to(c.lambda);
  j.at("lr").get_to(c.lr);
  j.at("stage").get_to(c.stage);
  j.at("steps").get_to(c.steps);
  j.at("epochs1").get_to(c.epochs1);
  j.at("epochs2").get_to(c.epochs2);
  j.at("clip").get_to(c.clip);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("lr_decay").get_to(c.lr_decay);
  j.at("latent_end_loss").get_to(c.latent_end_loss);
  j.at("force_latent_entry").get_to(c.force_latent_entry);
  j.at("extra_passes").get_to(c.extra_passes);
  j.at("split").get_to(c.split);
  j.at("data").get_to(c.data);
  j.at("ckpt").get_to(c.ckpt);
  j.at("out_dir").get_to(c.out_dir);
  return c;
}

bool same_type(const json& want, const json& got) {
  if (want.is_boolean() || want.is_string()) return want.type() == got.type();
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_unsigned()) return got.is_number_unsigned();
  if (want.is_number_integer()) return got.is_number_integer();
  return false;
}

void merge(json& into, const json& layer, const std::string& source) {
  if (!layer.is_object()) fail(ErrorKind::Config, source + " must be a JSON object");
  for (const auto& [key, value] : layer.items()) {
    if (!into.contains(key)) fail(ErrorKind::Config, source + ": unknown key \"" + key + "\"");
    if (!same_type(into[key], value))
      fail(ErrorKind::Config, source + ": key \"" + key + "\" expects " + std::string(into[key].type_name()) +
                                  ", got " + value.type_name());
    // A negative number for a field whose default is unsigned lands here too.
    into[key] = value;
  }
}

json parse(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, source + " is not valid JSON: " + e.what());
  }
}

}  // namespace

std::string to_json(const RunConfig& c) { return as_json(c).dump(2) + "\n"; }

RunConfig load_config(const fs::path& file, const std::string& overrides_json) {
  json j = as_json(RunConfig{});
  if (!file.empty()) {
    const auto bytes = io::read_file(file);
    merge(j, parse(std::string(bytes.begin(), bytes.end()), file.string()), file.string());
  }
  merge(j, parse(overrides_json, "flags"), "flags");
  RunConfig c;
  try {
    c = from_json(j);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<data::VideoSample> select_split(const std::vector<data::VideoSample>& all, int qa_per_video,
                                            const std::string& split) {
  const std::size_t cut = data::heldout_start(all.size(), qa_per_video);
  if (split == "train") return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cut)};
  if (split == "heldout") return {all.begin() + static_cast<std::ptrdiff_t>(cut), all.end()};
  if (split == "all") return all;
  fail(ErrorKind::Config, "unknown split " + split);
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Files written under the output directory, listed in files.json at the end.
class Output {
 public:
  explicit Output(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& content) {
    io::write_file(path(name), std::vector<std::uint8_t>(content.begin(), content.end()));
    note(name);
  }
  void note(const std::string& name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }
  void finish(const RunConfig& c) {
    write("run_config.json", to_json(c));
    json list = json::array();
    for (const auto& f : files_) list.push_back({{"path", f}, {"bytes", fs::file_size(path(f))}});
    const std::string text = json{{"files", list}}.dump(2) + "\n";
    io::write_file(path("files.json"), std::vector<std::uint8_t>(text.begin(), text.end()));
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

fs::path resolve_out_dir(const RunConfig& c, const std::string& command) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* root = std::getenv("STORM_OUT_DIR"); root && *root) return fs::path(root) / command;
  return fs::path("runs") / command;
}

std::vector<data::VideoSample> split_of(const RunConfig& c) {
  if (c.data.empty()) throw UsageError("--data is required");
  const auto ds = data::load_dataset(c.data);
  return select_split(ds.samples, ds.manifest.config.qa_per_video, c.split);
}

model::Model checkpoint(const RunConfig& c) {
  if (c.ckpt.empty()) throw UsageError("--ckpt is required");
  return model::load_checkpoint(c.ckpt);
}

json metrics(const diag::RetrievalReport& r) {
  return json{{"hit_at_1", r.hit_at_1}, {"hit_at_5", r.hit_at_5}, {"mrr", r.mrr}, {"queries", r.per_query.size()}};
}

json stage_summary(const train::TrainReport& r, std::size_t window) {
  json s{{"steps", r.rows.size()}, {"wall_seconds", r.wall_seconds}};
  if (r.rows.empty()) return s;
  const std::size_t from = r.rows.size() - std::min(window, r.rows.size());
  double la = 0, ll = 0;
  for (std::size_t i = from; i < r.rows.size(); ++i) {
    la += r.rows[i].l_ans;
    if (r.rows[i].l_latent) ll += *r.rows[i].l_latent;
  }
  const auto n = static_cast<double>(r.rows.size() - from);
  s["first_l_ans"] = r.rows.front().l_ans;
  s["last_window_l_ans"] = la / n;
  if (r.rows.front().l_latent) {
    s["first_l_latent"] = *r.rows.front().l_latent;
    s["last_window_l_latent"] = ll / n;
  }
  return s;
}

void cmd_gen_data(const RunConfig& c, Output& out) {
  data::build_dataset(c.data_config(), c.n, out.dir());
  out.note(data::kManifestFile);
  out.note("samples.bin");
}

void cmd_train(const RunConfig& c, Output& out, std::ostream& log) {
  if (c.data.empty()) throw UsageError("--data is required");
  const auto ds = data::load_dataset(c.data);
  const auto train_set = select_split(ds.samples, ds.manifest.config.qa_per_video, "train");
  model::Model m = c.ckpt.empty() ? model::Model(c.model_config()) : model::load_checkpoint(c.ckpt);

  json summary{{"train_samples", train_set.size()}};
  if (c.stage != "2") {
    const auto cfg = c.stage_config(train::Stage::One);
    fs::create_directories(out.path("cache"));
    const auto enc = sup::snapshot_encoder(m);
    const auto targets = sup::load_or_build_targets(train_set, enc, cfg.k, out.path("cache"));
    out.note((fs::path("cache") / sup::target_cache_path({}, enc, cfg.k)).string());
    const auto r = train::run_stage(m, train_set, &targets, cfg);
    model::save_checkpoint(out.path("stage1.ckpt"), m);
    out.note("stage1.ckpt");
    out.write("stage1_report.csv", train::report_csv(r));
    summary["stage1"] = stage_summary(r, train_set.size());
    log << "stage 1: " << r.rows.size() << " steps\n";
  }
  if (c.stage != "1") {
    const auto r = train::run_stage(m, train_set, nullptr, c.stage_config(train::Stage::Two));
    model::save_checkpoint(out.path("stage2.ckpt"), m);
    out.note("stage2.ckpt");
    out.write("stage2_report.csv", train::report_csv(r));
    summary["stage2"] = stage_summary(r, train_set.size());
    log << "stage 2: " << r.rows.size() << " steps\n";
  }
  out.write("train.json", summary.dump(2) + "\n");
}

std::string token_list(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + Vocab::standard().name(ids[i]);
  return s;
}

void cmd_eval(const RunConfig& c, Output& out, std::ostream& log) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  const auto ev = train::evaluate(m, samples, c.latent_k, c.force_latent_entry);
  std::map<std::string, std::pair<int, int>> kinds;
  std::ostringstream csv;
  csv << "sample_id,kind,predicted,expected,correct\n";
  for (const auto& p : ev.predictions) {
    auto& [n, ok] = kinds[data::to_string(p.kind)];
    ++n;
    ok += p.correct;
    csv << p.sample_id << ',' << data::to_string(p.kind) << ',' << token_list(p.predicted) << ','
        << token_list(p.expected) << ',' << (p.correct ? 1 : 0) << '\n';
  }
  json per_kind = json::object();
  for (const auto& [k, v] : kinds) per_kind[k] = {{"count", v.first}, {"correct", v.second}};
  const json j{{"split", c.split},
               {"count", ev.predictions.size()},
               {"accuracy", ev.accuracy},
               {"direction_event_accuracy", ev.direction_event_accuracy},
               {"direction_event_count", ev.direction_event_count},
               {"per_kind", per_kind}};
  out.write("predictions.csv", csv.str());
  out.write("eval.json", j.dump(2) + "\n");
  log << "accuracy " << ev.accuracy << " over " << ev.predictions.size() << " samples\n";
}

void cmd_rollout(const RunConfig& c, Output& out, std::ostream& log) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  std::string lines;
  std::map<int, int> slots;
  double passes = 0;
  std::size_t violations = 0;
  for (const auto& s : samples) {
    rollout::RolloutOptions o;
    o.budget = c.latent_k;
    o.max_answer_len = static_cast<int>(s.answer.size()) + 1;
    o.force_latent_entry = c.force_latent_entry;
    const auto prompt = sup::build_sequence_layout(s, m, c.latent_k).prompt();
    const auto r = rollout::run_inference(prompt, m, o);
    lines += json{{"sample_id", s.sample_id}, {"answer", token_list(r.answer)}}.dump() + "\n";
    lines += rollout::trace_to_jsonl(r.trace);
    ++slots[r.trace.slots_used];
    passes += r.trace.decode_passes;
    violations += rollout::trace_violations(r.trace, o).size();
  }
  json hist = json::object();
  for (const auto& [k, v] : slots) hist[std::to_string(k)] = v;
  out.write("rollouts.jsonl", lines);
  out.write("rollout.json", json{{"items", samples.size()},
                                 {"decode_passes_per_item", samples.empty() ? 0.0 : passes / samples.size()},
                                 {"slots_used", hist},
                                 {"invariant_violations", violations}}
                                    .dump(2) +
                                "\n");
  log << samples.size() << " rollouts, " << violations << " invariant violations\n";
}

void warn(std::ostream& err, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) err << "warning: " << w << '\n';
}

void cmd_probe(const RunConfig& c, Output& out, std::ostream& log, std::ostream& err) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  const auto reps = diag::extract_latent_reps(m, samples, c.latent_k, c.force_latent_entry);
  const auto rand = diag::random_reps(samples, c.latent_k, m.config().d, c.seed);
  const diag::Aggregation mean{diag::Aggregation::Mean, 0};
  const std::vector<diag::RetrievalReport> reports{diag::retrieval_probe(reps, mean, diag::RepKind::Latent),
                                                   diag::retrieval_probe(reps, mean, diag::RepKind::Text),
                                                   diag::retrieval_probe(rand, mean, diag::RepKind::Random)};
  std::vector<std::uint32_t> labels;
  for (const auto& s : samples) labels.push_back(s.video_id);
  json j{{"candidate_pool", "all QA samples except the query"}, {"chance_hit_at_1", diag::chance_hit_at_1(labels)}};
  for (const auto& r : reports) {
    warn(err, r.warnings);
    j[diag::to_string(r.kind)] = metrics(r);
    std::string name = diag::to_string(r.kind);
    for (char& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.write("per_query_" + name + ".csv", diag::per_query_csv(r));
  }
  out.write("probe.csv", diag::retrieval_csv(reports));
  out.write("probe.json", j.dump(2) + "\n");
  log << "LATENT hit@1 " << reports[0].hit_at_1 << ", chance " << j["chance_hit_at_1"].get<double>() << '\n';
}

void cmd_ablate(const RunConfig& c, Output& out, std::ostream& log, std::ostream& err) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  const auto reports = diag::slot_ablation(diag::extract_latent_reps(m, samples, c.latent_k, c.force_latent_entry));
  json j = json::object();
  for (const auto& r : reports) {
    warn(err, r.warnings);
    j[r.variant] = metrics(r);
  }
  out.write("ablation.csv", diag::retrieval_csv(reports));
  out.write("ablation.json", j.dump(2) + "\n");
  log << reports.size() << " ablation variants\n";
}

void cmd_export(const RunConfig& c, Output& out, std::ostream& log, std::ostream& err) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  const auto e = diag::export_embeddings(m, samples, c.latent_k);
  warn(err, e.warnings);
  out.write("embeddings.csv", e.csv);
  log << e.rows << " embedding rows\n";
}

void cmd_bench(const RunConfig& c, Output& out, std::ostream& log) {
  const auto samples = split_of(c);
  const auto m = checkpoint(c);
  const auto lat = diag::latency_bench(m, samples, c.latent_k, {diag::BenchMode::Latent, 0}, true);
  const auto tool = diag::latency_bench(m, samples, c.latent_k, {diag::BenchMode::SimulatedTool, c.extra_passes});
  json j = json::object();
  for (const auto* r : {&lat, &tool})
    j[r->mode] = {{"items", r->items},
                  {"decode_passes_per_item", r->decode_passes_per_item},
                  {"prefill_passes_per_item", r->prefill_passes_per_item},
                  {"prefill_positions_per_item", r->prefill_positions_per_item},
                  {"latent_logits_per_item", r->latent_logits_per_item},
                  {"items_per_second", r->items_per_second},
                  {"wall_seconds", r->wall_seconds}};
  out.write("bench.csv", diag::bench_csv({lat, tool}));
  out.write("bench.json", j.dump(2) + "\n");
  out.write("bench_traces.jsonl", lat.traces_jsonl);
  log << lat.mode << ' ' << lat.decode_passes_per_item << " passes/item, " << tool.mode << ' '
      << tool.decode_passes_per_item << '\n';
}

struct Flags {
  std::string config;
  std::optional<std::string> out_dir, stage, ckpt, data, split, force;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<int> latent_k, steps, density, extra_passes;
  std::optional<double> lambda, lr;

  json overrides() const {
    json j = json::object();
    if (out_dir) j["out_dir"] = *out_dir;
    if (stage) j["stage"] = *stage;
    if (ckpt) j["ckpt"] = *ckpt;
    if (data) j["data"] = *data;
    if (split) j["split"] = *split;
    if (force) j["force_latent_entry"] = *force == "on";
    if (seed) j["seed"] = *seed;
    if (n) j["n"] = *n;
    if (latent_k) j["latent_k"] = *latent_k;
    if (steps) j["steps"] = *steps;
    if (density) j["density"] = *density;
    if (extra_passes) j["extra_passes"] = *extra_passes;
    if (lambda) j["lambda"] = *lambda;
    if (lr) j["lr"] = *lr;
    return j;
  }
};

void add_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON run configuration");
  app->add_option("--out-dir", f.out_dir, "output directory");
  app->add_option("--seed", f.seed, "seed for data, initialisation and sample order");
  app->add_option("--n", f.n, "number of samples to generate");
  app->add_option("--latent-k", f.latent_k, "latent budget K");
  app->add_option("--lambda", f.lambda, "latent loss weight (Stage 1)");
  app->add_option("--lr", f.lr, "learning rate");
  app->add_option("--stage", f.stage, "training stages")->check(CLI::IsMember({"1", "2", "both"}));
  app->add_option("--steps", f.steps, "steps per stage (default: epochs x train size)");
  app->add_option("--ckpt", f.ckpt, "checkpoint file");
  app->add_option("--data", f.data, "dataset directory");
  app->add_option("--split", f.split, "dataset split")->check(CLI::IsMember({"train", "heldout", "all"}));
  app->add_option("--density", f.density, "thought-video density");
  app->add_option("--force-latent-entry", f.force, "insert LATENT_START after the prompt")
      ->check(CLI::IsMember({"on", "off"}));
  app->add_option("--extra-passes", f.extra_passes, "extra prefills per item for SIMULATED_TOOL");
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent video reasoning toolkit", "storm"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate a synthetic dataset"},
      {"train", "run Stage 1 and/or Stage 2 training"},
      {"eval", "answer accuracy of a checkpoint"},
      {"rollout", "write inference traces"},
      {"probe", "same-video retrieval probe"},
      {"ablate", "latent slot ablation"},
      {"export-embed", "2-D PCA export of frame, keyframe and latent states"},
      {"bench", "decode-pass and throughput benchmark"}};
  for (const auto& [name, help] : commands) add_flags(app.add_subcommand(name, help), flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig c;
  try {
    c = load_config(flags.config, flags.overrides().dump());
  } catch (const Error& e) {
    err << e.what() << '\n';
    return e.kind() == ErrorKind::Config ? 1 : 2;
  }
  try {
    c.out_dir = resolve_out_dir(c, command).string();
    Output o(c.out_dir);
    if (command == "gen-data") cmd_gen_data(c, o);
    else if (command == "train") cmd_train(c, o, out);
    else if (command == "eval") cmd_eval(c, o, out);
    else if (command == "rollout") cmd_rollout(c, o, out);
    else if (command == "probe") cmd_probe(c, o, out, err);
    else if (command == "ablate") cmd_ablate(c, o, out, err);
    else if (command == "export-embed") cmd_export(c, o, out, err);
    else if (command == "bench") cmd_bench(c, o, out);
    o.finish(c);
    out << "wrote " << c.out_dir << '\n';
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << app.get_subcommand(command)->help();
    return 1;
  } catch (const Error& e) {
    err << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace storm::cli
