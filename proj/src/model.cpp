#include "storm/model.hpp"

#include <cmath>
#include <random>

#include <json.hpp>

#include "storm/error.hpp"

namespace storm::model {

using nlohmann::json;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) fail(ErrorKind::Config, std::string(what) + " must be positive, got " + std::to_string(v));
  };
  positive(d, "d");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  positive(vocab_size, "vocab_size");
  positive(patch_size, "patch_size");
  positive(grid, "grid");
  positive(channels, "channels");
  if (d % n_heads != 0)
    fail(ErrorKind::Config, "d=" + std::to_string(d) + " is not divisible by n_heads=" + std::to_string(n_heads));
  if (grid % patch_size != 0)
    fail(ErrorKind::Config,
         "grid=" + std::to_string(grid) + " is not divisible by patch_size=" + std::to_string(patch_size));
  if (!(ln_epsilon > 0.0)) fail(ErrorKind::Config, "ln_epsilon must be positive");
}

std::string to_json(const ModelConfig& c) {
  json j{{"d", c.d},
         {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},
         {"d_ff", c.d_ff},
         {"max_seq_len", c.max_seq_len},
         {"vocab_size", c.vocab_size},
         {"patch_size", c.patch_size},
         {"grid", c.grid},
         {"channels", c.channels},
         {"seed", c.seed},
         {"feedback_projection", c.feedback_projection},
         {"ln_epsilon", c.ln_epsilon}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.d = j.at("d").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.grid = j.at("grid").get<int>();
    c.channels = j.at("channels").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.feedback_projection = j.at("feedback_projection").get<bool>();
    c.ln_epsilon = j.at("ln_epsilon").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("model config field: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::pair<std::string, num::Shape>> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::vector<std::pair<std::string, num::Shape>> out{
      {"tok_emb", {v, d}},
      {"vis_w", {static_cast<std::size_t>(c.patch_dim()), d}},
      {"vis_b", {d}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (auto& entry : std::vector<std::pair<std::string, num::Shape>>{
             {p + "ln1.gain", {d}}, {p + "ln1.bias", {d}},   {p + "attn.wq", {d, d}}, {p + "attn.bq", {d}},
             {p + "attn.wk", {d, d}}, {p + "attn.wv", {d, d}}, {p + "attn.bv", {d}},
             {p + "attn.wo", {d, d}}, {p + "attn.bo", {d}},  {p + "ln2.gain", {d}},   {p + "ln2.bias", {d}},
             {p + "ffn.w1", {d, ff}}, {p + "ffn.b1", {ff}},  {p + "ffn.w2", {ff, d}}, {p + "ffn.b2", {d}}})
      out.push_back(std::move(entry));
  }
  out.push_back({"lnf.gain", {d}});
  out.push_back({"lnf.bias", {d}});
  out.push_back({"out_w", {d, v}});
  if (c.feedback_projection) {
    out.push_back({"fb_w", {d, d}});
    out.push_back({"fb_b", {d}});
  }
  return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Model::Model(ModelConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const double range = 1.0 / std::sqrt(static_cast<double>(config_.d));
  for (auto& [name, shape] : parameter_layout(config_)) {
    Tensor t(shape);
    if (ends_with(name, "gain")) {
      t.fill(1.0);
    } else if (shape.size() == 2) {
      for (double& x : t.values()) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        x = range * (2.0 * u - 1.0);
      }
    }
    params_.add(name, std::move(t));
  }
  index_params();
}

Model::Model(ModelConfig config, ParamSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.size())
    fail(ErrorKind::Dimension, "expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                                   std::to_string(params_.size()));
  for (const auto& [name, shape] : layout) {
    const std::size_t i = params_.index(name);
    if (params_.value(i).shape() != shape)
      fail(ErrorKind::Dimension, "parameter " + name + " has shape " + num::shape_str(params_.value(i).shape()) +
                                     ", expected " + num::shape_str(shape));
  }
  index_params();
}

void Model::index_params() {
  const auto& p = params_;
  ids_.tok_emb = p.index("tok_emb");
  ids_.vis_w = p.index("vis_w");
  ids_.vis_b = p.index("vis_b");
  ids_.lnf_g = p.index("lnf.gain");
  ids_.lnf_b = p.index("lnf.bias");
  ids_.out_w = p.index("out_w");
  if (config_.feedback_projection) {
    ids_.fb_w = p.index("fb_w");
    ids_.fb_b = p.index("fb_b");
  }
  ids_.layers.clear();
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string x = "layer" + std::to_string(l) + ".";
    ids_.layers.push_back(LayerIds{p.index(x + "ln1.gain"), p.index(x + "ln1.bias"), p.index(x + "attn.wq"),
                                   p.index(x + "attn.bq"), p.index(x + "attn.wk"),
                                   p.index(x + "attn.wv"), p.index(x + "attn.bv"), p.index(x + "attn.wo"),
                                   p.index(x + "attn.bo"), p.index(x + "ln2.gain"), p.index(x + "ln2.bias"),
                                   p.index(x + "ffn.w1"), p.index(x + "ffn.b1"), p.index(x + "ffn.w2"),
                                   p.index(x + "ffn.b2")});
  }
}

Tensor positional_encoding(std::size_t start, std::size_t count, std::size_t d) {
  Tensor pe({count, d});
  for (std::size_t r = 0; r < count; ++r) {
    const double pos = static_cast<double>(start + r);
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe.at(r, i) = std::sin(angle);
      if (i + 1 < d) pe.at(r, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

// ---- Session -------------------------------------------------------------------

Session::Session(Graph& g, const Model& model, ParamSet* trainable)
    : g_(g), model_(model), trainable_(trainable), bound_(model.params().size()) {
  if (trainable_ && trainable_ != &model.params())
    fail(ErrorKind::Config, "trainable parameter set must belong to the model");
  keys_.resize(static_cast<std::size_t>(model.config().n_layers));
  values_.resize(keys_.size());
}

Var Session::bind(std::size_t i) {
  if (!bound_[i].valid()) bound_[i] = trainable_ ? g_.param(*trainable_, i) : g_.view(model_.params().value(i));
  return bound_[i];
}

Var Session::token_rows(std::span<const int> ids) {
  for (int id : ids)
    if (id < 0 || id >= model_.config().vocab_size)
      fail(ErrorKind::Vocabulary,
           "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(model_.config().vocab_size));
  return num::gather_rows(g_, bind(model_.ids().tok_emb), ids);
}

Var Session::project_patches(Var patches) {
  return num::add_row_bias(g_, num::matmul(g_, patches, bind(model_.ids().vis_w)), bind(model_.ids().vis_b));
}

Var Session::feedback(Var hidden) {
  if (!model_.config().feedback_projection) return hidden;
  return num::add_row_bias(g_, num::matmul(g_, hidden, bind(model_.ids().fb_w)), bind(model_.ids().fb_b));
}

Var Session::element_rows(std::span<const InputElement> elements) {
  const auto d = static_cast<std::size_t>(model_.config().d);
  if (elements.empty()) return g_.constant(Tensor({0, d}));
  std::vector<Var> parts;
  std::vector<int> run;
  auto flush = [&] {
    if (!run.empty()) parts.push_back(token_rows(run));
    run.clear();
  };
  for (const auto& e : elements) {
    if (e.is_token()) {
      run.push_back(e.id());
      continue;
    }
    flush();
    const auto& c = e.continuous();
    if (c.vector.size() != d)
      fail(ErrorKind::Dimension, "continuous input has width " + std::to_string(c.vector.size()) + ", model width is " +
                                     std::to_string(d));
    Var row = g_.constant(Tensor({1, d}, c.vector));
    parts.push_back(c.role == Role::LatentFeedback ? feedback(row) : row);
  }
  flush();
  return parts.size() == 1 ? parts[0] : num::concat_rows(g_, parts);
}

Var Session::with_positions(Var rows) {
  const Tensor& r = g_.value(rows);
  return num::add(g_, rows, g_.constant(positional_encoding(length_, r.rows(), r.cols())));
}

Var Session::append(Var x) {
  const ModelConfig& c = model_.config();
  const std::size_t n = g_.value(x).rows();
  if (length_ + n > static_cast<std::size_t>(c.max_seq_len))
    fail(ErrorKind::SequenceLength, "sequence of " + std::to_string(length_ + n) + " positions exceeds max_seq_len " +
                                        std::to_string(c.max_seq_len));
  if (n == 0) return x;
  const double eps = c.ln_epsilon;
  for (std::size_t l = 0; l < model_.ids().layers.size(); ++l) {
    const auto& p = model_.ids().layers[l];
    Var h = num::layer_norm(g_, x, bind(p.ln1_g), bind(p.ln1_b), eps);
    Var q = num::add_row_bias(g_, num::matmul(g_, h, bind(p.wq)), bind(p.bq));
    // No key bias: it shifts every score of a query equally.
    Var k = num::matmul(g_, h, bind(p.wk));
    Var v = num::add_row_bias(g_, num::matmul(g_, h, bind(p.wv)), bind(p.bv));
    if (keys_[l].valid()) {
      const Var ks[] = {keys_[l], k};
      const Var vs[] = {values_[l], v};
      k = num::concat_rows(g_, ks);
      v = num::concat_rows(g_, vs);
    }
    keys_[l] = k;
    values_[l] = v;
    Var a = num::causal_attention(g_, q, k, v, static_cast<std::size_t>(c.n_heads), length_);
    x = num::add(g_, x, num::add_row_bias(g_, num::matmul(g_, a, bind(p.wo)), bind(p.bo)));
    Var h2 = num::layer_norm(g_, x, bind(p.ln2_g), bind(p.ln2_b), eps);
    Var f = num::gelu(g_, num::add_row_bias(g_, num::matmul(g_, h2, bind(p.w1)), bind(p.b1)));
    x = num::add(g_, x, num::add_row_bias(g_, num::matmul(g_, f, bind(p.w2)), bind(p.b2)));
  }
  length_ += n;
  return num::layer_norm(g_, x, bind(model_.ids().lnf_g), bind(model_.ids().lnf_b), eps);
}

Var Session::logits(Var hidden) { return num::matmul(g_, hidden, bind(model_.ids().out_w)); }

void Session::load_history(const std::vector<Tensor>& keys, const std::vector<Tensor>& values, std::size_t length) {
  if (length_ != 0) fail(ErrorKind::Config, "history must be loaded into a fresh session");
  if (length == 0) return;
  if (keys.size() != keys_.size() || values.size() != values_.size())
    fail(ErrorKind::Dimension, "decode cache layer count does not match the model");
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    if (keys[l].rows() != length || values[l].rows() != length)
      fail(ErrorKind::Dimension, "decode cache layer " + std::to_string(l) + " length mismatch");
    keys_[l] = g_.view(keys[l]);
    values_[l] = g_.view(values[l]);
  }
  length_ = length;
}

// ---- plain inference -------------------------------------------------------------

Tensor embed_inputs(std::span<const InputElement> elements, const Model& model) {
  Graph g(false);
  Session s(g, model);
  return g.value(s.with_positions(s.element_rows(elements)));
}

ForwardResult forward(std::span<const InputElement> elements, const Model& model) {
  Graph g(false);
  Session s(g, model);
  Var h = s.append(s.with_positions(s.element_rows(elements)));
  Var lg = s.logits(h);
  return {g.value(h), g.value(lg)};
}

StepResult forward_incremental(std::span<const InputElement> elements, DecodeCache& cache, const Model& model) {
  if (elements.empty()) fail(ErrorKind::Dimension, "incremental step needs at least one element");
  if (cache.length + elements.size() > static_cast<std::size_t>(model.config().max_seq_len))
    fail(ErrorKind::SequenceLength, "decode cache would exceed max_seq_len " +
                                        std::to_string(model.config().max_seq_len));
  Graph g(false);
  Session s(g, model);
  s.load_history(cache.keys, cache.values, cache.length);
  Var h = s.append(s.with_positions(s.element_rows(elements)));
  Var lg = s.logits(h);
  const auto n_layers = static_cast<std::size_t>(model.config().n_layers);
  cache.keys.resize(n_layers);
  cache.values.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    cache.keys[l] = s.keys(l);
    cache.values[l] = s.values(l);
  }
  cache.length = s.length();
  const Tensor& hv = g.value(h);
  const Tensor& lv = g.value(lg);
  auto hr = hv.row(hv.rows() - 1);
  auto lr = lv.row(lv.rows() - 1);
  return {std::vector<double>(hr.begin(), hr.end()), std::vector<double>(lr.begin(), lr.end()), hv};
}

StepResult forward_incremental(const InputElement& element, DecodeCache& cache, const Model& model) {
  return forward_incremental(std::span<const InputElement>(&element, 1), cache, model);
}

}  // namespace storm::model
