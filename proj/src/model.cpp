#include "cvqa/model.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "cvqa/dataset.hpp"
#include "cvqa/errors.hpp"

namespace cvqa::model {

using ad::Array;
using ad::Shape;
using ad::Var;

std::size_t ModelConfig::feature_dim() const { return conv_stages.empty() ? channels : conv_stages.back().filters; }

std::size_t ModelConfig::feature_map_side() const {
  std::size_t side = image_size;
  for (const ConvStage& s : conv_stages) side /= std::max<std::size_t>(s.pool, 1);
  return side;
}

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || token_vocab_size < 2 || max_question_length == 0 || word_dim == 0 ||
      question_dim == 0 || classifier_hidden == 0 || answer_count == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (glimpses < 1) throw ConfigError("glimpses must be at least 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (conv_stages.empty()) throw ConfigError("at least one convolution stage is required");
  for (const ConvStage& s : conv_stages) {
    if (s.filters == 0 || s.kernel == 0 || s.kernel % 2 == 0) throw ConfigError("conv stages need odd kernels and filters > 0");
  }
  if (feature_map_side() < 2) throw ConfigError("feature map smaller than 2x2 leaves nothing to attend over");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "image_size=" << image_size << '\n' << "channels=" << channels << '\n' << "conv_stages=";
  for (std::size_t i = 0; i < conv_stages.size(); ++i) {
    os << (i ? "," : "") << conv_stages[i].filters << 'x' << conv_stages[i].kernel << 'x' << conv_stages[i].pool;
  }
  os << '\n'
     << "feature_dim=" << feature_dim() << '\n'
     << "token_vocab_size=" << token_vocab_size << '\n'
     << "max_question_length=" << max_question_length << '\n'
     << "word_dim=" << word_dim << '\n'
     << "question_dim=" << question_dim << '\n'
     << "glimpses=" << glimpses << '\n'
     << "dropout_rate=" << dropout_rate << '\n'
     << "fusion=concat\n"
     << "classifier_hidden=" << classifier_hidden << '\n'
     << "answer_count=" << answer_count << '\n'
     << "vocab_digest=" << vocab_digest << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto get = [&](std::string_view key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("model config is missing '" + std::string(key) + "'");
    return it->second;
  };
  const auto num = [&](std::string_view key) {
    const std::string& s = get(key);
    std::size_t v = 0;
    if (std::from_chars(s.data(), s.data() + s.size(), v).ec != std::errc{}) {
      throw ConfigError("model config '" + std::string(key) + "' is not a count: " + s);
    }
    return v;
  };
  ModelConfig c;
  c.image_size = num("image_size");
  c.channels = num("channels");
  c.conv_stages.clear();
  std::istringstream stages(get("conv_stages"));
  std::string item;
  while (std::getline(stages, item, ',')) {
    ConvStage st;
    char x1 = 0, x2 = 0;
    std::istringstream one(item);
    if (!(one >> st.filters >> x1 >> st.kernel >> x2 >> st.pool) || x1 != 'x' || x2 != 'x') {
      throw ConfigError("bad conv stage '" + item + "'");
    }
    c.conv_stages.push_back(st);
  }
  c.token_vocab_size = num("token_vocab_size");
  c.max_question_length = num("max_question_length");
  c.word_dim = num("word_dim");
  c.question_dim = num("question_dim");
  c.glimpses = num("glimpses");
  c.dropout_rate = std::stod(get("dropout_rate"));
  if (get("fusion") != "concat") throw ConfigError("only concatenation fusion is supported");
  c.classifier_hidden = num("classifier_hidden");
  c.answer_count = num("answer_count");
  c.vocab_digest = kv.contains("vocab_digest") ? kv.find("vocab_digest")->second : "";
  if (num("feature_dim") != c.feature_dim()) throw ConfigError("feature_dim disagrees with conv_stages");
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return synth::fnv1a_hex(to_text()); }

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.image_size = 16;
  c.conv_stages = {{4, 3, 2}, {8, 3, 2}};
  c.token_vocab_size = 16;
  c.max_question_length = 8;
  c.word_dim = 6;
  c.question_dim = 8;
  c.glimpses = 2;
  c.classifier_hidden = 8;
  return c;
}

synth::Image apply_mask(const synth::Image& image, const synth::Region& region) {
  if (region.kind == synth::RegionKind::whole) return image;
  synth::Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      if (region.contains({static_cast<double>(x), static_cast<double>(y)})) continue;
      for (int c = 0; c < image.channels; ++c) out.at(c, y, x) = 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------

void VqaModel::add_parameter(std::string name, Shape shape, double bound, std::mt19937_64& rng) {
  Array a(std::move(shape));
  if (bound > 0.0) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : a.values()) v = u(rng);
  }
  params_.push_back(ad::Parameter{std::move(name), std::move(a), true});
}

VqaModel::VqaModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& c = config_;

  std::size_t in_ch = c.channels;
  for (std::size_t i = 0; i < c.conv_stages.size(); ++i) {
    const ConvStage& st = c.conv_stages[i];
    const double fan_in = static_cast<double>(in_ch * st.kernel * st.kernel);
    conv_w_.push_back(params_.size());
    add_parameter("conv" + std::to_string(i) + ".weight", {st.filters, in_ch, st.kernel, st.kernel},
                  std::sqrt(6.0 / fan_in), rng);
    conv_b_.push_back(params_.size());
    add_parameter("conv" + std::to_string(i) + ".bias", {st.filters}, 0.0, rng);
    in_ch = st.filters;
  }
  const std::size_t C = c.feature_dim(), Q = c.question_dim, G = c.glimpses;
  const double rnn_bound = 1.0 / std::sqrt(static_cast<double>(Q));

  embed_ = params_.size();
  add_parameter("question.embedding", {c.token_vocab_size, c.word_dim}, 1.0, rng);
  rnn_in_ = params_.size();
  add_parameter("question.input_weight", {c.word_dim, Q}, std::sqrt(3.0 / c.word_dim), rng);
  rnn_rec_ = params_.size();
  add_parameter("question.recurrent_weight", {Q, Q}, rnn_bound, rng);
  rnn_b_ = params_.size();
  add_parameter("question.bias", {Q}, 0.0, rng);
  rnn_init_ = params_.size();
  add_parameter("question.initial", {Q}, rnn_bound, rng);

  att_proj_w_ = params_.size();
  add_parameter("attention.visual_proj.weight", {Q, C, 1, 1}, std::sqrt(3.0 / C), rng);
  att_proj_b_ = params_.size();
  add_parameter("attention.visual_proj.bias", {Q}, 0.0, rng);
  att_score_w_ = params_.size();
  add_parameter("attention.score.weight", {G, Q, 1, 1}, std::sqrt(3.0 / Q), rng);

  const std::size_t fused = G * C + Q;
  cls_hidden_w_ = params_.size();
  add_parameter("classifier.hidden.weight", {fused, c.classifier_hidden}, std::sqrt(6.0 / fused), rng);
  cls_hidden_b_ = params_.size();
  add_parameter("classifier.hidden.bias", {c.classifier_hidden}, 0.0, rng);
  cls_out_w_ = params_.size();
  add_parameter("classifier.out.weight", {c.classifier_hidden, c.answer_count},
                std::sqrt(3.0 / c.classifier_hidden), rng);
  cls_out_b_ = params_.size();
  add_parameter("classifier.out.bias", {c.answer_count}, 0.0, rng);
}

std::size_t VqaModel::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw UsageError("no parameter named " + std::string(name));
}

ad::Parameter& VqaModel::parameter(std::string_view name) { return params_[index_of(name)]; }
const ad::Parameter& VqaModel::parameter(std::string_view name) const { return params_[index_of(name)]; }

void VqaModel::load_parameters(std::span<const ad::Parameter> values) {
  if (values.size() != params_.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(values.size()) + " tensors, model expects " +
                         std::to_string(params_.size()));
  }
  for (const ad::Parameter& v : values) {
    std::size_t i = 0;
    try {
      i = index_of(v.name);
    } catch (const UsageError&) {
      throw IntegrityError("checkpoint tensor " + v.name + " is not a model parameter");
    }
    if (params_[i].value.shape() != v.value.shape()) {
      throw IntegrityError("checkpoint tensor " + v.name + " has shape " + ad::to_string(v.value.shape()) +
                           ", expected " + ad::to_string(params_[i].value.shape()));
    }
    params_[i].value = v.value;
  }
}

VqaModel::Binding VqaModel::bind(ad::Tape& tape, bool requires_grad) const {
  Binding b;
  b.vars.reserve(params_.size());
  for (const ad::Parameter& p : params_) b.vars.push_back(tape.leaf(p.value, requires_grad && p.requires_grad));
  return b;
}

Var VqaModel::encode_image(const Binding& b, Var images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.image_size || s[3] != config_.image_size) {
    throw ShapeError("encode_image: input " + ad::to_string(s) + " does not match configured image (" +
                     std::to_string(config_.channels) + ", " + std::to_string(config_.image_size) + ", " +
                     std::to_string(config_.image_size) + ")");
  }
  Var x = images;
  for (std::size_t i = 0; i < config_.conv_stages.size(); ++i) {
    const ConvStage& st = config_.conv_stages[i];
    // relu and max-pool commute; pooling first halves the memory traffic.
    x = ad::conv2d(x, var(b, conv_w_[i]), var(b, conv_b_[i]), 1, st.kernel / 2);
    if (st.pool > 1) x = ad::max_pool2d(x, st.pool);
    x = ad::relu(x);
  }
  return x;
}

Var VqaModel::encode_question(const Binding& b, std::span<const std::vector<int>> tokens) const {
  const std::size_t n = tokens.size(), len = config_.max_question_length;
  Var h = ad::broadcast_rows(ad::tanh(var(b, rnn_init_)), n);
  std::vector<int> ids(n);
  std::vector<std::uint8_t> live(n);
  for (std::size_t t = 0; t < len; ++t) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (tokens[i].size() != len) {
        throw ShapeError("encode_question: token row of length " + std::to_string(tokens[i].size()) +
                         ", expected " + std::to_string(len));
      }
      const int tok = tokens[i][t];
      const bool in_vocab = tok >= 0 && static_cast<std::size_t>(tok) < config_.token_vocab_size;
      ids[i] = in_vocab ? tok : synth::TokenVocab::kUnk;
      live[i] = tok != synth::TokenVocab::kPad;
      any = any || live[i];
    }
    if (!any) continue;
    Var x = ad::embedding(var(b, embed_), ids);
    Var pre = ad::add_bias(ad::matmul(x, var(b, rnn_in_)) + ad::matmul(h, var(b, rnn_rec_)), var(b, rnn_b_));
    h = ad::select_rows(live, ad::tanh(pre), h);
  }
  return h;
}

AttentionOutput VqaModel::attend(const Binding& b, Var v, Var q, ad::Mode mode, std::mt19937_64& rng) const {
  const Shape& vs = v.shape();
  const std::size_t n = vs.at(0), area = vs.at(2) * vs.at(3);
  Var proj = ad::conv2d(v, var(b, att_proj_w_), var(b, att_proj_b_));
  Var joint = ad::tanh(ad::add_per_channel(proj, q));
  joint = ad::dropout(joint, config_.dropout_rate, mode, rng);
  // Softmax over space ignores a per-glimpse shift, so the score has no bias.
  Var no_bias = joint.tape().constant(Array(Shape{config_.glimpses}));
  Var scores = ad::conv2d(joint, var(b, att_score_w_), no_bias);
  Var maps = ad::softmax(ad::reshape(scores, {n, config_.glimpses, area}), 2);
  Var attended = ad::spatial_weighted_sum(ad::reshape(v, {n, vs[1], area}), maps);
  return {attended, maps};
}

Var VqaModel::fuse_classify(const Binding& b, Var attended, Var q, ad::Mode mode, std::mt19937_64& rng) const {
  const Var parts[] = {attended, q};
  Var fused = ad::concat(parts, 1);
  Var hidden = ad::relu(ad::add_bias(ad::matmul(fused, var(b, cls_hidden_w_)), var(b, cls_hidden_b_)));
  hidden = ad::dropout(hidden, config_.dropout_rate, mode, rng);
  Var logits = ad::add_bias(ad::matmul(hidden, var(b, cls_out_w_)), var(b, cls_out_b_));
  return ad::softmax(logits, 1);
}

Array VqaModel::masked_batch(std::span<const Sample> batch) const {
  const std::size_t side = config_.image_size, ch = config_.channels;
  const std::size_t per = ch * side * side;
  Array images(Shape{batch.size(), ch, side, side});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const synth::Image* img = batch[i].image;
    if (img == nullptr || static_cast<std::size_t>(img->width) != side ||
        static_cast<std::size_t>(img->height) != side || static_cast<std::size_t>(img->channels) != ch) {
      throw ShapeError("forward: sample " + std::to_string(i) + " image does not match configured size " +
                       std::to_string(side));
    }
    const synth::Image masked = apply_mask(*img, batch[i].region);
    std::copy_n(masked.pixels.data(), per, images.data() + i * per);
  }
  return images;
}

ForwardOutput VqaModel::forward(const Binding& b, std::span<const Sample> batch, ad::Mode mode,
                                std::mt19937_64& rng) const {
  ad::Tape& tape = var(b, embed_).tape();
  Var images = tape.constant(masked_batch(batch));
  Var v = encode_image(b, images);
  std::vector<std::vector<int>> tokens;
  tokens.reserve(batch.size());
  for (const Sample& s : batch) tokens.push_back(s.tokens);
  Var q = encode_question(b, tokens);
  AttentionOutput att = attend(b, v, q, mode, rng);
  return {fuse_classify(b, att.attended, q, mode, rng), att};
}

}  // namespace cvqa::model
