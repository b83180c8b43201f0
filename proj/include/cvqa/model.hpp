#pragma once

// Attention VQA network: masked image -> conv encoder -> feature map v,
// question tokens -> recurrent encoder -> q, multi-glimpse attention over v
// conditioned on q, concatenation fusion, MLP classifier over the answers.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cvqa/diff.hpp"
#include "cvqa/synthdata.hpp"

namespace cvqa::model {

struct ConvStage {
  std::size_t filters = 16;
  std::size_t kernel = 3;
  std::size_t pool = 2;
  bool operator==(const ConvStage&) const = default;
};

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::vector<ConvStage> conv_stages{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  std::size_t token_vocab_size = 17;
  std::size_t max_question_length = 8;
  std::size_t word_dim = 32;           // full scale 300
  std::size_t question_dim = 64;       // full scale 1024
  std::size_t glimpses = 2;
  double dropout_rate = 0.25;
  std::size_t classifier_hidden = 64;  // full scale 1024
  std::size_t answer_count = synth::kAnswerCount;
  // Digest of the dataset vocabulary the model was built for.
  std::string vocab_digest;

  // C, the channel count of the visual feature map.
  std::size_t feature_dim() const;
  // Side length h = w of the visual feature map.
  std::size_t feature_map_side() const;

  // Throws ConfigError.
  void validate() const;

  // key=value lines, one per field, in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  std::string hash() const;

  // 16x16 input, C = 8, 16 tokens: sized for finite-difference checks.
  static ModelConfig micro();

  bool operator==(const ModelConfig&) const = default;
};

// Pixels outside the region become exactly 0; whole-kind is the identity.
synth::Image apply_mask(const synth::Image& image, const synth::Region& region);

struct Sample {
  const synth::Image* image = nullptr;
  synth::Region region;
  std::vector<int> tokens;  // already encoded, max_question_length long
};

struct AttentionOutput {
  ad::Var attended;  // (N, glimpses * C)
  ad::Var maps;      // (N, glimpses, h * w)
};

struct ForwardOutput {
  ad::Var probs;  // (N, answer_count)
  AttentionOutput attention;
};

class VqaModel {
 public:
  // Parameters placed on a tape for one forward/backward pass.
  struct Binding {
    std::vector<ad::Var> vars;  // parallel to parameters()
  };

  VqaModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }
  ad::Parameter& parameter(std::string_view name);
  const ad::Parameter& parameter(std::string_view name) const;

  // Replaces values by name. Throws IntegrityError on a missing or misshapen
  // tensor.
  void load_parameters(std::span<const ad::Parameter> values);

  Binding bind(ad::Tape& tape, bool requires_grad = true) const;

  // images: (N, channels, S, S), already masked -> (N, C, h, w)
  ad::Var encode_image(const Binding& b, ad::Var images) const;
  // tokens: N rows of max_question_length ids -> (N, question_dim)
  ad::Var encode_question(const Binding& b, std::span<const std::vector<int>> tokens) const;
  AttentionOutput attend(const Binding& b, ad::Var v, ad::Var q, ad::Mode mode, std::mt19937_64& rng) const;
  ad::Var fuse_classify(const Binding& b, ad::Var attended, ad::Var q, ad::Mode mode, std::mt19937_64& rng) const;

  // apply_mask -> encode_image -> encode_question -> attend -> fuse_classify
  ForwardOutput forward(const Binding& b, std::span<const Sample> batch, ad::Mode mode, std::mt19937_64& rng) const;

  // Masked-image tensor for a batch, (N, channels, S, S).
  ad::Array masked_batch(std::span<const Sample> batch) const;

 private:
  const ad::Var& var(const Binding& b, std::size_t index) const { return b.vars[index]; }
  std::size_t index_of(std::string_view name) const;
  void add_parameter(std::string name, ad::Shape shape, double bound, std::mt19937_64& rng);

  ModelConfig config_;
  std::vector<ad::Parameter> params_;
  // Indices into params_ by role.
  std::vector<std::size_t> conv_w_, conv_b_;
  std::size_t embed_ = 0, rnn_in_ = 0, rnn_rec_ = 0, rnn_b_ = 0, rnn_init_ = 0;
  std::size_t att_proj_w_ = 0, att_proj_b_ = 0, att_score_w_ = 0;
  std::size_t cls_hidden_w_ = 0, cls_hidden_b_ = 0, cls_out_w_ = 0, cls_out_b_ = 0;
};

}  // namespace cvqa::model
