#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctsynth/conditioning_types.hpp"

namespace ctsynth {

enum class EncoderId { A, B, C };
enum class EncoderBackend { ToyDeterministic, ExternalPretrained };

const char* to_string(EncoderId id);

struct EncoderSpec {
  EncoderId id = EncoderId::A;
  std::int64_t hidden_dim = 768;
  std::int64_t max_tokens = 512;
  EncoderBackend backend = EncoderBackend::ToyDeterministic;
};

// A: 768, B: 768, C: 1024. Concatenated in this order they give the 2560-wide section embedding.
std::array<EncoderSpec, 3> default_encoder_specs(std::int64_t max_tokens = 512);

inline constexpr std::int64_t kContextDim = 2560;
inline constexpr std::int64_t kContextTokens = 3;  // findings, impression, spacing
inline constexpr std::int64_t kToyVocabSize = 30000;
inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kBeginToken = 1;
inline constexpr std::int64_t kEndToken = 2;

struct TokenizedText {
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> attention_mask;
};

// Lowercase, split on whitespace and punctuation, hash each word into the toy vocabulary
// (salted per encoder), wrap in begin/end sentinels, truncate to max_tokens.
TokenizedText tokenize(const std::string& text, const EncoderSpec& spec);

// Hidden states [seq_len, hidden_dim] paired with the attention mask [seq_len].
struct EncodedText {
  torch::Tensor hidden_states;
  torch::Tensor attention_mask;
};

// Toy backend: each token's hidden vector is a seeded Gaussian row that depends only on
// (token id, encoder id, seed). No contextual mixing between tokens.
torch::Tensor encoder_forward(const std::vector<std::int64_t>& token_ids,
                              const std::vector<std::int64_t>& attention_mask, const EncoderSpec& spec,
                              std::uint64_t seed = 0);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  virtual EncodedText encode(const std::string& text) const = 0;
  // Adapters that cannot be called from several threads return false; callers serialize.
  virtual bool concurrent_safe() const { return true; }
};

class ToyTextEncoder final : public TextEncoder {
 public:
  explicit ToyTextEncoder(EncoderSpec spec, std::uint64_t seed = 0);
  const EncoderSpec& spec() const override { return spec_; }
  EncodedText encode(const std::string& text) const override;

 private:
  EncoderSpec spec_;
  std::uint64_t seed_;
};

// Bridges an external (pretrained) encoder. The callback returns hidden states and mask for
// a text; widths other than the declared hidden_dim are rejected with ContractError.
class ExternalEncoderAdapter final : public TextEncoder {
 public:
  using Callback = std::function<EncodedText(const std::string&)>;
  ExternalEncoderAdapter(EncoderSpec spec, Callback callback, bool concurrent_safe = false);
  const EncoderSpec& spec() const override { return spec_; }
  EncodedText encode(const std::string& text) const override;
  bool concurrent_safe() const override { return concurrent_safe_; }

 private:
  EncoderSpec spec_;
  Callback callback_;
  bool concurrent_safe_;
};

// out[d] = sum_t mask[t] * h[t, d] / sum_t mask[t]. Throws ContractError on an all-zero mask.
torch::Tensor masked_mean_pool(const torch::Tensor& hidden_states, const torch::Tensor& attention_mask);

// Runs every encoder on one report section and concatenates the pooled vectors in order.
class SectionEncoder {
 public:
  explicit SectionEncoder(std::vector<std::shared_ptr<const TextEncoder>> encoders);

  // Three toy encoders with the default A/B/C widths.
  static SectionEncoder toy(std::int64_t max_tokens = 512, std::uint64_t seed = 0);

  torch::Tensor encode(const std::string& text) const;
  std::int64_t width() const { return width_; }
  const std::vector<std::shared_ptr<const TextEncoder>>& encoders() const { return encoders_; }

 private:
  std::vector<std::shared_ptr<const TextEncoder>> encoders_;
  std::int64_t width_ = 0;
};

// Learned affine map from the spacing triple (mm) to one context token.
class SpacingEmbeddingImpl : public torch::nn::Module {
 public:
  explicit SpacingEmbeddingImpl(std::int64_t out_dim = kContextDim);
  // Unchecked affine map on [B, 3].
  torch::Tensor forward(const torch::Tensor& spacing);
  // Validated single-spacing entry point; throws ValidationError on non-positive input.
  torch::Tensor embed(const Spacing& spacing_mm);

  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(SpacingEmbedding);

// Rows: 0 findings, 1 impression, 2 spacing. is_null implies every entry is exactly zero.
struct ConditioningTensor {
  torch::Tensor context;  // [3, D]
  bool is_null = false;
};

ConditioningTensor null_conditioning(std::int64_t context_dim = kContextDim);

// Text half of the conditioning; independent of any learned weights, so it is cached on disk.
struct ReportEmbedding {
  torch::Tensor findings;    // [D]
  torch::Tensor impression;  // [D]
  Spacing spacing_mm{1.0, 1.0, 1.0};
};

ReportEmbedding embed_report_text(const RadiologyReport& report, const SectionEncoder& sections);

ConditioningTensor assemble_conditioning(const ReportEmbedding& text, SpacingEmbedding& spacing);

ConditioningTensor build_conditioning(const RadiologyReport& report, const SectionEncoder& sections,
                                      SpacingEmbedding& spacing);

void save_report_embedding(const std::filesystem::path& path, const ReportEmbedding& e);
ReportEmbedding load_report_embedding(const std::filesystem::path& path);

}  // namespace ctsynth
