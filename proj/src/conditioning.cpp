#include "ctsynth/conditioning.hpp"

#include <cctype>
#include <fstream>

#include "ctsynth/errors.hpp"
#include "ctsynth/rng.hpp"
#include "ctsynth/volume_io.hpp"

namespace ctsynth {

namespace fs = std::filesystem;

const char* to_string(EncoderId id) {
  switch (id) {
    case EncoderId::A: return "A";
    case EncoderId::B: return "B";
    case EncoderId::C: return "C";
  }
  return "?";
}

std::array<EncoderSpec, 3> default_encoder_specs(std::int64_t max_tokens) {
  return {EncoderSpec{EncoderId::A, 768, max_tokens, EncoderBackend::ToyDeterministic},
          EncoderSpec{EncoderId::B, 768, max_tokens, EncoderBackend::ToyDeterministic},
          EncoderSpec{EncoderId::C, 1024, max_tokens, EncoderBackend::ToyDeterministic}};
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

constexpr std::int64_t kFirstWordToken = 3;

}  // namespace

TokenizedText tokenize(const std::string& text, const EncoderSpec& spec) {
  if (spec.max_tokens < 2) throw ContractError("max_tokens must leave room for both sentinels");
  const auto words = split_words(text);
  const auto body = std::min<std::size_t>(words.size(), static_cast<std::size_t>(spec.max_tokens - 2));
  TokenizedText out;
  out.ids.reserve(body + 2);
  out.ids.push_back(kBeginToken);
  const auto salt = static_cast<std::uint64_t>(spec.id) + 1;
  for (std::size_t i = 0; i < body; ++i) {
    const auto slot = fnv1a(words[i], salt) % static_cast<std::uint64_t>(kToyVocabSize - kFirstWordToken);
    out.ids.push_back(kFirstWordToken + static_cast<std::int64_t>(slot));
  }
  out.ids.push_back(kEndToken);
  out.attention_mask.assign(out.ids.size(), 1);
  return out;
}

torch::Tensor encoder_forward(const std::vector<std::int64_t>& token_ids,
                              const std::vector<std::int64_t>& attention_mask, const EncoderSpec& spec,
                              std::uint64_t seed) {
  if (token_ids.size() != attention_mask.size()) {
    throw ContractError("token ids and attention mask differ in length");
  }
  if (spec.backend != EncoderBackend::ToyDeterministic) {
    throw ContractError("encoder_forward only runs the toy backend; use an adapter for external encoders");
  }
  const auto seq = static_cast<std::int64_t>(token_ids.size());
  auto hidden = torch::empty({seq, spec.hidden_dim}, torch::kFloat);
  auto acc = hidden.accessor<float, 2>();
  for (std::int64_t t = 0; t < seq; ++t) {
    HashStream row(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(spec.id) + 17),
                            static_cast<std::uint64_t>(token_ids[static_cast<std::size_t>(t)])));
    for (std::int64_t d = 0; d < spec.hidden_dim; ++d) acc[t][d] = static_cast<float>(row.normal());
  }
  return hidden;
}

ToyTextEncoder::ToyTextEncoder(EncoderSpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.backend = EncoderBackend::ToyDeterministic;
}

EncodedText ToyTextEncoder::encode(const std::string& text) const {
  const TokenizedText tokens = tokenize(text, spec_);
  EncodedText out;
  out.hidden_states = encoder_forward(tokens.ids, tokens.attention_mask, spec_, seed_);
  out.attention_mask = torch::tensor(tokens.attention_mask, torch::kLong);
  return out;
}

ExternalEncoderAdapter::ExternalEncoderAdapter(EncoderSpec spec, Callback callback, bool concurrent_safe)
    : spec_(spec), callback_(std::move(callback)), concurrent_safe_(concurrent_safe) {
  spec_.backend = EncoderBackend::ExternalPretrained;
  if (!callback_) throw ContractError("external encoder adapter needs a callback");
}

EncodedText ExternalEncoderAdapter::encode(const std::string& text) const {
  EncodedText out = callback_(text);
  if (!out.hidden_states.defined() || out.hidden_states.dim() != 2) {
    throw ContractError(std::string("encoder ") + to_string(spec_.id) + " adapter must return [seq, hidden] states");
  }
  if (out.hidden_states.size(1) != spec_.hidden_dim) {
    throw ContractError(std::string("encoder ") + to_string(spec_.id) + " adapter returned width " +
                        std::to_string(out.hidden_states.size(1)) + ", declared " +
                        std::to_string(spec_.hidden_dim));
  }
  if (!out.attention_mask.defined() || out.attention_mask.dim() != 1 ||
      out.attention_mask.size(0) != out.hidden_states.size(0)) {
    throw ContractError(std::string("encoder ") + to_string(spec_.id) + " adapter mask length mismatch");
  }
  if (out.hidden_states.size(0) > spec_.max_tokens) {
    throw ContractError(std::string("encoder ") + to_string(spec_.id) + " adapter exceeded max_tokens");
  }
  return out;
}

torch::Tensor masked_mean_pool(const torch::Tensor& hidden_states, const torch::Tensor& attention_mask) {
  if (hidden_states.dim() != 2 || attention_mask.dim() != 1 || attention_mask.size(0) != hidden_states.size(0)) {
    throw ContractError("masked_mean_pool expects states [T, H] and mask [T]");
  }
  const auto weights = attention_mask.to(hidden_states.scalar_type());
  const auto total = weights.sum();
  if (total.item<double>() == 0.0) throw ContractError("masked_mean_pool: attention mask has no nonzero entry");
  return (hidden_states * weights.unsqueeze(1)).sum(0) / total;
}

SectionEncoder::SectionEncoder(std::vector<std::shared_ptr<const TextEncoder>> encoders)
    : encoders_(std::move(encoders)) {
  if (encoders_.empty()) throw ContractError("section encoder needs at least one text encoder");
  for (const auto& e : encoders_) width_ += e->spec().hidden_dim;
}

SectionEncoder SectionEncoder::toy(std::int64_t max_tokens, std::uint64_t seed) {
  std::vector<std::shared_ptr<const TextEncoder>> encoders;
  for (const auto& spec : default_encoder_specs(max_tokens)) {
    encoders.push_back(std::make_shared<ToyTextEncoder>(spec, seed));
  }
  return SectionEncoder(std::move(encoders));
}

torch::Tensor SectionEncoder::encode(const std::string& text) const {
  std::vector<torch::Tensor> pooled;
  pooled.reserve(encoders_.size());
  for (const auto& e : encoders_) {
    const EncodedText enc = e->encode(text);
    pooled.push_back(masked_mean_pool(enc.hidden_states, enc.attention_mask).to(torch::kFloat));
  }
  return torch::cat(pooled, 0);
}

SpacingEmbeddingImpl::SpacingEmbeddingImpl(std::int64_t out_dim) {
  proj = register_module("proj", torch::nn::Linear(3, out_dim));
  torch::NoGradGuard no_grad;
  proj->weight.zero_();
  proj->bias.zero_();
}

torch::Tensor SpacingEmbeddingImpl::forward(const torch::Tensor& spacing) { return proj->forward(spacing); }

torch::Tensor SpacingEmbeddingImpl::embed(const Spacing& spacing_mm) {
  validate_spacing(spacing_mm);
  auto input = torch::tensor({spacing_mm[0], spacing_mm[1], spacing_mm[2]}, proj->weight.options());
  return forward(input.unsqueeze(0)).squeeze(0);
}

ConditioningTensor null_conditioning(std::int64_t context_dim) {
  return {torch::zeros({kContextTokens, context_dim}, torch::kFloat), true};
}

ReportEmbedding embed_report_text(const RadiologyReport& report, const SectionEncoder& sections) {
  validate_spacing(report.spacing_mm);
  return {sections.encode(report.findings), sections.encode(report.impression), report.spacing_mm};
}

ConditioningTensor assemble_conditioning(const ReportEmbedding& text, SpacingEmbedding& spacing) {
  auto spacing_row = spacing->embed(text.spacing_mm);
  if (spacing_row.size(0) != text.findings.size(0)) {
    throw ContractError("spacing embedding width " + std::to_string(spacing_row.size(0)) +
                        " differs from section width " + std::to_string(text.findings.size(0)));
  }
  auto context = torch::stack({text.findings.to(spacing_row.scalar_type()),
                               text.impression.to(spacing_row.scalar_type()), spacing_row});
  return {context, false};
}

ConditioningTensor build_conditioning(const RadiologyReport& report, const SectionEncoder& sections,
                                      SpacingEmbedding& spacing) {
  return assemble_conditioning(embed_report_text(report, sections), spacing);
}

namespace {
constexpr char kEmbeddingMagic[8] = {'C', 'T', 'S', 'Y', 'R', 'E', 'M', '1'};
}

void save_report_embedding(const fs::path& path, const ReportEmbedding& e) {
  const auto f = e.findings.contiguous().to(torch::kFloat);
  const auto i = e.impression.contiguous().to(torch::kFloat);
  const std::int64_t dim = f.size(0);
  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(kEmbeddingMagic, sizeof(kEmbeddingMagic));
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    out.write(reinterpret_cast<const char*>(e.spacing_mm.data()), sizeof(double) * 3);
    out.write(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::streamsize>(dim * 4));
    out.write(reinterpret_cast<const char*>(i.data_ptr<float>()), static_cast<std::streamsize>(dim * 4));
    if (!out) throw ValidationError("short write on " + path.string());
  });
}

ReportEmbedding load_report_embedding(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, 8) != std::string(kEmbeddingMagic, 8)) {
    throw ValidationError(path.string() + ": not a report embedding file");
  }
  std::int64_t dim = 0;
  ReportEmbedding e;
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  in.read(reinterpret_cast<char*>(e.spacing_mm.data()), sizeof(double) * 3);
  e.findings = torch::empty({dim}, torch::kFloat);
  e.impression = torch::empty({dim}, torch::kFloat);
  in.read(reinterpret_cast<char*>(e.findings.data_ptr<float>()), static_cast<std::streamsize>(dim * 4));
  in.read(reinterpret_cast<char*>(e.impression.data_ptr<float>()), static_cast<std::streamsize>(dim * 4));
  if (!in) throw ValidationError(path.string() + ": truncated report embedding");
  return e;
}

}  // namespace ctsynth
