#include "ctsynth/config.hpp"

#include <fstream>

#include "ctsynth/errors.hpp"

namespace ctsynth {

using nlohmann::json;

json default_config_json() {
  const RunConfig d{};
  const auto& den = d.diffusion.denoiser;
  const auto& tr = d.diffusion.train;
  return {
      {"data",
       {{"manifest", d.data.manifest.string()},
        {"grid_shape", {d.data.grid_shape.x, d.data.grid_shape.y, d.data.grid_shape.z}},
        {"work_dir", d.data.work_dir.string()}}},
      {"conditioning", {{"max_tokens", d.conditioning.max_tokens}, {"encoder_seed", d.conditioning.encoder_seed}}},
      {"codec",
       {{"widths", d.codec.arch.widths},
        {"kl_weight", d.codec.kl_weight},
        {"epochs", d.codec.epochs},
        {"batch_size", d.codec.batch_size},
        {"learning_rate", d.codec.learning_rate},
        {"seed", d.codec.seed}}},
      {"diffusion",
       {{"channel_widths", den.channel_widths},
        {"cross_attention_levels", den.cross_attention_levels},
        {"context_dim", den.context_dim},
        {"num_heads", den.num_heads},
        {"time_embed_dim", den.time_embed_dim},
        {"num_train_steps", den.num_train_steps},
        {"learning_rate", tr.learning_rate},
        {"batch_size", tr.batch_size},
        {"total_steps", tr.total_steps},
        {"drop_probability", tr.drop_probability},
        {"decay_power", tr.decay_power},
        {"grad_clip_norm", tr.grad_clip_norm},
        {"seed", tr.seed},
        {"log_every", d.diffusion.log_every},
        {"checkpoint_every", d.diffusion.checkpoint_every}}},
      {"sampling",
       {{"cfg_scales", d.sampling.cfg_scales},
        {"inference_steps", d.sampling.inference_steps},
        {"seeds", d.sampling.seeds}}},
      {"eval",
       {{"extractor", {{"backend", "seeded-random-conv"}, {"feature_dim", d.eval.extractor.feature_dim},
                       {"seed", d.eval.extractor.seed}}},
        {"embedder", {{"backend", "oracle-free"},
                      {"resolution", {d.eval.embedder.resolution.x, d.eval.embedder.resolution.y,
                                      d.eval.embedder.resolution.z}}}}}},
  };
}

namespace {

bool compatible(const json& def, const json& value) {
  if (def.is_number()) return value.is_number();
  if (def.is_array()) return value.is_array();
  return def.type() == value.type();
}

void merge_strict(json& base, const json& overrides, const std::string& prefix) {
  if (!overrides.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : overrides.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else {
      if (!compatible(slot, value)) throw ConfigError("config key '" + path + "' has the wrong type");
      slot = value;
    }
  }
}

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + section + "." + key + "': " + e.what());
  }
}

Dims dims_from(const std::vector<std::size_t>& v, const std::string& key) {
  if (v.size() != 3) throw ConfigError("config key '" + key + "' must have 3 entries");
  for (auto n : v)
    if (n == 0) throw ConfigError("config key '" + key + "' entries must be >= 1");
  return {v[0], v[1], v[2]};
}

}  // namespace

RunConfig make_run_config(const json& overrides) {
  json merged = default_config_json();
  merge_strict(merged, overrides, "");

  RunConfig c;
  c.data.manifest = get<std::string>(merged, "data", "manifest");
  c.data.grid_shape = dims_from(get<std::vector<std::size_t>>(merged, "data", "grid_shape"), "data.grid_shape");
  c.data.work_dir = get<std::string>(merged, "data", "work_dir");

  c.conditioning.max_tokens = get<std::int64_t>(merged, "conditioning", "max_tokens");
  c.conditioning.encoder_seed = get<std::uint64_t>(merged, "conditioning", "encoder_seed");
  if (c.conditioning.max_tokens < 2) throw ConfigError("config key 'conditioning.max_tokens' must be >= 2");

  c.codec.arch.widths = get<std::vector<std::int64_t>>(merged, "codec", "widths");
  c.codec.kl_weight = get<double>(merged, "codec", "kl_weight");
  c.codec.epochs = get<int>(merged, "codec", "epochs");
  c.codec.batch_size = get<int>(merged, "codec", "batch_size");
  c.codec.learning_rate = get<double>(merged, "codec", "learning_rate");
  c.codec.seed = get<std::uint64_t>(merged, "codec", "seed");
  if (c.codec.arch.widths.size() != 3) throw ConfigError("config key 'codec.widths' must have 3 entries");
  if (c.codec.epochs < 1 || c.codec.batch_size < 1) {
    throw ConfigError("config keys 'codec.epochs' and 'codec.batch_size' must be >= 1");
  }
  if (c.codec.kl_weight < 0) throw ConfigError("config key 'codec.kl_weight' must be >= 0");

  auto& den = c.diffusion.denoiser;
  den.channel_widths = get<std::vector<std::int64_t>>(merged, "diffusion", "channel_widths");
  den.cross_attention_levels = get<std::vector<std::int64_t>>(merged, "diffusion", "cross_attention_levels");
  den.context_dim = get<std::int64_t>(merged, "diffusion", "context_dim");
  den.num_heads = get<std::int64_t>(merged, "diffusion", "num_heads");
  den.time_embed_dim = get<std::int64_t>(merged, "diffusion", "time_embed_dim");
  den.num_train_steps = get<std::int64_t>(merged, "diffusion", "num_train_steps");
  auto& tr = c.diffusion.train;
  tr.learning_rate = get<double>(merged, "diffusion", "learning_rate");
  tr.batch_size = get<std::int64_t>(merged, "diffusion", "batch_size");
  tr.total_steps = get<std::int64_t>(merged, "diffusion", "total_steps");
  tr.drop_probability = get<double>(merged, "diffusion", "drop_probability");
  tr.decay_power = get<double>(merged, "diffusion", "decay_power");
  tr.grad_clip_norm = get<double>(merged, "diffusion", "grad_clip_norm");
  tr.seed = get<std::uint64_t>(merged, "diffusion", "seed");
  c.diffusion.log_every = get<std::int64_t>(merged, "diffusion", "log_every");
  c.diffusion.checkpoint_every = get<std::int64_t>(merged, "diffusion", "checkpoint_every");
  try {
    den.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("diffusion: ") + e.what());
  }
  if (den.context_dim != kContextDim) {
    throw ConfigError("config key 'diffusion.context_dim' must equal the conditioning width 2560");
  }
  if (tr.batch_size < 1 || tr.total_steps < 1 || c.diffusion.log_every < 1 || c.diffusion.checkpoint_every < 1) {
    throw ConfigError("diffusion batch_size, total_steps, log_every and checkpoint_every must be >= 1");
  }
  if (den.num_train_steps < 1) throw ConfigError("config key 'diffusion.num_train_steps' must be >= 1");
  if (!(tr.drop_probability >= 0 && tr.drop_probability <= 1)) {
    throw ConfigError("config key 'diffusion.drop_probability' must lie in [0, 1]");
  }

  c.sampling.cfg_scales = get<std::vector<double>>(merged, "sampling", "cfg_scales");
  c.sampling.inference_steps = get<int>(merged, "sampling", "inference_steps");
  c.sampling.seeds = get<std::vector<std::uint64_t>>(merged, "sampling", "seeds");
  for (double s : c.sampling.cfg_scales)
    if (!(s >= 0)) throw ConfigError("config key 'sampling.cfg_scales' entries must be >= 0");
  if (c.sampling.inference_steps < 1) throw ConfigError("config key 'sampling.inference_steps' must be >= 1");

  const auto& ex = merged.at("eval").at("extractor");
  if (ex.at("backend") != "seeded-random-conv") {
    throw ConfigError("config key 'eval.extractor.backend': only 'seeded-random-conv' is built in; "
                      "external extractors attach through ExternalExtractorAdapter");
  }
  c.eval.extractor.feature_dim = ex.at("feature_dim").get<std::int64_t>();
  c.eval.extractor.seed = ex.at("seed").get<std::uint64_t>();
  if (c.eval.extractor.feature_dim < 2) throw ConfigError("config key 'eval.extractor.feature_dim' must be >= 2");
  const auto& em = merged.at("eval").at("embedder");
  if (em.at("backend") != "oracle-free") {
    throw ConfigError("config key 'eval.embedder.backend': only 'oracle-free' is built in; "
                      "external embedders attach through ExternalEmbedderAdapter");
  }
  c.eval.embedder.resolution =
      dims_from(em.at("resolution").get<std::vector<std::size_t>>(), "eval.embedder.resolution");

  c.json = std::move(merged);
  return c;
}

void apply_override(json& target, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &target;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& set_overrides) {
  json overrides = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
      in >> overrides;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& s : set_overrides) apply_override(overrides, s);
  return make_run_config(overrides);
}

}  // namespace ctsynth
