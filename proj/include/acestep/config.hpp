#pragma once

// Flat key=value run configuration with namespaced keys. Unknown keys are
// rejected; every key has a default.

#include "acestep/core.hpp"
#include "acestep/dcae.hpp"
#include "acestep/dit.hpp"
#include "acestep/sampler.hpp"
#include "acestep/trainer.hpp"

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace acestep {

struct ConfigKey {
  std::string_view key;
  std::string_view value;
  std::string_view note;
};

// Defaults. Notes carry the full-scale value where the desk value differs.
inline constexpr ConfigKey kConfigKeys[] = {
    {"data.songs", "64", ""},
    {"data.seed", "1", ""},
    {"data.duration_s", "2.97", "256 mel frames, 32 latent frames"},
    {"data.short_duration_s", "2.23", "192 mel frames, 24 latent frames"},
    {"data.short_every", "4", "every n-th song uses the short duration"},
    {"data.speakers", "4", ""},
    {"dcae.c1", "16", ""},
    {"dcae.c2", "32", ""},
    {"dcae.c3", "32", ""},
    {"dcae.steps", "2000", ""},
    {"dcae.batch", "4", ""},
    {"dcae.lr", "2e-3", ""},
    {"dcae.seed", "7", ""},
    {"dit.model_dim", "128", ""},
    {"dit.blocks", "8", "full scale: 24"},
    {"dit.heads", "4", ""},
    {"dit.ffn_expansion", "2", ""},
    {"dit.rope_base", "10000", "rotary phases on self- and cross-attention queries/keys"},
    {"dit.cross_rope_rate", "4", "latent frames per lyric token for cross-attention key phases"},
    {"dit.seed", "11", ""},
    {"cond.lyric_blocks", "2", ""},
    {"train.phase", "pretrain", "pretrain | finetune"},
    {"train.lr", "5e-4", "full scale: 1e-4"},
    {"train.warmup", "200", "full scale: 4000"},
    {"train.steps", "3000", ""},
    {"train.batch", "4", ""},
    {"train.weight_decay", "1e-2", "full scale: 1e-2"},
    {"train.beta1", "0.8", "full scale: 0.8"},
    {"train.beta2", "0.9", "full scale: 0.9"},
    {"train.clip_norm", "0.5", "full scale: 0.5"},
    {"train.lambda_ssl", "1.0", "full scale: 1.0"},
    {"train.w_mert", "1.0", ""},
    {"train.w_hubert", "1.0", "finetune forces 0.01"},
    {"train.drop_global", "0.15", "full scale: 0.15"},
    {"train.drop_text", "0.15", "full scale: 0.15"},
    {"train.drop_lyric", "0.15", "full scale: 0.15"},
    {"train.drop_speaker", "0.5", "full scale: 0.5"},
    {"train.shift", "3.0", "full scale: 3.0"},
    {"train.seed", "13", ""},
    {"train.lora_rank", "0", "0 trains the full model"},
    {"train.lora_alpha", "4", ""},
    {"sampler.steps", "30", ""},
    {"sampler.guidance", "3.0", ""},
    {"sampler.shift", "3.0", ""},
    {"sampler.seed", "0", ""},
};

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : kConfigKeys) values_[std::string(k.key)] = std::string(k.value);
  }

  // Parses `text` over the defaults. Lines are `key = value`; `#` starts a
  // comment.
  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    cfg.text_ = text;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string s = trim(line);
      if (s.empty()) continue;
      const auto eq = s.find('=');
      require(eq != std::string::npos, ErrorKind::kConfig, "config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(s.substr(0, eq)), value = trim(s.substr(eq + 1));
      cfg.set(key, value);
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    require(values_.contains(key), ErrorKind::kConfig, "unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), ErrorKind::kConfig, "unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const std::string& v = get(key);
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require(ec == std::errc() && p == v.data() + v.size(), ErrorKind::kConfig, "config key '" + key + "': '" + v + "' is not a number");
    return out;
  }

  long integer(const std::string& key) const {
    const std::string& v = get(key);
    long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require(ec == std::errc() && p == v.data() + v.size(), ErrorKind::kConfig, "config key '" + key + "': '" + v + "' is not an integer");
    return out;
  }

  std::uint64_t seed(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require(ec == std::errc() && p == v.data() + v.size(), ErrorKind::kConfig, "config key '" + key + "': '" + v + "' is not a seed");
    return out;
  }

  // The text this configuration was parsed from, or the canonical rendering
  // of all values when built programmatically.
  std::string text() const { return text_.empty() ? render() : text_; }

  std::string render() const {
    std::string out;
    for (const auto& k : kConfigKeys) {
      out += std::string(k.key) + " = " + values_.at(std::string(k.key));
      if (!k.note.empty()) out += "  # " + std::string(k.note);
      out += "\n";
    }
    return out;
  }

  DcaeTrainConfig dcae() const {
    DcaeTrainConfig c;
    c.model = DcaeConfig{integer("dcae.c1"), integer("dcae.c2"), integer("dcae.c3")};
    c.steps = integer("dcae.steps");
    c.batch = static_cast<int>(integer("dcae.batch"));
    c.lr = real("dcae.lr");
    c.seed = seed("dcae.seed");
    return c;
  }

  DitConfig dit() const {
    DitConfig c;
    c.model_dim = integer("dit.model_dim");
    c.blocks = static_cast<int>(integer("dit.blocks"));
    c.heads = static_cast<int>(integer("dit.heads"));
    c.ffn_expansion = static_cast<int>(integer("dit.ffn_expansion"));
    c.rope_base = real("dit.rope_base");
    c.cross_rope_rate = real("dit.cross_rope_rate");
    c.cond.model_dim = c.model_dim;
    c.cond.heads = c.heads;
    c.cond.lyric_blocks = static_cast<int>(integer("cond.lyric_blocks"));
    c.cond.speakers = static_cast<int>(integer("data.speakers"));
    c.cond.rope_base = c.rope_base;
    return c;
  }

  TrainConfig train() const {
    TrainConfig c;
    const std::string& phase = get("train.phase");
    require(phase == "pretrain" || phase == "finetune", ErrorKind::kConfig, "train.phase must be pretrain or finetune");
    c.phase = phase == "finetune" ? Phase::kFinetune : Phase::kPretrain;
    c.opt = AdamWConfig{real("train.lr"), real("train.beta1"), real("train.beta2"), 1e-8, real("train.weight_decay")};
    c.warmup_steps = integer("train.warmup");
    c.steps = integer("train.steps");
    c.batch = static_cast<int>(integer("train.batch"));
    c.clip_norm = real("train.clip_norm");
    c.weights = LossWeights{real("train.lambda_ssl"), real("train.w_mert"), real("train.w_hubert")};
    c.dropout = DropoutRates{real("train.drop_global"), real("train.drop_text"), real("train.drop_lyric"),
                             real("train.drop_speaker")};
    c.shift = real("train.shift");
    c.seed = seed("train.seed");
    c.lora_rank = static_cast<int>(integer("train.lora_rank"));
    c.lora_alpha = real("train.lora_alpha");
    return c;
  }

  SamplerConfig sampler() const {
    return SamplerConfig{static_cast<int>(integer("sampler.steps")), real("sampler.guidance"), real("sampler.shift"),
                         seed("sampler.seed")};
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  std::string text_;
};

}  // namespace acestep
