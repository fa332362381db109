#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace medblip::harness {

// Every field is a flat JSON key of the same name.
struct RunConfig {
  // data and output
  std::string train_manifest;
  std::string test_manifest;
  std::string output_dir = "run";

  // volume-embed
  std::size_t volume_dim = 32;
  std::size_t patch = 8;
  bool aggregate = true;

  // frozen vision encoder
  std::size_t vision_width = 64;
  std::size_t vision_layers = 2;
  std::size_t vision_heads = 4;
  std::uint64_t vision_seed = 20240;

  // MedQFormer
  std::size_t queries = 8;
  std::size_t qformer_width = 64;
  std::size_t qformer_layers = 2;
  std::size_t qformer_heads = 4;
  std::size_t text_layers = 2;
  std::size_t max_text_len = 32;

  // language model
  std::size_t lm_width = 64;
  std::size_t lm_layers = 2;
  std::size_t lm_heads = 4;
  std::size_t max_len = 64;
  std::size_t mlp_ratio = 4;
  std::string mode = "lora";  // frozen | lora
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::string lora_targets = "q_proj,v_proj";
  // Leading steps during which the LM base is learnable before it is frozen.
  std::size_t lm_warmup_steps = 0;

  // objective
  std::string prompt_order = "regular";  // regular | alternative
  bool qa_term = true;
  double lambda_lg = 1.0;
  double init_tau = 0.07;

  // optimizer and schedule
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  std::uint64_t seed = 0;

  // evaluation
  std::string eval_method = "generate";  // generate | rank
  bool rank_per_token = false;
  std::size_t max_new_tokens = 6;

  std::filesystem::path checkpoint_path() const { return std::filesystem::path(output_dir) / "model.mblp"; }
  std::filesystem::path metrics_path() const { return std::filesystem::path(output_dir) / "metrics.jsonl"; }

  // Throws Error on inconsistent settings.
  void validate() const;
};

// Pretty-printed JSON object with keys in declaration order.
std::string config_to_json(const RunConfig& config);
// Unknown keys and mistyped values are rejected; missing keys keep defaults.
RunConfig config_from_json(std::string_view text);

struct ConfigKey {
  std::string name;
  std::string type;  // "string", "integer", "number" or "boolean"
};
std::vector<ConfigKey> config_keys();
// Parses value according to the key's type and stores it.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& config, const std::filesystem::path& path);
// The config stored next to a checkpoint.
std::filesystem::path config_path_for(const std::filesystem::path& checkpoint);

}  // namespace medblip::harness
