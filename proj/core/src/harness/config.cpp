#include "medblip/harness/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"
#include "medblip/ndiff/error.hpp"

namespace medblip::harness {

using json = nlohmann::ordered_json;

namespace {

template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("train_manifest", c.train_manifest);
  f("test_manifest", c.test_manifest);
  f("output_dir", c.output_dir);
  f("volume_dim", c.volume_dim);
  f("patch", c.patch);
  f("aggregate", c.aggregate);
  f("vision_width", c.vision_width);
  f("vision_layers", c.vision_layers);
  f("vision_heads", c.vision_heads);
  f("vision_seed", c.vision_seed);
  f("queries", c.queries);
  f("qformer_width", c.qformer_width);
  f("qformer_layers", c.qformer_layers);
  f("qformer_heads", c.qformer_heads);
  f("text_layers", c.text_layers);
  f("max_text_len", c.max_text_len);
  f("lm_width", c.lm_width);
  f("lm_layers", c.lm_layers);
  f("lm_heads", c.lm_heads);
  f("max_len", c.max_len);
  f("mlp_ratio", c.mlp_ratio);
  f("mode", c.mode);
  f("lora_rank", c.lora_rank);
  f("lora_alpha", c.lora_alpha);
  f("lora_targets", c.lora_targets);
  f("lm_warmup_steps", c.lm_warmup_steps);
  f("prompt_order", c.prompt_order);
  f("qa_term", c.qa_term);
  f("lambda_lg", c.lambda_lg);
  f("init_tau", c.init_tau);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("eps", c.eps);
  f("weight_decay", c.weight_decay);
  f("batch_size", c.batch_size);
  f("steps", c.steps);
  f("seed", c.seed);
  f("eval_method", c.eval_method);
  f("rank_per_token", c.rank_per_token);
  f("max_new_tokens", c.max_new_tokens);
}

template <class V>
std::string type_name() {
  if constexpr (std::is_same_v<V, std::string>) {
    return "string";
  } else if constexpr (std::is_same_v<V, bool>) {
    return "boolean";
  } else if constexpr (std::is_integral_v<V>) {
    return "integer";
  } else {
    return "number";
  }
}

template <class V>
void assign(const std::string& key, const json& value, V& field) {
  bool ok = false;
  if constexpr (std::is_same_v<V, std::string>) {
    ok = value.is_string();
  } else if constexpr (std::is_same_v<V, bool>) {
    ok = value.is_boolean();
  } else if constexpr (std::is_integral_v<V>) {
    ok = value.is_number_unsigned();
  } else {
    ok = value.is_number();
  }
  if (!ok) throw Error("config key '" + key + "' expects " + type_name<V>() + ", got " + value.dump());
  field = value.get<V>();
}

json parse_typed(const std::string& key, const std::string& type, const std::string& text) {
  auto fail = [&] { return Error("config key '" + key + "' expects " + type + ", got '" + text + "'"); };
  if (type == "string") return text;
  if (type == "boolean") {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw fail();
  }
  std::size_t used = 0;
  try {
    if (type == "integer") {
      if (text.empty() || text[0] == '-') throw fail();
      const unsigned long long v = std::stoull(text, &used);
      if (used != text.size()) throw fail();
      return v;
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) throw fail();
    return v;
  } catch (const std::logic_error&) {
    throw fail();
  }
}

}  // namespace

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw Error("invalid config: " + msg);
  };
  require(mode == "frozen" || mode == "lora", "mode must be 'frozen' or 'lora', got '" + mode + "'");
  require(prompt_order == "regular" || prompt_order == "alternative",
          "prompt_order must be 'regular' or 'alternative', got '" + prompt_order + "'");
  require(eval_method == "generate" || eval_method == "rank",
          "eval_method must be 'generate' or 'rank', got '" + eval_method + "'");
  require(volume_dim > 0 && patch > 0 && patch <= volume_dim, "patch must be in [1, volume_dim]");
  require(volume_dim % patch == 0, "patch must divide volume_dim");
  require(vision_heads > 0 && vision_width % vision_heads == 0, "vision_heads must divide vision_width");
  require(qformer_heads > 0 && qformer_width % qformer_heads == 0, "qformer_heads must divide qformer_width");
  require(lm_heads > 0 && lm_width % lm_heads == 0, "lm_heads must divide lm_width");
  require(batch_size > 0, "batch_size must be positive");
  require(queries > 0, "queries must be positive");
  require(mode != "lora" || lora_rank > 0, "lora_rank must be positive");
  require(max_new_tokens > 0, "max_new_tokens must be positive");
  require(init_tau > 0.0, "init_tau must be positive");
}

std::string config_to_json(const RunConfig& config) {
  json j = json::object();
  visit_fields(config, [&](const char* key, const auto& field) { j[key] = field; });
  return j.dump(2) + "\n";
}

RunConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> known;
  visit_fields(c, [&](const char* key, auto& field) {
    known.insert(key);
    if (j.contains(key)) assign(key, j.at(key), field);
  });
  for (const auto& item : j.items())
    if (!known.count(item.key())) throw Error("unknown config key '" + item.key() + "'");
  return c;
}

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> keys;
  RunConfig c;
  visit_fields(c, [&](const char* key, auto& field) {
    keys.push_back({key, type_name<std::decay_t<decltype(field)>>()});
  });
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(config, [&](const char* name, auto& field) {
    if (key != name) return;
    found = true;
    using V = std::decay_t<decltype(field)>;
    assign(key, parse_typed(key, type_name<V>(), value), field);
  });
  if (!found) throw Error("unknown config key '" + key + "'");
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

void save_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write config " + path.string());
  out << config_to_json(config);
}

std::filesystem::path config_path_for(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".config.json");
}

}  // namespace medblip::harness
