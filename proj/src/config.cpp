#include "iapo/config.hpp"

#include <fstream>
#include <sstream>

#include "iapo/error.hpp"

namespace iapo {

using nlohmann::json;

json run_config_to_json(const RunConfig& c) {
  const TrainConfig& t = c.trainer;
  const ShapingConfig& s = t.shaping;
  return json{
      {"seed", c.seed},
      {"log_level", c.log_level},
      {"model", c.model},
      {"trainer",
       {{"group_size", t.group_size},
        {"lr", t.lr},
        {"lr_decay", t.lr_decay},
        {"lr_decay_every", t.lr_decay_every},
        {"kl_coeff", t.kl_coeff},
        {"clip_epsilon", t.clip_epsilon},
        {"grad_clip", t.grad_clip},
        {"weight_decay", t.weight_decay},
        {"budget", t.budget},
        {"batch_size", t.batch_size},
        {"total_steps", t.total_steps},
        {"inner_epochs", t.inner_epochs},
        {"temperature", t.temperature},
        {"init_std", t.init_std},
        {"estimator", std::string(to_string(t.estimator))},
        {"checkpoint_every", t.checkpoint_every},
        {"eval_every", t.eval_every}}},
      {"shaping",
       {{"alpha", s.alpha},
        {"beta_explo", s.beta_explo},
        {"exploration_signal", std::string(to_string(s.exploration_signal))},
        {"variant", std::string(to_string(s.variant))},
        {"norm_epsilon", s.norm_epsilon}}},
      {"data",
       {{"difficulty", c.data.difficulty},
        {"train_path", c.data.train_path},
        {"train_seed", c.data.train_seed},
        {"validation_tasks", c.data.validation_tasks},
        {"validation_seed", c.data.validation_seed}}},
      {"eval",
       {{"k", c.eval.ks},
        {"budget", c.eval.budget},
        {"temperature", c.eval.temperature},
        {"seed", c.eval.seed},
        {"tau", c.eval.tau},
        {"tasks", c.eval_tasks},
        {"task_seed", c.eval_task_seed}}},
  };
}

json default_config_json() { return run_config_to_json(RunConfig{}); }

namespace {

std::string type_name(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_unsigned() || v.is_number_integer()) return "integer";
  if (v.is_number_float()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool compatible(const json& schema, const json& value) {
  if (schema.is_number_float()) return value.is_number();
  if (schema.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  if (schema.is_number_integer()) return value.is_number_integer();
  if (schema.is_array()) {
    if (!value.is_array()) return false;
    for (const auto& v : value) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) return false;
    }
    return true;
  }
  return schema.type() == value.type();
}

void overlay(json& doc, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config " + (prefix.empty() ? "root" : prefix) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!doc.contains(key)) throw ConfigError("unknown config key: " + path);
    json& slot = doc[key];
    if (slot.is_object()) {
      overlay(slot, value, path);
    } else if (!compatible(slot, value)) {
      throw ConfigError("type error for key " + path + ": expected " + type_name(slot) + ", got " +
                        type_name(value) + " " + value.dump());
    } else {
      slot = value;
    }
  }
}

void describe(const json& doc, const std::string& prefix, std::ostringstream& out) {
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      describe(value, path, out);
    } else {
      out << "  " << path << " (" << type_name(value) << ") = " << value.dump() << '\n';
    }
  }
}

}  // namespace

std::string config_schema_help() {
  std::ostringstream out;
  out << "config keys (JSON file and --override key=value):\n";
  describe(default_config_json(), "", out);
  return out.str();
}

json merge_config(const json& patch) {
  json doc = default_config_json();
  overlay(doc, patch, "");
  return doc;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  // A leaf key addressed as an object is an error, not a merge.
  const json* slot = &doc;
  for (const auto& p : parts) {
    if (!slot->is_object() || !slot->contains(p)) throw ConfigError("unknown config key: " + key);
    slot = &(*slot)[p];
  }
  if (slot->is_object()) throw ConfigError("override must address a leaf key: " + key);
  overlay(doc, patch, "");
}

RunConfig run_config_from_json(const json& doc) {
  try {
    RunConfig c;
    c.seed = doc.at("seed").get<std::uint64_t>();
    c.log_level = doc.at("log_level").get<std::string>();
    c.model = doc.at("model").get<ModelConfig>();
    const json& t = doc.at("trainer");
    TrainConfig& tc = c.trainer;
    tc.group_size = t.at("group_size").get<int>();
    tc.lr = t.at("lr").get<double>();
    tc.lr_decay = t.at("lr_decay").get<double>();
    tc.lr_decay_every = t.at("lr_decay_every").get<double>();
    tc.kl_coeff = t.at("kl_coeff").get<double>();
    tc.clip_epsilon = t.at("clip_epsilon").get<double>();
    tc.grad_clip = t.at("grad_clip").get<double>();
    tc.weight_decay = t.at("weight_decay").get<double>();
    tc.budget = t.at("budget").get<int>();
    tc.batch_size = t.at("batch_size").get<int>();
    tc.total_steps = t.at("total_steps").get<int>();
    tc.inner_epochs = t.at("inner_epochs").get<int>();
    tc.temperature = t.at("temperature").get<double>();
    tc.init_std = t.at("init_std").get<double>();
    tc.estimator = parse_mi_estimator(t.at("estimator").get<std::string>());
    tc.checkpoint_every = t.at("checkpoint_every").get<int>();
    tc.eval_every = t.at("eval_every").get<int>();
    tc.seed = c.seed;
    const json& s = doc.at("shaping");
    tc.shaping.alpha = s.at("alpha").get<double>();
    tc.shaping.beta_explo = s.at("beta_explo").get<double>();
    tc.shaping.exploration_signal = parse_exploration_signal(s.at("exploration_signal").get<std::string>());
    tc.shaping.variant = parse_shaping_variant(s.at("variant").get<std::string>());
    tc.shaping.norm_epsilon = s.at("norm_epsilon").get<double>();
    const json& d = doc.at("data");
    c.data.difficulty = d.at("difficulty").get<int>();
    c.data.train_path = d.at("train_path").get<std::string>();
    c.data.train_seed = d.at("train_seed").get<std::uint64_t>();
    c.data.validation_tasks = d.at("validation_tasks").get<std::size_t>();
    c.data.validation_seed = d.at("validation_seed").get<std::uint64_t>();
    const json& e = doc.at("eval");
    c.eval.ks = e.at("k").get<std::vector<std::size_t>>();
    c.eval.budget = e.at("budget").get<int>();
    c.eval.temperature = e.at("temperature").get<double>();
    c.eval.seed = e.at("seed").get<std::uint64_t>();
    c.eval.tau = e.at("tau").get<double>();
    c.eval_tasks = e.at("tasks").get<std::size_t>();
    c.eval_task_seed = e.at("task_seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("malformed config: ") + ex.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          json* effective) {
  json doc = default_config_json();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json patch = json::parse(in, nullptr, false);
    if (patch.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    overlay(doc, patch, "");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  c.model.validate();
  c.trainer.validate();
  if (c.data.difficulty < 2) throw ConfigError("data.difficulty must be >= 2");
  if (c.eval.ks.empty()) throw ConfigError("eval.k must not be empty");
  for (std::size_t k : c.eval.ks) {
    if (k < 1) throw ConfigError("eval.k entries must be >= 1");
  }
  if (c.eval.budget < 1) throw ConfigError("eval.budget must be >= 1");
  if (effective) *effective = doc;
  return c;
}

}  // namespace iapo
