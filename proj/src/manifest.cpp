#include "medlab/manifest.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

namespace medlab {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key()))
      throw ConfigError("unknown key '" + where + it.key() + "'");
  }
}

template <class T>
void read(const json& obj, const char* key, T& into) {
  if (obj.contains(key)) into = obj.at(key).get<T>();
}

json vision_json(const VisionConfig& v) {
  return {{"embed_dim", v.embed_dim},   {"n_heads", v.n_heads},
          {"n_layers", v.n_layers},     {"patch_size", v.patch_size},
          {"image_size", v.image_size}, {"in_channels", v.in_channels},
          {"ffn_hidden", v.ffn_hidden}};
}

void vision_from(const json& j, VisionConfig& v, const std::string& where) {
  reject_unknown(j, {"embed_dim", "n_heads", "n_layers", "patch_size", "image_size", "in_channels",
                     "ffn_hidden"},
                 where);
  read(j, "embed_dim", v.embed_dim);
  read(j, "n_heads", v.n_heads);
  read(j, "n_layers", v.n_layers);
  read(j, "patch_size", v.patch_size);
  read(j, "image_size", v.image_size);
  read(j, "in_channels", v.in_channels);
  read(j, "ffn_hidden", v.ffn_hidden);
}

json text_json(const TextConfig& t) {
  return {{"embed_dim", t.embed_dim}, {"n_heads", t.n_heads},
          {"n_layers", t.n_layers},   {"vocab_size", t.vocab_size},
          {"max_len", t.max_len},     {"n_fusion_layers", t.n_fusion_layers},
          {"ffn_hidden", t.ffn_hidden}};
}

void text_from(const json& j, TextConfig& t, const std::string& where) {
  reject_unknown(j, {"embed_dim", "n_heads", "n_layers", "vocab_size", "max_len",
                     "n_fusion_layers", "ffn_hidden"},
                 where);
  read(j, "embed_dim", t.embed_dim);
  read(j, "n_heads", t.n_heads);
  read(j, "n_layers", t.n_layers);
  read(j, "vocab_size", t.vocab_size);
  read(j, "max_len", t.max_len);
  read(j, "n_fusion_layers", t.n_fusion_layers);
  read(j, "ffn_hidden", t.ffn_hidden);
}

json model_json(const ModelConfig& m) {
  return {{"vision", vision_json(m.vision)},
          {"text", text_json(m.text)},
          {"decoder", {{"n_layers", m.decoder.n_layers}}},
          {"ffn_ratio", m.ffn_ratio},
          {"itc_dim", m.itc_dim}};
}

void model_from(const json& j, ModelConfig& m, const std::string& where) {
  reject_unknown(j, {"vision", "text", "decoder", "ffn_ratio", "itc_dim"}, where);
  if (j.contains("vision")) vision_from(j.at("vision"), m.vision, where + "vision.");
  if (j.contains("text")) text_from(j.at("text"), m.text, where + "text.");
  if (j.contains("decoder")) {
    reject_unknown(j.at("decoder"), {"n_layers"}, where + "decoder.");
    read(j.at("decoder"), "n_layers", m.decoder.n_layers);
  }
  read(j, "ffn_ratio", m.ffn_ratio);
  read(j, "itc_dim", m.itc_dim);
}

json plan_json(const DistillPlan& p) {
  json channels = json::array();
  for (Channel c : p.channels) channels.push_back(channel_name(c));
  return {{"channels", channels}, {"at_self", p.at_self},     {"at_cross", p.at_cross},
          {"lambda_at", p.lambda_at}, {"lambda_hr", p.lambda_hr}, {"alpha", p.alpha},
          {"common_dim", p.common_dim}, {"use_hr", p.use_hr},   {"use_at", p.use_at}};
}

void plan_from(const json& j, DistillPlan& p, const std::string& where) {
  reject_unknown(j, {"channels", "at_self", "at_cross", "lambda_at", "lambda_hr", "alpha",
                     "common_dim", "use_hr", "use_at"},
                 where);
  if (j.contains("channels")) {
    p.channels.clear();
    for (const auto& c : j.at("channels")) p.channels.push_back(channel_from_name(c.get<std::string>()));
  }
  read(j, "at_self", p.at_self);
  read(j, "at_cross", p.at_cross);
  read(j, "lambda_at", p.lambda_at);
  read(j, "lambda_hr", p.lambda_hr);
  read(j, "alpha", p.alpha);
  read(j, "common_dim", p.common_dim);
  read(j, "use_hr", p.use_hr);
  read(j, "use_at", p.use_at);
}

const char* init_name(InitSource s) { return s == InitSource::Random ? "random" : "proxy"; }

InitSource init_from_name(const std::string& s) {
  if (s == "random") return InitSource::Random;
  if (s == "proxy") return InitSource::Proxy;
  throw ConfigError("init source must be 'random' or 'proxy', got '" + s + "'");
}

}  // namespace

void RunManifest::validate() const {
  model.validate();
  if (task != "pretrain" && task != "distill" && task != "proxy-vision" && task != "proxy-text")
    throw ConfigError("task must be pretrain|distill|proxy-vision|proxy-text, got '" + task + "'");
  if (train.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (train.steps < 0) throw ConfigError("train.steps must be >= 0");
  if (itc.alpha_soft < 0 || itc.alpha_soft > 1)
    throw ConfigError("itc.alpha_soft must be in [0,1]");
  if (itc.mu <= 0 || itc.mu >= 1) throw ConfigError("itc.mu must be in (0,1)");
  if (itc.tau_min <= 0 || itc.tau_max <= itc.tau_min)
    throw ConfigError("temperature clamp requires 0 < tau_min < tau_max");
  if (task == "distill" && teacher_checkpoint.empty())
    throw ConfigError("distill task needs teacher_checkpoint");
  if (init.vision == InitSource::Proxy && init.vision_checkpoint.empty())
    throw ConfigError("init.vision = proxy needs init.vision_checkpoint");
  if (init.text == InitSource::Proxy && init.text_checkpoint.empty())
    throw ConfigError("init.text = proxy needs init.text_checkpoint");
  if ((task == "pretrain" || task == "distill") && !model.has_decoder())
    throw ConfigError("task '" + task + "' needs decoder.n_layers > 0 (the objective includes LM)");
}

std::string manifest_to_json(const RunManifest& m) {
  json j;
  j["version"] = m.version;
  j["task"] = m.task;
  j["seed"] = m.seed;
  j["mode"] = m.mode == DType::F64 ? "verify" : "train";
  j["model"] = model_json(m.model);
  j["dataset"] = {{"seed", m.dataset.seed},
                  {"n_train", m.dataset.n_train},
                  {"n_eval", m.dataset.n_eval},
                  {"image_size", m.dataset.image_size},
                  {"augment_crop", m.dataset.augment_crop},
                  {"prompt", m.dataset.prompt},
                  {"grammar_version", m.dataset.grammar_version}};
  j["optim"] = {{"peak_lr", m.optim.peak_lr},
                {"warmup_steps", m.optim.warmup_steps},
                {"decay_rate", m.optim.decay_rate},
                {"decay_interval", m.optim.decay_interval},
                {"weight_decay", m.optim.weight_decay},
                {"beta1", m.optim.beta1},
                {"beta2", m.optim.beta2},
                {"eps", m.optim.eps},
                {"clip_norm", m.optim.clip_norm}};
  j["train"] = {{"batch_size", m.train.batch_size},
                {"steps", m.train.steps},
                {"eval_every", m.train.eval_every},
                {"log_every", m.train.log_every}};
  j["itc"] = {{"alpha_soft", m.itc.alpha_soft},
              {"label_smoothing", m.itc.label_smoothing},
              {"mu", m.itc.mu},
              {"tau_min", m.itc.tau_min},
              {"tau_max", m.itc.tau_max}};
  j["distill"] = plan_json(m.plan);
  j["teacher_checkpoint"] = m.teacher_checkpoint;
  j["init"] = {{"vision", init_name(m.init.vision)},
               {"text", init_name(m.init.text)},
               {"vision_checkpoint", m.init.vision_checkpoint},
               {"text_checkpoint", m.init.text_checkpoint}};
  return j.dump(2);
}

RunManifest manifest_from_json(const std::string& js) {
  json j;
  try {
    j = json::parse(js);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunManifest m;
  reject_unknown(j, {"version", "task", "seed", "mode", "model", "dataset", "optim", "train",
                     "itc", "distill", "teacher_checkpoint", "init"},
                 "");
  read(j, "version", m.version);
  if (m.version != "medlab-run-v1")
    throw VersionError("unsupported manifest version '" + m.version + "'");
  read(j, "task", m.task);
  read(j, "seed", m.seed);
  if (j.contains("mode")) {
    std::string mode = j.at("mode").get<std::string>();
    if (mode == "verify")
      m.mode = DType::F64;
    else if (mode == "train")
      m.mode = DType::F32;
    else
      throw ConfigError("mode must be 'train' or 'verify', got '" + mode + "'");
  }
  if (j.contains("model")) model_from(j.at("model"), m.model, "model.");
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"seed", "n_train", "n_eval", "image_size", "augment_crop", "prompt",
                       "grammar_version"},
                   "dataset.");
    read(d, "seed", m.dataset.seed);
    read(d, "n_train", m.dataset.n_train);
    read(d, "n_eval", m.dataset.n_eval);
    read(d, "image_size", m.dataset.image_size);
    read(d, "augment_crop", m.dataset.augment_crop);
    read(d, "prompt", m.dataset.prompt);
    read(d, "grammar_version", m.dataset.grammar_version);
  }
  if (j.contains("optim")) {
    const json& o = j.at("optim");
    reject_unknown(o, {"peak_lr", "warmup_steps", "decay_rate", "decay_interval", "weight_decay",
                       "beta1", "beta2", "eps", "clip_norm"},
                   "optim.");
    read(o, "peak_lr", m.optim.peak_lr);
    read(o, "warmup_steps", m.optim.warmup_steps);
    read(o, "decay_rate", m.optim.decay_rate);
    read(o, "decay_interval", m.optim.decay_interval);
    read(o, "weight_decay", m.optim.weight_decay);
    read(o, "beta1", m.optim.beta1);
    read(o, "beta2", m.optim.beta2);
    read(o, "eps", m.optim.eps);
    read(o, "clip_norm", m.optim.clip_norm);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, {"batch_size", "steps", "eval_every", "log_every"}, "train.");
    read(t, "batch_size", m.train.batch_size);
    read(t, "steps", m.train.steps);
    read(t, "eval_every", m.train.eval_every);
    read(t, "log_every", m.train.log_every);
  }
  if (j.contains("itc")) {
    const json& i = j.at("itc");
    reject_unknown(i, {"alpha_soft", "label_smoothing", "mu", "tau_min", "tau_max"}, "itc.");
    read(i, "alpha_soft", m.itc.alpha_soft);
    read(i, "label_smoothing", m.itc.label_smoothing);
    read(i, "mu", m.itc.mu);
    read(i, "tau_min", m.itc.tau_min);
    read(i, "tau_max", m.itc.tau_max);
  }
  if (j.contains("distill")) plan_from(j.at("distill"), m.plan, "distill.");
  read(j, "teacher_checkpoint", m.teacher_checkpoint);
  if (j.contains("init")) {
    const json& i = j.at("init");
    reject_unknown(i, {"vision", "text", "vision_checkpoint", "text_checkpoint"}, "init.");
    if (i.contains("vision")) m.init.vision = init_from_name(i.at("vision").get<std::string>());
    if (i.contains("text")) m.init.text = init_from_name(i.at("text").get<std::string>());
    read(i, "vision_checkpoint", m.init.vision_checkpoint);
    read(i, "text_checkpoint", m.init.text_checkpoint);
  }
  m.validate();
  return m;
}

RunManifest parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw ConfigError("cannot read config file '" + path + "'");
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return manifest_from_json(all);
}

void save_manifest(const RunManifest& m, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp);
    f << manifest_to_json(m) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace medlab
