#include "medlab/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace medlab {

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

void clamp_temperature(MEDModel& m, double lo, double hi) {
  double t = m.temperature.at(0);
  m.temperature.set(0, std::min(std::max(t, lo), hi));
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

// Streams lines as they are produced so long runs can be watched and a
// crashed run leaves its log behind.
struct JsonlLog {
  std::ofstream out;
  explicit JsonlLog(const std::string& path) : out(path, std::ios::trunc) {}
  void add(const json& j) {
    out << j.dump() << "\n";
    out.flush();
  }
};

EvalSnapshot evaluate(MEDModel& m, const Split& eval_split, const Vocabulary& vocab,
                      const std::string& prompt, int64_t step) {
  EvalSnapshot s;
  s.step = step;
  RetrievalResult r = retrieval_eval(m, eval_split, {1, 5});
  s.tr1 = r.tr.at(1);
  s.tr5 = r.tr.at(5);
  s.ir1 = r.ir.at(1);
  s.ir5 = r.ir.at(5);
  CaptionResult c = caption_eval(m, eval_split, vocab, prompt);
  s.caption_em = c.exact_match;
  s.caption_f1 = c.token_f1;
  return s;
}

json eval_json(const EvalSnapshot& s) {
  return {{"step", s.step},           {"eval_tr1", s.tr1},
          {"eval_tr5", s.tr5},        {"eval_ir1", s.ir1},
          {"eval_ir5", s.ir5},        {"eval_caption_em", s.caption_em},
          {"eval_caption_f1", s.caption_f1}};
}

void apply_init_strategy(MEDModel& m, const InitStrategy& init) {
  if (init.vision == InitSource::Proxy) {
    Checkpoint ck = load_checkpoint(init.vision_checkpoint);
    restore_model_subset(m, ck, "vision.");
  }
  if (init.text == InitSource::Proxy) {
    Checkpoint ck = load_checkpoint(init.text_checkpoint);
    restore_model_subset(m, ck, "text.");
  }
}

void check_teacher_compatibility(const RunManifest& student, const RunManifest& teacher) {
  const auto& sm = student.model;
  const auto& tm = teacher.model;
  if (sm.text.vocab_size != tm.text.vocab_size)
    throw ContractError("teacher/student vocab mismatch: " + std::to_string(tm.text.vocab_size) +
                        " vs " + std::to_string(sm.text.vocab_size));
  if (sm.vision.image_size != tm.vision.image_size || sm.vision.patch_size != tm.vision.patch_size)
    throw ContractError("teacher/student patch geometry mismatch: image " +
                        std::to_string(tm.vision.image_size) + "/patch " +
                        std::to_string(tm.vision.patch_size) + " vs image " +
                        std::to_string(sm.vision.image_size) + "/patch " +
                        std::to_string(sm.vision.patch_size));
  if (sm.text.max_len != tm.text.max_len)
    throw ContractError("teacher/student max_len mismatch");
}

struct LossTrack {
  double itc = 0, itm = 0, lm = 0, vlp = 0, hr = 0, at = 0, total = 0;
};

// Core loop shared by teacher pretraining and student distillation.
RunResult train_loop(const RunManifest& manifest, const std::string& run_dir,
                     const StopTargets& stop, bool with_teacher) {
  manifest.validate();
  ensure_dir(run_dir);
  save_manifest(manifest, run_dir + "/manifest.json");

  Vocabulary vocab;
  if (manifest.model.text.vocab_size != vocab.size())
    throw ConfigError("model.text.vocab_size " + std::to_string(manifest.model.text.vocab_size) +
                      " must equal the grammar vocabulary size " + std::to_string(vocab.size()));
  auto [train_split, eval_split] = generate_dataset(manifest.dataset, vocab);

  Rng root(manifest.seed);
  Rng init_rng = root.fork("init");
  Rng data_rng = root.fork("data");
  Rng itm_rng = root.fork("itm");
  Rng proj_rng = root.fork("proj");

  MEDModel model = MEDModel::build(manifest.model, manifest.mode, init_rng);
  apply_init_strategy(model, manifest.init);
  model.set_requires_grad(true);
  MomentumEncoder momentum = MomentumEncoder::init(model, manifest.itc.mu);

  // teacher + projections (distillation only)
  std::optional<MEDModel> teacher;
  std::optional<DistillProjections> projections;
  DistillPlan plan = manifest.plan;
  bool distill_active = with_teacher && plan.enabled();
  if (with_teacher) {
    Checkpoint tck = load_checkpoint(manifest.teacher_checkpoint);
    check_teacher_compatibility(manifest, tck.manifest);
    plan.validate(tck.manifest.model, manifest.model);
    if (distill_active) {
      MEDModel t = MEDModel::build(tck.manifest.model, manifest.mode, Rng(0));
      restore_model(t, tck);
      t.set_requires_grad(false);
      teacher = std::move(t);
      projections =
          DistillProjections::init(plan, tck.manifest.model, manifest.model, manifest.mode,
                                   proj_rng);
      projections->set_requires_grad(true);
    }
  }

  AdamW opt(manifest.optim);
  model.for_each_param([&](const std::string& n, Tensor& p) { opt.add_param(n, &p); });
  if (projections)
    projections->for_each_param([&](const std::string& n, Tensor& p) { opt.add_param(n, &p); });

  PretrainParams pp;
  pp.alpha_soft = manifest.itc.alpha_soft;
  pp.label_smoothing = manifest.itc.label_smoothing;

  JsonlLog log(run_dir + "/metrics.jsonl");
  LossTrack last;
  std::vector<Batch> epoch;
  size_t epoch_pos = 0;
  int64_t steps_run = 0;
  EvalSnapshot final_eval;
  bool stopped = false;

  for (int64_t step = 0; step < manifest.train.steps && !stopped; ++step) {
    if (epoch_pos >= epoch.size()) {
      epoch = make_batches(train_split, manifest.train.batch_size, data_rng,
                           manifest.dataset.augment_crop);
      epoch_pos = 0;
    }
    const Batch& batch = epoch[epoch_pos++];

    opt.zero_grads();
    Graph g(manifest.mode);
    PretrainOutputs out = pretrain_losses(g, model, batch, &momentum, itm_rng, pp);

    Var hr, at;
    if (distill_active) {
      Graph tg(manifest.mode);
      ForwardTrace ttr =
          forward_collect(tg, *teacher, batch.images.to_dtype(manifest.mode), batch.tokens);
      TraceSnapshot snap = snapshot_trace(tg, ttr, *teacher);
      if (plan.use_hr) hr = hr_loss(g, snap, out.trace, plan, *projections);
      if (plan.use_at) at = at_loss(g, snap, out.trace, plan);
    }
    Var total = combined_objective(g, out.vlp, at, hr, plan);

    last.itc = g.value(out.itc).at(0);
    last.itm = g.value(out.itm).at(0);
    last.lm = g.value(out.lm).at(0);
    last.vlp = g.value(out.vlp).at(0);
    last.hr = hr.defined() ? g.value(hr).at(0) : 0.0;
    last.at = at.defined() ? g.value(at).at(0) : 0.0;
    last.total = g.value(total).at(0);
    if (!std::isfinite(last.total))
      throw DivergenceError("loss diverged at step " + std::to_string(step) +
                            ": itc=" + std::to_string(last.itc) + " itm=" +
                            std::to_string(last.itm) + " lm=" + std::to_string(last.lm));

    g.backward(total);
    double gnorm = opt.step();
    clamp_temperature(model, manifest.itc.tau_min, manifest.itc.tau_max);
    momentum.update(model);
    ++steps_run;

    if (manifest.train.log_every > 0 &&
        (step % manifest.train.log_every == 0 || step + 1 == manifest.train.steps)) {
      log.add({{"step", step},
               {"lr", schedule_lr(manifest.optim, step)},
               {"l_itc", last.itc},
               {"l_itm", last.itm},
               {"l_lm", last.lm},
               {"l_vlp", last.vlp},
               {"l_hr", last.hr},
               {"l_at", last.at},
               {"l_total", last.total},
               {"grad_norm", gnorm},
               {"temperature", model.temperature.at(0)}});
    }
    if (manifest.train.eval_every > 0 && (step + 1) % manifest.train.eval_every == 0) {
      final_eval = evaluate(model, eval_split, vocab, manifest.dataset.prompt, step + 1);
      log.add(eval_json(final_eval));
      bool tr_ok = stop.tr1 < 0 || final_eval.tr1 >= stop.tr1;
      bool em_ok = stop.caption_em < 0 || final_eval.caption_em >= stop.caption_em;
      if ((stop.tr1 >= 0 || stop.caption_em >= 0) && tr_ok && em_ok) stopped = true;
    }
  }

  if (final_eval.step != steps_run || steps_run == 0) {
    final_eval = evaluate(model, eval_split, vocab, manifest.dataset.prompt, steps_run);
    log.add(eval_json(final_eval));
  }

  RunResult res;
  res.manifest = manifest;
  res.run_dir = run_dir;
  res.final_eval = final_eval;
  res.l_itc = last.itc;
  res.l_itm = last.itm;
  res.l_lm = last.lm;
  res.l_vlp = last.vlp;
  res.l_hr = last.hr;
  res.l_at = last.at;
  res.l_total = last.total;
  res.steps_run = steps_run;

  Checkpoint ck = snapshot_state(model, projections ? &*projections : nullptr, &opt, manifest);
  res.checkpoint_path = run_dir + "/checkpoint.bin";
  save_checkpoint(ck, res.checkpoint_path);
  {
    json fm = eval_json(final_eval);
    fm["steps_run"] = steps_run;
    fm["l_itc"] = last.itc;
    fm["l_itm"] = last.itm;
    fm["l_lm"] = last.lm;
    fm["l_vlp"] = last.vlp;
    fm["l_hr"] = last.hr;
    fm["l_at"] = last.at;
    fm["l_total"] = last.total;
    std::string tmp = run_dir + "/final_metrics.json.tmp";
    std::ofstream f(tmp);
    f << fm.dump(2) << "\n";
    f.close();
    fs::rename(tmp, run_dir + "/final_metrics.json");
  }
  return res;
}

}  // namespace

RunResult pretrain_teacher(const RunManifest& manifest, const std::string& run_dir,
                           const StopTargets& stop) {
  if (manifest.task != "pretrain")
    throw ConfigError("pretrain_teacher expects task == pretrain, got '" + manifest.task + "'");
  return train_loop(manifest, run_dir, stop, false);
}

RunResult distill_student(const RunManifest& manifest, const std::string& run_dir,
                          const StopTargets& stop) {
  if (manifest.task != "distill")
    throw ConfigError("distill_student expects task == distill, got '" + manifest.task + "'");
  return train_loop(manifest, run_dir, stop, true);
}

// ------------------------------------------------------------------ proxies

namespace {

RunResult proxy_vision(const RunManifest& manifest, const std::string& run_dir) {
  ensure_dir(run_dir);
  save_manifest(manifest, run_dir + "/manifest.json");
  Vocabulary vocab;
  Rng root(manifest.seed);
  Rng init_rng = root.fork("init");
  Rng data_rng = root.fork("data");
  MEDModel model = MEDModel::build(manifest.model, manifest.mode, init_rng);
  model.set_requires_grad(true);

  // all single-object scenes, classified by (shape, color): 12 classes
  constexpr int64_t kClasses = 12;
  std::vector<Tensor> images;
  std::vector<int64_t> labels;
  for (int64_t id = 0;; ++id) {
    SceneSpec s = scene_from_id(id);
    if (s.objects.size() != 1) break;
    images.push_back(render_scene(s, manifest.dataset.image_size));
    labels.push_back(static_cast<int64_t>(s.objects[0].shape) * 4 +
                     static_cast<int64_t>(s.objects[0].color));
  }
  int64_t n = static_cast<int64_t>(images.size());
  int64_t S = manifest.dataset.image_size;

  Tensor head_w = Tensor::zeros({manifest.model.vision.embed_dim, kClasses}, manifest.mode);
  for (int64_t i = 0; i < head_w.numel(); ++i) head_w.set(i, init_rng.truncated_normal(0.02));
  Tensor head_b = Tensor::zeros({kClasses}, manifest.mode);
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);

  AdamW opt(manifest.optim);
  model.for_each_param([&](const std::string& nm, Tensor& p) { opt.add_param(nm, &p); });
  opt.add_param("proxyhead.w", &head_w);
  opt.add_param("proxyhead.b", &head_b);

  auto forward_logits = [&](Graph& g, const std::vector<int64_t>& idx) {
    Tensor imgs = Tensor::zeros({(int64_t)idx.size(), 3, S, S}, manifest.mode);
    for (size_t i = 0; i < idx.size(); ++i) {
      const Tensor& src = images[(size_t)idx[i]];
      for (int64_t j = 0; j < src.numel(); ++j) imgs.set((int64_t)i * src.numel() + j, src.at(j));
    }
    Var vf = vision_forward(g, model, imgs, nullptr);
    Shape s = g.value(vf).shape();
    Var cls = g.reshape(g.slice(vf, 1, 0, 1), {s[0], s[2]});
    return g.add_rowvec(g.matmul(cls, g.leaf(head_w)), g.leaf(head_b));
  };

  auto accuracy = [&]() {
    Graph g(manifest.mode);
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[(size_t)i] = i;
    Var logits = forward_logits(g, all);
    const Tensor& lv = g.value(logits);
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      double bv = lv.at(i * kClasses);
      for (int64_t c = 1; c < kClasses; ++c)
        if (lv.at(i * kClasses + c) > bv) {
          bv = lv.at(i * kClasses + c);
          best = c;
        }
      if (best == labels[(size_t)i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
  };

  JsonlLog log(run_dir + "/metrics.jsonl");
  double acc = 0;
  int64_t steps_run = 0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[(size_t)i] = i;
  size_t pos = order.size();
  for (int64_t step = 0; step < manifest.train.steps; ++step) {
    int64_t bs = std::min<int64_t>(manifest.train.batch_size, n);
    if (pos + (size_t)bs > order.size()) {
      data_rng.shuffle(order);
      pos = 0;
    }
    std::vector<int64_t> idx(order.begin() + (long)pos, order.begin() + (long)pos + bs);
    pos += (size_t)bs;
    std::vector<int64_t> tg;
    for (int64_t i : idx) tg.push_back(labels[(size_t)i]);

    opt.zero_grads();
    Graph g(manifest.mode);
    Var loss = g.cross_entropy(forward_logits(g, idx), tg, -100);
    double lv = g.value(loss).at(0);
    if (!std::isfinite(lv)) throw DivergenceError("proxy-vision loss diverged");
    g.backward(loss);
    opt.step();
    ++steps_run;
    if (manifest.train.log_every > 0 && step % manifest.train.log_every == 0)
      log.add({{"step", step}, {"loss", lv}});
    if (manifest.train.eval_every > 0 && (step + 1) % manifest.train.eval_every == 0) {
      acc = accuracy();
      log.add({{"step", step + 1}, {"accuracy", acc}});
      if (acc >= 0.995) break;
    }
  }
  acc = accuracy();
  log.add({{"step", steps_run}, {"accuracy", acc}});

  RunResult res;
  res.manifest = manifest;
  res.run_dir = run_dir;
  res.steps_run = steps_run;
  res.proxy_metric = acc;
  Checkpoint ck = snapshot_state(model, nullptr, nullptr, manifest);
  ck.tensors.emplace("proxyhead.w", head_w.to_dtype(DType::F32));
  ck.tensors.emplace("proxyhead.b", head_b.to_dtype(DType::F32));
  res.checkpoint_path = run_dir + "/checkpoint.bin";
  save_checkpoint(ck, res.checkpoint_path);
  return res;
}

RunResult proxy_text(const RunManifest& manifest, const std::string& run_dir) {
  ensure_dir(run_dir);
  save_manifest(manifest, run_dir + "/manifest.json");
  if (!manifest.model.has_decoder())
    throw ConfigError("proxy-text needs decoder.n_layers > 0 (tied LM head)");
  Vocabulary vocab;
  if (manifest.model.text.vocab_size != vocab.size())
    throw ConfigError("model.text.vocab_size must equal the grammar vocabulary size");
  Rng root(manifest.seed);
  Rng init_rng = root.fork("init");
  Rng data_rng = root.fork("data");
  MEDModel model = MEDModel::build(manifest.model, manifest.mode, init_rng);
  model.set_requires_grad(true);

  auto [train_split, eval_split] = generate_dataset(manifest.dataset, vocab);

  AdamW opt(manifest.optim);
  model.for_each_param([&](const std::string& nm, Tensor& p) { opt.add_param(nm, &p); });

  auto causal_nll = [&](Graph& g, const TokenBatch& toks, double eps) {
    Var states = text_forward(g, model, toks, TextMode::CausalUnimodal, Var{}, nullptr);
    Var logits = lm_logits(g, model, states);
    constexpr int64_t kIgnore = -100;
    std::vector<int64_t> targets;
    for (int64_t b = 0; b < toks.batch; ++b)
      for (int64_t t = 0; t < toks.len; ++t) {
        bool has_next = t + 1 < toks.len && toks.valid_at(b, t + 1);
        targets.push_back(has_next && toks.valid_at(b, t) ? toks.id_at(b, t + 1) : kIgnore);
      }
    return g.cross_entropy(logits, std::move(targets), kIgnore, eps);
  };

  auto corpus_perplexity = [&]() {
    // mean NLL over all next-token predictions of the training captions
    double total_nll = 0;
    int64_t total_preds = 0;
    int64_t bs = 64;
    int64_t n = (int64_t)train_split.items.size();
    for (int64_t from = 0; from < n; from += bs) {
      int64_t count = std::min(bs, n - from);
      int64_t maxlen = 0;
      for (int64_t i = 0; i < count; ++i)
        maxlen = std::max(maxlen, (int64_t)train_split.items[(size_t)(from + i)].tokens.size());
      TokenBatch tb;
      tb.batch = count;
      tb.len = maxlen;
      tb.ids.assign((size_t)(count * maxlen), Vocabulary::kPad);
      tb.mask.assign((size_t)(count * maxlen), 0);
      int64_t preds = 0;
      for (int64_t i = 0; i < count; ++i) {
        const auto& toks = train_split.items[(size_t)(from + i)].tokens;
        for (size_t t = 0; t < toks.size(); ++t) {
          tb.ids[(size_t)(i * maxlen) + t] = toks[t];
          tb.mask[(size_t)(i * maxlen) + t] = 1;
        }
        preds += (int64_t)toks.size() - 1;
      }
      Graph g(manifest.mode);
      Var nll = causal_nll(g, tb, 0.0);
      total_nll += g.value(nll).at(0) * (double)preds;
      total_preds += preds;
    }
    return std::exp(total_nll / (double)total_preds);
  };

  JsonlLog log(run_dir + "/metrics.jsonl");
  int64_t steps_run = 0;
  double ppl = 0;
  std::vector<Batch> epoch;
  size_t epoch_pos = 0;
  for (int64_t step = 0; step < manifest.train.steps; ++step) {
    if (epoch_pos >= epoch.size()) {
      epoch = make_batches(train_split, manifest.train.batch_size, data_rng, false);
      epoch_pos = 0;
    }
    const Batch& batch = epoch[epoch_pos++];
    opt.zero_grads();
    Graph g(manifest.mode);
    Var loss = causal_nll(g, batch.tokens, manifest.itc.label_smoothing);
    double lv = g.value(loss).at(0);
    if (!std::isfinite(lv)) throw DivergenceError("proxy-text loss diverged");
    g.backward(loss);
    opt.step();
    ++steps_run;
    if (manifest.train.log_every > 0 && step % manifest.train.log_every == 0)
      log.add({{"step", step}, {"loss", lv}});
    if (manifest.train.eval_every > 0 && (step + 1) % manifest.train.eval_every == 0) {
      ppl = corpus_perplexity();
      log.add({{"step", step + 1}, {"perplexity", ppl}});
      if (ppl <= 1.95) break;
    }
  }
  ppl = corpus_perplexity();
  log.add({{"step", steps_run}, {"perplexity", ppl}});

  RunResult res;
  res.manifest = manifest;
  res.run_dir = run_dir;
  res.steps_run = steps_run;
  res.proxy_metric = ppl;
  res.checkpoint_path = run_dir + "/checkpoint.bin";
  save_checkpoint(snapshot_state(model, nullptr, nullptr, manifest), res.checkpoint_path);
  return res;
}

}  // namespace

RunResult proxy_pretrain(const RunManifest& manifest, const std::string& run_dir) {
  if (manifest.task == "proxy-vision") return proxy_vision(manifest, run_dir);
  if (manifest.task == "proxy-text") return proxy_text(manifest, run_dir);
  throw ConfigError("proxy_pretrain expects task proxy-vision or proxy-text");
}

RunResult run_task(const RunManifest& manifest, const std::string& run_dir,
                   const StopTargets& stop) {
  if (manifest.task == "pretrain") return pretrain_teacher(manifest, run_dir, stop);
  if (manifest.task == "distill") return distill_student(manifest, run_dir, stop);
  return proxy_pretrain(manifest, run_dir);
}

// ------------------------------------------------------------ ablation grid

RunManifest override_manifest(const RunManifest& base, const std::string& key,
                              const std::string& json_value) {
  json j = json::parse(manifest_to_json(base));
  json val;
  try {
    val = json::parse(json_value);
  } catch (const json::exception&) {
    val = json_value;  // bare strings are convenient for axis values
  }
  json* cur = &j;
  std::istringstream is(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(is, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
  (*cur)[parts.back()] = val;
  return manifest_from_json(j.dump());  // fail-closed validation of the key path
}

GridSpec grid_from_json(const std::string& js) {
  json j;
  try {
    j = json::parse(js);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid spec is not valid JSON: ") + e.what());
  }
  GridSpec spec;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "base" && it.key() != "seeds" && it.key() != "axes")
      throw ConfigError("unknown grid key '" + it.key() + "'");
  }
  if (!j.contains("base")) throw ConfigError("grid spec needs a 'base' manifest");
  spec.base = manifest_from_json(j.at("base").dump());
  if (j.contains("seeds"))
    for (const auto& s : j.at("seeds")) spec.seeds.push_back(s.get<uint64_t>());
  if (j.contains("axes")) {
    for (const auto& a : j.at("axes")) {
      GridAxis axis;
      axis.key = a.at("key").get<std::string>();
      for (const auto& v : a.at("values")) axis.values.push_back(v.dump());
      if (axis.values.empty()) throw ConfigError("grid axis '" + axis.key + "' has no values");
      spec.axes.push_back(std::move(axis));
    }
  }
  return spec;
}

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '=' ||
            c == ',')
               ? c
               : '_';
  return out;
}

}  // namespace

std::vector<CellOutcome> run_ablation_grid(const GridSpec& spec, const std::string& out_dir) {
  ensure_dir(out_dir);
  std::vector<CellOutcome> rows;

  // cartesian product of axis values
  std::vector<std::vector<size_t>> cells;
  std::vector<size_t> idx(spec.axes.size(), 0);
  if (spec.axes.empty()) {
    cells.push_back({});
  } else {
    while (true) {
      cells.push_back(idx);
      size_t a = 0;
      for (; a < idx.size(); ++a) {
        if (++idx[a] < spec.axes[a].values.size()) break;
        idx[a] = 0;
      }
      if (a == idx.size()) break;
    }
  }

  for (const auto& cell : cells) {
    RunManifest m = spec.base;
    std::string cell_id;
    for (size_t a = 0; a < cell.size(); ++a) {
      const GridAxis& axis = spec.axes[a];
      const std::string& v = axis.values[cell[a]];
      m = override_manifest(m, axis.key, v);
      if (!cell_id.empty()) cell_id += ",";
      std::string vv = v;
      if (vv.size() >= 2 && vv.front() == '"' && vv.back() == '"')
        vv = vv.substr(1, vv.size() - 2);
      cell_id += axis.key + "=" + vv;
    }
    if (cell_id.empty()) cell_id = "base";

    for (uint64_t seed : spec.seeds) {
      CellOutcome row;
      row.cell_id = cell_id;
      row.seed = seed;
      RunManifest cm = m;
      cm.seed = seed;
      std::string dir = out_dir + "/cells/" + sanitize(cell_id) + "/seed" + std::to_string(seed);
      try {
        RunResult r = run_task(cm, dir);
        row.ok = true;
        row.tr1 = r.final_eval.tr1;
        row.ir1 = r.final_eval.ir1;
        row.caption_em = r.final_eval.caption_em;
        row.caption_f1 = r.final_eval.caption_f1;
        row.l_itc = r.l_itc;
        row.l_itm = r.l_itm;
        row.l_lm = r.l_lm;
        row.l_total = r.l_total;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }

  {
    std::ofstream f(out_dir + "/results.csv");
    f << results_csv(rows);
  }
  {
    std::ofstream f(out_dir + "/summary.csv");
    f << summary_csv(rows);
  }
  return rows;
}

std::string results_csv(const std::vector<CellOutcome>& rows) {
  std::ostringstream os;
  os << "cell_id,seed,tr1,ir1,caption_exact,caption_f1,l_itc,l_itm,l_lm,l_total,status,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    os << r.cell_id << "," << r.seed << "," << r.tr1 << "," << r.ir1 << "," << r.caption_em << ","
       << r.caption_f1 << "," << r.l_itc << "," << r.l_itm << "," << r.l_lm << "," << r.l_total
       << "," << (r.ok ? "ok" : "failed") << "," << err << "\n";
  }
  return os.str();
}

std::string summary_csv(const std::vector<CellOutcome>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const CellOutcome*>> by_cell;
  for (const auto& r : rows) {
    if (!by_cell.count(r.cell_id)) order.push_back(r.cell_id);
    by_cell[r.cell_id].push_back(&r);
  }
  auto mean_sd = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= v.empty() ? 1 : (double)v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    s = v.size() > 1 ? std::sqrt(s / ((double)v.size() - 1)) : 0.0;
    return std::pair(m, s);
  };
  std::ostringstream os;
  os << "cell_id,n_ok,tr1_mean,tr1_sd,ir1_mean,ir1_sd,caption_exact_mean,caption_exact_sd,"
        "caption_f1_mean,caption_f1_sd\n";
  for (const auto& cell : order) {
    std::vector<double> tr1, ir1, em, f1;
    for (const CellOutcome* r : by_cell[cell]) {
      if (!r->ok) continue;
      tr1.push_back(r->tr1);
      ir1.push_back(r->ir1);
      em.push_back(r->caption_em);
      f1.push_back(r->caption_f1);
    }
    auto [trm, trs] = mean_sd(tr1);
    auto [irm, irs] = mean_sd(ir1);
    auto [emm, ems] = mean_sd(em);
    auto [f1m, f1s] = mean_sd(f1);
    os << cell << "," << tr1.size() << "," << trm << "," << trs << "," << irm << "," << irs << ","
       << emm << "," << ems << "," << f1m << "," << f1s << "\n";
  }
  return os.str();
}

}  // namespace medlab
