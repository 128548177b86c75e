// medlab - desk-scale vision-language pretraining and distillation lab.
//
// Subcommands: count, pretrain-teacher, proxy-pretrain, distill, ablate,
// eval, report, export-data. Every training subcommand takes a manifest
// file; --seed/--mode/--out override the manifest in place.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "medlab/report.hpp"
#include "medlab/trainer.hpp"

using namespace medlab;

namespace {

struct CommonOpts {
  std::string config;
  std::string out = "runs/out";
  int64_t seed = -1;
  std::string mode;
};

void add_common(CLI::App* cmd, CommonOpts& c, bool needs_config = true) {
  if (needs_config)
    cmd->add_option("--config", c.config, "manifest JSON file")->required();
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "override manifest seed");
  cmd->add_option("--mode", c.mode, "override numeric mode: train|verify")
      ->check(CLI::IsMember({"train", "verify"}));
}

RunManifest load_manifest(const CommonOpts& c) {
  RunManifest m = parse_config(c.config);
  if (c.seed >= 0) m.seed = static_cast<uint64_t>(c.seed);
  if (c.mode == "train") m.mode = DType::F32;
  if (c.mode == "verify") m.mode = DType::F64;
  return m;
}

void print_eval(const RunResult& r) {
  std::cout << "steps_run=" << r.steps_run << " TR@1=" << r.final_eval.tr1
            << " IR@1=" << r.final_eval.ir1 << " caption_em=" << r.final_eval.caption_em
            << " caption_f1=" << r.final_eval.caption_f1 << "\n"
            << "checkpoint: " << r.checkpoint_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale vision-language pretraining + distillation lab"};
  app.require_subcommand(1);

  // ---- count
  CommonOpts count_opts;
  std::string component = "all", convention = "mac_x2";
  int64_t resolution = 0, text_len = 0;
  int measure_reps = 0;
  auto* count_cmd = app.add_subcommand("count", "parameter/FLOP accounting for a config");
  add_common(count_cmd, count_opts);
  count_cmd->add_option("--component", component, "vision|text|decoder|heads|all")
      ->check(CLI::IsMember({"vision", "text", "decoder", "heads", "all"}));
  count_cmd->add_option("--resolution", resolution, "image resolution (default: config)");
  count_cmd->add_option("--text-len", text_len, "text length (default: config max_len)");
  count_cmd->add_option("--convention", convention, "mac_x2|linear_macs")
      ->check(CLI::IsMember({"mac_x2", "linear_macs"}));
  count_cmd->add_option("--measure", measure_reps, "measure wall-clock over N repetitions");

  // ---- training subcommands
  CommonOpts pre_opts, proxy_opts, distill_opts;
  double stop_tr1 = -1, stop_em = -1;
  auto* pre_cmd = app.add_subcommand("pretrain-teacher", "minimize the pretraining objective");
  add_common(pre_cmd, pre_opts);
  pre_cmd->add_option("--stop-tr1", stop_tr1, "early-stop eval TR@1 target");
  pre_cmd->add_option("--stop-caption-em", stop_em, "early-stop caption exact-match target");

  auto* proxy_cmd = app.add_subcommand("proxy-pretrain", "unimodal proxy pretraining");
  add_common(proxy_cmd, proxy_opts);

  auto* distill_cmd = app.add_subcommand("distill", "train a student against a frozen teacher");
  add_common(distill_cmd, distill_opts);

  // ---- ablate
  std::string grid_path, ablate_out = "runs/grid";
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  ablate_cmd->add_option("--grid", grid_path, "grid spec JSON")->required();
  ablate_cmd->add_option("--out", ablate_out, "output directory");

  // ---- eval
  std::string eval_ckpt, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "retrieval + caption metrics from a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--out", eval_out, "write metrics JSON here");

  // ---- report
  std::string report_run, report_teacher, report_out;
  auto* report_cmd = app.add_subcommand("report", "cost table and retention summary");
  report_cmd->add_option("--run", report_run, "run directory")->required();
  report_cmd->add_option("--teacher", report_teacher, "teacher run directory for comparison");
  report_cmd->add_option("--out", report_out, "write summary here");

  // ---- export-data
  CommonOpts export_opts;
  std::string export_split = "train";
  auto* export_cmd = app.add_subcommand("export-data", "dump rendered pairs + JSON index");
  add_common(export_cmd, export_opts);
  export_cmd->add_option("--split", export_split, "train|eval")
      ->check(CLI::IsMember({"train", "eval"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*count_cmd) {
      RunManifest m = load_manifest(count_opts);
      Component comp = component == "vision"    ? Component::Vision
                       : component == "text"    ? Component::Text
                       : component == "decoder" ? Component::Decoder
                       : component == "heads"   ? Component::Heads
                                                : Component::All;
      FlopConvention conv =
          convention == "mac_x2" ? FlopConvention::MacX2 : FlopConvention::LinearMacs;
      int64_t tl = text_len > 0 ? text_len : m.model.text.max_len;
      double ms = -1;
      if (measure_reps > 0) {
        MEDModel model = MEDModel::build(m.model, m.mode, Rng(m.seed));
        InferenceSpec spec;
        spec.component = comp == Component::Text ? Component::Text : Component::Vision;
        spec.text_len = tl;
        ms = measure_inference_ms(model, spec, measure_reps);
      }
      CostReport r = make_cost_report(m.model, comp, resolution, tl, conv, ms);
      std::cout << render_cost_table({r});
      std::filesystem::create_directories(count_opts.out);
      std::ofstream f(count_opts.out + "/cost_report.json");
      f << cost_report_json(r) << "\n";
    } else if (*pre_cmd) {
      RunManifest m = load_manifest(pre_opts);
      StopTargets stop;
      stop.tr1 = stop_tr1;
      stop.caption_em = stop_em;
      print_eval(pretrain_teacher(m, pre_opts.out, stop));
    } else if (*proxy_cmd) {
      RunManifest m = load_manifest(proxy_opts);
      RunResult r = proxy_pretrain(m, proxy_opts.out);
      std::cout << "steps_run=" << r.steps_run << " metric=" << r.proxy_metric << "\n"
                << "checkpoint: " << r.checkpoint_path << "\n";
    } else if (*distill_cmd) {
      RunManifest m = load_manifest(distill_opts);
      print_eval(distill_student(m, distill_opts.out));
    } else if (*ablate_cmd) {
      std::ifstream f(grid_path);
      if (!f.good()) throw ConfigError("cannot read grid spec '" + grid_path + "'");
      GridSpec spec = grid_from_json(std::string((std::istreambuf_iterator<char>(f)),
                                                 std::istreambuf_iterator<char>()));
      auto rows = run_ablation_grid(spec, ablate_out);
      std::cout << results_csv(rows) << "\n" << summary_csv(rows);
    } else if (*eval_cmd) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      MEDModel m = MEDModel::build(ck.manifest.model, ck.manifest.mode, Rng(0));
      restore_model(m, ck);
      Vocabulary vocab;
      auto [train_split, eval_split] = generate_dataset(ck.manifest.dataset, vocab);
      RetrievalResult r = retrieval_eval(m, eval_split, {1, 5});
      CaptionResult c = caption_eval(m, eval_split, vocab, ck.manifest.dataset.prompt);
      std::ostringstream js;
      js << "{\"tr1\": " << r.tr.at(1) << ", \"tr5\": " << r.tr.at(5)
         << ", \"ir1\": " << r.ir.at(1) << ", \"ir5\": " << r.ir.at(5)
         << ", \"caption_em\": " << c.exact_match << ", \"caption_f1\": " << c.token_f1 << "}";
      std::cout << js.str() << "\n";
      if (!eval_out.empty()) {
        std::filesystem::create_directories(
            std::filesystem::path(eval_out).parent_path().string().empty()
                ? "."
                : std::filesystem::path(eval_out).parent_path().string());
        std::ofstream f(eval_out);
        f << js.str() << "\n";
      }
    } else if (*report_cmd) {
      RunArtifacts run = load_run(report_run);
      std::optional<RunArtifacts> teacher;
      if (!report_teacher.empty()) teacher = load_run(report_teacher);
      std::string summary = render_summary(run, teacher);
      std::cout << summary;
      if (!report_out.empty()) {
        std::ofstream f(report_out);
        f << summary;
      }
    } else if (*export_cmd) {
      RunManifest m = load_manifest(export_opts);
      Vocabulary vocab;
      auto [train_split, eval_split] = generate_dataset(m.dataset, vocab);
      export_pairs(export_split == "train" ? train_split : eval_split, export_opts.out);
      std::cout << "exported " << export_split << " split to " << export_opts.out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
