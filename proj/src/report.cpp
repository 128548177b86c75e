#include "medlab/report.hpp"

#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace medlab {

using nlohmann::json;

RunArtifacts load_run(const std::string& run_dir) {
  RunArtifacts a;
  a.manifest = parse_config(run_dir + "/manifest.json");
  std::ifstream f(run_dir + "/final_metrics.json");
  if (!f.good()) throw IntegrityError("run dir '" + run_dir + "' has no final_metrics.json");
  json j = json::parse(std::string((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>()));
  a.tr1 = j.value("eval_tr1", 0.0);
  a.tr5 = j.value("eval_tr5", 0.0);
  a.ir1 = j.value("eval_ir1", 0.0);
  a.ir5 = j.value("eval_ir5", 0.0);
  a.caption_em = j.value("eval_caption_em", 0.0);
  a.caption_f1 = j.value("eval_caption_f1", 0.0);
  a.l_total = j.value("l_total", 0.0);
  a.steps_run = j.value("steps_run", int64_t{0});
  return a;
}

namespace {

std::string human(int64_t v) {
  std::ostringstream os;
  os << std::setprecision(3);
  if (v >= 1000000000)
    os << static_cast<double>(v) / 1e9 << "G";
  else if (v >= 1000000)
    os << static_cast<double>(v) / 1e6 << "M";
  else if (v >= 1000)
    os << static_cast<double>(v) / 1e3 << "K";
  else
    os << v;
  return os.str();
}

std::string pct1(double ratio) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * ratio << "%";
  return os.str();
}

}  // namespace

std::string render_cost_table(const std::vector<CostReport>& reports) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"component", "params", "flops", "convention", "latency_ms"});
  for (const auto& r : reports) {
    std::ostringstream lat;
    if (r.wallclock_ms >= 0)
      lat << std::fixed << std::setprecision(2) << r.wallclock_ms;
    else
      lat << "-";
    rows.push_back({r.component, human(r.params), human(r.flops), r.convention, lat.str()});
  }
  std::vector<size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c)
      os << std::left << std::setw(static_cast<int>(width[c]) + 2) << row[c];
    os << "\n";
  }
  return os.str();
}

std::string cost_report_json(const CostReport& r) {
  json j;
  j["component"] = r.component;
  j["params"] = r.params;
  j["flops"] = r.flops;
  j["convention"] = r.convention;
  if (r.wallclock_ms >= 0) j["wallclock_ms"] = r.wallclock_ms;
  j["hardware"] = r.hardware;
  json pb = json::object();
  for (auto& [k, v] : r.param_breakdown) pb[k] = v;
  j["param_breakdown"] = pb;
  j["flop_terms"] = {{"patch", r.flop_terms.patch},
                     {"proj", r.flop_terms.proj},
                     {"ffn", r.flop_terms.ffn},
                     {"attn_quad", r.flop_terms.attn_quad}};
  return j.dump(2);
}

std::string render_summary(const RunArtifacts& run, const std::optional<RunArtifacts>& teacher) {
  std::ostringstream os;
  auto params_of = [](const RunArtifacts& a) {
    return count_params(a.manifest.model, Component::All);
  };
  auto flops_of = [](const RunArtifacts& a) {
    return count_flops(a.manifest.model, 0, a.manifest.model.text.max_len, Component::All,
                       FlopConvention::MacX2);
  };

  os << "run: " << run.manifest.task << " seed=" << run.manifest.seed
     << " steps=" << run.steps_run << "\n";
  os << "params: " << human(params_of(run)) << "  flops(mac_x2): " << human(flops_of(run))
     << "\n";
  os << std::fixed << std::setprecision(4);
  os << "TR@1 " << run.tr1 << "  IR@1 " << run.ir1 << "  TR@5 " << run.tr5 << "  IR@5 " << run.ir5
     << "\n";
  os << "caption exact-match " << run.caption_em << "  token-F1 " << run.caption_f1 << "\n";
  if (!teacher) return os.str();

  const RunArtifacts& t = *teacher;
  double pr = static_cast<double>(params_of(run)) / static_cast<double>(params_of(t));
  double fr = static_cast<double>(flops_of(run)) / static_cast<double>(flops_of(t));
  os << "\nversus teacher (" << t.manifest.task << " seed=" << t.manifest.seed << "):\n";
  os << "  parameters: " << human(params_of(run)) << " / " << human(params_of(t)) << " = "
     << pct1(pr) << "\n";
  os << "  flops:      " << human(flops_of(run)) << " / " << human(flops_of(t)) << " = "
     << pct1(fr) << "\n";
  auto retention = [&](const char* name, double s, double tv) {
    os << "  " << name << " retention: " << (tv > 0 ? pct1(s / tv) : std::string("-")) << " ("
       << std::setprecision(4) << s << " vs " << tv << ")\n"
       << std::setprecision(4);
  };
  retention("TR@1", run.tr1, t.tr1);
  retention("IR@1", run.ir1, t.ir1);
  retention("caption-EM", run.caption_em, t.caption_em);
  retention("caption-F1", run.caption_f1, t.caption_f1);
  return os.str();
}

}  // namespace medlab
