#include "cseg/report.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace cseg {
namespace {

using nlohmann::ordered_json;

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string csv_row(const CaseMetrics& m) {
  std::string s = m.case_id;
  for (double v : {m.myo_dice_pct, m.myo_voldif_mm3}) s += "," + fixed2(v);
  s += "," + (m.myo_hsd_mm ? fixed2(*m.myo_hsd_mm) : std::string("NA"));
  for (double v : {m.inf_dice_pct, m.inf_voldif_mm3, m.inf_ratio_pts, m.nr_dice_pct, m.nr_voldif_mm3, m.nr_ratio_pts})
    s += "," + fixed2(v);
  return s + "\n";
}

ordered_json row_json(const CaseMetrics& m) {
  ordered_json j;
  j["case_id"] = m.case_id;
  j["myo_dice"] = m.myo_dice_pct;
  j["myo_voldif_mm3"] = m.myo_voldif_mm3;
  j["myo_hsd_mm"] = m.myo_hsd_mm ? ordered_json(*m.myo_hsd_mm) : ordered_json(nullptr);
  j["inf_dice"] = m.inf_dice_pct;
  j["inf_voldif_mm3"] = m.inf_voldif_mm3;
  j["inf_ratio_pts"] = m.inf_ratio_pts;
  j["nr_dice"] = m.nr_dice_pct;
  j["nr_voldif_mm3"] = m.nr_voldif_mm3;
  j["nr_ratio_pts"] = m.nr_ratio_pts;
  j["degenerate_ratio"] = m.degenerate_ratio;
  return j;
}

}  // namespace

std::string report_csv(const MetricsReport& report) {
  std::string out =
      "case_id,myo_dice,myo_voldif_mm3,myo_hsd_mm,inf_dice,inf_voldif_mm3,inf_ratio_pts,nr_dice,nr_voldif_mm3,"
      "nr_ratio_pts\n";
  for (const auto& r : report.rows) out += csv_row(r);
  out += csv_row(report.aggregate);
  return out;
}

std::string report_json(const MetricsReport& report) {
  ordered_json j;
  j["cases"] = ordered_json::array();
  for (const auto& r : report.rows) j["cases"].push_back(row_json(r));

  const CaseMetrics& a = report.aggregate;
  ordered_json agg = row_json(a);
  agg.erase("case_id");
  agg["case_count"] = report.rows.size();
  agg["hsd_evaluated"] = report.rows.size() - report.hsd_excluded;
  agg["hsd_excluded"] = report.hsd_excluded;
  agg["Myocardium"] = {{"Dice(%)", a.myo_dice_pct},
                       {"VolDif(mm3)", a.myo_voldif_mm3},
                       {"HSD(mm)", a.myo_hsd_mm ? ordered_json(*a.myo_hsd_mm) : ordered_json(nullptr)}};
  agg["Infarction"] = {{"Dice(%)", a.inf_dice_pct}, {"VolDif(mm3)", a.inf_voldif_mm3}, {"Ratio(%)", a.inf_ratio_pts}};
  agg["NoReflow"] = {{"Dice(%)", a.nr_dice_pct}, {"VolDif(mm3)", a.nr_voldif_mm3}, {"Ratio(%)", a.nr_ratio_pts}};
  j["aggregate"] = std::move(agg);

  j["excluded_cases"] = ordered_json::array();
  for (const auto& e : report.excluded) j["excluded_cases"].push_back({{"case_id", e.case_id}, {"reason", e.reason}});
  return j.dump(2) + "\n";
}

void write_report(const MetricsReport& report, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  std::string text;
  if (ext == ".csv")
    text = report_csv(report);
  else if (ext == ".json")
    text = report_json(report);
  else
    throw std::invalid_argument("report path must end in .csv or .json: " + path.string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace cseg
