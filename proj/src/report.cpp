#include <cstdio>
#include <fstream>
#include <sstream>

#include "mrvi/errors.hpp"
#include "mrvi/experiment.hpp"

namespace mrvi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string cell(const std::optional<double>& v) { return v ? num(*v) : "N/A"; }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw IoError("short write to " + p.string());
}

}  // namespace

json report_to_json(const EvalReport& r) {
  const MetricSummary& m = r.metrics;
  json per = json::array(), pred_area = json::array(), gt_area = json::array();
  for (const auto& v : m.d_per_expert) per.push_back(opt(v));
  for (const auto& v : r.mean_pred_area) pred_area.push_back(opt(v));
  for (double v : r.mean_gt_area) gt_area.push_back(v);
  return {{"model", r.model},
          {"mode", r.mode},
          {"n_samples", r.n_samples},
          {"images", r.images},
          {"experts", r.experts},
          {"metrics",
           {{"ged", opt(m.ged)},
            {"d_pp", opt(m.d_pp)},
            {"d_pa", opt(m.d_pa)},
            {"d_aa", opt(m.d_aa)},
            {"d_soft", opt(m.d_soft)},
            {"d_max", opt(m.d_max)},
            {"d_match", opt(m.d_match)},
            {"d_per_expert", per},
            {"d_mean", opt(m.d_mean)}}},
          {"ged_exclusive_pairs",
           {{"ged", opt(m.ged_exclusive)}, {"d_pp", opt(m.d_pp_exclusive)}, {"d_pa", opt(m.d_pa)},
            {"d_aa", opt(m.d_aa_exclusive)}}},
          {"areas", {{"predicted", pred_area}, {"annotated", gt_area}}},
          {"diversity", {{"ambiguous_images", r.ambiguous_images}, {"diverse_fraction", r.diverse_fraction}}}};
}

std::string report_to_csv(const EvalReport& r) {
  const MetricSummary& m = r.metrics;
  std::ostringstream os;
  os << "ged,d_pp,d_pa,d_aa,d_soft,d_max,d_match";
  for (std::size_t e = 0; e < m.d_per_expert.size(); ++e) os << ",d_A" << e;
  os << ",d_mean\n";
  os << cell(m.ged) << ',' << cell(m.d_pp) << ',' << cell(m.d_pa) << ',' << cell(m.d_aa) << ',' << cell(m.d_soft)
     << ',' << cell(m.d_max) << ',' << cell(m.d_match);
  for (const auto& v : m.d_per_expert) os << ',' << cell(v);
  os << ',' << cell(m.d_mean) << '\n';
  return os.str();
}

void write_report(const fs::path& dir, const EvalReport& r) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "metrics.json", report_to_json(r).dump(2) + "\n");
  write_text(dir / "metrics.csv", report_to_csv(r));
}

std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,recon,class,seg,kl_z,kl_tau,total,val_total\n";
  for (const auto& h : history)
    os << h.epoch << ',' << num(h.train.recon) << ',' << num(h.train.class_ce) << ',' << num(h.train.seg_ce) << ','
       << num(h.train.kl_z) << ',' << num(h.train.kl_tau) << ',' << num(h.train.total) << ',' << num(h.val.total)
       << '\n';
  return os.str();
}

}  // namespace mrvi
