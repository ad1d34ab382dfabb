#include "physnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "physnet/errors.hpp"
#include "physnet/tensor_io.hpp"

namespace physnet {

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson needs equal lengths");
  if (a.size() < 2) throw ValidationError("pearson needs at least two values");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0) || !(sbb > 0)) throw DegenerateSignalError("correlation with a constant sequence is undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Metrics error_metrics(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) {
    throw ValidationError("metrics: " + std::to_string(pred.size()) + " predictions vs " +
                          std::to_string(truth.size()) + " truths");
  }
  if (pred.size() < 2) throw ValidationError("metrics need at least two pairs");
  const double n = static_cast<double>(pred.size());
  double sum = 0, sq = 0, ab = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    sum += e;
    sq += e * e;
    ab += std::abs(e);
  }
  Metrics m;
  m.count = pred.size();
  const double mean = sum / n;
  double var = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) var += (pred[i] - truth[i] - mean) * (pred[i] - truth[i] - mean);
  m.sd = std::sqrt(var / n);
  m.rmse = std::sqrt(sq / n);
  m.mae = ab / n;
  try {
    m.r = pearson(pred, truth);
  } catch (const DegenerateSignalError&) {
    m.r.reset();
  }
  return m;
}

Metrics metrics(std::span<const double> pred, std::span<const double> truth) {
  Metrics m = error_metrics(pred, truth);
  if (!m.r) throw DegenerateSignalError("R is undefined for constant inputs");
  return m;
}

namespace {

double mean_nearest_offset_ms(const std::vector<double>& pred, const std::vector<double>& truth) {
  double total = 0;
  for (double t : pred) {
    const auto it = std::lower_bound(truth.begin(), truth.end(), t);
    double best = 1e300;
    if (it != truth.end()) best = *it - t;
    if (it != truth.begin()) best = std::min(best, t - *(it - 1));
    total += best;
  }
  return 1000.0 * total / static_cast<double>(pred.size());
}

ClipOutcome evaluate_pair(const SignalPair& pair, const EvalOptions& options) {
  ClipOutcome c;
  c.id = pair.id;
  if (pair.prediction.size() != pair.truth.size()) {
    throw ValidationError("prediction has " + std::to_string(pair.prediction.size()) + " samples, truth " +
                          std::to_string(pair.truth.size()));
  }
  const auto pred = run_pipeline(pair.prediction, options.prediction);
  const auto truth = run_pipeline(pair.truth, options.truth);
  c.hr_pred = pred.hr_bpm;
  c.hr_truth = truth.hr_bpm;
  c.waveform_r = pearson(pred.processed.samples, truth.processed.samples);
  c.peak_offset_ms = mean_nearest_offset_ms(pred.ibi.peak_times, truth.ibi.peak_times);
  if (pair.truth.duration() >= options.hrv_min_duration_s) {
    // HRV failures leave the HR result intact.
    try {
      c.hrv_pred = hrv_features(pred.ibi);
      c.hrv_truth = hrv_features(truth.ibi);
    } catch (const ValidationError& e) {
      c.hrv_pred.reset();
      c.hrv_truth.reset();
      std::fprintf(stderr, "clip %s: HRV skipped: %s\n", c.id.c_str(), e.what());
    }
  }
  return c;
}

nlohmann::json metrics_json(const std::optional<Metrics>& m) {
  if (!m) return nullptr;
  nlohmann::json j = {{"sd", m->sd}, {"rmse", m->rmse}, {"mae", m->mae}, {"n", m->count}};
  j["r"] = m->r ? nlohmann::json(*m->r) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json hrv_json(const std::optional<HrvFeatures>& h) {
  if (!h) return nullptr;
  return {{"lf_nu", h->lf_nu}, {"hf_nu", h->hf_nu}, {"lf_hf", finite_or_null(h->lf_hf_ratio)}, {"rf_hz", h->rf_hz}};
}

}  // namespace

MetricReport evaluate_signals(const std::vector<SignalPair>& pairs, const EvalOptions& options) {
  MetricReport report;
  report.clips_total = pairs.size();
  std::vector<double> hr_p, hr_t, rf_p, rf_t, lf_p, lf_t, hf_p, hf_t, ratio_p, ratio_t;
  double r_sum = 0, offset_sum = 0;
  for (const auto& pair : pairs) {
    ClipOutcome c;
    try {
      c = evaluate_pair(pair, options);
    } catch (const ValidationError& e) {
      c = ClipOutcome{};
      c.id = pair.id;
      c.error = e.what();
      std::fprintf(stderr, "clip %s excluded: %s\n", pair.id.c_str(), e.what());
      report.clips.push_back(std::move(c));
      continue;
    }
    ++report.clips_used;
    hr_p.push_back(c.hr_pred);
    hr_t.push_back(c.hr_truth);
    r_sum += c.waveform_r;
    offset_sum += c.peak_offset_ms;
    if (c.hrv_pred && c.hrv_truth) {
      ++report.hrv_clips;
      rf_p.push_back(c.hrv_pred->rf_hz);
      rf_t.push_back(c.hrv_truth->rf_hz);
      lf_p.push_back(c.hrv_pred->lf_nu);
      lf_t.push_back(c.hrv_truth->lf_nu);
      hf_p.push_back(c.hrv_pred->hf_nu);
      hf_t.push_back(c.hrv_truth->hf_nu);
      if (std::isfinite(c.hrv_pred->lf_hf_ratio) && std::isfinite(c.hrv_truth->lf_hf_ratio)) {
        ratio_p.push_back(c.hrv_pred->lf_hf_ratio);
        ratio_t.push_back(c.hrv_truth->lf_hf_ratio);
      }
    }
    report.clips.push_back(std::move(c));
  }
  if (report.clips_used < 2) {
    throw ValidationError("evaluation needs at least two usable clips, got " + std::to_string(report.clips_used));
  }
  report.hr = error_metrics(hr_p, hr_t);
  report.mean_waveform_r = r_sum / static_cast<double>(report.clips_used);
  report.mean_peak_offset_ms = offset_sum / static_cast<double>(report.clips_used);
  if (rf_p.size() >= 2) {
    report.rf = error_metrics(rf_p, rf_t);
    report.lf = error_metrics(lf_p, lf_t);
    report.hf = error_metrics(hf_p, hf_t);
  }
  if (ratio_p.size() >= 2) report.lf_hf = error_metrics(ratio_p, ratio_t);
  return report;
}

MetricReport evaluate(PhysNet<float>& model, const std::vector<TrainingSample>& clips, const EvalOptions& options,
                      const std::vector<std::string>& ids) {
  std::vector<SignalPair> pairs;
  pairs.reserve(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    SignalPair p;
    p.id = i < ids.size() ? ids[i] : std::to_string(i);
    p.prediction = infer(model, clips[i].clip);
    p.truth = clips[i].signal;
    pairs.push_back(std::move(p));
  }
  return evaluate_signals(pairs, options);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["HR"] = metrics_json(hr);
  j["RF"] = metrics_json(rf);
  j["LF"] = metrics_json(lf);
  j["HF"] = metrics_json(hf);
  j["LF_HF"] = metrics_json(lf_hf);
  j["mean_waveform_r"] = mean_waveform_r;
  j["mean_peak_offset_ms"] = mean_peak_offset_ms;
  j["clips_total"] = clips_total;
  j["clips_used"] = clips_used;
  j["hrv_clips"] = hrv_clips;
  nlohmann::json excluded = nlohmann::json::array(), per_clip = nlohmann::json::array();
  for (const auto& c : clips) {
    if (c.error) {
      excluded.push_back({{"id", c.id}, {"reason", *c.error}});
      continue;
    }
    per_clip.push_back({{"id", c.id},
                        {"hr_pred", c.hr_pred},
                        {"hr_truth", c.hr_truth},
                        {"waveform_r", c.waveform_r},
                        {"peak_offset_ms", c.peak_offset_ms},
                        {"hrv_pred", hrv_json(c.hrv_pred)},
                        {"hrv_truth", hrv_json(c.hrv_truth)}});
  }
  j["excluded"] = excluded;
  j["clips"] = per_clip;
  return j;
}

void write_report_json(const std::filesystem::path& path, const MetricReport& report) {
  write_file_atomic(path, report.to_json().dump(2) + "\n");
}

void write_clip_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ostringstream out;
  out.precision(9);
  out << "id,hr_pred,hr_truth,waveform_r,peak_offset_ms,lf_nu_pred,lf_nu_truth,rf_pred,rf_truth,error\n";
  for (const auto& c : report.clips) {
    out << c.id << ',';
    if (c.error) {
      std::string reason = *c.error;
      std::replace(reason.begin(), reason.end(), ',', ';');
      out << ",,,,,,,," << reason << '\n';
      continue;
    }
    out << c.hr_pred << ',' << c.hr_truth << ',' << c.waveform_r << ',' << c.peak_offset_ms << ',';
    if (c.hrv_pred && c.hrv_truth) {
      out << c.hrv_pred->lf_nu << ',' << c.hrv_truth->lf_nu << ',' << c.hrv_pred->rf_hz << ',' << c.hrv_truth->rf_hz;
    } else {
      out << ",,,";
    }
    out << ",\n";
  }
  write_file_atomic(path, out.str());
}

}  // namespace physnet
