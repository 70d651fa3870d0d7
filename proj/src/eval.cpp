#include "pulsegrid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pulsegrid/stblock.hpp"

namespace pulsegrid {

namespace {

using nlohmann::json;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool all_equal(const std::vector<double>& v) {
  for (double x : v)
    if (x != v.front()) return false;
  return true;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Reference information for one source, out of the manifest's extra block.
struct GtRecord {
  std::string gt_file;  // empty when the record carries no series
  double hr_bpm = kNan;
};

std::map<std::string, GtRecord> gt_by_source(const Manifest& manifest) {
  std::map<std::string, GtRecord> out;
  if (manifest.extra.empty()) return out;
  json doc;
  try {
    doc = json::parse(manifest.extra);
  } catch (const json::exception&) {
    return out;
  }
  if (!doc.is_object() || !doc.contains("videos") || !doc["videos"].is_array()) return out;
  for (const json& video : doc["videos"]) {
    try {
      GtRecord rec;
      if (video.contains("gt_file")) rec.gt_file = video.at("gt_file").get<std::string>();
      if (video.contains("hr_bpm")) rec.hr_bpm = video.at("hr_bpm").get<double>();
      out[video.at("source").get<std::string>()] = rec;
    } catch (const json::exception&) {
      // a record without a usable source field cannot be matched to a clip
    }
  }
  return out;
}

std::vector<double> slice(const std::vector<double>& v, std::size_t begin, std::size_t count) {
  return {v.begin() + static_cast<std::ptrdiff_t>(begin),
          v.begin() + static_cast<std::ptrdiff_t>(begin + count)};
}

}  // namespace

Waveform infer_rppg(const Tensor4& clip, RppgEncoder& model) {
  return spatial_average(model.forward(clip, /*training=*/false));
}

EvalReport evaluate(const std::filesystem::path& manifest_path, RppgEncoder& model,
                    double window_s) {
  if (!std::isfinite(window_s) || window_s <= 0.0)
    throw Error("evaluate: window length must be positive");
  const Manifest manifest = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  const double fs = manifest.frame_rate;
  const auto win = static_cast<std::size_t>(std::llround(window_s * fs));
  if (win < 2) throw Error("evaluate: window shorter than two samples");
  const std::map<std::string, GtRecord> refs = gt_by_source(manifest);

  EvalReport report;
  report.window_s = window_s;
  report.config_json = model.config().to_json();

  for (const ManifestEntry& entry : manifest.entries) {
    const StoredClip clip = read_clip(base / entry.file);

    VideoEval video;
    video.source = entry.source;
    video.file = entry.file;
    video.rppg = infer_rppg(clip.video, model);

    // HRV needs a clean beat sequence; any failed precondition along the
    // band-pass / peak / interval chain just leaves the report absent.
    try {
      const std::vector<std::size_t> peaks = detect_peaks(bandpass(video.rppg));
      video.hrv = hrv_metrics(peaks, fs);
    } catch (const Error&) {
    }

    const auto ref_it = refs.find(entry.source);
    const GtRecord* ref = ref_it == refs.end() ? nullptr : &ref_it->second;
    if (ref == nullptr || (ref->gt_file.empty() && !(std::isfinite(ref->hr_bpm) && ref->hr_bpm > 0.0))) {
      video.gt_missing = true;
      report.videos.push_back(std::move(video));
      continue;
    }

    // Reference series resampled onto the clip's frame clock, when one
    // exists. Clips cut from the middle of a video carry their start time in
    // offset_s; shifting the series puts its clock on the clip's frame 0.
    std::vector<double> gt_samples;
    if (!ref->gt_file.empty()) {
      TimeSeries series = load_time_series(base / ref->gt_file);
      for (double& t : series.t) t -= entry.offset_s;
      gt_samples = resample_to_frames(series, fs, video.rppg.samples.size()).samples;
    }

    const std::size_t n_win = video.rppg.samples.size() / win;
    for (std::size_t wi = 0; wi < n_win; ++wi) {
      WindowRow row;
      row.source = entry.source;
      row.file = entry.file;
      row.window = wi;
      try {
        const Waveform pred{slice(video.rppg.samples, wi * win, win), fs};
        const BandPSD pred_psd = compute_psd(pred);
        row.hr_pred = estimate_hr(pred_psd);
        if (gt_samples.empty()) {
          row.hr_true = ref->hr_bpm;
        } else {
          const Waveform truth{slice(gt_samples, wi * win, win), fs};
          row.hr_true = estimate_hr(compute_psd(truth));
        }
        row.ipr = irrelevant_power_ratio(pred_psd, row.hr_true);
        row.valid = true;
      } catch (const ConstantSignal&) {
        row.hr_pred = kNan;
        row.hr_true = kNan;
        row.ipr = kNan;
        row.valid = false;
      }
      report.rows.push_back(std::move(row));
    }
    report.videos.push_back(std::move(video));
  }

  std::vector<double> preds, truths, iprs;
  for (const WindowRow& row : report.rows) {
    if (!row.valid) continue;
    preds.push_back(row.hr_pred);
    truths.push_back(row.hr_true);
    iprs.push_back(row.ipr);
  }
  report.n_windows = report.rows.size();
  report.n_valid = preds.size();
  report.n_degenerate = report.n_windows - report.n_valid;
  if (!preds.empty()) {
    report.agreement = agreement_metrics(preds, truths);
    report.mean_ipr = mean_of(iprs);
  } else {
    report.agreement.mae = kNan;
    report.agreement.rmse = kNan;
  }
  return report;
}

std::string file_digest(const std::filesystem::path& path) {
  const std::vector<char> blob = read_binary_file(path);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
  return buf;
}

std::string report_csv(const EvalReport& report) {
  std::string out = "source,file,window,hr_pred,hr_true,ipr,valid\n";
  for (const WindowRow& row : report.rows) {
    out += row.source;
    out += ',';
    out += row.file;
    out += ',';
    out += std::to_string(row.window);
    out += ',';
    out += fmt_double(row.hr_pred);
    out += ',';
    out += fmt_double(row.hr_true);
    out += ',';
    out += fmt_double(row.ipr);
    out += ',';
    out += row.valid ? '1' : '0';
    out += '\n';
  }
  return out;
}

std::string report_json(const EvalReport& report) {
  json doc;
  doc["window_s"] = report.window_s;
  doc["n_windows"] = report.n_windows;
  doc["n_valid"] = report.n_valid;
  doc["n_degenerate"] = report.n_degenerate;
  doc["mae"] = report.agreement.mae;
  doc["rmse"] = report.agreement.rmse;
  doc["r"] = report.agreement.r ? json(*report.agreement.r) : json();
  doc["mean_ipr"] = report.mean_ipr;
  doc["checkpoint"] = report.checkpoint_digest;
  doc["config"] = report.config_json.empty() ? json() : json::parse(report.config_json);
  doc["videos"] = json::array();
  for (const VideoEval& video : report.videos) {
    json v{{"source", video.source}, {"file", video.file}, {"gt_missing", video.gt_missing}};
    if (video.hrv) {
      v["hrv"] = {{"rf_hz", video.hrv->rf_hz},
                  {"lf_nu", video.hrv->lf_nu},
                  {"hf_nu", video.hrv->hf_nu},
                  {"lf_hf", video.hrv->lf_hf},
                  {"zero_hf", video.hrv->zero_hf}};
    } else {
      v["hrv"] = json();
    }
    doc["videos"].push_back(std::move(v));
  }
  return doc.dump(2) + "\n";
}

namespace {

// Shared body of both saliency flavors. `reference` is null for the
// self-projection variant.
SaliencyMap saliency_impl(const Tensor4& clip, RppgEncoder& model,
                          const std::vector<double>* reference) {
  Tape tape;
  const STBlock block = model.forward(clip, /*training=*/false, &tape);
  const std::vector<double>& x = spatial_average(block).samples;
  const std::size_t n = x.size();

  SaliencyMap map;
  map.t = block.t;
  map.side = RppgEncoder::kInputSide;
  map.values.assign(map.t * map.side * map.side, 0.0);

  // Direction to push the trace in, per sample. Exact all-equal checks guard
  // the 0/0 cases: a constant trace (or reference) defines no direction, and
  // dividing by its near-zero variance would only amplify rounding residue.
  std::vector<double> d_r(n, 0.0);
  if (all_equal(x)) {
    map.degenerate = true;
    return map;
  }
  const double mx = mean_of(x);
  if (reference != nullptr) {
    const std::vector<double>& y = *reference;
    if (all_equal(y)) {
      map.degenerate = true;
      return map;
    }
    const double my = mean_of(y);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double xc = x[i] - mx, yc = y[i] - my;
      sxx += xc * xc;
      syy += yc * yc;
      sxy += xc * yc;
    }
    const double denom = std::sqrt(sxx * syy);
    for (std::size_t i = 0; i < n; ++i)
      d_r[i] = ((y[i] - my) - (sxy / sxx) * (x[i] - mx)) / denom;
  } else {
    double sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double xc = x[i] - mx;
      sxx += xc * xc;
    }
    const double norm = std::sqrt(sxx);
    for (std::size_t i = 0; i < n; ++i) d_r[i] = (x[i] - mx) / norm;
  }

  // The spatial average spreads each sample's pull evenly over the s*s cells.
  STBlock d_block;
  d_block.t = block.t;
  d_block.s = block.s;
  d_block.fs = block.fs;
  d_block.values.assign(block.values.size(), 0.0);
  const double cells = static_cast<double>(block.s * block.s);
  for (std::size_t ti = 0; ti < block.t; ++ti) {
    const double g = d_r[ti] / cells;
    for (std::size_t h = 0; h < block.s; ++h)
      for (std::size_t w = 0; w < block.s; ++w) d_block.at(ti, h, w) = g;
  }

  const Tensor4 grad = model.backward(tape, d_block, /*param_grads=*/false);
  double peak = 0.0;
  for (std::size_t ti = 0; ti < map.t; ++ti) {
    double* frame = map.frame(ti);
    for (std::size_t y = 0; y < map.side; ++y)
      for (std::size_t xpx = 0; xpx < map.side; ++xpx) {
        double m = 0.0;
        for (std::size_t c = 0; c < grad.c; ++c)
          m = std::max(m, std::abs(grad.at(c, ti, y, xpx)));
        frame[y * map.side + xpx] = m;
        peak = std::max(peak, m);
      }
  }
  if (peak == 0.0) {
    map.degenerate = true;
    return map;
  }
  for (double& v : map.values) v /= peak;
  return map;
}

}  // namespace

SaliencyMap saliency(const Tensor4& clip, RppgEncoder& model, const Waveform& reference) {
  if (reference.samples.size() != clip.t)
    throw LengthMismatch("saliency: reference must have one sample per clip frame");
  return saliency_impl(clip, model, &reference.samples);
}

SaliencyMap saliency(const Tensor4& clip, RppgEncoder& model) {
  return saliency_impl(clip, model, nullptr);
}

void write_saliency_frames(const std::filesystem::path& dir, const SaliencyMap& map) {
  if (map.t == 0) throw Error("write_saliency_frames: empty map");
  std::filesystem::create_directories(dir);
  Image img;
  img.h = map.side;
  img.w = map.side;
  img.rgb.resize(map.side * map.side * 3);
  char name[32];
  for (std::size_t ti = 0; ti < map.t; ++ti) {
    const double* frame = map.frame(ti);
    for (std::size_t i = 0; i < map.side * map.side; ++i) {
      img.rgb[i * 3 + 0] = frame[i];
      img.rgb[i * 3 + 1] = frame[i];
      img.rgb[i * 3 + 2] = frame[i];
    }
    std::snprintf(name, sizeof(name), "frame_%06zu.ppm", ti);
    write_ppm(dir / name, img);
  }
}

void write_saliency_overlay(const std::filesystem::path& dir, const Tensor4& clip,
                            const SaliencyMap& map, double frame_rate, double alpha) {
  if (clip.t != map.t || clip.h != map.side || clip.w != map.side)
    throw Error("write_saliency_overlay: clip and map shapes disagree");
  if (clip.c != 3) throw Error("write_saliency_overlay: clip must be rgb");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw Error("write_saliency_overlay: alpha must be in [0, 1]");
  RawVideo video;
  video.frame_rate = frame_rate;
  video.frames.resize(clip.t);
  for (std::size_t ti = 0; ti < clip.t; ++ti) {
    Image& img = video.frames[ti];
    img.h = map.side;
    img.w = map.side;
    img.rgb.resize(map.side * map.side * 3);
    const double* heat = map.frame(ti);
    for (std::size_t y = 0; y < map.side; ++y)
      for (std::size_t x = 0; x < map.side; ++x) {
        const double m = alpha * heat[y * map.side + x];
        const double r = clip.at(0, ti, y, x), g = clip.at(1, ti, y, x),
                     b = clip.at(2, ti, y, x);
        img.at(y, x, 0) = r + m * (1.0 - r);
        img.at(y, x, 1) = g * (1.0 - m);
        img.at(y, x, 2) = b * (1.0 - m);
      }
  }
  write_video_dir(dir, video);
}

}  // namespace pulsegrid
