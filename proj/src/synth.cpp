#include "pulsegrid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace pulsegrid {

namespace {

using nlohmann::json;

constexpr double kTwoPi = 6.283185307179586476925286766559;

void validate_spec(const SynthSpec& spec) {
  if (!(spec.hr_bpm >= 45.0 && spec.hr_bpm <= 240.0))
    throw InvalidSpec("synth: hr_bpm outside [45, 240]");
  if (spec.hr_drift < 0.0) throw InvalidSpec("synth: negative hr_drift");
  const double lo = spec.hr_bpm - 0.5 * spec.hr_drift;
  const double hi = spec.hr_bpm + 0.5 * spec.hr_drift;
  if (lo < 60.0 * kBandLowHz || hi > 60.0 * kBandHighHz)
    throw InvalidSpec("synth: drifting HR leaves the physiological band");
  if (spec.duration_s <= 0.0 || spec.fps <= 0.0)
    throw InvalidSpec("synth: duration and fps must be positive");
  if (std::lround(spec.duration_s * spec.fps) < 1)
    throw InvalidSpec("synth: video shorter than one frame");
  if (spec.image_size < 4) throw InvalidSpec("synth: image_size too small");
  const Rect& skin = spec.skin_region;
  if (skin.w < 2 || skin.h < 2) throw InvalidSpec("synth: skin_region needs at least 2x2 pixels");
  if (skin.x0 + skin.w > spec.image_size || skin.y0 + skin.h > spec.image_size)
    throw InvalidSpec("synth: skin_region outside the image");
  if (spec.pulse_amplitude < 0.0 || spec.pulse_amplitude > 0.2)
    throw InvalidSpec("synth: pulse_amplitude outside [0, 0.2]");
  if (spec.noise_std < 0.0) throw InvalidSpec("synth: negative noise_std");
  if (spec.distractor) {
    const Rect& r = spec.distractor->region;
    if (r.w == 0 || r.h == 0) throw InvalidSpec("synth: empty distractor region");
    if (r.x0 + r.w > spec.image_size || r.y0 + r.h > spec.image_size)
      throw InvalidSpec("synth: distractor outside the image");
    if (!r.disjoint(skin)) throw InvalidSpec("synth: distractor overlaps the skin region");
    if (spec.distractor->frequency_hz <= 0.0)
      throw InvalidSpec("synth: distractor frequency must be positive");
  }
}

// Smooth per-channel base pattern: a coarse random control grid blown up
// bilinearly. Values stay within [0.25, 0.75] so modulation never clips.
std::vector<double> make_base_image(const SynthSpec& spec, std::uint64_t seed) {
  constexpr std::size_t kGrid = 8;
  Rng rng(derive_seed(seed, "synth-base"));
  double control[3][kGrid + 1][kGrid + 1];
  for (auto& plane : control)
    for (auto& row : plane)
      for (double& v : row) v = 0.25 + 0.5 * rng.uniform_real();
  const std::size_t n = spec.image_size;
  std::vector<double> base(3 * n * n);
  const double scale = static_cast<double>(kGrid) / static_cast<double>(n - 1);
  for (std::size_t y = 0; y < n; ++y) {
    const double gy = static_cast<double>(y) * scale;
    const auto iy = std::min(static_cast<std::size_t>(gy), kGrid - 1);
    const double fy = gy - static_cast<double>(iy);
    for (std::size_t x = 0; x < n; ++x) {
      const double gx = static_cast<double>(x) * scale;
      const auto ix = std::min(static_cast<std::size_t>(gx), kGrid - 1);
      const double fx = gx - static_cast<double>(ix);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * control[c][iy][ix] + fx * control[c][iy][ix + 1];
        const double bot = (1.0 - fx) * control[c][iy + 1][ix] + fx * control[c][iy + 1][ix + 1];
        base[(y * n + x) * 3 + c] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return base;
}

}  // namespace

void pulse_series(const SynthSpec& spec, std::size_t t0, std::size_t t1,
                  std::vector<double>* wave, std::vector<double>* hr) {
  const double f0 = (spec.hr_bpm - 0.5 * spec.hr_drift) / 60.0;  // Hz at t = 0
  const double slope = (spec.hr_drift / 60.0) / spec.duration_s;  // Hz per second
  if (wave) wave->clear();
  if (hr) hr->clear();
  for (std::size_t k = t0; k < t1; ++k) {
    const double t = static_cast<double>(k) / spec.fps;
    const double phase = kTwoPi * (f0 * t + 0.5 * slope * t * t);
    if (wave) wave->push_back(std::sin(phase) + 0.3 * std::sin(2.0 * phase));
    if (hr) hr->push_back(60.0 * (f0 + slope * t));
  }
}

SynthVideo generate_range(const SynthSpec& spec, std::uint64_t seed, std::size_t t0,
                          std::size_t t1) {
  validate_spec(spec);
  const auto total = static_cast<std::size_t>(std::lround(spec.duration_s * spec.fps));
  if (t0 > t1 || t1 > total) throw Error("generate_range: frame range outside the video");

  const std::vector<double> base = make_base_image(spec, seed);
  std::vector<double> wave;
  pulse_series(spec, t0, t1, &wave, nullptr);

  SynthVideo out;
  out.fps = spec.fps;
  out.ground_truth.fs = spec.fps;
  out.ground_truth.samples = wave;
  pulse_series(spec, t0, t1, nullptr, &out.hr_bpm);

  const std::size_t n = spec.image_size;
  const Rect& skin = spec.skin_region;
  const double x1 = static_cast<double>(skin.x0 + skin.w - 1);
  const double y1 = static_cast<double>(skin.y0 + skin.h - 1);
  const std::vector<Point> corners = {{static_cast<double>(skin.x0), static_cast<double>(skin.y0)},
                                      {x1, static_cast<double>(skin.y0)},
                                      {static_cast<double>(skin.x0), y1},
                                      {x1, y1}};

  out.frames.reserve(t1 - t0);
  for (std::size_t k = t0; k < t1; ++k) {
    Image frame;
    frame.h = frame.w = n;
    frame.rgb.resize(3 * n * n);
    const double pulse_gain = 1.0 + spec.pulse_amplitude * wave[k - t0];
    double flash_gain = 1.0;
    if (spec.distractor) {
      const double t = static_cast<double>(k) / spec.fps;
      flash_gain = 1.0 + 5.0 * spec.pulse_amplitude *
                             std::sin(kTwoPi * spec.distractor->frequency_hz * t);
    }
    // One noise stream per frame, so any frame range replays identically.
    Rng noise(derive_seed(seed, "synth-noise", k));
    const bool noisy = spec.noise_std > 0.0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double gain = 1.0;
        if (skin.contains(x, y))
          gain = pulse_gain;
        else if (spec.distractor && spec.distractor->region.contains(x, y))
          gain = flash_gain;
        for (std::size_t c = 0; c < 3; ++c) {
          double v = base[(y * n + x) * 3 + c] * gain;
          if (noisy) v += spec.noise_std * noise.normal();
          frame.rgb[(y * n + x) * 3 + c] = snap_unit(v);
        }
      }
    out.frames.push_back(std::move(frame));
    out.landmarks.frames.push_back(corners);
  }
  return out;
}

SynthVideo generate(const SynthSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  const auto total = static_cast<std::size_t>(std::lround(spec.duration_s * spec.fps));
  return generate_range(spec, seed, 0, total);
}

// ---------------------------------------------------------------------------
// Spec JSON

std::string SynthSpec::to_json() const {
  json doc = {{"hr_bpm", hr_bpm},
              {"duration_s", duration_s},
              {"fps", fps},
              {"image_size", image_size},
              {"skin_region",
               {{"x0", skin_region.x0}, {"y0", skin_region.y0}, {"w", skin_region.w}, {"h", skin_region.h}}},
              {"pulse_amplitude", pulse_amplitude},
              {"noise_std", noise_std},
              {"hr_drift", hr_drift}};
  if (distractor)
    doc["distractor"] = {{"x0", distractor->region.x0},
                         {"y0", distractor->region.y0},
                         {"w", distractor->region.w},
                         {"h", distractor->region.h},
                         {"frequency_hz", distractor->frequency_hz}};
  return doc.dump();
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidSpec(std::string("SynthSpec: unparseable JSON: ") + e.what());
  }
  if (!doc.is_object()) throw InvalidSpec("SynthSpec: JSON must be an object");
  static const char* known[] = {"hr_bpm",     "duration_s", "fps",
                                "image_size", "skin_region", "pulse_amplitude",
                                "noise_std",  "hr_drift",   "distractor"};
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw InvalidSpec("SynthSpec: unknown field \"" + key + "\"");
  }
  SynthSpec spec;
  try {
    spec.hr_bpm = doc.value("hr_bpm", spec.hr_bpm);
    spec.duration_s = doc.value("duration_s", spec.duration_s);
    spec.fps = doc.value("fps", spec.fps);
    spec.image_size = doc.value("image_size", spec.image_size);
    if (doc.contains("skin_region")) {
      const json& r = doc["skin_region"];
      spec.skin_region = Rect{r.at("x0").get<std::size_t>(), r.at("y0").get<std::size_t>(),
                              r.at("w").get<std::size_t>(), r.at("h").get<std::size_t>()};
    }
    spec.pulse_amplitude = doc.value("pulse_amplitude", spec.pulse_amplitude);
    spec.noise_std = doc.value("noise_std", spec.noise_std);
    spec.hr_drift = doc.value("hr_drift", spec.hr_drift);
    if (doc.contains("distractor") && !doc["distractor"].is_null()) {
      const json& d = doc["distractor"];
      Distractor dis;
      dis.region = Rect{d.at("x0").get<std::size_t>(), d.at("y0").get<std::size_t>(),
                        d.at("w").get<std::size_t>(), d.at("h").get<std::size_t>()};
      dis.frequency_hz = d.at("frequency_hz").get<double>();
      spec.distractor = dis;
    }
  } catch (const json::exception& e) {
    throw InvalidSpec(std::string("SynthSpec: bad field: ") + e.what());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Cohorts

CohortLayout make_cohort(const CohortParams& params, std::uint64_t seed,
                         const std::filesystem::path& out_dir) {
  if (params.n_videos < 2) throw InvalidSpec("make_cohort: need at least 2 videos to form pairs");
  if (params.hr_hi_bpm < params.hr_lo_bpm) throw InvalidSpec("make_cohort: inverted HR range");
  const double span = params.hr_hi_bpm - params.hr_lo_bpm;
  const double spacing = span / static_cast<double>(params.n_videos - 1);
  if (spacing < 5.0)
    throw RangeTooNarrow("make_cohort: " + std::to_string(params.n_videos) + " videos over " +
                         std::to_string(span) + " bpm leaves gaps under 5 bpm");
  const bool with_distractor = params.distractor_lo_bpm != 0.0 || params.distractor_hi_bpm != 0.0;
  if (with_distractor &&
      (params.distractor_lo_bpm <= 0.0 || params.distractor_hi_bpm < params.distractor_lo_bpm))
    throw InvalidSpec("make_cohort: distractor rate range must satisfy 0 < lo <= hi bpm");

  std::filesystem::create_directories(out_dir / "clips");
  std::filesystem::create_directories(out_dir / "eval");
  std::filesystem::create_directories(out_dir / "gt");

  CohortLayout layout;
  Manifest train_manifest, eval_manifest;
  train_manifest.frame_rate = params.base.fps;
  eval_manifest.frame_rate = params.base.fps;
  json videos = json::array();

  for (std::size_t i = 0; i < params.n_videos; ++i) {
    SynthSpec spec = params.base;
    spec.hr_bpm = params.hr_lo_bpm + spacing * static_cast<double>(i);
    if (with_distractor) {
      const double frac = static_cast<double>(i) / static_cast<double>(params.n_videos - 1);
      const double rate_bpm =
          params.distractor_lo_bpm + (params.distractor_hi_bpm - params.distractor_lo_bpm) * frac;
      spec.distractor = Distractor{params.distractor_region, rate_bpm / 60.0};
    }
    const std::uint64_t video_seed = derive_seed(seed, "cohort-video", i);
    const std::string source = "v" + std::to_string(i);

    const SynthVideo video = generate(spec, video_seed);
    const CropSpec crop = compute_crop(video.landmarks);
    const Tensor4 clip = crop_and_resize(video.frames, crop);

    Rng window_rng(derive_seed(seed, "cohort-windows", i));
    const std::vector<ClipWindow> windows =
        segment_clips(clip.t, spec.fps, params.clip_length_s, SegmentMode::kTrain, &window_rng);
    for (std::size_t k = 0; k < windows.size(); ++k) {
      const ClipWindow& win = windows[k];
      Tensor4 piece(clip.c, win.length, clip.h, clip.w);
      for (std::size_t c = 0; c < clip.c; ++c)
        for (std::size_t t = 0; t < win.length; ++t)
          std::copy_n(clip.frame(c, win.start + t), clip.h * clip.w, piece.frame(c, t));
      ClipMeta meta;
      meta.source = source;
      meta.clip_index = k;
      meta.frame_rate = spec.fps;
      meta.offset_s = static_cast<double>(win.start) / spec.fps;
      const std::string file = "clips/" + source + "_" + std::to_string(k) + ".pgclip";
      write_clip(out_dir / file, piece, meta);
      train_manifest.entries.push_back({file, source, k, piece.t, meta.offset_s});
    }

    ClipMeta full_meta;
    full_meta.source = source;
    full_meta.clip_index = 0;
    full_meta.frame_rate = spec.fps;
    full_meta.offset_s = 0.0;
    const std::string full_file = "eval/" + source + "_full.pgclip";
    write_clip(out_dir / full_file, clip, full_meta);
    eval_manifest.entries.push_back({full_file, source, 0, clip.t, 0.0});

    TimeSeries gt;
    for (std::size_t k = 0; k < video.ground_truth.samples.size(); ++k) {
      gt.t.push_back(static_cast<double>(k) / spec.fps);
      gt.v.push_back(video.ground_truth.samples[k]);
    }
    write_time_series(out_dir / "gt" / (source + ".txt"), gt);

    videos.push_back({{"source", source},
                      {"hr_bpm", spec.hr_bpm},
                      {"seed", video_seed},
                      {"gt_file", "gt/" + source + ".txt"},
                      {"spec", json::parse(spec.to_json())}});
    layout.sources.push_back(source);
    layout.hr_bpm.push_back(spec.hr_bpm);
  }

  const std::string extra = json{{"videos", videos}}.dump();
  train_manifest.extra = extra;
  eval_manifest.extra = extra;
  layout.train_manifest = out_dir / "manifest.json";
  layout.eval_manifest = out_dir / "eval_manifest.json";
  write_manifest(layout.train_manifest, train_manifest);
  write_manifest(layout.eval_manifest, eval_manifest);
  return layout;
}

}  // namespace pulsegrid
