#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pulsegrid/common.hpp"
#include "pulsegrid/ingest.hpp"
#include "pulsegrid/signal.hpp"
#include "pulsegrid/synth.hpp"

using namespace pulsegrid;

namespace {

std::filesystem::path test_dir(const std::string& leaf) {
  const auto dir = std::filesystem::temp_directory_path() / ("pulsegrid_synth_" + leaf);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small, fast spec for structural tests.
SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.image_size = 32;
  spec.skin_region = Rect{4, 4, 25, 25};
  spec.duration_s = 2.0;
  spec.fps = 10.0;
  return spec;
}

// Mean intensity of a rectangular region, averaged over channels.
double region_mean(const Image& frame, const Rect& r) {
  double sum = 0.0;
  for (std::size_t y = r.y0; y < r.y0 + r.h; ++y)
    for (std::size_t x = r.x0; x < r.x0 + r.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) sum += frame.at(y, x, c);
  return sum / static_cast<double>(r.w * r.h * 3);
}

Waveform region_trace(const SynthVideo& video, const Rect& r) {
  Waveform w;
  w.fs = video.fps;
  for (const Image& f : video.frames) w.samples.push_back(region_mean(f, r));
  return w;
}

double power(const std::vector<double>& x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double p = 0.0;
  for (double v : x) p += (v - mean) * (v - mean);
  return p / static_cast<double>(x.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Determinism and the pulse model

TEST_CASE("generation is bit-identical for a repeated seed and differs across seeds") {
  const SynthSpec spec = tiny_spec();
  const SynthVideo a = generate(spec, 42);
  const SynthVideo b = generate(spec, 42);
  REQUIRE(a.frames.size() == 20);
  REQUIRE(b.frames.size() == 20);
  for (std::size_t t = 0; t < a.frames.size(); ++t) CHECK(a.frames[t].rgb == b.frames[t].rgb);
  CHECK(a.ground_truth.samples == b.ground_truth.samples);
  CHECK(a.hr_bpm == b.hr_bpm);

  const SynthVideo c = generate(spec, 43);
  CHECK(a.frames[0].rgb != c.frames[0].rgb);
}

TEST_CASE("a frame range renders bit-identically to the same frames of the full video") {
  const SynthSpec spec = tiny_spec();
  const SynthVideo full = generate(spec, 7);
  const SynthVideo part = generate_range(spec, 7, 5, 12);
  REQUIRE(part.frames.size() == 7);
  for (std::size_t k = 0; k < 7; ++k) {
    CHECK(part.frames[k].rgb == full.frames[k + 5].rgb);
    CHECK(part.ground_truth.samples[k] == full.ground_truth.samples[k + 5]);
    CHECK(part.hr_bpm[k] == full.hr_bpm[k + 5]);
  }
  CHECK_THROWS_AS(generate_range(spec, 7, 5, 30), Error);
}

TEST_CASE("the pulse is a fundamental plus a 0.3-amplitude second harmonic") {
  SynthSpec spec = tiny_spec();
  spec.hr_bpm = 72.0;
  spec.duration_s = 4.0;
  std::vector<double> wave;
  pulse_series(spec, 0, 40, &wave, nullptr);
  for (std::size_t k = 0; k < 40; ++k) {
    const double t = static_cast<double>(k) / spec.fps;
    const double expected = std::sin(2.0 * std::acos(-1.0) * 1.2 * t) +
                            0.3 * std::sin(2.0 * std::acos(-1.0) * 2.4 * t);
    CHECK(std::abs(wave[k] - expected) < 1e-9);
  }
}

TEST_CASE("per-frame heart rate ramps linearly across the drift span") {
  SynthSpec spec = tiny_spec();
  spec.hr_bpm = 90.0;
  spec.hr_drift = 20.0;
  spec.duration_s = 10.0;
  std::vector<double> hr;
  pulse_series(spec, 0, 100, nullptr, &hr);
  CHECK(hr.front() == doctest::Approx(80.0));
  CHECK(hr.back() == doctest::Approx(100.0 - 20.0 / 100.0));  // last frame is at t = 9.9 s
  for (std::size_t k = 1; k < hr.size(); ++k) CHECK(hr[k] > hr[k - 1]);
}

// ---------------------------------------------------------------------------
// Spectral content

TEST_CASE("a clean 72 bpm video puts the skin-region spectral peak at 72") {
  SynthSpec spec = tiny_spec();
  spec.hr_bpm = 72.0;
  spec.duration_s = 60.0;
  spec.noise_std = 0.0;
  const SynthVideo video = generate(spec, 3);

  const Waveform trace = region_trace(video, spec.skin_region);
  CHECK(estimate_hr(compute_psd(trace)) == doctest::Approx(72.0).epsilon(0.5 / 72.0));

  // The ground-truth waveform itself sits on the same bin.
  CHECK(estimate_hr(compute_psd(video.ground_truth)) == doctest::Approx(72.0).epsilon(0.002));
}

TEST_CASE("skin and distractor regions peak at their own frequencies") {
  SynthSpec spec;
  spec.image_size = 64;
  spec.skin_region = Rect{8, 8, 48, 48};
  spec.duration_s = 30.0;
  spec.fps = 10.0;
  spec.hr_bpm = 72.0;
  spec.distractor = Distractor{Rect{0, 0, 6, 6}, 100.0 / 60.0};
  const SynthVideo video = generate(spec, 9);

  const double skin_hr = estimate_hr(compute_psd(region_trace(video, spec.skin_region)));
  const double corner_hr = estimate_hr(compute_psd(region_trace(video, spec.distractor->region)));
  CHECK(skin_hr == doctest::Approx(72.0).epsilon(0.5 / 72.0));
  CHECK(corner_hr == doctest::Approx(100.0).epsilon(0.5 / 100.0));
}

TEST_CASE("with drift, windowed HR estimates track the ramp and stay inside the band") {
  SynthSpec spec = tiny_spec();
  spec.hr_bpm = 90.0;
  spec.hr_drift = 20.0;
  spec.duration_s = 60.0;
  std::vector<double> wave;
  pulse_series(spec, 0, 600, &wave, nullptr);

  std::vector<double> estimates;
  for (std::size_t start = 0; start + 50 <= 600; start += 50) {
    Waveform window;
    window.fs = spec.fps;
    window.samples.assign(wave.begin() + static_cast<long>(start),
                          wave.begin() + static_cast<long>(start + 50));
    estimates.push_back(estimate_hr(compute_psd(window)));
  }
  for (double e : estimates) {
    CHECK(e >= spec.hr_bpm - spec.hr_drift);
    CHECK(e <= spec.hr_bpm + spec.hr_drift);
  }
  CHECK(estimates.front() < estimates.back());
}

// ---------------------------------------------------------------------------
// Noise regime

TEST_CASE("defaults bury the pulse in single pixels but expose it in the region mean") {
  SynthSpec noisy;  // library defaults, shortened
  noisy.duration_s = 20.0;
  SynthSpec clean = noisy;
  clean.noise_std = 0.0;
  const SynthVideo with_noise = generate(noisy, 17);
  const SynthVideo no_noise = generate(clean, 17);  // same base image and pulse

  // Single skin pixel: signal from the clean render, noise from the difference.
  const std::size_t px = 60, py = 60;
  std::vector<double> sig, noise;
  for (std::size_t t = 0; t < no_noise.frames.size(); ++t) {
    sig.push_back(no_noise.frames[t].at(py, px, 1));
    noise.push_back(with_noise.frames[t].at(py, px, 1) - no_noise.frames[t].at(py, px, 1));
  }
  const double pixel_snr = power(sig) / power(noise);
  CHECK(pixel_snr < 0.1);  // below -10 dB

  // Region mean: averaging buys the signal back.
  const Waveform clean_trace = region_trace(no_noise, clean.skin_region);
  const Waveform noisy_trace = region_trace(with_noise, noisy.skin_region);
  std::vector<double> mean_noise;
  for (std::size_t t = 0; t < clean_trace.samples.size(); ++t)
    mean_noise.push_back(noisy_trace.samples[t] - clean_trace.samples[t]);
  const double region_snr = power(clean_trace.samples) / power(mean_noise);
  CHECK(region_snr > 3.16);  // above +5 dB
}

TEST_CASE("the distractor never touches skin pixels") {
  SynthSpec plain = tiny_spec();
  SynthSpec flashing = plain;
  flashing.distractor = Distractor{Rect{0, 0, 3, 3}, 1.5};
  const SynthVideo a = generate(plain, 5);
  const SynthVideo b = generate(flashing, 5);
  bool corner_changed = false;
  for (std::size_t t = 0; t < a.frames.size(); ++t) {
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool in_corner = flashing.distractor->region.contains(x, y);
        for (std::size_t c = 0; c < 3; ++c) {
          if (in_corner) {
            corner_changed =
                corner_changed || a.frames[t].at(y, x, c) != b.frames[t].at(y, x, c);
          } else {
            CHECK(a.frames[t].at(y, x, c) == b.frames[t].at(y, x, c));
          }
        }
      }
  }
  CHECK(corner_changed);
}

// ---------------------------------------------------------------------------
// Spec validation and JSON

TEST_CASE("invalid specs are rejected one field at a time") {
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.hr_bpm = 30.0; return s; }(), 1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.hr_bpm = 250.0; return s; }(), 1),
                  InvalidSpec);
  // Drift that pushes the instantaneous HR out of the band.
  CHECK_THROWS_AS(generate(
                      [] {
                        auto s = tiny_spec();
                        s.hr_bpm = 45.0;
                        s.hr_drift = 20.0;
                        return s;
                      }(),
                      1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.duration_s = 0.0; return s; }(), 1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.fps = -1.0; return s; }(), 1),
                  InvalidSpec);
  CHECK_THROWS_AS(
      generate([] { auto s = tiny_spec(); s.skin_region = Rect{20, 20, 20, 20}; return s; }(), 1),
      InvalidSpec);
  CHECK_THROWS_AS(
      generate([] { auto s = tiny_spec(); s.skin_region = Rect{4, 4, 1, 1}; return s; }(), 1),
      InvalidSpec);
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.pulse_amplitude = 0.5; return s; }(), 1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate([] { auto s = tiny_spec(); s.noise_std = -0.1; return s; }(), 1),
                  InvalidSpec);
  // Distractor overlapping the skin region or outside the frame.
  CHECK_THROWS_AS(generate(
                      [] {
                        auto s = tiny_spec();
                        s.distractor = Distractor{Rect{3, 3, 4, 4}, 1.0};
                        return s;
                      }(),
                      1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate(
                      [] {
                        auto s = tiny_spec();
                        s.distractor = Distractor{Rect{30, 30, 5, 5}, 1.0};
                        return s;
                      }(),
                      1),
                  InvalidSpec);
  CHECK_THROWS_AS(generate(
                      [] {
                        auto s = tiny_spec();
                        s.distractor = Distractor{Rect{0, 0, 3, 3}, 0.0};
                        return s;
                      }(),
                      1),
                  InvalidSpec);
}

TEST_CASE("spec JSON round trips every field including the distractor") {
  SynthSpec spec;
  spec.hr_bpm = 66.5;
  spec.duration_s = 45.0;
  spec.fps = 20.0;
  spec.image_size = 96;
  spec.skin_region = Rect{10, 12, 70, 60};
  spec.pulse_amplitude = 0.015;
  spec.noise_std = 0.02;
  spec.hr_drift = 6.0;
  spec.distractor = Distractor{Rect{1, 2, 7, 8}, 1.75};

  const SynthSpec back = SynthSpec::from_json(spec.to_json());
  CHECK(back.hr_bpm == 66.5);
  CHECK(back.duration_s == 45.0);
  CHECK(back.fps == 20.0);
  CHECK(back.image_size == 96);
  CHECK(back.skin_region.x0 == 10);
  CHECK(back.skin_region.h == 60);
  CHECK(back.pulse_amplitude == 0.015);
  CHECK(back.noise_std == 0.02);
  CHECK(back.hr_drift == 6.0);
  REQUIRE(back.distractor.has_value());
  CHECK(back.distractor->region.w == 7);
  CHECK(back.distractor->frequency_hz == 1.75);

  const SynthSpec plain = SynthSpec::from_json("{}");
  CHECK(plain.hr_bpm == 75.0);
  CHECK(!plain.distractor.has_value());

  CHECK_THROWS_AS(SynthSpec::from_json("{\"hr\": 72}"), InvalidSpec);
  CHECK_THROWS_AS(SynthSpec::from_json("not json"), InvalidSpec);
}

// ---------------------------------------------------------------------------
// The ingest path and cohorts

TEST_CASE("default synthetic landmarks crop to exactly the full frame") {
  SynthSpec spec;  // default 128 px geometry
  spec.duration_s = 0.5;
  const SynthVideo video = generate(spec, 21);
  const CropSpec crop = compute_crop(video.landmarks);
  CHECK(crop.side == 128);
  for (const Point& c : crop.centers) {
    CHECK(c.x == 64.0);
    CHECK(c.y == 64.0);
  }
  const Tensor4 clip = crop_and_resize(video.frames, crop);
  for (std::size_t t = 0; t < video.frames.size(); ++t)
    for (std::size_t y = 0; y < 128; ++y)
      for (std::size_t x = 0; x < 128; ++x)
        CHECK(clip.frame(1, t)[y * 128 + x] == video.frames[t].at(y, x, 1));
}

TEST_CASE("cohorts write train clips, eval clips, and ground truth that all load back") {
  const auto dir = test_dir("cohort");
  CohortParams params;
  params.n_videos = 4;
  params.hr_lo_bpm = 60.0;
  params.hr_hi_bpm = 120.0;
  params.clip_length_s = 10.0;
  params.base.duration_s = 20.0;
  const CohortLayout layout = make_cohort(params, 2024, dir);

  REQUIRE(layout.sources.size() == 4);
  for (std::size_t i = 1; i < layout.hr_bpm.size(); ++i)
    CHECK(layout.hr_bpm[i] - layout.hr_bpm[i - 1] >= 5.0);
  CHECK(layout.hr_bpm.front() == 60.0);
  CHECK(layout.hr_bpm.back() == 120.0);

  const Manifest train = read_manifest(layout.train_manifest);
  CHECK(train.frame_rate == 10.0);
  REQUIRE(train.entries.size() == 8);  // 2 clips per 20 s video
  for (const ManifestEntry& e : train.entries) CHECK(e.t == 100);

  const Manifest eval = read_manifest(layout.eval_manifest);
  REQUIRE(eval.entries.size() == 4);
  for (const ManifestEntry& e : eval.entries) {
    CHECK(e.t == 200);
    const StoredClip clip = read_clip(dir / e.file);
    CHECK(clip.video.t == 200);
    CHECK(clip.meta.source == e.source);
  }

  // Ground truth files exist per video and resample cleanly.
  for (const std::string& source : layout.sources) {
    const TimeSeries gt = load_time_series(dir / "gt" / (source + ".txt"));
    REQUIRE(gt.t.size() == 200);
    const Waveform w = resample_to_frames(gt, 10.0, 200);
    CHECK(w.samples == gt.v);  // frame-aligned queries hit the nodes
  }

  // The manifest records each video's spec; regenerating from it reproduces
  // a stored training clip bit for bit (identity crop, snapped values).
  const nlohmann::json extra = nlohmann::json::parse(train.extra);
  REQUIRE(extra.at("videos").size() == 4);
  const ManifestEntry& probe = train.entries[3];
  std::size_t video_idx = 0;
  for (std::size_t i = 0; i < 4; ++i)
    if (extra["videos"][i]["source"] == probe.source) video_idx = i;
  const SynthSpec spec = SynthSpec::from_json(extra["videos"][video_idx]["spec"].dump());
  const auto seed = extra["videos"][video_idx]["seed"].get<std::uint64_t>();
  const auto start = static_cast<std::size_t>(std::lround(probe.offset_s * 10.0));
  const SynthVideo regen = generate_range(spec, seed, start, start + 100);
  const StoredClip stored = read_clip(dir / probe.file);
  REQUIRE(stored.video.t == 100);
  bool equal = true;
  for (std::size_t t = 0; t < 100 && equal; ++t)
    for (std::size_t y = 0; y < 128 && equal; ++y)
      for (std::size_t x = 0; x < 128 && equal; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          if (stored.video.frame(c, t)[y * 128 + x] != regen.frames[t].at(y, x, c)) {
            equal = false;
          }
  CHECK(equal);
}

TEST_CASE("a cohort distractor range plants one flashing patch per video") {
  CohortParams params;
  params.n_videos = 4;
  params.hr_lo_bpm = 60.0;
  params.hr_hi_bpm = 120.0;
  params.base.duration_s = 12.0;
  params.distractor_lo_bpm = 40.0;
  params.distractor_hi_bpm = 250.0;
  const CohortLayout layout = make_cohort(params, 7, test_dir("cohort_distractor"));

  // Every recorded spec carries the patch, rates climbing evenly across the
  // requested range and landing exactly on its endpoints.
  const Manifest train = read_manifest(layout.train_manifest);
  const nlohmann::json extra = nlohmann::json::parse(train.extra);
  REQUIRE(extra.at("videos").size() == 4);
  double prev = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const SynthSpec spec = SynthSpec::from_json(extra["videos"][i]["spec"].dump());
    REQUIRE(spec.distractor.has_value());
    CHECK(spec.distractor->region.x0 == 0);
    CHECK(spec.distractor->region.y0 == 0);
    CHECK(spec.distractor->region.w == 10);
    CHECK(spec.distractor->region.h == 10);
    CHECK(spec.distractor->frequency_hz > prev);
    prev = spec.distractor->frequency_hz;
  }
  CHECK(SynthSpec::from_json(extra["videos"][0]["spec"].dump()).distractor->frequency_hz ==
        40.0 / 60.0);
  CHECK(SynthSpec::from_json(extra["videos"][3]["spec"].dump()).distractor->frequency_hz ==
        250.0 / 60.0);

  // Zeroed bounds keep the cohort clean.
  CohortParams clean = params;
  clean.distractor_lo_bpm = 0.0;
  clean.distractor_hi_bpm = 0.0;
  const CohortLayout plain = make_cohort(clean, 7, test_dir("cohort_clean"));
  const nlohmann::json plain_extra =
      nlohmann::json::parse(read_manifest(plain.train_manifest).extra);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(!SynthSpec::from_json(plain_extra["videos"][i]["spec"].dump()).distractor.has_value());

  // Backwards or non-positive rate ranges are caught before any rendering.
  CohortParams bad = params;
  bad.distractor_lo_bpm = 120.0;
  bad.distractor_hi_bpm = 40.0;
  CHECK_THROWS_AS(make_cohort(bad, 7, test_dir("cohort_bad_range")), InvalidSpec);
  bad.distractor_lo_bpm = -5.0;
  bad.distractor_hi_bpm = 40.0;
  CHECK_THROWS_AS(make_cohort(bad, 7, test_dir("cohort_neg_range")), InvalidSpec);

  // A patch that would touch skin is rejected by the generator's own checks.
  CohortParams overlap = params;
  overlap.distractor_region = Rect{50, 50, 20, 20};
  CHECK_THROWS_AS(make_cohort(overlap, 7, test_dir("cohort_overlap")), InvalidSpec);
}

TEST_CASE("cohort HR ranges too narrow for 5 bpm spacing are rejected") {
  CohortParams params;
  params.n_videos = 2;
  params.hr_lo_bpm = 60.0;
  params.hr_hi_bpm = 61.0;
  CHECK_THROWS_AS(make_cohort(params, 1, test_dir("narrow")), RangeTooNarrow);

  params.n_videos = 1;
  params.hr_hi_bpm = 120.0;
  CHECK_THROWS_AS(make_cohort(params, 1, test_dir("single")), InvalidSpec);

  params.n_videos = 3;
  params.hr_lo_bpm = 120.0;
  params.hr_hi_bpm = 60.0;
  CHECK_THROWS_AS(make_cohort(params, 1, test_dir("inverted")), InvalidSpec);
}
