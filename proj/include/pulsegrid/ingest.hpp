#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/nn.hpp"
#include "pulsegrid/signal.hpp"

namespace pulsegrid {

struct DegenerateLandmarks : Error {
  using Error::Error;
};
struct DecodeFailure : Error {
  using Error::Error;
};
struct VideoTooShort : Error {
  using Error::Error;
};
struct CorruptClip : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Frames and landmark tracks.

// One decoded frame: interleaved RGB rows, values in [0, 1].
struct Image {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> rgb;  // h * w * 3, index (y * w + x) * 3 + channel

  double at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * w + x) * 3 + c]; }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * w + x) * 3 + c]; }
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Per-frame landmark sets, one inner vector per video frame.
struct LandmarkTrack {
  std::vector<std::vector<Point>> frames;
};

// Parse a landmark text file: one row per frame, "frame_index, x0, y0, x1,
// y1, ...". Rows must appear in frame order starting at 0. Coordinates are
// clamped to [0, frame_w - 1] x [0, frame_h - 1]; the number of clamped
// values is reported through `clamped` so callers can warn.
LandmarkTrack load_landmarks(const std::filesystem::path& path, double frame_w, double frame_h,
                             std::size_t* clamped = nullptr);

// ---------------------------------------------------------------------------
// Cropping.

// A square crop track: one center per frame, one side length for the whole
// video.
struct CropSpec {
  std::vector<Point> centers;
  long side = 0;  // pixels, even, > 0
};

// Center each frame's box on the midpoint of its landmark extent; fix the
// side to 1.2x the vertical landmark range of the first frame, rounded to
// the nearest even pixel count. Throws DegenerateLandmarks when frame 0 has
// no vertical extent to scale.
CropSpec compute_crop(const LandmarkTrack& track);

// Cut the per-frame boxes out of the source frames and bilinearly resize
// each to 128 x 128 (sampling at output pixel centers; source reads outside
// the frame clamp to the nearest edge pixel). Returns a (3, T, 128, 128)
// tensor in [0, 1], RGB channel order.
Tensor4 crop_and_resize(const std::vector<Image>& frames, const CropSpec& spec);

// ---------------------------------------------------------------------------
// Clip segmentation.

struct ClipWindow {
  std::size_t start = 0;   // first frame
  std::size_t length = 0;  // frames
};

enum class SegmentMode { kTrain, kTest };

// Cut a video of `total_frames` frames into windows of length_s seconds.
// Test mode tiles from frame 0 with no overlap and drops the short tail.
// Train mode draws floor(total/length) windows with independent uniform
// random offsets (rng required). Throws VideoTooShort when even one window
// does not fit.
std::vector<ClipWindow> segment_clips(std::size_t total_frames, double fs, double length_s,
                                      SegmentMode mode, Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// Clip store.
//
// One file per clip: a fixed-point (16-bit) dump of the (3, T, 128, 128)
// grid plus a JSON meta header, checksummed like checkpoints so truncation
// and bit rot surface as CorruptClip. A manifest JSON file indexes the clips
// of a store directory.

struct ClipMeta {
  std::string source;         // originating video id
  std::size_t clip_index = 0;  // position within the source video
  double frame_rate = 0.0;
  double offset_s = 0.0;  // start of the clip within the source video
};

void write_clip(const std::filesystem::path& path, const Tensor4& clip, const ClipMeta& meta);

struct StoredClip {
  ClipMeta meta;
  Tensor4 video;
};

StoredClip read_clip(const std::filesystem::path& path);

// Round a unit-interval value to the nearest 16-bit lattice point k / 65535.
// Quantization error is at most half a lattice step; write_clip applies the
// same mapping, so pre-snapped tensors round-trip bit for bit.
std::uint16_t quantize_unit(double x);
double dequantize_unit(std::uint16_t q);
double snap_unit(double x);

struct ManifestEntry {
  std::string file;  // clip path relative to the manifest's directory
  std::string source;
  std::size_t clip_index = 0;
  std::size_t t = 0;
  double offset_s = 0.0;
};

struct Manifest {
  double frame_rate = 0.0;
  std::vector<ManifestEntry> entries;
  std::string extra;  // optional creator-specific JSON object, "" when absent
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Raw video directories.
//
// A video is a directory of binary PPM (P6, 8-bit) frames played in
// lexicographic filename order, with a meta.json recording the frame rate.

struct RawVideo {
  std::vector<Image> frames;
  double frame_rate = 0.0;
};

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

RawVideo read_video_dir(const std::filesystem::path& dir);
void write_video_dir(const std::filesystem::path& dir, const RawVideo& video);

// ---------------------------------------------------------------------------
// Ground-truth signal files.

// Two-column text: time_s value, one sample per line, time ascending.
struct TimeSeries {
  std::vector<double> t;
  std::vector<double> v;
};

TimeSeries load_time_series(const std::filesystem::path& path);
void write_time_series(const std::filesystem::path& path, const TimeSeries& series);

// Linearly interpolate the series at frame times k / fs, k in [0, n).
// Queries outside the recorded span clamp to the end values; a query that
// hits a recorded time exactly returns that sample unchanged.
Waveform resample_to_frames(const TimeSeries& series, double fs, std::size_t n);

}  // namespace pulsegrid
