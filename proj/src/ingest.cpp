#include "pulsegrid/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pulsegrid {

namespace {

using nlohmann::json;

constexpr std::size_t kCropSide = 128;
constexpr char kClipMagic[9] = "PGCLIP01";

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t take_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Landmarks

LandmarkTrack load_landmarks(const std::filesystem::path& path, double frame_w, double frame_h,
                             std::size_t* clamped) {
  std::ifstream in(path);
  if (!in) throw DecodeFailure("load_landmarks: cannot open " + path.string());
  if (frame_w < 1.0 || frame_h < 1.0) throw Error("load_landmarks: frame bounds must be positive");
  LandmarkTrack track;
  std::size_t clamp_count = 0;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ls(line);
    double idx = -1.0;
    if (!(ls >> idx) || idx != static_cast<double>(row))
      throw DecodeFailure("load_landmarks: expected frame index " + std::to_string(row) + " in " +
                          path.string());
    std::vector<Point> pts;
    double x = 0.0, y = 0.0;
    while (ls >> x) {
      if (!(ls >> y))
        throw DecodeFailure("load_landmarks: odd coordinate count at frame " + std::to_string(row));
      Point p{x, y};
      const double cx = std::clamp(p.x, 0.0, frame_w - 1.0);
      const double cy = std::clamp(p.y, 0.0, frame_h - 1.0);
      if (cx != p.x || cy != p.y) ++clamp_count;
      pts.push_back(Point{cx, cy});
    }
    if (pts.empty())
      throw DecodeFailure("load_landmarks: frame " + std::to_string(row) + " has no landmarks");
    track.frames.push_back(std::move(pts));
    ++row;
  }
  if (track.frames.empty()) throw DecodeFailure("load_landmarks: empty file " + path.string());
  if (clamped) *clamped = clamp_count;
  return track;
}

// ---------------------------------------------------------------------------
// Cropping

CropSpec compute_crop(const LandmarkTrack& track) {
  if (track.frames.empty()) throw Error("compute_crop: empty track");
  CropSpec spec;
  spec.centers.reserve(track.frames.size());
  double range0 = 0.0;
  for (std::size_t t = 0; t < track.frames.size(); ++t) {
    const std::vector<Point>& pts = track.frames[t];
    if (pts.empty()) throw Error("compute_crop: frame " + std::to_string(t) + " has no landmarks");
    double min_x = pts[0].x, max_x = pts[0].x, min_y = pts[0].y, max_y = pts[0].y;
    for (const Point& p : pts) {
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
    spec.centers.push_back(Point{0.5 * (min_x + max_x), 0.5 * (min_y + max_y)});
    if (t == 0) range0 = max_y - min_y;
  }
  // Nearest even pixel count for 1.2x the first frame's vertical extent.
  spec.side = 2 * static_cast<long>(std::llround(0.6 * range0));
  if (spec.side <= 0)
    throw DegenerateLandmarks("compute_crop: frame 0 has no usable vertical range");
  return spec;
}

Tensor4 crop_and_resize(const std::vector<Image>& frames, const CropSpec& spec) {
  if (frames.empty()) throw Error("crop_and_resize: no frames");
  if (frames.size() != spec.centers.size())
    throw Error("crop_and_resize: frame/center count mismatch");
  if (spec.side <= 0) throw Error("crop_and_resize: nonpositive crop side");
  const std::size_t t_len = frames.size();
  Tensor4 out(3, t_len, kCropSide, kCropSide);
  const double side = static_cast<double>(spec.side);
  const double step = side / static_cast<double>(kCropSide);
  std::vector<long> xa(kCropSide), xb(kCropSide), ya(kCropSide), yb(kCropSide);
  std::vector<double> fx(kCropSide), fy(kCropSide);
  for (std::size_t t = 0; t < t_len; ++t) {
    const Image& f = frames[t];
    if (f.h == 0 || f.w == 0 || f.rgb.size() != f.h * f.w * 3)
      throw DecodeFailure("crop_and_resize: malformed frame " + std::to_string(t));
    const double left = spec.centers[t].x - 0.5 * side;
    const double top = spec.centers[t].y - 0.5 * side;
    const long h_max = static_cast<long>(f.h) - 1, w_max = static_cast<long>(f.w) - 1;
    for (std::size_t o = 0; o < kCropSide; ++o) {
      const double sx = left + (static_cast<double>(o) + 0.5) * step - 0.5;
      const double sy = top + (static_cast<double>(o) + 0.5) * step - 0.5;
      const double fxo = std::floor(sx), fyo = std::floor(sy);
      xa[o] = std::clamp(static_cast<long>(fxo), 0L, w_max);
      xb[o] = std::clamp(static_cast<long>(fxo) + 1, 0L, w_max);
      ya[o] = std::clamp(static_cast<long>(fyo), 0L, h_max);
      yb[o] = std::clamp(static_cast<long>(fyo) + 1, 0L, h_max);
      fx[o] = sx - fxo;
      fy[o] = sy - fyo;
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double* dst = out.frame(c, t);
      for (std::size_t i = 0; i < kCropSide; ++i) {
        const double* row_a = f.rgb.data() + (static_cast<std::size_t>(ya[i]) * f.w) * 3 + c;
        const double* row_b = f.rgb.data() + (static_cast<std::size_t>(yb[i]) * f.w) * 3 + c;
        const double wy = fy[i];
        for (std::size_t j = 0; j < kCropSide; ++j) {
          const double wx = fx[j];
          const double top_v =
              (1.0 - wx) * row_a[xa[j] * 3] + wx * row_a[xb[j] * 3];
          const double bot_v =
              (1.0 - wx) * row_b[xa[j] * 3] + wx * row_b[xb[j] * 3];
          dst[i * kCropSide + j] = (1.0 - wy) * top_v + wy * bot_v;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation

std::vector<ClipWindow> segment_clips(std::size_t total_frames, double fs, double length_s,
                                      SegmentMode mode, Rng* rng) {
  if (fs <= 0.0 || length_s <= 0.0) throw Error("segment_clips: fs and length must be positive");
  const long length = std::lround(length_s * fs);
  if (length <= 0) throw Error("segment_clips: window shorter than one frame");
  const auto len = static_cast<std::size_t>(length);
  if (len > total_frames)
    throw VideoTooShort("segment_clips: " + std::to_string(total_frames) + " frames < " +
                        std::to_string(len) + " frame window");
  std::vector<ClipWindow> out;
  if (mode == SegmentMode::kTest) {
    for (std::size_t s = 0; s + len <= total_frames; s += len) out.push_back({s, len});
  } else {
    if (!rng) throw Error("segment_clips: train mode needs an rng");
    const std::size_t n = total_frames / len;
    for (std::size_t k = 0; k < n; ++k) {
      const auto start = static_cast<std::size_t>(
          rng->uniform_int(0, static_cast<int64_t>(total_frames - len)));
      out.push_back({start, len});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clip store

std::uint16_t quantize_unit(double x) {
  const double c = std::clamp(x, 0.0, 1.0);
  return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

double dequantize_unit(std::uint16_t q) { return static_cast<double>(q) / 65535.0; }

double snap_unit(double x) { return dequantize_unit(quantize_unit(x)); }

void write_clip(const std::filesystem::path& path, const Tensor4& clip, const ClipMeta& meta) {
  if (clip.size() == 0) throw Error("write_clip: empty clip");
  json header = {{"source", meta.source}, {"clip_index", meta.clip_index},
                 {"frame_rate", meta.frame_rate}, {"offset_s", meta.offset_s},
                 {"c", clip.c},           {"t", clip.t},
                 {"h", clip.h},           {"w", clip.w}};
  const std::string head = header.dump();
  std::string blob;
  blob.reserve(8 + 8 + head.size() + clip.size() * 2 + 8);
  blob.append(kClipMagic, 8);
  append_u64(blob, head.size());
  blob += head;
  for (double v : clip.v) {
    const std::uint16_t q = quantize_unit(v);
    blob.push_back(static_cast<char>(q & 0xff));
    blob.push_back(static_cast<char>((q >> 8) & 0xff));
  }
  append_u64(blob, fnv1a64(blob.data(), blob.size()));
  atomic_write_file(path, blob);
}

StoredClip read_clip(const std::filesystem::path& path) {
  std::vector<char> blob;
  try {
    blob = read_binary_file(path);
  } catch (const Error& e) {
    throw CorruptClip(std::string("read_clip: ") + e.what());
  }
  if (blob.size() < 24 || std::memcmp(blob.data(), kClipMagic, 8) != 0)
    throw CorruptClip("read_clip: bad magic in " + path.string());
  const std::uint64_t stored_hash = take_u64(blob.data() + blob.size() - 8);
  if (fnv1a64(blob.data(), blob.size() - 8) != stored_hash)
    throw CorruptClip("read_clip: checksum mismatch in " + path.string());
  const std::uint64_t head_len = take_u64(blob.data() + 8);
  if (16 + head_len + 8 > blob.size()) throw CorruptClip("read_clip: truncated header");
  json header;
  try {
    header = json::parse(std::string(blob.data() + 16, head_len));
  } catch (const json::exception&) {
    throw CorruptClip("read_clip: unparseable header in " + path.string());
  }
  StoredClip out;
  try {
    out.meta.source = header.at("source").get<std::string>();
    out.meta.clip_index = header.at("clip_index").get<std::size_t>();
    out.meta.frame_rate = header.at("frame_rate").get<double>();
    out.meta.offset_s = header.at("offset_s").get<double>();
    const auto c = header.at("c").get<std::size_t>();
    const auto t = header.at("t").get<std::size_t>();
    const auto h = header.at("h").get<std::size_t>();
    const auto w = header.at("w").get<std::size_t>();
    out.video = Tensor4(c, t, h, w);
  } catch (const json::exception&) {
    throw CorruptClip("read_clip: incomplete header in " + path.string());
  }
  const std::size_t payload_at = 16 + head_len;
  const std::size_t need = out.video.size() * 2;
  if (payload_at + need + 8 != blob.size())
    throw CorruptClip("read_clip: payload size mismatch in " + path.string());
  const char* p = blob.data() + payload_at;
  for (std::size_t i = 0; i < out.video.size(); ++i) {
    const auto lo = static_cast<std::uint16_t>(static_cast<unsigned char>(p[2 * i]));
    const auto hi = static_cast<std::uint16_t>(static_cast<unsigned char>(p[2 * i + 1]));
    out.video.v[i] = dequantize_unit(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  json doc;
  doc["frame_rate"] = manifest.frame_rate;
  doc["clips"] = json::array();
  for (const ManifestEntry& e : manifest.entries)
    doc["clips"].push_back({{"file", e.file}, {"source", e.source}, {"clip_index", e.clip_index},
                            {"t", e.t}, {"offset_s", e.offset_s}});
  if (!manifest.extra.empty()) {
    try {
      doc["extra"] = json::parse(manifest.extra);
    } catch (const json::exception&) {
      throw Error("write_manifest: extra is not valid JSON");
    }
  }
  atomic_write_file(path, doc.dump(2) + "\n");
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::vector<char> blob;
  try {
    blob = read_binary_file(path);
  } catch (const Error& e) {
    throw DecodeFailure(std::string("read_manifest: ") + e.what());
  }
  json doc;
  try {
    doc = json::parse(blob.begin(), blob.end());
    Manifest out;
    out.frame_rate = doc.at("frame_rate").get<double>();
    for (const json& e : doc.at("clips")) {
      ManifestEntry entry;
      entry.file = e.at("file").get<std::string>();
      entry.source = e.at("source").get<std::string>();
      entry.clip_index = e.at("clip_index").get<std::size_t>();
      entry.t = e.at("t").get<std::size_t>();
      entry.offset_s = e.at("offset_s").get<double>();
      out.entries.push_back(std::move(entry));
    }
    if (doc.contains("extra")) out.extra = doc["extra"].dump();
    return out;
  } catch (const json::exception& e) {
    throw DecodeFailure("read_manifest: " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// PPM video directories

namespace {

// Scan one PPM header token, skipping whitespace and # comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeFailure("read_ppm: cannot open " + path.string());
  if (ppm_token(in) != "P6") throw DecodeFailure("read_ppm: not a P6 file: " + path.string());
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(ppm_token(in));
    h = std::stol(ppm_token(in));
    maxval = std::stol(ppm_token(in));
  } catch (const std::exception&) {
    throw DecodeFailure("read_ppm: malformed header in " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw DecodeFailure("read_ppm: unsupported geometry or depth in " + path.string());
  Image img;
  img.w = static_cast<std::size_t>(w);
  img.h = static_cast<std::size_t>(h);
  const std::size_t n = img.w * img.h * 3;
  std::vector<unsigned char> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw DecodeFailure("read_ppm: truncated pixel data in " + path.string());
  img.rgb.resize(n);
  // Divide rather than multiply by a reciprocal: k / maxval is correctly
  // rounded, so writing and re-reading the 8-bit lattice is bit-exact.
  const double maxd = static_cast<double>(maxval);
  for (std::size_t i = 0; i < n; ++i) img.rgb[i] = static_cast<double>(raw[i]) / maxd;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.h == 0 || image.w == 0 || image.rgb.size() != image.h * image.w * 3)
    throw Error("write_ppm: malformed image");
  std::string blob = "P6\n" + std::to_string(image.w) + " " + std::to_string(image.h) + "\n255\n";
  blob.reserve(blob.size() + image.rgb.size());
  for (double v : image.rgb) {
    const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    blob.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  atomic_write_file(path, blob);
}

RawVideo read_video_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec))
    if (entry.path().extension() == ".ppm") files.push_back(entry.path());
  if (ec) throw DecodeFailure("read_video_dir: cannot list " + dir.string());
  if (files.empty()) throw DecodeFailure("read_video_dir: no .ppm frames in " + dir.string());
  std::sort(files.begin(), files.end());
  RawVideo video;
  for (const auto& f : files) video.frames.push_back(read_ppm(f));
  for (const Image& f : video.frames)
    if (f.h != video.frames[0].h || f.w != video.frames[0].w)
      throw DecodeFailure("read_video_dir: frame size varies in " + dir.string());
  const auto meta_path = dir / "meta.json";
  try {
    const std::vector<char> blob = read_binary_file(meta_path);
    video.frame_rate = json::parse(blob.begin(), blob.end()).at("frame_rate").get<double>();
  } catch (const std::exception&) {
    throw DecodeFailure("read_video_dir: missing or invalid meta.json in " + dir.string());
  }
  if (video.frame_rate <= 0.0)
    throw DecodeFailure("read_video_dir: nonpositive frame rate in " + dir.string());
  return video;
}

void write_video_dir(const std::filesystem::path& dir, const RawVideo& video) {
  if (video.frames.empty()) throw Error("write_video_dir: no frames");
  if (video.frame_rate <= 0.0) throw Error("write_video_dir: nonpositive frame rate");
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < video.frames.size(); ++i) {
    std::snprintf(name, sizeof(name), "frame_%06zu.ppm", i);
    write_ppm(dir / name, video.frames[i]);
  }
  const json meta = {{"frame_rate", video.frame_rate}};
  atomic_write_file(dir / "meta.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Ground-truth series

TimeSeries load_time_series(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DecodeFailure("load_time_series: cannot open " + path.string());
  TimeSeries out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ls(line);
    double t = 0.0, v = 0.0;
    if (!(ls >> t >> v))
      throw DecodeFailure("load_time_series: malformed row in " + path.string());
    if (!out.t.empty() && t <= out.t.back())
      throw DecodeFailure("load_time_series: time not ascending in " + path.string());
    out.t.push_back(t);
    out.v.push_back(v);
  }
  if (out.t.empty()) throw DecodeFailure("load_time_series: empty file " + path.string());
  return out;
}

void write_time_series(const std::filesystem::path& path, const TimeSeries& series) {
  if (series.t.size() != series.v.size()) throw Error("write_time_series: ragged series");
  std::string blob;
  char buf[64];
  for (std::size_t i = 0; i < series.t.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", series.t[i], series.v[i]);
    blob += buf;
  }
  atomic_write_file(path, blob);
}

Waveform resample_to_frames(const TimeSeries& series, double fs, std::size_t n) {
  if (series.t.empty()) throw Error("resample_to_frames: empty series");
  if (fs <= 0.0) throw Error("resample_to_frames: nonpositive rate");
  Waveform out;
  out.fs = fs;
  out.samples.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double q = static_cast<double>(k) / fs;
    if (q <= series.t.front()) {
      out.samples[k] = series.v.front();
      continue;
    }
    if (q >= series.t.back()) {
      out.samples[k] = series.v.back();
      continue;
    }
    const auto it = std::upper_bound(series.t.begin(), series.t.end(), q);
    const std::size_t j = static_cast<std::size_t>(it - series.t.begin());
    const double t0 = series.t[j - 1], t1 = series.t[j];
    if (q == t0) {
      out.samples[k] = series.v[j - 1];
    } else {
      const double a = (q - t0) / (t1 - t0);
      out.samples[k] = (1.0 - a) * series.v[j - 1] + a * series.v[j];
    }
  }
  return out;
}

}  // namespace pulsegrid
