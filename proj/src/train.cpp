#include "pulsegrid/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pulsegrid/losses.hpp"
#include "pulsegrid/signal.hpp"
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

}  // namespace

std::string TrainConfig::to_json() const {
  json doc{{"clip_length_s", clip_length_s},
           {"k", k},
           {"s_out", s_out},
           {"base_channels", base_channels},
           {"learning_rate", learning_rate},
           {"weight_decay", weight_decay},
           {"epochs", epochs},
           {"grad_accum", grad_accum},
           {"seed", seed},
           {"ipr_eval_every", ipr_eval_every},
           {"stop_after_steps", stop_after_steps}};
  return doc.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw BadConfig(std::string("TrainConfig: unparseable JSON: ") + e.what());
  }
  if (!doc.is_object()) throw BadConfig("TrainConfig: JSON must be an object");
  static const char* known[] = {"clip_length_s", "k",          "s_out",
                                "base_channels", "learning_rate", "weight_decay",
                                "epochs",        "grad_accum",    "seed",
                                "ipr_eval_every", "stop_after_steps"};
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw BadConfig("TrainConfig: unknown field \"" + key + "\"");
  }
  TrainConfig cfg;
  try {
    cfg.clip_length_s = doc.value("clip_length_s", cfg.clip_length_s);
    cfg.k = doc.value("k", cfg.k);
    cfg.s_out = doc.value("s_out", cfg.s_out);
    cfg.base_channels = doc.value("base_channels", cfg.base_channels);
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.weight_decay = doc.value("weight_decay", cfg.weight_decay);
    cfg.epochs = doc.value("epochs", cfg.epochs);
    cfg.grad_accum = doc.value("grad_accum", cfg.grad_accum);
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.ipr_eval_every = doc.value("ipr_eval_every", cfg.ipr_eval_every);
    cfg.stop_after_steps = doc.value("stop_after_steps", cfg.stop_after_steps);
  } catch (const json::exception& e) {
    throw BadConfig(std::string("TrainConfig: bad field: ") + e.what());
  }
  return cfg;
}

void validate_config(const TrainConfig& cfg) {
  if (cfg.clip_length_s != 5.0 && cfg.clip_length_s != 10.0 && cfg.clip_length_s != 30.0)
    throw BadConfig("TrainConfig: clip_length_s must be 5, 10 or 30");
  if (cfg.k < 1) throw BadConfig("TrainConfig: k must be at least 1");
  if (cfg.s_out != 1 && cfg.s_out != 2 && cfg.s_out != 4 && cfg.s_out != 8)
    throw BadConfig("TrainConfig: s_out must be 1, 2, 4 or 8");
  if (cfg.s_out * cfg.s_out * cfg.k < 2)
    throw BadConfig("TrainConfig: fewer than two samples per clip (s_out^2 * k)");
  if (cfg.base_channels == 0) throw BadConfig("TrainConfig: base_channels must be positive");
  if (!std::isfinite(cfg.learning_rate) || cfg.learning_rate < 0.0)
    throw BadConfig("TrainConfig: learning_rate must be finite and nonnegative");
  if (!std::isfinite(cfg.weight_decay) || cfg.weight_decay < 0.0)
    throw BadConfig("TrainConfig: weight_decay must be finite and nonnegative");
  if (cfg.grad_accum < 1) throw BadConfig("TrainConfig: grad_accum must be at least 1");
}

RppgEncoder init_model(const TrainConfig& cfg, double frame_rate) {
  validate_config(cfg);
  ModelConfig mc;
  mc.s_out = cfg.s_out;
  mc.base_channels = cfg.base_channels;
  mc.frame_rate = frame_rate;
  return RppgEncoder(mc, derive_seed(cfg.seed, "init"));
}

std::vector<std::pair<std::size_t, std::size_t>> make_pairs(const Manifest& manifest,
                                                            std::uint64_t seed,
                                                            std::size_t epoch) {
  std::map<std::string, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    by_source[manifest.entries[i].source].push_back(i);
  if (by_source.size() < 2)
    throw SingleVideo("make_pairs: need clips from at least two source videos");

  Rng rng(derive_seed(seed, "pairs", epoch));
  std::vector<std::vector<std::size_t>> groups;
  groups.reserve(by_source.size());
  for (auto& [source, clips] : by_source) {
    (void)source;
    // Fisher-Yates; std::shuffle is not pinned down across standard libraries.
    for (std::size_t i = clips.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(clips[i - 1], clips[j]);
    }
    groups.push_back(std::move(clips));
  }

  const std::size_t none = groups.size();
  std::vector<std::size_t> used(groups.size(), 0);
  // Uniform choice among the sources with the most clips left, optionally
  // excluding one; draining the largest source first is what keeps a balanced
  // cohort from stranding pairable clips.
  auto pick = [&](std::size_t skip) {
    std::size_t most = 0;
    std::vector<std::size_t> cands;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (g == skip) continue;
      const std::size_t left = groups[g].size() - used[g];
      if (left == 0 || left < most) continue;
      if (left > most) {
        most = left;
        cands.clear();
      }
      cands.push_back(g);
    }
    if (cands.empty()) return none;
    return cands[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int64_t>(cands.size()) - 1))];
  };

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  while (true) {
    const std::size_t g1 = pick(none);
    if (g1 == none) break;
    const std::size_t g2 = pick(g1);
    if (g2 == none) break;
    pairs.emplace_back(groups[g1][used[g1]++], groups[g2][used[g2]++]);
  }
  return pairs;
}

Trainer::Trainer(RppgEncoder* model, const TrainConfig& cfg)
    : model_(model),
      cfg_((validate_config(cfg), cfg)),
      opt_(model->parameters(), AdamW::Config{.lr = cfg.learning_rate,
                                             .weight_decay = cfg.weight_decay}) {
  opt_.zero_grad();
}

StepStats Trainer::train_step(const Tensor4& clip_a, const Tensor4& clip_b, Rng& rng) {
  if (clip_a.t != clip_b.t)
    throw BadShape("train_step: paired clips hold " + std::to_string(clip_a.t) + " and " +
                   std::to_string(clip_b.t) + " frames");

  Tape tape_a, tape_b;
  const STBlock block_a = model_->forward(clip_a, true, &tape_a);
  const STBlock block_b = model_->forward(clip_b, true, &tape_b);

  const auto samples_a = sample_block(block_a, cfg_.k, rng);
  const auto samples_b = sample_block(block_b, cfg_.k, rng);

  const std::size_t dt = samples_a.front().second.samples.size();
  const PsdTransform psd(dt, block_a.fs, kTrainPsdResolutionHz);

  auto spectra = [&psd](const std::vector<std::pair<SampleSpec, Waveform>>& samples,
                        std::vector<PsdTransform::State>& states, const char* id) {
    PSDSet set;
    set.video_id = id;
    set.freqs = psd.freqs();
    set.psds.reserve(samples.size());
    states.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
      set.psds.push_back(psd.forward(samples[i].second.samples, &states[i]));
    return set;
  };
  std::vector<PsdTransform::State> states_a, states_b;
  const PSDSet set_a = spectra(samples_a, states_a, "a");
  const PSDSet set_b = spectra(samples_b, states_b, "b");

  const LossBreakdown lb = total_loss_backward(set_a, set_b);

  // Route d loss / d spectrum back through each sample's transform into the
  // block cells it was cut from, then walk the network tape. Accumulation
  // over grad_accum pairs averages, hence the scale.
  const double scale = 1.0 / static_cast<double>(cfg_.grad_accum);
  auto backprop = [&](const Tape& tape, const STBlock& block,
                      const std::vector<std::pair<SampleSpec, Waveform>>& samples,
                      const std::vector<PsdTransform::State>& states,
                      const std::vector<std::vector<double>>& d_psds) {
    STBlock d_block;
    d_block.values.assign(block.values.size(), 0.0);
    d_block.t = block.t;
    d_block.s = block.s;
    d_block.fs = block.fs;
    std::vector<double> d_power;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      d_power = d_psds[i];
      for (double& v : d_power) v *= scale;
      const std::vector<double> d_samples = psd.backward(states[i], d_power);
      const SampleSpec& spec = samples[i].first;
      for (std::size_t j = 0; j < d_samples.size(); ++j)
        d_block.at(spec.t0 + j, spec.h, spec.w) += d_samples[j];
    }
    model_->backward(tape, d_block, /*param_grads=*/true);
  };
  backprop(tape_a, block_a, samples_a, states_a, lb.d_a);
  backprop(tape_b, block_b, samples_b, states_b, lb.d_b);

  if (++accum_fill_ >= cfg_.grad_accum) {
    opt_.step();
    opt_.zero_grad();
    accum_fill_ = 0;
  }
  return {lb.total, lb.lp, lb.ln};
}

std::vector<MonitorClip> monitor_set(const std::filesystem::path& manifest_path,
                                     std::size_t frames) {
  const Manifest manifest = read_manifest(manifest_path);
  if (manifest.extra.empty()) return {};
  json doc;
  try {
    doc = json::parse(manifest.extra);
  } catch (const json::exception&) {
    return {};
  }
  if (!doc.is_object() || !doc.contains("videos") || !doc["videos"].is_array()) return {};
  std::map<std::string, double> hr_by_source;
  for (const json& video : doc["videos"]) {
    try {
      hr_by_source[video.at("source").get<std::string>()] = video.at("hr_bpm").get<double>();
    } catch (const json::exception&) {
      // a video record without the two fields simply is not monitorable
    }
  }
  const auto base = manifest_path.parent_path();
  std::vector<MonitorClip> out;
  for (const auto& entry : manifest.entries) {
    const auto it = hr_by_source.find(entry.source);
    if (it == hr_by_source.end()) continue;
    out.push_back({base / entry.file, it->second, frames});
  }
  return out;
}

namespace {

// Keep only the first n frames; n of zero (or past the end) keeps everything.
void truncate_clip(Tensor4& x, std::size_t n) {
  if (n == 0 || n >= x.t) return;
  Tensor4 y(x.c, n, x.h, x.w);
  for (std::size_t c = 0; c < x.c; ++c)
    std::copy(x.frame(c, 0), x.frame(c, 0) + n * x.plane(), y.frame(c, 0));
  x = std::move(y);
}

}  // namespace

double monitor_ipr(RppgEncoder& model, const std::vector<MonitorClip>& monitors) {
  if (monitors.empty()) throw Error("monitor_ipr: no monitor clips");
  double acc = 0.0;
  for (const MonitorClip& monitor : monitors) {
    StoredClip clip = read_clip(monitor.file);
    truncate_clip(clip.video, monitor.frames);
    const Waveform trace = spatial_average(model.forward(clip.video, false));
    double ratio = 1.0;
    try {
      ratio = irrelevant_power_ratio(compute_psd(trace), monitor.hr_bpm);
    } catch (const ConstantSignal&) {
      // a flat trace has no band power anywhere near the reference rate
    }
    acc += ratio;
  }
  return acc / static_cast<double>(monitors.size());
}

namespace {

// The run fields that must agree between sessions of one run directory.
// stop_after_steps is the one knob a resuming caller may legitimately change.
bool same_run(const TrainConfig& a, const TrainConfig& b) {
  return a.clip_length_s == b.clip_length_s && a.k == b.k && a.s_out == b.s_out &&
         a.base_channels == b.base_channels && a.learning_rate == b.learning_rate &&
         a.weight_decay == b.weight_decay && a.epochs == b.epochs &&
         a.grad_accum == b.grad_accum && a.seed == b.seed &&
         a.ipr_eval_every == b.ipr_eval_every;
}

// Full training state: model tensors, optimizer moments, and the scalar
// progress counters, all in the optimizer's checkpoint namespace so the model
// loader skips them.
void persist_state(const std::filesystem::path& path, RppgEncoder& model, AdamW& opt,
                   std::size_t steps_done, double best, double first, double last) {
  std::vector<std::pair<std::string, const std::vector<double>*>> tensors;
  for (const auto& [name, vec] : model.state_tensors()) tensors.emplace_back(name, vec);
  for (const auto& [name, vec] : opt.state_tensors()) tensors.emplace_back(name, vec);
  const std::vector<double> opt_step = {static_cast<double>(opt.step_count())};
  const std::vector<double> progress = {static_cast<double>(steps_done)};
  const std::vector<double> monitor = {best, first, last};
  tensors.emplace_back("opt.step", &opt_step);
  tensors.emplace_back("opt.progress", &progress);
  tensors.emplace_back("opt.monitor", &monitor);
  write_checkpoint(path, model.config().to_json(), tensors);
}

}  // namespace

FitResult fit(const std::filesystem::path& manifest_path, const TrainConfig& cfg,
              const std::filesystem::path& run_dir, const std::vector<MonitorClip>& monitors,
              const std::atomic<bool>* stop) {
  validate_config(cfg);
  const Manifest manifest = read_manifest(manifest_path);
  const auto clip_dir = manifest_path.parent_path();

  std::set<std::string> sources;
  for (const auto& entry : manifest.entries) sources.insert(entry.source);
  if (sources.size() < 2)
    throw SingleVideo("fit: manifest holds fewer than two source videos");

  const auto want_t =
      static_cast<std::size_t>(std::lround(cfg.clip_length_s * manifest.frame_rate));
  for (const auto& entry : manifest.entries) {
    if (entry.t != want_t)
      throw BadConfig("fit: clip " + entry.file + " holds " + std::to_string(entry.t) +
                      " frames where clip_length_s needs " + std::to_string(want_t));
  }

  std::filesystem::create_directories(run_dir);
  const auto config_path = run_dir / "config.json";
  const auto latest_path = run_dir / "latest.pgckpt";
  const bool resuming = std::filesystem::exists(latest_path);
  if (resuming && std::filesystem::exists(config_path)) {
    const auto blob = read_binary_file(config_path);
    if (!same_run(TrainConfig::from_json(std::string(blob.begin(), blob.end())), cfg))
      throw BadConfig("fit: config contradicts this run directory's earlier session");
  }
  atomic_write_file(config_path, cfg.to_json());

  std::size_t steps_done = 0;
  double best = kNan, first = kNan, last = kNan;
  std::optional<RppgEncoder> model;
  std::optional<Checkpoint> saved;
  if (resuming) {
    saved = read_checkpoint(latest_path);
    model.emplace(*saved);
    if (model->config().s_out != cfg.s_out || model->config().base_channels != cfg.base_channels)
      throw BadConfig("fit: checkpoint architecture differs from the config");
  } else {
    model.emplace(init_model(cfg, manifest.frame_rate));
  }
  Trainer trainer(&*model, cfg);
  if (resuming) {
    for (auto& [name, vec] : trainer.opt().state_tensors()) {
      const std::vector<double>* src = saved->find(name);
      if (!src || src->size() != vec->size())
        throw CorruptCheckpoint("CorruptCheckpoint: optimizer tensor " + name + " unusable");
      *vec = *src;
    }
    const std::vector<double>* opt_step = saved->find("opt.step");
    const std::vector<double>* progress = saved->find("opt.progress");
    const std::vector<double>* monitor = saved->find("opt.monitor");
    if (!opt_step || opt_step->size() != 1 || !progress || progress->size() != 1 || !monitor ||
        monitor->size() != 3)
      throw CorruptCheckpoint("CorruptCheckpoint: training progress tensors unusable");
    trainer.opt().set_step_count(static_cast<uint64_t>((*opt_step)[0]));
    steps_done = static_cast<std::size_t>((*progress)[0]);
    best = (*monitor)[0];
    first = (*monitor)[1];
    last = (*monitor)[2];
  }

  // The whole run's step sequence is a pure function of (manifest, seed), so
  // a resumed session rebuilds it and jumps straight to its step counter.
  std::vector<std::pair<std::size_t, std::size_t>> schedule;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& pair : make_pairs(manifest, cfg.seed, epoch)) schedule.push_back(pair);
  }
  const std::size_t total = schedule.size();

  FitResult result;
  result.final_checkpoint = run_dir / "final.pgckpt";
  result.resume_checkpoint = latest_path;
  result.log_file = run_dir / "train_log.csv";
  const auto best_path = run_dir / "best.pgckpt";
  if (!std::isnan(best)) result.best_checkpoint = best_path;

  const bool fresh_log = !std::filesystem::exists(result.log_file);
  std::ofstream log(result.log_file, std::ios::app);
  if (!log) throw Error("fit: cannot open " + result.log_file.string());
  if (fresh_log) log << "step,loss,loss_pos,loss_neg,wall_s,ipr\n" << std::flush;

  const auto session_start = std::chrono::steady_clock::now();
  auto wall_s = [&session_start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - session_start)
        .count();
  };

  for (std::size_t gs = steps_done; gs < total; ++gs) {
    const bool halt =
        (stop && stop->load()) || (cfg.stop_after_steps > 0 && gs >= cfg.stop_after_steps);
    if (halt) {
      persist_state(latest_path, *model, trainer.opt(), gs, best, first, last);
      throw Interrupted("Interrupted: training stopped after " + std::to_string(gs) + " of " +
                        std::to_string(total) + " steps; resume state saved");
    }
    const ManifestEntry& entry_a = manifest.entries[schedule[gs].first];
    const ManifestEntry& entry_b = manifest.entries[schedule[gs].second];
    const Tensor4 clip_a = read_clip(clip_dir / entry_a.file).video;
    const Tensor4 clip_b = read_clip(clip_dir / entry_b.file).video;
    Rng rng(derive_seed(cfg.seed, "step", gs));
    const StepStats stats = trainer.train_step(clip_a, clip_b, rng);

    double ipr = kNan;
    if (!monitors.empty() && cfg.ipr_eval_every > 0 &&
        (gs % cfg.ipr_eval_every == 0 || gs + 1 == total)) {
      ipr = monitor_ipr(*model, monitors);
      if (std::isnan(first)) first = ipr;
      last = ipr;
      if (std::isnan(best) || ipr < best) {
        best = ipr;
        model->save(best_path);
        result.best_checkpoint = best_path;
      }
    }

    log << gs << ',' << fmt_double(stats.loss) << ',' << fmt_double(stats.lp) << ','
        << fmt_double(stats.ln) << ',';
    {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", wall_s());
      log << buf;
    }
    if (!std::isnan(ipr)) log << ',' << fmt_double(ipr);
    log << '\n' << std::flush;

    persist_state(latest_path, *model, trainer.opt(), gs + 1, best, first, last);
  }

  // A zero-step schedule (or a rerun of a finished one) still leaves
  // resumable state behind.
  persist_state(latest_path, *model, trainer.opt(), total, best, first, last);
  model->save(result.final_checkpoint);
  result.steps = total;
  result.first_ipr = first;
  result.last_ipr = last;
  result.best_ipr = best;
  return result;
}

}  // namespace pulsegrid
