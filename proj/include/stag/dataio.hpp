#pragma once

// Feature files, manifests, and the synthetic real/fake expression corpus.
//
// Feature file (little-endian):
//   "RFEX" | u32 version | u32 F | u32 M | u32 D | f32 fps | F*M*D f32 values
// with values frame-major, then position-major.
//
// Manifest: one video per line, tab-separated
//   video_id subject_id emotion label fps path split
// with '#' starting a comment line; paths are relative to the manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "stag/binio.hpp"
#include "stag/errors.hpp"
#include "stag/numkit.hpp"
#include "stag/pipeline.hpp"

namespace stag {

// ---------------------------------------------------------------------------
// Feature files

inline constexpr std::string_view kFeatureMagic = "RFEX";
inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 24;

/// Values are stored as f32; sequences whose values are already
/// float-representable round-trip bit for bit.
inline std::vector<char> encode_features(const LocalFeatureSequence& seq) {
  seq.validate();
  binio::Writer w;
  w.raw(kFeatureMagic);
  w.u32(kFeatureFormatVersion);
  w.u32(static_cast<std::uint32_t>(seq.frame_count));
  w.u32(static_cast<std::uint32_t>(seq.positions));
  w.u32(static_cast<std::uint32_t>(seq.dim));
  w.f32(static_cast<float>(seq.fps));
  for (double v : seq.values) w.f32(static_cast<float>(v));
  return w.bytes();
}

/// Parses a feature file; identity fields (ids, emotion, label) stay at their
/// defaults and come from the manifest.
inline LocalFeatureSequence decode_features(std::vector<char> bytes, const std::string& what = "feature file") {
  binio::Reader r(std::move(bytes));
  if (r.raw(4) != kFeatureMagic) throw FeatureFormatError(what + ": bad magic, not a feature file");
  const std::uint32_t version = r.u32();
  if (!r.ok()) throw FeatureFormatError(what + ": truncated header");
  if (version != kFeatureFormatVersion) {
    throw FeatureFormatError(what + ": format version " + std::to_string(version) + ", expected " +
                             std::to_string(kFeatureFormatVersion));
  }
  LocalFeatureSequence s;
  s.frame_count = r.u32();
  s.positions = r.u32();
  s.dim = r.u32();
  s.fps = r.f32();
  if (!r.ok()) throw FeatureFormatError(what + ": truncated header");
  if (s.positions == 0 || s.dim == 0) throw FeatureFormatError(what + ": zero M or D in header");
  if (!(s.fps > 0.0) || !std::isfinite(s.fps)) throw FeatureFormatError(what + ": frame rate must be positive");
  const std::uint64_t count = static_cast<std::uint64_t>(s.frame_count) * s.positions * s.dim;
  if (count * 4 != r.remaining()) {
    throw FeatureFormatError(what + ": payload holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                             std::to_string(count * 4));
  }
  s.values.resize(count);
  for (auto& v : s.values) {
    v = r.f32();
    if (!std::isfinite(v)) throw FeatureFormatError(what + ": non-finite value in payload");
  }
  return s;
}

inline void write_features(const LocalFeatureSequence& seq, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_features(seq));
}

inline LocalFeatureSequence read_features(const std::filesystem::path& path) {
  std::vector<char> bytes;
  if (!binio::read_file(path, bytes)) throw FeatureFormatError("cannot open " + path.string());
  return decode_features(std::move(bytes), path.string());
}

/// Rounds every value (and the frame rate) to single precision, the on-disk
/// resolution.
inline void round_to_float(LocalFeatureSequence& seq) {
  for (auto& v : seq.values) v = static_cast<double>(static_cast<float>(v));
  seq.fps = static_cast<double>(static_cast<float>(seq.fps));
}

// ---------------------------------------------------------------------------
// Manifests

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

struct ManifestEntry {
  std::string video_id;
  std::string subject_id;
  Emotion emotion = Emotion::anger;
  Label label = Label::real;
  double fps = 100.0;
  std::string path;  // relative to the manifest directory
  Split split = Split::train;
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }

  std::vector<ManifestEntry> select(Split split, std::optional<Emotion> emotion = std::nullopt) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == split && (!emotion || e.emotion == *emotion)) out.push_back(e);
    }
    return out;
  }
};

inline std::string format_manifest(std::span<const ManifestEntry> entries) {
  std::string out = "# video_id\tsubject_id\temotion\tlabel\tfps\tpath\tsplit\n";
  for (const auto& e : entries) {
    char fps[32];
    std::snprintf(fps, sizeof fps, "%.9g", e.fps);
    out += e.video_id + '\t' + e.subject_id + '\t' + std::string(to_string(e.emotion)) + '\t' +
           std::string(to_string(e.label)) + '\t' + fps + '\t' + e.path + '\t' + std::string(to_string(e.split)) + '\n';
  }
  return out;
}

/// Parses manifest text. `check_paths` verifies each feature file exists
/// under `base_dir`.
inline Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir, bool check_paths = true) {
  Manifest m;
  m.base_dir = base_dir;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = "manifest line " + std::to_string(line_no);
    if (f.size() != 7) throw ManifestError(where + ": expected 7 tab-separated fields, found " + std::to_string(f.size()));
    ManifestEntry e;
    e.video_id = f[0];
    e.subject_id = f[1];
    const auto emo = parse_emotion(f[2]);
    const auto lab = parse_label(f[3]);
    const auto split = parse_split(f[6]);
    if (e.video_id.empty()) throw ManifestError(where + ": empty video id");
    if (!emo) throw ManifestError(where + ": unknown emotion '" + f[2] + "'");
    if (!lab) throw ManifestError(where + ": unknown label '" + f[3] + "'");
    if (!split) throw ManifestError(where + ": unknown split '" + f[6] + "'");
    e.emotion = *emo;
    e.label = *lab;
    e.split = *split;
    try {
      std::size_t used = 0;
      e.fps = std::stod(f[4], &used);
      if (used != f[4].size() || !(e.fps > 0.0)) throw std::invalid_argument("fps");
    } catch (const std::exception&) {
      throw ManifestError(where + ": invalid frame rate '" + f[4] + "'");
    }
    e.path = f[5];
    if (!seen.insert(e.video_id).second) throw ManifestError(where + ": duplicate video id '" + e.video_id + "'");
    if (check_paths && !std::filesystem::is_regular_file(base_dir / e.path)) {
      throw ManifestError(where + ": feature file '" + e.path + "' for " + e.video_id + " does not exist");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path(), check_paths);
}

/// Reads one manifest entry's features and stamps its identity fields.
inline LocalFeatureSequence load_sequence(const Manifest& m, const ManifestEntry& e) {
  LocalFeatureSequence s = read_features(m.resolve(e));
  s.video_id = e.video_id;
  s.subject_id = e.subject_id;
  s.emotion = e.emotion;
  s.label = e.label;
  s.fps = e.fps;
  return s;
}

inline std::vector<LocalFeatureSequence> load_sequences(const Manifest& m, std::span<const ManifestEntry> entries) {
  std::vector<LocalFeatureSequence> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_sequence(m, e));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class SynthTask : std::uint8_t { order, cooccurrence };

inline std::string_view to_string(SynthTask t) { return t == SynthTask::order ? "order" : "cooccurrence"; }

inline std::optional<SynthTask> parse_task(std::string_view s) {
  if (s == "order") return SynthTask::order;
  if (s == "cooccurrence") return SynthTask::cooccurrence;
  return std::nullopt;
}

/// Order task: every emotion has L latent micro-states, each a prototype set
/// of M local feature means. A video walks the states cyclically, dwelling a
/// fixed number of frames in each, starting at a random phase; real videos
/// follow one cyclic order and fake videos the reverse, so both classes visit
/// every state equally often and share their per-frame marginals. Prototypes
/// are first_moment * c_s (seen by averaging over positions) plus
/// second_order * p_{s,m} (zero mean over positions, only visible to
/// second-order statistics of a frame).
///
/// Co-occurrence task: zero-mean, unit-variance local features whose chosen
/// dimension pairs correlate with +rho (real) or -rho (fake) within a frame.
///
/// Both tasks add a per-subject constant offset per position and Gaussian
/// noise; real and fake video i of an emotion share subject i.
struct SynthSpec {
  std::uint64_t seed = 7;
  SynthTask task = SynthTask::order;
  std::size_t videos_per_class = 50;  // per (emotion, label)
  std::size_t frames = 120;
  std::size_t positions = 9;
  std::size_t dim = 16;
  std::size_t states = 4;
  std::size_t dwell = 3;
  double noise = 1.0;
  double first_moment = 0.13;
  double second_order = 1.5;
  double subject_offset = 1.0;
  double rho = 0.6;
  double fps = 100.0;
  std::size_t min_frames = 15;  // one K*T interval

  void validate() const {
    auto fail = [](const std::string& why) { throw InvalidSpec(why); };
    if (frames < min_frames) {
      fail(std::to_string(frames) + " frames per video, but one interval needs " + std::to_string(min_frames) +
           " (VideoTooShort)");
    }
    if (videos_per_class == 0 || positions == 0 || dim == 0) fail("counts and dimensions must be positive");
    if (!(noise >= 0.0) || !(fps > 0.0)) fail("noise must be non-negative and fps positive");
    if (task == SynthTask::order) {
      if (states < 2 || dwell == 0) fail("order task needs at least two states and a positive dwell");
      if (frames % (states * dwell) != 0) {
        fail("order task needs frames divisible by states*dwell = " + std::to_string(states * dwell) +
             " so both classes visit every state equally often");
      }
    } else {
      if (dim < 2) fail("co-occurrence task needs D >= 2");
      if (!(rho > 0.0 && rho < 1.0)) fail("rho must lie in (0, 1)");
    }
  }
};

struct SynthDataset {
  std::vector<ManifestEntry> entries;
  std::vector<LocalFeatureSequence> sequences;  // parallel to entries
};

/// 80/10/10 split of n videos: round(0.8 n) train, half the rest val.
inline Split synth_split(std::size_t index, std::size_t n) {
  const auto train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const std::size_t val = (n - train) / 2;
  if (index < train) return Split::train;
  return index < train + val ? Split::val : Split::test;
}

inline SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds;
  const std::size_t M = spec.positions, D = spec.dim, F = spec.frames;
  for (std::size_t ei = 0; ei < kAllEmotions.size(); ++ei) {
    const Emotion emotion = kAllEmotions[ei];
    std::mt19937_64 rng(derive_seed(spec.seed, 100 + ei));

    // emotion-level structure
    std::vector<Matrix> proto;  // per state: M x D
    std::vector<std::size_t> cycle(spec.states);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (spec.task == SynthTask::order) {
      for (std::size_t s = 0; s < spec.states; ++s) {
        const RealVector c = detail::normal_vector(D, rng);
        Matrix p(M, D);
        p.data = detail::normal_vector(M * D, rng);
        for (std::size_t k = 0; k < D; ++k) {
          double mean = 0.0;
          for (std::size_t m = 0; m < M; ++m) mean += p(m, k);
          mean /= static_cast<double>(M);
          for (std::size_t m = 0; m < M; ++m) p(m, k) -= mean;
        }
        Matrix mu(M, D);
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < D; ++k) mu(m, k) = spec.first_moment * c[k] + spec.second_order * p(m, k);
        proto.push_back(std::move(mu));
      }
      for (std::size_t s = 0; s < spec.states; ++s) cycle[s] = s;
      std::shuffle(cycle.begin(), cycle.end(), rng);
    } else {
      std::vector<std::size_t> dims(D);
      for (std::size_t k = 0; k < D; ++k) dims[k] = k;
      std::shuffle(dims.begin(), dims.end(), rng);
      for (std::size_t k = 0; k + 1 < D; k += 2) pairs.emplace_back(dims[k], dims[k + 1]);
    }
    std::vector<Matrix> offsets;  // per subject: M x D
    for (std::size_t i = 0; i < spec.videos_per_class; ++i) {
      Matrix o(M, D);
      o.data = detail::normal_vector(M * D, rng, spec.subject_offset);
      offsets.push_back(std::move(o));
    }

    for (Label label : {Label::real, Label::fake}) {
      for (std::size_t i = 0; i < spec.videos_per_class; ++i) {
        std::mt19937_64 vrng(derive_seed(derive_seed(spec.seed, 100 + ei), 2 * i + (label == Label::fake)));
        std::normal_distribution<double> g(0.0, 1.0);
        LocalFeatureSequence s = LocalFeatureSequence::zeros(F, M, D);
        s.video_id = std::string(to_string(emotion)) + "_" + std::string(to_string(label)) + "_" + std::to_string(i);
        s.subject_id = std::string(to_string(emotion)) + "_s" + std::to_string(i);
        s.emotion = emotion;
        s.label = label;
        s.fps = spec.fps;
        if (spec.task == SynthTask::order) {
          const std::size_t period = spec.states * spec.dwell;
          const std::size_t phase = std::uniform_int_distribution<std::size_t>(0, period - 1)(vrng);
          for (std::size_t f = 0; f < F; ++f) {
            const std::size_t step = ((f + phase) % period) / spec.dwell;
            const std::size_t pos = label == Label::real ? step : (spec.states - step) % spec.states;
            const Matrix& mu = proto[cycle[pos]];
            for (std::size_t m = 0; m < M; ++m)
              for (std::size_t k = 0; k < D; ++k) s.at(f, m, k) = mu(m, k) + offsets[i](m, k) + spec.noise * g(vrng);
          }
        } else {
          const double sign = label == Label::real ? 1.0 : -1.0;
          const double rest = std::sqrt(1.0 - spec.rho * spec.rho);
          for (std::size_t f = 0; f < F; ++f)
            for (std::size_t m = 0; m < M; ++m) {
              for (std::size_t k = 0; k < D; ++k) s.at(f, m, k) = g(vrng);
              for (const auto& [a, b] : pairs) s.at(f, m, b) = sign * spec.rho * s.at(f, m, a) + rest * s.at(f, m, b);
              for (std::size_t k = 0; k < D; ++k) s.at(f, m, k) += offsets[i](m, k) + spec.noise * g(vrng);
            }
        }
        round_to_float(s);
        ds.entries.push_back(ManifestEntry{s.video_id, s.subject_id, emotion, label, s.fps,
                                           "features/" + s.video_id + ".rfex", synth_split(i, spec.videos_per_class)});
        ds.sequences.push_back(std::move(s));
      }
    }
  }
  return ds;
}

/// Writes the feature files and manifest.tsv under `dir`.
inline std::filesystem::path write_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < ds.entries.size(); ++i) write_features(ds.sequences[i], dir / ds.entries[i].path);
  const auto manifest = dir / "manifest.tsv";
  binio::write_file_atomic(manifest, format_manifest(ds.entries));
  return manifest;
}

}  // namespace stag
