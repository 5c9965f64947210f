#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "oracles.hpp"
#include "stag/classify.hpp"
#include "stag/dataio.hpp"
#include "test_util.hpp"

namespace stag {
namespace {

namespace fs = std::filesystem;

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("stag_dataio_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

LocalFeatureSequence random_float_sequence(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(1, 12);
  auto s = LocalFeatureSequence::zeros(pick(rng), pick(rng), pick(rng));
  s.fps = 25.0 + static_cast<double>(pick(rng));
  s.values = testing::gaussian_vector(s.values.size(), rng, 3.0);
  round_to_float(s);
  return s;
}

using FeatureFile = TempDir;

TEST_F(FeatureFile, RandomRoundTripsAreBitExact) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto s = random_float_sequence(rng);
    write_features(s, dir_ / "f.rfex");
    const auto r = read_features(dir_ / "f.rfex");
    EXPECT_EQ(r.frame_count, s.frame_count);
    EXPECT_EQ(r.positions, s.positions);
    EXPECT_EQ(r.dim, s.dim);
    EXPECT_EQ(r.fps, s.fps);
    ASSERT_EQ(r.values.size(), s.values.size());
    EXPECT_EQ(std::memcmp(r.values.data(), s.values.data(), s.values.size() * sizeof(double)), 0);
  }
}

TEST(FeatureFormat, PayloadSizeFollowsHeader) {
  auto s = LocalFeatureSequence::zeros(15, 36, 8);
  const auto bytes = encode_features(s);
  EXPECT_EQ(bytes.size(), kFeatureHeaderBytes + 4u * 15 * 36 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RFEX");
}

TEST(FeatureFormat, CorruptionRaisesFormatError) {
  std::mt19937_64 rng(2);
  auto s = LocalFeatureSequence::zeros(6, 4, 3);
  s.values = testing::gaussian_vector(s.values.size(), rng);
  const auto bytes = encode_features(s);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{12}, std::size_t{23}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_features(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut))),
                 FeatureFormatError)
        << cut;
  }
  auto magic = bytes;
  magic[1] = 'x';
  EXPECT_THROW(decode_features(magic), FeatureFormatError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(decode_features(version), FeatureFormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_features(extra), FeatureFormatError);
  auto nan = bytes;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + kFeatureHeaderBytes, &q, 4);
  EXPECT_THROW(decode_features(nan), FeatureFormatError);
  EXPECT_THROW(read_features("/nonexistent/x.rfex"), FeatureFormatError);
}

using ManifestFile = TempDir;

TEST_F(ManifestFile, FormatParseRoundTrip) {
  std::vector<ManifestEntry> entries{
      {"a", "s1", Emotion::anger, Label::real, 100.0, "f/a.rfex", Split::train},
      {"b", "s1", Emotion::sadness, Label::fake, 29.97, "f/b.rfex", Split::test},
  };
  const std::string text = "# leading comment\n" + format_manifest(entries) + "\n# trailing\n";
  const auto m = parse_manifest(text, dir_, false);
  EXPECT_EQ(m.entries, entries);
  EXPECT_EQ(m.select(Split::test).size(), 1u);
  EXPECT_EQ(m.select(Split::train, Emotion::sadness).size(), 0u);
}

TEST_F(ManifestFile, RejectsDuplicatesAndDanglingPaths) {
  std::vector<ManifestEntry> entries{
      {"a", "s1", Emotion::anger, Label::real, 100.0, "a.rfex", Split::train},
      {"a", "s2", Emotion::anger, Label::fake, 100.0, "b.rfex", Split::train},
  };
  try {
    parse_manifest(format_manifest(entries), dir_, false);
    FAIL() << "duplicate id accepted";
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
  entries[1].video_id = "b";
  write_features(LocalFeatureSequence::zeros(1, 1, 1), dir_ / "a.rfex");
  binio::write_file_atomic(dir_ / "manifest.tsv", format_manifest(entries));
  try {
    load_manifest(dir_ / "manifest.tsv");
    FAIL() << "dangling path accepted";
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("b.rfex"), std::string::npos);
  }
  write_features(LocalFeatureSequence::zeros(1, 1, 1), dir_ / "b.rfex");
  EXPECT_EQ(load_manifest(dir_ / "manifest.tsv").entries.size(), 2u);
}

TEST(Manifest, RejectsMalformedLines) {
  EXPECT_THROW(parse_manifest("a\ts\tanger\treal\t100\tp\n", ".", false), ManifestError);
  EXPECT_THROW(parse_manifest("a\ts\tjoy\treal\t100\tp\ttrain\n", ".", false), ManifestError);
  EXPECT_THROW(parse_manifest("a\ts\tanger\tmaybe\t100\tp\ttrain\n", ".", false), ManifestError);
  EXPECT_THROW(parse_manifest("a\ts\tanger\treal\tfast\tp\ttrain\n", ".", false), ManifestError);
  EXPECT_THROW(parse_manifest("a\ts\tanger\treal\t100\tp\tholdout\n", ".", false), ManifestError);
  EXPECT_THROW(load_manifest("/nonexistent/manifest.tsv"), ManifestError);
}

SynthSpec small_spec(SynthTask task, std::uint64_t seed = 3) {
  SynthSpec s;
  s.task = task;
  s.seed = seed;
  s.videos_per_class = 10;
  s.frames = 48;
  return s;
}

std::vector<char> dataset_bytes(const SynthDataset& ds) {
  std::vector<char> out;
  const std::string m = format_manifest(ds.entries);
  out.insert(out.end(), m.begin(), m.end());
  for (const auto& s : ds.sequences) {
    const auto b = encode_features(s);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

TEST(Synthetic, SameSeedSameBytes) {
  for (SynthTask t : {SynthTask::order, SynthTask::cooccurrence}) {
    EXPECT_EQ(dataset_bytes(generate_synthetic(small_spec(t))), dataset_bytes(generate_synthetic(small_spec(t))));
    EXPECT_NE(dataset_bytes(generate_synthetic(small_spec(t, 3))), dataset_bytes(generate_synthetic(small_spec(t, 4))));
  }
}

TEST(Synthetic, ShapeAndSplits) {
  SynthSpec spec;
  const auto ds = generate_synthetic(spec);
  ASSERT_EQ(ds.entries.size(), 600u);
  std::array<std::size_t, 3> counts{};
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    ++counts[static_cast<std::size_t>(ds.entries[i].split)];
    EXPECT_EQ(ds.sequences[i].video_id, ds.entries[i].video_id);
    EXPECT_EQ(ds.sequences[i].frame_count, spec.frames);
    EXPECT_EQ(ds.sequences[i].positions, spec.positions);
    EXPECT_EQ(ds.sequences[i].dim, 16u);
  }
  EXPECT_EQ(counts, (std::array<std::size_t, 3>{480, 60, 60}));
  EXPECT_EQ(synth_split(8, 10), Split::val);
  EXPECT_EQ(synth_split(9, 10), Split::test);
}

TEST(Synthetic, InfeasibleSpecs) {
  SynthSpec s;
  s.frames = 10;
  try {
    generate_synthetic(s);
    FAIL() << "short videos accepted";
  } catch (const InvalidSpec& e) {
    EXPECT_NE(std::string(e.what()).find("VideoTooShort"), std::string::npos);
  }
  s.frames = 50;  // not a multiple of states * dwell = 12
  EXPECT_THROW(generate_synthetic(s), InvalidSpec);
  s = SynthSpec{};
  s.task = SynthTask::cooccurrence;
  s.rho = 1.0;
  EXPECT_THROW(generate_synthetic(s), InvalidSpec);
}

TEST(Synthetic, OrderTaskClassesShareFrameMarginals) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SynthSpec spec;
    spec.seed = seed;
    const auto ds = generate_synthetic(spec);
    const std::size_t per = spec.positions * spec.dim;
    for (Emotion e : kAllEmotions) {
      RealVector real(per, 0.0), fake(per, 0.0), real_sq(per, 0.0), fake_sq(per, 0.0);
      double n = 0.0;
      for (const auto& s : ds.sequences) {
        if (s.emotion != e) continue;
        auto& acc = s.label == Label::real ? real : fake;
        auto& sq = s.label == Label::real ? real_sq : fake_sq;
        if (s.label == Label::real) n += static_cast<double>(s.frame_count);
        for (std::size_t f = 0; f < s.frame_count; ++f)
          for (std::size_t i = 0; i < per; ++i) {
            acc[i] += s.values[f * per + i];
            sq[i] += s.values[f * per + i] * s.values[f * per + i];
          }
      }
      // per-element two-sample z-scores of the class means; subject offsets
      // are shared by each real/fake pair and cancel
      const double sigma = spec.noise * std::sqrt(2.0 / n);
      std::size_t beyond3 = 0;
      for (std::size_t i = 0; i < per; ++i) {
        const double z = (real[i] - fake[i]) / n / sigma;
        EXPECT_LT(std::abs(z), 5.0) << "seed " << seed << " emotion " << to_string(e) << " element " << i;
        beyond3 += std::abs(z) > 3.0;
      }
      EXPECT_LE(beyond3, 2u) << "seed " << seed << " emotion " << to_string(e);
    }
  }
}

TEST(Synthetic, CooccurrenceNeedsSecondOrderStatistics) {
  SynthSpec spec;
  spec.task = SynthTask::cooccurrence;
  spec.videos_per_class = 17;  // 204 videos
  spec.frames = 30;
  const auto ds = generate_synthetic(spec);
  // The video mean of subject-normalized features is identically zero, so the
  // first-moment descriptor is taken from the raw features.
  auto descriptor = [](const LocalFeatureSequence& raw, bool bilinear) {
    RealVector v;
    if (bilinear) {
      const auto s = subject_normalize(raw);
      v = oracle::bilinear_pool(FeatureView(s.values, s.dim));
    } else {
      const FeatureView f(raw.values, raw.dim);
      v.assign(raw.dim, 0.0);
      for (std::size_t n = 0; n < f.size(); ++n) axpy(1.0, f[n], v);
    }
    return l2_normalize(power_normalize(v, 0.5));
  };
  // 5-fold cross-validation per emotion; folds keep each subject's real/fake
  // pair together.
  for (bool bilinear : {false, true}) {
    std::size_t correct = 0, total = 0;
    for (Emotion e : kAllEmotions) {
      std::vector<RealVector> x;
      std::vector<Label> y;
      std::vector<std::size_t> fold;
      for (std::size_t i = 0; i < ds.entries.size(); ++i) {
        if (ds.entries[i].emotion != e) continue;
        x.push_back(descriptor(ds.sequences[i], bilinear));
        y.push_back(ds.entries[i].label);
        fold.push_back(std::stoul(ds.entries[i].video_id.substr(ds.entries[i].video_id.rfind('_') + 1)) % 5);
      }
      for (std::size_t k = 0; k < 5; ++k) {
        Matrix xt(0, x.front().size());
        std::vector<Label> yt;
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (fold[i] == k) continue;
          xt.data.insert(xt.data.end(), x[i].begin(), x[i].end());
          ++xt.rows;
          yt.push_back(y[i]);
        }
        const SvmModel m = svm_train(xt, yt);
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (fold[i] != k) continue;
          correct += svm_predict(m, x[i]) == y[i];
          ++total;
        }
      }
    }
    ASSERT_EQ(total, 204u);
    const double acc = static_cast<double>(correct) / static_cast<double>(total);
    if (bilinear) {
      EXPECT_GE(acc, 0.90);
    } else {
      EXPECT_LE(acc, 0.60);
    }
  }
}

TEST_F(TempDir, WrittenDatasetLoadsBack) {
  const auto ds = generate_synthetic(small_spec(SynthTask::order));
  const auto manifest = write_dataset(ds, dir_);
  const auto m = load_manifest(manifest);
  ASSERT_EQ(m.entries, ds.entries);
  const auto seqs = load_sequences(m, m.entries);
  for (std::size_t i = 0; i < seqs.size(); ++i) EXPECT_EQ(seqs[i], ds.sequences[i]);
}

}  // namespace
}  // namespace stag
