#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include <json.hpp>

#include "valgate/trajectory_store.hpp"

namespace fs = std::filesystem;
using namespace valgate;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("valgate_ts_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

HiddenTrajectory make_traj(std::string qid, std::size_t idx, std::size_t steps, std::size_t dim, double reward,
                           std::mt19937_64& rng, Split split = Split::train) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  HiddenTrajectory t;
  t.question_id = std::move(qid);
  t.rollout_index = idx;
  t.hidden_dim = dim;
  t.terminal_reward = reward;
  t.answer_text = "ans" + std::to_string(idx);
  t.split = split;
  for (std::size_t i = 0; i < steps * dim; ++i) t.values.push_back(g(rng));
  return t;
}

std::vector<QuestionRecord> random_dataset(std::mt19937_64& rng, std::size_t n_questions, std::size_t dim) {
  std::uniform_int_distribution<std::size_t> n_roll(1, 4), n_steps(1, 9);
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<QuestionRecord> out;
  for (std::size_t q = 0; q < n_questions; ++q) {
    std::vector<HiddenTrajectory> rs;
    const auto split = static_cast<Split>(q % 3);
    for (std::size_t r = 0, n = n_roll(rng); r < n; ++r) {
      rs.push_back(make_traj("q" + std::to_string(q), r, n_steps(rng), dim, coin(rng) ? 1.0 : 0.0, rng, split));
    }
    out.push_back(make_question_record("q" + std::to_string(q), std::move(rs)));
  }
  return out;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

void spit(const fs::path& p, const std::string& s) { detail::write_file(p, s); }

std::vector<nlohmann::json> manifest_lines(const fs::path& dir) {
  std::vector<nlohmann::json> out;
  std::istringstream in(slurp(dir / "manifest.jsonl"));
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

void write_manifest(const fs::path& dir, const std::vector<nlohmann::json>& lines) {
  std::string s;
  for (const auto& j : lines) s += j.dump() + "\n";
  spit(dir / "manifest.jsonl", s);
}

}  // namespace

TEST(HiddenTrajectory, StepAccessAndBounds) {
  HiddenTrajectory t{"q", 0, 2, {1, 2, 3, 4, 5, 6}, 1.0, "", Split::train};
  EXPECT_EQ(t.num_steps(), 3u);
  EXPECT_EQ(t.step(1)[0], 3.0f);
  EXPECT_EQ(t.step(2)[1], 6.0f);
  EXPECT_THROW(t.step(3), IndexError);
  EXPECT_EQ(t.label(), "q#0");
}

TEST(HiddenTrajectory, ValidationRejectsBadValues) {
  HiddenTrajectory t{"q", 0, 2, {1, 2}, 1.0, "", Split::train};
  EXPECT_NO_THROW(validate(t));
  t.terminal_reward = 1.5;
  EXPECT_THROW(validate(t), ValidationError);
  t.terminal_reward = 0.5;
  t.values[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(validate(t), ValidationError);
  t.values[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(validate(t), ValidationError);
  t.values = {1, 2, 3};
  EXPECT_ANY_THROW(validate(t));
  t.values.clear();
  EXPECT_ANY_THROW(validate(t));
}

TEST(StateFeature, FirstOrderIsIdentity) {
  std::mt19937_64 rng(1);
  const auto t = make_traj("q", 0, 5, 3, 1.0, rng);
  for (std::size_t s = 0; s < t.num_steps(); ++s) {
    const auto f = state_feature(t, s, 1);
    ASSERT_EQ(f.size(), 3u);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(f[d], static_cast<double>(t.step(s)[d]));
  }
}

TEST(StateFeature, LeftZeroPadding) {
  HiddenTrajectory t{"q", 0, 2, {1, 2, 3, 4}, 1.0, "", Split::train};
  EXPECT_EQ(state_feature(t, 0, 2), (std::vector<double>{0, 0, 1, 2}));
  EXPECT_EQ(state_feature(t, 1, 2), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(state_feature(t, 1, 4), (std::vector<double>{0, 0, 0, 0, 1, 2, 3, 4}));
}

TEST(StateFeature, SlicingOracle) {
  std::mt19937_64 rng(2);
  const auto t = make_traj("q", 0, 6, 3, 0.0, rng);
  for (std::size_t k = 1; k <= 7; ++k) {
    for (std::size_t s = 0; s < 6; ++s) {
      const auto f = state_feature(t, s, k);
      ASSERT_EQ(f.size(), k * 3);
      // oracle: build by direct slicing of the flat buffer
      std::vector<double> expect;
      for (long long src = static_cast<long long>(s) - static_cast<long long>(k) + 1; src <= static_cast<long long>(s); ++src) {
        for (std::size_t d = 0; d < 3; ++d) expect.push_back(src < 0 ? 0.0 : t.values[static_cast<std::size_t>(src) * 3 + d]);
      }
      EXPECT_EQ(f, expect) << "k=" << k << " t=" << s;
    }
  }
  const auto f = state_feature(t, 4, 3);
  std::vector<double> direct;
  for (std::size_t s : {2, 3, 4})
    for (float v : t.step(s)) direct.push_back(v);
  EXPECT_EQ(f, direct);
}

TEST(StateFeature, Errors) {
  HiddenTrajectory t{"q", 0, 2, {1, 2, 3, 4}, 1.0, "", Split::train};
  EXPECT_THROW(state_feature(t, 2, 1), IndexError);
  EXPECT_THROW(state_feature(t, 0, 0), ContractError);
  EXPECT_EQ(initial_feature(t, 1), (std::vector<double>{1, 2}));
}

TEST(Labeling, ThreeAttemptRule) {
  std::mt19937_64 rng(3);
  std::vector<HiddenTrajectory> rs;
  for (std::size_t i = 0; i < 5; ++i) rs.push_back(make_traj("q", i, 2, 2, 1.0, rng));
  EXPECT_FALSE(label_hard(rs, {}));
  // flipping any one grading attempt forces hard
  for (std::size_t i = 0; i < 3; ++i) {
    auto copy = rs;
    copy[i].terminal_reward = 0.0;
    EXPECT_TRUE(label_hard(copy, {})) << i;
  }
  // rollouts beyond the grading attempts do not count
  auto extra = rs;
  extra[4].terminal_reward = 0.0;
  EXPECT_FALSE(label_hard(extra, {}));
  // grading attempts are the lowest rollout indices, not file order
  auto shuffled = rs;
  std::swap(shuffled[0], shuffled[4]);
  shuffled[0].terminal_reward = 0.0;  // rollout_index 4
  EXPECT_FALSE(label_hard(shuffled, {}));
  // zero grading_rollouts means every rollout grades
  EXPECT_TRUE(label_hard(extra, LabelingRule{0, 1.0}));
}

TEST(Labeling, OpenEndedThreshold) {
  std::mt19937_64 rng(4);
  std::vector<HiddenTrajectory> rs;
  for (std::size_t i = 0; i < 3; ++i) rs.push_back(make_traj("q", i, 2, 2, 0.5, rng));
  const LabelingRule critic{3, 0.5};
  EXPECT_FALSE(label_hard(rs, critic));  // score 50 counts as easy
  rs[1].terminal_reward = 0.49;
  EXPECT_TRUE(label_hard(rs, critic));
}

TEST(Labeling, RecordValidation) {
  std::mt19937_64 rng(5);
  auto rec = make_question_record("q", {make_traj("q", 0, 2, 2, 1.0, rng), make_traj("q", 1, 2, 2, 0.0, rng)});
  EXPECT_TRUE(rec.ground_truth_hard);
  EXPECT_NO_THROW(validate(rec, {}));
  auto wrong_label = rec;
  wrong_label.ground_truth_hard = false;
  EXPECT_THROW(validate(wrong_label, {}), ValidationError);
  auto dup = rec;
  dup.rollouts[1].rollout_index = 0;
  EXPECT_THROW(validate(dup, {}), ValidationError);
  auto other = rec;
  other.rollouts[1].question_id = "z";
  EXPECT_THROW(validate(other, {}), ValidationError);
  auto shape = rec;
  shape.rollouts[1].hidden_dim = 4;
  shape.rollouts[1].values.resize(8);
  EXPECT_THROW(validate(shape, {}), ShapeError);
}

TEST(Dataset, EmptyRecordList) {
  TempDir dir("empty");
  const auto m = write_dataset({}, dir.path);
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(fs::file_size(dir.path / "blob_000.f32"), 0u);
  EXPECT_TRUE(read_dataset(dir.path).empty());
}

TEST(Dataset, BlobSizeIsExact) {
  TempDir dir("size");
  std::mt19937_64 rng(6);
  std::vector<QuestionRecord> recs{make_question_record("q", {make_traj("q", 0, 3, 4, 1.0, rng)})};
  const auto m = write_dataset(recs, dir.path);
  ASSERT_EQ(m.records.size(), 1u);
  EXPECT_EQ(fs::file_size(dir.path / m.records[0].blob_file), 48u);
}

TEST(Dataset, ManifestHasExactlyTheContractFields) {
  TempDir dir("fields");
  std::mt19937_64 rng(7);
  write_dataset(random_dataset(rng, 3, 2), dir.path);
  const std::set<std::string> expected{"question_id", "rollout_index", "num_steps", "hidden_dim", "terminal_reward",
                                       "answer_text", "split", "blob_file", "byte_offset"};
  for (const auto& j : manifest_lines(dir.path)) {
    std::set<std::string> keys;
    for (const auto& [k, _] : j.items()) keys.insert(k);
    EXPECT_EQ(keys, expected);
  }
}

TEST(Dataset, BlobIsLittleEndianRowMajor) {
  TempDir dir("le");
  HiddenTrajectory t{"q", 0, 2, {1.0f, -2.5f, 3.25f, 0.0f}, 1.0, "", Split::train};
  write_dataset(std::vector<QuestionRecord>{make_question_record("q", {t})}, dir.path);
  const std::string blob = slurp(dir.path / "blob_000.f32");
  ASSERT_EQ(blob.size(), 16u);
  for (std::size_t i = 0; i < 4; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(blob[i * 4 + static_cast<std::size_t>(b)]);
    float f;
    std::memcpy(&f, &bits, 4);
    EXPECT_EQ(f, t.values[i]);
  }
}

TEST(Dataset, RoundTripIsBitExact) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    TempDir dir("rt" + std::to_string(trial));
    auto recs = random_dataset(rng, 12, 1 + trial % 5);
    // include awkward floats
    recs[0].rollouts[0].values[0] = -0.0f;
    recs[0].rollouts[0].values.back() = std::numeric_limits<float>::denorm_min();
    write_dataset(recs, dir.path);
    const auto back = read_dataset(dir.path);
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t q = 0; q < recs.size(); ++q) {
      EXPECT_EQ(back[q].question_id, recs[q].question_id);
      EXPECT_EQ(back[q].ground_truth_hard, recs[q].ground_truth_hard);
      ASSERT_EQ(back[q].rollouts.size(), recs[q].rollouts.size());
      for (std::size_t r = 0; r < recs[q].rollouts.size(); ++r) {
        const auto& a = recs[q].rollouts[r];
        const auto& b = back[q].rollouts[r];
        ASSERT_EQ(a.values.size(), b.values.size());
        EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)), 0);
        EXPECT_EQ(a, b);
      }
    }
  }
}

TEST(Dataset, MultipleBlobFiles) {
  TempDir dir("multi");
  std::mt19937_64 rng(9);
  const auto recs = random_dataset(rng, 10, 3);
  WriteOptions opts;
  opts.max_blob_bytes = 64;
  const auto m = write_dataset(recs, dir.path, opts);
  std::set<std::string> files;
  for (const auto& r : m.records) files.insert(r.blob_file);
  EXPECT_GT(files.size(), 1u);
  EXPECT_EQ(read_dataset(dir.path), recs);
}

TEST(Dataset, MixedDimensionsRejected) {
  TempDir dir("mixed");
  std::mt19937_64 rng(10);
  std::vector<QuestionRecord> recs{make_question_record("a", {make_traj("a", 0, 2, 3, 1.0, rng)}),
                                   make_question_record("b", {make_traj("b", 0, 2, 4, 1.0, rng)})};
  try {
    write_dataset(recs, dir.path);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("b#0"), std::string::npos);
  }
}

TEST(Dataset, DuplicateKeysRejected) {
  TempDir dir("dup");
  std::mt19937_64 rng(11);
  std::vector<QuestionRecord> recs{make_question_record("a", {make_traj("a", 0, 2, 3, 1.0, rng)}),
                                   make_question_record("a", {make_traj("a", 0, 2, 3, 1.0, rng)})};
  EXPECT_THROW(write_dataset(recs, dir.path), ValidationError);
}

TEST(Dataset, IoErrorCarriesPath) {
  TempDir dir("io");
  spit(dir.path / "file", "x");
  try {
    write_dataset({}, dir.path / "file" / "sub");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("file"), std::string::npos);
  }
  EXPECT_THROW(read_dataset(dir.path / "nope"), IoError);
}

TEST(Corruption, ManifestClaimsMoreStepsThanBlob) {
  TempDir dir("claims");
  std::mt19937_64 rng(12);
  std::vector<QuestionRecord> recs{make_question_record("q", {make_traj("q", 0, 8, 4, 1.0, rng)})};
  write_dataset(recs, dir.path);
  fs::remove(dir.path / "checksums.json");
  auto lines = manifest_lines(dir.path);
  lines[0]["num_steps"] = 10;
  write_manifest(dir.path, lines);
  try {
    read_dataset(dir.path);
    FAIL();
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("q#0"), std::string::npos);
  }
}

TEST(Corruption, TruncatedFinalBlob) {
  TempDir dir("trunc");
  std::mt19937_64 rng(13);
  write_dataset(random_dataset(rng, 5, 3), dir.path);
  std::string blob = slurp(dir.path / "blob_000.f32");
  blob.resize(blob.size() - 4);
  spit(dir.path / "blob_000.f32", blob);
  EXPECT_THROW(read_dataset(dir.path), CorruptionError);
  fs::remove(dir.path / "checksums.json");  // the byte-range check alone also catches it
  EXPECT_THROW(read_dataset(dir.path), CorruptionError);
}

TEST(Corruption, FlippedByteDetected) {
  TempDir dir("flip");
  std::mt19937_64 rng(14);
  write_dataset(random_dataset(rng, 5, 3), dir.path);
  const std::string good = slurp(dir.path / "blob_000.f32");
  for (std::size_t pos : {std::size_t{0}, good.size() / 2, good.size() - 1}) {
    std::string bad = good;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    spit(dir.path / "blob_000.f32", bad);
    EXPECT_THROW(read_dataset(dir.path), CorruptionError) << pos;
  }
}

TEST(Corruption, OverlapAndGapDetected) {
  TempDir dir("overlap");
  std::mt19937_64 rng(15);
  write_dataset(random_dataset(rng, 4, 2), dir.path);
  fs::remove(dir.path / "checksums.json");
  const auto good = manifest_lines(dir.path);
  auto overlap = good;
  overlap[1]["byte_offset"] = overlap[1]["byte_offset"].get<std::uint64_t>() - 4;
  write_manifest(dir.path, overlap);
  EXPECT_THROW(read_dataset(dir.path), CorruptionError);
  auto bad_blob = good;
  bad_blob[0]["blob_file"] = "../escape.f32";
  write_manifest(dir.path, bad_blob);
  EXPECT_THROW(read_dataset(dir.path), CorruptionError);
  auto extra = good;
  extra[0]["unexpected"] = 1;
  write_manifest(dir.path, extra);
  EXPECT_THROW(read_dataset(dir.path), CorruptionError);
}

TEST(Corruption, NonFiniteFloatsAreValidationErrors) {
  TempDir dir("nan");
  std::mt19937_64 rng(16);
  write_dataset(std::vector<QuestionRecord>{make_question_record("q", {make_traj("q", 0, 2, 2, 1.0, rng)})}, dir.path);
  fs::remove(dir.path / "checksums.json");
  std::string blob = slurp(dir.path / "blob_000.f32");
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(blob.data(), &nan, 4);
  spit(dir.path / "blob_000.f32", blob);
  EXPECT_THROW(read_dataset(dir.path), ValidationError);
}

TEST(Dataset, FilterSplit) {
  std::mt19937_64 rng(17);
  const auto recs = random_dataset(rng, 9, 2);
  EXPECT_EQ(filter_split(recs, Split::train).size(), 3u);
  EXPECT_EQ(filter_split(recs, Split::val).size(), 3u);
  EXPECT_EQ(filter_split(recs, Split::test).size(), 3u);
  EXPECT_EQ(parse_split("val"), Split::val);
  EXPECT_ANY_THROW(parse_split("dev"));
}
