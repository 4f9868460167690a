#pragma once

// Hidden-state trajectories and their on-disk layout.
//
// A dataset directory holds:
//   manifest.jsonl   one JSON object per trajectory
//   blob_NNN.f32     raw little-endian binary32, row-major [num_steps x hidden_dim]
//   checksums.json   optional CRC-32 per blob file; verified when present

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <boost/crc.hpp>
#include <json.hpp>

#include "valgate/errors.hpp"

namespace valgate {

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

/// One generation rollout. `values` holds num_steps rows of hidden_dim floats;
/// row 0 is the hidden state of the prompt alone, the last row is the EOS step.
struct HiddenTrajectory {
  std::string question_id;
  std::size_t rollout_index = 0;
  std::size_t hidden_dim = 0;
  std::vector<float> values;
  double terminal_reward = 0.0;
  std::string answer_text;
  Split split = Split::train;

  std::size_t num_steps() const { return hidden_dim == 0 ? 0 : values.size() / hidden_dim; }

  std::span<const float> step(std::size_t t) const {
    if (t >= num_steps()) {
      throw IndexError("step " + std::to_string(t) + " out of range for trajectory of " +
                       std::to_string(num_steps()) + " steps");
    }
    return {values.data() + t * hidden_dim, hidden_dim};
  }

  std::string label() const { return question_id + "#" + std::to_string(rollout_index); }

  friend bool operator==(const HiddenTrajectory&, const HiddenTrajectory&) = default;
};

inline void validate(const HiddenTrajectory& traj) {
  if (traj.hidden_dim == 0) throw ValidationError(traj.label() + ": hidden_dim must be positive");
  if (traj.values.empty() || traj.values.size() % traj.hidden_dim != 0) {
    throw ValidationError(traj.label() + ": need at least one step of " +
                          std::to_string(traj.hidden_dim) + " components, got " +
                          std::to_string(traj.values.size()) + " values");
  }
  for (std::size_t i = 0; i < traj.values.size(); ++i) {
    if (!std::isfinite(traj.values[i])) {
      throw ValidationError(traj.label() + ": non-finite hidden value at step " +
                            std::to_string(i / traj.hidden_dim));
    }
  }
  if (!(traj.terminal_reward >= 0.0 && traj.terminal_reward <= 1.0)) {
    throw ValidationError(traj.label() + ": terminal_reward outside [0, 1]");
  }
}

/// How question-level labels are derived from rollout rewards. A rollout counts
/// as correct when its reward reaches `pass_reward`; the first `grading_rollouts`
/// rollouts (by rollout_index) are the grading attempts.
struct LabelingRule {
  std::size_t grading_rollouts = 3;
  double pass_reward = 1.0;

  bool is_correct(const HiddenTrajectory& t) const { return t.terminal_reward >= pass_reward; }
};

struct QuestionRecord {
  std::string question_id;
  std::vector<HiddenTrajectory> rollouts;
  bool ground_truth_hard = false;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

/// Hard iff any grading attempt is incorrect.
inline bool label_hard(std::span<const HiddenTrajectory> rollouts, const LabelingRule& rule) {
  if (rollouts.empty()) throw ContractError("cannot label a question without rollouts");
  std::vector<const HiddenTrajectory*> sorted;
  for (const auto& r : rollouts) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) {
    return a->rollout_index < b->rollout_index;
  });
  const std::size_t n = rule.grading_rollouts == 0
                            ? sorted.size()
                            : std::min(rule.grading_rollouts, sorted.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!rule.is_correct(*sorted[i])) return true;
  }
  return false;
}

inline QuestionRecord make_question_record(std::string question_id,
                                           std::vector<HiddenTrajectory> rollouts,
                                           const LabelingRule& rule = {}) {
  QuestionRecord rec{std::move(question_id), std::move(rollouts), false};
  rec.ground_truth_hard = label_hard(rec.rollouts, rule);
  return rec;
}

inline void validate(const QuestionRecord& rec, const LabelingRule& rule) {
  if (rec.rollouts.empty()) throw ValidationError(rec.question_id + ": no rollouts");
  std::set<std::size_t> seen;
  for (const auto& r : rec.rollouts) {
    if (r.question_id != rec.question_id) {
      throw ValidationError(r.label() + ": rollout filed under question " + rec.question_id);
    }
    if (r.hidden_dim != rec.rollouts.front().hidden_dim) {
      throw ShapeError(rec.question_id + ": rollouts disagree on hidden_dim");
    }
    if (!seen.insert(r.rollout_index).second) {
      throw ValidationError(r.label() + ": duplicate rollout_index");
    }
    validate(r);
  }
  if (label_hard(rec.rollouts, rule) != rec.ground_truth_hard) {
    throw ValidationError(rec.question_id + ": ground_truth_hard disagrees with labeling rule");
  }
}

// ---------------------------------------------------------------------------
// k-order state features

/// Concatenation of steps[t-k+1 .. t], left-padded with zero rows before step 0.
inline void state_feature_into(const HiddenTrajectory& traj, std::size_t t, std::size_t k,
                               std::span<double> out) {
  if (k == 0) throw ContractError("state order k must be >= 1");
  if (t >= traj.num_steps()) {
    throw IndexError("state_feature: t=" + std::to_string(t) + " out of range for " +
                     traj.label() + " with " + std::to_string(traj.num_steps()) + " steps");
  }
  const std::size_t d = traj.hidden_dim;
  if (out.size() != k * d) throw ShapeError("state_feature: output buffer has wrong size");
  for (std::size_t slot = 0; slot < k; ++slot) {
    // slot k-1 holds step t, slot 0 holds step t-k+1
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k - 1 - slot);
    double* dst = out.data() + slot * d;
    if (src < 0) {
      std::fill(dst, dst + d, 0.0);
    } else {
      const float* row = traj.values.data() + static_cast<std::size_t>(src) * d;
      std::copy(row, row + d, dst);
    }
  }
}

inline std::vector<double> state_feature(const HiddenTrajectory& traj, std::size_t t,
                                         std::size_t k) {
  std::vector<double> out(k * traj.hidden_dim);
  state_feature_into(traj, t, k, out);
  return out;
}

/// Feature of the initial state s0 (question only).
inline std::vector<double> initial_feature(const HiddenTrajectory& traj, std::size_t k) {
  return state_feature(traj, 0, k);
}

// ---------------------------------------------------------------------------
// On-disk format

struct ManifestRecord {
  std::string question_id;
  std::size_t rollout_index = 0;
  std::size_t num_steps = 0;
  std::size_t hidden_dim = 0;
  double terminal_reward = 0.0;
  std::string answer_text;
  Split split = Split::train;
  std::string blob_file;
  std::uint64_t byte_offset = 0;

  std::uint64_t byte_length() const {
    return static_cast<std::uint64_t>(num_steps) * hidden_dim * sizeof(float);
  }
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::size_t state_order_k = 1;
};

inline constexpr std::string_view kManifestFile = "manifest.jsonl";
inline constexpr std::string_view kChecksumFile = "checksums.json";

struct WriteOptions {
  LabelingRule rule{};
  std::size_t state_order_k = 1;
  // A new blob file is started once the current one reaches this size.
  std::uint64_t max_blob_bytes = std::uint64_t{1} << 30;
};

namespace detail {

inline std::uint32_t to_le_bits(float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
  }
  return bits;
}

inline float from_le_bits(std::uint32_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
  }
  return std::bit_cast<float>(bits);
}

inline void append_floats(std::string& buf, std::span<const float> xs) {
  const std::size_t start = buf.size();
  buf.resize(start + xs.size() * sizeof(float));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::uint32_t bits = to_le_bits(xs[i]);
    std::memcpy(buf.data() + start + i * sizeof(float), &bits, sizeof(bits));
  }
}

inline std::vector<float> decode_floats(std::string_view bytes) {
  std::vector<float> out(bytes.size() / sizeof(float));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + i * sizeof(float), sizeof(bits));
    out[i] = from_le_bits(bits);
  }
  return out;
}

inline std::uint32_t crc32(std::string_view bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

inline void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

inline std::string blob_name(std::size_t index) {
  std::string digits = std::to_string(index);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  return "blob_" + digits + ".f32";
}

inline const std::set<std::string>& manifest_fields() {
  static const std::set<std::string> fields{
      "question_id", "rollout_index", "num_steps", "hidden_dim", "terminal_reward",
      "answer_text", "split",         "blob_file", "byte_offset"};
  return fields;
}

}  // namespace detail

inline nlohmann::json to_json(const ManifestRecord& r) {
  return nlohmann::json{{"question_id", r.question_id},
                        {"rollout_index", r.rollout_index},
                        {"num_steps", r.num_steps},
                        {"hidden_dim", r.hidden_dim},
                        {"terminal_reward", r.terminal_reward},
                        {"answer_text", r.answer_text},
                        {"split", std::string(to_string(r.split))},
                        {"blob_file", r.blob_file},
                        {"byte_offset", r.byte_offset}};
}

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j, std::size_t line) {
  const std::string where = "manifest line " + std::to_string(line);
  if (!j.is_object()) throw CorruptionError(where + ": not a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!detail::manifest_fields().contains(key)) {
      throw CorruptionError(where + ": unknown field '" + key + "'");
    }
  }
  for (const auto& key : detail::manifest_fields()) {
    if (!j.contains(key)) throw CorruptionError(where + ": missing field '" + key + "'");
  }
  try {
    ManifestRecord r;
    r.question_id = j.at("question_id").get<std::string>();
    r.rollout_index = j.at("rollout_index").get<std::size_t>();
    r.num_steps = j.at("num_steps").get<std::size_t>();
    r.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    r.terminal_reward = j.at("terminal_reward").get<double>();
    r.answer_text = j.at("answer_text").get<std::string>();
    r.split = parse_split(j.at("split").get<std::string>());
    r.blob_file = j.at("blob_file").get<std::string>();
    r.byte_offset = j.at("byte_offset").get<std::uint64_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(where + ": " + e.what());
  }
}

/// Writes `records` under `directory` (created if absent). Labels must agree
/// with `options.rule`; the store never re-grades.
inline DatasetManifest write_dataset(std::span<const QuestionRecord> records,
                                     const std::filesystem::path& directory,
                                     const WriteOptions& options = {}) {
  std::optional<std::size_t> dim;
  std::set<std::pair<std::string, std::size_t>> keys;
  for (const auto& rec : records) {
    for (const auto& r : rec.rollouts) {
      if (dim && r.hidden_dim != *dim) {
        throw ShapeError("dimension mismatch: " + r.label() + " has hidden_dim " +
                         std::to_string(r.hidden_dim) + ", dataset uses " + std::to_string(*dim));
      }
      dim = r.hidden_dim;
      if (!keys.emplace(r.question_id, r.rollout_index).second) {
        throw ValidationError(r.label() + ": duplicate (question_id, rollout_index)");
      }
    }
    validate(rec, options.rule);
  }

  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.state_order_k = options.state_order_k;
  std::vector<std::string> blobs(1);
  for (const auto& rec : records) {
    for (const auto& r : rec.rollouts) {
      if (!blobs.back().empty() && blobs.back().size() + r.values.size() * sizeof(float) > options.max_blob_bytes) {
        blobs.emplace_back();
      }
      ManifestRecord m{r.question_id, r.rollout_index, r.num_steps(), r.hidden_dim,
                       r.terminal_reward, r.answer_text, r.split,
                       detail::blob_name(blobs.size() - 1), blobs.back().size()};
      detail::append_floats(blobs.back(), r.values);
      manifest.records.push_back(std::move(m));
    }
  }

  nlohmann::json sums = nlohmann::json::array();
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    detail::write_file(directory / detail::blob_name(i), blobs[i]);
    sums.push_back({{"file", detail::blob_name(i)},
                    {"bytes", blobs[i].size()},
                    {"crc32", detail::crc32(blobs[i])}});
  }
  std::string lines;
  for (const auto& m : manifest.records) {
    lines += to_json(m).dump();
    lines += '\n';
  }
  detail::write_file(directory / kManifestFile, lines);
  detail::write_file(directory / kChecksumFile, nlohmann::json{{"blobs", sums}}.dump(2) + "\n");
  return manifest;
}

inline DatasetManifest read_manifest(const std::filesystem::path& directory) {
  const auto path = directory / kManifestFile;
  if (!std::filesystem::exists(path)) throw IoError("missing " + path.string());
  std::istringstream in(detail::read_file(path));
  DatasetManifest manifest;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorruptionError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    manifest.records.push_back(manifest_record_from_json(j, lineno));
  }
  return manifest;
}

/// Reads a dataset written by write_dataset, grouping rollouts by question in
/// order of first appearance. Any disagreement between manifest and blobs is a
/// CorruptionError naming the trajectory.
inline std::vector<QuestionRecord> read_dataset(const std::filesystem::path& directory,
                                                const LabelingRule& rule = {}) {
  const DatasetManifest manifest = read_manifest(directory);

  std::map<std::string, std::string> blobs;
  for (const auto& m : manifest.records) {
    if (m.blob_file.empty() || m.blob_file.find('/') != std::string::npos ||
        m.blob_file.find('\\') != std::string::npos) {
      throw CorruptionError(m.question_id + "#" + std::to_string(m.rollout_index) +
                            ": invalid blob_file '" + m.blob_file + "'");
    }
    if (!blobs.contains(m.blob_file)) {
      const auto p = directory / m.blob_file;
      if (!std::filesystem::exists(p)) {
        throw CorruptionError(m.question_id + "#" + std::to_string(m.rollout_index) +
                              ": blob file missing: " + p.string());
      }
      blobs.emplace(m.blob_file, detail::read_file(p));
    }
  }

  const auto sums_path = directory / kChecksumFile;
  if (std::filesystem::exists(sums_path)) {
    nlohmann::json sums;
    try {
      sums = nlohmann::json::parse(detail::read_file(sums_path));
      for (const auto& entry : sums.at("blobs")) {
        const auto file = entry.at("file").get<std::string>();
        auto it = blobs.find(file);
        if (it == blobs.end()) continue;
        if (entry.at("bytes").get<std::uint64_t>() != it->second.size()) {
          throw CorruptionError("blob " + file + " has " + std::to_string(it->second.size()) +
                                " bytes, checksum file records " + entry.at("bytes").dump());
        }
        if (entry.at("crc32").get<std::uint32_t>() != detail::crc32(it->second)) {
          throw CorruptionError("blob " + file + " fails CRC-32 check");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(sums_path.string() + ": " + e.what());
    }
  }

  // Byte ranges must tile each blob exactly: no overlap, no gap, no overrun.
  std::map<std::string, std::vector<const ManifestRecord*>> by_blob;
  for (const auto& m : manifest.records) by_blob[m.blob_file].push_back(&m);
  for (auto& [file, recs] : by_blob) {
    std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) { return a->byte_offset < b->byte_offset; });
    const std::uint64_t size = blobs.at(file).size();
    std::uint64_t cursor = 0;
    for (const auto* m : recs) {
      const std::string who = m->question_id + "#" + std::to_string(m->rollout_index);
      if (m->hidden_dim == 0 || m->num_steps == 0) {
        throw CorruptionError(who + ": empty trajectory region in manifest");
      }
      if (m->byte_offset != cursor) {
        throw CorruptionError(who + ": byte range starts at " + std::to_string(m->byte_offset) +
                              ", expected " + std::to_string(cursor) + " in " + file);
      }
      if (m->byte_offset + m->byte_length() > size) {
        throw CorruptionError(who + ": claims " + std::to_string(m->num_steps) +
                              " steps but " + file + " ends at byte " + std::to_string(size));
      }
      cursor = m->byte_offset + m->byte_length();
    }
    if (cursor != size) {
      throw CorruptionError(file + ": " + std::to_string(size - cursor) +
                            " trailing bytes not covered by the manifest");
    }
  }

  std::vector<QuestionRecord> out;
  std::unordered_map<std::string, std::size_t> index;
  std::optional<std::size_t> dim;
  for (const auto& m : manifest.records) {
    HiddenTrajectory t;
    t.question_id = m.question_id;
    t.rollout_index = m.rollout_index;
    t.hidden_dim = m.hidden_dim;
    t.terminal_reward = m.terminal_reward;
    t.answer_text = m.answer_text;
    t.split = m.split;
    const std::string& blob = blobs.at(m.blob_file);
    t.values = detail::decode_floats(std::string_view(blob).substr(m.byte_offset, m.byte_length()));
    if (dim && *dim != t.hidden_dim) {
      throw ShapeError("dimension mismatch: " + t.label() + " has hidden_dim " +
                       std::to_string(t.hidden_dim));
    }
    dim = t.hidden_dim;
    validate(t);
    auto [it, inserted] = index.emplace(t.question_id, out.size());
    if (inserted) out.push_back(QuestionRecord{t.question_id, {}, false});
    out[it->second].rollouts.push_back(std::move(t));
  }
  for (auto& rec : out) {
    rec.ground_truth_hard = label_hard(rec.rollouts, rule);
    validate(rec, rule);
  }
  return out;
}

/// Records whose rollouts are (all) in `split`; questions are assigned to a
/// split by their first rollout.
inline std::vector<QuestionRecord> filter_split(std::span<const QuestionRecord> records, Split split) {
  std::vector<QuestionRecord> out;
  for (const auto& r : records) {
    if (!r.rollouts.empty() && r.rollouts.front().split == split) out.push_back(r);
  }
  return out;
}

}  // namespace valgate
