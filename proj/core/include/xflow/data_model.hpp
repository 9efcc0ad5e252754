#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xflow {

enum class UnitKind { Bytes, Rtt };

const char* to_string(UnitKind kind);
/// Accepts "bytes" / "rtt"; throws ValidationError otherwise.
UnitKind unit_kind_from_string(const std::string& s);

inline constexpr int kPadToken = 256;
inline constexpr std::size_t kByteVocabSize = 257;

/// Token vocabulary for byte sequences: 256 byte values plus the pad token.
struct Vocabulary {
  std::size_t size = kByteVocabSize;
  int pad_token = kPadToken;
};

/// One traffic instance. Byte tokens are stored as exact integers in
/// `units`; RTTs in milliseconds. `present` marks real units (0 = padding
/// or removed); for byte sequences it mirrors `units[i] != kPadToken`.
struct UnitSequence {
  std::string id;
  UnitKind kind = UnitKind::Bytes;
  std::vector<double> units;
  std::vector<std::uint8_t> present;
  int label_id = 0;
  std::size_t effective_len = 0;

  std::size_t size() const { return units.size(); }
  int token(std::size_t i) const { return static_cast<int>(units[i]); }

  friend bool operator==(const UnitSequence&, const UnitSequence&) = default;
};

/// Checks the invariants of a freshly ingested sequence (no interior
/// padding, tokens in range, finite non-negative RTTs). Throws
/// ValidationError. `max_len` of 0 disables the length bound.
void validate_sequence(const UnitSequence& seq, std::size_t max_len = 0);

/// Builds a sequence from raw unit values, deriving presence and length.
UnitSequence make_sequence(std::string id, UnitKind kind, std::vector<double> units,
                           int label_id);

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  friend bool operator==(const Splits&, const Splits&) = default;
};

/// Ground-truth importance attached by the synthetic generators.
struct GroundTruth {
  std::vector<std::size_t> positions;
  /// Planted byte values (Bytes only), aligned with `positions`.
  std::vector<int> values;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct LabeledDataset {
  std::vector<UnitSequence> sequences;
  std::vector<std::string> labels;
  Splits splits;
  /// Records dropped during ingestion.
  std::size_t skipped = 0;
  /// Keyed by sequence id; filled by generate_synthetic.
  std::map<std::string, GroundTruth> truth;

  std::size_t num_classes() const { return labels.size(); }
  std::optional<UnitKind> kind() const;
  std::vector<UnitSequence> subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

// ------------------------------------------------------------- JSONL I/O

/// Reads a dataset JSONL file and its labels file ({"labels": [...]}).
/// Errors carry the offending line number.
LabeledDataset load_jsonl(const std::filesystem::path& path,
                          const std::filesystem::path& labels_path);

/// Serializes sequences (trailing padding stripped) as dataset JSONL.
std::string to_jsonl(const LabeledDataset& ds);
std::string labels_json(const LabeledDataset& ds);
/// {"<id>": {"positions": [...], "values": [...]}, ...}
std::string truth_json(const LabeledDataset& ds);
std::map<std::string, GroundTruth> load_truth(const std::filesystem::path& path);

// ------------------------------------------------------------- shaping

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Stratified-by-class deterministic split. Returns a copy with `splits` set.
LabeledDataset split_dataset(const LabeledDataset& ds, const SplitRatios& ratios,
                             std::uint64_t seed);

/// Pads with kPadToken (Bytes) or 0.0 + cleared presence (Rtt), or
/// truncates the tail. Result has exactly `max_len` units.
UnitSequence pad_truncate(const UnitSequence& seq, std::size_t max_len);

/// Removes every position whose keep flag is 0 (positions past keep.size()
/// are kept): pad token for Bytes, 0.0 for Rtt, presence cleared. Length and
/// effective_len are unchanged so positions stay aligned.
UnitSequence drop_units(const UnitSequence& seq, const std::vector<std::uint8_t>& keep);

// ------------------------------------------------------------- traceroute

struct TracerouteHop {
  int hop = 0;
  std::optional<double> rtt_ms;
};

struct TracerouteRecord {
  std::string src;
  std::string dst;
  std::vector<TracerouteHop> hops;
  std::optional<std::string> label;
};

/// Converts one record into `max_hops` RTT units: gaps are carried forward
/// from the previous present hop, leading gaps become 0.0. Returns nullopt
/// when the record has no usable RTT.
std::optional<std::vector<double>> traceroute_units(const TracerouteRecord& rec,
                                                    std::size_t max_hops,
                                                    std::size_t* last_hop = nullptr);

/// Reads a JSON array of traceroute records. Labels are sorted
/// lexicographically to assign class indices.
LabeledDataset ingest_traceroute(const std::filesystem::path& path, std::size_t max_hops);
LabeledDataset ingest_traceroute_records(const std::vector<TracerouteRecord>& records,
                                         std::size_t max_hops);

// ------------------------------------------------------------- synthetic

struct BytePlant {
  std::size_t position = 0;
  int value = 0;
};

struct RttSpike {
  std::size_t hop = 0;
  double magnitude_ms = 0.0;
};

struct SyntheticSpec {
  UnitKind kind = UnitKind::Bytes;
  std::size_t num_classes = 2;
  std::size_t seq_len = 64;
  /// Bytes: per-class list of plantings.
  std::vector<std::vector<BytePlant>> byte_signatures;
  /// Rtt: one spike per class.
  std::vector<RttSpike> rtt_spikes;
  /// Bytes: per-unit re-randomization rate. Rtt: Gaussian sigma in ms.
  double noise = 0.0;
  std::size_t instances_per_class = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Signature positions shared by all classes with distinct per-class
/// values, so that swapping the planted units flips the class.
std::vector<std::vector<BytePlant>> make_shared_position_signatures(std::size_t num_classes,
                                                                    std::size_t seq_len,
                                                                    std::size_t signature_len,
                                                                    std::uint64_t seed);

/// One spike per class at consecutive positions starting at 2.
std::vector<RttSpike> make_rtt_spikes(std::size_t num_classes, std::size_t seq_len, double magnitude_ms);

LabeledDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace xflow
