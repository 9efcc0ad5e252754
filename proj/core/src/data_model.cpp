#include "xflow/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xflow/errors.hpp"
#include "xflow/io.hpp"
#include "xflow/log.hpp"

namespace xflow {

using nlohmann::json;

const char* to_string(UnitKind kind) { return kind == UnitKind::Bytes ? "bytes" : "rtt"; }

UnitKind unit_kind_from_string(const std::string& s) {
  if (s == "bytes") return UnitKind::Bytes;
  if (s == "rtt") return UnitKind::Rtt;
  throw ValidationError("unknown unit kind '" + s + "' (expected bytes|rtt)");
}

void validate_sequence(const UnitSequence& seq, std::size_t max_len) {
  const auto fail = [&](const std::string& msg) {
    throw ValidationError("sequence '" + seq.id + "': " + msg);
  };
  if (seq.present.size() != seq.units.size()) fail("presence flags do not match units");
  if (seq.effective_len > seq.units.size()) fail("effective_len exceeds length");
  if (max_len > 0 && seq.units.size() > max_len) fail("longer than max length");
  for (std::size_t i = 0; i < seq.units.size(); ++i) {
    const double u = seq.units[i];
    const bool pad_region = i >= seq.effective_len;
    if (seq.kind == UnitKind::Bytes) {
      if (u != std::floor(u) || u < 0 || u > kPadToken) fail("token out of range at " + std::to_string(i));
      if ((u == kPadToken) != pad_region) fail("pad token only allowed as trailing padding");
    } else {
      if (!std::isfinite(u) || u < 0) fail("RTT must be finite and non-negative at " + std::to_string(i));
      if (pad_region && u != 0.0) fail("RTT padding must be 0.0");
    }
    if ((seq.present[i] != 0) == pad_region) fail("presence flags must mark exactly the unpadded prefix");
  }
}

UnitSequence make_sequence(std::string id, UnitKind kind, std::vector<double> units,
                           int label_id) {
  UnitSequence seq;
  seq.id = std::move(id);
  seq.kind = kind;
  seq.units = std::move(units);
  seq.label_id = label_id;
  seq.effective_len = seq.units.size();
  seq.present.assign(seq.units.size(), 1);
  return seq;
}

std::optional<UnitKind> LabeledDataset::kind() const {
  if (sequences.empty()) return std::nullopt;
  return sequences.front().kind;
}

std::vector<UnitSequence> LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<UnitSequence> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(sequences.at(i));
  return out;
}

// ------------------------------------------------------------- JSONL I/O

namespace {

std::vector<std::string> read_labels(const std::filesystem::path& labels_path) {
  json doc;
  try {
    doc = json::parse(read_file(labels_path));
  } catch (const json::parse_error& e) {
    throw ParseError(labels_path.string() + ": " + e.what(), 0);
  }
  if (!doc.is_object() || !doc.contains("labels") || !doc["labels"].is_array()) {
    throw ValidationError(labels_path.string() + ": expected {\"labels\": [...]}");
  }
  std::vector<std::string> labels;
  std::set<std::string> seen;
  for (const auto& l : doc["labels"]) {
    if (!l.is_string()) throw ValidationError(labels_path.string() + ": labels must be strings");
    auto s = l.get<std::string>();
    if (!seen.insert(s).second) throw ValidationError("duplicate label '" + s + "'");
    labels.push_back(std::move(s));
  }
  if (labels.size() < 2) throw ValidationError(labels_path.string() + ": need at least 2 labels");
  return labels;
}

}  // namespace

LabeledDataset load_jsonl(const std::filesystem::path& path,
                          const std::filesystem::path& labels_path) {
  LabeledDataset ds;
  ds.labels = read_labels(labels_path);
  std::map<std::string, int> label_index;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) label_index[ds.labels[i]] = static_cast<int>(i);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object() || obj.size() != 4 || !obj.contains("id") || !obj.contains("kind") ||
        !obj.contains("units") || !obj.contains("label")) {
      throw ParseError("expected exactly the fields id, kind, units, label", line_no);
    }
    if (!obj["id"].is_string() || !obj["kind"].is_string() || !obj["label"].is_string() ||
        !obj["units"].is_array()) {
      throw ParseError("field types must be string/string/array/string", line_no);
    }
    UnitKind kind;
    try {
      kind = unit_kind_from_string(obj["kind"].get<std::string>());
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), line_no);
    }
    const auto label = obj["label"].get<std::string>();
    const auto it = label_index.find(label);
    if (it == label_index.end()) throw ParseError("unknown label '" + label + "'", line_no);

    std::vector<double> units;
    units.reserve(obj["units"].size());
    for (const auto& u : obj["units"]) {
      if (!u.is_number()) throw ParseError("units must be numbers", line_no);
      const double v = u.get<double>();
      if (kind == UnitKind::Bytes) {
        if (!u.is_number_integer() || v < 0 || v > 255) {
          throw ParseError("byte token " + u.dump() + " outside [0, 255]", line_no);
        }
      } else if (!std::isfinite(v) || v < 0) {
        throw ParseError("RTT value " + u.dump() + " must be finite and non-negative", line_no);
      }
      units.push_back(v);
    }
    if (units.empty()) throw ParseError("empty unit list", line_no);
    auto id = obj["id"].get<std::string>();
    if (!ids.insert(id).second) throw ParseError("duplicate id '" + id + "'", line_no);
    if (!ds.sequences.empty() && ds.sequences.front().kind != kind) {
      throw ParseError("mixed unit kinds in one dataset", line_no);
    }
    ds.sequences.push_back(make_sequence(std::move(id), kind, std::move(units), it->second));
  }
  return ds;
}

std::string to_jsonl(const LabeledDataset& ds) {
  std::string out;
  for (const auto& seq : ds.sequences) {
    json units = json::array();
    for (std::size_t i = 0; i < seq.effective_len; ++i) {
      if (seq.kind == UnitKind::Bytes) {
        units.push_back(seq.token(i));
      } else {
        units.push_back(seq.units[i]);
      }
    }
    json obj = {{"id", seq.id},
                {"kind", to_string(seq.kind)},
                {"units", std::move(units)},
                {"label", ds.labels.at(static_cast<std::size_t>(seq.label_id))}};
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::string labels_json(const LabeledDataset& ds) {
  return json{{"labels", ds.labels}}.dump(2) + "\n";
}

std::string truth_json(const LabeledDataset& ds) {
  json doc = json::object();
  for (const auto& [id, gt] : ds.truth) {
    doc[id] = {{"positions", gt.positions}, {"values", gt.values}};
  }
  return doc.dump() + "\n";
}

std::map<std::string, GroundTruth> load_truth(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
  if (!doc.is_object()) throw ValidationError(path.string() + ": expected an object");
  std::map<std::string, GroundTruth> out;
  for (const auto& [id, v] : doc.items()) {
    GroundTruth gt;
    gt.positions = v.at("positions").get<std::vector<std::size_t>>();
    gt.values = v.at("values").get<std::vector<int>>();
    out.emplace(id, std::move(gt));
  }
  return out;
}

// ------------------------------------------------------------- shaping

LabeledDataset split_dataset(const LabeledDataset& ds, const SplitRatios& ratios,
                             std::uint64_t seed) {
  const std::size_t n = ds.sequences.size();
  if (n == 0) throw ValidationError("split_dataset: empty dataset");
  if (n < 3) throw ValidationError("split_dataset: need at least 3 sequences");
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ValidationError("split_dataset: ratios must be non-negative and sum to 1");
  }
  const std::size_t classes = std::max<std::size_t>(ds.num_classes(), 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < n; ++i) {
    by_class.at(static_cast<std::size_t>(ds.sequences[i].label_id)).push_back(i);
  }
  std::mt19937_64 rng(seed);
  // Interleave classes by fractional rank so that every prefix of the merged
  // order is stratified to within one instance per class.
  struct Slot {
    double key;
    std::size_t cls;
    std::size_t index;
  };
  std::vector<Slot> order;
  order.reserve(n);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& members = by_class[c];
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t r = 0; r < members.size(); ++r) {
      order.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(members.size()), c,
                       members[r]});
    }
  }
  std::sort(order.begin(), order.end(), [](const Slot& a, const Slot& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });

  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n))));
  LabeledDataset out = ds;
  out.splits = {};
  for (std::size_t i = 0; i < n; ++i) {
    auto& bucket = i < n_train ? out.splits.train : (i < n_train + n_val ? out.splits.val : out.splits.test);
    bucket.push_back(order[i].index);
  }
  // Every class with at least three members must be trainable.
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].size() < 3) continue;
    const auto in_class = [&](std::size_t idx) {
      return static_cast<std::size_t>(ds.sequences[idx].label_id) == c;
    };
    if (std::any_of(out.splits.train.begin(), out.splits.train.end(), in_class)) continue;
    for (auto* donor : {&out.splits.test, &out.splits.val}) {
      auto it = std::find_if(donor->begin(), donor->end(), in_class);
      if (it != donor->end()) {
        out.splits.train.push_back(*it);
        donor->erase(it);
        break;
      }
    }
  }
  std::sort(out.splits.train.begin(), out.splits.train.end());
  std::sort(out.splits.val.begin(), out.splits.val.end());
  std::sort(out.splits.test.begin(), out.splits.test.end());
  return out;
}

UnitSequence pad_truncate(const UnitSequence& seq, std::size_t max_len) {
  if (max_len == 0) throw ValidationError("pad_truncate: max_len must be >= 1");
  UnitSequence out = seq;
  const double pad = seq.kind == UnitKind::Bytes ? static_cast<double>(kPadToken) : 0.0;
  out.units.resize(max_len, pad);
  out.present.resize(max_len, 0);
  out.effective_len = std::min(seq.effective_len, max_len);
  return out;
}

UnitSequence drop_units(const UnitSequence& seq, const std::vector<std::uint8_t>& keep) {
  UnitSequence out = seq;
  const double pad = seq.kind == UnitKind::Bytes ? static_cast<double>(kPadToken) : 0.0;
  const std::size_t n = std::min(keep.size(), out.units.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) {
      out.units[i] = pad;
      out.present[i] = 0;
    }
  }
  return out;
}

// ------------------------------------------------------------- traceroute

std::optional<std::vector<double>> traceroute_units(const TracerouteRecord& rec,
                                                    std::size_t max_hops,
                                                    std::size_t* last_hop) {
  int prev = 0;
  for (const auto& h : rec.hops) {
    if (h.hop < 1) throw ValidationError("traceroute hop numbers must be >= 1");
    if (h.hop <= prev) throw ValidationError("traceroute hop numbers must be strictly increasing");
    prev = h.hop;
  }
  const bool any = std::any_of(rec.hops.begin(), rec.hops.end(), [](const TracerouteHop& h) {
    return h.rtt_ms && std::isfinite(*h.rtt_ms) && *h.rtt_ms >= 0;
  });
  if (!any) return std::nullopt;

  const auto span = static_cast<std::size_t>(rec.hops.back().hop);
  std::vector<std::optional<double>> slots(span);
  for (const auto& h : rec.hops) {
    if (h.rtt_ms && std::isfinite(*h.rtt_ms) && *h.rtt_ms >= 0) {
      slots[static_cast<std::size_t>(h.hop) - 1] = *h.rtt_ms;
    }
  }
  std::vector<double> units(span);
  double carry = 0.0;
  for (std::size_t i = 0; i < span; ++i) {
    if (slots[i]) carry = *slots[i];
    units[i] = carry;
  }
  if (units.size() > max_hops) units.resize(max_hops);
  if (last_hop) *last_hop = units.size();
  return units;
}

LabeledDataset ingest_traceroute_records(const std::vector<TracerouteRecord>& records,
                                         std::size_t max_hops) {
  if (max_hops == 0) throw ValidationError("max_hops must be >= 1");
  std::set<std::string> label_set;
  for (const auto& r : records) {
    if (!r.label) throw ValidationError("traceroute record " + r.src + "->" + r.dst + " has no label");
    label_set.insert(*r.label);
  }
  LabeledDataset ds;
  ds.labels.assign(label_set.begin(), label_set.end());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto units = traceroute_units(r, max_hops);
    if (!units) {
      ++ds.skipped;
      continue;
    }
    const auto label_id = static_cast<int>(
        std::distance(ds.labels.begin(), std::find(ds.labels.begin(), ds.labels.end(), *r.label)));
    auto seq = make_sequence("tr-" + std::to_string(i), UnitKind::Rtt, std::move(*units), label_id);
    ds.sequences.push_back(pad_truncate(seq, max_hops));
  }
  if (ds.skipped > 0) log::info("ingest_traceroute: skipped ", ds.skipped, " record(s) without RTTs");
  if (ds.sequences.empty()) throw ValidationError("ingest_traceroute: no usable labeled records");
  return ds;
}

LabeledDataset ingest_traceroute(const std::filesystem::path& path, std::size_t max_hops) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
  if (!doc.is_array()) throw ValidationError(path.string() + ": expected a JSON array");
  std::vector<TracerouteRecord> records;
  for (const auto& r : doc) {
    try {
      TracerouteRecord rec;
      rec.src = r.at("src").get<std::string>();
      rec.dst = r.at("dst").get<std::string>();
      for (const auto& h : r.at("hops")) {
        TracerouteHop hop;
        hop.hop = h.at("hop").get<int>();
        if (h.contains("rtt_ms") && !h["rtt_ms"].is_null()) hop.rtt_ms = h["rtt_ms"].get<double>();
        rec.hops.push_back(hop);
      }
      if (r.contains("label") && r["label"].is_string()) rec.label = r["label"].get<std::string>();
      records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ": bad traceroute record: " + e.what());
    }
  }
  return ingest_traceroute_records(records, max_hops);
}

// ------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ValidationError("synthetic: num_classes must be >= 2");
  if (seq_len == 0) throw ValidationError("synthetic: seq_len must be >= 1");
  if (instances_per_class == 0) throw ValidationError("synthetic: instances_per_class must be >= 1");
  if (kind == UnitKind::Bytes) {
    if (byte_signatures.size() != num_classes) {
      throw ValidationError("synthetic: need one byte signature per class");
    }
    if (noise < 0 || noise > 1) throw ValidationError("synthetic: byte noise rate must be in [0, 1]");
    std::set<std::pair<std::size_t, int>> seen;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::set<std::size_t> positions;
      if (byte_signatures[c].empty()) throw ValidationError("synthetic: empty signature");
      for (const auto& p : byte_signatures[c]) {
        if (p.position >= seq_len) throw ValidationError("synthetic: signature position beyond seq_len");
        if (p.value < 0 || p.value > 255) throw ValidationError("synthetic: signature value outside [0, 255]");
        if (!positions.insert(p.position).second) {
          throw ValidationError("synthetic: duplicate position within class signature");
        }
        if (!seen.insert({p.position, p.value}).second) {
          throw ValidationError("synthetic: signature collision across classes at position " +
                                std::to_string(p.position));
        }
      }
    }
  } else {
    if (rtt_spikes.size() != num_classes) throw ValidationError("synthetic: need one RTT spike per class");
    if (noise < 0) throw ValidationError("synthetic: RTT noise sigma must be >= 0");
    std::set<std::pair<std::size_t, double>> seen;
    for (const auto& s : rtt_spikes) {
      if (s.hop >= seq_len) throw ValidationError("synthetic: spike hop beyond seq_len");
      if (!(s.magnitude_ms > 0)) throw ValidationError("synthetic: spike magnitude must be positive");
      if (!seen.insert({s.hop, s.magnitude_ms}).second) {
        throw ValidationError("synthetic: signature collision across classes at hop " +
                              std::to_string(s.hop));
      }
    }
  }
}

std::vector<std::vector<BytePlant>> make_shared_position_signatures(std::size_t num_classes,
                                                                    std::size_t seq_len,
                                                                    std::size_t signature_len,
                                                                    std::uint64_t seed) {
  if (signature_len == 0 || signature_len > seq_len) {
    throw ValidationError("signature length must be in [1, seq_len]");
  }
  if (num_classes > 256) throw ValidationError("at most 256 classes fit distinct byte values");
  std::mt19937_64 rng(seed ^ 0x5197a7u);
  std::vector<std::size_t> positions(seq_len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::shuffle(positions.begin(), positions.end(), rng);
  positions.resize(signature_len);
  std::sort(positions.begin(), positions.end());

  std::vector<std::vector<BytePlant>> sigs(num_classes);
  std::vector<int> values(256);
  for (auto pos : positions) {
    std::iota(values.begin(), values.end(), 0);
    std::shuffle(values.begin(), values.end(), rng);
    for (std::size_t c = 0; c < num_classes; ++c) sigs[c].push_back({pos, values[c]});
  }
  return sigs;
}

std::vector<RttSpike> make_rtt_spikes(std::size_t num_classes, std::size_t seq_len, double magnitude_ms) {
  if (seq_len < num_classes + 2) {
    throw ValidationError("seq_len " + std::to_string(seq_len) + " too short for " + std::to_string(num_classes) +
                          " spike hops");
  }
  std::vector<RttSpike> spikes;
  for (std::size_t c = 0; c < num_classes; ++c) spikes.push_back({2 + c, magnitude_ms});
  return spikes;
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> byte_dist(0, 255);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> increment(0.5, 3.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  LabeledDataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.labels.push_back("class" + std::to_string(c));

  std::size_t serial = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < spec.instances_per_class; ++i, ++serial) {
      char id[32];
      std::snprintf(id, sizeof id, "syn-%05zu", serial);
      std::vector<double> units(spec.seq_len);
      GroundTruth gt;
      if (spec.kind == UnitKind::Bytes) {
        for (auto& u : units) u = byte_dist(rng);
        std::vector<bool> planted(spec.seq_len, false);
        for (const auto& p : spec.byte_signatures[c]) {
          units[p.position] = p.value;
          planted[p.position] = true;
          gt.positions.push_back(p.position);
          gt.values.push_back(p.value);
        }
        for (std::size_t j = 0; j < spec.seq_len; ++j) {
          if (!planted[j] && unit(rng) < spec.noise) units[j] = byte_dist(rng);
        }
      } else {
        const auto& spike = spec.rtt_spikes[c];
        double level = 0.0;
        for (std::size_t j = 0; j < spec.seq_len; ++j) {
          level += increment(rng);
          double v = level + spec.noise * gauss(rng);
          if (j == spike.hop) v += spike.magnitude_ms;
          units[j] = std::max(0.0, v);
        }
        gt.positions.push_back(spike.hop);
      }
      ds.sequences.push_back(make_sequence(id, spec.kind, std::move(units), static_cast<int>(c)));
      ds.truth.emplace(id, std::move(gt));
    }
  }
  return ds;
}

}  // namespace xflow
