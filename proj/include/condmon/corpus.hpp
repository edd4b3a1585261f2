#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condmon/errors.hpp"
#include "condmon/rng.hpp"

namespace condmon::corpus {

using nlohmann::json;

// Class indices are fixed: they are the row order of the classifier logits.
enum class PhaseLabel : int { Precondition = 0, Effect = 1, Unsatisfied = 2 };

inline const char* to_string(PhaseLabel p) {
  switch (p) {
    case PhaseLabel::Precondition: return "precondition";
    case PhaseLabel::Effect: return "effect";
    case PhaseLabel::Unsatisfied: return "unsatisfied";
  }
  return "?";
}

inline PhaseLabel phase_from_string(const std::string& s) {
  if (s == "precondition") return PhaseLabel::Precondition;
  if (s == "effect") return PhaseLabel::Effect;
  if (s == "unsatisfied") return PhaseLabel::Unsatisfied;
  throw ParseError("unknown phase label: " + s);
}

// Half-open frame interval [begin, end).
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool empty() const { return begin == end; }
};

struct Demonstration {
  std::string id;
  std::vector<std::string> frames;  // resolved paths, one per frame
  std::string action_text;
  std::vector<std::string> object_slots;
  bool success = true;
  Segment pre, core, post;
  std::string camera_id;
  // Demo-level anomaly ground truth; defaults to !success when the manifest
  // does not say otherwise (a retried-but-recovered run can be anomalous yet
  // end successfully).
  std::optional<bool> anomalous_override;

  std::size_t frame_count() const { return frames.size(); }
  bool anomalous() const { return anomalous_override ? *anomalous_override : !success; }
};

struct DemonstrationSet {
  std::vector<Demonstration> demos;
  std::string manifest_path;

  const Demonstration* find(const std::string& id) const {
    for (const auto& d : demos)
      if (d.id == id) return &d;
    return nullptr;
  }

  DemonstrationSet subset(const std::vector<std::string>& ids) const {
    DemonstrationSet out;
    out.manifest_path = manifest_path;
    for (const auto& id : ids) {
      const Demonstration* d = find(id);
      if (!d) throw InputError("subset: unknown demonstration id " + id);
      out.demos.push_back(*d);
    }
    std::sort(out.demos.begin(), out.demos.end(),
              [](const Demonstration& a, const Demonstration& b) { return a.id < b.id; });
    return out;
  }
};

// The training unit: a (pre-image, effect-image, action) pairing plus its
// success indicator and paraphrase slot.
struct ConditionTriplet {
  std::string pre_frame;
  std::string effect_frame;
  std::string action_text;
  std::string paraphrased_text;
  bool indicator = true;
  std::string source_demo_id;

  bool operator==(const ConditionTriplet&) const = default;
};

struct ParaphraseBank {
  std::map<std::string, std::vector<std::string>> templates;
  std::map<std::string, std::vector<std::string>> objects;
};

enum class AugmentDirection { PostAsPre, PreAsPost };

// Declared per dataset in the manifest's sidecar config; never inferred.
struct AugmentationRule {
  std::string source_template;
  std::string target_template;
  AugmentDirection direction = AugmentDirection::PostAsPre;
};

// ---------------------------------------------------------------------------
// Action-template helpers

// "pour bottle into cup" with slots [bottle, cup] -> "pour {0} into {1}".
// Slot values are substituted at their first occurrence, longest value first
// so that overlapping names cannot shadow each other.
inline std::string canonical_template(const std::string& action_text,
                                      const std::vector<std::string>& slots) {
  std::string tmpl = action_text;
  std::vector<std::size_t> order(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return slots[a].size() > slots[b].size();
  });
  for (std::size_t k : order) {
    const std::string& value = slots[k];
    if (value.empty()) continue;
    const std::size_t pos = tmpl.find(value);
    if (pos == std::string::npos) continue;
    tmpl.replace(pos, value.size(), "{" + std::to_string(k) + "}");
  }
  return tmpl;
}

inline std::string instantiate_template(const std::string& tmpl,
                                        const std::vector<std::string>& values) {
  std::string out = tmpl;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::string key = "{" + std::to_string(i) + "}";
    std::size_t pos;
    while ((pos = out.find(key)) != std::string::npos) out.replace(pos, key.size(), values[i]);
  }
  return out;
}

inline std::vector<std::size_t> template_placeholders(const std::string& tmpl) {
  std::vector<std::size_t> out;
  for (std::size_t pos = 0; (pos = tmpl.find('{', pos)) != std::string::npos; ++pos) {
    const std::size_t close = tmpl.find('}', pos);
    if (close == std::string::npos) break;
    out.push_back(static_cast<std::size_t>(std::stoul(tmpl.substr(pos + 1, close - pos - 1))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest ingestion

inline void validate_demo(const Demonstration& d) {
  const auto fail = [&](const std::string& why) {
    throw ValidationError("demonstration '" + d.id + "': " + why);
  };
  if (d.action_text.empty()) fail("action_text is empty");
  if (d.pre.begin != 0) fail("pre segment must start at frame 0");
  if (d.pre.begin > d.pre.end || d.core.begin > d.core.end || d.post.begin > d.post.end)
    fail("segment with begin > end");
  if (d.pre.end != d.core.begin)
    fail("pre and core segments overlap or leave a gap (pre ends at " +
         std::to_string(d.pre.end) + ", core starts at " + std::to_string(d.core.begin) + ")");
  if (d.core.end != d.post.begin)
    fail("core and post segments overlap or leave a gap (core ends at " +
         std::to_string(d.core.end) + ", post starts at " + std::to_string(d.post.begin) + ")");
  if (d.post.end != d.frame_count())
    fail("segments do not cover all " + std::to_string(d.frame_count()) + " frames");
  if (d.success && d.post.empty()) fail("successful demonstration with empty post segment");
}

inline Segment parse_segment(const json& j, const std::string& id, const char* name) {
  if (!j.is_array() || j.size() != 2)
    throw ParseError("demonstration '" + id + "': segment '" + name + "' must be [start, end)");
  return Segment{j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

inline Demonstration demo_from_json(const json& rec, const std::filesystem::path& base_dir) {
  Demonstration d;
  d.id = rec.at("id").get<std::string>();
  d.action_text = rec.at("action_text").get<std::string>();
  d.object_slots = rec.value("object_slots", std::vector<std::string>{});
  d.success = rec.at("success").get<bool>();
  d.camera_id = rec.value("camera_id", "cam0");
  for (const auto& f : rec.at("frames"))
    d.frames.push_back((base_dir / f.get<std::string>()).lexically_normal().string());
  const json& seg = rec.at("segments");
  d.pre = parse_segment(seg.at("pre"), d.id, "pre");
  d.core = parse_segment(seg.at("core"), d.id, "core");
  d.post = parse_segment(seg.at("post"), d.id, "post");
  if (rec.contains("anomalous")) d.anomalous_override = rec.at("anomalous").get<bool>();
  return d;
}

inline json demo_to_json(const Demonstration& d, const std::filesystem::path& base_dir) {
  json rec;
  rec["id"] = d.id;
  rec["action_text"] = d.action_text;
  rec["object_slots"] = d.object_slots;
  rec["success"] = d.success;
  rec["camera_id"] = d.camera_id;
  json frames = json::array();
  for (const auto& f : d.frames)
    frames.push_back(std::filesystem::relative(f, base_dir).generic_string());
  rec["frames"] = frames;
  rec["segments"] = {{"pre", {d.pre.begin, d.pre.end}},
                     {"core", {d.core.begin, d.core.end}},
                     {"post", {d.post.begin, d.post.end}}};
  if (d.anomalous_override) rec["anomalous"] = *d.anomalous_override;
  return rec;
}

// Line-delimited manifest, one record per demonstration. Records may share
// frame files: consecutive actions overlap at their post/pre boundary.
inline DemonstrationSet load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  DemonstrationSet set;
  set.manifest_path = path.string();
  const std::filesystem::path base_dir = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Demonstration d;
    try {
      d = demo_from_json(rec, base_dir);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen_ids.insert(d.id).second)
      throw ValidationError("duplicate demonstration id '" + d.id + "' at line " +
                            std::to_string(line_no));
    validate_demo(d);
    set.demos.push_back(std::move(d));
  }
  std::sort(set.demos.begin(), set.demos.end(),
            [](const Demonstration& a, const Demonstration& b) { return a.id < b.id; });
  return set;
}

inline void write_manifest(const DemonstrationSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  const std::filesystem::path base_dir = path.parent_path();
  for (const auto& d : set.demos) out << demo_to_json(d, base_dir).dump() << "\n";
}

// ---------------------------------------------------------------------------
// Labeling and triplet construction

// Per-frame phase of `demo` with respect to `queried_action` (canonical text).
// A mismatched query is unsatisfied everywhere; failed demonstrations have no
// effect frames.
inline PhaseLabel phase_label(const Demonstration& demo, std::size_t frame_index,
                              const std::string& queried_action) {
  if (frame_index >= demo.frame_count())
    throw BoundsError("frame index " + std::to_string(frame_index) + " out of range for '" +
                      demo.id + "' (" + std::to_string(demo.frame_count()) + " frames)");
  if (queried_action != demo.action_text) return PhaseLabel::Unsatisfied;
  if (demo.pre.contains(frame_index)) return PhaseLabel::Precondition;
  if (demo.post.contains(frame_index))
    return demo.success ? PhaseLabel::Effect : PhaseLabel::Unsatisfied;
  return PhaseLabel::Unsatisfied;
}

// All |pre| x |post| pairings. Paraphrase slots start as the canonical text.
inline std::vector<ConditionTriplet> build_triplets(const Demonstration& demo) {
  std::vector<ConditionTriplet> out;
  out.reserve(demo.pre.size() * demo.post.size());
  for (std::size_t i = demo.pre.begin; i < demo.pre.end; ++i) {
    for (std::size_t j = demo.post.begin; j < demo.post.end; ++j) {
      ConditionTriplet t;
      t.pre_frame = demo.frames[i];
      t.effect_frame = demo.frames[j];
      t.action_text = demo.action_text;
      t.paraphrased_text = demo.action_text;
      t.indicator = demo.success;
      t.source_demo_id = demo.id;
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-action augmentation

namespace detail {

struct DonorIndex {
  // For each rule, donors keyed by the slot values shared with the target.
  std::map<std::string, std::vector<const Demonstration*>> by_binding;
};

inline std::string shared_binding_key(const std::string& source_tmpl,
                                      const std::string& target_tmpl,
                                      const std::string& demo_tmpl,
                                      const std::vector<std::string>& slots) {
  // Placeholders appearing in both templates must bind to equal objects.
  const auto src = template_placeholders(source_tmpl);
  const auto tgt = template_placeholders(target_tmpl);
  std::string key;
  for (std::size_t p : tgt) {
    if (std::find(src.begin(), src.end(), p) == src.end()) continue;
    if (p >= slots.size())
      throw ConfigError("template '" + demo_tmpl + "' references slot " + std::to_string(p) +
                        " but the record has " + std::to_string(slots.size()) + " object slots");
    key += slots[p];
    key += '\x1f';
  }
  return key;
}

}  // namespace detail

// Builds the full triplet list for `set`, then substitutes frames across
// rule-related actions with the given probability. Substituting from a failed
// demonstration poisons the indicator. Deterministic for a fixed seed: the
// stream is split per demonstration id.
inline std::vector<ConditionTriplet> cross_action_augment(const DemonstrationSet& set,
                                                          const std::vector<AugmentationRule>& rules,
                                                          double probability, std::uint64_t seed) {
  // Index donors per rule.
  std::vector<detail::DonorIndex> donors(rules.size());
  std::vector<bool> rule_seen_source(rules.size(), false), rule_seen_target(rules.size(), false);
  for (const auto& d : set.demos) {
    const std::string tmpl = canonical_template(d.action_text, d.object_slots);
    for (std::size_t r = 0; r < rules.size(); ++r) {
      if (tmpl == rules[r].source_template) {
        rule_seen_source[r] = true;
        donors[r].by_binding[detail::shared_binding_key(rules[r].source_template,
                                                        rules[r].target_template, tmpl,
                                                        d.object_slots)]
            .push_back(&d);
      }
      if (tmpl == rules[r].target_template) rule_seen_target[r] = true;
    }
  }
  for (std::size_t r = 0; r < rules.size(); ++r) {
    if (!rule_seen_source[r])
      throw ConfigError("augmentation rule source '" + rules[r].source_template +
                        "' matches no demonstration in the set");
    if (!rule_seen_target[r])
      throw ConfigError("augmentation rule target '" + rules[r].target_template +
                        "' matches no demonstration in the set");
  }

  std::vector<ConditionTriplet> out;
  for (const auto& d : set.demos) {
    Rng rng = Rng::split(seed, d.id);
    std::vector<ConditionTriplet> triplets = build_triplets(d);
    const std::string tmpl = canonical_template(d.action_text, d.object_slots);
    for (auto& t : triplets) {
      for (std::size_t r = 0; r < rules.size(); ++r) {
        if (tmpl != rules[r].target_template) continue;
        const std::string key = detail::shared_binding_key(
            rules[r].source_template, rules[r].target_template, tmpl, d.object_slots);
        const auto it = donors[r].by_binding.find(key);
        if (it == donors[r].by_binding.end() || it->second.empty()) continue;
        if (probability <= 0.0 || !rng.bernoulli(probability)) continue;
        const Demonstration& donor =
            *it->second[static_cast<std::size_t>(rng.uniform_int(it->second.size()))];
        if (rules[r].direction == AugmentDirection::PostAsPre) {
          if (donor.post.empty()) continue;
          const std::size_t f =
              donor.post.begin + static_cast<std::size_t>(rng.uniform_int(donor.post.size()));
          t.pre_frame = donor.frames[f];
        } else {
          if (donor.pre.empty()) continue;
          const std::size_t f =
              donor.pre.begin + static_cast<std::size_t>(rng.uniform_int(donor.pre.size()));
          t.effect_frame = donor.frames[f];
        }
        t.indicator = t.indicator && donor.success;
        break;  // at most one substitution per triplet
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

inline std::vector<AugmentationRule> load_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open augmentation rules: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  std::vector<AugmentationRule> rules;
  for (const auto& r : j.at("rules")) {
    AugmentationRule rule;
    rule.source_template = r.at("source").get<std::string>();
    rule.target_template = r.at("target").get<std::string>();
    const std::string dir = r.at("direction").get<std::string>();
    if (dir == "post_as_pre")
      rule.direction = AugmentDirection::PostAsPre;
    else if (dir == "pre_as_post")
      rule.direction = AugmentDirection::PreAsPost;
    else
      throw ParseError(path.string() + ": unknown rule direction '" + dir + "'");
    rules.push_back(std::move(rule));
  }
  return rules;
}

inline void write_rules(const std::vector<AugmentationRule>& rules,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write augmentation rules: " + path.string());
  json arr = json::array();
  for (const auto& r : rules)
    arr.push_back({{"source", r.source_template},
                   {"target", r.target_template},
                   {"direction",
                    r.direction == AugmentDirection::PostAsPre ? "post_as_pre" : "pre_as_post"}});
  out << json{{"rules", arr}}.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Paraphrase bank

inline void validate_bank(const ParaphraseBank& bank) {
  const auto check = [](const auto& section, const char* what) {
    for (const auto& [key, variants] : section) {
      if (variants.empty())
        throw ValidationError(std::string(what) + " '" + key + "' has no variants");
      if (std::find(variants.begin(), variants.end(), key) == variants.end())
        throw ValidationError(std::string(what) + " '" + key +
                              "' does not include its canonical form");
    }
  };
  check(bank.templates, "paraphrase bank template");
  check(bank.objects, "paraphrase bank object");
}

inline ParaphraseBank load_paraphrase_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open paraphrase bank: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  ParaphraseBank bank;
  if (j.contains("templates"))
    for (const auto& [key, val] : j.at("templates").items())
      bank.templates[key] = val.get<std::vector<std::string>>();
  if (j.contains("objects"))
    for (const auto& [key, val] : j.at("objects").items())
      bank.objects[key] = val.get<std::vector<std::string>>();
  validate_bank(bank);
  return bank;
}

// Independent draws for the action formulation and each object name.
inline std::string sample_paraphrase(const ParaphraseBank& bank, const std::string& action_text,
                                     const std::vector<std::string>& object_slots, Rng& rng) {
  const std::string tmpl = canonical_template(action_text, object_slots);
  const auto tit = bank.templates.find(tmpl);
  if (tit == bank.templates.end())
    throw ConfigError("paraphrase bank has no entry for action template '" + tmpl + "'");
  const std::vector<std::string>& tvars = tit->second;
  std::string chosen = tvars[static_cast<std::size_t>(rng.uniform_int(tvars.size()))];
  std::vector<std::string> values;
  values.reserve(object_slots.size());
  for (const auto& obj : object_slots) {
    const auto oit = bank.objects.find(obj);
    if (oit == bank.objects.end())
      throw ConfigError("paraphrase bank has no entry for object '" + obj + "'");
    const std::vector<std::string>& ovars = oit->second;
    values.push_back(ovars[static_cast<std::size_t>(rng.uniform_int(ovars.size()))]);
  }
  return instantiate_template(chosen, values);
}

// ---------------------------------------------------------------------------
// Train/validation split (stratified by the success flag, demonstration
// granularity, persisted so runs are reproducible from the split file alone).

struct Split {
  std::uint64_t seed = 0;
  double train_frac = 0.7;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

inline Split stratified_split(const DemonstrationSet& set, double train_frac, std::uint64_t seed) {
  if (train_frac <= 0.0 || train_frac >= 1.0)
    throw ConfigError("train fraction must be in (0, 1)");
  std::vector<std::string> succ, fail;
  for (const auto& d : set.demos) (d.success ? succ : fail).push_back(d.id);
  Rng rng(Rng::hash_combine(seed, "split"));
  rng.shuffle(succ);
  rng.shuffle(fail);
  Split split;
  split.seed = seed;
  split.train_frac = train_frac;
  const auto take = [&](std::vector<std::string>& ids) {
    const std::size_t n_train =
        static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(ids.size())));
    for (std::size_t i = 0; i < ids.size(); ++i)
      (i < n_train ? split.train_ids : split.val_ids).push_back(ids[i]);
  };
  take(succ);
  take(fail);
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.val_ids.begin(), split.val_ids.end());
  return split;
}

inline void write_split(const Split& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write split file: " + path.string());
  json j{{"seed", s.seed}, {"train_frac", s.train_frac}, {"train", s.train_ids}, {"val", s.val_ids}};
  out << j.dump(2) << "\n";
}

inline Split load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  Split s;
  s.seed = j.value("seed", 0ull);
  s.train_frac = j.value("train_frac", 0.7);
  s.train_ids = j.at("train").get<std::vector<std::string>>();
  s.val_ids = j.at("val").get<std::vector<std::string>>();
  return s;
}

}  // namespace condmon::corpus
