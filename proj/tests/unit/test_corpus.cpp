#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "condmon/corpus.hpp"

#include "common/testutil.hpp"

using namespace condmon;
using namespace condmon::corpus;
using condmon::testing::TempDir;
using condmon::testing::data_dir;

namespace {

Demonstration make_demo(const std::string& id, std::size_t pre, std::size_t core, std::size_t post,
                        const std::string& action = "pick up bottle", bool success = true) {
  Demonstration d;
  d.id = id;
  d.action_text = action;
  d.object_slots = {"bottle"};
  d.success = success;
  d.camera_id = "cam0";
  const std::size_t n = pre + core + post;
  for (std::size_t i = 0; i < n; ++i)
    d.frames.push_back("frames/" + id + "/" + std::to_string(i) + ".json");
  d.pre = {0, pre};
  d.core = {pre, pre + core};
  d.post = {pre + core, n};
  return d;
}

}  // namespace

TEST_CASE("load_manifest reads the committed mini-manifests") {
  const auto success_set = load_manifest(data_dir() / "mini_success" / "manifest.jsonl");
  CHECK(success_set.demos.size() == 5);
  for (std::size_t i = 1; i < success_set.demos.size(); ++i)
    CHECK(success_set.demos[i - 1].id < success_set.demos[i].id);  // stable ordering by id
  for (const auto& d : success_set.demos) CHECK(d.success);

  const auto mixed_set = load_manifest(data_dir() / "mini_mixed" / "manifest.jsonl");
  CHECK(mixed_set.demos.size() == 7);
  std::size_t failed = 0;
  for (const auto& d : mixed_set.demos)
    if (!d.success) ++failed;
  CHECK(failed == 2);
}

TEST_CASE("manifest record count equals line count") {
  TempDir tmp("manifest");
  std::ofstream out(tmp.path() / "m.jsonl");
  for (int i = 0; i < 3; ++i) {
    DemonstrationSet one;
    one.demos = {make_demo("d" + std::to_string(i), 2, 1, 2)};
    out << demo_to_json(one.demos[0], tmp.path()).dump() << "\n";
  }
  out.close();
  CHECK(load_manifest(tmp.path() / "m.jsonl").demos.size() == 3);
}

TEST_CASE("malformed manifest lines carry file and line context") {
  TempDir tmp("badjson");
  std::ofstream out(tmp.path() / "m.jsonl");
  out << demo_to_json(make_demo("ok", 2, 1, 2), tmp.path()).dump() << "\n";
  out << "{not json\n";
  out.close();
  try {
    load_manifest(tmp.path() / "m.jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
}

TEST_CASE("overlapping segments are rejected with the demonstration id") {
  Demonstration d = make_demo("bad_overlap", 5, 3, 2);
  d.core.begin = 4;  // pre [0,5) overlaps core [4,...)
  try {
    validate_demo(d);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("bad_overlap") != std::string::npos);
  }
}

TEST_CASE("successful demonstrations need a non-empty post segment") {
  Demonstration d = make_demo("no_post", 3, 2, 0);
  CHECK_THROWS_AS(validate_demo(d), ValidationError);
  d.success = false;
  CHECK_NOTHROW(validate_demo(d));
}

TEST_CASE("duplicate ids are rejected") {
  TempDir tmp("dup");
  std::ofstream out(tmp.path() / "m.jsonl");
  out << demo_to_json(make_demo("same", 2, 1, 2), tmp.path()).dump() << "\n";
  out << demo_to_json(make_demo("same", 2, 1, 2), tmp.path()).dump() << "\n";
  out.close();
  CHECK_THROWS_AS(load_manifest(tmp.path() / "m.jsonl"), ValidationError);
}

TEST_CASE("phase_label follows the segment and success rules") {
  const Demonstration ok = make_demo("ok", 3, 2, 3);
  CHECK(phase_label(ok, 0, "pick up bottle") == PhaseLabel::Precondition);
  CHECK(phase_label(ok, 2, "pick up bottle") == PhaseLabel::Precondition);
  CHECK(phase_label(ok, 3, "pick up bottle") == PhaseLabel::Unsatisfied);  // core
  CHECK(phase_label(ok, 5, "pick up bottle") == PhaseLabel::Effect);
  CHECK(phase_label(ok, 7, "pick up bottle") == PhaseLabel::Effect);

  const Demonstration failed = make_demo("fail", 3, 2, 3, "pick up bottle", false);
  CHECK(phase_label(failed, 0, "pick up bottle") == PhaseLabel::Precondition);
  CHECK(phase_label(failed, 6, "pick up bottle") == PhaseLabel::Unsatisfied);

  // Mismatched query: unsatisfied everywhere.
  for (std::size_t i = 0; i < ok.frame_count(); ++i)
    CHECK(phase_label(ok, i, "wipe table") == PhaseLabel::Unsatisfied);

  CHECK_THROWS_AS(phase_label(ok, 8, "pick up bottle"), BoundsError);
}

TEST_CASE("phase_label sweep over the hand-labeled mini-manifest") {
  const auto set = load_manifest(data_dir() / "mini_mixed" / "manifest.jsonl");
  for (const auto& d : set.demos) {
    for (std::size_t i = 0; i < d.frame_count(); ++i) {
      const PhaseLabel label = phase_label(d, i, d.action_text);
      if (d.pre.contains(i)) {
        CHECK(label == PhaseLabel::Precondition);
      } else if (d.core.contains(i)) {
        CHECK(label == PhaseLabel::Unsatisfied);
      } else {
        CHECK(label == (d.success ? PhaseLabel::Effect : PhaseLabel::Unsatisfied));
      }
    }
  }
}

TEST_CASE("build_triplets enumerates the pre x post product") {
  const Demonstration d = make_demo("t", 3, 1, 2);
  const auto triplets = build_triplets(d);
  REQUIRE(triplets.size() == 6);
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& t : triplets) {
    pairs.insert({t.pre_frame, t.effect_frame});
    CHECK(t.indicator);
    CHECK(t.source_demo_id == "t");
    CHECK(t.action_text == "pick up bottle");
  }
  CHECK(pairs.size() == 6);

  const Demonstration failed = make_demo("tf", 2, 1, 2, "pick up bottle", false);
  for (const auto& t : build_triplets(failed)) CHECK_FALSE(t.indicator);

  Demonstration empty_post = make_demo("te", 2, 3, 0, "pick up bottle", false);
  CHECK(build_triplets(empty_post).empty());
}

TEST_CASE("build_triplets size equals the segment product for generated demos") {
  const auto set = load_manifest(data_dir() / "mini_success" / "manifest.jsonl");
  for (const auto& d : set.demos)
    CHECK(build_triplets(d).size() == d.pre.size() * d.post.size());
}

namespace {

DemonstrationSet two_demo_set() {
  DemonstrationSet set;
  set.demos.push_back(make_demo("pick0", 3, 2, 3, "pick up bottle"));
  Demonstration place = make_demo("place0", 2, 2, 4, "place bottle on table");
  place.object_slots = {"bottle", "table"};
  set.demos.push_back(place);
  return set;
}

std::vector<AugmentationRule> pick_from_place_rule() {
  return {{"place {0} on {1}", "pick up {0}", AugmentDirection::PostAsPre}};
}

}  // namespace

TEST_CASE("augmentation with probability zero is the identity") {
  const auto set = two_demo_set();
  const auto baseline = [&] {
    std::vector<ConditionTriplet> all;
    for (const auto& d : set.demos)
      for (auto& t : build_triplets(d)) all.push_back(t);
    return all;
  }();
  const auto augmented = cross_action_augment(set, pick_from_place_rule(), 0.0, 7);
  REQUIRE(augmented.size() == baseline.size());
  for (std::size_t i = 0; i < augmented.size(); ++i) CHECK(augmented[i] == baseline[i]);
}

TEST_CASE("augmentation with probability one substitutes every eligible pre frame") {
  const auto set = two_demo_set();
  const Demonstration& place = *set.find("place0");
  std::set<std::string> place_post_frames;
  for (std::size_t i = place.post.begin; i < place.post.end; ++i)
    place_post_frames.insert(place.frames[i]);
  const auto augmented = cross_action_augment(set, pick_from_place_rule(), 1.0, 7);
  for (const auto& t : augmented) {
    if (t.source_demo_id != "pick0") continue;
    CHECK(place_post_frames.count(t.pre_frame) == 1);
  }
}

TEST_CASE("substitution fraction concentrates around the probability") {
  DemonstrationSet set;
  set.demos.push_back(make_demo("pick_big", 100, 1, 100, "pick up bottle"));
  Demonstration place = make_demo("place_big", 4, 2, 4, "place bottle on table");
  place.object_slots = {"bottle", "table"};
  set.demos.push_back(place);
  const auto augmented = cross_action_augment(set, pick_from_place_rule(), 0.5, 11);
  std::size_t substituted = 0, eligible = 0;
  for (const auto& t : augmented) {
    if (t.source_demo_id != "pick_big") continue;
    ++eligible;
    if (t.pre_frame.find("place_big") != std::string::npos) ++substituted;
  }
  REQUIRE(eligible == 10000);
  const double frac = static_cast<double>(substituted) / static_cast<double>(eligible);
  CHECK(frac >= 0.48);
  CHECK(frac <= 0.52);
}

TEST_CASE("augmentation is deterministic per seed") {
  const auto set = two_demo_set();
  const auto a = cross_action_augment(set, pick_from_place_rule(), 0.5, 3);
  const auto b = cross_action_augment(set, pick_from_place_rule(), 0.5, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  const auto c = cross_action_augment(set, pick_from_place_rule(), 0.5, 4);
  bool any_different = false;
  for (std::size_t i = 0; i < a.size(); ++i) any_different |= !(a[i] == c[i]);
  CHECK(any_different);
}

TEST_CASE("failed donors poison the indicator") {
  DemonstrationSet set;
  set.demos.push_back(make_demo("pick0", 2, 1, 2, "pick up bottle"));
  Demonstration place = make_demo("place0", 2, 1, 2, "place bottle on table", false);
  place.object_slots = {"bottle", "table"};
  set.demos.push_back(place);
  const auto augmented = cross_action_augment(set, pick_from_place_rule(), 1.0, 7);
  for (const auto& t : augmented)
    if (t.source_demo_id == "pick0") CHECK_FALSE(t.indicator);
}

TEST_CASE("rules referencing unknown templates raise a configuration error") {
  const auto set = two_demo_set();
  std::vector<AugmentationRule> rules = {
      {"pour {0} into {1}", "pick up {0}", AugmentDirection::PostAsPre}};
  CHECK_THROWS_AS(cross_action_augment(set, rules, 0.5, 7), ConfigError);
}

TEST_CASE("paraphrase sampling") {
  const auto bank = load_paraphrase_bank(data_dir() / "paraphrase_bank.json");
  Rng rng(5);

  SUBCASE("singleton bank returns the canonical string") {
    ParaphraseBank singleton;
    singleton.templates["pick up {0}"] = {"pick up {0}"};
    singleton.objects["bottle"] = {"bottle"};
    for (int i = 0; i < 10; ++i)
      CHECK(sample_paraphrase(singleton, "pick up bottle", {"bottle"}, rng) == "pick up bottle");
  }

  SUBCASE("two template variants split close to evenly") {
    ParaphraseBank two;
    two.templates["pick up {0}"] = {"pick up {0}", "grab {0}"};
    two.objects["bottle"] = {"bottle"};
    std::size_t grabs = 0;
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i)
      if (sample_paraphrase(two, "pick up bottle", {"bottle"}, rng).rfind("grab", 0) == 0) ++grabs;
    const double frac = static_cast<double>(grabs) / static_cast<double>(n);
    CHECK(frac >= 0.48);
    CHECK(frac <= 0.52);
  }

  SUBCASE("object variants are substituted into the sampled template") {
    ParaphraseBank b;
    b.templates["pour {0} into {1}"] = {"pour {0} into {1}"};
    b.objects["juice"] = {"juice", "the juice bottle"};
    b.objects["cup"] = {"cup", "the cup"};
    bool saw_variant = false;
    for (int i = 0; i < 50; ++i) {
      const std::string s = sample_paraphrase(b, "pour juice into cup", {"juice", "cup"}, rng);
      CHECK(s.rfind("pour ", 0) == 0);
      CHECK(s.find(" into ") != std::string::npos);
      if (s.find("the juice bottle") != std::string::npos) saw_variant = true;
    }
    CHECK(saw_variant);
  }

  SUBCASE("unknown keys raise configuration errors naming the key") {
    try {
      sample_paraphrase(bank, "juggle bottle", {"bottle"}, rng);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("juggle") != std::string::npos);
    }
    ParaphraseBank no_obj;
    no_obj.templates["pick up {0}"] = {"pick up {0}"};
    CHECK_THROWS_AS(sample_paraphrase(no_obj, "pick up mug", {"mug"}, rng), ConfigError);
  }
}

TEST_CASE("bank validation requires the canonical entry") {
  TempDir tmp("bank");
  std::ofstream out(tmp.path() / "bank.json");
  out << R"({"templates": {"pick up {0}": ["grab {0}"]}, "objects": {}})";
  out.close();
  CHECK_THROWS_AS(load_paraphrase_bank(tmp.path() / "bank.json"), ValidationError);
}

TEST_CASE("canonical template extraction and instantiation") {
  CHECK(canonical_template("pour bottle into cup", {"bottle", "cup"}) == "pour {0} into {1}");
  CHECK(canonical_template("wipe table", {"table"}) == "wipe {0}");
  CHECK(instantiate_template("pour {0} into {1}", {"juice", "cup"}) == "pour juice into cup");
}

TEST_CASE("stratified split preserves the success distribution") {
  DemonstrationSet set;
  for (int i = 0; i < 100; ++i)
    set.demos.push_back(
        make_demo("d" + std::to_string(i), 2, 1, 2, "pick up bottle", i % 5 != 0));
  const Split split = stratified_split(set, 0.7, 42);
  CHECK(split.train_ids.size() == 70);
  CHECK(split.val_ids.size() == 30);
  const auto count_failed = [&](const std::vector<std::string>& ids) {
    std::size_t failed = 0;
    for (const auto& id : ids)
      if (!set.find(id)->success) ++failed;
    return failed;
  };
  // 20 failures stratify into exactly 14 train / 6 val.
  CHECK(count_failed(split.train_ids) == 14);
  CHECK(count_failed(split.val_ids) == 6);

  // Deterministic and persistent.
  const Split again = stratified_split(set, 0.7, 42);
  CHECK(again.train_ids == split.train_ids);
  TempDir tmp("split");
  write_split(split, tmp.path() / "split.json");
  const Split loaded = load_split(tmp.path() / "split.json");
  CHECK(loaded.train_ids == split.train_ids);
  CHECK(loaded.val_ids == split.val_ids);
}

TEST_CASE("subset rejects unknown ids and sorts by id") {
  const auto set = load_manifest(data_dir() / "mini_success" / "manifest.jsonl");
  CHECK_THROWS_AS(set.subset({"nope"}), InputError);
  const auto sub = set.subset({set.demos[2].id, set.demos[0].id});
  CHECK(sub.demos.size() == 2);
  CHECK(sub.demos[0].id < sub.demos[1].id);
}

TEST_CASE("rules round-trip through their file format") {
  TempDir tmp("rules");
  std::vector<AugmentationRule> rules = {
      {"place {0} on {1}", "pick up {0}", AugmentDirection::PostAsPre},
      {"pick up {0}", "place {0} on {1}", AugmentDirection::PreAsPost}};
  write_rules(rules, tmp.path() / "rules.json");
  const auto loaded = load_rules(tmp.path() / "rules.json");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].source_template == rules[0].source_template);
  CHECK(loaded[1].direction == AugmentDirection::PreAsPost);
}
