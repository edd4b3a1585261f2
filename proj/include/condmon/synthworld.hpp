#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/errors.hpp"
#include "condmon/rng.hpp"

namespace condmon::synthworld {

using corpus::PhaseLabel;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Symbolic world: objects on an 8x8 table, a gripper, a spill flag and a
// cloth that gets dirty from wiping. Frames are serialized attribute maps;
// the synthetic visual encoder turns them into token grids.

constexpr int kTableSize = 8;

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

struct ObjectState {
  bool on_table = false;
  Cell cell;
  bool filled = false;
};

enum class ClothState { Clean, Dirty, InGripper };

struct WorldState {
  std::map<std::string, ObjectState> objects;
  std::optional<std::string> held;
  bool spill = false;
  bool busy = false;  // mid-action motion; neither condition can hold
  bool cloth_dirty = false;
  double jitter = 0.0;  // per-frame nuisance, rendered like any attribute

  ClothState cloth_state() const {
    if (held && *held == "cloth") return ClothState::InGripper;
    return cloth_dirty ? ClothState::Dirty : ClothState::Clean;
  }
};

inline void validate_world(const WorldState& w) {
  std::set<Cell> used;
  for (const auto& [name, obj] : w.objects) {
    if (!obj.on_table) continue;
    if (obj.cell.x < 0 || obj.cell.x >= kTableSize || obj.cell.y < 0 || obj.cell.y >= kTableSize)
      throw ValidationError("object '" + name + "' is off the table");
    if (!used.insert(obj.cell).second)
      throw ValidationError("two objects share cell (" + std::to_string(obj.cell.x) + "," +
                            std::to_string(obj.cell.y) + ")");
  }
  if (w.held && w.objects.count(*w.held) && w.objects.at(*w.held).on_table)
    throw ValidationError("held object '" + *w.held + "' is also on the table");
}

inline std::vector<std::pair<std::string, double>> world_attrs(const WorldState& w) {
  std::vector<std::pair<std::string, double>> attrs;
  for (const auto& [name, obj] : w.objects) {
    if (obj.on_table) {
      attrs.emplace_back("obj." + name + ".on_table", 1.0);
      attrs.emplace_back("obj." + name + ".x", (obj.cell.x + 1) / static_cast<double>(kTableSize));
      attrs.emplace_back("obj." + name + ".y", (obj.cell.y + 1) / static_cast<double>(kTableSize));
    }
    if (obj.filled) attrs.emplace_back("obj." + name + ".filled", 1.0);
  }
  attrs.emplace_back("held." + (w.held ? *w.held : std::string("none")), 1.0);
  if (w.spill) attrs.emplace_back("spill", 1.0);
  if (w.busy) attrs.emplace_back("busy", 1.0);
  if (w.cloth_dirty) attrs.emplace_back("cloth.dirty", 1.0);
  attrs.emplace_back("jitter", w.jitter);
  std::sort(attrs.begin(), attrs.end());
  return attrs;
}

inline json world_to_json(const WorldState& w) {
  json j;
  json objs = json::object();
  for (const auto& [name, obj] : w.objects)
    objs[name] = {{"on_table", obj.on_table},
                  {"cell", {obj.cell.x, obj.cell.y}},
                  {"filled", obj.filled}};
  j["state"] = {{"objects", objs},
                {"held", w.held ? json(*w.held) : json(nullptr)},
                {"spill", w.spill},
                {"busy", w.busy},
                {"cloth_dirty", w.cloth_dirty}};
  json attrs = json::object();
  for (const auto& [k, v] : world_attrs(w)) attrs[k] = v;
  j["attrs"] = attrs;
  return j;
}

inline void write_frame(const WorldState& w, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write frame file: " + path.string());
  out << world_to_json(w).dump() << "\n";
}

inline WorldState world_from_json(const json& j) {
  WorldState w;
  const json& st = j.contains("state") ? j.at("state") : j;
  if (st.contains("objects"))
    for (const auto& [name, val] : st.at("objects").items()) {
      ObjectState obj;
      obj.on_table = val.value("on_table", false);
      if (val.contains("cell"))
        obj.cell = Cell{val["cell"][0].get<int>(), val["cell"][1].get<int>()};
      obj.filled = val.value("filled", false);
      w.objects[name] = obj;
    }
  if (st.contains("held") && !st["held"].is_null()) w.held = st["held"].get<std::string>();
  w.spill = st.value("spill", false);
  w.busy = st.value("busy", false);
  w.cloth_dirty = st.value("cloth_dirty", false);
  return w;
}

inline WorldState read_frame(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open frame file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return world_from_json(j);
}

// ---------------------------------------------------------------------------
// Action vocabulary

enum class ActionKind { PickUp, Pour, Place, Wipe };

struct ParsedAction {
  ActionKind kind;
  std::vector<std::string> slots;
};

// Matches an instantiated description against the four action templates.
inline ParsedAction parse_action(const std::string& action_text) {
  const auto match = [&](const std::string& prefix, const std::string& middle,
                         std::vector<std::string>& out) {
    if (action_text.rfind(prefix, 0) != 0) return false;
    const std::string rest = action_text.substr(prefix.size());
    if (middle.empty()) {
      if (rest.empty()) return false;
      out = {rest};
      return true;
    }
    const std::size_t pos = rest.find(middle);
    if (pos == std::string::npos || pos == 0 || pos + middle.size() >= rest.size()) return false;
    out = {rest.substr(0, pos), rest.substr(pos + middle.size())};
    return true;
  };
  std::vector<std::string> slots;
  if (match("pick up ", "", slots)) return {ActionKind::PickUp, slots};
  if (match("pour ", " into ", slots)) return {ActionKind::Pour, slots};
  if (match("place ", " on ", slots)) return {ActionKind::Place, slots};
  if (match("wipe ", "", slots)) return {ActionKind::Wipe, slots};
  throw InputError("unknown action: '" + action_text + "'");
}

inline std::string action_template(ActionKind kind) {
  switch (kind) {
    case ActionKind::PickUp: return "pick up {0}";
    case ActionKind::Pour: return "pour {0} into {1}";
    case ActionKind::Place: return "place {0} on {1}";
    case ActionKind::Wipe: return "wipe {0}";
  }
  return {};
}

namespace detail {

inline bool object_on_table(const WorldState& w, const std::string& name) {
  if (name == "table") return true;
  const auto it = w.objects.find(name);
  return it != w.objects.end() && it->second.on_table;
}

inline bool object_filled(const WorldState& w, const std::string& name) {
  const auto it = w.objects.find(name);
  return it != w.objects.end() && it->second.filled;
}

}  // namespace detail

inline bool precondition_holds(const WorldState& w, const ParsedAction& a) {
  if (w.busy) return false;
  switch (a.kind) {
    case ActionKind::PickUp:
      return detail::object_on_table(w, a.slots[0]) && !w.held;
    case ActionKind::Pour:
      return w.held == a.slots[0] && detail::object_on_table(w, a.slots[1]) &&
             !detail::object_filled(w, a.slots[1]) && !w.spill;
    case ActionKind::Place:
      return w.held == a.slots[0] && detail::object_on_table(w, a.slots[1]);
    case ActionKind::Wipe:
      return w.held == std::string("cloth");
  }
  return false;
}

inline bool effect_holds(const WorldState& before, const WorldState& after,
                         const ParsedAction& a) {
  (void)before;
  if (after.busy) return false;
  switch (a.kind) {
    case ActionKind::PickUp:
      return after.held == a.slots[0];
    case ActionKind::Pour:
      return after.held == a.slots[0] && detail::object_filled(after, a.slots[1]) && !after.spill;
    case ActionKind::Place:
      return detail::object_on_table(after, a.slots[0]) && !after.held;
    case ActionKind::Wipe:
      return after.held == std::string("cloth") && !after.spill && after.cloth_dirty;
  }
  return false;
}

// Symbolic ground truth for a state with respect to an action: effect takes
// precedence, then precondition, otherwise unsatisfied. This is the
// brute-force oracle the learned model is validated against.
inline PhaseLabel world_effect_oracle(const WorldState& state_before, const std::string& action,
                                      const WorldState& state_after) {
  const ParsedAction a = parse_action(action);
  if (effect_holds(state_before, state_after, a)) return PhaseLabel::Effect;
  if (precondition_holds(state_after, a)) return PhaseLabel::Precondition;
  return PhaseLabel::Unsatisfied;
}

inline WorldState apply_effect(WorldState w, const ParsedAction& a) {
  switch (a.kind) {
    case ActionKind::PickUp: {
      auto& obj = w.objects.at(a.slots[0]);
      obj.on_table = false;
      w.held = a.slots[0];
      break;
    }
    case ActionKind::Pour:
      w.objects.at(a.slots[1]).filled = true;
      break;
    case ActionKind::Place: {
      auto& obj = w.objects.at(a.slots[0]);
      // Deterministic free-cell scan.
      std::set<Cell> used;
      for (const auto& [name, o] : w.objects)
        if (o.on_table) used.insert(o.cell);
      for (int y = 0; y < kTableSize && !obj.on_table; ++y)
        for (int x = 0; x < kTableSize; ++x)
          if (!used.count(Cell{x, y})) {
            obj.cell = Cell{x, y};
            obj.on_table = true;
            break;
          }
      w.held.reset();
      break;
    }
    case ActionKind::Wipe:
      w.spill = false;
      w.cloth_dirty = true;
      break;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Scenario scripts

enum class EventKind { RemoveObject, Spill, GraspFailure };

struct ScriptEvent {
  EventKind kind;
  std::size_t frame = 0;    // stream index for remove_object / spill
  std::string object;       // for remove_object
  std::size_t attempt = 0;  // 1-based pick step index for grasp_failure
};

struct ActionStep {
  std::string action_text;
  std::vector<std::string> object_slots;
  std::size_t pre_frames = 10;
  std::size_t core_frames = 6;
  std::size_t post_frames = 10;
};

struct ScenarioScript {
  std::string id;
  std::map<std::string, ObjectState> initial_objects;
  std::optional<std::string> initially_held;
  std::vector<ActionStep> steps;
  std::vector<ScriptEvent> events;

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      if (k == 0) n += steps[k].pre_frames;
      n += steps[k].core_frames + steps[k].post_frames;
    }
    return n;
  }
};

inline void validate_script(const ScenarioScript& script) {
  if (script.steps.empty()) throw ValidationError("script '" + script.id + "' has no steps");
  if (script.initially_held && !script.initial_objects.count(*script.initially_held))
    throw ValidationError("script '" + script.id + "': initially held object '" +
                          *script.initially_held + "' is not declared");
  for (std::size_t k = 0; k < script.steps.size(); ++k) {
    const auto& s = script.steps[k];
    if (s.pre_frames == 0 || s.core_frames == 0 || s.post_frames == 0)
      throw ValidationError("script '" + script.id + "' step " + std::to_string(k) +
                            ": phase durations must be positive");
    const ParsedAction a = parse_action(s.action_text);
    for (const auto& slot : a.slots)
      if (slot != "table" && !script.initial_objects.count(slot) &&
          script.initially_held != slot)
        throw ValidationError("script '" + script.id + "' references absent object '" + slot +
                              "'");
    // Consecutive actions share frames: one action's post segment is the
    // next action's pre segment, so the durations must agree.
    if (k > 0 && script.steps[k - 1].post_frames != s.pre_frames)
      throw ValidationError("script '" + script.id + "' step " + std::to_string(k) +
                            ": pre duration must equal the previous post duration");
  }
  const std::size_t total = script.total_frames();
  std::size_t picks = 0;
  for (const auto& s : script.steps)
    if (parse_action(s.action_text).kind == ActionKind::PickUp) ++picks;
  for (const auto& e : script.events) {
    if (e.kind == EventKind::GraspFailure) {
      if (e.attempt == 0 || e.attempt > picks)
        throw ValidationError("script '" + script.id + "': grasp_failure attempt " +
                              std::to_string(e.attempt) + " has no matching pick step");
    } else if (e.frame >= total) {
      throw ValidationError("script '" + script.id + "': event frame " + std::to_string(e.frame) +
                            " outside the " + std::to_string(total) + "-frame stream");
    }
    if (e.kind == EventKind::RemoveObject && !script.initial_objects.count(e.object))
      throw ValidationError("script '" + script.id + "': remove_object references absent '" +
                            e.object + "'");
  }
}

inline ScenarioScript script_from_json(const json& j) {
  ScenarioScript s;
  s.id = j.at("id").get<std::string>();
  if (j.contains("objects"))
  for (const auto& [name, val] : j.at("objects").items()) {
    ObjectState obj;
    obj.on_table = val.value("on_table", true);
    if (val.contains("cell")) obj.cell = Cell{val["cell"][0].get<int>(), val["cell"][1].get<int>()};
    obj.filled = val.value("filled", false);
    s.initial_objects[name] = obj;
  }
  if (j.contains("held") && !j["held"].is_null()) s.initially_held = j["held"].get<std::string>();
  for (const auto& st : j.at("steps")) {
    ActionStep step;
    step.object_slots = st.value("slots", std::vector<std::string>{});
    step.action_text =
        corpus::instantiate_template(st.at("action").get<std::string>(), step.object_slots);
    step.pre_frames = st.value("pre", 10u);
    step.core_frames = st.value("core", 6u);
    step.post_frames = st.value("post", 10u);
    s.steps.push_back(std::move(step));
  }
  for (const auto& ev : j.value("events", json::array())) {
    ScriptEvent e{};
    const std::string kind = ev.at("type").get<std::string>();
    if (kind == "remove_object") {
      e.kind = EventKind::RemoveObject;
      e.frame = ev.at("frame").get<std::size_t>();
      e.object = ev.at("object").get<std::string>();
    } else if (kind == "spill") {
      e.kind = EventKind::Spill;
      e.frame = ev.at("frame").get<std::size_t>();
    } else if (kind == "grasp_failure") {
      e.kind = EventKind::GraspFailure;
      e.attempt = ev.at("attempt").get<std::size_t>();
    } else {
      throw ParseError("unknown event type: " + kind);
    }
    s.events.push_back(e);
  }
  validate_script(s);
  return s;
}

inline ScenarioScript load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open script: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return script_from_json(j);
}

// ---------------------------------------------------------------------------
// Simulation

enum class Phase { Pre, Core, Post };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::Pre: return "pre";
    case Phase::Core: return "core";
    case Phase::Post: return "post";
  }
  return "?";
}

struct StreamFrame {
  std::size_t index = 0;
  WorldState world;
  std::size_t step = 0;          // script step active at this frame
  Phase phase = Phase::Pre;      // scripted motion phase
  std::string action_text;       // active action
  PhaseLabel ground_truth = PhaseLabel::Unsatisfied;  // oracle label for it
};

struct SimulatedStep {
  std::size_t step = 0;
  std::string action_text;
  std::vector<std::string> object_slots;
  bool success = true;
  std::size_t first_frame = 0;  // stream index of the demo's frame 0
  corpus::Segment pre, core, post;  // relative to first_frame
};

struct Simulation {
  std::vector<StreamFrame> frames;
  std::vector<SimulatedStep> steps;
};

// Plays the script forward. Consecutive steps share their post/pre boundary
// frames, mirroring how overlapping segments are labeled in the manifests.
inline Simulation simulate(const ScenarioScript& script, std::uint64_t seed) {
  validate_script(script);
  Rng rng(Rng::hash_combine(seed, "sim|" + script.id));
  Simulation sim;
  WorldState world;
  world.objects = script.initial_objects;
  world.held = script.initially_held;
  if (world.held && world.objects.count(*world.held)) world.objects[*world.held].on_table = false;
  validate_world(world);

  std::size_t pick_counter = 0;
  std::size_t frame_idx = 0;

  const auto timed_events = [&](std::size_t frame, WorldState& w) {
    for (const auto& e : script.events) {
      if (e.kind == EventKind::Spill && e.frame == frame) w.spill = true;
      if (e.kind == EventKind::RemoveObject && e.frame == frame)
        w.objects.at(e.object).on_table = false;
    }
  };

  const auto emit = [&](const WorldState& w, std::size_t step, Phase phase,
                        const WorldState& before_core) {
    StreamFrame f;
    f.index = frame_idx++;
    f.world = w;
    f.world.jitter = 0.25 * rng.normal();
    f.step = step;
    f.phase = phase;
    f.action_text = script.steps[step].action_text;
    f.ground_truth = world_effect_oracle(before_core, f.action_text, f.world);
    sim.frames.push_back(f);
  };

  for (std::size_t k = 0; k < script.steps.size(); ++k) {
    const ActionStep& step = script.steps[k];
    const ParsedAction action = parse_action(step.action_text);
    SimulatedStep rec;
    rec.step = k;
    rec.action_text = step.action_text;
    rec.object_slots = action.slots;

    // Pre phase: the first step emits its own pre frames; later steps reuse
    // the previous step's post frames.
    if (k == 0) {
      rec.first_frame = frame_idx;
      rec.pre = {0, step.pre_frames};
      for (std::size_t i = 0; i < step.pre_frames; ++i) {
        timed_events(frame_idx, world);
        emit(world, k, Phase::Pre, world);
      }
    } else {
      rec.first_frame = frame_idx - step.pre_frames;
      rec.pre = {0, step.pre_frames};
    }

    const WorldState before_core = world;
    const bool pre_ok = precondition_holds(world, action);
    bool grasp_failed = false;
    if (action.kind == ActionKind::PickUp) {
      ++pick_counter;
      for (const auto& e : script.events)
        if (e.kind == EventKind::GraspFailure && e.attempt == pick_counter) grasp_failed = true;
    }

    // Core phase: robot in motion.
    rec.core = {rec.pre.end, rec.pre.end + step.core_frames};
    bool spill_during_core = false;
    for (std::size_t i = 0; i < step.core_frames; ++i) {
      timed_events(frame_idx, world);
      if (world.spill && action.kind == ActionKind::Pour) spill_during_core = true;
      WorldState w = world;
      w.busy = true;
      emit(w, k, Phase::Core, before_core);
    }

    rec.success = pre_ok && !grasp_failed && !spill_during_core;
    if (rec.success) world = apply_effect(world, action);

    // Post phase: effects (or their absence) are observable.
    // Shared boundary frames belong to this step's post segment and the next
    // step's pre segment; they are annotated with the current action.
    rec.post = {rec.core.end, rec.core.end + step.post_frames};
    for (std::size_t i = 0; i < step.post_frames; ++i) {
      timed_events(frame_idx, world);
      emit(world, k, Phase::Post, before_core);
    }
    sim.steps.push_back(rec);
  }
  return sim;
}

// Live frame + ground-truth-phase stream for the monitor harness.
inline std::vector<StreamFrame> stream_frames(const ScenarioScript& script, std::uint64_t seed) {
  return simulate(script, seed).frames;
}

// ---------------------------------------------------------------------------
// Demonstration generation: one demonstration per scripted action, with frame
// files written once and shared across overlapping records.

struct GeneratedDemos {
  std::vector<corpus::Demonstration> demos;
  std::vector<std::string> frame_files;  // stream order
};

inline GeneratedDemos generate_demo(const ScenarioScript& script, std::uint64_t seed,
                                    const std::filesystem::path& frames_dir) {
  const Simulation sim = simulate(script, seed);
  std::error_code ec;
  std::filesystem::create_directories(frames_dir, ec);
  if (ec) throw IoError("cannot create frames directory " + frames_dir.string());
  GeneratedDemos out;
  out.frame_files.reserve(sim.frames.size());
  for (const auto& f : sim.frames) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.json", f.index);
    const std::filesystem::path path = frames_dir / name;
    write_frame(f.world, path);
    out.frame_files.push_back(path.string());
  }
  for (const auto& step : sim.steps) {
    corpus::Demonstration d;
    d.id = script.id + "_a" + std::to_string(step.step);
    d.action_text = step.action_text;
    d.object_slots = step.object_slots;
    d.success = step.success;
    d.camera_id = "cam0";
    d.pre = step.pre;
    d.core = step.core;
    d.post = step.post;
    const std::size_t n = step.post.end;
    for (std::size_t i = 0; i < n; ++i) d.frames.push_back(out.frame_files[step.first_frame + i]);
    corpus::validate_demo(d);
    out.demos.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical scripts and the toy corpus

// A five-action serve-and-clean chain. With `spill_mid_pour` the pour fails
// and the remaining actions double as the spill recovery: the cleanup states
// the monitor steers through after an anomaly are part of the corpus.
inline ScenarioScript make_session_script(const std::string& id, const std::string& bottle,
                                          Rng& rng, std::size_t pre = 10, std::size_t core = 6,
                                          std::size_t post = 10, bool spill_mid_pour = false) {
  ScenarioScript s;
  s.id = id;
  std::set<Cell> used;
  const auto free_cell = [&] {
    for (;;) {
      Cell c{static_cast<int>(rng.uniform_int(kTableSize)),
             static_cast<int>(rng.uniform_int(kTableSize))};
      if (used.insert(c).second) return c;
    }
  };
  s.initial_objects[bottle] = ObjectState{true, free_cell(), false};
  s.initial_objects["cup"] = ObjectState{true, free_cell(), false};
  s.initial_objects["cloth"] = ObjectState{true, free_cell(), false};
  const auto step = [&](const std::string& tmpl, std::vector<std::string> slots) {
    ActionStep st;
    st.object_slots = std::move(slots);
    st.action_text = corpus::instantiate_template(tmpl, st.object_slots);
    st.pre_frames = pre;
    st.core_frames = core;
    st.post_frames = post;
    return st;
  };
  s.steps = {step("pick up {0}", {bottle}),
             step("pour {0} into {1}", {bottle, "cup"}),
             step("place {0} on {1}", {bottle, "table"}),
             step("pick up {0}", {"cloth"}),
             step("wipe {0}", {"table"})};
  if (spill_mid_pour) {
    ScriptEvent e{};
    e.kind = EventKind::Spill;
    e.frame = pre + core + post + core / 2;  // mid pour core
    s.events = {e};
  }
  return s;
}

inline ScenarioScript make_failed_pour_script(const std::string& id, const std::string& bottle,
                                              Rng& rng, std::size_t pre = 10, std::size_t core = 6,
                                              std::size_t post = 10) {
  ScenarioScript s;
  s.id = id;
  std::set<Cell> used;
  const auto free_cell = [&] {
    for (;;) {
      Cell c{static_cast<int>(rng.uniform_int(kTableSize)),
             static_cast<int>(rng.uniform_int(kTableSize))};
      if (used.insert(c).second) return c;
    }
  };
  s.initial_objects[bottle] = ObjectState{false, Cell{0, 0}, false};
  s.initial_objects["cup"] = ObjectState{true, free_cell(), false};
  s.initial_objects["cloth"] = ObjectState{true, free_cell(), false};
  s.initially_held = bottle;
  ActionStep st;
  st.object_slots = {bottle, "cup"};
  st.action_text = corpus::instantiate_template("pour {0} into {1}", st.object_slots);
  st.pre_frames = pre;
  st.core_frames = core;
  st.post_frames = post;
  s.steps = {st};
  // Spill mid-core so the pre segment stays clean.
  ScriptEvent e{};
  e.kind = EventKind::Spill;
  e.frame = pre + core / 2;
  s.events = {e};
  return s;
}

struct ToyCorpusConfig {
  std::size_t nominal_sessions = 60;  // 5 successful demos each
  std::size_t spill_sessions = 25;    // 4 successful + 1 failed pour each
  std::size_t failed_pours = 115;     // single failed demonstrations
  std::uint64_t seed = 1234;
  std::size_t pre = 10, core = 6, post = 10;
};

// Generates the desk-scale dataset: manifest, frame files and augmentation
// rules. The default mix lands on 400 successful + 140 failed
// demonstrations, with spill-recovery sessions keeping cleanup states in
// distribution.
inline corpus::DemonstrationSet make_toy_corpus(const ToyCorpusConfig& cfg,
                                                const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "frames");
  corpus::DemonstrationSet set;
  for (std::size_t i = 0; i < cfg.nominal_sessions + cfg.spill_sessions; ++i) {
    const bool spill = i >= cfg.nominal_sessions;
    Rng rng = Rng::split(cfg.seed, "session" + std::to_string(i));
    char sid[32];
    std::snprintf(sid, sizeof(sid), "%c%03zu", spill ? 'r' : 's', i);
    const std::string bottle = i % 2 == 0 ? "bottle" : "juice";
    const ScenarioScript script =
        make_session_script(sid, bottle, rng, cfg.pre, cfg.core, cfg.post, spill);
    auto gen = generate_demo(script, cfg.seed + i, out_dir / "frames" / sid);
    for (auto& d : gen.demos) set.demos.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < cfg.failed_pours; ++i) {
    Rng rng = Rng::split(cfg.seed, "failpour" + std::to_string(i));
    char sid[32];
    std::snprintf(sid, sizeof(sid), "f%03zu", i);
    const std::string bottle = i % 2 == 0 ? "bottle" : "juice";
    const ScenarioScript script =
        make_failed_pour_script(sid, bottle, rng, cfg.pre, cfg.core, cfg.post);
    auto gen = generate_demo(script, cfg.seed + 100000 + i, out_dir / "frames" / sid);
    for (auto& d : gen.demos) set.demos.push_back(std::move(d));
  }
  std::sort(set.demos.begin(), set.demos.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  set.manifest_path = (out_dir / "manifest.jsonl").string();
  corpus::write_manifest(set, out_dir / "manifest.jsonl");
  return set;
}

// The augmentation rules that hold in the toy world, declared alongside the
// generated manifests.
inline std::vector<corpus::AugmentationRule> toy_augmentation_rules() {
  using corpus::AugmentDirection;
  return {
      {"place {0} on {1}", "pick up {0}", AugmentDirection::PostAsPre},
      {"pick up {0}", "pour {0} into {1}", AugmentDirection::PostAsPre},
      {"pick up {0}", "place {0} on {1}", AugmentDirection::PreAsPost},
  };
}

// ---------------------------------------------------------------------------
// Debug renderer: colored blocks, nothing more.

inline void render_ppm(const WorldState& w, const std::filesystem::path& path) {
  constexpr int scale = 16;
  const int size = kTableSize * scale;
  std::vector<std::array<unsigned char, 3>> img(static_cast<std::size_t>(size) * size,
                                                {230, 230, 230});
  const auto paint = [&](Cell c, std::array<unsigned char, 3> color) {
    for (int y = c.y * scale; y < (c.y + 1) * scale; ++y)
      for (int x = c.x * scale; x < (c.x + 1) * scale; ++x)
        img[static_cast<std::size_t>(y) * size + x] = color;
  };
  if (w.spill)
    for (auto& px : img) px = {250, 220, 180};
  for (const auto& [name, obj] : w.objects) {
    if (!obj.on_table) continue;
    std::array<unsigned char, 3> color{80, 80, 200};
    if (name == "cup") color = {200, 120, 40};
    if (name == "cloth") color = {90, 180, 90};
    if (obj.filled) color = {200, 40, 40};
    paint(obj.cell, color);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write ppm: " + path.string());
  out << "P6\n" << size << " " << size << "\n255\n";
  for (const auto& px : img) out.write(reinterpret_cast<const char*>(px.data()), 3);
}

}  // namespace condmon::synthworld
