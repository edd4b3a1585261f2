#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/encoders.hpp"
#include "condmon/errors.hpp"
#include "condmon/net.hpp"
#include "condmon/synthworld.hpp"

namespace condmon::monitor {

using corpus::PhaseLabel;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Skill phases and the expected-state rule

enum class SkillPhase { Pre, Core, Effect };

inline const char* to_string(SkillPhase p) {
  switch (p) {
    case SkillPhase::Pre: return "pre";
    case SkillPhase::Core: return "core";
    case SkillPhase::Effect: return "effect";
  }
  return "?";
}

// Suspended is represented as an empty optional: the mid-action state is
// ambiguous, so no expectation is checked.
using ExpectedPhase = std::optional<PhaseLabel>;

inline ExpectedPhase expected_phase(SkillPhase active) {
  switch (active) {
    case SkillPhase::Pre: return PhaseLabel::Precondition;
    case SkillPhase::Core: return std::nullopt;
    case SkillPhase::Effect: return PhaseLabel::Effect;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Anomaly filter: a mismatch must persist for 8 consecutive frames under one
// expected phase before it counts. Matches, suspension and expected-phase
// changes all reset the counter.

struct FilterState {
  int consecutive_mismatch_count = 0;
  int threshold = 8;
  ExpectedPhase last_expected;
};

inline bool filter_update(FilterState& state, ExpectedPhase expected, PhaseLabel predicted) {
  if (!expected) {
    state.consecutive_mismatch_count = 0;
    state.last_expected = std::nullopt;
    return false;
  }
  if (state.last_expected != expected) state.consecutive_mismatch_count = 0;
  state.last_expected = expected;
  if (predicted == *expected) {
    state.consecutive_mismatch_count = 0;
    return false;
  }
  ++state.consecutive_mismatch_count;
  return state.consecutive_mismatch_count >= state.threshold;
}

// ---------------------------------------------------------------------------
// Skills: pre and core run on simulated timers; the effect phase only checks
// for completion, for at most effect_window frames.

struct SkillSpec {
  std::string name;
  std::string action_text;
  std::size_t pre_frames = 10;
  std::size_t core_frames = 6;
  std::size_t effect_window = 30;
};

inline void validate_skill(const SkillSpec& s) {
  if (s.action_text.empty()) throw ValidationError("skill '" + s.name + "' has no action text");
  if (s.core_frames == 0)
    throw ValidationError("skill '" + s.name + "' must have a core motion timer");
  if (s.effect_window <= 8)
    throw ValidationError("skill '" + s.name +
                          "': effect window must exceed the 8-frame anomaly filter");
}

// ---------------------------------------------------------------------------
// Behavior tree

enum class NodeKind { Selector, Sequence, Action, Condition };

enum class Status { Success, Failure, Running };

struct Blackboard {
  bool anomaly = false;
  std::map<std::string, bool> flags;
  // Which skill consumed the current frame, filled in during the tick.
  std::optional<std::pair<std::string, SkillPhase>> consumed;
};

struct BTNode {
  NodeKind kind = NodeKind::Action;
  std::string name;
  std::vector<std::unique_ptr<BTNode>> children;
  std::string skill;  // action nodes
  std::string flag;   // condition nodes

  // Runtime state (action nodes). Terminal status latches: every scripted
  // task runs once.
  bool started = false;
  SkillPhase phase = SkillPhase::Pre;
  std::size_t frames_in_phase = 0;
  std::optional<Status> latched;

  void reset() {
    started = false;
    phase = SkillPhase::Pre;
    frames_in_phase = 0;
    latched.reset();
    for (auto& c : children) c->reset();
  }
};

inline void validate_tree(const BTNode& node, const std::map<std::string, SkillSpec>& skills) {
  switch (node.kind) {
    case NodeKind::Selector:
    case NodeKind::Sequence:
      if (node.children.empty())
        throw ValidationError("composite node '" + node.name + "' has no children");
      for (const auto& c : node.children) validate_tree(*c, skills);
      break;
    case NodeKind::Action:
      if (!skills.count(node.skill))
        throw ValidationError("action node references unknown skill '" + node.skill + "'");
      break;
    case NodeKind::Condition:
      if (node.flag.empty())
        throw ValidationError("condition node '" + node.name + "' has no flag");
      break;
  }
}

// One tick per frame. An action node consumes the frame by advancing its
// phase timers; a raised anomaly flag fails the running action so the parent
// selector can move to the next branch in the same tick.
inline Status tick(BTNode& node, const std::map<std::string, SkillSpec>& skills, Blackboard& bb) {
  switch (node.kind) {
    case NodeKind::Selector: {
      for (auto& child : node.children) {
        const Status st = tick(*child, skills, bb);
        if (st != Status::Failure) return st;
      }
      return Status::Failure;
    }
    case NodeKind::Sequence: {
      for (auto& child : node.children) {
        const Status st = tick(*child, skills, bb);
        if (st != Status::Success) return st;
      }
      return Status::Success;
    }
    case NodeKind::Condition:
      return bb.flags[node.flag] ? Status::Success : Status::Failure;
    case NodeKind::Action: {
      if (node.latched) return *node.latched;
      if (bb.consumed) return Status::Running;  // one frame per tick, already spent
      const SkillSpec& skill = skills.at(node.skill);
      if (!node.started) {
        node.started = true;
        node.phase = skill.pre_frames > 0 ? SkillPhase::Pre : SkillPhase::Core;
        node.frames_in_phase = 0;
        bb.anomaly = false;  // a newly started branch clears stale flags
      } else if (bb.anomaly) {
        // The flag can only have been raised by this node's own pre or
        // effect frames (core is suspended, starting cleared older flags).
        // Pre-phase anomalies halt the action, effect-phase anomalies mean
        // it did not complete; the branch fails either way.
        node.latched = Status::Failure;
        return Status::Failure;
      }
      bb.consumed = {{node.skill, node.phase}};
      ++node.frames_in_phase;
      switch (node.phase) {
        case SkillPhase::Pre:
          if (node.frames_in_phase >= skill.pre_frames) {
            node.phase = SkillPhase::Core;
            node.frames_in_phase = 0;
          }
          break;
        case SkillPhase::Core:
          if (node.frames_in_phase >= skill.core_frames) {
            node.phase = SkillPhase::Effect;
            node.frames_in_phase = 0;
          }
          break;
        case SkillPhase::Effect:
          if (node.frames_in_phase >= skill.effect_window) {
            node.latched = Status::Success;
            return Status::Success;
          }
          break;
      }
      return Status::Running;
    }
  }
  return Status::Failure;
}

// ---------------------------------------------------------------------------
// Tree definition files

struct TreeSpec {
  std::map<std::string, SkillSpec> skills;
  std::unique_ptr<BTNode> root;
};

namespace detail {

inline std::unique_ptr<BTNode> node_from_json(const json& j) {
  auto node = std::make_unique<BTNode>();
  const std::string kind = j.at("kind").get<std::string>();
  node->name = j.value("name", kind);
  if (kind == "selector")
    node->kind = NodeKind::Selector;
  else if (kind == "sequence")
    node->kind = NodeKind::Sequence;
  else if (kind == "action")
    node->kind = NodeKind::Action;
  else if (kind == "condition")
    node->kind = NodeKind::Condition;
  else
    throw ParseError("unknown node kind: " + kind);
  node->skill = j.value("skill", "");
  node->flag = j.value("flag", "");
  for (const auto& c : j.value("children", json::array()))
    node->children.push_back(node_from_json(c));
  return node;
}

}  // namespace detail

inline TreeSpec load_tree(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tree file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  TreeSpec spec;
  for (const auto& [name, sk] : j.at("skills").items()) {
    SkillSpec s;
    s.name = name;
    s.action_text = sk.at("action").get<std::string>();
    s.pre_frames = sk.value("pre", 10u);
    s.core_frames = sk.value("core", 6u);
    s.effect_window = sk.value("effect_window", 30u);
    validate_skill(s);
    spec.skills[name] = s;
  }
  spec.root = detail::node_from_json(j.at("root"));
  validate_tree(*spec.root, spec.skills);
  return spec;
}

// ---------------------------------------------------------------------------
// Monitor loop

struct MonitorEvent {
  std::size_t frame = 0;
  std::string action;  // active skill's action text, or "idle"
  std::string phase;   // pre/core/effect/idle
  ExpectedPhase expected;
  PhaseLabel predicted = PhaseLabel::Unsatisfied;
  std::array<double, 3> confidence{0.0, 0.0, 0.0};
  int filter_count = 0;
  bool anomaly = false;
  bool truncated = false;
};

inline json event_to_json(const MonitorEvent& e) {
  json j;
  j["frame"] = e.frame;
  j["action"] = e.action;
  j["phase"] = e.phase;
  j["expected"] = e.expected ? json(corpus::to_string(*e.expected)) : json(nullptr);
  j["predicted"] = corpus::to_string(e.predicted);
  j["confidence"] = e.confidence;
  j["filter_count"] = e.filter_count;
  j["anomaly"] = e.anomaly;
  if (e.truncated) j["truncated"] = true;
  return j;
}

inline void write_event_log(const std::vector<MonitorEvent>& events,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write event log: " + path.string());
  for (const auto& e : events) out << event_to_json(e).dump() << "\n";
}

// Prediction source: phase plus softmax confidences for (frame, action).
using Predictor = std::function<std::pair<PhaseLabel, std::array<double, 3>>(
    const synthworld::StreamFrame&, const std::string& action)>;

inline PhaseLabel argmax_phase(const std::array<double, 3>& confidence) {
  // Ties break toward unsatisfied: flagging is the conservative choice.
  PhaseLabel best = PhaseLabel::Precondition;
  double best_p = confidence[0];
  for (int k = 1; k < 3; ++k)
    if (confidence[static_cast<std::size_t>(k)] >= best_p) {
      best_p = confidence[static_cast<std::size_t>(k)];
      best = static_cast<PhaseLabel>(k);
    }
  return best;
}

// Model-backed predictor with read-only weights.
inline Predictor make_model_predictor(const net::NetState& state, const net::NetConfig& cfg,
                                      encoders::FrameEncoder& encoder) {
  return [&state, &cfg, &encoder](const synthworld::StreamFrame& frame,
                                  const std::string& action) {
    encoders::TokenGrid grid =
        encoders::render_attrs(encoder.spec(), synthworld::world_attrs(frame.world));
    const auto& sem = encoder.text(action);
    const net::ForwardResult fr = net::forward(state, cfg, grid, sem);
    const double lse = logsumexp(fr.logits.data(), 3);
    std::array<double, 3> conf{};
    for (int k = 0; k < 3; ++k)
      conf[static_cast<std::size_t>(k)] = std::exp(fr.logits[static_cast<std::size_t>(k)] - lse);
    return std::make_pair(argmax_phase(conf), conf);
  };
}

// Symbolic-oracle predictor: ground truth for whatever action is queried.
inline Predictor make_oracle_predictor() {
  return [](const synthworld::StreamFrame& frame, const std::string& action) {
    const PhaseLabel p = synthworld::world_effect_oracle(frame.world, action, frame.world);
    std::array<double, 3> conf{0.0, 0.0, 0.0};
    conf[static_cast<std::size_t>(static_cast<int>(p))] = 1.0;
    return std::make_pair(p, conf);
  };
}

// Ticks the tree once per frame, runs inference for the action that consumed
// the frame, and posts filtered anomaly flags to the blackboard (they take
// effect at the next tick, i.e. with one frame of inference lag).
inline std::vector<MonitorEvent> run_monitor(TreeSpec& tree, const Predictor& predict,
                                             const std::vector<synthworld::StreamFrame>& stream) {
  validate_tree(*tree.root, tree.skills);
  std::vector<MonitorEvent> events;
  events.reserve(stream.size());
  Blackboard bb;
  FilterState filter;
  Status root_status = Status::Running;
  for (const auto& frame : stream) {
    bb.consumed.reset();
    root_status = tick(*tree.root, tree.skills, bb);
    MonitorEvent ev;
    ev.frame = frame.index;
    if (bb.consumed) {
      const auto& [skill_name, phase] = *bb.consumed;
      const SkillSpec& skill = tree.skills.at(skill_name);
      ev.action = skill.action_text;
      ev.phase = to_string(phase);
      ev.expected = expected_phase(phase);
      const auto [predicted, conf] = predict(frame, skill.action_text);
      ev.predicted = predicted;
      ev.confidence = conf;
      ev.anomaly = filter_update(filter, ev.expected, predicted);
      ev.filter_count = filter.consecutive_mismatch_count;
      bb.anomaly = bb.anomaly || ev.anomaly;
    } else {
      // Nothing runnable: idle fallback, no expectations checked.
      ev.action = "idle";
      ev.phase = "idle";
      ev.expected = std::nullopt;
      filter_update(filter, std::nullopt, PhaseLabel::Unsatisfied);
      ev.filter_count = 0;
    }
    events.push_back(ev);
  }
  if (root_status == Status::Running && !events.empty()) {
    // Stream ended mid-action: mark the log rather than raising.
    events.back().truncated = true;
  }
  return events;
}

// ---------------------------------------------------------------------------
// Timeline plot: a static SVG with per-class confidences, phase bands and
// anomaly marks.

inline void write_timeline_svg(const std::vector<MonitorEvent>& events,
                               const std::filesystem::path& path) {
  if (events.empty()) throw InputError("timeline plot: no events");
  const double w_per_frame = 6.0;
  const int height = 220, plot_h = 150, top = 30;
  const double width = static_cast<double>(events.size()) * w_per_frame + 80;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write timeline: " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n";
  // Phase bands: hue per action, saturation per phase.
  std::map<std::string, int> action_hue;
  for (const auto& e : events)
    if (!action_hue.count(e.action))
      action_hue[e.action] = static_cast<int>(action_hue.size()) * 67 % 360;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    const int hue = action_hue[e.action];
    const int sat = e.phase == "pre" ? 80 : e.phase == "core" ? 50 : e.phase == "effect" ? 25 : 5;
    out << "<rect x='" << 40 + static_cast<double>(i) * w_per_frame << "' y='" << top
        << "' width='" << w_per_frame << "' height='" << plot_h << "' fill='hsl(" << hue << ","
        << sat << "%,85%)'/>\n";
  }
  const char* colors[3] = {"#2b6cb0", "#2f855a", "#c53030"};
  for (int c = 0; c < 3; ++c) {
    out << "<polyline fill='none' stroke='" << colors[c] << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < events.size(); ++i) {
      const double y =
          top + plot_h - events[i].confidence[static_cast<std::size_t>(c)] * (plot_h - 4);
      out << 40 + static_cast<double>(i) * w_per_frame + w_per_frame / 2 << "," << y << " ";
    }
    out << "'/>\n";
  }
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i].anomaly)
      out << "<circle cx='" << 40 + static_cast<double>(i) * w_per_frame + w_per_frame / 2
          << "' cy='" << top + plot_h + 12 << "' r='3' fill='#c53030'/>\n";
  out << "<text x='40' y='18' font-size='12' font-family='sans-serif'>phase confidences "
         "(blue=precondition, green=effect, red=unsatisfied); dots mark anomalies</text>\n";
  out << "</svg>\n";
}

}  // namespace condmon::monitor
