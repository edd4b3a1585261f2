#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/errors.hpp"
#include "condmon/rng.hpp"
#include "condmon/tensor.hpp"

namespace condmon::encoders {

using nlohmann::json;

// L^2 per-patch features for one frame.
struct TokenGrid {
  Mat tokens;  // (grid_side^2) x dim
  std::size_t grid_side = 0;
  std::size_t dim = 0;
};

struct SemanticVector {
  Vec values;
};

enum class EncoderKind { Synthetic, Precomputed };

// The frozen-backbone interface. Nothing in this module has trainable state;
// outputs depend only on (spec, input). The text projection is a fixed seeded
// matrix so the text dimension can meet the visual token dimension.
struct EncoderSpec {
  EncoderKind kind = EncoderKind::Synthetic;
  std::size_t grid_side = 16;
  std::size_t native_text_dim = 384;
  std::size_t working_dim = 384;
  Mat projection;  // native_text_dim x working_dim; empty means identity
  std::uint64_t seed = 7;
};

inline EncoderSpec make_encoder_spec(EncoderKind kind, std::size_t grid_side,
                                     std::size_t working_dim, std::size_t native_text_dim,
                                     std::uint64_t seed = 7) {
  if (working_dim == 0) throw ConfigError("encoder working_dim must be positive");
  EncoderSpec spec;
  spec.kind = kind;
  spec.grid_side = grid_side;
  spec.native_text_dim = native_text_dim;
  spec.working_dim = working_dim;
  spec.seed = seed;
  if (native_text_dim != working_dim) {
    Rng rng(Rng::hash_combine(seed, "text-projection"));
    spec.projection = Mat::randn(native_text_dim, working_dim,
                                 1.0 / std::sqrt(static_cast<double>(native_text_dim)), rng);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Feature files: 3 little-endian int32 header values (grid_side, grid_side,
// dim) followed by grid_side^2 * dim little-endian float32 values, row-major.

inline void write_feature_file(const TokenGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file: " + path.string());
  const std::int32_t header[3] = {static_cast<std::int32_t>(grid.grid_side),
                                  static_cast<std::int32_t>(grid.grid_side),
                                  static_cast<std::int32_t>(grid.dim)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> data(grid.tokens.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(grid.tokens.d[i]);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw IoError("short write on feature file: " + path.string());
}

inline TokenGrid read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path.string());
  std::int32_t header[3] = {0, 0, 0};
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || header[0] <= 0 || header[1] <= 0 || header[2] <= 0 || header[0] != header[1])
    throw ParseError("malformed feature file header: " + path.string());
  TokenGrid grid;
  grid.grid_side = static_cast<std::size_t>(header[0]);
  grid.dim = static_cast<std::size_t>(header[2]);
  const std::size_t n = grid.grid_side * grid.grid_side * grid.dim;
  std::vector<float> data(n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw ParseError("truncated feature file: " + path.string());
  grid.tokens = Mat(grid.grid_side * grid.grid_side, grid.dim);
  for (std::size_t i = 0; i < n; ++i) grid.tokens.d[i] = static_cast<double>(data[i]);
  return grid;
}

// ---------------------------------------------------------------------------
// Synthetic visual encoder. Frames are symbolic-state files carrying a flat
// "attrs" map; each named attribute contributes a fixed seeded direction to
// every patch token, so any state change is linearly visible in the features.

namespace detail {

inline std::vector<std::pair<std::string, double>> read_frame_attrs(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open frame file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.contains("attrs") || !j["attrs"].is_object())
    throw ParseError(path.string() + ": frame file has no 'attrs' object");
  std::vector<std::pair<std::string, double>> attrs;
  for (const auto& [key, val] : j["attrs"].items()) attrs.emplace_back(key, val.get<double>());
  std::sort(attrs.begin(), attrs.end());
  return attrs;
}

inline Vec seeded_direction(std::uint64_t seed, const std::string& tag, std::size_t dim) {
  Rng rng(Rng::hash_combine(seed, tag));
  Vec v(dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = rng.normal(0.0, s);
  return v;
}

}  // namespace detail

// Memo for attribute directions; encoding the same frame layout thousands of
// times during training would otherwise redo the seeding work.
struct DirectionCache {
  std::unordered_map<std::string, Vec> dirs;
};

inline TokenGrid render_attrs(const EncoderSpec& spec,
                              const std::vector<std::pair<std::string, double>>& attrs,
                              DirectionCache* cache = nullptr) {
  const std::size_t n_tokens = spec.grid_side * spec.grid_side;
  TokenGrid grid;
  grid.grid_side = spec.grid_side;
  grid.dim = spec.working_dim;
  grid.tokens = Mat(n_tokens, spec.working_dim);
  for (const auto& [name, value] : attrs) {
    if (value == 0.0) continue;
    for (std::size_t t = 0; t < n_tokens; ++t) {
      const std::string tag = name + "#" + std::to_string(t);
      const Vec* dir = nullptr;
      Vec local;
      if (cache) {
        auto it = cache->dirs.find(tag);
        if (it == cache->dirs.end())
          it = cache->dirs.emplace(tag, detail::seeded_direction(spec.seed, tag, spec.working_dim))
                   .first;
        dir = &it->second;
      } else {
        local = detail::seeded_direction(spec.seed, tag, spec.working_dim);
        dir = &local;
      }
      double* row = grid.tokens.row(t);
      for (std::size_t c = 0; c < spec.working_dim; ++c) row[c] += value * (*dir)[c];
    }
  }
  return grid;
}

inline TokenGrid encode_image(const EncoderSpec& spec, const std::filesystem::path& frame) {
  if (spec.kind == EncoderKind::Precomputed) {
    TokenGrid grid = read_feature_file(frame);
    if (grid.grid_side != spec.grid_side || grid.dim != spec.working_dim) {
      std::ostringstream msg;
      msg << "feature file " << frame.string() << ": expected " << spec.grid_side * spec.grid_side
          << " tokens of dim " << spec.working_dim << ", found " << grid.grid_side * grid.grid_side
          << " tokens of dim " << grid.dim;
      throw ShapeError(msg.str());
    }
    return grid;
  }
  return render_attrs(spec, detail::read_frame_attrs(frame));
}

// ---------------------------------------------------------------------------
// Synthetic text encoder: hashed word unigrams and bigrams summed on the unit
// sphere, then projected to the working dimension.

inline SemanticVector encode_text(const EncoderSpec& spec, const std::string& text) {
  if (text.empty()) throw InputError("encode_text: empty text");
  std::vector<std::string> words;
  std::string w;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      w += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!w.empty()) {
      words.push_back(std::move(w));
      w.clear();
    }
  }
  if (!w.empty()) words.push_back(std::move(w));
  if (words.empty()) throw InputError("encode_text: no tokens in text");

  Vec native(spec.native_text_dim, 0.0);
  const auto add_gram = [&](const std::string& gram) {
    const Vec dir = detail::seeded_direction(spec.seed, "txt|" + gram, spec.native_text_dim);
    for (std::size_t i = 0; i < native.size(); ++i) native[i] += dir[i];
  };
  for (const auto& word : words) add_gram(word);
  for (std::size_t i = 0; i + 1 < words.size(); ++i) add_gram(words[i] + " " + words[i + 1]);

  const double n = norm(native);
  if (n > 0)
    for (auto& x : native) x /= n;

  SemanticVector out;
  if (spec.projection.size() == 0) {
    out.values = std::move(native);
  } else {
    out.values.assign(spec.working_dim, 0.0);
    for (std::size_t i = 0; i < spec.native_text_dim; ++i) {
      const double xi = native[i];
      if (xi == 0.0) continue;
      const double* prow = spec.projection.row(i);
      for (std::size_t j = 0; j < spec.working_dim; ++j) out.values[j] += xi * prow[j];
    }
  }
  const double on = norm(out.values);
  if (on > 0)
    for (auto& x : out.values) x /= on;
  return out;
}

// ---------------------------------------------------------------------------
// Feature precomputation

struct FeatureIndex {
  std::filesystem::path root;
  // (demo id, frame index) -> feature file path relative to root
  std::map<std::pair<std::string, std::size_t>, std::string> entries;
};

inline void write_feature_index(const FeatureIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write feature index: " + path.string());
  for (const auto& [key, rel] : index.entries)
    out << key.first << "\t" << key.second << "\t" << rel << "\n";
}

inline FeatureIndex load_feature_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature index: " + path.string());
  FeatureIndex index;
  index.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, idx, rel;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, idx, '\t') || !std::getline(ss, rel))
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    index.entries[{id, std::stoul(idx)}] = rel;
  }
  return index;
}

// One feature file per frame. Rerunning over existing output rewrites the
// same bytes, so the operation is idempotent.
inline FeatureIndex precompute_features(const EncoderSpec& spec,
                                        const corpus::DemonstrationSet& set,
                                        const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "features", ec);
  if (ec) throw IoError("cannot create feature directory under " + out_dir.string());
  FeatureIndex index;
  index.root = out_dir;
  for (const auto& d : set.demos) {
    for (std::size_t i = 0; i < d.frame_count(); ++i) {
      if (!std::filesystem::exists(d.frames[i]))
        throw IoError("missing frame file: " + d.frames[i]);
      const TokenGrid grid = encode_image(spec, d.frames[i]);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%06zu.feat", d.id.c_str(), i);
      const std::string rel = std::string("features/") + name;
      write_feature_file(grid, out_dir / rel);
      index.entries[{d.id, i}] = rel;
    }
  }
  write_feature_index(index, out_dir / "index.tsv");
  return index;
}

// Rewrites a demonstration set so frames point at precomputed feature files.
inline corpus::DemonstrationSet derive_precomputed_set(const corpus::DemonstrationSet& set,
                                                       const FeatureIndex& index) {
  corpus::DemonstrationSet out = set;
  for (auto& d : out.demos) {
    for (std::size_t i = 0; i < d.frame_count(); ++i) {
      const auto it = index.entries.find({d.id, i});
      if (it == index.entries.end())
        throw InputError("feature index has no entry for (" + d.id + ", " + std::to_string(i) +
                         ")");
      d.frames[i] = (index.root / it->second).string();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Caching wrapper used by the training loop and the monitor. Frames are
// immutable, so grids are cached by path; text vectors by string.

class FrameEncoder {
 public:
  explicit FrameEncoder(EncoderSpec spec) : spec_(std::move(spec)) {}

  const EncoderSpec& spec() const { return spec_; }

  const TokenGrid& image(const std::string& frame) {
    auto it = image_cache_.find(frame);
    if (it == image_cache_.end()) {
      TokenGrid grid = spec_.kind == EncoderKind::Synthetic
                           ? render_attrs(spec_, detail::read_frame_attrs(frame), &dir_cache_)
                           : encode_image(spec_, frame);
      it = image_cache_.emplace(frame, std::move(grid)).first;
    }
    return it->second;
  }

  const SemanticVector& text(const std::string& t) {
    auto it = text_cache_.find(t);
    if (it == text_cache_.end()) it = text_cache_.emplace(t, encode_text(spec_, t)).first;
    return it->second;
  }

 private:
  EncoderSpec spec_;
  DirectionCache dir_cache_;
  std::unordered_map<std::string, TokenGrid> image_cache_;
  std::unordered_map<std::string, SemanticVector> text_cache_;
};

}  // namespace condmon::encoders
